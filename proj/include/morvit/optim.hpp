#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "morvit/config.hpp"
#include "morvit/tensor.hpp"

namespace morvit {

/// Adam moments and hyperparameters. Moments mirror the parameter list.
struct OptimizerState {
    std::vector<Tensor> m;
    std::vector<Tensor> v;
    std::uint64_t step = 0;
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    static OptimizerState from_config(const TrainConfig& config);
};

/// Bias-corrected Adam update, applied in place to the parameter storage:
///   m = b1 m + (1 - b1) g,  v = b2 v + (1 - b2) g^2,
///   p -= lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps).
/// Moments are created on the first call.
void adam_step(std::span<Tensor> params, std::span<const Tensor> grads, OptimizerState& state);

/// Same, reading each parameter's accumulated gradient (zeros when absent).
void adam_step(std::span<Tensor> params, OptimizerState& state);

} // namespace morvit
