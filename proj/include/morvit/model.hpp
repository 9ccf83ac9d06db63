#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "morvit/config.hpp"
#include "morvit/routing.hpp"
#include "morvit/tensor.hpp"
#include "morvit/vit.hpp"

namespace morvit {

/// All trainable tensors of a MoR-ViT model.
struct ModelParams {
    EmbedParams embed;
    /// One shared block, or one block per recursion step when unshared.
    std::vector<BlockParams> blocks;
    RouterParams router;

    /// Deterministic initialization from config.seed.
    static ModelParams init(const ModelConfig& config);

    /// Stable-ordered (name, tensor) list; names are checkpoint keys.
    NamedTensors named();
    std::vector<Tensor> tensors();
    /// Deep copy with independent storage, optionally in another precision.
    ModelParams clone(DType dtype = DType::f64) const;
    std::size_t count() const;
};

struct LossSpec {
    double lambda = 0.01;
    /// Target keep fraction kappa = 1 - beta.
    double keep_fraction = 0.5;
};

LossSpec loss_spec(const ModelConfig& config);

struct SampleRouting {
    RoutingTrace trace;
    std::vector<Tensor> step_scores;
    Tensor depth_logits;
};

struct ForwardResult {
    Tensor logits;  // B x num_classes
    std::vector<SampleRouting> samples;

    std::vector<RoutingTrace> traces() const;
};

/// Forward pass of a batch of H x W x C images, one sample at a time.
ForwardResult forward(std::span<const Tensor> images, const ModelParams& params,
                      const ModelConfig& config, const RoutingHooks* hooks = nullptr);

/// Logits (1 x C) plus routing record for a single image.
SampleRouting forward_sample(const Tensor& image, const ModelParams& params,
                             const ModelConfig& config, Tensor& logits,
                             const RoutingHooks* hooks = nullptr);

/// Softmax cross-entropy averaged over the batch.
Tensor task_loss(const Tensor& logits, std::span<const std::size_t> labels);

/// Mean over steps of (mean gate - kappa)^2, averaged over the batch. In
/// token-choice mode a budget term aligns the predicted survival probability
/// at step r with kappa^(r-1).
Tensor routing_loss(std::span<const SampleRouting> samples, double keep_fraction);

/// L_task + lambda * L_routing.
Tensor total_loss(const Tensor& logits, std::span<const std::size_t> labels,
                  std::span<const SampleRouting> samples, const LossSpec& spec);

/// Closed-form parameter total for a configuration.
std::size_t param_count(const ModelConfig& config);

/// Argmax per row; ties go to the smallest index.
std::vector<std::size_t> predict(const Tensor& logits);

} // namespace morvit
