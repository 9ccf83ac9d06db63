#include "morvit/optim.hpp"

#include <cmath>

namespace morvit {

OptimizerState OptimizerState::from_config(const TrainConfig& config) {
    OptimizerState s;
    s.lr = config.lr;
    s.beta1 = config.adam_beta1;
    s.beta2 = config.adam_beta2;
    s.eps = config.adam_eps;
    return s;
}

void adam_step(std::span<Tensor> params, std::span<const Tensor> grads, OptimizerState& state) {
    if (params.size() != grads.size()) {
        throw ShapeError("adam_step: " + std::to_string(params.size()) + " parameters but " +
                         std::to_string(grads.size()) + " gradients");
    }
    if (state.m.empty() && state.v.empty()) {
        for (const auto& p : params) {
            state.m.push_back(Tensor::zeros(p.shape()));
            state.v.push_back(Tensor::zeros(p.shape()));
        }
    }
    if (state.m.size() != params.size() || state.v.size() != params.size()) {
        throw ShapeError("adam_step: optimizer holds " + std::to_string(state.m.size()) +
                         " moments for " + std::to_string(params.size()) + " parameters");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (grads[i].shape() != params[i].shape() || state.m[i].shape() != params[i].shape() ||
            state.v[i].shape() != params[i].shape()) {
            throw ShapeError("adam_step: parameter " + std::to_string(i) + " has shape " +
                             to_string(params[i].shape()) + " but gradient " +
                             to_string(grads[i].shape()) + " and moment " +
                             to_string(state.m[i].shape()));
        }
    }

    state.step += 1;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(state.beta1, t);
    const double c2 = 1.0 - std::pow(state.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto g = grads[i].to_vector();
        auto m = state.m[i].mutable_data<double>();
        auto v = state.v[i].mutable_data<double>();
        const std::size_t n = g.size();
        if (params[i].dtype() == DType::f64) {
            auto p = params[i].mutable_data<double>();
            for (std::size_t j = 0; j < n; ++j) {
                m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
                v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
                p[j] -= state.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + state.eps);
            }
        } else {
            auto p = params[i].mutable_data<float>();
            for (std::size_t j = 0; j < n; ++j) {
                m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
                v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
                p[j] = static_cast<float>(p[j] - state.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + state.eps));
            }
        }
    }
}

void adam_step(std::span<Tensor> params, OptimizerState& state) {
    std::vector<Tensor> grads;
    grads.reserve(params.size());
    for (const auto& p : params) {
        grads.push_back(p.has_grad() ? p.grad() : Tensor::zeros(p.shape(), p.dtype()));
    }
    adam_step(params, grads, state);
}

} // namespace morvit
