#include "morvit/model.hpp"

#include <cmath>

namespace morvit {

ModelParams ModelParams::init(const ModelConfig& config) {
    config.validate();
    Rng rng(config.seed);
    ModelParams p;
    p.embed = init_embed(config, rng);
    for (std::size_t b = 0; b < config.num_blocks(); ++b) {
        p.blocks.push_back(init_block(config.hidden, config.mlp_size, rng));
    }
    p.router = init_router(config, rng);
    return p;
}

NamedTensors ModelParams::named() {
    NamedTensors out;
    embed.collect("embed.", out);
    for (std::size_t b = 0; b < blocks.size(); ++b) {
        blocks[b].collect("block" + std::to_string(b) + ".", out);
    }
    router.collect("router.", out);
    return out;
}

std::vector<Tensor> ModelParams::tensors() {
    std::vector<Tensor> out;
    for (auto& [name, t] : named()) {
        out.push_back(*t);
    }
    return out;
}

ModelParams ModelParams::clone(DType dtype) const {
    ModelParams copy = *this;
    for (auto& [name, t] : copy.named()) {
        const bool trainable = t->requires_grad();
        *t = t->to(dtype);
        t->set_requires_grad(trainable);
    }
    return copy;
}

std::size_t ModelParams::count() const {
    std::size_t n = 0;
    ModelParams handles = *this;
    for (auto& [name, t] : handles.named()) {
        n += t->numel();
    }
    return n;
}

LossSpec loss_spec(const ModelConfig& config) { return {config.lambda, 1.0 - config.beta}; }

std::vector<RoutingTrace> ForwardResult::traces() const {
    std::vector<RoutingTrace> out;
    out.reserve(samples.size());
    for (const auto& s : samples) {
        out.push_back(s.trace);
    }
    return out;
}

SampleRouting forward_sample(const Tensor& image, const ModelParams& params,
                             const ModelConfig& config, Tensor& logits, const RoutingHooks* hooks) {
    const Tensor z0 = embed(patchify(image, config.patch_size), params.embed);
    RecursionParams rp{&params.blocks, &params.router, &config, hooks};
    auto rec = run_recursion(z0, rp);
    const std::size_t cls_row[] = {0};
    logits = classify(gather_rows(rec.hidden, cls_row), params.embed.head);
    return {std::move(rec.trace), std::move(rec.step_scores), std::move(rec.depth_logits)};
}

ForwardResult forward(std::span<const Tensor> images, const ModelParams& params,
                      const ModelConfig& config, const RoutingHooks* hooks) {
    if (images.empty()) {
        throw ShapeError("forward: empty batch");
    }
    ForwardResult result;
    std::vector<Tensor> rows;
    rows.reserve(images.size());
    for (const auto& image : images) {
        if (image.rank() != 3 || image.dim(0) != config.image_h || image.dim(1) != config.image_w ||
            image.dim(2) != config.channels) {
            throw ShapeError("forward: image shape " + to_string(image.shape()) +
                             " does not match config " + std::to_string(config.image_h) + "x" +
                             std::to_string(config.image_w) + "x" + std::to_string(config.channels));
        }
        Tensor logits;
        result.samples.push_back(forward_sample(image, params, config, logits, hooks));
        rows.push_back(std::move(logits));
    }
    result.logits = rows.size() == 1 ? rows[0] : concat_rows(rows);
    return result;
}

Tensor task_loss(const Tensor& logits, std::span<const std::size_t> labels) {
    return cross_entropy(logits, labels);
}

namespace {

Tensor gate_term(const SampleRouting& s, double kappa) {
    std::vector<Tensor> terms;
    for (const auto& scores : s.step_scores) {
        terms.push_back(square(add_scalar(mean(scores), -kappa)));
    }
    if (terms.empty()) {
        return {};
    }
    Tensor total = terms[0];
    for (std::size_t i = 1; i < terms.size(); ++i) {
        total = add(total, terms[i]);
    }
    return scale(total, 1.0 / static_cast<double>(terms.size()));
}

// Survival probability P(depth >= r) averaged over tokens vs kappa^(r-1).
Tensor budget_term(const Tensor& depth_logits, double kappa) {
    const std::size_t n = depth_logits.dim(0);
    const std::size_t r = depth_logits.dim(1);
    const DType dt = depth_logits.dtype();
    const Tensor probs = softmax_rows(depth_logits);
    const Tensor avg = matmul(Tensor::full({1, n}, 1.0 / static_cast<double>(n), dt), probs);
    std::vector<double> upper(r * r, 0.0);
    std::vector<double> target(r);
    for (std::size_t j = 0; j < r; ++j) {
        for (std::size_t k = 0; k <= j; ++k) {
            upper[j * r + k] = 1.0;
        }
        target[j] = std::pow(kappa, static_cast<double>(j));
    }
    const Tensor survival = matmul(avg, Tensor::from({r, r}, std::move(upper), dt));
    return mean(square(sub(survival, Tensor::from({1, r}, std::move(target), dt))));
}

} // namespace

Tensor routing_loss(std::span<const SampleRouting> samples, double keep_fraction) {
    if (samples.empty()) {
        throw ShapeError("routing_loss: no samples");
    }
    Tensor total;
    for (const auto& s : samples) {
        Tensor term = gate_term(s, keep_fraction);
        if (s.depth_logits.defined()) {
            Tensor budget = budget_term(s.depth_logits, keep_fraction);
            term = term.defined() ? add(term, budget) : budget;
        }
        if (term.defined()) {
            total = total.defined() ? add(total, term) : term;
        }
    }
    if (!total.defined()) {
        return Tensor::scalar(0.0);
    }
    return scale(total, 1.0 / static_cast<double>(samples.size()));
}

Tensor total_loss(const Tensor& logits, std::span<const std::size_t> labels,
                  std::span<const SampleRouting> samples, const LossSpec& spec) {
    if (!(spec.lambda >= 0.0)) {
        throw ConfigError("total_loss: lambda must be non-negative");
    }
    const Tensor task = task_loss(logits, labels);
    if (spec.lambda == 0.0) {
        return task;
    }
    return add(task, scale(routing_loss(samples, spec.keep_fraction), spec.lambda));
}

std::size_t param_count(const ModelConfig& config) {
    const std::size_t d = config.hidden;
    const std::size_t n = config.num_patches();
    const std::size_t big_r = config.max_recursion;
    const std::size_t embed = config.patch_dim() * d + d + d + (n + 1) * d;
    const std::size_t blocks = config.num_blocks() * block_param_count(d, config.mlp_size);
    std::size_t routers = 0;
    if (config.routing_mode != RoutingMode::static_depth) {
        routers = big_r * (d + 1);
        if (config.routing_mode == RoutingMode::token_choice) {
            routers += d * big_r + big_r;
        }
    }
    const std::size_t head = d * config.num_classes + config.num_classes;
    return embed + blocks + routers + head;
}

std::vector<std::size_t> predict(const Tensor& logits) {
    const std::size_t b = logits.dim(0);
    const std::size_t c = logits.dim(1);
    const auto v = logits.to_vector();
    std::vector<std::size_t> out(b);
    for (std::size_t i = 0; i < b; ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < c; ++j) {
            if (v[i * c + j] > v[i * c + best]) {
                best = j;
            }
        }
        out[i] = best;
    }
    return out;
}

} // namespace morvit
