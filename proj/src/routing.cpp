#include "morvit/routing.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace morvit {

void RouterParams::collect(const std::string& prefix, NamedTensors& out) {
    for (std::size_t r = 0; r < steps.size(); ++r) {
        const std::string p = prefix + "step" + std::to_string(r + 1) + ".";
        out.emplace_back(p + "weight", &steps[r].weight);
        out.emplace_back(p + "bias", &steps[r].bias);
    }
    if (depth_predictor) {
        out.emplace_back(prefix + "depth.weight", &depth_predictor->weight);
        out.emplace_back(prefix + "depth.bias", &depth_predictor->bias);
    }
}

RouterParams init_router(const ModelConfig& config, Rng& rng) {
    RouterParams p;
    if (config.routing_mode == RoutingMode::static_depth) {
        return p;
    }
    const std::size_t d = config.hidden;
    for (std::size_t r = 0; r < config.max_recursion; ++r) {
        std::vector<double> w(d);
        for (auto& v : w) {
            v = rng.truncated_normal(0.02);
        }
        RouterStep step;
        step.weight = Tensor::from({d, 1}, std::move(w)).set_requires_grad();
        step.bias = Tensor::full({1}, config.router_bias_init).set_requires_grad();
        p.steps.push_back(std::move(step));
    }
    if (config.routing_mode == RoutingMode::token_choice) {
        std::vector<double> w(d * config.max_recursion);
        for (auto& v : w) {
            v = rng.truncated_normal(0.02);
        }
        DepthPredictor dp;
        dp.weight = Tensor::from({d, config.max_recursion}, std::move(w)).set_requires_grad();
        dp.bias = Tensor::zeros({config.max_recursion}).set_requires_grad();
        p.depth_predictor = std::move(dp);
    }
    return p;
}

std::vector<bool> StepTrace::mask(std::size_t num_rows) const {
    std::vector<bool> m(num_rows, false);
    if (num_rows > 0) {
        m[0] = true;
    }
    for (auto t : kept) {
        m.at(t) = true;
    }
    return m;
}

std::vector<std::size_t> RoutingTrace::depth_histogram() const {
    std::vector<std::size_t> counts(max_recursion, 0);
    for (auto d : exit_depth) {
        counts.at(d - 1) += 1;
    }
    return counts;
}

double RoutingTrace::mean_exit_depth() const {
    if (exit_depth.empty()) {
        return 0.0;
    }
    const auto total = std::accumulate(exit_depth.begin(), exit_depth.end(), std::size_t{0});
    return static_cast<double>(total) / static_cast<double>(exit_depth.size());
}

TokenState initial_state(const Tensor& z0) {
    const std::size_t rows = z0.dim(0);
    TokenState s;
    s.hidden = z0;
    s.active.assign(rows, true);
    s.gate.assign(rows, 0.0);
    s.gate[0] = 1.0;
    s.exit_depth.assign(rows, 0);
    return s;
}

Tensor routing_score(const Tensor& h_t, const RouterStep& router) {
    const Tensor row = h_t.rank() == 1 ? reshape(h_t, {1, h_t.dim(0)}) : h_t;
    return sigmoid(add(matmul(row, router.weight), router.bias));
}

std::size_t keep_count(std::size_t active, double beta) {
    if (active == 0) {
        return 0;
    }
    const auto k = static_cast<std::size_t>(std::lround((1.0 - beta) * static_cast<double>(active)));
    return std::min(active, std::max<std::size_t>(1, k));
}

Selection select_active(std::span<const double> scores, double beta) {
    if (scores.empty()) {
        throw ShapeError("select_active: empty active set");
    }
    const std::size_t k = keep_count(scores.size(), beta);
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    Selection sel;
    sel.threshold = scores[order[k - 1]];
    sel.kept.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
    std::sort(sel.kept.begin(), sel.kept.end());
    sel.mask.assign(scores.size(), false);
    for (auto i : sel.kept) {
        sel.mask[i] = true;
    }
    return sel;
}

namespace {

const BlockParams& block_for_step(const RecursionParams& params, std::size_t step) {
    const auto& blocks = *params.blocks;
    if (blocks.size() == 1) {
        return blocks[0];
    }
    return blocks.at(step - 1);
}

Tensor router_scores(const Tensor& rows, const RouterStep& router) {
    return sigmoid(add(matmul(rows, router.weight), router.bias));
}

} // namespace

StepResult recursion_step(const TokenState& state, const RecursionParams& params, std::size_t step,
                          std::span<const std::size_t> fixed_depth) {
    const ModelConfig& config = *params.config;
    const RoutingHooks* hooks = params.hooks;
    if (step == 0 || step > config.max_recursion) {
        throw ShapeError("recursion_step: step " + std::to_string(step) + " outside 1.." +
                         std::to_string(config.max_recursion));
    }
    if (!state.active.at(0)) {
        throw ShapeError("recursion_step: class token must stay active");
    }

    StepResult result;
    result.state = state;
    StepTrace& trace = result.trace;
    trace.step = step;
    trace.threshold = std::numeric_limits<double>::quiet_NaN();
    for (std::size_t t = 1; t < state.active.size(); ++t) {
        if (state.active[t]) {
            trace.candidates.push_back(t);
        }
    }

    // Differentiable gates of the kept tokens (K x 1), undefined when constant.
    Tensor kept_gates;
    std::vector<std::size_t> exited;

    switch (config.routing_mode) {
    case RoutingMode::expert_choice: {
        if (trace.candidates.empty()) {
            break;
        }
        const auto& router = params.router->steps.at(step - 1);
        result.scores = router_scores(gather_rows(state.hidden, trace.candidates), router);
        trace.scores = result.scores.to_vector();
        trace.router_tokens = trace.candidates.size();
        std::vector<std::size_t> positions;
        if (hooks && hooks->forced_keep) {
            const auto forced = hooks->forced_keep(step, trace.candidates);
            for (auto t : forced) {
                auto it = std::find(trace.candidates.begin(), trace.candidates.end(), t);
                if (it == trace.candidates.end()) {
                    throw ShapeError("forced_keep returned inactive token " + std::to_string(t));
                }
                positions.push_back(static_cast<std::size_t>(it - trace.candidates.begin()));
            }
            std::sort(positions.begin(), positions.end());
        } else {
            auto sel = select_active(trace.scores, config.beta);
            trace.threshold = sel.threshold;
            positions = std::move(sel.kept);
        }
        std::vector<bool> keep(trace.candidates.size(), false);
        for (auto p : positions) {
            keep[p] = true;
            trace.kept.push_back(trace.candidates[p]);
        }
        for (std::size_t i = 0; i < trace.candidates.size(); ++i) {
            if (!keep[i]) {
                exited.push_back(trace.candidates[i]);
            }
        }
        if (!positions.empty()) {
            kept_gates = gather_rows(result.scores, positions);
        }
        break;
    }
    case RoutingMode::token_choice: {
        // Every active token is processed; a token assigned depth d leaves
        // right after step d.
        if (fixed_depth.size() != state.active.size()) {
            throw ShapeError("recursion_step: token_choice needs one fixed depth per row");
        }
        trace.kept = trace.candidates;
        for (auto t : trace.candidates) {
            if (fixed_depth[t] <= step) {
                exited.push_back(t);
            }
        }
        if (!trace.kept.empty()) {
            const auto& router = params.router->steps.at(step - 1);
            result.scores = router_scores(gather_rows(state.hidden, trace.kept), router);
            trace.scores = result.scores.to_vector();
            trace.router_tokens = trace.kept.size();
            kept_gates = result.scores;
        }
        break;
    }
    case RoutingMode::static_depth: {
        if (hooks && hooks->forced_keep) {
            trace.kept = hooks->forced_keep(step, trace.candidates);
            std::sort(trace.kept.begin(), trace.kept.end());
            for (auto t : trace.candidates) {
                if (!std::binary_search(trace.kept.begin(), trace.kept.end(), t)) {
                    exited.push_back(t);
                }
            }
        } else {
            trace.kept = trace.candidates;
        }
        break;
    }
    }

    std::vector<std::size_t> rows{0};
    rows.insert(rows.end(), trace.kept.begin(), trace.kept.end());
    trace.block_tokens = rows.size();

    const DType dtype = state.hidden.dtype();
    Tensor gates;
    if (hooks && hooks->forced_gate) {
        gates = Tensor::full({rows.size(), 1}, *hooks->forced_gate, dtype);
    } else if (kept_gates.defined()) {
        const Tensor parts[] = {Tensor::full({1, 1}, 1.0, dtype), kept_gates};
        gates = concat_rows(parts);
    } else {
        gates = Tensor::full({rows.size(), 1}, 1.0, dtype);
    }

    const Tensor selected = gather_rows(state.hidden, rows);
    const Tensor block_out =
        encoder_block(selected, block_for_step(params, step), config.heads, config.layernorm_eps);
    const Tensor updated = add(mul(gates, block_out), selected);
    result.state.hidden = scatter_rows(state.hidden, rows, updated);

    const auto gate_values = gates.to_vector();
    for (std::size_t i = 0; i < rows.size(); ++i) {
        result.state.gate[rows[i]] = gate_values[i];
    }
    for (auto t : exited) {
        result.state.active[t] = false;
        result.state.exit_depth[t] = step;
    }
    return result;
}

Tensor depth_logits(const Tensor& z0, const DepthPredictor& predictor) {
    std::vector<std::size_t> rows(z0.dim(0) - 1);
    std::iota(rows.begin(), rows.end(), std::size_t{1});
    return add(matmul(gather_rows(z0, rows), predictor.weight), predictor.bias);
}

std::vector<std::size_t> token_choice_assign(const Tensor& logits) {
    if (logits.rank() != 2 || logits.dim(1) == 0) {
        throw ShapeError("token_choice_assign: expected N x R logits, got " +
                         to_string(logits.shape()));
    }
    const std::size_t n = logits.dim(0);
    const std::size_t r = logits.dim(1);
    const auto v = logits.to_vector();
    std::vector<std::size_t> depth(n);
    for (std::size_t t = 0; t < n; ++t) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < r; ++j) {
            if (v[t * r + j] > v[t * r + best]) {
                best = j;
            }
        }
        depth[t] = best + 1;
    }
    return depth;
}

RecursionResult run_recursion(const Tensor& z0, const RecursionParams& params) {
    const ModelConfig& config = *params.config;
    if (z0.rank() != 2 || z0.dim(0) < 1) {
        throw ShapeError("run_recursion: expected (N+1) x D tokens, got " + to_string(z0.shape()));
    }
    const std::size_t rows = z0.dim(0);
    const std::size_t big_r = config.max_recursion;

    RecursionResult result;
    result.trace.num_tokens = rows - 1;
    result.trace.max_recursion = big_r;

    std::vector<std::size_t> fixed_depth;
    if (config.routing_mode == RoutingMode::token_choice) {
        if (!params.router->depth_predictor) {
            throw ShapeError("run_recursion: token_choice needs a depth predictor");
        }
        result.depth_logits = depth_logits(z0, *params.router->depth_predictor);
        const auto assigned = token_choice_assign(result.depth_logits);
        fixed_depth.assign(rows, big_r);
        std::copy(assigned.begin(), assigned.end(), fixed_depth.begin() + 1);
        result.trace.predictor_tokens = rows - 1;
    }

    TokenState state = initial_state(z0);
    for (std::size_t step = 1; step <= big_r; ++step) {
        const bool any_active =
            std::any_of(state.active.begin() + 1, state.active.end(), [](bool a) { return a; });
        if (!any_active && rows > 1) {
            break;
        }
        auto out = recursion_step(state, params, step, fixed_depth);
        if (out.scores.defined()) {
            result.step_scores.push_back(out.scores);
        }
        result.trace.steps.push_back(std::move(out.trace));
        state = std::move(out.state);
    }
    for (std::size_t t = 1; t < rows; ++t) {
        if (state.active[t]) {
            state.exit_depth[t] = big_r;
        }
    }
    result.trace.exit_depth.assign(state.exit_depth.begin() + 1, state.exit_depth.end());
    result.hidden = state.hidden;
    return result;
}

} // namespace morvit
