#pragma once

// Mixture-of-Recursions routing: every recursion step scores the tokens that
// are still active, keeps the top (1 - beta) fraction, and applies the shared
// block to the survivors with a gated residual update h <- g * f(h) + h.
// Tokens that are not kept exit: their hidden row is frozen and they no
// longer take part in attention (neither as queries nor as keys/values).

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "morvit/config.hpp"
#include "morvit/tensor.hpp"
#include "morvit/vit.hpp"

namespace morvit {

/// Router weight (D x 1) and bias (1) for one recursion step.
struct RouterStep {
    Tensor weight;
    Tensor bias;
};

/// Token-choice depth predictor: logits = h * weight + bias over R depths.
struct DepthPredictor {
    Tensor weight;  // D x R
    Tensor bias;    // R
};

struct RouterParams {
    std::vector<RouterStep> steps;
    std::optional<DepthPredictor> depth_predictor;

    void collect(const std::string& prefix, NamedTensors& out);
};

/// Routers exist for every non-static mode; the depth predictor only for token_choice.
RouterParams init_router(const ModelConfig& config, Rng& rng);

/// Test-only overrides. The CLI never constructs these.
struct RoutingHooks {
    /// Replaces every gate (including the class token's) with a constant.
    std::optional<double> forced_gate;
    /// Replaces top-K selection: given the step (1-based) and candidate token
    /// indices, returns the indices that continue.
    std::function<std::vector<std::size_t>(std::size_t step, std::span<const std::size_t> candidates)>
        forced_keep;
};

/// Record of a single recursion step.
struct StepTrace {
    std::size_t step = 0;
    /// Active non-class token indices (rows of the hidden matrix) scored at this step.
    std::vector<std::size_t> candidates;
    /// Router scores aligned with `candidates` (empty in static mode).
    std::vector<double> scores;
    /// K-th largest score; NaN when no scores were computed.
    double threshold = 0.0;
    /// Tokens that continue, ascending.
    std::vector<std::size_t> kept;
    /// Tokens whose score was computed by a router at this step.
    std::size_t router_tokens = 0;
    /// Rows processed by the shared block (kept + class token).
    std::size_t block_tokens = 0;

    std::size_t active_before() const { return candidates.size(); }
    std::size_t active_after() const { return kept.size(); }
    /// Mask over all N+1 rows: true for rows processed at this step.
    std::vector<bool> mask(std::size_t num_rows) const;
};

/// Complete routing record of one forward pass.
struct RoutingTrace {
    std::size_t num_tokens = 0;   // N (class token excluded)
    std::size_t max_recursion = 0;
    std::vector<StepTrace> steps;
    /// Exit depth of each non-class token in patch order, values in 1..R.
    std::vector<std::size_t> exit_depth;
    /// Token-choice depth-predictor evaluations (N tokens x R logits), 0 otherwise.
    std::size_t predictor_tokens = 0;

    /// counts[d - 1] = tokens with exit depth d.
    std::vector<std::size_t> depth_histogram() const;
    double mean_exit_depth() const;
};

struct TokenState {
    Tensor hidden;                       // (N+1) x D
    std::vector<bool> active;            // N+1, class token always true
    std::vector<double> gate;            // latest gate per row; class token 1
    std::vector<std::size_t> exit_depth; // N+1, 0 while still active
};

TokenState initial_state(const Tensor& z0);

/// sigmoid(theta . h + b) for one token row (1 x D or D).
Tensor routing_score(const Tensor& h_t, const RouterStep& router);

/// Keep count for A active tokens: max(1, round((1 - beta) * A)).
std::size_t keep_count(std::size_t active, double beta);

struct Selection {
    double threshold = 0.0;
    /// Positions into the score vector, ascending.
    std::vector<std::size_t> kept;
    std::vector<bool> mask;
};

/// Top-K by (score descending, position ascending).
Selection select_active(std::span<const double> scores, double beta);

/// Everything a step needs to read; blocks holds 1 (shared) or R entries.
struct RecursionParams {
    const std::vector<BlockParams>* blocks = nullptr;
    const RouterParams* router = nullptr;
    const ModelConfig* config = nullptr;
    const RoutingHooks* hooks = nullptr;
};

struct StepResult {
    TokenState state;
    StepTrace trace;
    /// Differentiable scores of the candidates (A x 1); undefined in static mode.
    Tensor scores;
};

/// One recursion step r (1-based). `fixed_depth` is the token-choice depth
/// assignment (indexed by row) and is ignored in other modes.
StepResult recursion_step(const TokenState& state, const RecursionParams& params, std::size_t step,
                          std::span<const std::size_t> fixed_depth = {});

struct RecursionResult {
    Tensor hidden;
    RoutingTrace trace;
    /// One scores tensor per step that computed router scores.
    std::vector<Tensor> step_scores;
    /// Token-choice depth logits (N x R); undefined otherwise.
    Tensor depth_logits;
};

RecursionResult run_recursion(const Tensor& z0, const RecursionParams& params);

/// Depth in 1..R for each non-class token: argmax of its depth logits,
/// ties resolved toward the smaller depth.
std::vector<std::size_t> token_choice_assign(const Tensor& depth_logits);

/// N x R logits of the non-class rows of Z_0.
Tensor depth_logits(const Tensor& z0, const DepthPredictor& predictor);

} // namespace morvit
