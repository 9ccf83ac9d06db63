#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "morvit/checkpoint.hpp"
#include "morvit/config.hpp"
#include "morvit/data.hpp"
#include "morvit/model.hpp"
#include "morvit/optim.hpp"
#include "morvit/rng.hpp"

namespace morvit {

/// One row of the metrics log.
struct EpochMetrics {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double train_acc = 0.0;
    double mean_exit_depth = 0.0;
    double flops_per_image = 0.0;
};

/// epoch \t train_loss \t train_acc \t mean_exit_depth \t flops_per_image \n
std::string format_metrics_line(const EpochMetrics& m);
EpochMetrics parse_metrics_line(std::string_view line);

/// Everything that evolves during training.
struct TrainState {
    ModelParams params;
    OptimizerState optimizer;
    /// Drives shuffling and flip augmentation.
    Rng rng;
    std::uint64_t epoch = 0;
};

TrainState init_train_state(const RunConfig& config);
TrainState resume_train_state(const Checkpoint& ckpt);
Checkpoint snapshot(const RunConfig& config, TrainState& state);

struct TrainOptions {
    /// Epochs to run in this call.
    std::size_t epochs = 1;
    /// Stop after this many optimizer steps in total for this call (0 = no limit).
    std::size_t max_steps = 0;
    /// Saved after every completed epoch.
    std::optional<std::filesystem::path> checkpoint_path;
    /// Appended one line per completed epoch.
    std::optional<std::filesystem::path> metrics_path;
    /// Evaluate on the (unaugmented) training set after each epoch.
    bool epoch_eval = true;
    std::function<void(const EpochMetrics&)> on_epoch;
    const RoutingHooks* hooks = nullptr;
};

struct TrainResult {
    std::vector<EpochMetrics> metrics;
    /// Loss of every optimizer step, in order.
    std::vector<double> step_losses;
};

/// Mini-batch Adam on L_task + lambda * L_routing. Throws NumericError on a
/// non-finite loss and DataError on I/O failures.
TrainResult train(const RunConfig& config, const Dataset& data, TrainState& state,
                  const TrainOptions& options);

/// Learning rate at a global optimizer step under the configured schedule.
double learning_rate(const TrainConfig& config, std::uint64_t step, std::uint64_t total_steps);

struct EvalOptions {
    std::size_t threads = 1;
    bool keep_traces = false;
    const RoutingHooks* hooks = nullptr;
};

struct EvalResult {
    double accuracy = 0.0;
    std::size_t correct = 0;
    std::size_t total = 0;
    /// NaN for classes absent from the data.
    std::vector<double> per_class_accuracy;
    std::vector<std::size_t> per_class_total;
    std::vector<std::size_t> predictions;
    double mean_exit_depth = 0.0;
    /// Mean exit depth over patches labelled hard / easy; NaN when none exist.
    double hard_mean_depth = 0.0;
    double easy_mean_depth = 0.0;
    std::vector<std::size_t> depth_histogram;
    std::uint64_t total_flops = 0;
    double flops_per_image = 0.0;
    std::vector<RoutingTrace> traces;
};

EvalResult evaluate(const ModelParams& params, const ModelConfig& config, const Dataset& data,
                    const EvalOptions& options = {});
/// Checks the dataset geometry against the checkpoint config first.
EvalResult evaluate(const Checkpoint& ckpt, const Dataset& data, const EvalOptions& options = {});

struct AblationRow {
    std::string variant;
    bool dynamic = true;
    bool shared = true;
    double top1 = 0.0;
    std::size_t params = 0;
    double images_per_second = 0.0;
    double mean_exit_depth = 0.0;
    double flops_per_image = 0.0;
};

/// "full", "static-depth", "unshared", "plain-vit".
std::vector<std::string> ablation_variants();
RunConfig ablation_config(const RunConfig& base, std::string_view variant);

struct AblationOptions {
    std::vector<std::string> variants = ablation_variants();
    std::size_t bench_batch = 32;
    std::size_t bench_repeats = 5;
    std::size_t threads = 1;
};

/// Trains and measures every variant on the same data and seed.
std::vector<AblationRow> run_ablation(const RunConfig& base, const Dataset& train_set,
                                      const Dataset& test_set, const AblationOptions& options = {});

/// Tab-separated table with a header line.
std::string format_ablation_table(const std::vector<AblationRow>& rows);

} // namespace morvit
