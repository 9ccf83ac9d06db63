#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "morvit/tensor.hpp"

namespace morvit {

enum class RoutingMode { expert_choice, token_choice, static_depth };

std::string to_string(RoutingMode mode);
RoutingMode parse_routing_mode(std::string_view text);

/// Every architectural hyperparameter of a model.
struct ModelConfig {
    std::size_t image_h = 16;
    std::size_t image_w = 16;
    std::size_t channels = 3;
    std::size_t patch_size = 4;
    std::size_t hidden = 32;
    std::size_t mlp_size = 64;
    std::size_t heads = 4;
    std::size_t num_classes = 4;
    std::size_t max_recursion = 4;
    double beta = 0.5;
    double lambda = 0.01;
    RoutingMode routing_mode = RoutingMode::expert_choice;
    bool share_params = true;
    std::uint64_t seed = 0;
    double layernorm_eps = 1e-5;
    /// Initial value of every router bias.
    double router_bias_init = 0.0;
    /// Precision used by throughput benchmarks; training always runs in f64.
    DType precision = DType::f64;

    std::size_t grid_rows() const { return image_h / patch_size; }
    std::size_t grid_cols() const { return image_w / patch_size; }
    std::size_t num_patches() const { return grid_rows() * grid_cols(); }
    std::size_t patch_dim() const { return patch_size * patch_size * channels; }
    std::size_t head_dim() const { return hidden / heads; }
    /// Number of distinct encoder blocks stored.
    std::size_t num_blocks() const { return share_params ? 1 : max_recursion; }

    /// Throws ConfigError naming the first violated constraint.
    void validate() const;

    bool operator==(const ModelConfig&) const = default;
};

enum class LrSchedule { constant, cosine };

struct TrainConfig {
    std::size_t epochs = 30;
    std::size_t batch_size = 16;
    double lr = 3e-4;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    LrSchedule lr_schedule = LrSchedule::constant;
    bool augment_flip = true;
    /// Fraction of hard patches per image in the synthetic generator.
    double synth_hard_fraction = 0.5;

    void validate() const;

    bool operator==(const TrainConfig&) const = default;
};

/// Contents of a run configuration file.
struct RunConfig {
    ModelConfig model;
    TrainConfig train;

    bool operator==(const RunConfig&) const = default;
};

/// Named architectures: "vit-b16", "mor-b16", "tiny-desk", "synth-desk".
ModelConfig model_preset(std::string_view name);
std::vector<std::string> preset_names();

/// Parses flat `key = value` lines; `#` starts a comment. A `preset` key
/// seeds the model fields before the other keys apply. Unknown keys throw.
RunConfig parse_run_config(std::string_view text);
std::string serialize_run_config(const RunConfig& config);
RunConfig load_run_config(const std::filesystem::path& path);

/// Applies one `key=value` pair; used for config files and CLI overrides.
void set_config_value(RunConfig& config, std::string_view key, std::string_view value);
std::vector<std::string> config_keys();

/// Worker threads allowed by MORVIT_THREADS (default 1).
std::size_t worker_threads();

} // namespace morvit
