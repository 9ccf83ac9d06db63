#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "morvit/config.hpp"
#include "morvit/model.hpp"
#include "morvit/routing.hpp"
#include "morvit/tensor.hpp"

namespace morvit {

/// FLOPs of one forward pass; one multiply-accumulate counts as 2 FLOPs.
struct FlopsReport {
    /// Rows processed by the shared block at each step (class token included).
    std::vector<std::size_t> step_tokens;
    std::vector<std::uint64_t> step_flops;
    std::uint64_t attention = 0;
    std::uint64_t mlp = 0;
    std::uint64_t router = 0;
    std::uint64_t embed = 0;
    std::uint64_t head = 0;
    std::uint64_t total = 0;
    /// softmax, layernorm, GELU and sigmoid work, excluded from `total`.
    std::uint64_t auxiliary = 0;
};

/// Attention FLOPs for A rows: 2 * (4 A D^2 + 2 A^2 D).
std::uint64_t attention_flops(std::uint64_t tokens, std::uint64_t hidden);
/// MLP FLOPs for A rows: 2 * (2 A D mlp).
std::uint64_t mlp_flops(std::uint64_t tokens, std::uint64_t hidden, std::uint64_t mlp_size);

FlopsReport count_flops(const ModelConfig& config, const RoutingTrace& trace);

/// Exit depths laid out on the patch grid.
struct DepthMap {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::size_t max_recursion = 0;
    std::vector<std::size_t> depths;     // rows * cols, row-major
    std::vector<std::size_t> histogram;  // histogram[d - 1] = count of depth d

    std::size_t at(std::size_t r, std::size_t c) const { return depths[r * cols + c]; }
};

DepthMap make_depth_map(const RoutingTrace& trace, std::size_t rows, std::size_t cols);

/// One line per grid row, comma-separated integers, '\n' terminated.
std::string depth_map_csv(const DepthMap& map);
/// {"rows","cols","max_recursion","grid","histogram":{"1":n1,...},"total","config":{...}}.
std::string depth_map_json(const DepthMap& map, const ModelConfig& config);

enum class DepthMapFormat { csv, json };
DepthMapFormat parse_depth_map_format(std::string_view text);
void export_depth_map(const DepthMap& map, const ModelConfig& config,
                      const std::filesystem::path& path, DepthMapFormat format);

struct DegeneracyReport {
    bool degenerate = false;
    std::size_t shallow_tokens = 0;
    std::size_t total_tokens = 0;
    double shallow_fraction = 0.0;
    std::vector<std::size_t> histogram;
};

/// DEGENERATE when at least `threshold` of all tokens exit at depth 1 (inclusive).
DegeneracyReport detect_degenerate(std::span<const RoutingTrace> traces, double threshold = 0.95);

struct ThroughputReport {
    double images_per_second = 0.0;  // median over repeats
    double variance = 0.0;           // of the per-repeat images/second
    std::vector<double> seconds;     // one wall-clock sample per repeat
    std::size_t batch = 0;
    std::size_t threads = 1;
    DType precision = DType::f64;
};

/// Forward-only timing: one warmup batch, then `repeats` timed batches.
ThroughputReport bench_throughput(const ModelParams& params, const ModelConfig& config,
                                  std::span<const Tensor> images, std::size_t repeats,
                                  std::size_t threads = 1);

} // namespace morvit
