#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "morvit/config.hpp"
#include "morvit/model.hpp"
#include "morvit/optim.hpp"
#include "morvit/rng.hpp"
#include "morvit/tensor.hpp"

namespace morvit {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Binary layout (all integers and payloads little-endian):
///   "MORV" | u32 version | u32 n + config text
///   u32 tensor count | per tensor: u32 n + name, u8 dtype, u32 rank, u64 dims[rank], payload
///   u8 has_optimizer | [u64 step, f64 lr, f64 beta1, f64 beta2, f64 eps, u32 count,
///                       count x (m tensor, v tensor) without names]
///   u64 epoch | u64 rng seed | u64 rng counter
struct Checkpoint {
    std::uint32_t version = kCheckpointVersion;
    RunConfig config;
    std::vector<std::pair<std::string, Tensor>> tensors;
    std::optional<OptimizerState> optimizer;
    std::uint64_t epoch = 0;
    Rng rng;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes, const std::string& source = "<memory>");

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Same config, names, shapes, dtypes, bit patterns, optimizer and RNG state.
bool bit_identical(const Checkpoint& a, const Checkpoint& b);

/// Snapshot of the current parameter values (copied, not aliased).
Checkpoint make_checkpoint(const RunConfig& config, ModelParams& params,
                           const OptimizerState* optimizer, std::uint64_t epoch, const Rng& rng);

/// Model parameters with values taken by name from the checkpoint.
ModelParams restore_params(const Checkpoint& ckpt);

} // namespace morvit
