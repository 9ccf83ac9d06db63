#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "morvit/config.hpp"
#include "morvit/rng.hpp"
#include "morvit/tensor.hpp"

namespace morvit {

/// One labelled image, H x W x C row-major with values in [0, 1].
struct DatasetRecord {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t channels = 0;
    std::vector<double> pixels;
    std::size_t label = 0;
    /// Per-patch difficulty in patch-grid order (1 = hard); empty when unknown.
    std::vector<std::uint8_t> difficulty;

    Tensor image() const;
    bool operator==(const DatasetRecord&) const = default;
};

using Dataset = std::vector<DatasetRecord>;

inline constexpr std::size_t kCifarRecordBytes = 3073;
inline constexpr std::size_t kCifarSide = 32;

/// Parses the CIFAR-10 binary layout: 1 label byte then 1024 bytes for each
/// of the R, G, B planes (row-major 32 x 32). Pixels are scaled by 1/255.
Dataset load_cifar10_binary(const std::filesystem::path& path);
Dataset parse_cifar10_binary(std::span<const std::uint8_t> bytes, const std::string& source = "<memory>");
/// Inverse of parse_cifar10_binary for 32 x 32 x 3 records (pixels rounded to bytes).
std::vector<std::uint8_t> encode_cifar10_binary(std::span<const DatasetRecord> records);

/// Synthetic images whose patches are either a constant colour ("easy") or a
/// class-specific stripe/checker texture ("hard"). Exactly
/// round(hard_fraction * N) patches per image are hard and the label is only
/// recoverable from them; an image with no hard patches has label 0.
Dataset synth_mixed_difficulty(std::size_t n, std::uint64_t seed, const ModelConfig& config,
                               double hard_fraction);

/// Binary PPM (P6, maxval <= 255) scaled to [0, 1]; label 0, no difficulty map.
DatasetRecord load_ppm(const std::filesystem::path& path);

/// Mirror left-right, including the difficulty map.
DatasetRecord flip_horizontal(const DatasetRecord& record, std::size_t patch_size);

/// Throws DataError when a record does not fit the model geometry or range rules.
void check_dataset(std::span<const DatasetRecord> data, const ModelConfig& config);

} // namespace morvit
