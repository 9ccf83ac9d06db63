#include "morvit/data.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>

namespace morvit {

Tensor DatasetRecord::image() const {
    return Tensor::from({height, width, channels}, pixels);
}

Dataset parse_cifar10_binary(std::span<const std::uint8_t> bytes, const std::string& source) {
    if (bytes.size() % kCifarRecordBytes != 0) {
        throw DataError(source + ": truncated CIFAR-10 file, " + std::to_string(bytes.size()) +
                        " bytes is not a multiple of " + std::to_string(kCifarRecordBytes));
    }
    constexpr std::size_t plane = kCifarSide * kCifarSide;
    const std::size_t count = bytes.size() / kCifarRecordBytes;
    Dataset out;
    out.reserve(count);
    for (std::size_t r = 0; r < count; ++r) {
        const std::uint8_t* rec = bytes.data() + r * kCifarRecordBytes;
        if (rec[0] > 9) {
            throw DataError(source + ": record " + std::to_string(r) + " has label " +
                            std::to_string(rec[0]) + " > 9");
        }
        DatasetRecord d;
        d.height = kCifarSide;
        d.width = kCifarSide;
        d.channels = 3;
        d.label = rec[0];
        d.pixels.resize(plane * 3);
        for (std::size_t c = 0; c < 3; ++c) {
            for (std::size_t i = 0; i < plane; ++i) {
                d.pixels[i * 3 + c] = rec[1 + c * plane + i] / 255.0;
            }
        }
        out.push_back(std::move(d));
    }
    return out;
}

Dataset load_cifar10_binary(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open CIFAR-10 file '" + path.string() + "'");
    }
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    return parse_cifar10_binary(bytes, path.string());
}

std::vector<std::uint8_t> encode_cifar10_binary(std::span<const DatasetRecord> records) {
    constexpr std::size_t plane = kCifarSide * kCifarSide;
    std::vector<std::uint8_t> out;
    out.reserve(records.size() * kCifarRecordBytes);
    for (const auto& d : records) {
        if (d.height != kCifarSide || d.width != kCifarSide || d.channels != 3 || d.label > 9) {
            throw DataError("encode_cifar10_binary: record is not a 32x32x3 image with label <= 9");
        }
        out.push_back(static_cast<std::uint8_t>(d.label));
        for (std::size_t c = 0; c < 3; ++c) {
            for (std::size_t i = 0; i < plane; ++i) {
                const double v = std::clamp(d.pixels[i * 3 + c], 0.0, 1.0);
                out.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0)));
            }
        }
    }
    return out;
}

namespace {

// +1/-1 texture for one class on a p x p patch.
std::vector<double> class_pattern(std::size_t cls, std::size_t p) {
    std::vector<double> pat(p * p);
    const std::size_t half = std::max<std::size_t>(1, p / 2);
    Rng fallback(0x7E57u + cls);
    for (std::size_t y = 0; y < p; ++y) {
        for (std::size_t x = 0; x < p; ++x) {
            bool on = false;
            switch (cls) {
            case 0: on = y % 2 == 0; break;                       // horizontal stripes
            case 1: on = x % 2 == 0; break;                       // vertical stripes
            case 2: on = (x + y) % 2 == 0; break;                 // checkerboard
            case 3: on = (x + p - y % p) % 4 < 2; break;          // diagonal bands
            case 4: on = (y / half) % 2 == 0; break;              // wide horizontal bands
            case 5: on = (x / half) % 2 == 0; break;              // wide vertical bands
            case 6: on = ((x / half) + (y / half)) % 2 == 0; break; // quadrants
            case 7: on = (x + y) % 4 < 2; break;                  // anti-diagonal bands
            default: on = fallback.bernoulli(0.5); break;
            }
            pat[y * p + x] = on ? 1.0 : -1.0;
        }
    }
    return pat;
}

} // namespace

Dataset synth_mixed_difficulty(std::size_t n, std::uint64_t seed, const ModelConfig& config,
                               double hard_fraction) {
    config.validate();
    if (n == 0) {
        throw ConfigError("synth_mixed_difficulty: n must be at least 1");
    }
    if (!(hard_fraction >= 0.0 && hard_fraction <= 1.0)) {
        throw ConfigError("synth_mixed_difficulty: hard_fraction must lie in [0, 1]");
    }
    const std::size_t p = config.patch_size;
    const std::size_t c = config.channels;
    const std::size_t gr = config.grid_rows();
    const std::size_t gc = config.grid_cols();
    const std::size_t patches = gr * gc;
    const auto hard_count = static_cast<std::size_t>(
        std::lround(hard_fraction * static_cast<double>(patches)));

    std::vector<std::vector<double>> patterns;
    for (std::size_t k = 0; k < config.num_classes; ++k) {
        patterns.push_back(class_pattern(k, p));
    }

    Rng rng(seed);
    Dataset out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        DatasetRecord d;
        d.height = config.image_h;
        d.width = config.image_w;
        d.channels = c;
        d.pixels.assign(d.height * d.width * c, 0.0);
        d.difficulty.assign(patches, 0);
        d.label = hard_count > 0 ? static_cast<std::size_t>(rng.below(config.num_classes)) : 0;

        std::vector<std::size_t> order(patches);
        std::iota(order.begin(), order.end(), std::size_t{0});
        rng.shuffle(std::span<std::size_t>(order));
        for (std::size_t k = 0; k < hard_count; ++k) {
            d.difficulty[order[k]] = 1;
        }

        for (std::size_t patch = 0; patch < patches; ++patch) {
            const std::size_t pr = patch / gc;
            const std::size_t pc = patch % gc;
            const bool hard = d.difficulty[patch] != 0;
            const double polarity = hard && rng.bernoulli(0.5) ? -1.0 : 1.0;
            std::vector<double> base(c);
            for (auto& b : base) {
                b = hard ? rng.uniform(0.3, 0.7) : rng.uniform(0.1, 0.9);
            }
            for (std::size_t y = 0; y < p; ++y) {
                for (std::size_t x = 0; x < p; ++x) {
                    const std::size_t pix = ((pr * p + y) * d.width + pc * p + x) * c;
                    for (std::size_t ch = 0; ch < c; ++ch) {
                        double v = base[ch];
                        if (hard) {
                            v += 0.25 * polarity * patterns[d.label][y * p + x] + rng.uniform(-0.03, 0.03);
                        }
                        d.pixels[pix + ch] = std::clamp(v, 0.0, 1.0);
                    }
                }
            }
        }
        out.push_back(std::move(d));
    }
    return out;
}

DatasetRecord load_ppm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open image '" + path.string() + "'");
    }
    auto fail = [&](const std::string& why) { return DataError(path.string() + ": " + why); };
    auto token = [&]() {
        std::string t;
        char ch = 0;
        while (in.get(ch)) {
            if (ch == '#') {
                std::string comment;
                std::getline(in, comment);
            } else if (!std::isspace(static_cast<unsigned char>(ch))) {
                t.push_back(ch);
                break;
            }
        }
        while (in.get(ch) && !std::isspace(static_cast<unsigned char>(ch))) {
            t.push_back(ch);
        }
        return t;
    };
    auto number = [&](const char* what) {
        const std::string t = token();
        std::size_t v = 0;
        auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
        if (t.empty() || ec != std::errc{} || ptr != t.data() + t.size()) {
            throw fail(std::string("bad PPM ") + what + " '" + t + "'");
        }
        return v;
    };
    if (token() != "P6") {
        throw fail("not a binary PPM (expected magic P6)");
    }
    DatasetRecord d;
    d.width = number("width");
    d.height = number("height");
    const std::size_t maxval = number("maxval");
    if (d.width == 0 || d.height == 0 || maxval == 0 || maxval > 255) {
        throw fail("unsupported PPM geometry or maxval");
    }
    d.channels = 3;
    std::vector<unsigned char> raw(d.width * d.height * 3);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (static_cast<std::size_t>(in.gcount()) != raw.size()) {
        throw fail("truncated pixel data");
    }
    d.pixels.resize(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i) {
        d.pixels[i] = std::min(1.0, raw[i] / static_cast<double>(maxval));
    }
    return d;
}

DatasetRecord flip_horizontal(const DatasetRecord& record, std::size_t patch_size) {
    DatasetRecord out = record;
    const std::size_t w = record.width;
    const std::size_t c = record.channels;
    for (std::size_t y = 0; y < record.height; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            for (std::size_t ch = 0; ch < c; ++ch) {
                out.pixels[(y * w + x) * c + ch] = record.pixels[(y * w + (w - 1 - x)) * c + ch];
            }
        }
    }
    if (!record.difficulty.empty() && patch_size > 0) {
        const std::size_t gc = w / patch_size;
        const std::size_t gr = record.height / patch_size;
        for (std::size_t r = 0; r < gr; ++r) {
            for (std::size_t col = 0; col < gc; ++col) {
                out.difficulty[r * gc + col] = record.difficulty[r * gc + (gc - 1 - col)];
            }
        }
    }
    return out;
}

void check_dataset(std::span<const DatasetRecord> data, const ModelConfig& config) {
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto& d = data[i];
        if (d.height != config.image_h || d.width != config.image_w || d.channels != config.channels) {
            throw DataError("record " + std::to_string(i) + " is " + std::to_string(d.height) + "x" +
                            std::to_string(d.width) + "x" + std::to_string(d.channels) +
                            " but the model expects " + std::to_string(config.image_h) + "x" +
                            std::to_string(config.image_w) + "x" + std::to_string(config.channels));
        }
        if (d.label >= config.num_classes) {
            throw DataError("record " + std::to_string(i) + " has label " + std::to_string(d.label) +
                            " outside [0, " + std::to_string(config.num_classes) + ")");
        }
        for (double v : d.pixels) {
            if (!(v >= 0.0 && v <= 1.0)) {
                throw DataError("record " + std::to_string(i) + " has a pixel outside [0, 1]");
            }
        }
    }
}

} // namespace morvit
