#include "morvit/profiler.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <sstream>
#include <thread>

#include <json.hpp>

namespace morvit {

std::uint64_t attention_flops(std::uint64_t tokens, std::uint64_t hidden) {
    return 2 * (4 * tokens * hidden * hidden + 2 * tokens * tokens * hidden);
}

std::uint64_t mlp_flops(std::uint64_t tokens, std::uint64_t hidden, std::uint64_t mlp_size) {
    return 2 * (2 * tokens * hidden * mlp_size);
}

FlopsReport count_flops(const ModelConfig& config, const RoutingTrace& trace) {
    const std::uint64_t d = config.hidden;
    const std::uint64_t n = config.num_patches();
    if (trace.num_tokens != n) {
        throw ShapeError("count_flops: trace has " + std::to_string(trace.num_tokens) +
                         " tokens, config has " + std::to_string(n));
    }
    if (trace.steps.size() > config.max_recursion) {
        throw ShapeError("count_flops: trace has " + std::to_string(trace.steps.size()) +
                         " steps, config allows " + std::to_string(config.max_recursion));
    }
    FlopsReport r;
    r.embed = 2 * n * config.patch_dim() * d;
    r.head = 2 * d * config.num_classes;
    for (std::size_t s = 0; s < trace.steps.size(); ++s) {
        const auto& step = trace.steps[s];
        const std::uint64_t a = step.block_tokens;
        if (a > n + 1 || step.router_tokens > n) {
            throw ShapeError("count_flops: step " + std::to_string(step.step) +
                             " processes more rows than the image has");
        }
        const std::uint64_t att = attention_flops(a, d);
        const std::uint64_t mlp = mlp_flops(a, d, config.mlp_size);
        std::uint64_t router = 2 * step.router_tokens * d;
        if (s == 0) {
            router += 2 * trace.predictor_tokens * d * config.max_recursion;
        }
        r.step_tokens.push_back(step.block_tokens);
        r.step_flops.push_back(att + mlp + router);
        r.attention += att;
        r.mlp += mlp;
        r.router += router;
        r.auxiliary += config.heads * a * a + 2 * 2 * a * d + a * config.mlp_size + step.router_tokens;
    }
    r.total = r.attention + r.mlp + r.router + r.embed + r.head;
    return r;
}

DepthMap make_depth_map(const RoutingTrace& trace, std::size_t rows, std::size_t cols) {
    if (rows * cols != trace.exit_depth.size()) {
        throw ShapeError("make_depth_map: " + std::to_string(rows) + "x" + std::to_string(cols) +
                         " grid does not hold " + std::to_string(trace.exit_depth.size()) + " tokens");
    }
    DepthMap map;
    map.rows = rows;
    map.cols = cols;
    map.max_recursion = trace.max_recursion;
    map.depths = trace.exit_depth;
    map.histogram.assign(trace.max_recursion, 0);
    for (auto depth : map.depths) {
        if (depth < 1 || depth > trace.max_recursion) {
            throw ShapeError("make_depth_map: exit depth " + std::to_string(depth) + " outside 1.." +
                             std::to_string(trace.max_recursion));
        }
        map.histogram[depth - 1] += 1;
    }
    return map;
}

std::string depth_map_csv(const DepthMap& map) {
    std::ostringstream os;
    for (std::size_t r = 0; r < map.rows; ++r) {
        for (std::size_t c = 0; c < map.cols; ++c) {
            if (c > 0) {
                os << ',';
            }
            os << map.at(r, c);
        }
        os << '\n';
    }
    return os.str();
}

std::string depth_map_json(const DepthMap& map, const ModelConfig& config) {
    nlohmann::ordered_json j;
    j["rows"] = map.rows;
    j["cols"] = map.cols;
    j["max_recursion"] = map.max_recursion;
    auto grid = nlohmann::ordered_json::array();
    for (std::size_t r = 0; r < map.rows; ++r) {
        auto row = nlohmann::ordered_json::array();
        for (std::size_t c = 0; c < map.cols; ++c) {
            row.push_back(map.at(r, c));
        }
        grid.push_back(row);
    }
    j["grid"] = grid;
    nlohmann::ordered_json hist = nlohmann::ordered_json::object();
    std::size_t total = 0;
    for (std::size_t d = 0; d < map.histogram.size(); ++d) {
        hist[std::to_string(d + 1)] = map.histogram[d];
        total += map.histogram[d];
    }
    j["histogram"] = hist;
    j["total"] = total;
    j["config"] = {
        {"image_h", config.image_h},         {"image_w", config.image_w},
        {"channels", config.channels},       {"patch_size", config.patch_size},
        {"hidden", config.hidden},           {"mlp_size", config.mlp_size},
        {"heads", config.heads},             {"num_classes", config.num_classes},
        {"max_recursion", config.max_recursion}, {"beta", config.beta},
        {"lambda", config.lambda},           {"routing_mode", to_string(config.routing_mode)},
        {"share_params", config.share_params}, {"seed", config.seed},
    };
    return j.dump(2) + "\n";
}

DepthMapFormat parse_depth_map_format(std::string_view text) {
    if (text == "csv") return DepthMapFormat::csv;
    if (text == "json") return DepthMapFormat::json;
    throw ConfigError("unknown depth map format '" + std::string(text) + "' (expected csv or json)");
}

void export_depth_map(const DepthMap& map, const ModelConfig& config,
                      const std::filesystem::path& path, DepthMapFormat format) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw DataError("cannot write depth map '" + path.string() + "'");
    }
    out << (format == DepthMapFormat::csv ? depth_map_csv(map) : depth_map_json(map, config));
    if (!out) {
        throw DataError("failed writing depth map '" + path.string() + "'");
    }
}

DegeneracyReport detect_degenerate(std::span<const RoutingTrace> traces, double threshold) {
    if (traces.empty()) {
        throw ShapeError("detect_degenerate: no traces");
    }
    DegeneracyReport rep;
    for (const auto& t : traces) {
        const auto h = t.depth_histogram();
        if (rep.histogram.size() < h.size()) {
            rep.histogram.resize(h.size(), 0);
        }
        for (std::size_t d = 0; d < h.size(); ++d) {
            rep.histogram[d] += h[d];
            rep.total_tokens += h[d];
        }
    }
    rep.shallow_tokens = rep.histogram.empty() ? 0 : rep.histogram[0];
    rep.shallow_fraction = rep.total_tokens == 0
                               ? 0.0
                               : static_cast<double>(rep.shallow_tokens) / static_cast<double>(rep.total_tokens);
    rep.degenerate = rep.total_tokens > 0 && rep.shallow_fraction >= threshold;
    return rep;
}

namespace {

void run_forward(std::span<const Tensor> images, const ModelParams& params, const ModelConfig& config,
                 std::size_t threads) {
    if (threads <= 1 || images.size() <= 1) {
        NoGradGuard guard;
        for (const auto& image : images) {
            Tensor logits;
            forward_sample(image, params, config, logits);
        }
        return;
    }
    const std::size_t workers = std::min(threads, images.size());
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            NoGradGuard guard;
            for (std::size_t i = w; i < images.size(); i += workers) {
                Tensor logits;
                forward_sample(images[i], params, config, logits);
            }
        });
    }
    for (auto& t : pool) {
        t.join();
    }
}

} // namespace

ThroughputReport bench_throughput(const ModelParams& params, const ModelConfig& config,
                                  std::span<const Tensor> images, std::size_t repeats,
                                  std::size_t threads) {
    if (repeats < 3) {
        throw ConfigError("bench_throughput: repeats must be at least 3");
    }
    if (images.empty()) {
        throw ConfigError("bench_throughput: empty batch");
    }
    const ModelParams local = params.clone(config.precision);
    std::vector<Tensor> batch;
    for (const auto& image : images) {
        batch.push_back(image.to(config.precision));
    }

    ThroughputReport rep;
    rep.batch = batch.size();
    rep.threads = std::max<std::size_t>(1, threads);
    rep.precision = config.precision;

    run_forward(batch, local, config, rep.threads);
    std::vector<double> rates;
    for (std::size_t i = 0; i < repeats; ++i) {
        const auto start = std::chrono::steady_clock::now();
        run_forward(batch, local, config, rep.threads);
        const std::chrono::duration<double> elapsed = std::chrono::steady_clock::now() - start;
        rep.seconds.push_back(elapsed.count());
        rates.push_back(static_cast<double>(batch.size()) / std::max(elapsed.count(), 1e-12));
    }
    std::vector<double> sorted = rates;
    std::sort(sorted.begin(), sorted.end());
    const std::size_t mid = sorted.size() / 2;
    rep.images_per_second = sorted.size() % 2 == 1 ? sorted[mid] : 0.5 * (sorted[mid - 1] + sorted[mid]);
    double mean = 0.0;
    for (double r : rates) {
        mean += r;
    }
    mean /= static_cast<double>(rates.size());
    for (double r : rates) {
        rep.variance += (r - mean) * (r - mean);
    }
    rep.variance /= static_cast<double>(rates.size());
    return rep;
}

} // namespace morvit
