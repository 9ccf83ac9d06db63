#include "morvit/train.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>
#include <thread>

#include "morvit/profiler.hpp"

namespace morvit {

namespace {

std::string shortest(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
}

constexpr std::uint64_t kDataStream = 1;

} // namespace

std::string format_metrics_line(const EpochMetrics& m) {
    return std::to_string(m.epoch) + '\t' + shortest(m.train_loss) + '\t' + shortest(m.train_acc) + '\t' +
           shortest(m.mean_exit_depth) + '\t' + shortest(m.flops_per_image) + '\n';
}

EpochMetrics parse_metrics_line(std::string_view line) {
    std::vector<std::string_view> cols;
    std::size_t start = 0;
    while (true) {
        const auto tab = line.find('\t', start);
        cols.push_back(line.substr(start, tab == std::string_view::npos ? line.npos : tab - start));
        if (tab == std::string_view::npos) {
            break;
        }
        start = tab + 1;
    }
    if (!cols.empty() && !cols.back().empty() && cols.back().back() == '\n') {
        cols.back().remove_suffix(1);
    }
    if (cols.size() != 5) {
        throw DataError("metrics line has " + std::to_string(cols.size()) + " columns, expected 5");
    }
    auto num = [](std::string_view s, auto& out) {
        auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
        if (ec != std::errc{} || ptr != s.data() + s.size()) {
            throw DataError("bad metrics field '" + std::string(s) + "'");
        }
    };
    EpochMetrics m;
    num(cols[0], m.epoch);
    num(cols[1], m.train_loss);
    num(cols[2], m.train_acc);
    num(cols[3], m.mean_exit_depth);
    num(cols[4], m.flops_per_image);
    return m;
}

TrainState init_train_state(const RunConfig& config) {
    config.model.validate();
    config.train.validate();
    TrainState s;
    s.params = ModelParams::init(config.model);
    s.optimizer = OptimizerState::from_config(config.train);
    s.rng = Rng(config.model.seed).fork(kDataStream);
    return s;
}

TrainState resume_train_state(const Checkpoint& ckpt) {
    TrainState s;
    s.params = restore_params(ckpt);
    s.optimizer = ckpt.optimizer ? *ckpt.optimizer : OptimizerState::from_config(ckpt.config.train);
    s.rng = ckpt.rng;
    s.epoch = ckpt.epoch;
    return s;
}

Checkpoint snapshot(const RunConfig& config, TrainState& state) {
    return make_checkpoint(config, state.params, &state.optimizer, state.epoch, state.rng);
}

double learning_rate(const TrainConfig& config, std::uint64_t step, std::uint64_t total_steps) {
    if (config.lr_schedule == LrSchedule::constant || total_steps == 0) {
        return config.lr;
    }
    const double t = static_cast<double>(std::min(step, total_steps)) / static_cast<double>(total_steps);
    return config.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

TrainResult train(const RunConfig& config, const Dataset& data, TrainState& state,
                  const TrainOptions& options) {
    if (data.empty()) {
        throw DataError("train: empty dataset");
    }
    config.model.validate();
    config.train.validate();
    check_dataset(data, config.model);

    const ModelConfig& model = config.model;
    const std::size_t batch = config.train.batch_size;
    const std::size_t steps_per_epoch = (data.size() + batch - 1) / batch;
    const std::uint64_t total_steps = static_cast<std::uint64_t>(config.train.epochs) * steps_per_epoch;
    const LossSpec spec = loss_spec(model);
    auto params = state.params.tensors();

    std::ofstream metrics_out;
    if (options.metrics_path) {
        metrics_out.open(*options.metrics_path,
                         state.epoch == 0 ? std::ios::trunc : std::ios::app);
        if (!metrics_out) {
            throw DataError("cannot write metrics log '" + options.metrics_path->string() + "'");
        }
    }

    TrainResult result;
    std::size_t steps_done = 0;
    for (std::size_t e = 0; e < options.epochs; ++e) {
        std::vector<std::size_t> order(data.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        state.rng.shuffle(std::span<std::size_t>(order));

        double loss_sum = 0.0;
        std::size_t seen = 0;
        for (std::size_t start = 0; start < order.size(); start += batch) {
            if (options.max_steps != 0 && steps_done == options.max_steps) {
                return result;
            }
            const std::size_t end = std::min(order.size(), start + batch);
            std::vector<Tensor> images;
            std::vector<std::size_t> labels;
            for (std::size_t i = start; i < end; ++i) {
                const DatasetRecord& rec = data[order[i]];
                if (config.train.augment_flip && state.rng.bernoulli(0.5)) {
                    images.push_back(flip_horizontal(rec, model.patch_size).image());
                } else {
                    images.push_back(rec.image());
                }
                labels.push_back(rec.label);
            }
            for (auto& p : params) {
                p.zero_grad();
            }
            const ForwardResult fr = forward(images, state.params, model, options.hooks);
            const Tensor loss = total_loss(fr.logits, labels, fr.samples, spec);
            const double value = loss.item();
            if (!std::isfinite(value)) {
                throw NumericError("non-finite loss " + shortest(value) + " at epoch " +
                                   std::to_string(state.epoch + 1) + ", step " +
                                   std::to_string(state.optimizer.step + 1));
            }
            loss.backward();
            state.optimizer.lr = learning_rate(config.train, state.optimizer.step, total_steps);
            adam_step(params, state.optimizer);
            for (const auto& p : params) {
                check_finite(p, "parameter after step " + std::to_string(state.optimizer.step));
            }
            result.step_losses.push_back(value);
            loss_sum += value * static_cast<double>(end - start);
            seen += end - start;
            ++steps_done;
        }
        state.epoch += 1;

        EpochMetrics m;
        m.epoch = state.epoch;
        m.train_loss = loss_sum / static_cast<double>(seen);
        if (options.epoch_eval) {
            const EvalResult ev = evaluate(state.params, model, data);
            m.train_acc = ev.accuracy;
            m.mean_exit_depth = ev.mean_exit_depth;
            m.flops_per_image = ev.flops_per_image;
        }
        result.metrics.push_back(m);
        if (metrics_out.is_open()) {
            metrics_out << format_metrics_line(m) << std::flush;
            if (!metrics_out) {
                throw DataError("failed writing metrics log '" + options.metrics_path->string() + "'");
            }
        }
        if (options.checkpoint_path) {
            save_checkpoint(snapshot(config, state), *options.checkpoint_path);
        }
        if (options.on_epoch) {
            options.on_epoch(m);
        }
    }
    return result;
}

EvalResult evaluate(const ModelParams& params, const ModelConfig& config, const Dataset& data,
                    const EvalOptions& options) {
    if (data.empty()) {
        throw DataError("evaluate: empty dataset");
    }
    const std::size_t n = data.size();
    std::vector<std::size_t> predictions(n);
    std::vector<RoutingTrace> traces(n);

    auto run = [&](std::size_t first, std::size_t stride) {
        NoGradGuard guard;
        for (std::size_t i = first; i < n; i += stride) {
            Tensor logits;
            SampleRouting s = forward_sample(data[i].image(), params, config, logits, options.hooks);
            predictions[i] = predict(logits)[0];
            traces[i] = std::move(s.trace);
        }
    };
    const std::size_t workers = std::clamp<std::size_t>(options.threads, 1, n);
    if (workers == 1) {
        run(0, 1);
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back(run, w, workers);
        }
        for (auto& t : pool) {
            t.join();
        }
    }

    EvalResult r;
    r.total = n;
    r.predictions = predictions;
    r.per_class_total.assign(config.num_classes, 0);
    std::vector<std::size_t> per_class_correct(config.num_classes, 0);
    r.depth_histogram.assign(config.max_recursion, 0);
    double depth_sum = 0.0;
    std::size_t depth_count = 0;
    double hard_sum = 0.0, easy_sum = 0.0;
    std::size_t hard_n = 0, easy_n = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t label = data[i].label;
        if (label >= config.num_classes) {
            throw DataError("evaluate: record " + std::to_string(i) + " has label " +
                            std::to_string(label) + " outside the model's classes");
        }
        r.per_class_total[label] += 1;
        if (predictions[i] == label) {
            r.correct += 1;
            per_class_correct[label] += 1;
        }
        const auto& trace = traces[i];
        const auto& diff = data[i].difficulty;
        for (std::size_t t = 0; t < trace.exit_depth.size(); ++t) {
            const std::size_t d = trace.exit_depth[t];
            r.depth_histogram.at(d - 1) += 1;
            depth_sum += static_cast<double>(d);
            depth_count += 1;
            if (diff.size() == trace.exit_depth.size()) {
                if (diff[t] != 0) {
                    hard_sum += static_cast<double>(d);
                    hard_n += 1;
                } else {
                    easy_sum += static_cast<double>(d);
                    easy_n += 1;
                }
            }
        }
        r.total_flops += count_flops(config, trace).total;
    }
    const double nan = std::numeric_limits<double>::quiet_NaN();
    r.accuracy = static_cast<double>(r.correct) / static_cast<double>(n);
    for (std::size_t c = 0; c < config.num_classes; ++c) {
        r.per_class_accuracy.push_back(
            r.per_class_total[c] == 0
                ? nan
                : static_cast<double>(per_class_correct[c]) / static_cast<double>(r.per_class_total[c]));
    }
    r.mean_exit_depth = depth_count == 0 ? 0.0 : depth_sum / static_cast<double>(depth_count);
    r.hard_mean_depth = hard_n == 0 ? nan : hard_sum / static_cast<double>(hard_n);
    r.easy_mean_depth = easy_n == 0 ? nan : easy_sum / static_cast<double>(easy_n);
    r.flops_per_image = static_cast<double>(r.total_flops) / static_cast<double>(n);
    if (options.keep_traces) {
        r.traces = std::move(traces);
    }
    return r;
}

EvalResult evaluate(const Checkpoint& ckpt, const Dataset& data, const EvalOptions& options) {
    check_dataset(data, ckpt.config.model);
    const ModelParams params = restore_params(ckpt);
    return evaluate(params, ckpt.config.model, data, options);
}

std::vector<std::string> ablation_variants() { return {"full", "static-depth", "unshared", "plain-vit"}; }

RunConfig ablation_config(const RunConfig& base, std::string_view variant) {
    RunConfig c = base;
    if (variant == "full") {
        c.model.share_params = true;
    } else if (variant == "static-depth") {
        c.model.routing_mode = RoutingMode::static_depth;
        c.model.share_params = true;
    } else if (variant == "unshared") {
        c.model.share_params = false;
    } else if (variant == "plain-vit") {
        c.model.routing_mode = RoutingMode::static_depth;
        c.model.share_params = false;
    } else {
        throw ConfigError("unknown ablation variant '" + std::string(variant) + "'");
    }
    return c;
}

std::vector<AblationRow> run_ablation(const RunConfig& base, const Dataset& train_set,
                                      const Dataset& test_set, const AblationOptions& options) {
    if (options.variants.empty()) {
        throw ConfigError("run_ablation: no variants requested");
    }
    if (test_set.empty()) {
        throw DataError("run_ablation: empty test set");
    }
    std::vector<Tensor> bench_images;
    for (std::size_t i = 0; i < std::min(options.bench_batch, test_set.size()); ++i) {
        bench_images.push_back(test_set[i].image());
    }
    std::vector<AblationRow> rows;
    for (const auto& variant : options.variants) {
        const RunConfig cfg = ablation_config(base, variant);
        TrainState state = init_train_state(cfg);
        TrainOptions topts;
        topts.epochs = cfg.train.epochs;
        topts.epoch_eval = false;
        train(cfg, train_set, state, topts);
        const EvalResult ev = evaluate(state.params, cfg.model, test_set, {options.threads, false, nullptr});
        const ThroughputReport tp =
            bench_throughput(state.params, cfg.model, bench_images, options.bench_repeats, options.threads);
        AblationRow row;
        row.variant = variant;
        row.dynamic = cfg.model.routing_mode != RoutingMode::static_depth;
        row.shared = cfg.model.share_params;
        row.top1 = ev.accuracy;
        row.params = param_count(cfg.model);
        row.images_per_second = tp.images_per_second;
        row.mean_exit_depth = ev.mean_exit_depth;
        row.flops_per_image = ev.flops_per_image;
        rows.push_back(row);
    }
    return rows;
}

std::string format_ablation_table(const std::vector<AblationRow>& rows) {
    std::ostringstream os;
    os << "variant\tdyn_rec\tshare\ttop1\tparams\timg_per_s\tmean_exit_depth\tflops_per_image\n";
    for (const auto& r : rows) {
        char rate[32];
        std::snprintf(rate, sizeof(rate), "%.1f", r.images_per_second);
        os << r.variant << '\t' << (r.dynamic ? "yes" : "no") << '\t' << (r.shared ? "yes" : "no") << '\t'
           << shortest(r.top1) << '\t' << r.params << '\t' << rate << '\t' << shortest(r.mean_exit_depth)
           << '\t' << shortest(r.flops_per_image) << '\n';
    }
    return os.str();
}

} // namespace morvit
