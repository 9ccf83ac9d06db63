#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "morvit/checkpoint.hpp"
#include "morvit/data.hpp"
#include "morvit/profiler.hpp"
#include "morvit/train.hpp"

using namespace morvit;

namespace {

constexpr int kOk = 0;
constexpr int kUsage = 1;
constexpr int kData = 2;
constexpr int kNumeric = 3;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string shortest(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
}

// "synth:N:seed" or a CIFAR-10 binary file.
Dataset load_data(const std::string& spec, const RunConfig& config, const std::string& flag) {
    if (spec.rfind("synth:", 0) == 0) {
        const auto second = spec.find(':', 6);
        try {
            const std::size_t n = std::stoul(spec.substr(6, second - 6));
            const std::uint64_t seed = second == std::string::npos ? 0 : std::stoull(spec.substr(second + 1));
            return synth_mixed_difficulty(n, seed, config.model, config.train.synth_hard_fraction);
        } catch (const std::logic_error&) {
            throw UsageError(flag + ": expected synth:N:seed, got '" + spec + "'");
        }
    }
    return load_cifar10_binary(spec);
}

void apply_overrides(RunConfig& config, const std::vector<std::string>& sets) {
    for (const auto& kv : sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) {
            throw UsageError("--set: expected key=value, got '" + kv + "'");
        }
        try {
            set_config_value(config, kv.substr(0, eq), kv.substr(eq + 1));
        } catch (const ConfigError& e) {
            throw UsageError(std::string("--set: ") + e.what());
        }
    }
}

void validate_flags(const RunConfig& config) {
    try {
        config.model.validate();
        config.train.validate();
    } catch (const ConfigError& e) {
        throw UsageError(e.what());
    }
}

struct TrainArgs {
    std::string config;
    std::string data;
    std::string out;
    std::optional<std::size_t> epochs;
    std::optional<std::uint64_t> seed;
    std::string metrics;
    std::vector<std::string> sets;
    bool resume = false;
};

int cmd_train(const TrainArgs& a) {
    std::optional<Checkpoint> resumed;
    RunConfig config;
    if (a.resume && std::filesystem::exists(a.out)) {
        resumed = load_checkpoint(a.out);
        config = resumed->config;
    } else if (!a.config.empty()) {
        config = load_run_config(a.config);
    }
    apply_overrides(config, a.sets);
    if (a.epochs) config.train.epochs = *a.epochs;
    if (a.seed) config.model.seed = *a.seed;
    validate_flags(config);

    const Dataset data = load_data(a.data, config, "--data");
    TrainState state = resumed ? resume_train_state(*resumed) : init_train_state(config);
    TrainOptions opts;
    opts.epochs = config.train.epochs > state.epoch ? config.train.epochs - state.epoch : 0;
    opts.checkpoint_path = a.out;
    opts.metrics_path = a.metrics.empty() ? a.out + ".metrics.tsv" : a.metrics;
    opts.on_epoch = [](const EpochMetrics& m) { std::cout << format_metrics_line(m) << std::flush; };
    std::cout << "epoch\ttrain_loss\ttrain_acc\tmean_exit_depth\tflops_per_image\n";
    train(config, data, state, opts);
    if (opts.epochs == 0) {
        save_checkpoint(snapshot(config, state), a.out);
    }
    return kOk;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_spec, const std::string& predictions) {
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    const Dataset data = load_data(data_spec, ckpt.config, "--data");
    EvalOptions opts;
    opts.threads = worker_threads();
    const EvalResult ev = evaluate(ckpt, data, opts);
    std::cout << "accuracy\t" << shortest(ev.accuracy) << "\n";
    std::cout << "correct\t" << ev.correct << "/" << ev.total << "\n";
    std::cout << "mean_exit_depth\t" << shortest(ev.mean_exit_depth) << "\n";
    if (!std::isnan(ev.hard_mean_depth)) {
        std::cout << "hard_mean_depth\t" << shortest(ev.hard_mean_depth) << "\n";
        std::cout << "easy_mean_depth\t" << shortest(ev.easy_mean_depth) << "\n";
    }
    std::cout << "flops_per_image\t" << shortest(ev.flops_per_image) << "\n";
    for (std::size_t k = 0; k < ev.per_class_accuracy.size(); ++k) {
        std::cout << "class_" << k << "\t" << shortest(ev.per_class_accuracy[k]) << "\t(" << ev.per_class_total[k]
                  << ")\n";
    }
    if (!predictions.empty()) {
        std::ofstream out(predictions);
        for (std::size_t i = 0; i < ev.predictions.size(); ++i) {
            out << i << "\t" << data[i].label << "\t" << ev.predictions[i] << "\n";
        }
        if (!out) {
            throw DataError("cannot write predictions '" + predictions + "'");
        }
    }
    return kOk;
}

int cmd_profile(const std::string& ckpt_path, bool sweep, const std::string& data_spec, std::size_t batch,
                std::size_t repeats) {
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    const ModelParams params = restore_params(ckpt);
    const std::string spec = data_spec.empty() ? "synth:" + std::to_string(batch) + ":1" : data_spec;
    Dataset data = load_data(spec, ckpt.config, "--data");
    check_dataset(data, ckpt.config.model);
    if (data.size() > batch) data.resize(batch);
    std::vector<Tensor> images;
    for (const auto& d : data) images.push_back(d.image());
    const std::size_t threads = worker_threads();

    auto measure = [&](const ModelConfig& cfg) {
        EvalOptions opts;
        opts.threads = threads;
        const EvalResult ev = evaluate(params, cfg, data, opts);
        const ThroughputReport tp = bench_throughput(params, cfg, images, repeats, threads);
        return std::pair{ev, tp};
    };
    const ModelConfig& model = ckpt.config.model;
    auto [ev, tp] = measure(model);
    std::cout << "params\t" << param_count(model) << "\n";
    std::cout << "flops_per_image\t" << shortest(ev.flops_per_image) << "\n";
    std::cout << "mean_exit_depth\t" << shortest(ev.mean_exit_depth) << "\n";
    std::cout << "images_per_second\t" << shortest(tp.images_per_second) << "\n";
    std::cout << "variance\t" << shortest(tp.variance) << "\n";
    std::cout << "batch\t" << tp.batch << "\n";
    std::cout << "repeats\t" << tp.seconds.size() << "\n";
    std::cout << "threads\t" << tp.threads << "\n";
    std::cout << "precision\t" << to_string(tp.precision) << "\n";
    if (sweep) {
        std::cout << "\nbeta\tflops_per_image\tmean_exit_depth\timg_per_s\n";
        for (double beta : {0.0, 0.25, 0.5, 0.75, 0.9}) {
            ModelConfig cfg = model;
            cfg.beta = beta;
            auto [e, t] = measure(cfg);
            std::cout << shortest(beta) << "\t" << shortest(e.flops_per_image) << "\t" << shortest(e.mean_exit_depth)
                      << "\t" << shortest(t.images_per_second) << "\n";
        }
    }
    return kOk;
}

int cmd_depthmap(const std::string& ckpt_path, const std::string& input, std::size_t index, const std::string& out,
                 const std::string& format) {
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    const ModelParams params = restore_params(ckpt);
    const ModelConfig& model = ckpt.config.model;
    DatasetRecord record;
    std::ifstream probe(input, std::ios::binary);
    if (!probe) {
        throw DataError("cannot open image '" + input + "'");
    }
    char magic[2] = {0, 0};
    probe.read(magic, 2);
    probe.close();
    if (magic[0] == 'P' && magic[1] == '6') {
        record = load_ppm(input);
    } else {
        const Dataset data = load_cifar10_binary(input);
        if (index >= data.size()) {
            throw UsageError("--index " + std::to_string(index) + " is past the " + std::to_string(data.size()) +
                             " records in '" + input + "'");
        }
        record = data[index];
    }
    const Dataset one{record};
    check_dataset(one, model);
    Tensor logits;
    const SampleRouting s = forward_sample(record.image(), params, model, logits);
    const DepthMap map = make_depth_map(s.trace, model.grid_rows(), model.grid_cols());
    export_depth_map(map, model, out, parse_depth_map_format(format));
    std::cout << depth_map_csv(map);
    return kOk;
}

int cmd_ablate(const std::string& config_path, const std::string& data_spec, const std::string& test_spec,
               const std::string& out, const std::vector<std::string>& sets, const std::vector<std::string>& variants,
               std::optional<std::size_t> epochs) {
    RunConfig config = load_run_config(config_path);
    apply_overrides(config, sets);
    if (epochs) config.train.epochs = *epochs;
    validate_flags(config);
    const Dataset train_set = load_data(data_spec, config, "--data");
    std::string held = test_spec;
    if (held.empty()) {
        // synth:N:seed -> synth:N:seed+1; a file is reused as its own test set.
        held = data_spec;
        if (data_spec.rfind("synth:", 0) == 0) {
            const auto second = data_spec.find(':', 6);
            const std::uint64_t seed = second == std::string::npos ? 0 : std::stoull(data_spec.substr(second + 1));
            held = data_spec.substr(0, second) + ":" + std::to_string(seed + 1);
        }
    }
    const Dataset test_set = load_data(held, config, "--test");
    AblationOptions opts;
    if (!variants.empty()) opts.variants = variants;
    opts.threads = worker_threads();
    const auto rows = run_ablation(config, train_set, test_set, opts);
    const std::string table = format_ablation_table(rows);
    std::ofstream f(out);
    f << table;
    if (!f) {
        throw DataError("cannot write table '" + out + "'");
    }
    std::cout << table;
    return kOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"MoR-ViT: vision transformer with per-token recursion depth"};
    app.name("morvit");
    app.require_subcommand(0, 1);

    TrainArgs ta;
    auto* train_cmd = app.add_subcommand("train", "Train a model and write a checkpoint");
    train_cmd->add_option("--config", ta.config, "Run configuration file (key = value lines)");
    train_cmd->add_option("--data", ta.data, "Training data: synth:N:seed or a CIFAR-10 binary file")->required();
    train_cmd->add_option("--out", ta.out, "Checkpoint path, rewritten after every epoch")->required();
    train_cmd->add_option("--epochs", ta.epochs, "Override the epoch count");
    train_cmd->add_option("--seed", ta.seed, "Override the model seed");
    train_cmd->add_option("--metrics", ta.metrics, "Metrics log path (default: <out>.metrics.tsv)");
    train_cmd->add_option("--set", ta.sets, "Override any config key: --set key=value (repeatable)");
    train_cmd->add_flag("--resume", ta.resume, "Continue from --out if it exists");

    std::string ckpt, ablate_config, data, out, format = "csv", input, predictions, test, prof_data;
    std::size_t index = 0, batch = 32, repeats = 5;
    std::optional<std::size_t> ab_epochs;
    std::vector<std::string> ab_sets, variants;
    bool sweep = false;

    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
    eval_cmd->add_option("--ckpt", ckpt, "Checkpoint file")->required();
    eval_cmd->add_option("--data", data, "Data: synth:N:seed or a CIFAR-10 binary file")->required();
    eval_cmd->add_option("--predictions", predictions, "Write index, label, prediction per sample");

    auto* profile_cmd = app.add_subcommand("profile", "Report FLOPs, parameters and throughput");
    profile_cmd->add_option("--ckpt", ckpt, "Checkpoint file")->required();
    profile_cmd->add_flag("--beta-sweep", sweep, "Also tabulate beta in {0, 0.25, 0.5, 0.75, 0.9}");
    profile_cmd->add_option("--data", prof_data, "Images to profile on (default: synth:<batch>:1)");
    profile_cmd->add_option("--batch", batch, "Images per timed batch")->check(CLI::PositiveNumber);
    profile_cmd->add_option("--repeats", repeats, "Timed batches (at least 3)")->check(CLI::Range(3, 1000));

    auto* depth_cmd = app.add_subcommand("depthmap", "Export the per-patch exit depths of one image");
    depth_cmd->add_option("--ckpt", ckpt, "Checkpoint file")->required();
    depth_cmd->add_option("--input", input, "Binary PPM (P6) image or CIFAR-10 binary file")->required();
    depth_cmd->add_option("--index", index, "Record index when --input is a CIFAR-10 file");
    depth_cmd->add_option("--out", out, "Output path")->required();
    depth_cmd->add_option("--format", format, "csv or json")->check(CLI::IsMember({"csv", "json"}));

    auto* ablate_cmd = app.add_subcommand("ablate", "Train and compare the ablation variants");
    ablate_cmd->add_option("--config", ablate_config, "Run configuration file")->required();
    ablate_cmd->add_option("--data", data, "Training data: synth:N:seed or a CIFAR-10 binary file")->required();
    ablate_cmd->add_option("--test", test, "Held-out data (default: synth seed + 1, or --data itself)");
    ablate_cmd->add_option("--out", out, "Table path (tab-separated)")->required();
    ablate_cmd->add_option("--epochs", ab_epochs, "Override the epoch count");
    ablate_cmd->add_option("--set", ab_sets, "Override any config key: --set key=value (repeatable)");
    ablate_cmd->add_option("--variant", variants, "Restrict to these variants (repeatable)")
        ->check(CLI::IsMember(ablation_variants()));

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        std::cout << (app.get_subcommands().empty() ? app.help("", CLI::AppFormatMode::All)
                                                    : app.get_subcommands()[0]->help());
        return kOk;
    } catch (const CLI::ParseError& e) {
        std::cerr << "morvit: " << e.what() << "\n\n" << app.help();
        return kUsage;
    }
    if (app.get_subcommands().empty()) {
        std::cerr << app.help();
        return kUsage;
    }

    try {
        if (train_cmd->parsed()) return cmd_train(ta);
        if (eval_cmd->parsed()) return cmd_eval(ckpt, data, predictions);
        if (profile_cmd->parsed()) return cmd_profile(ckpt, sweep, prof_data, batch, repeats);
        if (depth_cmd->parsed()) return cmd_depthmap(ckpt, input, index, out, format);
        if (ablate_cmd->parsed()) return cmd_ablate(ablate_config, data, test, out, ab_sets, variants, ab_epochs);
    } catch (const UsageError& e) {
        std::cerr << "morvit: " << e.what() << "\n";
        return kUsage;
    } catch (const NumericError& e) {
        std::cerr << "morvit: numeric failure: " << e.what() << "\n";
        return kNumeric;
    } catch (const std::exception& e) {
        std::cerr << "morvit: " << e.what() << "\n";
        return kData;
    }
    return kUsage;
}
