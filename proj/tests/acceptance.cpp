// Acceptance suite: one PASS/FAIL line per criterion.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "morvit/checkpoint.hpp"
#include "morvit/data.hpp"
#include "morvit/profiler.hpp"
#include "morvit/train.hpp"
#include "support.hpp"

using namespace morvit;

namespace {

namespace tol {
constexpr double gradient = 1e-4;
constexpr double weight_tied = 1e-10;
constexpr double train_acc = 0.95;
constexpr double heldout_acc = 0.85;
constexpr double throughput_margin = 1.10;
constexpr double vit_b16_params = 86e6;
constexpr double vit_b16_rel = 0.02;
constexpr double a6_budget_seconds = 600.0;
} // namespace tol

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof(buf), f, args...);
    return buf;
}

std::filesystem::path source_path(const std::string& rel) {
    return std::filesystem::path(MORVIT_SOURCE_DIR) / rel;
}

RunConfig desk_config() { return load_run_config(source_path("configs/synth-desk.cfg")); }

// Overwrites every parameter with values large enough to exercise the block.
void scramble(ModelParams& params, Rng& rng) {
    for (auto& [name, t] : params.named()) {
        const bool gain = name.find("gain") != std::string::npos;
        for (auto& v : t->mutable_data<double>()) v = gain ? rng.uniform(0.5, 1.5) : rng.uniform(-0.5, 0.5);
    }
}

Outcome a1() {
    double worst = 0.0;
    std::map<std::string, double> by_group;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        ModelConfig c = model_preset("tiny-desk");
        c.seed = seed;
        auto params = ModelParams::init(c);
        Rng rng(seed + 1000);
        scramble(params, rng);
        std::vector<Tensor> images{testing::random_image(c, rng), testing::random_image(c, rng)};
        const std::size_t labels[] = {seed % c.num_classes, (seed + 1) % c.num_classes};

        // Freeze the selection at the base point; the gradient is that of the
        // smooth piece the base point lies on.
        std::vector<std::vector<std::vector<std::size_t>>> kept(images.size());
        auto base = forward(images, params, c);
        for (std::size_t i = 0; i < images.size(); ++i)
            for (const auto& s : base.samples[i].trace.steps) kept[i].push_back(s.kept);

        for (double lambda : {c.lambda, 1.0}) {
            const LossSpec spec{lambda, 1.0 - c.beta};
            auto loss = [&] {
                std::vector<SampleRouting> samples;
                std::vector<Tensor> rows;
                for (std::size_t i = 0; i < images.size(); ++i) {
                    RoutingHooks hooks;
                    hooks.forced_keep = [&, i](std::size_t step, std::span<const std::size_t>) {
                        return kept[i][step - 1];
                    };
                    Tensor logits;
                    samples.push_back(forward_sample(images[i], params, c, logits, &hooks));
                    rows.push_back(logits);
                }
                return total_loss(concat_rows(rows), labels, samples, spec);
            };
            for (auto& [name, t] : params.named()) {
                const double e = testing::max_grad_error({t}, loss);
                const std::string group = name.substr(0, name.find('.'));
                by_group[group] = std::max(by_group[group], e);
                worst = std::max(worst, e);
            }
        }
    }
    std::string detail = fmt("max rel err %.3g (tol %g) over 20 seeds;", worst, tol::gradient);
    for (const auto& [g, e] : by_group) detail += fmt(" %s %.2g", g.c_str(), e);
    return {worst < tol::gradient, detail};
}

Outcome a2() {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        ModelConfig c = model_preset("tiny-desk");
        c.seed = seed;
        c.max_recursion = 3;
        c.beta = 0.0;
        c.share_params = true;
        auto params = ModelParams::init(c);
        Rng rng(seed + 7);
        scramble(params, rng);
        auto image = testing::random_image(c, rng);
        RoutingHooks hooks;
        hooks.forced_gate = 1.0;
        Tensor logits;
        forward_sample(image, params, c, logits, &hooks);
        auto oracle = testing::weight_tied_logits(image, params, c, 3);
        worst = std::max(worst, testing::max_abs_diff(logits.to_vector(), oracle.to_vector()));
    }
    return {worst < tol::weight_tied, fmt("max |diff| %.3g (tol %g) over 10 seeds", worst, tol::weight_tied)};
}

Outcome a3() {
    std::size_t checked = 0;
    std::size_t wrong = 0;
    Rng rng(3);
    for (double beta : {0.0, 0.25, 0.5, 0.75, 0.9}) {
        for (std::size_t a = 1; a <= 256; ++a) {
            const auto expect = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround((1.0 - beta) * a)));
            std::vector<double> random(a);
            for (auto& s : random) s = rng.uniform();
            std::vector<double> tied(a, 0.5);
            for (const auto* scores : {&random, &tied}) {
                auto sel = select_active(*scores, beta);
                ++checked;
                const bool ok = sel.kept.size() == expect && std::is_sorted(sel.kept.begin(), sel.kept.end()) &&
                                static_cast<std::size_t>(std::count(sel.mask.begin(), sel.mask.end(), true)) == expect;
                if (!ok) ++wrong;
            }
        }
    }
    return {wrong == 0, fmt("%zu of %zu (A, beta, scores) cases wrong", wrong, checked)};
}

std::vector<double> row_of(const Tensor& h, std::size_t r) {
    const std::size_t d = h.dim(1);
    auto v = h.to_vector();
    return {v.begin() + static_cast<std::ptrdiff_t>(r * d), v.begin() + static_cast<std::ptrdiff_t>((r + 1) * d)};
}

Outcome a4() {
    std::size_t violations = 0;
    std::size_t exited_checked = 0;
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        ModelConfig c = model_preset("tiny-desk");
        c.seed = seed;
        c.max_recursion = 4;
        c.routing_mode = seed % 2 == 0 ? RoutingMode::expert_choice : RoutingMode::token_choice;
        auto params = ModelParams::init(c);
        Rng rng(seed + 500);
        scramble(params, rng);
        const Tensor z0 = embed(patchify(testing::random_image(c, rng), c.patch_size), params.embed);
        RecursionParams rp{&params.blocks, &params.router, &c, nullptr};
        auto res = run_recursion(z0, rp);

        // Replay step by step, remembering each row at the step it exits.
        std::vector<std::size_t> fixed;
        if (c.routing_mode == RoutingMode::token_choice) {
            auto depth = token_choice_assign(depth_logits(z0, *params.router.depth_predictor));
            fixed.assign(z0.dim(0), c.max_recursion);
            std::copy(depth.begin(), depth.end(), fixed.begin() + 1);
        }
        TokenState state = initial_state(z0);
        std::map<std::size_t, std::vector<double>> at_exit;
        for (std::size_t step = 1; step <= c.max_recursion; ++step) {
            if (std::none_of(state.active.begin() + 1, state.active.end(), [](bool a) { return a; })) break;
            auto out = recursion_step(state, rp, step, fixed);
            for (std::size_t t = 1; t < state.active.size(); ++t) {
                if (state.active[t] && !out.state.active[t]) at_exit[t] = row_of(out.state.hidden, t);
            }
            state = out.state;
        }
        for (const auto& [t, row] : at_exit) {
            ++exited_checked;
            if (row_of(res.hidden, t) != row) ++violations;
        }
        for (std::size_t i = 1; i < res.trace.steps.size(); ++i) {
            if (res.trace.steps[i].active_before() > res.trace.steps[i - 1].active_before()) ++violations;
            if (res.trace.steps[i].active_before() > res.trace.steps[i - 1].active_after()) ++violations;
        }
        auto hist = res.trace.depth_histogram();
        if (std::accumulate(hist.begin(), hist.end(), std::size_t{0}) != c.num_patches()) ++violations;
    }
    return {violations == 0 && exited_checked > 0,
            fmt("%zu violations; %zu exited rows compared bit-for-bit over 50 forwards", violations, exited_checked)};
}

Outcome a5() {
    ModelConfig c = model_preset("tiny-desk");
    c.routing_mode = RoutingMode::static_depth;
    c.max_recursion = 3;
    auto params = ModelParams::init(c);
    Rng rng(5);
    auto image = testing::random_image(c, rng);
    Tensor logits;
    MacCounter counter;
    auto s = forward_sample(image, params, c, logits);
    const std::uint64_t instrumented = 2 * counter.count();
    const std::uint64_t counted = count_flops(c, s.trace).total;

    ModelConfig m = desk_config().model;
    auto mp = ModelParams::init(m);
    std::vector<Tensor> images;
    for (int i = 0; i < 8; ++i) images.push_back(testing::random_image(m, rng));
    std::vector<std::uint64_t> sweep;
    for (double beta : {0.0, 0.25, 0.5, 0.75, 0.9}) {
        ModelConfig cb = m;
        cb.beta = beta;
        std::uint64_t total = 0;
        for (const auto& img : images) {
            Tensor l;
            total += count_flops(cb, forward_sample(img, mp, cb, l).trace).total;
        }
        sweep.push_back(total);
    }
    const bool monotone = std::is_sorted(sweep.rbegin(), sweep.rend());
    std::string detail = fmt("static trace %llu vs instrumented %llu; beta sweep totals",
                             static_cast<unsigned long long>(counted), static_cast<unsigned long long>(instrumented));
    for (auto v : sweep) detail += fmt(" %llu", static_cast<unsigned long long>(v));
    return {counted == instrumented && monotone, detail};
}

struct DeskRun {
    RunConfig config;
    Dataset train_set;
    Dataset test_set;
    TrainState state;
    TrainResult result;
    std::optional<Checkpoint> midpoint;
    double seconds = 0.0;
};

DeskRun desk_run(std::size_t snapshot_epoch = 0) {
    DeskRun run;
    run.config = desk_config();
    run.train_set = synth_mixed_difficulty(512, 0, run.config.model, run.config.train.synth_hard_fraction);
    run.test_set = synth_mixed_difficulty(256, 1, run.config.model, run.config.train.synth_hard_fraction);
    run.state = init_train_state(run.config);
    TrainOptions opts;
    opts.epochs = run.config.train.epochs;
    opts.on_epoch = [&](const EpochMetrics& m) {
        if (m.epoch == snapshot_epoch) run.midpoint = snapshot(run.config, run.state);
    };
    const auto t0 = std::chrono::steady_clock::now();
    run.result = train(run.config, run.train_set, run.state, opts);
    run.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return run;
}

Outcome a6() {
    DeskRun first = desk_run(15);
    const auto held = evaluate(first.state.params, first.config.model, first.test_set);
    const double train_acc = first.result.metrics.back().train_acc;

    DeskRun second = desk_run();
    const bool reproducible = second.result.step_losses == first.result.step_losses &&
                              bit_identical(snapshot(first.config, first.state), snapshot(second.config, second.state));

    bool resumed_ok = false;
    if (first.midpoint) {
        const auto bytes = encode_checkpoint(*first.midpoint);
        TrainState resumed = resume_train_state(decode_checkpoint(bytes));
        TrainOptions opts;
        opts.epochs = first.config.train.epochs - resumed.epoch;
        auto tail = train(first.config, first.train_set, resumed, opts);
        const std::size_t skip = first.result.step_losses.size() - tail.step_losses.size();
        resumed_ok = std::equal(tail.step_losses.begin(), tail.step_losses.end(),
                                first.result.step_losses.begin() + static_cast<std::ptrdiff_t>(skip)) &&
                     bit_identical(snapshot(first.config, resumed), snapshot(first.config, first.state));
    }
    const bool pass = train_acc >= tol::train_acc && held.accuracy >= tol::heldout_acc && reproducible &&
                      resumed_ok && first.seconds <= tol::a6_budget_seconds;
    return {pass, fmt("train acc %.4f (>= %.2f), held-out acc %.4f (>= %.2f), reproducible %s, resume %s, %.1fs",
                      train_acc, tol::train_acc, held.accuracy, tol::heldout_acc, reproducible ? "yes" : "no",
                      resumed_ok ? "identical" : "DIFFERENT", first.seconds)};
}

Outcome a7() {
    DeskRun run = desk_run();
    EvalOptions keep;
    keep.keep_traces = true;
    const auto held = evaluate(run.state.params, run.config.model, run.test_set, keep);
    const auto seen = evaluate(run.state.params, run.config.model, run.train_set);
    const auto verdict = detect_degenerate(held.traces);

    RunConfig closed = run.config;
    closed.model.router_bias_init = -50.0;
    TrainState closed_state = init_train_state(closed);
    TrainOptions opts;
    opts.epochs = closed.train.epochs;
    opts.epoch_eval = false;
    train(closed, run.train_set, closed_state, opts);
    const auto closed_eval = evaluate(closed_state.params, closed.model, run.test_set, keep);
    const auto closed_verdict = detect_degenerate(closed_eval.traces);

    const bool adaptive = held.hard_mean_depth > held.easy_mean_depth;
    return {adaptive && !verdict.degenerate && closed_verdict.degenerate,
            fmt("held-out hard depth %.4f vs easy %.4f (train set %.4f vs %.4f); detector %s at depth-1 fraction "
                "%.3f; bias -50 run depth-1 fraction %.3f -> %s",
                held.hard_mean_depth, held.easy_mean_depth, seen.hard_mean_depth, seen.easy_mean_depth,
                verdict.degenerate ? "FIRES" : "quiet", verdict.shallow_fraction, closed_verdict.shallow_fraction,
                closed_verdict.degenerate ? "DEGENERATE" : "not degenerate")};
}

Outcome a8() {
    RunConfig base = desk_config();
    base.train.epochs = 3;
    auto train_set = synth_mixed_difficulty(512, 0, base.model, base.train.synth_hard_fraction);
    auto test_set = synth_mixed_difficulty(256, 1, base.model, base.train.synth_hard_fraction);
    AblationOptions opts;
    opts.bench_batch = 32;
    opts.bench_repeats = 9;
    auto rows = run_ablation(base, train_set, test_set, opts);
    std::printf("%s", format_ablation_table(rows).c_str());

    const auto names = ablation_variants();
    bool structure = rows.size() == 4;
    for (std::size_t i = 0; structure && i < 4; ++i) structure = rows[i].variant == names[i];
    if (!structure) return {false, "ablation table does not have the four variants"};

    ModelConfig shared = base.model;
    ModelConfig unshared = base.model;
    unshared.share_params = false;
    const std::size_t block = block_param_count(base.model.hidden, base.model.mlp_size);
    const bool params_ok = param_count(unshared) == param_count(shared) + (base.model.max_recursion - 1) * block &&
                           rows[0].params == param_count(shared) && rows[2].params == param_count(unshared);
    const double ratio = rows[0].images_per_second / rows[3].images_per_second;
    return {params_ok && ratio >= tol::throughput_margin,
            fmt("params shared %zu, unshared %zu (= shared + %zu x %zu: %s); throughput full %.0f vs plain-vit %.0f "
                "img/s, ratio %.2f (>= %.2f)",
                param_count(shared), param_count(unshared), base.model.max_recursion - 1, block,
                params_ok ? "exact" : "MISMATCH", rows[0].images_per_second, rows[3].images_per_second, ratio,
                tol::throughput_margin)};
}

Outcome a9() {
    RunConfig rc;
    rc.model = model_preset("tiny-desk");
    auto data = synth_mixed_difficulty(16, 0, rc.model, 0.5);
    TrainState state = init_train_state(rc);
    TrainOptions opts;
    opts.epochs = 2;
    train(rc, data, state, opts);
    auto ck = snapshot(rc, state);
    auto path = std::filesystem::temp_directory_path() / "morvit_acceptance.morv";
    save_checkpoint(ck, path);
    const bool ckpt_ok = bit_identical(load_checkpoint(path), ck) && encode_checkpoint(load_checkpoint(path)) == encode_checkpoint(ck);
    std::filesystem::remove(path);

    std::vector<std::uint8_t> bytes(2 * kCifarRecordBytes);
    for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = static_cast<std::uint8_t>((i * 31 + 7) % 256);
    bytes[0] = 6;
    bytes[kCifarRecordBytes] = 1;
    auto cifar = std::filesystem::temp_directory_path() / "morvit_acceptance.bin";
    {
        std::ofstream out(cifar, std::ios::binary);
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    }
    const auto records = load_cifar10_binary(cifar);
    const bool cifar_ok = records.size() == 2 && encode_cifar10_binary(records) == bytes;
    std::filesystem::remove(cifar);

    RoutingTrace t;
    t.num_tokens = 4;
    t.max_recursion = 3;
    t.exit_depth = {1, 2, 2, 3};
    std::ifstream golden(source_path("tests/golden/depthmap_2x2.csv"), std::ios::binary);
    std::stringstream ss;
    ss << golden.rdbuf();
    const bool csv_ok = depth_map_csv(make_depth_map(t, 2, 2)) == ss.str() && ss.str() == "1,2\n2,3\n";
    return {ckpt_ok && cifar_ok && csv_ok, fmt("checkpoint %s, CIFAR-10 %s, depth-map CSV %s", ckpt_ok ? "bit-exact" : "DIFFERS",
                                               cifar_ok ? "byte-exact" : "DIFFERS", csv_ok ? "matches golden" : "DIFFERS")};
}

Outcome a10() {
    const auto n = param_count(model_preset("vit-b16"));
    const double rel = std::abs(static_cast<double>(n) - tol::vit_b16_params) / tol::vit_b16_params;
    return {rel <= tol::vit_b16_rel, fmt("%zu parameters, %.2f%% from 86M (tol %.0f%%)", n, 100 * rel, 100 * tol::vit_b16_rel)};
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"MoR-ViT acceptance suite"};
    std::vector<std::string> only;
    app.add_option("--only", only, "Run only these criteria (A1..A10)");
    CLI11_PARSE(app, argc, argv);

    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
        {"A1", a1}, {"A2", a2}, {"A3", a3}, {"A4", a4}, {"A5", a5},
        {"A6", a6}, {"A7", a7}, {"A8", a8}, {"A9", a9}, {"A10", a10},
    };
    for (const auto& id : only) {
        if (std::none_of(criteria.begin(), criteria.end(), [&](const auto& c) { return c.first == id; })) {
            std::fprintf(stderr, "unknown criterion '%s'\n", id.c_str());
            return 1;
        }
    }
    int failed = 0;
    for (const auto& [id, fn] : criteria) {
        if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        std::printf("%s %s: %s\n", o.pass ? "PASS" : "FAIL", id.c_str(), o.detail.c_str());
        std::fflush(stdout);
        failed += o.pass ? 0 : 1;
    }
    return failed == 0 ? 0 : 1;
}
