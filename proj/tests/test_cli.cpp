#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "morvit/checkpoint.hpp"
#include "morvit/train.hpp"

using namespace morvit;
namespace fs = std::filesystem;

namespace {

struct Run {
    int code = -1;
    std::string output;
};

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

fs::path workdir() {
    static const fs::path dir = [] {
        auto d = fs::temp_directory_path() / "morvit_cli_test";
        fs::remove_all(d);
        fs::create_directories(d);
        return d;
    }();
    return dir;
}

Run run_cli(const std::string& args) {
    const auto log = workdir() / "last_output.txt";
    const std::string cmd = "cd '" + workdir().string() + "' && '" MORVIT_CLI "' " + args + " > '" + log.string() + "' 2>&1";
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(log)};
}

const std::string tiny_cfg = std::string(MORVIT_SOURCE_DIR) + "/configs/tiny.cfg";

std::vector<std::vector<std::string>> tsv(const std::string& text) {
    std::vector<std::vector<std::string>> rows;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        std::vector<std::string> cells;
        std::istringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, '\t')) cells.push_back(cell);
        rows.push_back(cells);
    }
    return rows;
}

} // namespace

TEST_CASE("no arguments prints usage and exits 1") {
    auto r = run_cli("");
    CHECK(r.code == 1);
    CHECK(r.output.find("Usage: morvit") != std::string::npos);
}

TEST_CASE("--help matches the golden file and names every flag") {
    auto r = run_cli("--help");
    CHECK(r.code == 0);
    CHECK(r.output == slurp(fs::path(MORVIT_SOURCE_DIR) / "tests/golden/cli_help.txt"));
    for (const char* flag : {"--config", "--data", "--out", "--epochs", "--seed", "--metrics", "--set", "--resume",
                             "--ckpt", "--predictions", "--beta-sweep", "--batch", "--repeats", "--input", "--index",
                             "--format", "--test", "--variant"}) {
        CHECK(r.output.find(flag) != std::string::npos);
    }
}

TEST_CASE("train then eval agree on accuracy") {
    auto t = run_cli("train --config '" + tiny_cfg + "' --data synth:64:0 --out a.morv --epochs 3");
    REQUIRE(t.code == 0);
    auto log = tsv(slurp(workdir() / "a.morv.metrics.tsv"));
    REQUIRE(log.size() == 3);
    const double logged = std::stod(log.back()[2]);
    auto e = run_cli("eval --ckpt a.morv --data synth:64:0 --predictions preds.tsv");
    REQUIRE(e.code == 0);
    auto rows = tsv(e.output);
    REQUIRE(rows[0][0] == "accuracy");
    CHECK(std::stod(rows[0][1]) == logged);

    std::size_t correct = 0;
    auto preds = tsv(slurp(workdir() / "preds.tsv"));
    for (const auto& p : preds) correct += p[1] == p[2];
    CHECK(static_cast<double>(correct) / static_cast<double>(preds.size()) == logged);
}

TEST_CASE("flags override config file keys") {
    auto t = run_cli("train --config '" + tiny_cfg + "' --data synth:16:0 --out b.morv --epochs 1 --seed 9 --set beta=0.25");
    REQUIRE(t.code == 0);
    auto ck = load_checkpoint(workdir() / "b.morv");
    CHECK(ck.config.train.epochs == 1);
    CHECK(ck.config.model.seed == 9);
    CHECK(ck.config.model.beta == 0.25);
    CHECK(ck.config.train.lr == 1e-3);
}

TEST_CASE("training is deterministic across invocations") {
    REQUIRE(run_cli("train --config '" + tiny_cfg + "' --data synth:16:3 --out c1.morv").code == 0);
    REQUIRE(run_cli("train --config '" + tiny_cfg + "' --data synth:16:3 --out c2.morv").code == 0);
    CHECK(slurp(workdir() / "c1.morv") == slurp(workdir() / "c2.morv"));
    CHECK(slurp(workdir() / "c1.morv.metrics.tsv") == slurp(workdir() / "c2.morv.metrics.tsv"));
}

TEST_CASE("resume continues to the configured epoch count") {
    REQUIRE(run_cli("train --config '" + tiny_cfg + "' --data synth:16:4 --out r.morv --epochs 1").code == 0);
    REQUIRE(run_cli("train --data synth:16:4 --out r.morv --resume --epochs 2").code == 0);
    REQUIRE(run_cli("train --config '" + tiny_cfg + "' --data synth:16:4 --out s.morv --epochs 2").code == 0);
    auto a = load_checkpoint(workdir() / "r.morv");
    auto b = load_checkpoint(workdir() / "s.morv");
    CHECK(a.epoch == 2);
    CHECK(a.tensors.size() == b.tensors.size());
    bool same = true;
    for (std::size_t i = 0; i < a.tensors.size(); ++i) same = same && a.tensors[i].second.to_vector() == b.tensors[i].second.to_vector();
    CHECK(same);
    CHECK(slurp(workdir() / "r.morv.metrics.tsv") == slurp(workdir() / "s.morv.metrics.tsv"));
}

TEST_CASE("profile --beta-sweep reports non-increasing FLOPs") {
    REQUIRE(run_cli("train --config '" + tiny_cfg + "' --data synth:16:0 --out p.morv --epochs 1").code == 0);
    auto r = run_cli("profile --ckpt p.morv --beta-sweep --repeats 3 --batch 8");
    REQUIRE(r.code == 0);
    auto rows = tsv(r.output);
    auto header = std::find_if(rows.begin(), rows.end(), [](const auto& row) { return !row.empty() && row[0] == "beta"; });
    REQUIRE(header != rows.end());
    REQUIRE(rows.end() - header == 6);
    double prev = INFINITY;
    for (auto it = header + 1; it != rows.end(); ++it) {
        const double flops = std::stod((*it)[1]);
        CHECK(flops <= prev);
        prev = flops;
    }
}

TEST_CASE("depthmap from a PPM image") {
    REQUIRE(run_cli("train --config '" + tiny_cfg + "' --data synth:16:0 --out d.morv --epochs 1").code == 0);
    {
        std::ofstream ppm(workdir() / "img.ppm", std::ios::binary);
        ppm << "P6\n# test image\n8 8\n255\n";
        for (int i = 0; i < 8 * 8 * 3; ++i) ppm.put(static_cast<char>((i * 37) % 256));
    }
    auto r = run_cli("depthmap --ckpt d.morv --input img.ppm --out dm.csv --format csv");
    REQUIRE(r.code == 0);
    const auto csv = slurp(workdir() / "dm.csv");
    CHECK(csv == r.output);
    auto grid = tsv(csv);
    CHECK(grid.size() == 2);
    auto j = run_cli("depthmap --ckpt d.morv --input img.ppm --out dm.json --format json");
    CHECK(j.code == 0);
    CHECK(slurp(workdir() / "dm.json").find("\"histogram\"") != std::string::npos);

    {
        std::ofstream big(workdir() / "big.ppm", std::ios::binary);
        big << "P6 16 16 255\n" << std::string(16 * 16 * 3, '\0');
    }
    auto wrong = run_cli("depthmap --ckpt d.morv --input big.ppm --out x.csv");
    CHECK(wrong.code == 2);
    CHECK(wrong.output.find("8x8x3") != std::string::npos);
}

TEST_CASE("ablate writes the four-variant table") {
    auto r = run_cli("ablate --config '" + tiny_cfg + "' --data synth:16:0 --out table.tsv --epochs 1");
    REQUIRE(r.code == 0);
    auto rows = tsv(slurp(workdir() / "table.tsv"));
    REQUIRE(rows.size() == 5);
    CHECK(rows[0][0] == "variant");
    CHECK(rows[1][0] == "full");
    CHECK(rows[4][0] == "plain-vit");
    auto one = run_cli("ablate --config '" + tiny_cfg + "' --data synth:16:0 --out one.tsv --epochs 1 --variant full");
    CHECK(one.code == 0);
    CHECK(tsv(slurp(workdir() / "one.tsv")).size() == 2);
}

TEST_CASE("exit codes") {
    auto missing = run_cli("eval --ckpt nothing.morv --data synth:4:0");
    CHECK(missing.code == 2);
    CHECK(missing.output.find("nothing.morv") != std::string::npos);

    {
        std::ofstream bad(workdir() / "short.bin", std::ios::binary);
        bad << std::string(3072, '\0');
    }
    auto truncated = run_cli("train --config '" + tiny_cfg + "' --data short.bin --out x.morv");
    CHECK(truncated.code == 2);
    CHECK(truncated.output.find("short.bin") != std::string::npos);

    CHECK(run_cli("depthmap --ckpt a.morv --input img.ppm --out x --format png").code == 1);
    auto unknown = run_cli("train --config '" + tiny_cfg + "' --data synth:4:0 --out x.morv --set bogus=1");
    CHECK(unknown.code == 1);
    CHECK(unknown.output.find("bogus") != std::string::npos);
    CHECK(run_cli("train --data synth:x --out x.morv").code == 1);
    CHECK(run_cli("frobnicate").code == 1);

    auto nan = run_cli("train --config '" + tiny_cfg + "' --data synth:16:0 --out n.morv --epochs 1 --set lr=1e300");
    CHECK(nan.code == 3);

    {
        std::ofstream cfg(workdir() / "broken.cfg");
        cfg << "hidden = 8\nwidth = 3\n";
    }
    auto broken = run_cli("train --config broken.cfg --data synth:4:0 --out x.morv");
    CHECK(broken.code == 2);
    CHECK(broken.output.find("broken.cfg") != std::string::npos);
}
