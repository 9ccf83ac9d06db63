#include "morvit/config.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace morvit {

namespace {

std::string_view trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string_view::npos) {
        return {};
    }
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

std::uint64_t parse_uint(std::string_view key, std::string_view text) {
    std::uint64_t v = 0;
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc{} || ptr != text.data() + text.size()) {
        throw ConfigError("config key '" + std::string(key) + "': expected a non-negative integer, got '" +
                          std::string(text) + "'");
    }
    return v;
}

double parse_double(std::string_view key, std::string_view text) {
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc{} || ptr != text.data() + text.size()) {
        throw ConfigError("config key '" + std::string(key) + "': expected a number, got '" +
                          std::string(text) + "'");
    }
    return v;
}

bool parse_bool(std::string_view key, std::string_view text) {
    if (text == "true" || text == "1") return true;
    if (text == "false" || text == "0") return false;
    throw ConfigError("config key '" + std::string(key) + "': expected true/false, got '" +
                      std::string(text) + "'");
}

std::string format_double(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
}

using Setter = std::function<void(RunConfig&, std::string_view key, std::string_view value)>;
using Getter = std::function<std::string(const RunConfig&)>;

struct Field {
    std::string key;
    Setter set;
    Getter get;
};

const std::vector<Field>& fields() {
    static const std::vector<Field> table = [] {
        std::vector<Field> f;
        auto model_size = [&](std::string key, std::size_t ModelConfig::*m) {
            f.push_back({key,
                         [m](RunConfig& c, std::string_view k, std::string_view v) {
                             c.model.*m = parse_uint(k, v);
                         },
                         [m](const RunConfig& c) { return std::to_string(c.model.*m); }});
        };
        auto model_double = [&](std::string key, double ModelConfig::*m) {
            f.push_back({key,
                         [m](RunConfig& c, std::string_view k, std::string_view v) {
                             c.model.*m = parse_double(k, v);
                         },
                         [m](const RunConfig& c) { return format_double(c.model.*m); }});
        };
        auto train_size = [&](std::string key, std::size_t TrainConfig::*m) {
            f.push_back({key,
                         [m](RunConfig& c, std::string_view k, std::string_view v) {
                             c.train.*m = parse_uint(k, v);
                         },
                         [m](const RunConfig& c) { return std::to_string(c.train.*m); }});
        };
        auto train_double = [&](std::string key, double TrainConfig::*m) {
            f.push_back({key,
                         [m](RunConfig& c, std::string_view k, std::string_view v) {
                             c.train.*m = parse_double(k, v);
                         },
                         [m](const RunConfig& c) { return format_double(c.train.*m); }});
        };

        model_size("image_h", &ModelConfig::image_h);
        model_size("image_w", &ModelConfig::image_w);
        model_size("channels", &ModelConfig::channels);
        model_size("patch_size", &ModelConfig::patch_size);
        model_size("hidden", &ModelConfig::hidden);
        model_size("mlp_size", &ModelConfig::mlp_size);
        model_size("heads", &ModelConfig::heads);
        model_size("num_classes", &ModelConfig::num_classes);
        model_size("max_recursion", &ModelConfig::max_recursion);
        model_double("beta", &ModelConfig::beta);
        model_double("lambda", &ModelConfig::lambda);
        f.push_back({"routing_mode",
                     [](RunConfig& c, std::string_view, std::string_view v) {
                         c.model.routing_mode = parse_routing_mode(v);
                     },
                     [](const RunConfig& c) { return to_string(c.model.routing_mode); }});
        f.push_back({"share_params",
                     [](RunConfig& c, std::string_view k, std::string_view v) {
                         c.model.share_params = parse_bool(k, v);
                     },
                     [](const RunConfig& c) {
                         return std::string(c.model.share_params ? "true" : "false");
                     }});
        f.push_back({"seed",
                     [](RunConfig& c, std::string_view k, std::string_view v) {
                         c.model.seed = parse_uint(k, v);
                     },
                     [](const RunConfig& c) { return std::to_string(c.model.seed); }});
        model_double("layernorm_eps", &ModelConfig::layernorm_eps);
        model_double("router_bias_init", &ModelConfig::router_bias_init);
        f.push_back({"precision",
                     [](RunConfig& c, std::string_view k, std::string_view v) {
                         if (v == "f64") {
                             c.model.precision = DType::f64;
                         } else if (v == "f32") {
                             c.model.precision = DType::f32;
                         } else {
                             throw ConfigError("config key '" + std::string(k) +
                                               "': expected f64 or f32, got '" + std::string(v) + "'");
                         }
                     },
                     [](const RunConfig& c) { return to_string(c.model.precision); }});

        train_size("epochs", &TrainConfig::epochs);
        train_size("batch_size", &TrainConfig::batch_size);
        train_double("lr", &TrainConfig::lr);
        train_double("adam_beta1", &TrainConfig::adam_beta1);
        train_double("adam_beta2", &TrainConfig::adam_beta2);
        train_double("adam_eps", &TrainConfig::adam_eps);
        f.push_back({"lr_schedule",
                     [](RunConfig& c, std::string_view k, std::string_view v) {
                         if (v == "constant") {
                             c.train.lr_schedule = LrSchedule::constant;
                         } else if (v == "cosine") {
                             c.train.lr_schedule = LrSchedule::cosine;
                         } else {
                             throw ConfigError("config key '" + std::string(k) +
                                               "': expected constant or cosine, got '" +
                                               std::string(v) + "'");
                         }
                     },
                     [](const RunConfig& c) {
                         return std::string(c.train.lr_schedule == LrSchedule::cosine ? "cosine"
                                                                                      : "constant");
                     }});
        f.push_back({"augment_flip",
                     [](RunConfig& c, std::string_view k, std::string_view v) {
                         c.train.augment_flip = parse_bool(k, v);
                     },
                     [](const RunConfig& c) {
                         return std::string(c.train.augment_flip ? "true" : "false");
                     }});
        train_double("synth_hard_fraction", &TrainConfig::synth_hard_fraction);
        return f;
    }();
    return table;
}

} // namespace

std::string to_string(RoutingMode mode) {
    switch (mode) {
    case RoutingMode::expert_choice: return "expert_choice";
    case RoutingMode::token_choice: return "token_choice";
    case RoutingMode::static_depth: return "static";
    }
    return "expert_choice";
}

RoutingMode parse_routing_mode(std::string_view text) {
    if (text == "expert_choice") return RoutingMode::expert_choice;
    if (text == "token_choice") return RoutingMode::token_choice;
    if (text == "static") return RoutingMode::static_depth;
    throw ConfigError("routing_mode: expected expert_choice, token_choice or static, got '" +
                      std::string(text) + "'");
}

void ModelConfig::validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError("invalid model config: " + msg); };
    if (patch_size == 0) fail("patch_size must be positive");
    if (image_h == 0 || image_w == 0 || channels == 0) fail("image dimensions must be positive");
    if (image_h % patch_size != 0 || image_w % patch_size != 0) {
        fail("image " + std::to_string(image_h) + "x" + std::to_string(image_w) +
             " is not divisible by patch_size " + std::to_string(patch_size));
    }
    if (hidden == 0 || heads == 0) fail("hidden and heads must be positive");
    if (hidden % heads != 0) {
        fail("hidden " + std::to_string(hidden) + " is not divisible by heads " +
             std::to_string(heads));
    }
    if (mlp_size == 0) fail("mlp_size must be positive");
    if (num_classes == 0) fail("num_classes must be positive");
    if (max_recursion == 0) fail("max_recursion must be at least 1");
    if (!(beta >= 0.0 && beta < 1.0)) fail("beta must lie in [0, 1)");
    if (!(lambda >= 0.0)) fail("lambda must be non-negative");
    if (!(layernorm_eps > 0.0)) fail("layernorm_eps must be positive");
}

void TrainConfig::validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError("invalid train config: " + msg); };
    if (batch_size == 0) fail("batch_size must be positive");
    if (!(lr > 0.0)) fail("lr must be positive");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0)) fail("adam_beta1 must lie in [0, 1)");
    if (!(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) fail("adam_beta2 must lie in [0, 1)");
    if (!(adam_eps > 0.0)) fail("adam_eps must be positive");
    if (!(synth_hard_fraction >= 0.0 && synth_hard_fraction <= 1.0)) {
        fail("synth_hard_fraction must lie in [0, 1]");
    }
}

ModelConfig model_preset(std::string_view name) {
    ModelConfig c;
    if (name == "vit-b16" || name == "mor-b16") {
        c.image_h = 224;
        c.image_w = 224;
        c.channels = 3;
        c.patch_size = 16;
        c.hidden = 768;
        c.mlp_size = 3072;
        c.heads = 12;
        c.num_classes = 1000;
        if (name == "vit-b16") {
            c.max_recursion = 12;
            c.routing_mode = RoutingMode::static_depth;
            c.share_params = false;
            c.beta = 0.0;
            c.lambda = 0.0;
        } else {
            c.max_recursion = 4;
            c.routing_mode = RoutingMode::expert_choice;
            c.share_params = true;
            c.beta = 0.5;
            c.lambda = 0.01;
        }
        return c;
    }
    if (name == "tiny-desk") {
        c.image_h = 8;
        c.image_w = 8;
        c.channels = 3;
        c.patch_size = 4;
        c.hidden = 8;
        c.mlp_size = 16;
        c.heads = 2;
        c.num_classes = 3;
        c.max_recursion = 2;
        return c;
    }
    if (name == "synth-desk") {
        return c;
    }
    throw ConfigError("unknown preset '" + std::string(name) + "'");
}

std::vector<std::string> preset_names() { return {"vit-b16", "mor-b16", "tiny-desk", "synth-desk"}; }

void set_config_value(RunConfig& config, std::string_view key, std::string_view value) {
    for (const auto& f : fields()) {
        if (f.key == key) {
            f.set(config, key, value);
            return;
        }
    }
    throw ConfigError("unknown config key '" + std::string(key) + "'");
}

std::vector<std::string> config_keys() {
    std::vector<std::string> keys;
    for (const auto& f : fields()) {
        keys.push_back(f.key);
    }
    return keys;
}

RunConfig parse_run_config(std::string_view text) {
    std::vector<std::pair<std::string, std::string>> pairs;
    std::string preset;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        auto end = text.find('\n', pos);
        if (end == std::string_view::npos) end = text.size();
        std::string_view line = text.substr(pos, end - pos);
        pos = end + 1;
        ++line_no;
        if (auto hash = line.find('#'); hash != std::string_view::npos) {
            line = line.substr(0, hash);
        }
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string_view::npos) {
            throw ConfigError("config line " + std::to_string(line_no) + ": expected key=value, got '" +
                              std::string(line) + "'");
        }
        std::string key(trim(line.substr(0, eq)));
        std::string value(trim(line.substr(eq + 1)));
        if (key == "preset") {
            preset = value;
        } else {
            pairs.emplace_back(std::move(key), std::move(value));
        }
    }
    RunConfig config;
    if (!preset.empty()) {
        config.model = model_preset(preset);
    }
    for (const auto& [k, v] : pairs) {
        set_config_value(config, k, v);
    }
    return config;
}

std::string serialize_run_config(const RunConfig& config) {
    std::ostringstream os;
    for (const auto& f : fields()) {
        os << f.key << '=' << f.get(config) << '\n';
    }
    return os.str();
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open config file '" + path.string() + "'");
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    try {
        return parse_run_config(ss.str());
    } catch (const ConfigError& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

std::size_t worker_threads() {
    const char* env = std::getenv("MORVIT_THREADS");
    if (env == nullptr || *env == '\0') {
        return 1;
    }
    std::size_t n = 0;
    std::string_view text(env);
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), n);
    if (ec != std::errc{} || ptr != text.data() + text.size() || n == 0) {
        return 1;
    }
    return n;
}

} // namespace morvit
