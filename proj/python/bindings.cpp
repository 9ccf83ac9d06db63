#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "morvit/checkpoint.hpp"
#include "morvit/data.hpp"
#include "morvit/profiler.hpp"
#include "morvit/train.hpp"

PYBIND11_MAKE_OPAQUE(morvit::Dataset)

namespace py = pybind11;
using namespace morvit;

namespace {

using ImageArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor image_tensor(const ImageArray& a, std::size_t index) {
    const std::size_t h = a.shape(1), w = a.shape(2), c = a.shape(3);
    const double* base = a.data() + index * h * w * c;
    return Tensor::from({h, w, c}, std::vector<double>(base, base + h * w * c));
}

void require_batch(const ImageArray& a) {
    if (a.ndim() != 4) {
        throw ShapeError("expected images shaped (B, H, W, C), got " + std::to_string(a.ndim()) + " dimensions");
    }
}

py::array_t<double> to_numpy(const Tensor& t) {
    const auto v = t.to_vector();
    std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
    py::array_t<double> out(shape);
    std::copy(v.begin(), v.end(), out.mutable_data());
    return out;
}

py::dict trace_dict(const RoutingTrace& t, const ModelConfig& config) {
    py::list steps;
    for (const auto& s : t.steps) {
        py::dict d;
        d["step"] = s.step;
        d["candidates"] = s.candidates;
        d["kept"] = s.kept;
        d["scores"] = s.scores;
        d["threshold"] = s.threshold;
        steps.append(d);
    }
    const FlopsReport f = count_flops(config, t);
    py::dict flops;
    flops["total"] = f.total;
    flops["attention"] = f.attention;
    flops["mlp"] = f.mlp;
    flops["router"] = f.router;
    flops["embed"] = f.embed;
    flops["head"] = f.head;
    flops["auxiliary"] = f.auxiliary;
    flops["step_tokens"] = f.step_tokens;
    flops["step_flops"] = f.step_flops;
    py::dict out;
    out["exit_depth"] = t.exit_depth;
    out["histogram"] = t.depth_histogram();
    out["mean_exit_depth"] = t.mean_exit_depth();
    out["steps"] = steps;
    out["flops"] = flops;
    return out;
}

py::dict eval_dict(const EvalResult& e) {
    py::dict d;
    d["accuracy"] = e.accuracy;
    d["correct"] = e.correct;
    d["total"] = e.total;
    d["per_class_accuracy"] = e.per_class_accuracy;
    d["per_class_total"] = e.per_class_total;
    d["predictions"] = e.predictions;
    d["mean_exit_depth"] = e.mean_exit_depth;
    d["hard_mean_depth"] = e.hard_mean_depth;
    d["easy_mean_depth"] = e.easy_mean_depth;
    d["depth_histogram"] = e.depth_histogram;
    d["flops_per_image"] = e.flops_per_image;
    return d;
}

py::dict metrics_dict(const EpochMetrics& m) {
    py::dict d;
    d["epoch"] = m.epoch;
    d["train_loss"] = m.train_loss;
    d["train_acc"] = m.train_acc;
    d["mean_exit_depth"] = m.mean_exit_depth;
    d["flops_per_image"] = m.flops_per_image;
    return d;
}

// Trainable model plus optimizer and RNG state.
struct Session {
    RunConfig config;
    TrainState state;

    explicit Session(const RunConfig& c) : config(c), state(init_train_state(c)) {}
    Session(RunConfig c, TrainState s) : config(std::move(c)), state(std::move(s)) {}

    static Session load(const std::filesystem::path& path) {
        Checkpoint ck = load_checkpoint(path);
        RunConfig c = ck.config;
        return Session(std::move(c), resume_train_state(ck));
    }
};

} // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "MoR-ViT: vision transformer with per-token recursion depth";

    py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
    py::register_exception<DataError>(m, "DataError", PyExc_IOError);
    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

    py::class_<ModelConfig>(m, "ModelConfig")
        .def(py::init<>())
        .def_readwrite("image_h", &ModelConfig::image_h)
        .def_readwrite("image_w", &ModelConfig::image_w)
        .def_readwrite("channels", &ModelConfig::channels)
        .def_readwrite("patch_size", &ModelConfig::patch_size)
        .def_readwrite("hidden", &ModelConfig::hidden)
        .def_readwrite("mlp_size", &ModelConfig::mlp_size)
        .def_readwrite("heads", &ModelConfig::heads)
        .def_readwrite("num_classes", &ModelConfig::num_classes)
        .def_readwrite("max_recursion", &ModelConfig::max_recursion)
        .def_readwrite("beta", &ModelConfig::beta)
        .def_readwrite("lambda_", &ModelConfig::lambda)
        .def_readwrite("share_params", &ModelConfig::share_params)
        .def_readwrite("seed", &ModelConfig::seed)
        .def_readwrite("router_bias_init", &ModelConfig::router_bias_init)
        .def_property(
            "routing_mode", [](const ModelConfig& c) { return to_string(c.routing_mode); },
            [](ModelConfig& c, const std::string& v) { c.routing_mode = parse_routing_mode(v); })
        .def_property_readonly("num_patches", &ModelConfig::num_patches)
        .def("validate", &ModelConfig::validate)
        .def("__eq__", [](const ModelConfig& a, const ModelConfig& b) { return a == b; });

    py::class_<TrainConfig>(m, "TrainConfig")
        .def(py::init<>())
        .def_readwrite("epochs", &TrainConfig::epochs)
        .def_readwrite("batch_size", &TrainConfig::batch_size)
        .def_readwrite("lr", &TrainConfig::lr)
        .def_readwrite("augment_flip", &TrainConfig::augment_flip)
        .def_readwrite("synth_hard_fraction", &TrainConfig::synth_hard_fraction);

    py::class_<RunConfig>(m, "RunConfig")
        .def(py::init<>())
        .def_readwrite("model", &RunConfig::model)
        .def_readwrite("train", &RunConfig::train)
        .def_static("parse", &parse_run_config, py::arg("text"))
        .def_static("load", &load_run_config, py::arg("path"))
        .def("serialize", &serialize_run_config)
        .def("set", &set_config_value, py::arg("key"), py::arg("value"))
        .def("__eq__", [](const RunConfig& a, const RunConfig& b) { return a == b; });

    m.def("preset", &model_preset, py::arg("name"));
    m.def("preset_names", &preset_names);
    m.def("param_count", &param_count, py::arg("config"));
    m.def("keep_count", &keep_count, py::arg("active"), py::arg("beta"));
    m.def(
        "select_active",
        [](const std::vector<double>& scores, double beta) {
            auto s = select_active(scores, beta);
            return py::make_tuple(s.threshold, s.kept);
        },
        py::arg("scores"), py::arg("beta"), "Top-K selection: returns (threshold, kept positions)");

    py::class_<Dataset>(m, "Dataset")
        .def("__len__", [](const Dataset& d) { return d.size(); })
        .def("images",
             [](const Dataset& d) {
                 if (d.empty()) return py::array_t<double>(std::vector<py::ssize_t>{0, 0, 0, 0});
                 const auto& f = d.front();
                 py::array_t<double> out(std::vector<py::ssize_t>{static_cast<py::ssize_t>(d.size()),
                                                                  static_cast<py::ssize_t>(f.height),
                                                                  static_cast<py::ssize_t>(f.width),
                                                                  static_cast<py::ssize_t>(f.channels)});
                 double* dst = out.mutable_data();
                 for (const auto& r : d) dst = std::copy(r.pixels.begin(), r.pixels.end(), dst);
                 return out;
             })
        .def("labels",
             [](const Dataset& d) {
                 std::vector<std::size_t> l;
                 for (const auto& r : d) l.push_back(r.label);
                 return l;
             })
        .def("difficulty", [](const Dataset& d) {
            std::vector<std::vector<std::uint8_t>> out;
            for (const auto& r : d) out.push_back(r.difficulty);
            return out;
        });

    m.def("synth_dataset", &synth_mixed_difficulty, py::arg("n"), py::arg("seed"), py::arg("config"),
          py::arg("hard_fraction") = 0.5);
    m.def("load_cifar10", &load_cifar10_binary, py::arg("path"));
    m.def(
        "dataset_from_arrays",
        [](const ImageArray& images, const std::vector<std::size_t>& labels) {
            require_batch(images);
            if (static_cast<std::size_t>(images.shape(0)) != labels.size()) {
                throw ShapeError("dataset_from_arrays: " + std::to_string(images.shape(0)) + " images but " +
                                 std::to_string(labels.size()) + " labels");
            }
            Dataset d;
            for (std::size_t i = 0; i < labels.size(); ++i) {
                DatasetRecord r;
                r.height = images.shape(1);
                r.width = images.shape(2);
                r.channels = images.shape(3);
                r.pixels = image_tensor(images, i).to_vector();
                r.label = labels[i];
                d.push_back(std::move(r));
            }
            return d;
        },
        py::arg("images"), py::arg("labels"));

    py::class_<Session>(m, "Session")
        .def(py::init<const RunConfig&>(), py::arg("config"))
        .def_static("load", &Session::load, py::arg("path"))
        .def_readonly("config", &Session::config)
        .def_property_readonly("epoch", [](const Session& s) { return s.state.epoch; })
        .def_property_readonly("param_count", [](Session& s) { return s.state.params.count(); })
        .def(
            "train",
            [](Session& s, const Dataset& data, std::size_t epochs, std::optional<std::filesystem::path> checkpoint) {
                TrainOptions opts;
                opts.epochs = epochs;
                opts.checkpoint_path = std::move(checkpoint);
                TrainResult r;
                {
                    py::gil_scoped_release release;
                    r = train(s.config, data, s.state, opts);
                }
                py::list out;
                for (const auto& mtr : r.metrics) out.append(metrics_dict(mtr));
                return out;
            },
            py::arg("data"), py::arg("epochs") = 1, py::arg("checkpoint") = py::none())
        .def(
            "evaluate",
            [](Session& s, const Dataset& data) {
                EvalResult e;
                {
                    py::gil_scoped_release release;
                    e = evaluate(s.state.params, s.config.model, data, {worker_threads(), false, nullptr});
                }
                return eval_dict(e);
            },
            py::arg("data"))
        .def(
            "forward",
            [](Session& s, const ImageArray& images) {
                require_batch(images);
                NoGradGuard guard;
                std::vector<Tensor> batch;
                for (py::ssize_t i = 0; i < images.shape(0); ++i) batch.push_back(image_tensor(images, i));
                const ForwardResult fr = forward(batch, s.state.params, s.config.model);
                py::list traces;
                for (const auto& sample : fr.samples) traces.append(trace_dict(sample.trace, s.config.model));
                return py::make_tuple(to_numpy(fr.logits), traces);
            },
            py::arg("images"), "Returns (logits, per-sample routing traces)")
        .def(
            "depth_map",
            [](Session& s, const ImageArray& image, const std::string& format) {
                if (image.ndim() != 3) throw ShapeError("depth_map: expected one (H, W, C) image");
                const ModelConfig& c = s.config.model;
                std::vector<double> pixels(image.data(), image.data() + image.size());
                const Tensor img = Tensor::from({static_cast<std::size_t>(image.shape(0)),
                                                 static_cast<std::size_t>(image.shape(1)),
                                                 static_cast<std::size_t>(image.shape(2))},
                                                std::move(pixels));
                NoGradGuard guard;
                Tensor logits;
                auto sample = forward_sample(img, s.state.params, c, logits);
                const DepthMap map = make_depth_map(sample.trace, c.grid_rows(), c.grid_cols());
                return parse_depth_map_format(format) == DepthMapFormat::csv ? depth_map_csv(map)
                                                                             : depth_map_json(map, c);
            },
            py::arg("image"), py::arg("format") = "csv")
        .def("save", [](Session& s, const std::filesystem::path& path) {
            save_checkpoint(snapshot(s.config, s.state), path);
        });

    m.def(
        "detect_degenerate",
        [](const std::vector<std::vector<std::size_t>>& exit_depths, std::size_t max_recursion, double threshold) {
            std::vector<RoutingTrace> traces;
            for (const auto& d : exit_depths) {
                RoutingTrace t;
                t.num_tokens = d.size();
                t.max_recursion = max_recursion;
                t.exit_depth = d;
                traces.push_back(std::move(t));
            }
            auto r = detect_degenerate(traces, threshold);
            return py::make_tuple(r.degenerate, r.shallow_fraction);
        },
        py::arg("exit_depths"), py::arg("max_recursion"), py::arg("threshold") = 0.95);
}
