#include "morvit/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

namespace morvit {

namespace {

constexpr char kMagic[4] = {'M', 'O', 'R', 'V'};

class Writer {
public:
    void u8(std::uint8_t x) { out_.push_back(x); }
    void u32(std::uint32_t x) { le(x, 4); }
    void u64(std::uint64_t x) { le(x, 8); }
    void f64(double x) { u64(std::bit_cast<std::uint64_t>(x)); }
    void text(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        out_.insert(out_.end(), s.begin(), s.end());
    }
    void raw(const char* p, std::size_t n) { out_.insert(out_.end(), p, p + n); }

    void tensor(const Tensor& t) {
        u8(t.dtype() == DType::f64 ? 0 : 1);
        u32(static_cast<std::uint32_t>(t.rank()));
        for (auto d : t.shape()) {
            u64(d);
        }
        if (t.dtype() == DType::f64) {
            for (double x : t.data<double>()) {
                f64(x);
            }
        } else {
            for (float x : t.data<float>()) {
                u32(std::bit_cast<std::uint32_t>(x));
            }
        }
    }

    std::vector<std::uint8_t> take() { return std::move(out_); }

private:
    void le(std::uint64_t x, int bytes) {
        for (int i = 0; i < bytes; ++i) {
            out_.push_back(static_cast<std::uint8_t>(x >> (8 * i)));
        }
    }
    std::vector<std::uint8_t> out_;
};

class Reader {
public:
    Reader(std::span<const std::uint8_t> bytes, const std::string& source)
        : bytes_(bytes), source_(source) {}

    std::uint8_t u8() { return static_cast<std::uint8_t>(le(1)); }
    std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
    std::uint64_t u64() { return le(8); }
    double f64() { return std::bit_cast<double>(u64()); }
    std::string text() {
        const std::uint32_t n = u32();
        need(n, "string");
        std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    void expect(const char* p, std::size_t n) {
        need(n, "magic");
        if (std::memcmp(bytes_.data() + pos_, p, n) != 0) {
            fail("bad magic, not a MORV checkpoint");
        }
        pos_ += n;
    }

    Tensor tensor() {
        const std::uint8_t tag = u8();
        if (tag > 1) {
            fail("unknown dtype tag " + std::to_string(tag));
        }
        const std::uint32_t rank = u32();
        Shape shape;
        for (std::uint32_t i = 0; i < rank; ++i) {
            shape.push_back(static_cast<std::size_t>(u64()));
        }
        const std::size_t n = shape_numel(shape);
        const std::size_t width = tag == 0 ? 8 : 4;
        need(n * width, "tensor payload");
        std::vector<double> values(n);
        for (std::size_t i = 0; i < n; ++i) {
            values[i] = tag == 0 ? f64() : static_cast<double>(std::bit_cast<float>(u32()));
        }
        return Tensor::from(std::move(shape), std::move(values), tag == 0 ? DType::f64 : DType::f32);
    }

    bool done() const { return pos_ == bytes_.size(); }
    [[noreturn]] void fail(const std::string& what) const {
        throw DataError(source_ + ": corrupt checkpoint at byte " + std::to_string(pos_) + ": " + what);
    }

private:
    void need(std::size_t n, const char* what) const {
        if (bytes_.size() - pos_ < n) {
            fail(std::string("truncated ") + what);
        }
    }
    std::uint64_t le(int bytes) {
        need(static_cast<std::size_t>(bytes), "integer");
        std::uint64_t x = 0;
        for (int i = 0; i < bytes; ++i) {
            x |= static_cast<std::uint64_t>(bytes_[pos_ + static_cast<std::size_t>(i)]) << (8 * i);
        }
        pos_ += static_cast<std::size_t>(bytes);
        return x;
    }

    std::span<const std::uint8_t> bytes_;
    std::string source_;
    std::size_t pos_ = 0;
};

bool same_bits(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape() || a.dtype() != b.dtype()) {
        return false;
    }
    if (a.dtype() == DType::f64) {
        auto x = a.data<double>();
        auto y = b.data<double>();
        return std::memcmp(x.data(), y.data(), x.size_bytes()) == 0;
    }
    auto x = a.data<float>();
    auto y = b.data<float>();
    return std::memcmp(x.data(), y.data(), x.size_bytes()) == 0;
}

} // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
    Writer w;
    w.raw(kMagic, 4);
    w.u32(ckpt.version);
    w.text(serialize_run_config(ckpt.config));
    w.u32(static_cast<std::uint32_t>(ckpt.tensors.size()));
    for (const auto& [name, t] : ckpt.tensors) {
        w.text(name);
        w.tensor(t);
    }
    w.u8(ckpt.optimizer ? 1 : 0);
    if (ckpt.optimizer) {
        const auto& o = *ckpt.optimizer;
        if (o.m.size() != o.v.size()) {
            throw ShapeError("encode_checkpoint: optimizer moment lists differ in length");
        }
        w.u64(o.step);
        w.f64(o.lr);
        w.f64(o.beta1);
        w.f64(o.beta2);
        w.f64(o.eps);
        w.u32(static_cast<std::uint32_t>(o.m.size()));
        for (std::size_t i = 0; i < o.m.size(); ++i) {
            w.tensor(o.m[i]);
            w.tensor(o.v[i]);
        }
    }
    w.u64(ckpt.epoch);
    w.u64(ckpt.rng.seed());
    w.u64(ckpt.rng.counter());
    return w.take();
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes, const std::string& source) {
    Reader r(bytes, source);
    r.expect(kMagic, 4);
    Checkpoint ckpt;
    ckpt.version = r.u32();
    if (ckpt.version != kCheckpointVersion) {
        r.fail("unsupported version " + std::to_string(ckpt.version));
    }
    try {
        ckpt.config = parse_run_config(r.text());
    } catch (const ConfigError& e) {
        r.fail(std::string("config text: ") + e.what());
    }
    const std::uint32_t count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name = r.text();
        ckpt.tensors.emplace_back(std::move(name), r.tensor());
    }
    if (r.u8() != 0) {
        OptimizerState o;
        o.step = r.u64();
        o.lr = r.f64();
        o.beta1 = r.f64();
        o.beta2 = r.f64();
        o.eps = r.f64();
        const std::uint32_t n = r.u32();
        for (std::uint32_t i = 0; i < n; ++i) {
            o.m.push_back(r.tensor());
            o.v.push_back(r.tensor());
        }
        ckpt.optimizer = std::move(o);
    }
    ckpt.epoch = r.u64();
    const std::uint64_t seed = r.u64();
    const std::uint64_t counter = r.u64();
    ckpt.rng = Rng(seed, counter);
    if (!r.done()) {
        r.fail("trailing bytes");
    }
    return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    const auto bytes = encode_checkpoint(ckpt);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw DataError("cannot write checkpoint '" + path.string() + "'");
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw DataError("failed writing checkpoint '" + path.string() + "'");
    }
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open checkpoint '" + path.string() + "'");
    }
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    return decode_checkpoint(bytes, path.string());
}

bool bit_identical(const Checkpoint& a, const Checkpoint& b) {
    if (a.version != b.version || !(a.config == b.config) || a.epoch != b.epoch || !(a.rng == b.rng) ||
        a.tensors.size() != b.tensors.size() || a.optimizer.has_value() != b.optimizer.has_value()) {
        return false;
    }
    for (std::size_t i = 0; i < a.tensors.size(); ++i) {
        if (a.tensors[i].first != b.tensors[i].first ||
            !same_bits(a.tensors[i].second, b.tensors[i].second)) {
            return false;
        }
    }
    if (a.optimizer) {
        const auto& x = *a.optimizer;
        const auto& y = *b.optimizer;
        if (x.step != y.step || std::bit_cast<std::uint64_t>(x.lr) != std::bit_cast<std::uint64_t>(y.lr) ||
            std::bit_cast<std::uint64_t>(x.beta1) != std::bit_cast<std::uint64_t>(y.beta1) ||
            std::bit_cast<std::uint64_t>(x.beta2) != std::bit_cast<std::uint64_t>(y.beta2) ||
            std::bit_cast<std::uint64_t>(x.eps) != std::bit_cast<std::uint64_t>(y.eps) ||
            x.m.size() != y.m.size() || x.v.size() != y.v.size()) {
            return false;
        }
        for (std::size_t i = 0; i < x.m.size(); ++i) {
            if (!same_bits(x.m[i], y.m[i]) || !same_bits(x.v[i], y.v[i])) {
                return false;
            }
        }
    }
    return true;
}

Checkpoint make_checkpoint(const RunConfig& config, ModelParams& params,
                           const OptimizerState* optimizer, std::uint64_t epoch, const Rng& rng) {
    Checkpoint ckpt;
    ckpt.config = config;
    for (auto& [name, t] : params.named()) {
        ckpt.tensors.emplace_back(name, t->clone());
    }
    if (optimizer) {
        OptimizerState o = *optimizer;
        for (auto& t : o.m) {
            t = t.clone();
        }
        for (auto& t : o.v) {
            t = t.clone();
        }
        ckpt.optimizer = std::move(o);
    }
    ckpt.epoch = epoch;
    ckpt.rng = rng;
    return ckpt;
}

ModelParams restore_params(const Checkpoint& ckpt) {
    ModelParams params = ModelParams::init(ckpt.config.model);
    std::map<std::string, const Tensor*> by_name;
    for (const auto& [name, t] : ckpt.tensors) {
        by_name[name] = &t;
    }
    auto named = params.named();
    if (named.size() != ckpt.tensors.size()) {
        throw DataError("checkpoint holds " + std::to_string(ckpt.tensors.size()) +
                        " tensors but the model needs " + std::to_string(named.size()));
    }
    for (auto& [name, t] : named) {
        auto it = by_name.find(name);
        if (it == by_name.end()) {
            throw DataError("checkpoint is missing tensor '" + name + "'");
        }
        if (it->second->shape() != t->shape()) {
            throw DataError("checkpoint tensor '" + name + "' has shape " +
                            to_string(it->second->shape()) + ", model expects " + to_string(t->shape()));
        }
        *t = it->second->to(DType::f64);
        t->set_requires_grad(true);
    }
    return params;
}

} // namespace morvit
