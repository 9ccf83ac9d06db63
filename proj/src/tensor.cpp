#include "morvit/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>
#include <sstream>
#include <unordered_set>

namespace morvit {

using detail::Node;
using detail::Storage;

namespace {

std::atomic<std::uint64_t> g_next_id{1};
thread_local bool t_grad_enabled = true;
thread_local std::uint64_t t_macs = 0;

template <typename T>
std::vector<T>& vec(Storage& s) {
    return std::get<std::vector<T>>(s);
}

template <typename T>
const std::vector<T>& vec(const Storage& s) {
    return std::get<std::vector<T>>(s);
}

template <typename F>
decltype(auto) dispatch(DType dtype, F&& f) {
    if (dtype == DType::f32) {
        return f(float{});
    }
    return f(double{});
}

Storage make_storage(DType dtype, std::size_t n) {
    if (dtype == DType::f32) {
        return std::vector<float>(n, 0.0f);
    }
    return std::vector<double>(n, 0.0);
}

std::shared_ptr<Node> new_node(const char* op, Shape shape, DType dtype) {
    auto node = std::make_shared<Node>();
    node->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
    node->op = op;
    node->shape = std::move(shape);
    node->dtype = dtype;
    node->data = make_storage(dtype, node->numel());
    return node;
}

// Attaches history to `out` when recording is active for these inputs.
void attach(const std::shared_ptr<Node>& out, std::vector<Tensor> inputs,
            std::function<void(Node&)> backward) {
    if (!t_grad_enabled) {
        return;
    }
    bool needed = false;
    for (const auto& t : inputs) {
        needed = needed || t.requires_grad();
    }
    if (!needed) {
        return;
    }
    out->requires_grad = true;
    out->inputs.reserve(inputs.size());
    for (auto& t : inputs) {
        out->inputs.push_back(t.node());
    }
    out->backward = std::move(backward);
}

void require_defined(const Tensor& t, const char* op) {
    if (!t.defined()) {
        throw ShapeError(std::string(op) + ": undefined tensor");
    }
}

void require_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
    if (a.dtype() != b.dtype()) {
        throw ShapeError(std::string(op) + ": dtype mismatch " + to_string(a.dtype()) +
                         " vs " + to_string(b.dtype()));
    }
}

void require_rank2(const Tensor& t, const char* op) {
    if (t.rank() != 2) {
        throw ShapeError(std::string(op) + ": expected a matrix, got shape " +
                         to_string(t.shape()));
    }
}

// Row view helpers for "last axis is the row" ops.
std::size_t last_dim(const Shape& s) { return s.empty() ? 1 : s.back(); }

struct Broadcast {
    Shape out;
    std::vector<std::size_t> stride_a;
    std::vector<std::size_t> stride_b;
};

std::vector<std::size_t> aligned_strides(const Shape& in, const Shape& out) {
    const std::size_t rank = out.size();
    std::vector<std::size_t> strides(rank, 0);
    std::size_t step = 1;
    for (std::size_t k = 0; k < in.size(); ++k) {
        const std::size_t axis_in = in.size() - 1 - k;
        const std::size_t axis_out = rank - 1 - k;
        strides[axis_out] = in[axis_in] == 1 ? 0 : step;
        step *= in[axis_in];
    }
    return strides;
}

Broadcast broadcast_shapes(const Shape& a, const Shape& b, const char* op) {
    const std::size_t rank = std::max(a.size(), b.size());
    Shape out(rank, 1);
    for (std::size_t k = 0; k < rank; ++k) {
        const std::size_t da = k < a.size() ? a[a.size() - 1 - k] : 1;
        const std::size_t db = k < b.size() ? b[b.size() - 1 - k] : 1;
        if (da != db && da != 1 && db != 1) {
            throw ShapeError(std::string(op) + ": shapes " + to_string(a) + " and " +
                             to_string(b) + " are not broadcastable");
        }
        out[rank - 1 - k] = da == 1 ? db : da;
    }
    Broadcast bc;
    bc.stride_a = aligned_strides(a, out);
    bc.stride_b = aligned_strides(b, out);
    bc.out = std::move(out);
    return bc;
}

// Calls f(out_index, a_offset, b_offset) for every output element in order.
template <typename F>
void for_each_broadcast(const Broadcast& bc, F&& f) {
    const std::size_t rank = bc.out.size();
    const std::size_t n = shape_numel(bc.out);
    std::vector<std::size_t> counter(rank, 0);
    std::size_t off_a = 0;
    std::size_t off_b = 0;
    for (std::size_t i = 0; i < n; ++i) {
        f(i, off_a, off_b);
        for (std::size_t k = rank; k-- > 0;) {
            ++counter[k];
            off_a += bc.stride_a[k];
            off_b += bc.stride_b[k];
            if (counter[k] < bc.out[k]) {
                break;
            }
            off_a -= bc.stride_a[k] * counter[k];
            off_b -= bc.stride_b[k] * counter[k];
            counter[k] = 0;
        }
    }
}

enum class BinaryKind { add, sub, mul };

Tensor binary(const Tensor& a, const Tensor& b, BinaryKind kind, const char* op) {
    require_defined(a, op);
    require_defined(b, op);
    require_same_dtype(a, b, op);
    auto bc = std::make_shared<Broadcast>(broadcast_shapes(a.shape(), b.shape(), op));
    auto out = new_node(op, bc->out, a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const auto& va = vec<T>(a.node()->data);
        const auto& vb = vec<T>(b.node()->data);
        auto& vo = vec<T>(out->data);
        for_each_broadcast(*bc, [&](std::size_t i, std::size_t ia, std::size_t ib) {
            switch (kind) {
            case BinaryKind::add: vo[i] = va[ia] + vb[ib]; break;
            case BinaryKind::sub: vo[i] = va[ia] - vb[ib]; break;
            case BinaryKind::mul: vo[i] = va[ia] * vb[ib]; break;
            }
        });
    });
    attach(out, {a, b}, [bc, kind](Node& self) {
        Node& na = *self.inputs[0];
        Node& nb = *self.inputs[1];
        dispatch(self.dtype, [&](auto tag) {
            using T = decltype(tag);
            const auto& g = vec<T>(self.grad);
            T* ga = na.requires_grad ? vec<T>(na.grad_buffer()).data() : nullptr;
            T* gb = nb.requires_grad ? vec<T>(nb.grad_buffer()).data() : nullptr;
            const auto& va = vec<T>(na.data);
            const auto& vb = vec<T>(nb.data);
            for_each_broadcast(*bc, [&](std::size_t i, std::size_t ia, std::size_t ib) {
                switch (kind) {
                case BinaryKind::add:
                    if (ga) ga[ia] += g[i];
                    if (gb) gb[ib] += g[i];
                    break;
                case BinaryKind::sub:
                    if (ga) ga[ia] += g[i];
                    if (gb) gb[ib] -= g[i];
                    break;
                case BinaryKind::mul:
                    if (ga) ga[ia] += g[i] * vb[ib];
                    if (gb) gb[ib] += g[i] * va[ia];
                    break;
                }
            });
        });
    });
    return Tensor::from_node(out);
}

// Elementwise unary op: value(x) and derivative(x, y).
template <typename Value, typename Deriv>
Tensor unary(const Tensor& x, const char* op, Value value, Deriv deriv) {
    require_defined(x, op);
    auto out = new_node(op, x.shape(), x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const auto& vx = vec<T>(x.node()->data);
        auto& vo = vec<T>(out->data);
        for (std::size_t i = 0; i < vx.size(); ++i) {
            vo[i] = static_cast<T>(value(static_cast<double>(vx[i])));
        }
    });
    attach(out, {x}, [deriv](Node& self) {
        Node& nx = *self.inputs[0];
        dispatch(self.dtype, [&](auto tag) {
            using T = decltype(tag);
            const auto& g = vec<T>(self.grad);
            const auto& vx = vec<T>(nx.data);
            const auto& vy = vec<T>(self.data);
            auto& gx = vec<T>(nx.grad_buffer());
            for (std::size_t i = 0; i < g.size(); ++i) {
                gx[i] += g[i] * static_cast<T>(deriv(static_cast<double>(vx[i]),
                                                     static_cast<double>(vy[i])));
            }
        });
    });
    return Tensor::from_node(out);
}

double sigmoid_value(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

} // namespace

// ---- shape helpers -------------------------------------------------------

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) {
        n *= d;
    }
    return n;
}

std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? ", " : "") << shape[i];
    }
    if (shape.size() == 1) {
        os << ',';
    }
    os << ')';
    return os.str();
}

std::string to_string(DType dtype) { return dtype == DType::f32 ? "f32" : "f64"; }

Storage& Node::grad_buffer() {
    if (!has_grad) {
        grad = make_storage(dtype, numel());
        has_grad = true;
    }
    return grad;
}

// ---- Tensor --------------------------------------------------------------

Tensor Tensor::from_node(std::shared_ptr<Node> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
}

Tensor Tensor::zeros(Shape shape, DType dtype) {
    return from_node(new_node("leaf", std::move(shape), dtype));
}

Tensor Tensor::full(Shape shape, double value, DType dtype) {
    auto node = new_node("leaf", std::move(shape), dtype);
    dispatch(dtype, [&](auto tag) {
        using T = decltype(tag);
        auto& v = vec<T>(node->data);
        std::fill(v.begin(), v.end(), static_cast<T>(value));
    });
    return from_node(node);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, DType dtype) {
    if (shape_numel(shape) != values.size()) {
        throw ShapeError("Tensor::from: shape " + to_string(shape) + " needs " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(values.size()));
    }
    auto node = new_node("leaf", std::move(shape), dtype);
    if (dtype == DType::f64) {
        node->data = std::move(values);
    } else {
        auto& v = vec<float>(node->data);
        std::transform(values.begin(), values.end(), v.begin(),
                       [](double x) { return static_cast<float>(x); });
    }
    return from_node(node);
}

Tensor Tensor::scalar(double value, DType dtype) { return full(Shape{}, value, dtype); }

const Shape& Tensor::shape() const {
    if (!node_) {
        throw ShapeError("shape of undefined tensor");
    }
    return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= rank()) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " +
                         to_string(shape()));
    }
    return shape()[axis];
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

DType Tensor::dtype() const { return node_->dtype; }

double Tensor::item() const {
    if (numel() != 1) {
        throw ShapeError("item() on tensor of shape " + to_string(shape()));
    }
    return at(0);
}

double Tensor::at(std::size_t flat_index) const {
    return dispatch(dtype(), [&](auto tag) -> double {
        using T = decltype(tag);
        return static_cast<double>(vec<T>(node_->data).at(flat_index));
    });
}

std::vector<double> Tensor::to_vector() const {
    return dispatch(dtype(), [&](auto tag) {
        using T = decltype(tag);
        const auto& v = vec<T>(node_->data);
        return std::vector<double>(v.begin(), v.end());
    });
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool value) {
    if (!node_->inputs.empty()) {
        throw Error("set_requires_grad is only valid on leaf tensors");
    }
    node_->requires_grad = value;
    return *this;
}

bool Tensor::has_grad() const { return node_ && node_->has_grad; }

Tensor Tensor::grad() const {
    auto out = new_node("leaf", node_->shape, node_->dtype);
    if (node_->has_grad) {
        out->data = node_->grad;
    }
    return from_node(out);
}

std::vector<double> Tensor::grad_vector() const { return grad().to_vector(); }

void Tensor::zero_grad() {
    if (node_->has_grad) {
        std::visit([](auto& v) { std::fill(v.begin(), v.end(), 0); }, node_->grad);
    }
}

Tensor Tensor::detach() const {
    auto out = new_node("leaf", node_->shape, node_->dtype);
    out->data = node_->data;
    return from_node(out);
}

Tensor Tensor::clone() const { return detach(); }

Tensor Tensor::to(DType target) const {
    if (target == dtype()) {
        return detach();
    }
    return from(shape(), to_vector(), target);
}

void Tensor::backward() const {
    require_defined(*this, "backward");
    if (numel() != 1) {
        throw ShapeError("backward requires a scalar loss, got shape " + to_string(shape()));
    }
    if (!requires_grad()) {
        throw Error("backward on a tensor without gradient history");
    }
    Tape::record(*this).backward();
}

const char* Tensor::op_name() const { return node_->op; }

std::uint64_t Tensor::id() const { return node_->id; }

// ---- Tape ----------------------------------------------------------------

Tape Tape::record(const Tensor& root) {
    Tape tape;
    tape.root_ = root.node();
    if (!root.requires_grad()) {
        return tape;
    }
    std::unordered_set<const Node*> seen;
    std::vector<Node*> stack{root.node().get()};
    seen.insert(root.node().get());
    while (!stack.empty()) {
        Node* n = stack.back();
        stack.pop_back();
        tape.nodes_.push_back(n);
        for (const auto& in : n->inputs) {
            if (in->requires_grad && seen.insert(in.get()).second) {
                stack.push_back(in.get());
            }
        }
    }
    // Inputs are always created before their consumers.
    std::sort(tape.nodes_.begin(), tape.nodes_.end(),
              [](const Node* x, const Node* y) { return x->id < y->id; });
    return tape;
}

void Tape::backward() {
    if (nodes_.empty()) {
        throw Error("backward on an empty tape");
    }
    std::visit([](auto& v) { v[0] += 1; }, root_->grad_buffer());
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        Node* n = *it;
        if (n->backward && n->has_grad) {
            n->backward(*n);
        }
    }
}

// ---- grad mode / counters -------------------------------------------------

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

bool grad_enabled() { return t_grad_enabled; }

MacCounter::MacCounter() : start_(t_macs) {}
std::uint64_t MacCounter::count() const { return t_macs - start_; }

// ---- linear algebra --------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_defined(a, "matmul");
    require_defined(b, "matmul");
    require_rank2(a, "matmul");
    require_rank2(b, "matmul");
    require_same_dtype(a, b, "matmul");
    const std::size_t m = a.dim(0);
    const std::size_t k = a.dim(1);
    const std::size_t n = b.dim(1);
    if (b.dim(0) != k) {
        throw ShapeError("matmul: inner dimensions differ, " + to_string(a.shape()) + " x " +
                         to_string(b.shape()));
    }
    auto out = new_node("matmul", Shape{m, n}, a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* pa = vec<T>(a.node()->data).data();
        const T* pb = vec<T>(b.node()->data).data();
        T* pc = vec<T>(out->data).data();
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
                const T av = pa[i * k + p];
                const T* brow = pb + p * n;
                T* crow = pc + i * n;
                for (std::size_t j = 0; j < n; ++j) {
                    crow[j] += av * brow[j];
                }
            }
        }
    });
    t_macs += static_cast<std::uint64_t>(m) * k * n;
    attach(out, {a, b}, [m, k, n](Node& self) {
        Node& na = *self.inputs[0];
        Node& nb = *self.inputs[1];
        dispatch(self.dtype, [&](auto tag) {
            using T = decltype(tag);
            const T* g = vec<T>(self.grad).data();
            const T* pa = vec<T>(na.data).data();
            const T* pb = vec<T>(nb.data).data();
            if (na.requires_grad) {
                // dA = dC * B^T
                T* ga = vec<T>(na.grad_buffer()).data();
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t p = 0; p < k; ++p) {
                        T acc = 0;
                        for (std::size_t j = 0; j < n; ++j) {
                            acc += g[i * n + j] * pb[p * n + j];
                        }
                        ga[i * k + p] += acc;
                    }
                }
            }
            if (nb.requires_grad) {
                // dB = A^T * dC
                T* gb = vec<T>(nb.grad_buffer()).data();
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t p = 0; p < k; ++p) {
                        const T av = pa[i * k + p];
                        for (std::size_t j = 0; j < n; ++j) {
                            gb[p * n + j] += av * g[i * n + j];
                        }
                    }
                }
            }
        });
    });
    return Tensor::from_node(out);
}

Tensor transpose(const Tensor& a) {
    require_defined(a, "transpose");
    require_rank2(a, "transpose");
    const std::size_t r = a.dim(0);
    const std::size_t c = a.dim(1);
    auto out = new_node("transpose", Shape{c, r}, a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const auto& va = vec<T>(a.node()->data);
        auto& vo = vec<T>(out->data);
        for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t j = 0; j < c; ++j) {
                vo[j * r + i] = va[i * c + j];
            }
        }
    });
    attach(out, {a}, [r, c](Node& self) {
        Node& na = *self.inputs[0];
        dispatch(self.dtype, [&](auto tag) {
            using T = decltype(tag);
            const auto& g = vec<T>(self.grad);
            auto& ga = vec<T>(na.grad_buffer());
            for (std::size_t i = 0; i < r; ++i) {
                for (std::size_t j = 0; j < c; ++j) {
                    ga[i * c + j] += g[j * r + i];
                }
            }
        });
    });
    return Tensor::from_node(out);
}

// ---- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::add, "add"); }
Tensor add_broadcast(const Tensor& a, const Tensor& b) { return add(a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::mul, "mul"); }

Tensor scale(const Tensor& a, double factor) {
    return unary(
        a, "scale", [factor](double x) { return x * factor; },
        [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double value) {
    return unary(
        a, "add_scalar", [value](double x) { return x + value; },
        [](double, double) { return 1.0; });
}

Tensor square(const Tensor& a) {
    return unary(
        a, "square", [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor gelu(const Tensor& x) {
    return unary(
        x, "gelu",
        [](double v) { return 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0)); },
        [](double v, double) {
            const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
            const double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * std::numbers::pi);
            return cdf + v * pdf;
        });
}

Tensor sigmoid(const Tensor& x) {
    return unary(x, "sigmoid", sigmoid_value, [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& x) {
    return unary(
        x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
        [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

// ---- row-wise normalizers -----------------------------------------------------

Tensor softmax_rows(const Tensor& x) {
    require_defined(x, "softmax_rows");
    const std::size_t n = last_dim(x.shape());
    if (n == 0) {
        throw ShapeError("softmax_rows: rows must be non-empty");
    }
    const std::size_t rows = x.numel() / n;
    auto out = new_node("softmax_rows", x.shape(), x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const auto& vx = vec<T>(x.node()->data);
        auto& vo = vec<T>(out->data);
        for (std::size_t r = 0; r < rows; ++r) {
            const T* in = vx.data() + r * n;
            T* o = vo.data() + r * n;
            const T mx = *std::max_element(in, in + n);
            T total = 0;
            for (std::size_t j = 0; j < n; ++j) {
                o[j] = std::exp(in[j] - mx);
                total += o[j];
            }
            for (std::size_t j = 0; j < n; ++j) {
                o[j] /= total;
            }
        }
    });
    attach(out, {x}, [rows, n](Node& self) {
        Node& nx = *self.inputs[0];
        dispatch(self.dtype, [&](auto tag) {
            using T = decltype(tag);
            const auto& g = vec<T>(self.grad);
            const auto& y = vec<T>(self.data);
            auto& gx = vec<T>(nx.grad_buffer());
            for (std::size_t r = 0; r < rows; ++r) {
                const std::size_t base = r * n;
                T dot = 0;
                for (std::size_t j = 0; j < n; ++j) {
                    dot += g[base + j] * y[base + j];
                }
                for (std::size_t j = 0; j < n; ++j) {
                    gx[base + j] += y[base + j] * (g[base + j] - dot);
                }
            }
        });
    });
    return Tensor::from_node(out);
}

Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    require_defined(x, "layernorm");
    require_same_dtype(x, gain, "layernorm");
    require_same_dtype(x, bias, "layernorm");
    if (!(eps > 0.0)) {
        throw ShapeError("layernorm: eps must be positive");
    }
    const std::size_t d = last_dim(x.shape());
    if (d == 0 || gain.numel() != d || bias.numel() != d) {
        throw ShapeError("layernorm: feature size " + std::to_string(d) + " vs gain " +
                         to_string(gain.shape()) + ", bias " + to_string(bias.shape()));
    }
    const std::size_t rows = x.numel() / d;
    auto out = new_node("layernorm", x.shape(), x.dtype());
    // Normalized values and reciprocal std per row, reused by backward.
    auto xhat = std::make_shared<std::vector<double>>(x.numel());
    auto inv_std = std::make_shared<std::vector<double>>(rows);
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const auto& vx = vec<T>(x.node()->data);
        const auto& vg = vec<T>(gain.node()->data);
        const auto& vb = vec<T>(bias.node()->data);
        auto& vo = vec<T>(out->data);
        for (std::size_t r = 0; r < rows; ++r) {
            const T* in = vx.data() + r * d;
            double mu = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                mu += in[j];
            }
            mu /= static_cast<double>(d);
            double var = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                const double c = in[j] - mu;
                var += c * c;
            }
            var /= static_cast<double>(d);
            const double is = 1.0 / std::sqrt(var + eps);
            (*inv_std)[r] = is;
            for (std::size_t j = 0; j < d; ++j) {
                const double h = (in[j] - mu) * is;
                (*xhat)[r * d + j] = h;
                vo[r * d + j] = static_cast<T>(h * vg[j] + vb[j]);
            }
        }
    });
    attach(out, {x, gain, bias}, [rows, d, xhat, inv_std](Node& self) {
        Node& nx = *self.inputs[0];
        Node& ng = *self.inputs[1];
        Node& nb = *self.inputs[2];
        dispatch(self.dtype, [&](auto tag) {
            using T = decltype(tag);
            const auto& g = vec<T>(self.grad);
            const auto& vg = vec<T>(ng.data);
            T* gx = nx.requires_grad ? vec<T>(nx.grad_buffer()).data() : nullptr;
            T* gg = ng.requires_grad ? vec<T>(ng.grad_buffer()).data() : nullptr;
            T* gb = nb.requires_grad ? vec<T>(nb.grad_buffer()).data() : nullptr;
            std::vector<double> dxhat(d);
            for (std::size_t r = 0; r < rows; ++r) {
                const std::size_t base = r * d;
                double mean_d = 0.0;
                double mean_dx = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    const double gy = g[base + j];
                    if (gg) gg[j] += static_cast<T>(gy * (*xhat)[base + j]);
                    if (gb) gb[j] += static_cast<T>(gy);
                    dxhat[j] = gy * vg[j];
                    mean_d += dxhat[j];
                    mean_dx += dxhat[j] * (*xhat)[base + j];
                }
                if (!gx) {
                    continue;
                }
                mean_d /= static_cast<double>(d);
                mean_dx /= static_cast<double>(d);
                for (std::size_t j = 0; j < d; ++j) {
                    gx[base + j] += static_cast<T>(
                        (*inv_std)[r] * (dxhat[j] - mean_d - (*xhat)[base + j] * mean_dx));
                }
            }
        });
    });
    return Tensor::from_node(out);
}

// ---- row selection / assembly ------------------------------------------------

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> idx) {
    require_defined(x, "gather_rows");
    require_rank2(x, "gather_rows");
    const std::size_t n = x.dim(0);
    const std::size_t d = x.dim(1);
    for (auto i : idx) {
        if (i >= n) {
            throw ShapeError("gather_rows: index " + std::to_string(i) +
                             " out of range for " + std::to_string(n) + " rows");
        }
    }
    auto rows = std::make_shared<std::vector<std::size_t>>(idx.begin(), idx.end());
    auto out = new_node("gather_rows", Shape{rows->size(), d}, x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const auto& vx = vec<T>(x.node()->data);
        auto& vo = vec<T>(out->data);
        for (std::size_t r = 0; r < rows->size(); ++r) {
            std::copy_n(vx.begin() + (*rows)[r] * d, d, vo.begin() + r * d);
        }
    });
    attach(out, {x}, [rows, d](Node& self) {
        Node& nx = *self.inputs[0];
        dispatch(self.dtype, [&](auto tag) {
            using T = decltype(tag);
            const auto& g = vec<T>(self.grad);
            auto& gx = vec<T>(nx.grad_buffer());
            for (std::size_t r = 0; r < rows->size(); ++r) {
                for (std::size_t j = 0; j < d; ++j) {
                    gx[(*rows)[r] * d + j] += g[r * d + j];
                }
            }
        });
    });
    return Tensor::from_node(out);
}

Tensor scatter_rows(const Tensor& base, std::span<const std::size_t> idx, const Tensor& rows) {
    require_defined(base, "scatter_rows");
    require_defined(rows, "scatter_rows");
    require_rank2(base, "scatter_rows");
    require_rank2(rows, "scatter_rows");
    require_same_dtype(base, rows, "scatter_rows");
    const std::size_t n = base.dim(0);
    const std::size_t d = base.dim(1);
    if (rows.dim(0) != idx.size() || rows.dim(1) != d) {
        throw ShapeError("scatter_rows: rows " + to_string(rows.shape()) + " do not match " +
                         std::to_string(idx.size()) + " indices into " +
                         to_string(base.shape()));
    }
    auto targets = std::make_shared<std::vector<std::size_t>>(idx.begin(), idx.end());
    std::vector<bool> used(n, false);
    for (auto i : *targets) {
        if (i >= n || used[i]) {
            throw ShapeError("scatter_rows: index " + std::to_string(i) +
                             " out of range or repeated");
        }
        used[i] = true;
    }
    auto out = new_node("scatter_rows", base.shape(), base.dtype());
    dispatch(base.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto& vo = vec<T>(out->data);
        vo = vec<T>(base.node()->data);
        const auto& vr = vec<T>(rows.node()->data);
        for (std::size_t r = 0; r < targets->size(); ++r) {
            std::copy_n(vr.begin() + r * d, d, vo.begin() + (*targets)[r] * d);
        }
    });
    attach(out, {base, rows}, [targets, d](Node& self) {
        Node& nb = *self.inputs[0];
        Node& nr = *self.inputs[1];
        dispatch(self.dtype, [&](auto tag) {
            using T = decltype(tag);
            const auto& g = vec<T>(self.grad);
            if (nb.requires_grad) {
                auto& gb = vec<T>(nb.grad_buffer());
                std::vector<bool> replaced(gb.size() / d, false);
                for (auto t : *targets) {
                    replaced[t] = true;
                }
                for (std::size_t r = 0; r < replaced.size(); ++r) {
                    if (replaced[r]) continue;
                    for (std::size_t j = 0; j < d; ++j) {
                        gb[r * d + j] += g[r * d + j];
                    }
                }
            }
            if (nr.requires_grad) {
                auto& gr = vec<T>(nr.grad_buffer());
                for (std::size_t r = 0; r < targets->size(); ++r) {
                    for (std::size_t j = 0; j < d; ++j) {
                        gr[r * d + j] += g[(*targets)[r] * d + j];
                    }
                }
            }
        });
    });
    return Tensor::from_node(out);
}

Tensor concat_rows(std::span<const Tensor> parts) {
    if (parts.empty()) {
        throw ShapeError("concat_rows: no inputs");
    }
    const std::size_t d = parts[0].dim(1);
    std::size_t total = 0;
    for (const auto& p : parts) {
        require_rank2(p, "concat_rows");
        require_same_dtype(parts[0], p, "concat_rows");
        if (p.dim(1) != d) {
            throw ShapeError("concat_rows: column mismatch " + to_string(parts[0].shape()) +
                             " vs " + to_string(p.shape()));
        }
        total += p.dim(0);
    }
    auto out = new_node("concat_rows", Shape{total, d}, parts[0].dtype());
    auto offsets = std::make_shared<std::vector<std::size_t>>();
    dispatch(out->dtype, [&](auto tag) {
        using T = decltype(tag);
        auto& vo = vec<T>(out->data);
        std::size_t off = 0;
        for (const auto& p : parts) {
            offsets->push_back(off);
            const auto& vp = vec<T>(p.node()->data);
            std::copy(vp.begin(), vp.end(), vo.begin() + off);
            off += vp.size();
        }
    });
    attach(out, std::vector<Tensor>(parts.begin(), parts.end()), [offsets](Node& self) {
        dispatch(self.dtype, [&](auto tag) {
            using T = decltype(tag);
            const auto& g = vec<T>(self.grad);
            for (std::size_t k = 0; k < self.inputs.size(); ++k) {
                Node& in = *self.inputs[k];
                if (!in.requires_grad) continue;
                auto& gi = vec<T>(in.grad_buffer());
                for (std::size_t i = 0; i < gi.size(); ++i) {
                    gi[i] += g[(*offsets)[k] + i];
                }
            }
        });
    });
    return Tensor::from_node(out);
}

Tensor concat_cols(std::span<const Tensor> parts) {
    if (parts.empty()) {
        throw ShapeError("concat_cols: no inputs");
    }
    const std::size_t rows = parts[0].dim(0);
    auto widths = std::make_shared<std::vector<std::size_t>>();
    std::size_t total = 0;
    for (const auto& p : parts) {
        require_rank2(p, "concat_cols");
        require_same_dtype(parts[0], p, "concat_cols");
        if (p.dim(0) != rows) {
            throw ShapeError("concat_cols: row mismatch " + to_string(parts[0].shape()) +
                             " vs " + to_string(p.shape()));
        }
        widths->push_back(p.dim(1));
        total += p.dim(1);
    }
    auto out = new_node("concat_cols", Shape{rows, total}, parts[0].dtype());
    dispatch(out->dtype, [&](auto tag) {
        using T = decltype(tag);
        auto& vo = vec<T>(out->data);
        std::size_t col = 0;
        for (std::size_t k = 0; k < parts.size(); ++k) {
            const auto& vp = vec<T>(parts[k].node()->data);
            const std::size_t w = (*widths)[k];
            for (std::size_t r = 0; r < rows; ++r) {
                std::copy_n(vp.begin() + r * w, w, vo.begin() + r * total + col);
            }
            col += w;
        }
    });
    attach(out, std::vector<Tensor>(parts.begin(), parts.end()), [widths, rows, total](Node& self) {
        dispatch(self.dtype, [&](auto tag) {
            using T = decltype(tag);
            const auto& g = vec<T>(self.grad);
            std::size_t col = 0;
            for (std::size_t k = 0; k < self.inputs.size(); ++k) {
                const std::size_t w = (*widths)[k];
                Node& in = *self.inputs[k];
                if (in.requires_grad) {
                    auto& gi = vec<T>(in.grad_buffer());
                    for (std::size_t r = 0; r < rows; ++r) {
                        for (std::size_t j = 0; j < w; ++j) {
                            gi[r * w + j] += g[r * total + col + j];
                        }
                    }
                }
                col += w;
            }
        });
    });
    return Tensor::from_node(out);
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
    require_defined(x, "slice_cols");
    require_rank2(x, "slice_cols");
    const std::size_t rows = x.dim(0);
    const std::size_t cols = x.dim(1);
    if (begin > end || end > cols) {
        throw ShapeError("slice_cols: [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") out of range for " + to_string(x.shape()));
    }
    const std::size_t w = end - begin;
    auto out = new_node("slice_cols", Shape{rows, w}, x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const auto& vx = vec<T>(x.node()->data);
        auto& vo = vec<T>(out->data);
        for (std::size_t r = 0; r < rows; ++r) {
            std::copy_n(vx.begin() + r * cols + begin, w, vo.begin() + r * w);
        }
    });
    attach(out, {x}, [rows, cols, begin, w](Node& self) {
        Node& nx = *self.inputs[0];
        dispatch(self.dtype, [&](auto tag) {
            using T = decltype(tag);
            const auto& g = vec<T>(self.grad);
            auto& gx = vec<T>(nx.grad_buffer());
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t j = 0; j < w; ++j) {
                    gx[r * cols + begin + j] += g[r * w + j];
                }
            }
        });
    });
    return Tensor::from_node(out);
}

Tensor reshape(const Tensor& x, Shape shape) {
    require_defined(x, "reshape");
    if (shape_numel(shape) != x.numel()) {
        throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " +
                         to_string(shape));
    }
    auto out = new_node("reshape", std::move(shape), x.dtype());
    out->data = x.node()->data;
    attach(out, {x}, [](Node& self) {
        Node& nx = *self.inputs[0];
        dispatch(self.dtype, [&](auto tag) {
            using T = decltype(tag);
            const auto& g = vec<T>(self.grad);
            auto& gx = vec<T>(nx.grad_buffer());
            for (std::size_t i = 0; i < g.size(); ++i) {
                gx[i] += g[i];
            }
        });
    });
    return Tensor::from_node(out);
}

// ---- reductions --------------------------------------------------------------

namespace {

Tensor reduce_sum(const Tensor& x, double factor, const char* op) {
    require_defined(x, op);
    auto out = new_node(op, Shape{}, x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        T total = 0;
        for (T v : vec<T>(x.node()->data)) {
            total += v;
        }
        vec<T>(out->data)[0] = static_cast<T>(total * factor);
    });
    attach(out, {x}, [factor](Node& self) {
        Node& nx = *self.inputs[0];
        dispatch(self.dtype, [&](auto tag) {
            using T = decltype(tag);
            const T g = static_cast<T>(vec<T>(self.grad)[0] * factor);
            for (auto& v : vec<T>(nx.grad_buffer())) {
                v += g;
            }
        });
    });
    return Tensor::from_node(out);
}

} // namespace

Tensor sum(const Tensor& x) { return reduce_sum(x, 1.0, "sum"); }

Tensor mean(const Tensor& x) {
    if (x.numel() == 0) {
        throw ShapeError("mean of an empty tensor");
    }
    return reduce_sum(x, 1.0 / static_cast<double>(x.numel()), "mean");
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
    require_defined(logits, "cross_entropy");
    require_rank2(logits, "cross_entropy");
    const std::size_t b = logits.dim(0);
    const std::size_t c = logits.dim(1);
    if (labels.size() != b || b == 0) {
        throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(b) + " rows");
    }
    for (auto l : labels) {
        if (l >= c) {
            throw ShapeError("cross_entropy: label " + std::to_string(l) + " out of range for " +
                             std::to_string(c) + " classes");
        }
    }
    auto lab = std::make_shared<std::vector<std::size_t>>(labels.begin(), labels.end());
    auto probs = std::make_shared<std::vector<double>>(b * c);
    auto out = new_node("cross_entropy", Shape{}, logits.dtype());
    dispatch(logits.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const auto& v = vec<T>(logits.node()->data);
        double total = 0.0;
        for (std::size_t i = 0; i < b; ++i) {
            const T* row = v.data() + i * c;
            const double mx = *std::max_element(row, row + c);
            double z = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
                z += std::exp(row[j] - mx);
            }
            for (std::size_t j = 0; j < c; ++j) {
                (*probs)[i * c + j] = std::exp(row[j] - mx) / z;
            }
            total += (mx + std::log(z)) - row[(*lab)[i]];
        }
        vec<T>(out->data)[0] = static_cast<T>(total / static_cast<double>(b));
    });
    attach(out, {logits}, [lab, probs, b, c](Node& self) {
        Node& nl = *self.inputs[0];
        dispatch(self.dtype, [&](auto tag) {
            using T = decltype(tag);
            const double g = vec<T>(self.grad)[0] / static_cast<double>(b);
            auto& gl = vec<T>(nl.grad_buffer());
            for (std::size_t i = 0; i < b; ++i) {
                for (std::size_t j = 0; j < c; ++j) {
                    const double onehot = j == (*lab)[i] ? 1.0 : 0.0;
                    gl[i * c + j] += static_cast<T>(g * ((*probs)[i * c + j] - onehot));
                }
            }
        });
    });
    return Tensor::from_node(out);
}

void check_finite(const Tensor& x, const std::string& what) {
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        for (T v : vec<T>(x.node()->data)) {
            if (!std::isfinite(v)) {
                throw NumericError("non-finite value in " + what);
            }
        }
    });
}

} // namespace morvit
