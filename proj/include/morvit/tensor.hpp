#pragma once

// Dense row-major tensors with reverse-mode differentiation.
//
// A Tensor is a cheap handle onto a shared node. Every op allocates a new
// node; when gradient recording is enabled and any input requires a
// gradient, the node keeps its inputs and a backward closure. Calling
// backward() on a scalar collects the reachable nodes into a Tape (ordered
// by creation id, which is a topological order) and replays it in reverse.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "morvit/error.hpp"

namespace morvit {

enum class DType : std::uint8_t { f64 = 0, f32 = 1 };

using Shape = std::vector<std::size_t>;

std::string to_string(const Shape& shape);
std::string to_string(DType dtype);
std::size_t shape_numel(const Shape& shape);

namespace detail {

using Storage = std::variant<std::vector<double>, std::vector<float>>;

struct Node {
    std::uint64_t id = 0;
    const char* op = "leaf";
    Shape shape;
    DType dtype = DType::f64;
    Storage data;
    Storage grad;
    bool has_grad = false;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward;

    std::size_t numel() const { return shape_numel(shape); }
    // Lazily zero-initializes the gradient buffer.
    Storage& grad_buffer();
};

} // namespace detail

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, DType dtype = DType::f64);
    static Tensor full(Shape shape, double value, DType dtype = DType::f64);
    static Tensor from(Shape shape, std::vector<double> values, DType dtype = DType::f64);
    static Tensor scalar(double value, DType dtype = DType::f64);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const;
    DType dtype() const;

    template <typename T>
    std::span<const T> data() const {
        return std::get<std::vector<T>>(node_->data);
    }
    // Mutable access is reserved for leaves (optimizer updates, test
    // perturbations). Mutating a tensor that is already on a tape corrupts
    // its replay.
    template <typename T>
    std::span<T> mutable_data() {
        return std::get<std::vector<T>>(node_->data);
    }

    double item() const;
    double at(std::size_t flat_index) const;
    std::vector<double> to_vector() const;

    bool requires_grad() const;
    Tensor& set_requires_grad(bool value = true);
    bool has_grad() const;
    /// Gradient as a fresh tensor (zeros if none accumulated yet).
    Tensor grad() const;
    std::vector<double> grad_vector() const;
    void zero_grad();

    /// Same values, no history, no gradient requirement.
    Tensor detach() const;
    /// Deep copy of the values into a new leaf.
    Tensor clone() const;
    Tensor to(DType dtype) const;

    /// Replays the tape rooted at this scalar.
    void backward() const;

    const char* op_name() const;
    std::uint64_t id() const;

    static Tensor from_node(std::shared_ptr<detail::Node> node);
    const std::shared_ptr<detail::Node>& node() const { return node_; }

private:
    std::shared_ptr<detail::Node> node_;
};

/// Recorded operations reachable from a root, in topological order.
class Tape {
public:
    static Tape record(const Tensor& root);

    std::size_t size() const { return nodes_.size(); }
    bool empty() const { return nodes_.empty(); }
    std::span<const detail::Node* const> nodes() const { return nodes_; }

    /// Seeds d(root)/d(root) = 1 and visits every node once in reverse order.
    void backward();

private:
    std::vector<detail::Node*> nodes_;
    std::shared_ptr<detail::Node> root_;
};

/// Disables history recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled();

/// Counts multiply-accumulates performed by matmul on the current thread.
class MacCounter {
public:
    MacCounter();
    std::uint64_t count() const;

private:
    std::uint64_t start_;
};

// ---- operations ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// Elementwise binary ops use numpy broadcasting (trailing dimensions aligned,
// size-1 dimensions stretched).
Tensor add(const Tensor& a, const Tensor& b);
Tensor add_broadcast(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
Tensor square(const Tensor& a);

Tensor softmax_rows(const Tensor& x);
Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

Tensor gelu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> idx);
/// Copy of `base` with row idx[i] replaced by row i of `rows`. Indices must be distinct.
Tensor scatter_rows(const Tensor& base, std::span<const std::size_t> idx, const Tensor& rows);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end);
Tensor reshape(const Tensor& x, Shape shape);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// Mean softmax cross-entropy over the rows of `logits`.
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels);

/// Throws NumericError when any value is NaN or infinite.
void check_finite(const Tensor& x, const std::string& what);

} // namespace morvit
