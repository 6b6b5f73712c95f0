#pragma once

// Dense tensors with tape-based reverse-mode differentiation.
//
// A Var is an immutable value plus, when it participates in a gradient
// computation, the id of the node that produced it on a Tape. Operations
// record a node only when one of their inputs is on a tape, so a forward
// pass without a tape runs the exact same arithmetic and produces
// bit-identical values.

#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace nfpf::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Parameter storage. Copies are deep; Vars created from a Tensor view its
/// storage, so parameters must not be mutated while a graph built from them
/// is still in use.
class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);
    Tensor(const Tensor& other);
    Tensor& operator=(const Tensor& other);
    Tensor(Tensor&&) noexcept = default;
    Tensor& operator=(Tensor&&) noexcept = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);

    const Shape& shape() const { return shape_; }
    std::size_t size() const { return data_ ? data_->size() : 0; }

    std::span<const double> data() const;
    std::span<double> mutable_data();

    bool requires_grad() const { return requires_grad_; }
    void set_requires_grad(bool value) { requires_grad_ = value; }

    bool has_grad() const { return grad_.has_value(); }
    std::span<const double> grad() const;
    /// Allocates a zero gradient buffer on first use.
    std::span<double> mutable_grad();
    void zero_grad();
    /// Adds into the gradient buffer. Gradient bookkeeping is not part of the
    /// tensor's logical value, so this is allowed on a const tensor.
    void accumulate_grad(std::span<const double> grad) const;

    std::shared_ptr<const std::vector<double>> storage() const { return data_; }

private:
    Shape shape_;
    std::shared_ptr<std::vector<double>> data_ = std::make_shared<std::vector<double>>();
    bool requires_grad_ = false;
    mutable std::optional<std::vector<double>> grad_;
};

class Tape;

class Var {
public:
    Var() = default;

    static Var constant(std::vector<double> values, Shape shape);
    static Var constant(std::vector<double> values);
    static Var scalar(double value);

    const Shape& shape() const { return shape_; }
    std::size_t size() const { return value_ ? value_->size() : 0; }
    std::span<const double> value() const;
    double operator[](std::size_t i) const { return (*value_)[i]; }
    /// Value of a single-element Var.
    double item() const;
    std::vector<double> to_vector() const;

    bool on_tape() const { return tape_ != nullptr; }
    Tape* tape() const { return tape_; }
    std::size_t node() const { return node_; }

private:
    friend class Tape;
    friend Var make_var(std::shared_ptr<const std::vector<double>>, Shape, Tape*, std::size_t);

    std::shared_ptr<const std::vector<double>> value_;
    Shape shape_;
    Tape* tape_ = nullptr;
    std::size_t node_ = 0;
};

Var make_var(std::shared_ptr<const std::vector<double>> value, Shape shape, Tape* tape,
             std::size_t node);

/// Append-only record of primitive operations. Single-threaded.
class Tape {
public:
    /// Receives the gradient of the node's output and pushes contributions
    /// to its inputs through Tape::accumulate.
    using BackwardFn = std::function<void(std::span<const double> out_grad, Tape& tape)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Leaf for a parameter tensor. Tensors without requires_grad become
    /// constants. The tensor must outlive backward().
    Var watch(const Tensor& tensor);

    std::size_t record(std::size_t size, std::vector<std::size_t> inputs, BackwardFn fn);
    void accumulate(std::size_t node, std::span<const double> grad);
    void accumulate(std::size_t node, std::size_t index, double grad);

    /// Reverse sweep from a scalar output. Leaf tensor gradients accumulate
    /// across calls; intermediate gradients are reset on every call.
    void backward(const Var& output);

    std::size_t size() const { return nodes_.size(); }
    const std::vector<std::size_t>& inputs_of(std::size_t node) const { return nodes_[node].inputs; }
    void clear();

private:
    struct Node {
        std::size_t size = 0;
        std::vector<std::size_t> inputs;
        BackwardFn backward;
        std::vector<double> grad;
    };
    std::vector<Node> nodes_;
};

/// Leaf helper used throughout the models: a null tape yields a constant
/// view of the tensor.
Var param(Tape* tape, const Tensor& tensor);

// ---------------------------------------------------------------------------
// Primitives

Var affine(const Var& x, const Var& weight, const Var& bias);
Var matvec(const Var& matrix, const Var& x);

enum class Unary { Tanh, Exp, Softplus, Square };

Unary parse_unary(std::string_view name);
std::string_view unary_name(Unary kind);

/// Exponential inputs saturate at this bound (zero gradient beyond).
inline constexpr double kExpClamp = 30.0;

Var unary(const Var& x, Unary kind);
inline Var tanh(const Var& x) { return unary(x, Unary::Tanh); }
inline Var exp(const Var& x) { return unary(x, Unary::Exp); }
inline Var softplus(const Var& x) { return unary(x, Unary::Softplus); }
inline Var square(const Var& x) { return unary(x, Unary::Square); }

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& x, double factor);
Var add_scalar(const Var& x, double offset);
Var sum(const Var& x);

Var concat(const Var& a, const Var& b);
Var slice(const Var& x, std::size_t offset, std::size_t length);
Var reshape(const Var& x, Shape shape);
Var gather(const Var& x, std::span<const std::size_t> indices);
/// Inverse of a partition: out[first_idx[i]] = first[i], out[second_idx[j]] = second[j].
Var merge(std::size_t size, const Var& first, std::span<const std::size_t> first_idx,
          const Var& second, std::span<const std::size_t> second_idx);

/// x / ||x||_F; throws NumericalError when the norm is below min_norm.
Var frobenius_normalize(const Var& x, double min_norm = 1e-12);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }

bool all_finite(std::span<const double> values);

// ---------------------------------------------------------------------------
// Gradient verification

struct GradientCheckResult {
    double max_relative_error = 0.0;
    std::size_t worst_param = 0;
    std::size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
};

/// Compares reverse-mode gradients of a scalar function against central
/// differences. `f` must build its graph on the given tape (or without one
/// when passed nullptr) by reading the parameters through param().
GradientCheckResult gradient_check(const std::function<Var(Tape*)>& f,
                                   std::span<Tensor* const> params, double h = 1e-6);

}  // namespace nfpf::ad
