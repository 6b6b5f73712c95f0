#include "nfpf/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <numeric>
#include <sstream>

#include "nfpf/errors.hpp"

namespace nfpf::ad {

std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out << 'x';
        out << shape[i];
    }
    out << ']';
    return out.str();
}

bool all_finite(std::span<const double> values) {
    return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : shape_(std::move(shape)),
      data_(std::make_shared<std::vector<double>>(std::move(data))),
      requires_grad_(requires_grad) {
    for (auto extent : shape_) {
        if (extent == 0) throw DimensionError("tensor extents must be positive, got " + shape_string(shape_));
    }
    if (numel(shape_) != data_->size()) {
        throw DimensionError("tensor data length " + std::to_string(data_->size()) +
                             " does not match shape " + shape_string(shape_));
    }
}

Tensor::Tensor(const Tensor& other)
    : shape_(other.shape_),
      data_(std::make_shared<std::vector<double>>(*other.data_)),
      requires_grad_(other.requires_grad_),
      grad_(other.grad_) {}

Tensor& Tensor::operator=(const Tensor& other) {
    if (this != &other) {
        shape_ = other.shape_;
        data_ = std::make_shared<std::vector<double>>(*other.data_);
        requires_grad_ = other.requires_grad_;
        grad_ = other.grad_;
    }
    return *this;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

std::span<const double> Tensor::data() const { return {data_->data(), data_->size()}; }
std::span<double> Tensor::mutable_data() { return {data_->data(), data_->size()}; }

std::span<const double> Tensor::grad() const {
    if (!grad_) return {};
    return {grad_->data(), grad_->size()};
}

std::span<double> Tensor::mutable_grad() {
    if (!grad_) grad_.emplace(size(), 0.0);
    return {grad_->data(), grad_->size()};
}

void Tensor::accumulate_grad(std::span<const double> grad) const {
    if (!grad_) grad_.emplace(size(), 0.0);
    for (std::size_t i = 0; i < grad.size(); ++i) (*grad_)[i] += grad[i];
}

void Tensor::zero_grad() {
    if (grad_) std::fill(grad_->begin(), grad_->end(), 0.0);
}

// ---------------------------------------------------------------------------
// Var

Var make_var(std::shared_ptr<const std::vector<double>> value, Shape shape, Tape* tape,
             std::size_t node) {
    Var v;
    v.value_ = std::move(value);
    v.shape_ = std::move(shape);
    v.tape_ = tape;
    v.node_ = node;
    return v;
}

Var Var::constant(std::vector<double> values, Shape shape) {
    if (numel(shape) != values.size()) {
        throw DimensionError("constant of length " + std::to_string(values.size()) +
                             " does not match shape " + shape_string(shape));
    }
    return make_var(std::make_shared<const std::vector<double>>(std::move(values)), std::move(shape),
                    nullptr, 0);
}

Var Var::constant(std::vector<double> values) {
    Shape shape{values.size()};
    return constant(std::move(values), std::move(shape));
}

Var Var::scalar(double value) { return constant({value}, Shape{}); }

std::span<const double> Var::value() const {
    if (!value_) return {};
    return {value_->data(), value_->size()};
}

double Var::item() const {
    if (size() != 1) throw UsageError("item() on a Var of shape " + shape_string(shape_));
    return (*value_)[0];
}

std::vector<double> Var::to_vector() const {
    if (!value_) return {};
    return *value_;
}

// ---------------------------------------------------------------------------
// Tape

Var Tape::watch(const Tensor& tensor) {
    if (!tensor.requires_grad()) {
        return make_var(tensor.storage(), tensor.shape(), nullptr, 0);
    }
    const Tensor* target = &tensor;
    auto id = record(tensor.size(), {}, [target](std::span<const double> g, Tape&) { target->accumulate_grad(g); });
    return make_var(tensor.storage(), tensor.shape(), this, id);
}

std::size_t Tape::record(std::size_t size, std::vector<std::size_t> inputs, BackwardFn fn) {
    nodes_.push_back(Node{size, std::move(inputs), std::move(fn), {}});
    return nodes_.size() - 1;
}

void Tape::accumulate(std::size_t node, std::span<const double> grad) {
    auto& dst = nodes_[node].grad;
    for (std::size_t i = 0; i < grad.size(); ++i) dst[i] += grad[i];
}

void Tape::accumulate(std::size_t node, std::size_t index, double grad) {
    nodes_[node].grad[index] += grad;
}

void Tape::backward(const Var& output) {
    if (output.tape() != this) throw UsageError("backward: output was not recorded on this tape");
    if (output.size() != 1) {
        throw UsageError("backward: output must be scalar, got shape " + shape_string(output.shape()));
    }
    for (auto& node : nodes_) node.grad.assign(node.size, 0.0);
    nodes_[output.node()].grad[0] = 1.0;
    for (std::size_t i = output.node() + 1; i-- > 0;) {
        auto& node = nodes_[i];
        if (!node.backward) continue;
        const auto& g = node.grad;
        if (std::all_of(g.begin(), g.end(), [](double v) { return v == 0.0; })) continue;
        node.backward({g.data(), g.size()}, *this);
    }
}

void Tape::clear() { nodes_.clear(); }

Var param(Tape* tape, const Tensor& tensor) {
    if (tape) return tape->watch(tensor);
    return make_var(tensor.storage(), tensor.shape(), nullptr, 0);
}

// ---------------------------------------------------------------------------
// Primitive helpers

namespace {

Tape* common_tape(std::initializer_list<const Var*> inputs) {
    Tape* tape = nullptr;
    for (const Var* v : inputs) {
        if (!v->on_tape()) continue;
        if (tape && tape != v->tape()) throw UsageError("operands recorded on different tapes");
        tape = v->tape();
    }
    return tape;
}

// Wraps a computed value into a Var, recording a node when a tape is active.
// `make_backward` is only invoked when recording.
template <typename MakeBackward>
Var finish(std::vector<double> value, Shape shape, std::initializer_list<const Var*> inputs,
           MakeBackward&& make_backward) {
    auto stored = std::make_shared<const std::vector<double>>(std::move(value));
    Tape* tape = common_tape(inputs);
    if (!tape) return make_var(std::move(stored), std::move(shape), nullptr, 0);
    std::vector<std::size_t> ids;
    for (const Var* v : inputs) {
        if (v->on_tape()) ids.push_back(v->node());
    }
    auto id = tape->record(stored->size(), std::move(ids), make_backward(stored));
    return make_var(std::move(stored), std::move(shape), tape, id);
}

void require_vector(const Var& x, const char* op) {
    if (x.shape().size() != 1) {
        throw DimensionError(std::string(op) + ": expected a vector, got shape " + shape_string(x.shape()));
    }
}

void require_same_size(const Var& a, const Var& b, const char* op) {
    if (a.size() != b.size()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                             shape_string(b.shape()));
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// Linear algebra

Var affine(const Var& x, const Var& weight, const Var& bias) {
    require_vector(x, "affine");
    require_vector(bias, "affine");
    if (weight.shape().size() != 2 || weight.shape()[1] != x.size() || weight.shape()[0] != bias.size()) {
        throw DimensionError("affine: weight " + shape_string(weight.shape()) + " incompatible with input " +
                             shape_string(x.shape()) + " and bias " + shape_string(bias.shape()));
    }
    const std::size_t m = weight.shape()[0];
    const std::size_t n = weight.shape()[1];
    auto xv = x.value();
    auto wv = weight.value();
    auto bv = bias.value();
    std::vector<double> out(m);
    for (std::size_t i = 0; i < m; ++i) {
        double acc = 0.0;
        const double* row = wv.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) acc += row[j] * xv[j];
        out[i] = acc + bv[i];
    }
    return finish(std::move(out), {m}, {&x, &weight, &bias}, [&](auto) {
        return [x, weight, bias, m, n](std::span<const double> g, Tape& tape) {
            if (x.on_tape()) {
                std::vector<double> gx(n, 0.0);
                auto wv = weight.value();
                for (std::size_t i = 0; i < m; ++i) {
                    const double gi = g[i];
                    const double* row = wv.data() + i * n;
                    for (std::size_t j = 0; j < n; ++j) gx[j] += gi * row[j];
                }
                tape.accumulate(x.node(), gx);
            }
            if (weight.on_tape()) {
                std::vector<double> gw(m * n);
                auto xv = x.value();
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t j = 0; j < n; ++j) gw[i * n + j] = g[i] * xv[j];
                }
                tape.accumulate(weight.node(), gw);
            }
            if (bias.on_tape()) tape.accumulate(bias.node(), g);
        };
    });
}

Var matvec(const Var& matrix, const Var& x) {
    require_vector(x, "matvec");
    if (matrix.shape().size() != 2 || matrix.shape()[1] != x.size()) {
        throw DimensionError("matvec: matrix " + shape_string(matrix.shape()) + " incompatible with vector " +
                             shape_string(x.shape()));
    }
    const std::size_t m = matrix.shape()[0];
    const std::size_t n = matrix.shape()[1];
    auto mv = matrix.value();
    auto xv = x.value();
    std::vector<double> out(m);
    for (std::size_t i = 0; i < m; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) acc += mv[i * n + j] * xv[j];
        out[i] = acc;
    }
    return finish(std::move(out), {m}, {&matrix, &x}, [&](auto) {
        return [matrix, x, m, n](std::span<const double> g, Tape& tape) {
            if (x.on_tape()) {
                std::vector<double> gx(n, 0.0);
                auto mv = matrix.value();
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t j = 0; j < n; ++j) gx[j] += g[i] * mv[i * n + j];
                }
                tape.accumulate(x.node(), gx);
            }
            if (matrix.on_tape()) {
                std::vector<double> gm(m * n);
                auto xv = x.value();
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t j = 0; j < n; ++j) gm[i * n + j] = g[i] * xv[j];
                }
                tape.accumulate(matrix.node(), gm);
            }
        };
    });
}

// ---------------------------------------------------------------------------
// Elementwise

Unary parse_unary(std::string_view name) {
    if (name == "tanh") return Unary::Tanh;
    if (name == "exp") return Unary::Exp;
    if (name == "softplus") return Unary::Softplus;
    if (name == "square") return Unary::Square;
    throw ConfigError("unknown elementwise kind '" + std::string(name) + "'");
}

std::string_view unary_name(Unary kind) {
    switch (kind) {
        case Unary::Tanh: return "tanh";
        case Unary::Exp: return "exp";
        case Unary::Softplus: return "softplus";
        case Unary::Square: return "square";
    }
    throw ConfigError("unknown elementwise kind");
}

Var unary(const Var& x, Unary kind) {
    auto xv = x.value();
    std::vector<double> out(xv.size());
    switch (kind) {
        case Unary::Tanh:
            for (std::size_t i = 0; i < xv.size(); ++i) out[i] = std::tanh(xv[i]);
            break;
        case Unary::Exp:
            for (std::size_t i = 0; i < xv.size(); ++i) out[i] = std::exp(std::min(xv[i], kExpClamp));
            break;
        case Unary::Softplus:
            for (std::size_t i = 0; i < xv.size(); ++i) {
                out[i] = std::max(xv[i], 0.0) + std::log1p(std::exp(-std::abs(xv[i])));
            }
            break;
        case Unary::Square:
            for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * xv[i];
            break;
        default:
            throw ConfigError("unknown elementwise kind");
    }
    return finish(std::move(out), x.shape(), {&x}, [&](std::shared_ptr<const std::vector<double>> y) {
        return [x, y, kind](std::span<const double> g, Tape& tape) {
            auto xv = x.value();
            const auto& yv = *y;
            std::vector<double> gx(g.size());
            for (std::size_t i = 0; i < g.size(); ++i) {
                double d = 0.0;
                switch (kind) {
                    case Unary::Tanh: d = 1.0 - yv[i] * yv[i]; break;
                    case Unary::Exp: d = xv[i] > kExpClamp ? 0.0 : yv[i]; break;
                    case Unary::Softplus: d = 1.0 / (1.0 + std::exp(-xv[i])); break;
                    case Unary::Square: d = 2.0 * xv[i]; break;
                }
                gx[i] = g[i] * d;
            }
            tape.accumulate(x.node(), gx);
        };
    });
}

Var add(const Var& a, const Var& b) {
    require_same_size(a, b, "add");
    auto av = a.value();
    auto bv = b.value();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    return finish(std::move(out), a.shape(), {&a, &b}, [&](auto) {
        return [a, b](std::span<const double> g, Tape& tape) {
            if (a.on_tape()) tape.accumulate(a.node(), g);
            if (b.on_tape()) tape.accumulate(b.node(), g);
        };
    });
}

Var sub(const Var& a, const Var& b) {
    require_same_size(a, b, "sub");
    auto av = a.value();
    auto bv = b.value();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
    return finish(std::move(out), a.shape(), {&a, &b}, [&](auto) {
        return [a, b](std::span<const double> g, Tape& tape) {
            if (a.on_tape()) tape.accumulate(a.node(), g);
            if (b.on_tape()) {
                std::vector<double> neg(g.size());
                for (std::size_t i = 0; i < g.size(); ++i) neg[i] = -g[i];
                tape.accumulate(b.node(), neg);
            }
        };
    });
}

Var mul(const Var& a, const Var& b) {
    require_same_size(a, b, "mul");
    auto av = a.value();
    auto bv = b.value();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    return finish(std::move(out), a.shape(), {&a, &b}, [&](auto) {
        return [a, b](std::span<const double> g, Tape& tape) {
            if (a.on_tape()) {
                auto bv = b.value();
                std::vector<double> ga(g.size());
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * bv[i];
                tape.accumulate(a.node(), ga);
            }
            if (b.on_tape()) {
                auto av = a.value();
                std::vector<double> gb(g.size());
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] = g[i] * av[i];
                tape.accumulate(b.node(), gb);
            }
        };
    });
}

Var scale(const Var& x, double factor) {
    auto xv = x.value();
    std::vector<double> out(xv.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * factor;
    return finish(std::move(out), x.shape(), {&x}, [&](auto) {
        return [x, factor](std::span<const double> g, Tape& tape) {
            std::vector<double> gx(g.size());
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * factor;
            tape.accumulate(x.node(), gx);
        };
    });
}

Var add_scalar(const Var& x, double offset) {
    auto xv = x.value();
    std::vector<double> out(xv.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] + offset;
    return finish(std::move(out), x.shape(), {&x}, [&](auto) {
        return [x](std::span<const double> g, Tape& tape) { tape.accumulate(x.node(), g); };
    });
}

Var sum(const Var& x) {
    auto xv = x.value();
    double acc = 0.0;
    for (double v : xv) acc += v;
    return finish({acc}, Shape{}, {&x}, [&](auto) {
        return [x](std::span<const double> g, Tape& tape) {
            tape.accumulate(x.node(), std::vector<double>(x.size(), g[0]));
        };
    });
}

// ---------------------------------------------------------------------------
// Structural

Var concat(const Var& a, const Var& b) {
    require_vector(a, "concat");
    require_vector(b, "concat");
    std::vector<double> out;
    out.reserve(a.size() + b.size());
    auto av = a.value();
    auto bv = b.value();
    out.insert(out.end(), av.begin(), av.end());
    out.insert(out.end(), bv.begin(), bv.end());
    const std::size_t na = a.size();
    const std::size_t n = out.size();
    return finish(std::move(out), {n}, {&a, &b}, [&](auto) {
        return [a, b, na](std::span<const double> g, Tape& tape) {
            if (a.on_tape()) tape.accumulate(a.node(), g.subspan(0, na));
            if (b.on_tape()) tape.accumulate(b.node(), g.subspan(na));
        };
    });
}

Var slice(const Var& x, std::size_t offset, std::size_t length) {
    if (offset + length > x.size()) {
        throw DimensionError("slice [" + std::to_string(offset) + ", " + std::to_string(offset + length) +
                             ") out of range for shape " + shape_string(x.shape()));
    }
    auto xv = x.value();
    std::vector<double> out(xv.begin() + static_cast<std::ptrdiff_t>(offset),
                            xv.begin() + static_cast<std::ptrdiff_t>(offset + length));
    return finish(std::move(out), {length}, {&x}, [&](auto) {
        return [x, offset](std::span<const double> g, Tape& tape) {
            for (std::size_t i = 0; i < g.size(); ++i) tape.accumulate(x.node(), offset + i, g[i]);
        };
    });
}

Var reshape(const Var& x, Shape shape) {
    if (numel(shape) != x.size()) {
        throw DimensionError("reshape: cannot view " + shape_string(x.shape()) + " as " + shape_string(shape));
    }
    auto xv = x.value();
    return finish(std::vector<double>(xv.begin(), xv.end()), std::move(shape), {&x}, [&](auto) {
        return [x](std::span<const double> g, Tape& tape) { tape.accumulate(x.node(), g); };
    });
}

Var gather(const Var& x, std::span<const std::size_t> indices) {
    auto xv = x.value();
    std::vector<double> out(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= xv.size()) throw DimensionError("gather: index out of range");
        out[i] = xv[indices[i]];
    }
    std::vector<std::size_t> idx(indices.begin(), indices.end());
    return finish(std::move(out), {idx.size()}, {&x}, [&](auto) {
        return [x, idx](std::span<const double> g, Tape& tape) {
            for (std::size_t i = 0; i < idx.size(); ++i) tape.accumulate(x.node(), idx[i], g[i]);
        };
    });
}

Var merge(std::size_t size, const Var& first, std::span<const std::size_t> first_idx, const Var& second,
          std::span<const std::size_t> second_idx) {
    if (first.size() != first_idx.size() || second.size() != second_idx.size() ||
        first_idx.size() + second_idx.size() != size) {
        throw DimensionError("merge: index sets do not partition the output");
    }
    std::vector<double> out(size, 0.0);
    auto fv = first.value();
    auto sv = second.value();
    for (std::size_t i = 0; i < first_idx.size(); ++i) out[first_idx[i]] = fv[i];
    for (std::size_t i = 0; i < second_idx.size(); ++i) out[second_idx[i]] = sv[i];
    std::vector<std::size_t> fi(first_idx.begin(), first_idx.end());
    std::vector<std::size_t> si(second_idx.begin(), second_idx.end());
    return finish(std::move(out), {size}, {&first, &second}, [&](auto) {
        return [first, second, fi, si](std::span<const double> g, Tape& tape) {
            if (first.on_tape()) {
                std::vector<double> gf(fi.size());
                for (std::size_t i = 0; i < fi.size(); ++i) gf[i] = g[fi[i]];
                tape.accumulate(first.node(), gf);
            }
            if (second.on_tape()) {
                std::vector<double> gs(si.size());
                for (std::size_t i = 0; i < si.size(); ++i) gs[i] = g[si[i]];
                tape.accumulate(second.node(), gs);
            }
        };
    });
}

Var frobenius_normalize(const Var& x, double min_norm) {
    auto xv = x.value();
    double sq = 0.0;
    for (double v : xv) sq += v * v;
    const double norm = std::sqrt(sq);
    if (!(norm > min_norm)) {
        throw NumericalError("degenerate matrix: Frobenius norm " + std::to_string(norm) +
                             " is below " + std::to_string(min_norm));
    }
    std::vector<double> out(xv.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] / norm;
    return finish(std::move(out), x.shape(), {&x}, [&](std::shared_ptr<const std::vector<double>> y) {
        return [x, y, norm](std::span<const double> g, Tape& tape) {
            // d(x/|x|) = (g - y (y.g)) / |x|
            const auto& yv = *y;
            double yg = 0.0;
            for (std::size_t i = 0; i < g.size(); ++i) yg += yv[i] * g[i];
            std::vector<double> gx(g.size());
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] = (g[i] - yv[i] * yg) / norm;
            tape.accumulate(x.node(), gx);
        };
    });
}

// ---------------------------------------------------------------------------
// Gradient check

GradientCheckResult gradient_check(const std::function<Var(Tape*)>& f, std::span<Tensor* const> params,
                                   double h) {
    if (!(h > 0.0)) throw UsageError("gradient_check: step must be positive");

    std::vector<bool> previous(params.size());
    for (std::size_t p = 0; p < params.size(); ++p) {
        previous[p] = params[p]->requires_grad();
        params[p]->set_requires_grad(true);
        params[p]->mutable_grad();
        params[p]->zero_grad();
    }

    std::vector<std::vector<double>> analytic(params.size());
    {
        Tape tape;
        Var out = f(&tape);
        if (out.on_tape()) {
            tape.backward(out);
        } else if (out.size() != 1) {
            throw UsageError("gradient_check: function must return a scalar");
        }
        for (std::size_t p = 0; p < params.size(); ++p) {
            auto g = params[p]->grad();
            analytic[p].assign(g.begin(), g.end());
        }
    }

    GradientCheckResult result;
    for (std::size_t p = 0; p < params.size(); ++p) {
        auto data = params[p]->mutable_data();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double saved = data[i];
            data[i] = saved + h;
            const double plus = f(nullptr).item();
            data[i] = saved - h;
            const double minus = f(nullptr).item();
            data[i] = saved;
            if (!std::isfinite(plus) || !std::isfinite(minus)) {
                throw NumericalError("gradient_check: non-finite function value probing parameter " +
                                     std::to_string(p) + " coordinate " + std::to_string(i));
            }
            const double numeric = (plus - minus) / (2.0 * h);
            const double a = analytic[p][i];
            const double denom = std::max({std::abs(a), std::abs(numeric), 1e-12});
            const double rel = std::abs(a - numeric) / denom;
            if (rel > result.max_relative_error) {
                result = {rel, p, i, a, numeric};
            }
        }
    }
    for (std::size_t p = 0; p < params.size(); ++p) params[p]->set_requires_grad(previous[p]);
    return result;
}

}  // namespace nfpf::ad
