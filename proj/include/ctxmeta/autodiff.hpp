#pragma once

// Tape-based reverse-mode automatic differentiation.
//
// Every operation appends a node to a Tape. backward() walks the tape in
// reverse and expresses each vector-Jacobian product with the same recorded
// operations, so with create_graph set the gradients are themselves nodes and
// can be differentiated again (needed for meta-gradients through unrolled
// inner-loop updates).

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ctxmeta/errors.hpp"
#include "ctxmeta/tensor.hpp"

namespace ctxmeta {

enum class Op {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    MatMul,
    Relu,
    Sum,
    Mean,
    Square,
    ConcatRows,
    Scale,
    Log,
    Exp,
    Neg,
    Reshape,
    Slice,
    Pad,
    Transpose,
};

inline const char* op_name(Op op) {
    switch (op) {
        case Op::Leaf: return "leaf";
        case Op::Constant: return "constant";
        case Op::Add: return "add";
        case Op::Sub: return "sub";
        case Op::Mul: return "mul";
        case Op::MatMul: return "matmul";
        case Op::Relu: return "relu";
        case Op::Sum: return "sum";
        case Op::Mean: return "mean";
        case Op::Square: return "square";
        case Op::ConcatRows: return "concat_rows";
        case Op::Scale: return "scale";
        case Op::Log: return "log";
        case Op::Exp: return "exp";
        case Op::Neg: return "neg";
        case Op::Reshape: return "reshape";
        case Op::Slice: return "slice";
        case Op::Pad: return "pad";
        case Op::Transpose: return "transpose";
    }
    return "?";
}

struct Node {
    Tensor value;
    Op op = Op::Constant;
    std::vector<int> parents;
    bool requires_grad = false;
    double scalar = 0.0;       // Scale factor
    std::size_t offset = 0;    // Slice / Pad flat offset
    std::size_t extent = 0;    // Pad total length
};

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape holds the node.
class Var {
public:
    Var() = default;
    Var(Tape* tape, int id) : tape_(tape), id_(id) {}

    Tape* tape() const noexcept { return tape_; }
    int id() const noexcept { return id_; }
    bool valid() const noexcept { return tape_ != nullptr && id_ >= 0; }

    inline const Tensor& value() const;
    inline const Shape& shape() const;
    inline std::size_t numel() const;
    inline bool requires_grad() const;
    double item() const { return value().item(); }

private:
    Tape* tape_ = nullptr;
    int id_ = -1;
};

class Tape {
public:
    Tape() { nodes_.reserve(256); }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var leaf(Tensor value) { return push(Node{std::move(value), Op::Leaf, {}, true}); }
    Var constant(Tensor value) { return push(Node{std::move(value), Op::Constant, {}, false}); }

    std::size_t size() const noexcept { return nodes_.size(); }
    const Node& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }

    /// Drops every node recorded after the first `n`. Vars pointing past `n` become dangling.
    void truncate(std::size_t n) {
        if (n < nodes_.size()) nodes_.resize(n);
    }

    void set_check_finite(bool on) noexcept { check_finite_ = on; }
    bool check_finite() const noexcept { return check_finite_; }

    Var push(Node node, bool may_create_nonfinite = true) {
        if (check_finite_ && may_create_nonfinite && !node.value.all_finite()) {
            throw NonFiniteValue(std::string("non-finite value produced by ") + op_name(node.op));
        }
        nodes_.push_back(std::move(node));
        return Var(this, static_cast<int>(nodes_.size() - 1));
    }

private:
    std::vector<Node> nodes_;
    bool check_finite_ = true;
};

inline const Tensor& Var::value() const { return tape_->node(id_).value; }
inline const Shape& Var::shape() const { return value().shape(); }
inline std::size_t Var::numel() const { return value().numel(); }
inline bool Var::requires_grad() const { return tape_->node(id_).requires_grad; }

namespace detail {

inline Tape& same_tape(const Var& a, const Var& b) {
    if (a.tape() != b.tape()) throw Error("operands recorded on different tapes");
    return *a.tape();
}

// Ops that only move or mask existing values cannot turn finite inputs into NaN/Inf.
inline bool moves_values_only(Op op) {
    switch (op) {
        case Op::Relu:
        case Op::Neg:
        case Op::ConcatRows:
        case Op::Reshape:
        case Op::Slice:
        case Op::Pad:
        case Op::Transpose:
            return true;
        default:
            return false;
    }
}

inline Var record(Tape& tape, Op op, Tensor value, std::vector<int> parents, double scalar = 0.0,
                  std::size_t offset = 0, std::size_t extent = 0) {
    bool rg = false;
    for (int p : parents) rg = rg || tape.node(p).requires_grad;
    Node n{std::move(value), op, std::move(parents), rg, scalar, offset, extent};
    return tape.push(std::move(n), !moves_values_only(op));
}

// Elementwise binary with scalar-vs-tensor broadcasting only.
template <class F>
Tensor binary(const Tensor& a, const Tensor& b, const char* what, F f) {
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    if (a.shape() == b.shape()) {
        std::vector<double> out(a.numel());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(pa[i], pb[i]);
        return Tensor(a.shape(), std::move(out));
    }
    if (b.numel() == 1) {
        std::vector<double> out(a.numel());
        const double s = pb[0];
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(pa[i], s);
        return Tensor(a.shape(), std::move(out));
    }
    if (a.numel() == 1) {
        std::vector<double> out(b.numel());
        const double s = pa[0];
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(s, pb[i]);
        return Tensor(b.shape(), std::move(out));
    }
    throw ShapeMismatch(std::string(what) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                        shape_str(b.shape()));
}

template <class F>
Tensor unary(const Tensor& a, F f) {
    const double* pa = a.data().data();
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(pa[i]);
    return Tensor(a.shape(), std::move(out));
}

}  // namespace detail

inline Var add(const Var& a, const Var& b) {
    Tape& t = detail::same_tape(a, b);
    return detail::record(t, Op::Add, detail::binary(a.value(), b.value(), "add", std::plus<>()), {a.id(), b.id()});
}

inline Var sub(const Var& a, const Var& b) {
    Tape& t = detail::same_tape(a, b);
    return detail::record(t, Op::Sub, detail::binary(a.value(), b.value(), "sub", std::minus<>()), {a.id(), b.id()});
}

inline Var mul(const Var& a, const Var& b) {
    Tape& t = detail::same_tape(a, b);
    return detail::record(t, Op::Mul, detail::binary(a.value(), b.value(), "mul", std::multiplies<>()),
                          {a.id(), b.id()});
}

inline Tensor matmul_values(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw ShapeMismatch("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out(Shape{m, n});
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* po = out.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        double* row = po + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = pa[i * k + p];
            if (av == 0.0) continue;
            const double* brow = pb + p * n;
            for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
        }
    }
    return out;
}

inline Var matmul(const Var& a, const Var& b) {
    Tape& t = detail::same_tape(a, b);
    return detail::record(t, Op::MatMul, matmul_values(a.value(), b.value()), {a.id(), b.id()});
}

/// ReLU with subgradient 0 at the kink.
inline Var relu(const Var& a) {
    return detail::record(*a.tape(), Op::Relu, detail::unary(a.value(), [](double v) { return v > 0.0 ? v : 0.0; }),
                          {a.id()});
}

inline Var sum(const Var& a) {
    const auto& d = a.value().data();
    double s = 0.0;
    for (double v : d) s += v;
    return detail::record(*a.tape(), Op::Sum, Tensor::scalar(s), {a.id()});
}

inline Var mean(const Var& a) {
    const auto& d = a.value().data();
    double s = 0.0;
    for (double v : d) s += v;
    return detail::record(*a.tape(), Op::Mean, Tensor::scalar(s / static_cast<double>(d.size())), {a.id()});
}

inline Var square(const Var& a) {
    return detail::record(*a.tape(), Op::Square, detail::unary(a.value(), [](double v) { return v * v; }), {a.id()});
}

/// Concatenates along the leading dimension; trailing dimensions must agree.
inline Var concat_rows(std::span<const Var> parts) {
    if (parts.empty()) throw ShapeMismatch("concat_rows: no inputs");
    Tape& t = *parts.front().tape();
    const Shape& first = parts.front().shape();
    if (first.empty()) throw ShapeMismatch("concat_rows: scalar input");
    Shape trailing(first.begin() + 1, first.end());
    std::size_t rows = 0;
    std::vector<double> data;
    std::vector<int> parents;
    for (const Var& p : parts) {
        if (p.tape() != &t) throw Error("operands recorded on different tapes");
        const Shape& s = p.shape();
        if (s.empty() || Shape(s.begin() + 1, s.end()) != trailing) {
            throw ShapeMismatch("concat_rows: incompatible shapes " + shape_str(first) + " and " + shape_str(s));
        }
        rows += s[0];
        data.insert(data.end(), p.value().data().begin(), p.value().data().end());
        parents.push_back(p.id());
    }
    Shape out{rows};
    out.insert(out.end(), trailing.begin(), trailing.end());
    return detail::record(t, Op::ConcatRows, Tensor(std::move(out), std::move(data)), std::move(parents));
}

inline Var concat_rows(std::initializer_list<Var> parts) {
    return concat_rows(std::span<const Var>(parts.begin(), parts.size()));
}

inline Var scale(const Var& a, double c) {
    return detail::record(*a.tape(), Op::Scale, detail::unary(a.value(), [c](double v) { return c * v; }), {a.id()},
                          c);
}

inline Var log(const Var& a) {
    return detail::record(*a.tape(), Op::Log, detail::unary(a.value(), [](double v) { return std::log(v); }),
                          {a.id()});
}

inline Var exp(const Var& a) {
    return detail::record(*a.tape(), Op::Exp, detail::unary(a.value(), [](double v) { return std::exp(v); }),
                          {a.id()});
}

inline Var neg(const Var& a) {
    return detail::record(*a.tape(), Op::Neg, detail::unary(a.value(), [](double v) { return -v; }), {a.id()});
}

inline Var reshape(const Var& a, Shape shape) {
    if (shape == a.shape()) return a;
    return detail::record(*a.tape(), Op::Reshape, a.value().reshaped(std::move(shape)), {a.id()});
}

/// Contiguous flat range [offset, offset + numel(shape)) of `a`, reshaped to `shape`.
inline Var slice(const Var& a, std::size_t offset, Shape shape) {
    const std::size_t n = shape_numel(shape);
    if (offset + n > a.numel()) {
        throw ShapeMismatch("slice: range [" + std::to_string(offset) + ", " + std::to_string(offset + n) +
                            ") exceeds " + std::to_string(a.numel()) + " elements");
    }
    const auto& src = a.value().data();
    std::vector<double> data(src.begin() + static_cast<std::ptrdiff_t>(offset),
                             src.begin() + static_cast<std::ptrdiff_t>(offset + n));
    return detail::record(*a.tape(), Op::Slice, Tensor(std::move(shape), std::move(data)), {a.id()}, 0.0, offset);
}

/// Inverse of slice: places the values of `a` at `offset` inside a zero tensor of shape `shape`.
inline Var pad(const Var& a, std::size_t offset, Shape shape) {
    const std::size_t total = shape_numel(shape);
    if (offset + a.numel() > total) throw ShapeMismatch("pad: input does not fit the target shape");
    Tensor out(std::move(shape));
    std::copy(a.value().data().begin(), a.value().data().end(),
              out.data().begin() + static_cast<std::ptrdiff_t>(offset));
    return detail::record(*a.tape(), Op::Pad, std::move(out), {a.id()}, 0.0, offset, total);
}

inline Var transpose(const Var& a) {
    const Tensor& v = a.value();
    if (v.rank() != 2) throw ShapeMismatch("transpose: expected a matrix, got " + shape_str(v.shape()));
    const std::size_t r = v.dim(0), c = v.dim(1);
    Tensor out(Shape{c, r});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = v[i * c + j];
    return detail::record(*a.tape(), Op::Transpose, std::move(out), {a.id()});
}

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator-(const Var& a) { return neg(a); }

/// Repeats a length-n vector (shape [n] or [1, n]) as the rows of a [rows, n] matrix.
inline Var tile_rows(const Var& v, std::size_t rows) {
    const std::size_t n = v.numel();
    Var row = reshape(v, Shape{1, n});
    if (rows == 1) return row;
    Var ones = v.tape()->constant(Tensor::ones(Shape{rows, 1}));
    return matmul(ones, row);
}

/// Gradients of a scalar output with respect to a list of nodes, in the order given.
struct GradientMap {
    std::vector<Tensor> values;
    std::vector<Var> nodes;  // populated only when recorded with create_graph

    const Tensor& operator[](std::size_t i) const { return values.at(i); }
    std::size_t size() const noexcept { return values.size(); }
};

namespace detail {

// Reduces a broadcast gradient back to the shape of the operand it flows into.
inline Var reduce_to(const Var& g, Shape target) {
    if (g.shape() == target) return g;
    return reshape(sum(g), std::move(target));
}

}  // namespace detail

/// Reverse-mode gradient of `output` w.r.t. `wrt`. Any node on the tape may be
/// used as a target, not only leaves; nodes the output does not depend on get
/// zero gradients. With `create_graph` the returned nodes stay on the tape and
/// can be differentiated again; otherwise the reverse pass is discarded.
inline GradientMap backward(const Var& output, std::span<const Var> wrt, bool create_graph) {
    if (!output.valid()) throw Error("backward: invalid output node");
    if (output.numel() != 1) throw NotScalar("backward: output has shape " + shape_str(output.shape()));
    Tape& tape = *output.tape();
    const std::size_t mark = tape.size();

    int lowest = output.id();
    for (const Var& w : wrt) {
        if (w.tape() != &tape) throw Error("backward: target recorded on a different tape");
        lowest = std::min(lowest, w.id());
    }

    std::vector<int> grad(static_cast<std::size_t>(output.id()) + 1, -1);
    auto accumulate = [&](int target, const Var& g) {
        auto& slot = grad[static_cast<std::size_t>(target)];
        if (slot < 0) {
            slot = g.id();
        } else {
            slot = add(Var(&tape, slot), g).id();
        }
    };

    // Gradients flowing out of Slice nodes are collected per parent and assembled with a
    // single concatenation once every child of that parent has been visited.
    struct Piece {
        std::size_t offset;
        Var grad;
    };
    std::vector<std::vector<Piece>> pieces(grad.size());
    auto assemble = [&](int target) {
        auto& list = pieces[static_cast<std::size_t>(target)];
        if (list.empty()) return;
        const Shape target_shape = tape.node(target).value.shape();
        const std::size_t total = shape_numel(target_shape);
        std::sort(list.begin(), list.end(), [](const Piece& a, const Piece& b) { return a.offset < b.offset; });
        bool disjoint = true;
        for (std::size_t k = 1; k < list.size(); ++k)
            disjoint = disjoint && list[k - 1].offset + list[k - 1].grad.numel() <= list[k].offset;
        if (!disjoint) {
            for (const Piece& p : list) accumulate(target, pad(p.grad, p.offset, target_shape));
        } else {
            std::vector<Var> parts;
            std::size_t at = 0;
            for (const Piece& p : list) {
                if (p.offset > at) parts.push_back(tape.constant(Tensor::zeros(Shape{p.offset - at})));
                parts.push_back(reshape(p.grad, Shape{p.grad.numel()}));
                at = p.offset + p.grad.numel();
            }
            if (at < total) parts.push_back(tape.constant(Tensor::zeros(Shape{total - at})));
            Var flat = parts.size() == 1 ? parts.front() : concat_rows(parts);
            accumulate(target, reshape(flat, target_shape));
        }
        list.clear();
    };

    grad[static_cast<std::size_t>(output.id())] = tape.constant(Tensor::ones(output.shape())).id();

    for (int i = output.id(); i >= lowest; --i) {
        assemble(i);
        const int gid = grad[static_cast<std::size_t>(i)];
        if (gid < 0) continue;
        // Copy what we need: recording below may reallocate the node storage.
        const Node& cur = tape.node(i);
        if (!cur.requires_grad || cur.parents.empty()) continue;
        const Op op = cur.op;
        const std::vector<int> parents = cur.parents;
        const double scalar = cur.scalar;
        const std::size_t offset = cur.offset;
        const Var g(&tape, gid);
        const Var self(&tape, i);

        auto wants = [&](int p) { return p >= lowest && tape.node(p).requires_grad; };
        auto parent = [&](std::size_t k) { return Var(&tape, parents[k]); };
        if (parents.size() == 1 && !wants(parents[0])) continue;

        switch (op) {
            case Op::Leaf:
            case Op::Constant:
                break;
            case Op::Add:
                if (wants(parents[0])) accumulate(parents[0], detail::reduce_to(g, parent(0).shape()));
                if (wants(parents[1])) accumulate(parents[1], detail::reduce_to(g, parent(1).shape()));
                break;
            case Op::Sub:
                if (wants(parents[0])) accumulate(parents[0], detail::reduce_to(g, parent(0).shape()));
                if (wants(parents[1])) accumulate(parents[1], detail::reduce_to(neg(g), parent(1).shape()));
                break;
            case Op::Mul:
                if (wants(parents[0])) accumulate(parents[0], detail::reduce_to(mul(g, parent(1)), parent(0).shape()));
                if (wants(parents[1])) accumulate(parents[1], detail::reduce_to(mul(g, parent(0)), parent(1).shape()));
                break;
            case Op::MatMul:
                if (wants(parents[0])) accumulate(parents[0], matmul(g, transpose(parent(1))));
                if (wants(parents[1])) accumulate(parents[1], matmul(transpose(parent(0)), g));
                break;
            case Op::Relu: {
                const Tensor& x = tape.node(parents[0]).value;
                Tensor mask(x.shape());
                for (std::size_t k = 0; k < x.numel(); ++k) mask[k] = x[k] > 0.0 ? 1.0 : 0.0;
                accumulate(parents[0], mul(g, tape.constant(std::move(mask))));
                break;
            }
            case Op::Sum: {
                const Shape s = parent(0).shape();
                accumulate(parents[0], mul(tape.constant(Tensor::ones(s)), g));
                break;
            }
            case Op::Mean: {
                const Shape s = parent(0).shape();
                const double n = static_cast<double>(shape_numel(s));
                accumulate(parents[0], mul(tape.constant(Tensor(s, 1.0 / n)), g));
                break;
            }
            case Op::Square:
                accumulate(parents[0], scale(mul(g, parent(0)), 2.0));
                break;
            case Op::ConcatRows: {
                const std::size_t total = g.numel();
                std::size_t at = 0;
                for (std::size_t k = 0; k < parents.size(); ++k) {
                    const Shape s = parent(k).shape();
                    const std::size_t n = shape_numel(s);
                    if (wants(parents[k])) accumulate(parents[k], slice(g, at, s));
                    at += n;
                }
                assert(at == total);
                (void)total;
                break;
            }
            case Op::Scale:
                accumulate(parents[0], scale(g, scalar));
                break;
            case Op::Log:
                accumulate(parents[0], mul(g, exp(neg(self))));
                break;
            case Op::Exp:
                accumulate(parents[0], mul(g, self));
                break;
            case Op::Neg:
                accumulate(parents[0], neg(g));
                break;
            case Op::Reshape:
                accumulate(parents[0], reshape(g, parent(0).shape()));
                break;
            case Op::Slice:
                pieces[static_cast<std::size_t>(parents[0])].push_back(Piece{offset, g});
                break;
            case Op::Pad:
                accumulate(parents[0], slice(g, offset, parent(0).shape()));
                break;
            case Op::Transpose:
                accumulate(parents[0], transpose(g));
                break;
        }
    }

    GradientMap out;
    out.values.reserve(wrt.size());
    for (const Var& w : wrt) {
        const std::size_t id = static_cast<std::size_t>(w.id());
        Var g = (id < grad.size() && grad[id] >= 0) ? Var(&tape, grad[id]) : tape.constant(Tensor::zeros(w.shape()));
        out.values.push_back(g.value());
        if (create_graph) out.nodes.push_back(g);
    }
    if (!create_graph) tape.truncate(mark);
    return out;
}

inline GradientMap backward(const Var& output, std::initializer_list<Var> wrt, bool create_graph) {
    return backward(output, std::span<const Var>(wrt.begin(), wrt.size()), create_graph);
}

/// Central-difference gradient estimate (f(p + h e_i) - f(p - h e_i)) / 2h.
template <class F>
std::vector<double> finite_diff_gradient(F&& f, std::vector<double> params, double step) {
    if (!(step > 0.0)) throw InvalidRange("finite_diff_gradient: step must be positive");
    std::vector<double> g(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double orig = params[i];
        params[i] = orig + step;
        const double fp = f(static_cast<const std::vector<double>&>(params));
        params[i] = orig - step;
        const double fm = f(static_cast<const std::vector<double>&>(params));
        params[i] = orig;
        g[i] = (fp - fm) / (2.0 * step);
    }
    return g;
}

/// max_i |a_i - b_i| / max(max_i |b_i|, floor): scale-aware error used by gradient checks.
inline double relative_error(std::span<const double> a, std::span<const double> b, double floor = 1e-8) {
    if (a.size() != b.size()) throw ShapeMismatch("relative_error: length mismatch");
    double diff = 0.0, scale_ = floor;
    for (std::size_t i = 0; i < a.size(); ++i) {
        diff = std::max(diff, std::abs(a[i] - b[i]));
        scale_ = std::max(scale_, std::abs(b[i]));
    }
    return diff / scale_;
}

}  // namespace ctxmeta
