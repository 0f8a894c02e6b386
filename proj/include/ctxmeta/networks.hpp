#pragma once

// Dense ReLU networks over a flat parameter node, plus the two context-network
// parameterizations: direct weight generation and FiLM modulation.

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "ctxmeta/autodiff.hpp"
#include "ctxmeta/params.hpp"

namespace ctxmeta {

struct MlpArchitecture {
    std::size_t input_dim = 1;
    std::vector<std::size_t> hidden_dims;
    std::size_t output_dim = 1;

    void validate() const {
        if (input_dim < 1 || output_dim < 1) throw DimensionMismatch("network dimensions must be >= 1");
        for (auto h : hidden_dims)
            if (h < 1) throw DimensionMismatch("hidden widths must be >= 1");
    }

    std::size_t num_layers() const { return hidden_dims.size() + 1; }
    std::size_t fan_in(std::size_t layer) const { return layer == 0 ? input_dim : hidden_dims[layer - 1]; }
    std::size_t fan_out(std::size_t layer) const {
        return layer == hidden_dims.size() ? output_dim : hidden_dims[layer];
    }

    std::size_t hidden_total() const {
        std::size_t n = 0;
        for (auto h : hidden_dims) n += h;
        return n;
    }

    ParamLayout layout() const {
        validate();
        ParamLayout l;
        for (std::size_t i = 0; i < num_layers(); ++i) {
            l.append("layer" + std::to_string(i) + ".weight", Shape{fan_in(i), fan_out(i)});
            l.append("layer" + std::to_string(i) + ".bias", Shape{fan_out(i)});
        }
        return l;
    }

    std::size_t parameter_count() const { return layout().total(); }

    friend bool operator==(const MlpArchitecture&, const MlpArchitecture&) = default;
};

/// Glorot-uniform weights, zero biases. Writes into the entries of `layout` named `prefix`layerN.*.
inline void glorot_fill(const MlpArchitecture& arch, ParamVector& params, std::mt19937_64& rng,
                        const std::string& prefix = "") {
    for (std::size_t i = 0; i < arch.num_layers(); ++i) {
        const double bound = std::sqrt(6.0 / static_cast<double>(arch.fan_in(i) + arch.fan_out(i)));
        std::uniform_real_distribution<double> dist(-bound, bound);
        for (double& w : params.view(prefix + "layer" + std::to_string(i) + ".weight")) w = dist(rng);
        for (double& b : params.view(prefix + "layer" + std::to_string(i) + ".bias")) b = 0.0;
    }
}

inline ParamVector init_params(const MlpArchitecture& arch, std::mt19937_64& rng) {
    ParamVector p(arch.layout());
    glorot_fill(arch, p, rng);
    return p;
}

/// Per-hidden-layer modulation h' = scale * h + shift.
struct FilmParams {
    std::vector<Var> scale;
    std::vector<Var> shift;

    bool empty() const noexcept { return scale.empty(); }
};

namespace detail {

inline Tensor as_rows(const Tensor& x, std::size_t width) {
    if (x.rank() == 2 && x.dim(1) == width) return x;
    if (x.rank() == 1 && x.numel() == width) return x.reshaped(Shape{1, width});
    throw ShapeMismatch("network input " + shape_str(x.shape()) + " does not have width " + std::to_string(width));
}

}  // namespace detail

/// affine -> [FiLM] -> relu for each hidden layer, affine output. `params` is a flat node whose
/// leading arch.parameter_count() entries follow arch.layout(); x is [n, input_dim] (or one row).
inline Var mlp_forward(const MlpArchitecture& arch, const Var& params, const Tensor& x,
                       const FilmParams* film = nullptr) {
    arch.validate();
    if (!params.valid()) throw DimensionMismatch("network parameters are missing");
    if (params.numel() < arch.parameter_count()) {
        throw ShapeMismatch("parameter node has " + std::to_string(params.numel()) + " entries, network needs " +
                            std::to_string(arch.parameter_count()));
    }
    if (film && !film->empty() && (film->scale.size() != arch.hidden_dims.size() ||
                                   film->shift.size() != arch.hidden_dims.size())) {
        throw ShapeMismatch("FiLM parameters do not match the number of hidden layers");
    }
    Tape& tape = *params.tape();
    const Tensor rows = detail::as_rows(x, arch.input_dim);
    const std::size_t n = rows.dim(0);
    Var h = tape.constant(rows);
    std::size_t offset = 0;
    for (std::size_t i = 0; i < arch.num_layers(); ++i) {
        const std::size_t in = arch.fan_in(i), out = arch.fan_out(i);
        Var w = slice(params, offset, Shape{in, out});
        offset += in * out;
        Var b = slice(params, offset, Shape{out});
        offset += out;
        h = matmul(h, w) + tile_rows(b, n);
        if (i + 1 < arch.num_layers()) {
            if (film && !film->empty()) {
                if (film->scale[i].numel() != out || film->shift[i].numel() != out) {
                    throw ShapeMismatch("FiLM width mismatch at hidden layer " + std::to_string(i));
                }
                h = h * tile_rows(film->scale[i], n) + tile_rows(film->shift[i], n);
            }
            h = relu(h);
        }
    }
    return h;
}

/// Conditioned forward pass with FiLM applied to each hidden pre-activation.
inline Var conditioned_forward(const MlpArchitecture& arch, const Var& theta, const FilmParams& film,
                               const Tensor& x) {
    return mlp_forward(arch, theta, x, &film);
}

/// Appends the task information to every input row: [x; c].
inline Tensor concat_inputs(const Tensor& x, const Tensor& c, std::size_t x_dim) {
    const Tensor rows = detail::as_rows(x, x_dim);
    const std::size_t n = rows.dim(0), dc = c.numel();
    Tensor out(Shape{n, x_dim + dc});
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t j = 0; j < x_dim; ++j) out.at(r, j) = rows.at(r, j);
        for (std::size_t j = 0; j < dc; ++j) out.at(r, x_dim + j) = c[j];
    }
    return out;
}

inline Var concat_forward(const MlpArchitecture& arch, const Var& theta, const Tensor& x, const Tensor& c) {
    if (arch.input_dim <= c.numel()) {
        throw ShapeMismatch("concat network input width " + std::to_string(arch.input_dim) +
                            " cannot hold task information of length " + std::to_string(c.numel()));
    }
    return mlp_forward(arch, theta, concat_inputs(x, c, arch.input_dim - c.numel()), nullptr);
}

/// Context network emitting the full base-network parameter vector: theta = g_psi(c).
inline Var context_direct(const MlpArchitecture& context_arch, const Var& psi, const Tensor& c,
                          const MlpArchitecture& base_arch) {
    const std::size_t p = base_arch.parameter_count();
    if (context_arch.output_dim != p) {
        throw DimensionMismatch("context network emits " + std::to_string(context_arch.output_dim) +
                                " values, base network has " + std::to_string(p) + " parameters");
    }
    if (context_arch.input_dim != c.numel()) {
        throw DimensionMismatch("task information length " + std::to_string(c.numel()) +
                                " does not match context network input " + std::to_string(context_arch.input_dim));
    }
    return reshape(mlp_forward(context_arch, psi, c), Shape{p});
}

/// Context network emitting (scale_1, shift_1, scale_2, shift_2, ...). Scale is 1 + raw output so
/// a zero context network yields identity modulation.
inline FilmParams context_film(const MlpArchitecture& context_arch, const Var& psi, const Tensor& c,
                               const MlpArchitecture& base_arch) {
    const std::size_t need = 2 * base_arch.hidden_total();
    if (context_arch.output_dim != need) {
        throw DimensionMismatch("FiLM context network emits " + std::to_string(context_arch.output_dim) +
                                " values, conditioning needs " + std::to_string(need));
    }
    if (context_arch.input_dim != c.numel()) {
        throw DimensionMismatch("task information length " + std::to_string(c.numel()) +
                                " does not match context network input " + std::to_string(context_arch.input_dim));
    }
    Tape& tape = *psi.tape();
    Var raw = reshape(mlp_forward(context_arch, psi, c), Shape{need});
    Var one = tape.constant(Tensor::scalar(1.0));
    FilmParams film;
    std::size_t at = 0;
    for (std::size_t width : base_arch.hidden_dims) {
        film.scale.push_back(slice(raw, at, Shape{width}) + one);
        at += width;
        film.shift.push_back(slice(raw, at, Shape{width}));
        at += width;
    }
    return film;
}

}  // namespace ctxmeta
