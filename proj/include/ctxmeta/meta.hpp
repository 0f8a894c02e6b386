#pragma once

// Bilevel meta-learning: inner-loop adaptation of the base-network parameters,
// the Base / Static / Concat / Context variants, and the outer-loop update.

#include <cmath>
#include <functional>
#include <iomanip>
#include <istream>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "ctxmeta/autodiff.hpp"
#include "ctxmeta/networks.hpp"
#include "ctxmeta/params.hpp"

namespace ctxmeta {

enum class VariantKind { Base, Static, Concat, Context };
enum class Conditioning { DirectTheta, Film };

inline const char* variant_name(VariantKind k) {
    switch (k) {
        case VariantKind::Base: return "base";
        case VariantKind::Static: return "static";
        case VariantKind::Concat: return "concat";
        case VariantKind::Context: return "context";
    }
    return "?";
}

inline VariantKind parse_variant(const std::string& s) {
    if (s == "base") return VariantKind::Base;
    if (s == "static") return VariantKind::Static;
    if (s == "concat") return VariantKind::Concat;
    if (s == "context") return VariantKind::Context;
    throw ConfigError("unknown variant '" + s + "' (expected base|static|concat|context)");
}

struct Variant {
    VariantKind kind = VariantKind::Base;
    Conditioning conditioning = Conditioning::DirectTheta;
    // Static only: the constant fed to the context network. Empty means all-ones.
    std::vector<double> static_value;

    bool has_context_net() const { return kind == VariantKind::Static || kind == VariantKind::Context; }
};

/// Architecture of one meta-learner: base network, optional context network, task-info width.
struct ModelSpec {
    Variant variant;
    MlpArchitecture base;  // input_dim is the raw input width (without task information)
    std::vector<std::size_t> context_hidden;
    std::size_t info_dim = 0;
    // Extra base-model parameters appended after the network weights (e.g. a policy log-std).
    std::vector<std::pair<std::string, std::size_t>> theta_extras;

    MlpArchitecture base_arch() const {
        MlpArchitecture a = base;
        if (variant.kind == VariantKind::Concat) a.input_dim += info_dim;
        return a;
    }

    ParamLayout base_layout() const {
        ParamLayout l = base_arch().layout();
        for (const auto& [name, n] : theta_extras) l.append(name, Shape{n});
        return l;
    }

    std::optional<MlpArchitecture> context_arch() const {
        if (!variant.has_context_net()) return std::nullopt;
        const std::size_t out = variant.conditioning == Conditioning::DirectTheta ? base_arch().parameter_count()
                                                                                 : 2 * base.hidden_total();
        return MlpArchitecture{info_dim, context_hidden, out};
    }

    /// Global base-network parameters are trained directly unless the context network generates them.
    bool has_theta() const {
        return !(variant.has_context_net() && variant.conditioning == Conditioning::DirectTheta);
    }

    Tensor static_input() const {
        if (variant.static_value.empty()) return Tensor::ones(Shape{info_dim});
        if (variant.static_value.size() != info_dim) {
            throw DimensionMismatch("static context vector length does not match task information");
        }
        return Tensor::vector(variant.static_value);
    }

    void validate() const {
        base.validate();
        if (variant.kind != VariantKind::Base && info_dim == 0) {
            throw ConfigError(std::string(variant_name(variant.kind)) + " variant needs task information");
        }
        if (variant.has_context_net() && variant.conditioning == Conditioning::DirectTheta && !theta_extras.empty()) {
            throw ConfigError("direct parameter generation does not support extra base parameters");
        }
    }
};

/// Trainable outer-loop parameters. Either part may be empty depending on the variant.
struct MetaParams {
    ParamVector theta;
    ParamVector psi;

    std::size_t trainable_count() const { return theta.size() + psi.size(); }
};

inline MetaParams init_meta_params(const ModelSpec& spec, std::mt19937_64& rng) {
    spec.validate();
    MetaParams p;
    if (spec.has_theta()) {
        p.theta = ParamVector(spec.base_layout());
        glorot_fill(spec.base_arch(), p.theta, rng);
    }
    if (auto ctx = spec.context_arch()) p.psi = init_params(*ctx, rng);
    return p;
}

/// Outer parameters placed on a tape as leaves.
struct MetaLeaves {
    Var theta;
    Var psi;
};

inline MetaLeaves place_leaves(Tape& tape, const MetaParams& p) {
    MetaLeaves l;
    if (!p.theta.empty()) l.theta = p.theta.leaf_on(tape);
    if (!p.psi.empty()) l.psi = p.psi.leaf_on(tape);
    return l;
}

/// Base-model parameterization for one task: flat base parameters (the part adapted in
/// the inner loop) plus whatever conditioning stays fixed during adaptation.
struct Parameterization {
    Var theta;
    FilmParams film;
    std::optional<Tensor> concat_info;
};

struct ExampleSet {
    Tensor x;
    Tensor y;

    std::size_t size() const { return x.rank() == 0 ? 0 : x.dim(0); }
};

struct Task {
    Tensor info;
    ExampleSet support;
    ExampleSet query;
};

/// Initialization {g_psi(c), theta} per variant.
inline Parameterization initial_params(const ModelSpec& spec, const MetaLeaves& leaves, const Tensor& info) {
    Parameterization p;
    if (spec.variant.kind != VariantKind::Base && info.numel() != spec.info_dim) {
        throw DimensionMismatch("task information has length " + std::to_string(info.numel()) + ", expected " +
                                std::to_string(spec.info_dim));
    }
    switch (spec.variant.kind) {
        case VariantKind::Base:
            p.theta = leaves.theta;
            break;
        case VariantKind::Concat:
            p.theta = leaves.theta;
            p.concat_info = info;
            break;
        case VariantKind::Static:
        case VariantKind::Context: {
            const Tensor c = spec.variant.kind == VariantKind::Static ? spec.static_input() : info;
            const MlpArchitecture ctx = *spec.context_arch();
            if (spec.variant.conditioning == Conditioning::DirectTheta) {
                p.theta = context_direct(ctx, leaves.psi, c, spec.base_arch());
            } else {
                p.theta = leaves.theta;
                p.film = context_film(ctx, leaves.psi, c, spec.base);
            }
            break;
        }
    }
    if (!p.theta.valid()) throw DimensionMismatch("missing base parameters for this variant");
    return p;
}

inline Var model_forward(const ModelSpec& spec, const Parameterization& p, const Tensor& x) {
    const MlpArchitecture arch = spec.base_arch();
    if (p.concat_info) return concat_forward(arch, p.theta, x, *p.concat_info);
    return mlp_forward(arch, p.theta, x, p.film.empty() ? nullptr : &p.film);
}

inline Var mse(const Var& prediction, const Tensor& target) {
    Var t = prediction.tape()->constant(target.reshaped(prediction.shape()));
    return mean(square(prediction - t));
}

inline Var sse(const Var& prediction, const Tensor& target) {
    Var t = prediction.tape()->constant(target.reshaped(prediction.shape()));
    return sum(square(prediction - t));
}

enum class LossReduction { Mean, Sum };

inline Var set_loss(const ModelSpec& spec, const Parameterization& p, const ExampleSet& set,
                    LossReduction reduction = LossReduction::Mean) {
    Var pred = model_forward(spec, p, set.x);
    return reduction == LossReduction::Mean ? mse(pred, set.y) : sse(pred, set.y);
}

struct InnerConfig {
    double step_size = 0.01;
    std::size_t num_steps = 1;
    // Reduction of the support loss the inner loop descends; query losses are always means.
    LossReduction support_reduction = LossReduction::Mean;

    // A zero step size is accepted so tests can check the identity case.
    void validate(bool allow_zero = true) const {
        if (step_size < 0.0 || (!allow_zero && step_size == 0.0) || !std::isfinite(step_size)) {
            throw ConfigError("inner step size must be positive");
        }
        if (num_steps < 1) throw ConfigError("inner loop needs at least one step");
    }
};

using LossFn = std::function<Var(const Parameterization&)>;

/// k full-batch gradient steps on the base parameters only; FiLM terms and psi stay fixed.
inline Parameterization inner_adapt(Parameterization init, const LossFn& loss, const InnerConfig& cfg,
                                    bool create_graph) {
    cfg.validate();
    Tape& tape = *init.theta.tape();
    Parameterization p = std::move(init);
    for (std::size_t k = 0; k < cfg.num_steps; ++k) {
        Var l = loss(p);
        const Var wrt[] = {p.theta};
        GradientMap g = backward(l, wrt, create_graph);
        if (create_graph) {
            p.theta = p.theta - scale(g.nodes[0], cfg.step_size);
        } else {
            Tensor next = p.theta.value();
            const Tensor& gv = g.values[0];
            for (std::size_t i = 0; i < next.numel(); ++i) next[i] -= cfg.step_size * gv[i];
            p.theta = tape.leaf(std::move(next));
        }
    }
    return p;
}

inline Parameterization inner_adapt(const ModelSpec& spec, Parameterization init, const ExampleSet& support,
                                    const InnerConfig& cfg, bool create_graph) {
    if (support.size() == 0) throw ConfigError("inner adaptation needs a non-empty support set");
    return inner_adapt(
        std::move(init), [&](const Parameterization& p) { return set_loss(spec, p, support, cfg.support_reduction); },
        cfg, create_graph);
}

/// Post-adaptation query loss of one task, differentiable w.r.t. the leaves.
inline Var task_meta_loss(const ModelSpec& spec, const MetaLeaves& leaves, const Task& task,
                          const InnerConfig& inner) {
    Parameterization init = initial_params(spec, leaves, task.info);
    Parameterization adapted = inner_adapt(spec, std::move(init), task.support, inner, true);
    return set_loss(spec, adapted, task.query);
}

/// Batch mean of post-adaptation query losses, accumulated in task order.
inline Var meta_loss(const ModelSpec& spec, const MetaLeaves& leaves, std::span<const Task> tasks,
                     const InnerConfig& inner) {
    if (tasks.empty()) throw ConfigError("meta batch is empty");
    Var total = task_meta_loss(spec, leaves, tasks[0], inner);
    for (std::size_t i = 1; i < tasks.size(); ++i) total = total + task_meta_loss(spec, leaves, tasks[i], inner);
    return scale(total, 1.0 / static_cast<double>(tasks.size()));
}

struct MetaGradient {
    std::vector<double> theta;
    std::vector<double> psi;
    double loss = 0.0;
};

using TaskObjective = std::function<Var(Tape&, const MetaLeaves&, std::size_t task_index)>;

/// Mean gradient of per-task objectives, one tape per task, reduced in ascending task order.
inline MetaGradient mean_task_gradient(const MetaParams& params, std::size_t num_tasks, const TaskObjective& objective) {
    if (num_tasks == 0) throw ConfigError("meta batch is empty");
    MetaGradient out;
    out.theta.assign(params.theta.size(), 0.0);
    out.psi.assign(params.psi.size(), 0.0);
    const double w = 1.0 / static_cast<double>(num_tasks);
    for (std::size_t i = 0; i < num_tasks; ++i) {
        Tape tape;
        MetaLeaves leaves = place_leaves(tape, params);
        Var l = objective(tape, leaves, i);
        std::vector<Var> wrt;
        if (leaves.theta.valid()) wrt.push_back(leaves.theta);
        if (leaves.psi.valid()) wrt.push_back(leaves.psi);
        GradientMap g = backward(l, wrt, false);
        std::size_t k = 0;
        if (leaves.theta.valid()) {
            const auto& gv = g.values[k++].data();
            for (std::size_t j = 0; j < gv.size(); ++j) out.theta[j] += w * gv[j];
        }
        if (leaves.psi.valid()) {
            const auto& gv = g.values[k++].data();
            for (std::size_t j = 0; j < gv.size(); ++j) out.psi[j] += w * gv[j];
        }
        out.loss += w * l.item();
    }
    return out;
}

inline MetaGradient meta_gradient(const ModelSpec& spec, const MetaParams& params, std::span<const Task> tasks,
                                  const InnerConfig& inner) {
    return mean_task_gradient(params, tasks.size(), [&](Tape&, const MetaLeaves& leaves, std::size_t i) {
        return task_meta_loss(spec, leaves, tasks[i], inner);
    });
}

/// Rescales all gradient blocks jointly so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
inline double clip_by_global_norm(std::span<std::vector<double>* const> grads, double max_norm) {
    if (!(max_norm > 0.0)) throw ConfigError("clip norm must be positive");
    double sq = 0.0;
    for (const auto* g : grads)
        for (double v : *g) sq += v * v;
    const double norm = std::sqrt(sq);
    if (norm > max_norm) {
        const double s = max_norm / norm;
        for (auto* g : grads)
            for (double& v : *g) v *= s;
    }
    return norm;
}

enum class OptimizerKind { Adam, Sgd };

struct OuterConfig {
    double learning_rate = 0.001;
    double clip_norm = 10.0;
    OptimizerKind optimizer = OptimizerKind::Adam;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::size_t meta_batch_size = 25;
    std::size_t num_iterations = 15000;

    void validate() const {
        if (!(learning_rate > 0.0)) throw ConfigError("outer learning rate must be positive");
        if (!(clip_norm > 0.0)) throw ConfigError("clip norm must be positive");
        if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("Adam betas must lie in [0, 1)");
        if (!(epsilon > 0.0)) throw ConfigError("Adam epsilon must be positive");
        if (meta_batch_size < 1) throw ConfigError("meta batch size must be >= 1");
    }
};

/// Adam or plain SGD over a fixed list of parameter blocks.
class OuterOptimizer {
public:
    explicit OuterOptimizer(OuterConfig cfg = {}) : cfg_(cfg) {}

    const OuterConfig& config() const noexcept { return cfg_; }
    std::size_t steps() const noexcept { return t_; }

    void step(std::span<std::vector<double>* const> params, std::span<const std::vector<double>* const> grads) {
        if (params.size() != grads.size()) throw DimensionMismatch("optimizer: parameter/gradient block count");
        if (m_.empty()) {
            for (const auto* p : params) {
                m_.emplace_back(p->size(), 0.0);
                v_.emplace_back(p->size(), 0.0);
            }
        }
        if (m_.size() != params.size()) throw DimensionMismatch("optimizer: parameter blocks changed");
        ++t_;
        const double lr = cfg_.learning_rate;
        if (cfg_.optimizer == OptimizerKind::Sgd) {
            for (std::size_t b = 0; b < params.size(); ++b) {
                auto& p = *params[b];
                const auto& g = *grads[b];
                for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * g[i];
            }
            return;
        }
        const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (std::size_t b = 0; b < params.size(); ++b) {
            auto& p = *params[b];
            const auto& g = *grads[b];
            auto& m = m_[b];
            auto& v = v_[b];
            if (p.size() != g.size() || p.size() != m.size()) throw DimensionMismatch("optimizer: block size changed");
            for (std::size_t i = 0; i < p.size(); ++i) {
                m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
                v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
                const double mhat = m[i] / c1;
                const double vhat = v[i] / c2;
                p[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.epsilon);
            }
        }
    }

    // Plain-text sidecar: "step <t>", then "block <n>" followed by n lines "<m> <v>".
    void save(std::ostream& os) const {
        os << "ctxmeta-optimizer 1\n";
        os << "kind " << (cfg_.optimizer == OptimizerKind::Adam ? "adam" : "sgd") << '\n';
        os << "step " << t_ << '\n';
        os << std::setprecision(17);
        for (std::size_t b = 0; b < m_.size(); ++b) {
            os << "block " << m_[b].size() << '\n';
            for (std::size_t i = 0; i < m_[b].size(); ++i) os << m_[b][i] << ' ' << v_[b][i] << '\n';
        }
    }

    void load(std::istream& is) {
        std::string tag, kind;
        int version = 0;
        if (!(is >> tag >> version) || tag != "ctxmeta-optimizer" || version != 1) throw IoError("bad optimizer header");
        if (!(is >> tag >> kind) || tag != "kind") throw IoError("bad optimizer kind line");
        if (!(is >> tag >> t_) || tag != "step") throw IoError("bad optimizer step line");
        m_.clear();
        v_.clear();
        std::size_t n = 0;
        while (is >> tag) {
            if (tag != "block" || !(is >> n)) throw IoError("bad optimizer block line");
            std::vector<double> m(n), v(n);
            for (std::size_t i = 0; i < n; ++i)
                if (!(is >> m[i] >> v[i])) throw IoError("truncated optimizer block");
            m_.push_back(std::move(m));
            v_.push_back(std::move(v));
        }
    }

private:
    OuterConfig cfg_;
    std::size_t t_ = 0;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
};

namespace detail {

inline void require_finite(const std::vector<double>& v, const char* what) {
    for (double x : v)
        if (!std::isfinite(x)) throw NonFiniteValue(std::string("non-finite ") + what);
}

}  // namespace detail

/// Clips a meta-gradient and applies one optimizer step to (theta, psi).
inline void apply_meta_gradient(OuterOptimizer& opt, MetaParams& params, MetaGradient& grad) {
    detail::require_finite(grad.theta, "meta-gradient");
    detail::require_finite(grad.psi, "meta-gradient");
    std::vector<std::vector<double>*> gs;
    std::vector<std::vector<double>*> ps;
    if (!params.theta.empty()) {
        gs.push_back(&grad.theta);
        ps.push_back(&params.theta.values());
    }
    if (!params.psi.empty()) {
        gs.push_back(&grad.psi);
        ps.push_back(&params.psi.values());
    }
    clip_by_global_norm(gs, opt.config().clip_norm);
    std::vector<const std::vector<double>*> cgs(gs.begin(), gs.end());
    opt.step(ps, cgs);
}

/// One outer step; returns the pre-update meta-loss.
inline double meta_step(OuterOptimizer& opt, const ModelSpec& spec, MetaParams& params, std::span<const Task> tasks,
                        const InnerConfig& inner) {
    MetaGradient g = meta_gradient(spec, params, tasks, inner);
    apply_meta_gradient(opt, params, g);
    return g.loss;
}

struct EvalResult {
    double pre = 0.0;
    double post = 0.0;
};

/// Query loss before and after inner adaptation on the support set.
inline EvalResult evaluate(const ModelSpec& spec, const MetaParams& params, const Task& task, const InnerConfig& inner) {
    Tape tape;
    MetaLeaves leaves = place_leaves(tape, params);
    Parameterization init = initial_params(spec, leaves, task.info);
    EvalResult r;
    r.pre = set_loss(spec, init, task.query).item();
    Parameterization adapted = inner_adapt(spec, std::move(init), task.support, inner, false);
    r.post = set_loss(spec, adapted, task.query).item();
    return r;
}

inline void save_checkpoint(const std::string& prefix, const MetaParams& params, const OuterOptimizer& opt) {
    if (!params.theta.empty()) save_params(prefix + ".theta.bin", params.theta);
    if (!params.psi.empty()) save_params(prefix + ".psi.bin", params.psi);
    std::ofstream os(prefix + ".optimizer.txt");
    if (!os) throw IoError("cannot write optimizer state for " + prefix);
    opt.save(os);
}

}  // namespace ctxmeta
