#pragma once

// Meta-policy search on a 2-D point-goal environment: Gaussian MLP policy, REINFORCE
// with reward-to-go, and meta-gradients through one or more inner policy-gradient steps.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ctxmeta/meta.hpp"

namespace ctxmeta {

using Vec2 = std::array<double, 2>;

struct PointEnvConfig {
    std::size_t horizon = 20;
    double action_clip = 1.0;
    double step_scale = 0.1;
    double goal_bound = 1.0;

    void validate() const {
        if (horizon < 1) throw ConfigError("horizon must be >= 1");
        if (!(action_clip > 0.0)) throw ConfigError("action clip must be positive");
        if (!(step_scale > 0.0)) throw ConfigError("step scale must be positive");
        if (!(goal_bound > 0.0)) throw ConfigError("goal bound must be positive");
    }
};

struct PointEnv {
    Vec2 goal{0.0, 0.0};
    PointEnvConfig config;

    void validate() const {
        config.validate();
        for (double g : goal) {
            if (!std::isfinite(g) || std::abs(g) > config.goal_bound) {
                throw InvalidRange("goal outside [-" + std::to_string(config.goal_bound) + ", " +
                                   std::to_string(config.goal_bound) + "]^2");
            }
        }
    }

    Tensor info() const { return Tensor::vector({goal[0], goal[1]}); }

    /// Lower bound on any undiscounted return: every state stays within reach of the origin.
    double min_return() const {
        const double reach = static_cast<double>(config.horizon) * config.step_scale * config.action_clip;
        const double worst = std::numbers::sqrt2 * (reach + config.goal_bound);
        return -static_cast<double>(config.horizon) * worst;
    }
};

struct StepResult {
    Vec2 state;
    double reward = 0.0;
};

inline StepResult env_step(const Vec2& state, const Vec2& action, const PointEnv& env) {
    StepResult r;
    for (int j = 0; j < 2; ++j) {
        if (!std::isfinite(state[j]) || !std::isfinite(action[j])) throw NonFiniteValue("non-finite state or action");
        const double a = std::clamp(action[j], -env.config.action_clip, env.config.action_clip);
        r.state[j] = state[j] + env.config.step_scale * a;
    }
    r.reward = -std::hypot(r.state[0] - env.goal[0], r.state[1] - env.goal[1]);
    return r;
}

inline double discounted_return(std::span<const double> rewards, double gamma) {
    if (!(gamma >= 0.0 && gamma < 1.0)) throw InvalidRange("discount must lie in [0, 1)");
    double g = 0.0;
    for (std::size_t k = rewards.size(); k-- > 0;) g = rewards[k] + gamma * g;
    return g;
}

inline PointEnv sample_goal(std::mt19937_64& rng, const PointEnvConfig& cfg = {}) {
    std::uniform_real_distribution<double> u(-cfg.goal_bound, cfg.goal_bound);
    PointEnv env;
    env.config = cfg;
    env.goal[0] = u(rng);
    env.goal[1] = u(rng);
    return env;
}

/// Gaussian policy: mean network state -> action mean plus a learned state-independent log std.
inline ModelSpec point_policy_spec(VariantKind kind, std::vector<std::size_t> hidden = {64, 64},
                                   std::vector<std::size_t> context_hidden = {32, 64}) {
    ModelSpec spec;
    spec.variant.kind = kind;
    spec.variant.conditioning = Conditioning::Film;
    spec.base = MlpArchitecture{2, std::move(hidden), 2};
    spec.context_hidden = std::move(context_hidden);
    spec.info_dim = 2;
    spec.theta_extras = {{"log_std", 2}};
    return spec;
}

/// Independent stream for one rollout, keyed by (seed, iteration, task, phase, rollout).
inline std::mt19937_64 rollout_rng(std::uint64_t seed, std::uint64_t iteration, std::uint64_t task,
                                   std::uint64_t phase, std::uint64_t rollout) {
    auto lo = [](std::uint64_t v) { return static_cast<std::uint32_t>(v & 0xffffffffu); };
    auto hi = [](std::uint64_t v) { return static_cast<std::uint32_t>(v >> 32); };
    std::seed_seq seq{lo(seed), hi(seed), lo(iteration), hi(iteration), lo(task), hi(task),
                      lo(phase), hi(phase), lo(rollout), hi(rollout)};
    return std::mt19937_64(seq);
}

struct RolloutKey {
    std::uint64_t seed = 0;
    std::uint64_t iteration = 0;
    std::uint64_t task = 0;
    std::uint64_t phase = 0;
};

/// R rollouts of length T stored time-major: row t*R + r of states/actions is step t of rollout r.
struct TrajectoryBatch {
    std::size_t rollouts = 0;
    std::size_t steps = 0;
    Tensor states;   // [T*R, 2], the state each action was taken in
    Tensor actions;  // [T*R, 2], unclipped samples
    Tensor rewards;  // [T*R]

    double rollout_return(std::size_t r) const {
        double total = 0.0;
        for (std::size_t t = 0; t < steps; ++t) total += rewards[t * rollouts + r];
        return total;
    }

    double mean_return() const {
        double total = 0.0;
        for (std::size_t r = 0; r < rollouts; ++r) total += rollout_return(r);
        return total / static_cast<double>(rollouts);
    }
};

namespace detail {

inline Var policy_log_std(const ModelSpec& spec, const Var& theta) {
    return slice(theta, spec.base_arch().parameter_count(), Shape{2});
}

/// Copy of a parameterization as constants on another tape, for value-only forward passes.
inline Parameterization frozen_copy(Tape& tape, const Parameterization& p) {
    Parameterization q;
    q.theta = tape.constant(p.theta.value());
    for (const Var& s : p.film.scale) q.film.scale.push_back(tape.constant(s.value()));
    for (const Var& s : p.film.shift) q.film.shift.push_back(tape.constant(s.value()));
    q.concat_info = p.concat_info;
    return q;
}

}  // namespace detail

/// Samples R rollouts from s0 = (0,0). Only values are read from `policy`; nothing is recorded.
inline TrajectoryBatch rollout(const ModelSpec& spec, const Parameterization& policy, const PointEnv& env,
                               std::size_t num_rollouts, const RolloutKey& key) {
    env.validate();
    if (num_rollouts < 1) throw ConfigError("need at least one rollout");
    const std::size_t T = env.config.horizon, R = num_rollouts;
    TrajectoryBatch b;
    b.rollouts = R;
    b.steps = T;
    b.states = Tensor(Shape{T * R, 2});
    b.actions = Tensor(Shape{T * R, 2});
    b.rewards = Tensor(Shape{T * R});

    Tape tape;
    Parameterization q = detail::frozen_copy(tape, policy);
    const Tensor log_std = detail::policy_log_std(spec, q.theta).value();
    const double sd[2] = {std::exp(log_std[0]), std::exp(log_std[1])};
    if (!std::isfinite(sd[0]) || !std::isfinite(sd[1])) throw NonFiniteValue("policy std is not finite");
    const std::size_t mark = tape.size();

    std::vector<std::mt19937_64> rngs;
    rngs.reserve(R);
    for (std::size_t r = 0; r < R; ++r) rngs.push_back(rollout_rng(key.seed, key.iteration, key.task, key.phase, r));
    std::vector<std::normal_distribution<double>> normal(R);

    Tensor s(Shape{R, 2});
    for (std::size_t t = 0; t < T; ++t) {
        const Tensor mu = model_forward(spec, q, s).value();
        tape.truncate(mark);
        for (std::size_t r = 0; r < R; ++r) {
            const std::size_t row = t * R + r;
            Vec2 state{s.at(r, 0), s.at(r, 1)};
            Vec2 action;
            for (int j = 0; j < 2; ++j) action[j] = mu.at(r, j) + sd[j] * normal[r](rngs[r]);
            const StepResult next = env_step(state, action, env);
            for (int j = 0; j < 2; ++j) {
                b.states.at(row, j) = state[j];
                b.actions.at(row, j) = action[j];
                s.at(r, j) = next.state[j];
            }
            b.rewards[row] = next.reward;
        }
    }
    const double floor = env.min_return();
    for (std::size_t r = 0; r < R; ++r) {
        const double g = b.rollout_return(r);
        if (!std::isfinite(g)) throw NonFiniteValue("non-finite rollout return");
        if (g > 0.0 || g < floor) throw Error("rollout return outside the reachable range");
    }
    return b;
}

/// log pi(a|s) for every recorded step, as a [T*R, 1] node on the tape of `policy`.
inline Var log_densities(const ModelSpec& spec, const Parameterization& policy, const TrajectoryBatch& batch) {
    Tape& tape = *policy.theta.tape();
    const std::size_t n = batch.states.dim(0);
    Var mu = model_forward(spec, policy, batch.states);
    Var log_std = detail::policy_log_std(spec, policy.theta);
    Var z = (tape.constant(batch.actions) - mu) * tile_rows(exp(neg(log_std)), n);
    Var quad = matmul(square(z), tape.constant(Tensor::ones(Shape{2, 1})));
    const double norm = std::log(2.0 * std::numbers::pi);
    return scale(quad, -0.5) - sum(log_std) - tape.constant(Tensor::scalar(norm));
}

enum class Baseline { BatchMean, None };

struct PgConfig {
    double gamma = 0.99;
    Baseline baseline = Baseline::BatchMean;
};

/// Advantages G_t - b_t per row, with b_t the mean reward-to-go across rollouts at step t.
inline Tensor advantages(const TrajectoryBatch& batch, const PgConfig& cfg) {
    if (!(cfg.gamma >= 0.0 && cfg.gamma < 1.0)) throw InvalidRange("discount must lie in [0, 1)");
    const std::size_t T = batch.steps, R = batch.rollouts;
    Tensor adv(Shape{T * R, 1});
    std::vector<double> g(R, 0.0);
    for (std::size_t t = T; t-- > 0;) {
        double mean_g = 0.0;
        for (std::size_t r = 0; r < R; ++r) {
            g[r] = batch.rewards[t * R + r] + cfg.gamma * g[r];
            mean_g += g[r];
        }
        mean_g /= static_cast<double>(R);
        const double b = cfg.baseline == Baseline::BatchMean ? mean_g : 0.0;
        for (std::size_t r = 0; r < R; ++r) adv[t * R + r] = g[r] - b;
    }
    return adv;
}

/// -mean_r sum_t log pi(a_t|s_t) (G_t - b_t); its gradient is the REINFORCE estimate.
inline Var pg_surrogate(const ModelSpec& spec, const Parameterization& policy, const TrajectoryBatch& batch,
                        const PgConfig& cfg = {}) {
    if (batch.rollouts < 1 || batch.steps < 1) throw ConfigError("surrogate needs at least one trajectory");
    Var logp = log_densities(spec, policy, batch);
    Var weighted = logp * policy.theta.tape()->constant(advantages(batch, cfg));
    return scale(sum(weighted), -1.0 / static_cast<double>(batch.rollouts));
}

struct RlConfig {
    PointEnvConfig env;
    PgConfig pg;
    std::size_t rollouts_per_task = 4;
};

struct RlTaskResult {
    double pre_return = 0.0;
    double post_return = 0.0;
};

namespace detail {

/// Pre-adaptation rollouts, k inner PG steps, post-adaptation rollouts; returns the post surrogate.
inline Var adapt_and_roll(const ModelSpec& spec, Parameterization init, const PointEnv& env, const RlConfig& cfg,
                          const InnerConfig& inner, RolloutKey key, bool create_graph, RlTaskResult& out) {
    std::size_t phase = 0;
    bool first = true;
    LossFn loss = [&](const Parameterization& p) {
        key.phase = phase++;
        TrajectoryBatch b = rollout(spec, p, env, cfg.rollouts_per_task, key);
        if (first) {
            out.pre_return = b.mean_return();
            first = false;
        }
        return pg_surrogate(spec, p, b, cfg.pg);
    };
    Parameterization adapted = inner_adapt(std::move(init), loss, inner, create_graph);
    key.phase = phase;
    TrajectoryBatch post = rollout(spec, adapted, env, cfg.rollouts_per_task, key);
    out.post_return = post.mean_return();
    return pg_surrogate(spec, adapted, post, cfg.pg);
}

}  // namespace detail

struct MetaRlStats {
    double pre_return = 0.0;
    double post_return = 0.0;
    double loss = 0.0;
};

/// One outer update over a batch of goals. Pre/post are mean undiscounted returns over the batch.
inline MetaRlStats meta_rl_step(OuterOptimizer& opt, const ModelSpec& spec, MetaParams& params,
                                std::span<const PointEnv> goals, const RlConfig& cfg, const InnerConfig& inner,
                                std::uint64_t seed, std::uint64_t iteration) {
    std::vector<RlTaskResult> results(goals.size());
    MetaGradient g = mean_task_gradient(params, goals.size(), [&](Tape&, const MetaLeaves& leaves, std::size_t i) {
        Parameterization init = initial_params(spec, leaves, goals[i].info());
        return detail::adapt_and_roll(spec, std::move(init), goals[i], cfg, inner, {seed, iteration, i, 0}, true,
                                      results[i]);
    });
    apply_meta_gradient(opt, params, g);
    MetaRlStats s;
    s.loss = g.loss;
    for (const auto& r : results) {
        s.pre_return += r.pre_return;
        s.post_return += r.post_return;
    }
    s.pre_return /= static_cast<double>(goals.size());
    s.post_return /= static_cast<double>(goals.size());
    return s;
}

/// Mean undiscounted return before and after inner adaptation on one goal.
inline RlTaskResult evaluate_rl(const ModelSpec& spec, const MetaParams& params, const PointEnv& env,
                                const RlConfig& cfg, const InnerConfig& inner, const RolloutKey& key) {
    Tape tape;
    MetaLeaves leaves = place_leaves(tape, params);
    RlTaskResult r;
    detail::adapt_and_roll(spec, initial_params(spec, leaves, env.info()), env, cfg, inner, key, false, r);
    return r;
}

}  // namespace ctxmeta
