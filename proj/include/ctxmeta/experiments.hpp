#pragma once

// Multi-seed experiment drivers. Each seed is trained from scratch and produces a
// buffered block of metric rows; blocks are concatenated in seed order.

#include <algorithm>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "ctxmeta/config.hpp"
#include "ctxmeta/csv.hpp"
#include "ctxmeta/metarl.hpp"
#include "ctxmeta/stats.hpp"
#include "ctxmeta/tasks.hpp"

namespace ctxmeta {

enum class ExperimentKind { Sinusoid, Cognitive, Pointnav, Gradcheck };

inline const char* experiment_name(ExperimentKind k) {
    switch (k) {
        case ExperimentKind::Sinusoid: return "sinusoid";
        case ExperimentKind::Cognitive: return "cognitive";
        case ExperimentKind::Pointnav: return "pointnav";
        case ExperimentKind::Gradcheck: return "gradcheck";
    }
    return "?";
}

inline ExperimentKind parse_experiment(const std::string& s) {
    if (s == "sinusoid") return ExperimentKind::Sinusoid;
    if (s == "cognitive") return ExperimentKind::Cognitive;
    if (s == "pointnav") return ExperimentKind::Pointnav;
    if (s == "gradcheck") return ExperimentKind::Gradcheck;
    throw ConfigError("unknown experiment '" + s + "'");
}

struct SinusoidSettings {
    std::vector<std::size_t> hidden{40, 40};
    std::vector<std::size_t> context_hidden{40, 40};
    std::size_t n_support = 10;
    std::size_t n_query_train = 10;
    std::size_t eval_tasks = 600;
    std::size_t eval_query = 256;
};

struct CognitiveSettings {
    std::vector<std::size_t> hidden{10, 10};
    std::vector<std::size_t> context_hidden{10, 10};
};

struct PointnavSettings {
    RlConfig rl;
    std::vector<std::size_t> hidden{64, 64};
    std::vector<std::size_t> context_hidden{32, 64};
    std::size_t eval_goals = 100;
};

struct GradcheckSettings {
    double step = 1e-5;
    double tolerance = 1e-4;
};

struct ExperimentConfig {
    ExperimentKind kind = ExperimentKind::Sinusoid;
    VariantKind variant = VariantKind::Context;
    std::vector<std::int64_t> seeds{0, 1, 2};
    AblationMode ablation = AblationMode::Full;
    bool extrapolate = false;
    InnerConfig inner;
    OuterConfig outer;
    std::size_t log_every = 1;
    SinusoidSettings sinusoid;
    CognitiveSettings cognitive;
    PointnavSettings pointnav;
    GradcheckSettings gradcheck;

    void validate() const {
        if (seeds.empty()) throw ConfigError("at least one seed is required");
        inner.validate(false);
        outer.validate();
        if (log_every < 1) throw ConfigError("log_every must be >= 1");
        if (kind == ExperimentKind::Sinusoid) {
            if (sinusoid.n_support < 1 || sinusoid.n_query_train < 1 || sinusoid.eval_query < 1) {
                throw ConfigError("sinusoid set sizes must be >= 1");
            }
            if (sinusoid.eval_tasks < 1) throw ConfigError("eval_tasks must be >= 1");
        }
        if (kind == ExperimentKind::Pointnav) {
            pointnav.rl.env.validate();
            if (pointnav.rl.rollouts_per_task < 1) throw ConfigError("rollouts must be >= 1");
            if (pointnav.eval_goals < 1) throw ConfigError("eval_goals must be >= 1");
        }
        if (kind == ExperimentKind::Gradcheck && !(gradcheck.step > 0.0)) {
            throw ConfigError("finite-difference step must be positive");
        }
    }
};

/// Built-in defaults per experiment; config files and flags override them.
inline ExperimentConfig default_config(ExperimentKind kind) {
    ExperimentConfig c;
    c.kind = kind;
    switch (kind) {
        case ExperimentKind::Sinusoid:
            c.inner.step_size = 0.01;
            c.outer.learning_rate = 0.001;
            c.outer.meta_batch_size = 25;
            c.outer.num_iterations = 15000;
            c.log_every = 100;
            break;
        case ExperimentKind::Cognitive:
            c.seeds = {0, 1, 2, 3, 4};
            c.inner.step_size = 0.1;
            c.outer.learning_rate = 0.005;
            c.outer.meta_batch_size = 7;
            c.outer.num_iterations = 100;
            break;
        case ExperimentKind::Pointnav:
            c.inner.step_size = 0.1;
            c.outer.learning_rate = 0.001;
            c.outer.meta_batch_size = 20;
            c.outer.num_iterations = 200;
            c.log_every = 10;
            break;
        case ExperimentKind::Gradcheck:
            c.seeds = {0};
            c.inner.step_size = 0.1;
            c.outer.num_iterations = 1;
            break;
    }
    c.outer.clip_norm = 10.0;
    return c;
}

/// Applies `key = value` overrides. Unknown keys are rejected.
inline void apply_overrides(ExperimentConfig& c, const KeyValueConfig& kv) {
    c.inner.step_size = kv.get_double("inner_lr", c.inner.step_size);
    c.inner.num_steps = kv.get_size("inner_steps", c.inner.num_steps);
    c.outer.learning_rate = kv.get_double("outer_lr", c.outer.learning_rate);
    c.outer.clip_norm = kv.get_double("clip_norm", c.outer.clip_norm);
    const std::string opt = kv.get_string("optimizer", c.outer.optimizer == OptimizerKind::Adam ? "adam" : "sgd");
    if (opt == "adam") {
        c.outer.optimizer = OptimizerKind::Adam;
    } else if (opt == "sgd") {
        c.outer.optimizer = OptimizerKind::Sgd;
    } else {
        throw ConfigError("optimizer must be adam or sgd");
    }
    c.outer.beta1 = kv.get_double("adam_beta1", c.outer.beta1);
    c.outer.beta2 = kv.get_double("adam_beta2", c.outer.beta2);
    c.outer.epsilon = kv.get_double("adam_eps", c.outer.epsilon);
    c.outer.meta_batch_size = kv.get_size("meta_batch_size", c.outer.meta_batch_size);
    c.outer.num_iterations = kv.get_size("iterations", c.outer.num_iterations);
    c.log_every = kv.get_size("log_every", c.log_every);

    auto& s = c.sinusoid;
    s.hidden = kv.get_sizes("sinusoid.hidden", s.hidden);
    s.context_hidden = kv.get_sizes("sinusoid.context_hidden", s.context_hidden);
    s.n_support = kv.get_size("sinusoid.n_support", s.n_support);
    s.n_query_train = kv.get_size("sinusoid.n_query_train", s.n_query_train);
    s.eval_tasks = kv.get_size("sinusoid.eval_tasks", s.eval_tasks);
    s.eval_query = kv.get_size("sinusoid.eval_query", s.eval_query);

    c.cognitive.hidden = kv.get_sizes("cognitive.hidden", c.cognitive.hidden);
    c.cognitive.context_hidden = kv.get_sizes("cognitive.context_hidden", c.cognitive.context_hidden);

    auto& p = c.pointnav;
    p.hidden = kv.get_sizes("pointnav.hidden", p.hidden);
    p.context_hidden = kv.get_sizes("pointnav.context_hidden", p.context_hidden);
    p.rl.rollouts_per_task = kv.get_size("pointnav.rollouts", p.rl.rollouts_per_task);
    p.rl.env.horizon = kv.get_size("pointnav.horizon", p.rl.env.horizon);
    p.rl.env.action_clip = kv.get_double("pointnav.action_clip", p.rl.env.action_clip);
    p.rl.env.step_scale = kv.get_double("pointnav.step_scale", p.rl.env.step_scale);
    p.rl.env.goal_bound = kv.get_double("pointnav.goal_bound", p.rl.env.goal_bound);
    p.rl.pg.gamma = kv.get_double("pointnav.gamma", p.rl.pg.gamma);
    if (kv.has("pointnav.baseline")) {
        const std::string b = kv.get_string("pointnav.baseline", "mean");
        if (b == "mean") {
            p.rl.pg.baseline = Baseline::BatchMean;
        } else if (b == "none") {
            p.rl.pg.baseline = Baseline::None;
        } else {
            throw ConfigError("pointnav.baseline must be mean or none");
        }
    }
    p.eval_goals = kv.get_size("pointnav.eval_goals", p.eval_goals);

    c.gradcheck.step = kv.get_double("gradcheck.step", c.gradcheck.step);
    c.gradcheck.tolerance = kv.get_double("gradcheck.tolerance", c.gradcheck.tolerance);
    kv.reject_unknown();
}

/// Independent generator for one purpose within one seed (initialization, training tasks, evaluation, ...).
inline std::mt19937_64 seed_stream(std::int64_t seed, std::uint32_t purpose) {
    const auto u = static_cast<std::uint64_t>(seed);
    std::seed_seq seq{static_cast<std::uint32_t>(u & 0xffffffffu), static_cast<std::uint32_t>(u >> 32), purpose};
    return std::mt19937_64(seq);
}

enum StreamPurpose : std::uint32_t { kInitStream = 1, kTrainStream = 2, kEvalStream = 3 };

namespace detail {

inline void log_point(std::vector<MetricRow>& rows, const ExperimentConfig& c, std::int64_t seed,
                      std::int64_t iteration, const std::string& metric, double value) {
    rows.push_back({experiment_name(c.kind), variant_name(c.variant), seed, iteration, metric, value});
}

inline bool should_log(const ExperimentConfig& c, std::size_t it) {
    return (it + 1) % c.log_every == 0 || it + 1 == c.outer.num_iterations;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Sinusoid regression

inline ModelSpec sinusoid_spec(const ExperimentConfig& c) {
    ModelSpec spec;
    spec.variant.kind = c.variant;
    spec.base = MlpArchitecture{1, c.sinusoid.hidden, 1};
    spec.context_hidden = c.sinusoid.context_hidden;
    spec.info_dim = 2;
    return spec;
}

struct SinusoidRun {
    MetaParams params;
    std::vector<double> train_loss;  // one per outer iteration
};

inline SinusoidRun train_sinusoid(const ExperimentConfig& c, std::int64_t seed) {
    const ModelSpec spec = sinusoid_spec(c);
    auto init_rng = seed_stream(seed, kInitStream);
    auto task_rng = seed_stream(seed, kTrainStream);
    SinusoidRun run;
    run.params = init_meta_params(spec, init_rng);
    OuterOptimizer opt(c.outer);
    EpisodeConfig ep;
    ep.n_support = c.sinusoid.n_support;
    ep.n_query = c.sinusoid.n_query_train;
    ep.ablation = c.ablation;
    std::vector<Task> batch(c.outer.meta_batch_size);
    for (std::size_t it = 0; it < c.outer.num_iterations; ++it) {
        for (auto& t : batch) t = make_sinusoid_episode(sample_sinusoid_task(task_rng), task_rng, ep);
        run.train_loss.push_back(meta_step(opt, spec, run.params, batch, c.inner));
    }
    return run;
}

/// Pre/post query MSE on held-out tasks. The task stream depends only on the seed, so
/// every variant sees the same tasks.
inline std::vector<EvalResult> evaluate_sinusoid(const ExperimentConfig& c, const MetaParams& params,
                                                 std::int64_t seed) {
    const ModelSpec spec = sinusoid_spec(c);
    auto rng = seed_stream(seed, kEvalStream);
    EpisodeConfig ep;
    ep.n_support = c.sinusoid.n_support;
    ep.n_query = c.sinusoid.eval_query;
    ep.ablation = c.ablation;
    const Range amp = c.extrapolate ? kExtrapolationAmplitude : kTrainAmplitude;
    std::vector<EvalResult> out;
    out.reserve(c.sinusoid.eval_tasks);
    for (std::size_t i = 0; i < c.sinusoid.eval_tasks; ++i) {
        const Task t = make_sinusoid_episode(sample_sinusoid_task(rng, amp), rng, ep);
        out.push_back(evaluate(spec, params, t, c.inner));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Rule-set (cognitive) task

inline ModelSpec cognitive_spec(const ExperimentConfig& c) {
    ModelSpec spec;
    spec.variant.kind = c.variant;
    spec.base = MlpArchitecture{kNumStimuli, c.cognitive.hidden, 1};
    spec.context_hidden = c.cognitive.context_hidden;
    spec.info_dim = kNumContexts;
    return spec;
}

struct CognitiveRun {
    MetaParams params;
    std::vector<double> train_loss;
    double consistent = 0.0;
    double inconsistent = 0.0;
};

/// Meta-trains on the seven table rows (all of them per step unless meta_batch_size < 7,
/// in which case a random subset is drawn), then runs both inference conditions.
inline CognitiveRun train_cognitive(const ExperimentConfig& c, std::int64_t seed) {
    const ModelSpec spec = cognitive_spec(c);
    auto init_rng = seed_stream(seed, kInitStream);
    auto task_rng = seed_stream(seed, kTrainStream);
    CognitiveRun run;
    run.params = init_meta_params(spec, init_rng);
    OuterOptimizer opt(c.outer);
    const std::vector<Task> rows = cognitive_meta_train_batches();
    std::vector<std::size_t> order(rows.size());
    for (std::size_t it = 0; it < c.outer.num_iterations; ++it) {
        std::vector<Task> batch;
        if (c.outer.meta_batch_size >= rows.size()) {
            batch = rows;
        } else {
            for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
            std::shuffle(order.begin(), order.end(), task_rng);
            for (std::size_t k = 0; k < c.outer.meta_batch_size; ++k) batch.push_back(rows[order[k]]);
        }
        run.train_loss.push_back(meta_step(opt, spec, run.params, batch, c.inner));
    }
    run.consistent = evaluate(spec, run.params, cognitive_inference_case(InferenceCondition::Consistent), c.inner).post;
    run.inconsistent =
        evaluate(spec, run.params, cognitive_inference_case(InferenceCondition::Inconsistent), c.inner).post;
    return run;
}

struct CognitiveReport {
    std::vector<double> consistent;
    std::vector<double> inconsistent;
    TTestResult pooled;
    TTestResult welch;
};

/// Consistent vs inconsistent post-adaptation loss across seeds; pooled test is the headline.
inline CognitiveReport cognitive_report(const std::vector<CognitiveRun>& runs) {
    if (runs.size() < 2) throw ConfigError("cognitive report needs at least two seeds");
    CognitiveReport r;
    for (const auto& run : runs) {
        r.consistent.push_back(run.consistent);
        r.inconsistent.push_back(run.inconsistent);
    }
    r.pooled = two_sample_t_test(r.consistent, r.inconsistent, TTestMode::Pooled);
    r.welch = two_sample_t_test(r.consistent, r.inconsistent, TTestMode::Welch);
    return r;
}

// ---------------------------------------------------------------------------
// Point-goal meta-RL

inline ModelSpec pointnav_spec(const ExperimentConfig& c) {
    return point_policy_spec(c.variant, c.pointnav.hidden, c.pointnav.context_hidden);
}

struct PointnavRun {
    MetaParams params;
    std::vector<MetaRlStats> train;
};

inline PointnavRun train_pointnav(const ExperimentConfig& c, std::int64_t seed) {
    const ModelSpec spec = pointnav_spec(c);
    auto init_rng = seed_stream(seed, kInitStream);
    auto goal_rng = seed_stream(seed, kTrainStream);
    PointnavRun run;
    run.params = init_meta_params(spec, init_rng);
    OuterOptimizer opt(c.outer);
    std::vector<PointEnv> goals(c.outer.meta_batch_size);
    for (std::size_t it = 0; it < c.outer.num_iterations; ++it) {
        for (auto& g : goals) g = sample_goal(goal_rng, c.pointnav.rl.env);
        run.train.push_back(meta_rl_step(opt, spec, run.params, goals, c.pointnav.rl, c.inner,
                                         static_cast<std::uint64_t>(seed), it));
    }
    return run;
}

/// Pre/post returns on held-out goals drawn from the seed's evaluation stream.
inline std::vector<RlTaskResult> evaluate_pointnav(const ExperimentConfig& c, const MetaParams& params,
                                                   std::int64_t seed) {
    const ModelSpec spec = pointnav_spec(c);
    auto rng = seed_stream(seed, kEvalStream);
    std::vector<RlTaskResult> out;
    for (std::size_t i = 0; i < c.pointnav.eval_goals; ++i) {
        const PointEnv env = sample_goal(rng, c.pointnav.rl.env);
        // Iteration index past training keeps evaluation rollouts off the training streams.
        const RolloutKey key{static_cast<std::uint64_t>(seed), c.outer.num_iterations + 1, i, 0};
        out.push_back(evaluate_rl(spec, params, env, c.pointnav.rl, c.inner, key));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Gradient check of the full bilevel objective on tiny networks

struct GradcheckResult {
    Conditioning conditioning = Conditioning::DirectTheta;
    std::size_t parameters = 0;
    double relative_error = 0.0;
};

/// Tiny sinusoid-shaped problem: 1-4-1 base net, 2-2-* context net, two tasks of 5+5 points.
inline ModelSpec gradcheck_spec(VariantKind kind, Conditioning cond) {
    ModelSpec spec;
    spec.variant.kind = kind;
    spec.variant.conditioning = cond;
    spec.base = MlpArchitecture{1, {4}, 1};
    spec.context_hidden = {2};
    spec.info_dim = 2;
    return spec;
}

inline GradcheckResult gradcheck_meta_loss(const ModelSpec& spec, const InnerConfig& inner, double step,
                                           std::int64_t seed) {
    auto init_rng = seed_stream(seed, kInitStream);
    auto task_rng = seed_stream(seed, kTrainStream);
    MetaParams params = init_meta_params(spec, init_rng);
    EpisodeConfig ep;
    ep.n_support = 5;
    ep.n_query = 5;
    std::vector<Task> tasks;
    for (int i = 0; i < 2; ++i) tasks.push_back(make_sinusoid_episode(sample_sinusoid_task(task_rng), task_rng, ep));

    const MetaGradient g = meta_gradient(spec, params, tasks, inner);
    std::vector<double> analytic = g.theta;
    analytic.insert(analytic.end(), g.psi.begin(), g.psi.end());

    const std::size_t nt = params.theta.size();
    std::vector<double> flat = params.theta.values();
    flat.insert(flat.end(), params.psi.values().begin(), params.psi.values().end());
    auto f = [&](const std::vector<double>& v) {
        MetaParams q = params;
        std::copy(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(nt), q.theta.values().begin());
        std::copy(v.begin() + static_cast<std::ptrdiff_t>(nt), v.end(), q.psi.values().begin());
        Tape tape;
        return meta_loss(spec, place_leaves(tape, q), tasks, inner).item();
    };
    const std::vector<double> numeric = finite_diff_gradient(f, flat, step);
    GradcheckResult r;
    r.conditioning = spec.variant.conditioning;
    r.parameters = flat.size();
    r.relative_error = relative_error(analytic, numeric);
    return r;
}

// ---------------------------------------------------------------------------

/// Runs every seed of an experiment and returns its metric rows in seed order.
inline std::vector<MetricRow> run_experiment(const ExperimentConfig& c) {
    c.validate();
    std::vector<MetricRow> rows;
    for (const std::int64_t seed : c.seeds) {
        std::vector<MetricRow> block;
        const auto n = static_cast<std::int64_t>(c.outer.num_iterations);
        switch (c.kind) {
            case ExperimentKind::Sinusoid: {
                const SinusoidRun run = train_sinusoid(c, seed);
                for (std::size_t it = 0; it < run.train_loss.size(); ++it) {
                    if (detail::should_log(c, it)) {
                        detail::log_point(block, c, seed, static_cast<std::int64_t>(it + 1), "train_loss",
                                          run.train_loss[it]);
                    }
                }
                const auto eval = evaluate_sinusoid(c, run.params, seed);
                std::vector<double> pre, post;
                for (const auto& e : eval) {
                    pre.push_back(e.pre);
                    post.push_back(e.post);
                }
                const Summary sp = summarize(pre), sq = summarize(post);
                detail::log_point(block, c, seed, n, "eval_pre_mse", sp.mean);
                detail::log_point(block, c, seed, n, "eval_post_mse", sq.mean);
                detail::log_point(block, c, seed, n, "eval_post_mse_std", sq.std);
                break;
            }
            case ExperimentKind::Cognitive: {
                const CognitiveRun run = train_cognitive(c, seed);
                for (std::size_t it = 0; it < run.train_loss.size(); ++it) {
                    if (detail::should_log(c, it)) {
                        detail::log_point(block, c, seed, static_cast<std::int64_t>(it + 1), "train_loss",
                                          run.train_loss[it]);
                    }
                }
                detail::log_point(block, c, seed, n, "consistent_loss", run.consistent);
                detail::log_point(block, c, seed, n, "inconsistent_loss", run.inconsistent);
                break;
            }
            case ExperimentKind::Pointnav: {
                const PointnavRun run = train_pointnav(c, seed);
                for (std::size_t it = 0; it < run.train.size(); ++it) {
                    if (!detail::should_log(c, it)) continue;
                    const auto i = static_cast<std::int64_t>(it + 1);
                    detail::log_point(block, c, seed, i, "train_pre_return", run.train[it].pre_return);
                    detail::log_point(block, c, seed, i, "train_post_return", run.train[it].post_return);
                }
                const auto eval = evaluate_pointnav(c, run.params, seed);
                std::vector<double> pre, post;
                for (const auto& e : eval) {
                    pre.push_back(e.pre_return);
                    post.push_back(e.post_return);
                }
                detail::log_point(block, c, seed, n, "eval_pre_return", summarize(pre).mean);
                detail::log_point(block, c, seed, n, "eval_post_return", summarize(post).mean);
                break;
            }
            case ExperimentKind::Gradcheck: {
                for (Conditioning cond : {Conditioning::DirectTheta, Conditioning::Film}) {
                    const GradcheckResult r =
                        gradcheck_meta_loss(gradcheck_spec(c.variant, cond), c.inner, c.gradcheck.step, seed);
                    const std::string tag = cond == Conditioning::DirectTheta ? "direct" : "film";
                    detail::log_point(block, c, seed, 0, "rel_error_" + tag, r.relative_error);
                    detail::log_point(block, c, seed, 0, "passed_" + tag,
                                      r.relative_error <= c.gradcheck.tolerance ? 1.0 : 0.0);
                }
                break;
            }
        }
        rows.insert(rows.end(), block.begin(), block.end());
    }
    return rows;
}

}  // namespace ctxmeta
