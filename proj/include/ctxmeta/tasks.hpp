#pragma once

// Task distributions: sinusoid regression (with task-information ablation and
// amplitude extrapolation) and the three-context stimulus/response rule-set task.

#include <array>
#include <numbers>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "ctxmeta/meta.hpp"

namespace ctxmeta {

struct Range {
    double lo = 0.0;
    double hi = 0.0;
};

inline constexpr Range kTrainAmplitude{0.1, 5.0};
inline constexpr Range kExtrapolationAmplitude{5.0, 10.0};
inline constexpr Range kPhaseRange{0.0, std::numbers::pi};
inline constexpr Range kInputRange{-5.0, 5.0};

struct SinusoidTask {
    double amplitude = 1.0;
    double phase = 0.0;
};

enum class AblationMode { Full, AmplitudeOnly, PhaseOnly };

inline AblationMode parse_ablation(const std::string& s) {
    if (s == "full") return AblationMode::Full;
    if (s == "amp") return AblationMode::AmplitudeOnly;
    if (s == "phase") return AblationMode::PhaseOnly;
    throw ConfigError("unknown ablation '" + s + "' (expected full|amp|phase)");
}

inline const char* ablation_name(AblationMode m) {
    switch (m) {
        case AblationMode::Full: return "full";
        case AblationMode::AmplitudeOnly: return "amp";
        case AblationMode::PhaseOnly: return "phase";
    }
    return "?";
}

namespace detail {

inline double draw(std::mt19937_64& rng, Range r) {
    if (r.lo == r.hi) return r.lo;
    return std::uniform_real_distribution<double>(r.lo, r.hi)(rng);
}

}  // namespace detail

inline SinusoidTask sample_sinusoid_task(std::mt19937_64& rng, Range amplitude = kTrainAmplitude,
                                         Range phase = kPhaseRange) {
    if (!(amplitude.lo <= amplitude.hi) || amplitude.lo < 0.1 || amplitude.hi > 10.0) {
        throw InvalidRange("amplitude range must satisfy 0.1 <= lo <= hi <= 10");
    }
    if (!(phase.lo <= phase.hi) || phase.lo < 0.0 || phase.hi > std::numbers::pi) {
        throw InvalidRange("phase range must satisfy 0 <= lo <= hi <= pi");
    }
    SinusoidTask t;
    t.amplitude = detail::draw(rng, amplitude);
    t.phase = detail::draw(rng, phase);
    return t;
}

inline double sinusoid_value(const SinusoidTask& t, double x) { return t.amplitude * std::sin(x + t.phase); }

/// [A, p] with the ablated slot zeroed; the width stays 2 in every mode.
inline Tensor sinusoid_task_info(const SinusoidTask& t, AblationMode mode) {
    switch (mode) {
        case AblationMode::Full: return Tensor::vector({t.amplitude, t.phase});
        case AblationMode::AmplitudeOnly: return Tensor::vector({t.amplitude, 0.0});
        case AblationMode::PhaseOnly: return Tensor::vector({0.0, t.phase});
    }
    return {};
}

struct EpisodeConfig {
    std::size_t n_support = 10;
    std::size_t n_query = 256;
    Range x_range = kInputRange;
    AblationMode ablation = AblationMode::Full;
};

inline ExampleSet sinusoid_examples(const SinusoidTask& t, std::mt19937_64& rng, std::size_t n, Range x_range) {
    ExampleSet s{Tensor(Shape{n, 1}), Tensor(Shape{n, 1})};
    for (std::size_t i = 0; i < n; ++i) {
        const double x = detail::draw(rng, x_range);
        s.x[i] = x;
        s.y[i] = sinusoid_value(t, x);
    }
    return s;
}

inline Task make_sinusoid_episode(const SinusoidTask& t, std::mt19937_64& rng, const EpisodeConfig& cfg = {}) {
    if (cfg.n_support < 1 || cfg.n_query < 1) throw ConfigError("episode set sizes must be >= 1");
    Task task;
    task.info = sinusoid_task_info(t, cfg.ablation);
    task.support = sinusoid_examples(t, rng, cfg.n_support, cfg.x_range);
    task.query = sinusoid_examples(t, rng, cfg.n_query, cfg.x_range);
    return task;
}

// ---------------------------------------------------------------------------
// Rule-set task: context c, stimulus x in {0,1,2}, response y in {0..4}.

struct CognitiveExample {
    int c = 0;
    int x = 0;
    int y = 0;

    friend bool operator==(const CognitiveExample&, const CognitiveExample&) = default;
};

struct CognitiveRow {
    std::vector<CognitiveExample> support;
    std::vector<CognitiveExample> query;
};

enum class InferenceCondition { Consistent, Inconsistent };

inline constexpr std::size_t kNumContexts = 3;
inline constexpr std::size_t kNumStimuli = 3;

namespace detail {

inline void repeat(std::vector<CognitiveExample>& out, std::size_t n, CognitiveExample e) {
    out.insert(out.end(), n, e);
}

inline Tensor one_hot(int k, std::size_t n) {
    Tensor t(Shape{n});
    t[static_cast<std::size_t>(k)] = 1.0;
    return t;
}

}  // namespace detail

/// The seven meta-training rows: support ("meta-train") and query ("meta-test") examples.
inline std::vector<CognitiveRow> cognitive_table() {
    using detail::repeat;
    std::vector<CognitiveRow> rows(7);
    repeat(rows[0].support, 10, {0, 0, 0});
    repeat(rows[0].query, 2, {0, 1, 1});
    repeat(rows[1].support, 10, {0, 1, 1});
    repeat(rows[1].query, 2, {0, 0, 0});
    repeat(rows[2].support, 10, {1, 0, 2});
    repeat(rows[2].query, 2, {1, 1, 3});
    repeat(rows[3].support, 10, {1, 1, 3});
    repeat(rows[3].query, 2, {1, 0, 2});
    repeat(rows[4].support, 5, {2, 0, 0});
    repeat(rows[4].support, 5, {2, 1, 1});
    repeat(rows[4].query, 2, {2, 2, 4});
    repeat(rows[5].support, 5, {2, 0, 0});
    repeat(rows[5].support, 5, {2, 2, 4});
    repeat(rows[5].query, 2, {2, 1, 1});
    repeat(rows[6].support, 5, {2, 1, 1});
    repeat(rows[6].support, 5, {2, 2, 4});
    repeat(rows[6].query, 2, {2, 0, 0});
    return rows;
}

/// One-hot stimulus rows [n, 3] with scalar response targets [n, 1].
inline ExampleSet encode_cognitive(const std::vector<CognitiveExample>& examples) {
    const std::size_t n = examples.size();
    ExampleSet s{Tensor(Shape{n, kNumStimuli}), Tensor(Shape{n, 1})};
    for (std::size_t i = 0; i < n; ++i) {
        s.x.at(i, static_cast<std::size_t>(examples[i].x)) = 1.0;
        s.y[i] = static_cast<double>(examples[i].y);
    }
    return s;
}

inline Task encode_cognitive_row(const CognitiveRow& row) {
    Task t;
    t.info = detail::one_hot(row.support.front().c, kNumContexts);
    t.support = encode_cognitive(row.support);
    t.query = encode_cognitive(row.query);
    return t;
}

inline std::vector<Task> cognitive_meta_train_batches() {
    std::vector<Task> tasks;
    for (const auto& row : cognitive_table()) tasks.push_back(encode_cognitive_row(row));
    return tasks;
}

/// Inference test: two seen mappings of the presented context as support, (x=2, y=4) as the query.
inline CognitiveRow cognitive_inference_row(InferenceCondition cond) {
    CognitiveRow row;
    if (cond == InferenceCondition::Consistent) {
        row.support = {{0, 0, 0}, {0, 1, 1}};
        row.query = {{0, 2, 4}};
    } else {
        row.support = {{1, 0, 2}, {1, 1, 3}};
        row.query = {{1, 2, 4}};
    }
    return row;
}

inline Task cognitive_inference_case(InferenceCondition cond) {
    return encode_cognitive_row(cognitive_inference_row(cond));
}

/// Debug dump: one tab-separated line per example, `s|q  x...  y  c...`.
inline void write_episode(std::ostream& os, const Task& task) {
    auto emit = [&](char tag, const ExampleSet& set) {
        const std::size_t n = set.size();
        const std::size_t dx = set.x.numel() / n;
        const std::size_t dy = set.y.numel() / n;
        for (std::size_t r = 0; r < n; ++r) {
            os << tag;
            for (std::size_t j = 0; j < dx; ++j) os << '\t' << set.x[r * dx + j];
            for (std::size_t j = 0; j < dy; ++j) os << '\t' << set.y[r * dy + j];
            for (std::size_t j = 0; j < task.info.numel(); ++j) os << '\t' << task.info[j];
            os << '\n';
        }
    };
    const auto old = os.precision(17);
    emit('s', task.support);
    emit('q', task.query);
    os.precision(old);
}

}  // namespace ctxmeta
