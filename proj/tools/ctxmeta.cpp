#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ctxmeta/experiments.hpp"

namespace {

struct CommonFlags {
    std::optional<std::string> variant;
    std::vector<std::int64_t> seeds;
    std::string out;
    std::string config;
    std::optional<std::string> ablation;
    bool extrapolate = false;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
    cmd->add_option("--variant", f.variant, "base | static | concat | context")
        ->check(CLI::IsMember({"base", "static", "concat", "context"}));
    cmd->add_option("--seeds", f.seeds, "comma-separated seeds, e.g. 0,1,2")->delimiter(',');
    cmd->add_option("--out", f.out, "CSV output path (default: stdout)");
    cmd->add_option("--config", f.config, "file of key = value overrides");
}

ctxmeta::ExperimentConfig build_config(ctxmeta::ExperimentKind kind, const CommonFlags& f) {
    ctxmeta::ExperimentConfig c = ctxmeta::default_config(kind);
    if (!f.config.empty()) ctxmeta::apply_overrides(c, ctxmeta::KeyValueConfig::load(f.config));
    if (f.variant) c.variant = ctxmeta::parse_variant(*f.variant);
    if (!f.seeds.empty()) c.seeds = f.seeds;
    if (f.ablation) c.ablation = ctxmeta::parse_ablation(*f.ablation);
    c.extrapolate = f.extrapolate;
    return c;
}

void write_rows(const std::string& path, const std::vector<ctxmeta::MetricRow>& rows) {
    if (path.empty()) {
        ctxmeta::write_csv(std::cout, rows);
        return;
    }
    std::ofstream os(path);
    if (!os) throw ctxmeta::IoError("cannot open " + path + " for writing");
    ctxmeta::write_csv(os, rows);
    if (!os) throw ctxmeta::IoError("failed writing " + path);
}

void print_cognitive_report(const std::vector<ctxmeta::MetricRow>& rows) {
    std::vector<ctxmeta::CognitiveRun> runs;
    for (const auto& r : rows) {
        if (r.metric == "consistent_loss") runs.emplace_back().consistent = r.value;
        if (r.metric == "inconsistent_loss") runs.back().inconsistent = r.value;
    }
    if (runs.size() < 2) return;
    const auto rep = ctxmeta::cognitive_report(runs);
    const auto c = ctxmeta::summarize(rep.consistent), i = ctxmeta::summarize(rep.inconsistent);
    std::fprintf(stderr, "consistent %.4f (sd %.4f)  inconsistent %.4f (sd %.4f)\n", c.mean, c.std, i.mean, i.std);
    std::fprintf(stderr, "pooled t(%g) = %.3f, p = %.4g\n", rep.pooled.df, rep.pooled.t, rep.pooled.p);
    std::fprintf(stderr, "welch  t(%.2f) = %.3f, p = %.4g\n", rep.welch.df, rep.welch.t, rep.welch.p);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Context-conditioned meta-learning experiments"};
    app.require_subcommand(1);

    CommonFlags sin_flags, cog_flags, rl_flags, gc_flags;
    auto* sin = app.add_subcommand("sinusoid", "few-shot sinusoid regression");
    add_common(sin, sin_flags);
    sin->add_option("--ablation", sin_flags.ablation, "full | amp | phase (amp keeps only the amplitude)")
        ->check(CLI::IsMember({"full", "amp", "phase"}));
    sin->add_flag("--extrapolate", sin_flags.extrapolate, "evaluate on amplitudes in [5, 10]");
    auto* cog = app.add_subcommand("cognitive", "three-context rule-set task");
    add_common(cog, cog_flags);
    auto* rl = app.add_subcommand("pointnav", "point-goal meta-policy search");
    add_common(rl, rl_flags);
    auto* gc = app.add_subcommand("gradcheck", "finite-difference check of the bilevel meta-gradient");
    add_common(gc, gc_flags);

    CLI11_PARSE(app, argc, argv);

    try {
        ctxmeta::ExperimentKind kind;
        const CommonFlags* flags;
        if (sin->parsed()) {
            kind = ctxmeta::ExperimentKind::Sinusoid;
            flags = &sin_flags;
        } else if (cog->parsed()) {
            kind = ctxmeta::ExperimentKind::Cognitive;
            flags = &cog_flags;
        } else if (rl->parsed()) {
            kind = ctxmeta::ExperimentKind::Pointnav;
            flags = &rl_flags;
        } else {
            kind = ctxmeta::ExperimentKind::Gradcheck;
            flags = &gc_flags;
        }
        const ctxmeta::ExperimentConfig cfg = build_config(kind, *flags);
        const auto rows = ctxmeta::run_experiment(cfg);
        write_rows(flags->out, rows);
        if (kind == ctxmeta::ExperimentKind::Cognitive) print_cognitive_report(rows);
        if (kind == ctxmeta::ExperimentKind::Gradcheck) {
            for (const auto& r : rows) {
                if (r.metric.rfind("passed_", 0) == 0 && r.value != 1.0) {
                    std::fprintf(stderr, "gradcheck failed: %s above tolerance %g\n", r.metric.c_str() + 7,
                                 cfg.gradcheck.tolerance);
                    return 3;
                }
            }
        }
    } catch (const ctxmeta::Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 0;
}
