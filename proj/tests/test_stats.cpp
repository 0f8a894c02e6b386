#include <gtest/gtest.h>

#include <boost/math/distributions/students_t.hpp>

#include <cmath>
#include <limits>
#include <random>
#include <set>
#include <sstream>
#include <vector>

#include "ctxmeta/experiments.hpp"

using namespace ctxmeta;

TEST(Stats, SummaryExamples) {
    const std::vector<double> v{1.0, 2.0, 3.0};
    const Summary s = summarize(v);
    EXPECT_DOUBLE_EQ(s.mean, 2.0);
    EXPECT_DOUBLE_EQ(s.std, 1.0);
    EXPECT_EQ(s.n, 3u);
    const std::vector<double> one{4.5};
    EXPECT_EQ(summarize(one).std, 0.0);
    EXPECT_THROW(summarize(std::vector<double>{}), InvalidRange);
}

TEST(Stats, MergeMatchesConcatenation) {
    std::mt19937_64 rng(1);
    std::normal_distribution<double> n(3.0, 2.0);
    std::vector<double> a(7), b(12), c(5);
    for (auto* v : {&a, &b, &c})
        for (double& x : *v) x = n(rng);
    std::vector<double> all = a;
    all.insert(all.end(), b.begin(), b.end());
    all.insert(all.end(), c.begin(), c.end());
    const Summary left = merge(merge(summarize(a), summarize(b)), summarize(c));
    const Summary right = merge(summarize(a), merge(summarize(b), summarize(c)));
    const Summary direct = summarize(all);
    EXPECT_NEAR(left.mean, direct.mean, 1e-12);
    EXPECT_NEAR(left.std, direct.std, 1e-12);
    EXPECT_NEAR(right.mean, direct.mean, 1e-12);
    EXPECT_NEAR(right.std, direct.std, 1e-12);
    EXPECT_EQ(left.n, 24u);
}

TEST(Stats, TTestExamples) {
    const std::vector<double> a{1, 2, 3, 4, 5}, b{2, 3, 4, 5, 6};
    const TTestResult same = two_sample_t_test(a, a);
    EXPECT_EQ(same.t, 0.0);
    EXPECT_DOUBLE_EQ(same.p, 1.0);

    const TTestResult r = two_sample_t_test(a, b, TTestMode::Pooled);
    EXPECT_DOUBLE_EQ(r.t, -1.0);
    EXPECT_EQ(r.df, 8.0);
    EXPECT_DOUBLE_EQ(r.mean_diff, -1.0);
    const TTestResult w = two_sample_t_test(a, b, TTestMode::Welch);
    EXPECT_DOUBLE_EQ(w.t, -1.0);
    EXPECT_DOUBLE_EQ(w.df, 8.0);

    EXPECT_NEAR(student_t_two_sided_p(2.306, 8.0), 0.05, 1e-4);

    const TTestResult ba = two_sample_t_test(b, a);
    EXPECT_DOUBLE_EQ(ba.t, -r.t);
    EXPECT_DOUBLE_EQ(ba.p, r.p);
    EXPECT_NEAR(r.p_less() + r.p_greater(), 1.0, 1e-15);
    EXPECT_NEAR(r.p_less(), r.p / 2, 1e-15);

    const std::vector<double> k1{2, 2, 2}, k2{3, 3};
    EXPECT_THROW(two_sample_t_test(k1, k1), DegenerateVariance);
    const TTestResult sep = two_sample_t_test(k1, k2);
    EXPECT_EQ(sep.t, -std::numeric_limits<double>::infinity());
    EXPECT_EQ(sep.p, 0.0);
    EXPECT_THROW(two_sample_t_test(std::vector<double>{1.0}, a), InvalidRange);
}

TEST(Stats, WelchDegreesOfFreedom) {
    const std::vector<double> a{1.0, 2.0, 4.0, 8.0}, b{3.0, 3.5, 3.25, 3.75, 3.1, 3.3};
    const Summary sa = summarize(a), sb = summarize(b);
    const double qa = sa.std * sa.std / 4, qb = sb.std * sb.std / 6;
    const double df = (qa + qb) * (qa + qb) / (qa * qa / 3 + qb * qb / 5);
    const TTestResult w = two_sample_t_test(a, b, TTestMode::Welch);
    EXPECT_NEAR(w.df, df, 1e-12);
    EXPECT_NEAR(w.t, (sa.mean - sb.mean) / std::sqrt(qa + qb), 1e-12);
}

TEST(Stats, StudentTMatchesBoost) {
    for (double df : {1.0, 2.0, 3.5, 8.0, 17.3, 60.0, 400.0}) {
        const boost::math::students_t dist(df);
        for (double t : {-12.0, -3.1, -1.0, -0.2, 0.0, 0.4, 1.7, 2.306, 5.0, 30.0}) {
            EXPECT_NEAR(student_t_cdf(t, df), boost::math::cdf(dist, t), 1e-8) << "df " << df << " t " << t;
        }
    }
    for (double a : {0.5, 1.0, 2.5}) {
        for (double x : {0.0, 0.1, 0.5, 0.9, 1.0}) {
            EXPECT_NEAR(incomplete_beta(a, a, x) + incomplete_beta(a, a, 1.0 - x), 1.0, 1e-12);
        }
    }
}

TEST(Csv, RoundTripAndFormatting) {
    const std::vector<MetricRow> rows{{"sinusoid", "context", 0, 100, "train_loss", 0.1},
                                      {"pointnav", "base", -3, 0, "eval_post_return", -12.345678901234567},
                                      {"cognitive", "concat", 7, 2, "consistent_loss", 1e-300}};
    std::stringstream ss;
    write_csv(ss, rows);
    const std::string text = ss.str();
    EXPECT_EQ(text.substr(0, text.find('\n')), "experiment,variant,seed,iteration,metric,value");
    EXPECT_NE(text.find("sinusoid,context,0,100,train_loss,0.10000000000000001\n"), std::string::npos);
    EXPECT_EQ(parse_csv(ss), rows);

    std::ostringstream os;
    EXPECT_THROW(write_row(os, {"s", "v", 0, 0, "m", std::nan("")}), NonFiniteValue);
    EXPECT_THROW(write_row(os, {"s", "v", 0, 0, "m", INFINITY}), NonFiniteValue);
    EXPECT_THROW(write_row(os, {"s", "a,b", 0, 0, "m", 1.0}), ConfigError);

    std::istringstream bad_header("a,b,c\n");
    EXPECT_THROW(parse_csv(bad_header), IoError);
    std::istringstream short_row(std::string(kCsvHeader) + "\nsinusoid,base,0,1,loss\n");
    EXPECT_THROW(parse_csv(short_row), IoError);
    std::istringstream bad_number(std::string(kCsvHeader) + "\nsinusoid,base,x,1,loss,2\n");
    EXPECT_THROW(parse_csv(bad_number), IoError);
}

TEST(Csv, AggregateAcrossSeeds) {
    const std::vector<MetricRow> rows{{"s", "base", 0, 5, "m", 1.0},
                                      {"s", "base", 1, 5, "m", 3.0},
                                      {"s", "context", 0, 5, "m", 7.0}};
    const auto agg = aggregate(rows);
    ASSERT_EQ(agg.size(), 2u);
    const Summary& b = agg.at({"base", 5, "m"});
    EXPECT_DOUBLE_EQ(b.mean, 2.0);
    EXPECT_DOUBLE_EQ(b.std, std::sqrt(2.0));
    EXPECT_EQ(agg.at({"context", 5, "m"}).n, 1u);
}

TEST(Config, ParseAndOverride) {
    std::istringstream is("# comment\n inner_lr = 0.05 \n\nsinusoid.hidden = 8, 8\npointnav.baseline = none\n");
    const KeyValueConfig kv = KeyValueConfig::parse(is);
    ExperimentConfig c = default_config(ExperimentKind::Sinusoid);
    apply_overrides(c, kv);
    EXPECT_EQ(c.inner.step_size, 0.05);
    EXPECT_EQ(c.sinusoid.hidden, (std::vector<std::size_t>{8, 8}));
    EXPECT_EQ(c.pointnav.rl.pg.baseline, Baseline::None);

    std::istringstream unknown("inner_lr = 0.1\nlearning_rate = 3\n");
    ExperimentConfig d = default_config(ExperimentKind::Sinusoid);
    EXPECT_THROW(apply_overrides(d, KeyValueConfig::parse(unknown)), ConfigError);
    std::istringstream dup("a = 1\na = 2\n");
    EXPECT_THROW(KeyValueConfig::parse(dup), ConfigError);
    std::istringstream no_eq("just words\n");
    EXPECT_THROW(KeyValueConfig::parse(no_eq), ConfigError);
    std::istringstream bad_num("outer_lr = fast\n");
    EXPECT_THROW(apply_overrides(d, KeyValueConfig::parse(bad_num)), ConfigError);
    EXPECT_THROW(KeyValueConfig::load("/nonexistent/ctxmeta.cfg"), IoError);
}

TEST(Config, DefaultsAndValidation) {
    const ExperimentConfig s = default_config(ExperimentKind::Sinusoid);
    EXPECT_EQ(s.inner.step_size, 0.01);
    EXPECT_EQ(s.outer.learning_rate, 0.001);
    EXPECT_EQ(s.outer.meta_batch_size, 25u);
    EXPECT_EQ(s.outer.num_iterations, 15000u);
    EXPECT_EQ(s.outer.clip_norm, 10.0);
    const ExperimentConfig g = default_config(ExperimentKind::Cognitive);
    EXPECT_EQ(g.outer.num_iterations, 100u);
    EXPECT_EQ(g.seeds.size(), 5u);

    ExperimentConfig bad = s;
    bad.inner.step_size = -1.0;
    EXPECT_THROW(bad.validate(), ConfigError);
    bad = s;
    bad.seeds.clear();
    EXPECT_THROW(bad.validate(), ConfigError);
    EXPECT_EQ(parse_experiment("pointnav"), ExperimentKind::Pointnav);
    EXPECT_THROW(parse_experiment("maze"), ConfigError);
}

namespace {

ExperimentConfig tiny_sinusoid() {
    ExperimentConfig c = default_config(ExperimentKind::Sinusoid);
    c.sinusoid.hidden = {8};
    c.sinusoid.context_hidden = {8};
    c.outer.meta_batch_size = 2;
    c.outer.num_iterations = 6;
    c.log_every = 2;
    c.sinusoid.eval_tasks = 5;
    c.sinusoid.eval_query = 16;
    return c;
}

std::string to_csv(const std::vector<MetricRow>& rows) {
    std::ostringstream os;
    write_csv(os, rows);
    return os.str();
}

}  // namespace

TEST(Experiments, RunIsByteDeterministic) {
    ExperimentConfig c = tiny_sinusoid();
    c.seeds = {1, 2};
    const auto rows = run_experiment(c);
    EXPECT_EQ(to_csv(rows), to_csv(run_experiment(c)));
    std::set<std::int64_t> seeds;
    for (const auto& r : rows) {
        seeds.insert(r.seed);
        EXPECT_EQ(r.experiment, "sinusoid");
        EXPECT_EQ(r.variant, "context");
    }
    EXPECT_EQ(seeds, (std::set<std::int64_t>{1, 2}));
    // 3 logged training points and 3 evaluation metrics per seed.
    EXPECT_EQ(rows.size(), 12u);
}

TEST(Experiments, SeedsAreIsolated) {
    ExperimentConfig both = tiny_sinusoid();
    both.seeds = {1, 2};
    ExperimentConfig only = tiny_sinusoid();
    only.seeds = {2};
    const auto all = run_experiment(both);
    const auto two = run_experiment(only);
    const std::vector<MetricRow> tail(all.begin() + 6, all.end());
    EXPECT_EQ(tail, two);
    for (std::size_t i = 0; i < 6; ++i) EXPECT_NE(all[i].value, two[i].value);
}

TEST(Experiments, CognitiveRowsAndReport) {
    ExperimentConfig c = default_config(ExperimentKind::Cognitive);
    c.cognitive.hidden = {6};
    c.cognitive.context_hidden = {6};
    c.seeds = {0, 1, 2, 3, 4};
    const auto rows = run_experiment(c);
    std::size_t train = 0;
    std::vector<CognitiveRun> runs;
    for (const auto& r : rows) {
        if (r.metric == "train_loss") ++train;
        if (r.metric == "consistent_loss") runs.emplace_back().consistent = r.value;
        if (r.metric == "inconsistent_loss") runs.back().inconsistent = r.value;
    }
    EXPECT_EQ(train, 500u);
    ASSERT_EQ(runs.size(), 5u);
    const CognitiveReport rep = cognitive_report(runs);
    EXPECT_EQ(rep.pooled.df, 8.0);
    EXPECT_LE(rep.welch.df, 8.0);
    EXPECT_THROW(cognitive_report({runs[0]}), ConfigError);
}

TEST(Experiments, PointnavAndGradcheckRows) {
    ExperimentConfig c = default_config(ExperimentKind::Pointnav);
    c.pointnav.hidden = {4};
    c.pointnav.context_hidden = {4};
    c.pointnav.rl.env.horizon = 4;
    c.pointnav.rl.rollouts_per_task = 2;
    c.pointnav.eval_goals = 3;
    c.outer.meta_batch_size = 2;
    c.outer.num_iterations = 2;
    c.log_every = 1;
    c.seeds = {5};
    const auto rows = run_experiment(c);
    std::set<std::string> metrics;
    for (const auto& r : rows) {
        metrics.insert(r.metric);
        EXPECT_LE(r.value, 0.0);
    }
    EXPECT_EQ(metrics, (std::set<std::string>{"train_pre_return", "train_post_return", "eval_pre_return",
                                              "eval_post_return"}));
    EXPECT_EQ(to_csv(rows), to_csv(run_experiment(c)));

    const auto gc = run_experiment(default_config(ExperimentKind::Gradcheck));
    ASSERT_EQ(gc.size(), 4u);
    for (const auto& r : gc) {
        if (r.metric.rfind("passed_", 0) == 0) EXPECT_EQ(r.value, 1.0) << r.metric;
    }
}
