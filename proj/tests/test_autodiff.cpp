#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "ctxmeta/autodiff.hpp"

using namespace ctxmeta;

namespace {

std::vector<double> uniform(std::mt19937_64& rng, std::size_t n, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> d(lo, hi);
    std::vector<double> v(n);
    for (auto& x : v) x = d(rng);
    return v;
}

// Straight-line 2-layer ReLU regression loss, independent of the tape.
double reference_two_layer_mse(const std::vector<double>& p, const std::vector<double>& x,
                               const std::vector<double>& y, std::size_t in, std::size_t hid) {
    const std::size_t n = y.size();
    const double* w1 = p.data();
    const double* b1 = w1 + in * hid;
    const double* w2 = b1 + hid;
    const double b2 = w2[hid];
    double loss = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
        double out = b2;
        for (std::size_t j = 0; j < hid; ++j) {
            double h = b1[j];
            for (std::size_t i = 0; i < in; ++i) h += x[r * in + i] * w1[i * hid + j];
            out += (h > 0 ? h : 0.0) * w2[j];
        }
        loss += (out - y[r]) * (out - y[r]);
    }
    return loss / static_cast<double>(n);
}

Var taped_two_layer_mse(Tape& t, const Var& p, const Tensor& x, const Tensor& y, std::size_t in, std::size_t hid) {
    const std::size_t n = x.dim(0);
    Var w1 = slice(p, 0, {in, hid});
    Var b1 = slice(p, in * hid, {hid});
    Var w2 = slice(p, in * hid + hid, {hid, 1});
    Var b2 = slice(p, in * hid + 2 * hid, {1});
    Var h = relu(matmul(t.constant(x), w1) + tile_rows(b1, n));
    Var out = matmul(h, w2) + tile_rows(b2, n);
    return mean(square(out - t.constant(y)));
}

}  // namespace

TEST(Autodiff, ElementwiseAndMatmulValues) {
    Tape t;
    Var a = t.constant(Tensor::vector({1, 2}));
    Var b = t.constant(Tensor::vector({3, 4}));
    EXPECT_EQ(add(a, b).value(), Tensor::vector({4, 6}));
    EXPECT_EQ(relu(t.constant(Tensor::vector({-1, 0, 2}))).value(), Tensor::vector({0, 0, 2}));
    Var m = matmul(t.constant(Tensor::ones({2, 3})), t.constant(Tensor::ones({3, 1})));
    EXPECT_EQ(m.value(), Tensor::matrix(2, 1, {3, 3}));
}

TEST(Autodiff, ShapeRules) {
    Tape t;
    Var a = t.constant(Tensor::vector({1, 2}));
    Var b = t.constant(Tensor::vector({1, 2, 3}));
    EXPECT_THROW(add(a, b), ShapeMismatch);
    EXPECT_THROW(matmul(t.constant(Tensor::ones({2, 3})), t.constant(Tensor::ones({2, 1}))), ShapeMismatch);
    // scalar-vs-tensor broadcasting is the only broadcast
    EXPECT_EQ(mul(a, t.constant(Tensor::scalar(2))).value(), Tensor::vector({2, 4}));
    EXPECT_THROW(add(t.constant(Tensor::ones({1, 2})), a), ShapeMismatch);
}

TEST(Autodiff, NonFiniteDetection) {
    Tape t;
    Var a = t.constant(Tensor::vector({0.0}));
    EXPECT_THROW(log(a), NonFiniteValue);
    t.set_check_finite(false);
    EXPECT_NO_THROW(log(a));
}

TEST(Autodiff, FirstAndSecondDerivativeOfPolynomials) {
    Tape t;
    Var x = t.leaf(Tensor::scalar(3.0));
    auto g = backward(square(x), {x}, false);
    EXPECT_DOUBLE_EQ(g[0].item(), 6.0);

    Var y = t.leaf(Tensor::scalar(2.0));
    Var cube = y * y * y;
    auto g1 = backward(cube, {y}, true);
    EXPECT_DOUBLE_EQ(g1[0].item(), 12.0);
    auto g2 = backward(g1.nodes[0], {y}, false);
    EXPECT_DOUBLE_EQ(g2[0].item(), 12.0);
}

TEST(Autodiff, NotScalarAndDisconnectedLeaf) {
    Tape t;
    Var x = t.leaf(Tensor::vector({1, 2}));
    Var z = t.leaf(Tensor::vector({5, 6, 7}));
    EXPECT_THROW(backward(square(x), {x}, false), NotScalar);
    auto g = backward(sum(square(x)), {x, z}, false);
    EXPECT_EQ(g[1], Tensor::zeros({3}));
    EXPECT_EQ(g[0], Tensor::vector({2, 4}));
}

TEST(Autodiff, BackwardWithoutGraphLeavesTapeUnchanged) {
    Tape t;
    Var x = t.leaf(Tensor::vector({1, 2}));
    Var l = sum(square(x));
    const auto before = t.size();
    backward(l, {x}, false);
    EXPECT_EQ(t.size(), before);
    backward(l, {x}, true);
    EXPECT_GT(t.size(), before);
}

TEST(FiniteDiff, ClosedFormExamples) {
    auto sq = finite_diff_gradient([](const std::vector<double>& p) { return p[0] * p[0]; }, {3.0}, 1e-5);
    EXPECT_NEAR(sq[0], 6.0, 1e-8);
    auto prod = finite_diff_gradient([](const std::vector<double>& p) { return p[0] * p[1]; }, {2.0, 5.0}, 1e-5);
    EXPECT_NEAR(prod[0], 5.0, 1e-8);
    EXPECT_NEAR(prod[1], 2.0, 1e-8);
    EXPECT_THROW(finite_diff_gradient([](const std::vector<double>&) { return 0.0; }, {1.0}, 0.0), InvalidRange);
}

TEST(Autodiff, TwoLayerReluNetMatchesFiniteDifferences) {
    std::mt19937_64 rng(7);
    const std::size_t in = 3, hid = 5, n = 8;
    const auto p0 = uniform(rng, in * hid + hid + hid + 1);
    const auto xs = uniform(rng, n * in, -2, 2);
    const auto ys = uniform(rng, n);
    const Tensor x = Tensor::matrix(n, in, xs);
    const Tensor y = Tensor::matrix(n, 1, ys);

    Tape t;
    Var p = t.leaf(Tensor::vector(p0));
    Var loss = taped_two_layer_mse(t, p, x, y, in, hid);
    EXPECT_NEAR(loss.item(), reference_two_layer_mse(p0, xs, ys, in, hid), 1e-12);
    auto g = backward(loss, {p}, false);
    auto fd = finite_diff_gradient([&](const auto& q) { return reference_two_layer_mse(q, xs, ys, in, hid); }, p0, 1e-5);
    EXPECT_LE(relative_error(g[0].data(), fd), 1e-5);
}

TEST(AutodiffProperty, LinearityOfBackward) {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        const auto v = uniform(rng, 4, 0.5, 1.5);
        std::uniform_real_distribution<double> coef(-2, 2);
        const double a = coef(rng), b = coef(rng);
        Tape t;
        Var x = t.leaf(Tensor::vector(v));
        auto f = [&] { return sum(exp(x) * square(x)); };
        auto g = [&] { return mean(log(x) + relu(x - t.constant(Tensor::scalar(1.0)))); };
        auto gf = backward(f(), {x}, false);
        auto gg = backward(g(), {x}, false);
        auto gc = backward(scale(f(), a) + scale(g(), b), {x}, false);
        for (std::size_t i = 0; i < v.size(); ++i) {
            EXPECT_NEAR(gc[0][i], a * gf[0][i] + b * gg[0][i], 1e-12);
        }
    }
}

TEST(AutodiffProperty, HessianFromDoubleBackwardIsSymmetric) {
    std::mt19937_64 rng(3);
    const std::size_t n = 4;
    for (int trial = 0; trial < 10; ++trial) {
        const auto v = uniform(rng, n, 0.2, 1.2);
        const auto wv = uniform(rng, n * n);
        Tape t;
        Var x = t.leaf(Tensor::vector(v));
        Var w = t.constant(Tensor::matrix(n, n, wv));
        Var xr = reshape(x, {1, n});
        Var f = sum(exp(matmul(xr, w))) + sum(square(x) * log(x));
        auto g = backward(f, {x}, true);
        std::vector<std::vector<double>> h(n);
        for (std::size_t i = 0; i < n; ++i) {
            Var gi = slice(g.nodes[0], i, {});
            h[i] = backward(gi, {x}, false)[0].data();
        }
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) EXPECT_NEAR(h[i][j], h[j][i], 1e-8);
    }
}

TEST(AutodiffProperty, DeterministicBitwise) {
    auto run = [] {
        std::mt19937_64 rng(99);
        const auto p0 = uniform(rng, 3 * 4 + 4 + 4 + 1);
        const Tensor x = Tensor::matrix(5, 3, uniform(rng, 15));
        const Tensor y = Tensor::matrix(5, 1, uniform(rng, 5));
        Tape t;
        Var p = t.leaf(Tensor::vector(p0));
        Var l = taped_two_layer_mse(t, p, x, y, 3, 4);
        auto g = backward(l, {p}, true);
        auto h = backward(sum(square(g.nodes[0])), {p}, false);
        std::vector<double> out = g[0].data();
        out.push_back(l.item());
        out.insert(out.end(), h[0].data().begin(), h[0].data().end());
        return out;
    };
    EXPECT_EQ(run(), run());
}

// Every op: tape gradient vs central differences at 100 random points.
TEST(AutodiffProperty, EveryOpPassesGradientCheck) {
    using Builder = std::function<Var(Tape&, const Var&)>;
    struct Case {
        const char* name;
        std::size_t n;
        double lo, hi;
        Builder build;
    };
    const Tensor k = Tensor::vector({0.3, -1.2, 0.7, 2.0});
    const std::vector<Case> cases = {
        {"add", 4, -2, 2, [&](Tape& t, const Var& x) { return sum(square(x + t.constant(k))); }},
        {"sub", 4, -2, 2, [&](Tape& t, const Var& x) { return sum(square(t.constant(k) - x)); }},
        {"mul", 4, -2, 2, [&](Tape& t, const Var& x) { return sum(x * t.constant(k) * x); }},
        {"scalar_mul", 4, -2, 2,
         [](Tape&, const Var& x) { return sum(square(x * slice(x, 2, {}))); }},
        {"matmul", 4, -2, 2,
         [](Tape&, const Var& x) {
             Var m = reshape(x, {2, 2});
             return sum(square(matmul(m, transpose(m))));
         }},
        {"relu", 4, -2, 2, [&](Tape&, const Var& x) { return sum(relu(x) * x); }},
        {"mean", 4, -2, 2, [](Tape&, const Var& x) { return square(mean(x)); }},
        {"concat_rows", 4, -2, 2,
         [&](Tape& t, const Var& x) { return sum(square(concat_rows({x, t.constant(k), x})) * t.constant(Tensor::scalar(0.5))); }},
        {"scale", 4, -2, 2, [](Tape&, const Var& x) { return sum(square(scale(x, -3.5))); }},
        {"log", 4, 0.2, 3, [](Tape&, const Var& x) { return sum(log(x) * x); }},
        {"exp", 4, -2, 2, [](Tape&, const Var& x) { return sum(exp(x) * x); }},
        {"neg", 4, -2, 2, [](Tape&, const Var& x) { return sum(square(neg(x)) * x); }},
        {"pad", 4, -2, 2,
         [](Tape&, const Var& x) { return sum(square(pad(x, 3, {9})) * pad(x, 2, {9})); }},
        {"tile_rows", 4, -2, 2, [](Tape&, const Var& x) { return sum(square(tile_rows(x, 3))); }},
    };
    std::mt19937_64 rng(2024);
    for (const auto& c : cases) {
        int checked = 0;
        while (checked < 100) {
            const auto v = uniform(rng, c.n, c.lo, c.hi);
            if (std::string(c.name) == "relu" &&
                std::any_of(v.begin(), v.end(), [](double z) { return std::abs(z) <= 1e-3; })) {
                continue;
            }
            Tape t;
            Var x = t.leaf(Tensor::vector(v));
            auto g = backward(c.build(t, x), {x}, false);
            auto f = [&](const std::vector<double>& q) {
                Tape s;
                return c.build(s, s.leaf(Tensor::vector(q))).item();
            };
            auto fd = finite_diff_gradient(f, v, 1e-5);
            ASSERT_LE(relative_error(g[0].data(), fd), 1e-5) << c.name;
            ++checked;
        }
    }
}

// Second-order terms checked against finite differences of the first-order gradient.
TEST(AutodiffProperty, SecondOrderMatchesDifferencedGradient) {
    std::mt19937_64 rng(5);
    const std::size_t in = 2, hid = 4, n = 6;
    const auto p0 = uniform(rng, in * hid + 2 * hid + 1);
    const Tensor x = Tensor::matrix(n, in, uniform(rng, n * in, -2, 2));
    const Tensor y = Tensor::matrix(n, 1, uniform(rng, n));
    // h(p) = || grad L(p) ||^2
    auto grad_norm = [&](const std::vector<double>& q, bool differentiate) {
        Tape t;
        Var p = t.leaf(Tensor::vector(q));
        auto g = backward(taped_two_layer_mse(t, p, x, y, in, hid), {p}, true);
        Var h = sum(square(g.nodes[0]));
        if (!differentiate) return std::pair{h.item(), std::vector<double>{}};
        return std::pair{h.item(), backward(h, {p}, false)[0].data()};
    };
    auto analytic = grad_norm(p0, true).second;
    auto fd = finite_diff_gradient([&](const auto& q) { return grad_norm(q, false).first; }, p0, 1e-6);
    EXPECT_LE(relative_error(analytic, fd), 1e-5);
}

TEST(Autodiff, BroadcastGradientsSurviveTapeGrowth) {
    // Sweeps graph sizes so node storage reallocates inside broadcast backward rules.
    for (std::size_t n = 100; n < 700; n += 7) {
        Tape t;
        Var x = t.leaf(Tensor::vector({0.5, -1.0, 2.0}));
        Var s = t.leaf(Tensor::scalar(1.001));
        Var y = x;
        for (std::size_t k = 0; k < n; ++k) y = y * s;
        const Var wrt[] = {x, s};
        GradientMap g = backward(sum(y), wrt, true);
        const double sn = std::pow(1.001, static_cast<double>(n));
        ASSERT_EQ(g.values[0].shape(), Shape{3});
        EXPECT_NEAR(g.values[0][0], sn, 1e-9 * sn);
        EXPECT_NEAR(g.values[1].item(), static_cast<double>(n) * sn / 1.001 * 1.5, 1e-9 * n * sn);
    }
}
