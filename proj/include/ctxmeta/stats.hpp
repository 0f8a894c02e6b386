#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "ctxmeta/errors.hpp"

namespace ctxmeta {

/// Mean, unbiased sample std and count. A single value reports std 0.
struct Summary {
    double mean = 0.0;
    double std = 0.0;
    std::size_t n = 0;
};

inline Summary summarize(std::span<const double> v) {
    if (v.empty()) throw InvalidRange("cannot summarize an empty sample");
    Summary s;
    s.n = v.size();
    for (double x : v) s.mean += x;
    s.mean /= static_cast<double>(s.n);
    if (s.n > 1) {
        double ss = 0.0;
        for (double x : v) ss += (x - s.mean) * (x - s.mean);
        s.std = std::sqrt(ss / static_cast<double>(s.n - 1));
    }
    return s;
}

/// Count-weighted combination of two summaries, as if computed over the concatenated samples.
inline Summary merge(const Summary& a, const Summary& b) {
    if (a.n == 0) return b;
    if (b.n == 0) return a;
    const double na = static_cast<double>(a.n), nb = static_cast<double>(b.n), n = na + nb;
    const double delta = b.mean - a.mean;
    Summary s;
    s.n = a.n + b.n;
    s.mean = a.mean + delta * nb / n;
    const double m2 = a.std * a.std * (na - 1.0) + b.std * b.std * (nb - 1.0) + delta * delta * na * nb / n;
    s.std = s.n > 1 ? std::sqrt(m2 / (n - 1.0)) : 0.0;
    return s;
}

namespace detail {

// Continued fraction for I_x(a, b), modified Lentz evaluation.
inline double beta_continued_fraction(double a, double b, double x) {
    constexpr int kMaxIter = 500;
    constexpr double kEps = 1e-16;
    constexpr double kTiny = 1e-300;
    const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::abs(d) < kTiny) d = kTiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxIter; ++m) {
        const double m2 = 2.0 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < kEps) return h;
    }
    return h;
}

}  // namespace detail

/// Regularized incomplete beta function I_x(a, b).
inline double incomplete_beta(double a, double b, double x) {
    if (!(a > 0.0) || !(b > 0.0)) throw InvalidRange("incomplete beta needs a, b > 0");
    if (!(x >= 0.0 && x <= 1.0)) throw InvalidRange("incomplete beta needs x in [0, 1]");
    if (x == 0.0 || x == 1.0) return x;
    const double log_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) +
                             b * std::log1p(-x);
    const double front = std::exp(log_front);
    if (x < (a + 1.0) / (a + b + 2.0)) return front * detail::beta_continued_fraction(a, b, x) / a;
    return 1.0 - front * detail::beta_continued_fraction(b, a, 1.0 - x) / b;
}

/// P(T <= t) for Student's t with df degrees of freedom.
inline double student_t_cdf(double t, double df) {
    if (!(df > 0.0)) throw InvalidRange("degrees of freedom must be positive");
    if (std::isinf(t)) return t > 0 ? 1.0 : 0.0;
    const double tail = 0.5 * incomplete_beta(0.5 * df, 0.5, df / (df + t * t));
    return t > 0 ? 1.0 - tail : tail;
}

/// Two-sided p-value for |T| >= |t|.
inline double student_t_two_sided_p(double t, double df) {
    if (std::isinf(t)) return 0.0;
    return std::min(1.0, incomplete_beta(0.5 * df, 0.5, df / (df + t * t)));
}

enum class TTestMode { Pooled, Welch };

struct TTestResult {
    double t = 0.0;
    double df = 0.0;
    double p = 1.0;          // two-sided
    double mean_diff = 0.0;  // mean(a) - mean(b)

    /// One-sided p-value for the alternative mean(a) > mean(b).
    double p_greater() const { return 1.0 - student_t_cdf(t, df); }
    /// One-sided p-value for the alternative mean(a) < mean(b).
    double p_less() const { return student_t_cdf(t, df); }
};

inline TTestResult two_sample_t_test(std::span<const double> a, std::span<const double> b,
                                     TTestMode mode = TTestMode::Pooled) {
    if (a.size() < 2 || b.size() < 2) throw InvalidRange("t-test needs at least two samples per group");
    const Summary sa = summarize(a), sb = summarize(b);
    const double na = static_cast<double>(sa.n), nb = static_cast<double>(sb.n);
    const double va = sa.std * sa.std, vb = sb.std * sb.std;
    TTestResult r;
    r.mean_diff = sa.mean - sb.mean;
    double se = 0.0;
    if (mode == TTestMode::Pooled) {
        r.df = na + nb - 2.0;
        const double sp = ((na - 1.0) * va + (nb - 1.0) * vb) / r.df;
        se = std::sqrt(sp * (1.0 / na + 1.0 / nb));
    } else {
        const double qa = va / na, qb = vb / nb;
        se = std::sqrt(qa + qb);
        const double den = qa * qa / (na - 1.0) + qb * qb / (nb - 1.0);
        r.df = den > 0.0 ? (qa + qb) * (qa + qb) / den : na + nb - 2.0;
    }
    if (se == 0.0) {
        if (r.mean_diff == 0.0) throw DegenerateVariance("both samples are constant and equal; t is undefined");
        r.t = r.mean_diff > 0 ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
        r.p = 0.0;
        return r;
    }
    r.t = r.mean_diff / se;
    r.p = student_t_two_sided_p(r.t, r.df);
    return r;
}

}  // namespace ctxmeta
