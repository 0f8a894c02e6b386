#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "ctxmeta/stats.hpp"

namespace ctxmeta {

struct MetricRow {
    std::string experiment;
    std::string variant;
    std::int64_t seed = 0;
    std::int64_t iteration = 0;
    std::string metric;
    double value = 0.0;

    friend bool operator==(const MetricRow&, const MetricRow&) = default;
};

inline constexpr const char* kCsvHeader = "experiment,variant,seed,iteration,metric,value";

/// 17 significant digits: parsing the text back yields the same double.
inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

namespace detail {

inline void check_field(const std::string& s, const char* what) {
    if (s.find_first_of(",\n\r\"") != std::string::npos) {
        throw ConfigError(std::string("csv ") + what + " '" + s + "' contains a reserved character");
    }
}

}  // namespace detail

inline void write_row(std::ostream& os, const MetricRow& r) {
    if (!std::isfinite(r.value)) {
        throw NonFiniteValue("metric " + r.metric + " at iteration " + std::to_string(r.iteration) + " is not finite");
    }
    detail::check_field(r.experiment, "experiment");
    detail::check_field(r.variant, "variant");
    detail::check_field(r.metric, "metric");
    os << r.experiment << ',' << r.variant << ',' << r.seed << ',' << r.iteration << ',' << r.metric << ','
       << format_double(r.value) << '\n';
}

inline void write_csv(std::ostream& os, const std::vector<MetricRow>& rows) {
    os << kCsvHeader << '\n';
    for (const auto& r : rows) write_row(os, r);
}

inline std::vector<MetricRow> parse_csv(std::istream& is) {
    std::string line;
    if (!std::getline(is, line) || line != kCsvHeader) throw IoError("csv header missing or unexpected");
    std::vector<MetricRow> rows;
    std::size_t lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        std::string field;
        while (std::getline(ss, field, ',')) f.push_back(field);
        if (f.size() != 6) throw IoError("csv line " + std::to_string(lineno) + ": expected 6 fields");
        MetricRow r;
        try {
            std::size_t used = 0;
            r.experiment = f[0];
            r.variant = f[1];
            r.seed = std::stoll(f[2], &used);
            if (used != f[2].size()) throw std::invalid_argument("seed");
            r.iteration = std::stoll(f[3], &used);
            if (used != f[3].size()) throw std::invalid_argument("iteration");
            r.metric = f[4];
            r.value = std::stod(f[5], &used);
            if (used != f[5].size()) throw std::invalid_argument("value");
        } catch (const std::logic_error&) {
            throw IoError("csv line " + std::to_string(lineno) + ": malformed number");
        }
        rows.push_back(std::move(r));
    }
    return rows;
}

using AggregateKey = std::tuple<std::string, std::int64_t, std::string>;  // variant, iteration, metric

/// Across-seed summaries grouped by (variant, iteration, metric).
inline std::map<AggregateKey, Summary> aggregate(const std::vector<MetricRow>& rows) {
    std::map<AggregateKey, std::vector<double>> groups;
    for (const auto& r : rows) groups[{r.variant, r.iteration, r.metric}].push_back(r.value);
    std::map<AggregateKey, Summary> out;
    for (const auto& [k, v] : groups) out[k] = summarize(v);
    return out;
}

}  // namespace ctxmeta
