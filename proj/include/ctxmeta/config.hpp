#pragma once

// `key = value` configuration files. Blank lines and lines starting with '#' are ignored.

#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "ctxmeta/errors.hpp"

namespace ctxmeta {

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace detail

class KeyValueConfig {
public:
    KeyValueConfig() = default;

    static KeyValueConfig parse(std::istream& is) {
        KeyValueConfig c;
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            const std::string t = detail::trim(line);
            if (t.empty() || t.front() == '#') continue;
            const auto eq = t.find('=');
            if (eq == std::string::npos) {
                throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
            }
            const std::string key = detail::trim(t.substr(0, eq));
            const std::string value = detail::trim(t.substr(eq + 1));
            if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
            if (c.values_.count(key)) throw ConfigError("config key '" + key + "' given twice");
            c.values_[key] = value;
        }
        return c;
    }

    static KeyValueConfig load(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw IoError("cannot open config file " + path);
        return parse(is);
    }

    bool has(const std::string& key) const { return values_.count(key) != 0; }

    void set(const std::string& key, std::string value) { values_[key] = std::move(value); }

    std::string get_string(const std::string& key, const std::string& fallback) const {
        const auto* v = lookup(key);
        return v ? *v : fallback;
    }

    double get_double(const std::string& key, double fallback) const {
        const auto* v = lookup(key);
        if (!v) return fallback;
        try {
            std::size_t used = 0;
            const double d = std::stod(*v, &used);
            if (used != v->size()) throw std::invalid_argument(key);
            return d;
        } catch (const std::logic_error&) {
            throw ConfigError("config key '" + key + "': '" + *v + "' is not a number");
        }
    }

    std::size_t get_size(const std::string& key, std::size_t fallback) const {
        const auto* v = lookup(key);
        if (!v) return fallback;
        try {
            std::size_t used = 0;
            const long long n = std::stoll(*v, &used);
            if (used != v->size() || n < 0) throw std::invalid_argument(key);
            return static_cast<std::size_t>(n);
        } catch (const std::logic_error&) {
            throw ConfigError("config key '" + key + "': '" + *v + "' is not a non-negative integer");
        }
    }

    bool get_bool(const std::string& key, bool fallback) const {
        const auto* v = lookup(key);
        if (!v) return fallback;
        if (*v == "true" || *v == "1") return true;
        if (*v == "false" || *v == "0") return false;
        throw ConfigError("config key '" + key + "': '" + *v + "' is not a boolean");
    }

    /// Comma-separated list of non-negative integers, e.g. "40,40".
    std::vector<std::size_t> get_sizes(const std::string& key, std::vector<std::size_t> fallback) const {
        const auto* v = lookup(key);
        if (!v) return fallback;
        std::vector<std::size_t> out;
        std::size_t start = 0;
        while (start <= v->size()) {
            const auto comma = v->find(',', start);
            const std::string part = detail::trim(v->substr(start, comma - start));
            KeyValueConfig one;
            one.set(key, part);
            out.push_back(one.get_size(key, 0));
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        return out;
    }

    /// Throws on any key that no getter asked for.
    void reject_unknown() const {
        for (const auto& [k, v] : values_) {
            if (!read_.count(k)) throw ConfigError("unknown config key '" + k + "'");
        }
    }

private:
    const std::string* lookup(const std::string& key) const {
        read_.insert(key);
        auto it = values_.find(key);
        return it == values_.end() ? nullptr : &it->second;
    }

    std::map<std::string, std::string> values_;
    mutable std::set<std::string> read_;
};

}  // namespace ctxmeta
