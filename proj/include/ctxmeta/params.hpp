#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ctxmeta/autodiff.hpp"
#include "ctxmeta/errors.hpp"
#include "ctxmeta/tensor.hpp"

namespace ctxmeta {

struct LayoutEntry {
    std::string name;
    std::size_t offset = 0;
    Shape shape;

    std::size_t size() const { return shape_numel(shape); }
    friend bool operator==(const LayoutEntry&, const LayoutEntry&) = default;
};

/// Ordered, contiguous (name, offset, shape) records over a flat parameter array.
class ParamLayout {
public:
    ParamLayout() = default;

    void append(std::string name, Shape shape) {
        const std::size_t n = shape_numel(shape);
        entries_.push_back(LayoutEntry{std::move(name), total_, std::move(shape)});
        total_ += n;
    }

    void append(const ParamLayout& other, const std::string& prefix) {
        for (const auto& e : other.entries_) append(prefix + e.name, e.shape);
    }

    const std::vector<LayoutEntry>& entries() const noexcept { return entries_; }
    std::size_t total() const noexcept { return total_; }

    const LayoutEntry& find(const std::string& name) const {
        for (const auto& e : entries_)
            if (e.name == name) return e;
        throw DimensionMismatch("no parameter named '" + name + "' in layout");
    }

    /// Entries are disjoint, in offset order, and cover [0, total) exactly.
    bool covers_exactly() const {
        std::size_t at = 0;
        for (const auto& e : entries_) {
            if (e.offset != at) return false;
            at += e.size();
        }
        return at == total_;
    }

    friend bool operator==(const ParamLayout&, const ParamLayout&) = default;

private:
    std::vector<LayoutEntry> entries_;
    std::size_t total_ = 0;
};

/// Flat real vector with a named layout; holds base-net, policy, or context-net parameters.
class ParamVector {
public:
    ParamVector() = default;
    ParamVector(ParamLayout layout, std::vector<double> values) : layout_(std::move(layout)), values_(std::move(values)) {
        if (values_.size() != layout_.total()) {
            throw DimensionMismatch("parameter vector has " + std::to_string(values_.size()) +
                                    " values but layout expects " + std::to_string(layout_.total()));
        }
    }
    explicit ParamVector(ParamLayout layout) : layout_(std::move(layout)), values_(layout_.total(), 0.0) {}

    const ParamLayout& layout() const noexcept { return layout_; }
    std::vector<double>& values() noexcept { return values_; }
    const std::vector<double>& values() const noexcept { return values_; }
    std::size_t size() const noexcept { return values_.size(); }
    bool empty() const noexcept { return values_.empty(); }

    double& operator[](std::size_t i) { return values_[i]; }
    double operator[](std::size_t i) const { return values_[i]; }

    std::span<double> view(const std::string& name) {
        const auto& e = layout_.find(name);
        return std::span<double>(values_).subspan(e.offset, e.size());
    }

    Tensor as_tensor() const { return Tensor(Shape{values_.size()}, values_); }

    Var leaf_on(Tape& tape) const { return tape.leaf(as_tensor()); }

    friend bool operator==(const ParamVector&, const ParamVector&) = default;

private:
    ParamLayout layout_;
    std::vector<double> values_;
};

namespace detail {

inline void write_le_double(std::ostream& os, double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    char bytes[8];
    for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((bits >> (8 * i)) & 0xffu);
    os.write(bytes, 8);
}

inline double read_le_double(std::istream& is) {
    unsigned char bytes[8];
    if (!is.read(reinterpret_cast<char*>(bytes), 8)) throw IoError("truncated parameter data");
    std::uint64_t bits = 0;
    for (int i = 7; i >= 0; --i) bits = (bits << 8) | bytes[i];
    return std::bit_cast<double>(bits);
}

inline Shape parse_shape(const std::string& s) {
    Shape shape;
    if (s == "scalar") return shape;
    std::stringstream ss(s);
    std::string part;
    while (std::getline(ss, part, 'x')) {
        try {
            shape.push_back(static_cast<std::size_t>(std::stoull(part)));
        } catch (const std::exception&) {
            throw IoError("bad shape '" + s + "' in parameter header");
        }
    }
    return shape;
}

inline std::string format_shape(const Shape& shape) {
    if (shape.empty()) return "scalar";
    std::string out;
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += 'x';
        out += std::to_string(shape[i]);
    }
    return out;
}

}  // namespace detail

// Checkpoint format: text header
//   ctxmeta-params 1
//   <name> <offset> <d0>x<d1>...      (one line per layout entry)
//   data <count>
// followed by <count> little-endian IEEE-754 doubles.
inline void write_params(std::ostream& os, const ParamVector& p) {
    os << "ctxmeta-params 1\n";
    for (const auto& e : p.layout().entries()) os << e.name << ' ' << e.offset << ' ' << detail::format_shape(e.shape) << '\n';
    os << "data " << p.size() << '\n';
    for (double v : p.values()) detail::write_le_double(os, v);
    if (!os) throw IoError("failed writing parameter vector");
}

inline ParamVector read_params(std::istream& is) {
    std::string line;
    if (!std::getline(is, line) || line != "ctxmeta-params 1") throw IoError("missing parameter header");
    ParamLayout layout;
    std::size_t count = 0;
    while (true) {
        if (!std::getline(is, line)) throw IoError("unterminated parameter header");
        std::istringstream ls(line);
        std::string name, shape;
        std::size_t offset = 0;
        ls >> name;
        if (name == "data") {
            if (!(ls >> count)) throw IoError("bad data line in parameter header");
            break;
        }
        if (!(ls >> offset >> shape)) throw IoError("bad layout line: " + line);
        layout.append(name, detail::parse_shape(shape));
        if (layout.entries().back().offset != offset) throw IoError("non-contiguous layout entry: " + name);
    }
    if (count != layout.total()) throw IoError("data count does not match layout");
    std::vector<double> values(count);
    for (auto& v : values) v = detail::read_le_double(is);
    return ParamVector(std::move(layout), std::move(values));
}

inline void save_params(const std::string& path, const ParamVector& p) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path + " for writing");
    write_params(os, p);
}

inline ParamVector load_params(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);
    return read_params(is);
}

}  // namespace ctxmeta
