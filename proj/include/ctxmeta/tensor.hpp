#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ctxmeta/errors.hpp"

namespace ctxmeta {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

/// Dense row-major array of doubles. A 0-dim shape holds one element.
/// Storage is shared between copies and duplicated on the first mutable access.
class Tensor {
public:
    Tensor() : data_(std::make_shared<std::vector<double>>(1, 0.0)) {}

    explicit Tensor(Shape shape, double fill = 0.0)
        : shape_(std::move(shape)), data_(std::make_shared<std::vector<double>>(shape_numel(shape_), fill)) {}

    Tensor(Shape shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::make_shared<std::vector<double>>(std::move(data))) {
        if (shape_numel(shape_) != data_->size()) {
            throw ShapeMismatch("tensor shape " + shape_str(shape_) + " does not match " +
                                std::to_string(data_->size()) + " values");
        }
    }

    static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

    static Tensor vector(std::vector<double> v) {
        Shape s{v.size()};
        return Tensor(std::move(s), std::move(v));
    }

    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
        return Tensor(Shape{rows, cols}, std::move(v));
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
    static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t numel() const noexcept { return data_->size(); }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    bool is_scalar() const noexcept { return data_->size() == 1; }

    std::vector<double>& data() {
        detach();
        return *data_;
    }
    const std::vector<double>& data() const noexcept { return *data_; }

    double& operator[](std::size_t i) { return data()[i]; }
    double operator[](std::size_t i) const { return (*data_)[i]; }

    double& at(std::size_t r, std::size_t c) { return data()[r * shape_[1] + c]; }
    double at(std::size_t r, std::size_t c) const { return (*data_)[r * shape_[1] + c]; }

    double item() const {
        if (data_->size() != 1) throw NotScalar("tensor with shape " + shape_str(shape_) + " is not a scalar");
        return (*data_)[0];
    }

    bool all_finite() const {
        return std::all_of(data_->begin(), data_->end(), [](double v) { return std::isfinite(v); });
    }

    Tensor reshaped(Shape shape) const {
        if (shape_numel(shape) != numel()) {
            throw ShapeMismatch("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
        }
        Tensor out = *this;
        out.shape_ = std::move(shape);
        return out;
    }

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && *a.data_ == *b.data_;
    }

private:
    void detach() {
        if (data_.use_count() > 1) data_ = std::make_shared<std::vector<double>>(*data_);
    }

    Shape shape_;
    std::shared_ptr<std::vector<double>> data_;
};

}  // namespace ctxmeta
