#pragma once

#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "handfit/errors.hpp"

namespace handfit {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

// Dense row-major tensor of doubles, rank 0..2 in practice.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape) {
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_.assign(count(t.shape_), 0.0);
        return t;
    }

    static Tensor full(Shape shape, double v) {
        Tensor t = zeros(std::move(shape));
        for (double& x : t.data_) x = v;
        return t;
    }

    static Tensor scalar(double v) {
        Tensor t;
        t.data_.assign(1, v);
        return t;
    }

    static Tensor from(Shape shape, std::vector<double> data) {
        if (count(shape) != data.size())
            throw ShapeError("Tensor::from: " + shape_str(shape) + " needs " +
                             std::to_string(count(shape)) + " values, got " +
                             std::to_string(data.size()));
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_ = std::move(data);
        return t;
    }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t numel() const { return data_.size(); }
    bool is_scalar() const { return data_.size() == 1 && shape_.empty(); }
    bool empty() const { return data_.empty(); }

    std::size_t rows() const { return shape_.size() > 0 ? shape_[0] : 1; }
    std::size_t cols() const { return shape_.size() > 1 ? shape_[1] : 1; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    Tensor reshaped(Shape s) const {
        if (count(s) != numel())
            throw ShapeError("reshape from " + shape_str(shape_) + " to " + shape_str(s));
        Tensor t = *this;
        t.shape_ = std::move(s);
        return t;
    }

    void add_scaled(const Tensor& o, double k) {
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += k * o.data_[i];
    }

    static std::size_t count(const Shape& s) {
        std::size_t n = 1;
        for (std::size_t d : s) n *= d;
        return n;
    }

private:
    Shape shape_;                // empty shape + 1 element = scalar
    std::vector<double> data_;
};

// Plain (non-recorded) helpers used by op implementations and value-level code.

inline Tensor matmul_plain(const Tensor& a, const Tensor& b) {
    const std::size_t m = a.rows(), k = a.cols();
    const bool vec = b.rank() == 1;
    const std::size_t n = vec ? 1 : b.cols();
    if (b.rows() != k)
        throw ShapeError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    Tensor out = vec ? Tensor::zeros({m}) : Tensor::zeros({m, n});
    if (vec) {
        const double* bv = b.data().data();
        for (std::size_t i = 0; i < m; ++i) {
            const double* ai = &a.data()[i * k];
            double s = 0;
            for (std::size_t p = 0; p < k; ++p) s += ai[p] * bv[p];
            out[i] = s;
        }
        return out;
    }
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = &a.data()[i * k];
        double* oi = &out.data()[i * n];
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ai[p];
            if (av == 0.0) continue;
            const double* bp = &b.data()[p * n];
            for (std::size_t j = 0; j < n; ++j) oi[j] += av * bp[j];
        }
    }
    return out;
}

inline Tensor transpose_plain(const Tensor& a) {
    const std::size_t m = a.rows(), n = a.cols();
    Tensor out = Tensor::zeros({n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.data()[j * m + i] = a.data()[i * n + j];
    return out;
}

}  // namespace handfit
