#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "casskit/errors.hpp"
#include "casskit/rng.hpp"

namespace casskit {

// Dense row-major tensor, rank <= 4. The whole library works on value-type
// tensors; no views, no aliasing.
template <typename T>
class Tensor {
public:
    using Scalar = T;

    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape) : shape_(std::move(shape)) {
        data_.assign(count(shape_), T(0));
    }

    Tensor(std::initializer_list<std::size_t> shape)
        : Tensor(std::vector<std::size_t>(shape)) {}

    static std::size_t count(const std::vector<std::size_t>& shape) {
        return std::accumulate(shape.begin(), shape.end(), std::size_t(1),
                               std::multiplies<>());
    }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::vector<T>& raw() { return data_; }
    const std::vector<T>& raw() const { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    T& at2(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
    const T& at2(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

    T& at3(std::size_t i, std::size_t j, std::size_t k) {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }
    const T& at3(std::size_t i, std::size_t j, std::size_t k) const {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }

    T& at4(std::size_t i, std::size_t j, std::size_t k, std::size_t l) {
        return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
    }
    const T& at4(std::size_t i, std::size_t j, std::size_t k, std::size_t l) const {
        return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
    void zero() { fill(T(0)); }

    void reshape(std::vector<std::size_t> shape) {
        CASSKIT_CHECK(count(shape) == data_.size(), ValidationError,
                      "reshape: element count mismatch");
        shape_ = std::move(shape);
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (const T& v : data_)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    void fill_normal(Rng& rng, double mean, double stddev) {
        for (T& v : data_) v = static_cast<T>(rng.normal(mean, stddev));
    }

    void fill_uniform(Rng& rng, double lo, double hi) {
        for (T& v : data_) v = static_cast<T>(rng.uniform(lo, hi));
    }

    double l2_norm() const {
        double s = 0.0;
        for (const T& v : data_) s += static_cast<double>(v) * static_cast<double>(v);
        return std::sqrt(s);
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << "(";
        for (std::size_t i = 0; i < shape_.size(); ++i)
            os << shape_[i] << (i + 1 < shape_.size() ? ", " : "");
        os << ")";
        return os.str();
    }

private:
    std::vector<std::size_t> shape_;
    std::vector<T> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

template <typename T, typename U>
Tensor<T> tensor_cast(const Tensor<U>& src) {
    Tensor<T> out(src.shape());
    for (std::size_t i = 0; i < src.size(); ++i)
        out[i] = static_cast<T>(src[i]);
    return out;
}

} // namespace casskit
