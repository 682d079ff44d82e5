#pragma once

#include <string>
#include <vector>

#include "casskit/tensor.hpp"

namespace casskit {

template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;

    explicit Parameter(std::string n, std::vector<std::size_t> shape)
        : name(std::move(n)), value(shape), grad(shape) {}

    void zero_grad() { grad.zero(); }
};

template <typename T>
using ParamRefs = std::vector<Parameter<T>*>;

template <typename T>
double grad_l2_norm(const ParamRefs<T>& params) {
    double s = 0.0;
    for (const auto* p : params)
        for (const T& g : p->grad.raw()) s += static_cast<double>(g) * static_cast<double>(g);
    return std::sqrt(s);
}

template <typename T>
void zero_grads(const ParamRefs<T>& params) {
    for (auto* p : params) p->zero_grad();
}

} // namespace casskit
