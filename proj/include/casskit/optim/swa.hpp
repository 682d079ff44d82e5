#pragma once

#include <cstdint>
#include <vector>

#include "casskit/errors.hpp"
#include "casskit/nn/param.hpp"

namespace casskit {

// Running parameter average. Sums are kept in double so the materialized
// average equals the brute-force mean of the recorded snapshots.
template <typename T>
struct SwaState {
    std::vector<Tensor<double>> sums;
    std::int64_t count = 0;
    int start_epoch = 0;

    bool empty() const { return count == 0; }
};

template <typename T>
void swa_update(SwaState<T>& state, const ParamRefs<T>& params) {
    if (state.sums.empty()) {
        state.sums.reserve(params.size());
        for (const auto* p : params) state.sums.emplace_back(p->value.shape());
    }
    CASSKIT_CHECK(state.sums.size() == params.size(), ValidationError,
                  "swa_update: parameter count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        CASSKIT_CHECK(state.sums[i].shape() == params[i]->value.shape(), ValidationError,
                      "swa_update: shape mismatch for " + params[i]->name);
        auto& sum = state.sums[i];
        const auto& v = params[i]->value;
        for (std::size_t j = 0; j < v.size(); ++j)
            sum[j] += static_cast<double>(v[j]);
    }
    ++state.count;
}

// Arithmetic mean of the snapshots recorded so far.
template <typename T>
std::vector<Tensor<T>> swa_average(const SwaState<T>& state) {
    CASSKIT_CHECK(state.count > 0, ValidationError, "swa_average: no snapshots recorded");
    std::vector<Tensor<T>> avg;
    avg.reserve(state.sums.size());
    for (const auto& sum : state.sums) {
        Tensor<T> t(sum.shape());
        for (std::size_t j = 0; j < sum.size(); ++j)
            t[j] = static_cast<T>(sum[j] / static_cast<double>(state.count));
        avg.push_back(std::move(t));
    }
    return avg;
}

} // namespace casskit
