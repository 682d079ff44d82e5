#pragma once

#include <cmath>

#include "casskit/errors.hpp"

namespace casskit {

// Cosine annealing over t_max scheduler steps. Default mode clamps at
// lr_min once t_max is reached; warm_restarts repeats the cycle instead.
struct CosineSchedule {
    double lr_max = 1e-3;
    double lr_min = 1e-6;
    int t_max = 16;
    bool warm_restarts = false;
};

struct ScheduleState {
    CosineSchedule schedule;
    int step = 0;
};

inline double cosine_lr(const ScheduleState& state) {
    const CosineSchedule& s = state.schedule;
    CASSKIT_CHECK(state.step >= 0, ValidationError, "cosine_lr: step must be >= 0");
    CASSKIT_CHECK(s.t_max >= 1, ValidationError, "cosine_lr: t_max must be >= 1");
    int t = state.step;
    if (s.warm_restarts) {
        t = t % s.t_max;
    } else if (t >= s.t_max) {
        return s.lr_min;
    }
    if (t == 0) return s.lr_max;
    const double frac = static_cast<double>(t) / static_cast<double>(s.t_max);
    const double lr = s.lr_min + 0.5 * (s.lr_max - s.lr_min) * (1.0 + std::cos(M_PI * frac));
    return std::min(std::max(lr, s.lr_min), s.lr_max);
}

} // namespace casskit
