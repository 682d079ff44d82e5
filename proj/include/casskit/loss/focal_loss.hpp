#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "casskit/errors.hpp"
#include "casskit/tensor.hpp"

namespace casskit {

struct FocalConfig {
    double alpha = 1.0;
    double gamma = 2.0;
    std::vector<double> class_weights; // empty means all ones

    void validate(std::size_t num_classes) const {
        CASSKIT_CHECK(gamma >= 0.0, ValidationError, "focal gamma must be >= 0");
        CASSKIT_CHECK(alpha > 0.0, ValidationError, "focal alpha must be positive");
        if (!class_weights.empty()) {
            CASSKIT_CHECK(class_weights.size() == num_classes, ValidationError,
                          "class weight count does not match class count");
            bool any_positive = false;
            for (double w : class_weights) {
                CASSKIT_CHECK(std::isfinite(w) && w >= 0.0, ValidationError,
                              "class weights must be finite and nonnegative");
                any_positive = any_positive || w > 0.0;
            }
            CASSKIT_CHECK(any_positive, ValidationError,
                          "at least one class weight must be positive");
        }
    }

    double weight(std::size_t c) const {
        return class_weights.empty() ? 1.0 : class_weights[c];
    }
};

enum class WeightNormalization { inverse_frequency, raw_frequency };

struct WeightFlags {
    std::vector<std::size_t> zero_count_classes;
};

// Min-max normalized inverse class frequencies, clamped below so the
// majority class is down-weighted but never erased. Balanced counts
// degenerate min-max to a zero range; every class then weighs 1. A
// zero-count class has no defined frequency and gets the maximal weight
// 1 plus a flag. The raw-frequency mode exists for comparison runs and
// min-max normalizes the counts themselves.
inline std::vector<double> class_weights_from_distribution(
    const std::vector<std::int64_t>& counts, double floor_value = 0.05,
    WeightNormalization mode = WeightNormalization::inverse_frequency,
    WeightFlags* flags = nullptr) {
    CASSKIT_CHECK(counts.size() >= 2, ConfigError,
                  "class weights need at least 2 classes");
    CASSKIT_CHECK(floor_value > 0.0, ConfigError, "weight floor must be positive");
    std::int64_t total = 0;
    for (std::int64_t c : counts) {
        CASSKIT_CHECK(c >= 0, ConfigError, "class counts must be nonnegative");
        total += c;
    }
    CASSKIT_CHECK(total > 0, ConfigError, "class counts are all zero");

    std::vector<double> base(counts.size(), 0.0);
    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < counts.size(); ++c) {
        if (counts[c] == 0) {
            if (flags) flags->zero_count_classes.push_back(c);
            continue;
        }
        base[c] = mode == WeightNormalization::inverse_frequency
                      ? 1.0 / static_cast<double>(counts[c])
                      : static_cast<double>(counts[c]);
        lo = std::min(lo, base[c]);
        hi = std::max(hi, base[c]);
    }

    std::vector<double> weights(counts.size(), 1.0);
    if (hi > lo) {
        for (std::size_t c = 0; c < counts.size(); ++c) {
            if (counts[c] == 0) continue; // flagged, weight stays 1
            weights[c] = std::max(floor_value, (base[c] - lo) / (hi - lo));
        }
    }
    return weights;
}

namespace detail {

// d/dp of w·α·(1−p)^γ·(−log p), with the removable singularities at
// p = 1 handled explicitly.
inline double focal_dldp(double p, double w, double alpha, double gamma) {
    if (gamma == 0.0) return -w * alpha / p;
    const double q = 1.0 - p;
    if (q <= 1e-15) return 0.0;
    return w * alpha * (gamma * std::pow(q, gamma - 1.0) * std::log(p) -
                        std::pow(q, gamma) / p);
}

inline double focal_term(double p, double w, double alpha, double gamma) {
    const double safe_p = std::max(p, 1e-12);
    return w * alpha * std::pow(1.0 - p, gamma) * (-std::log(safe_p));
}

} // namespace detail

// Focal loss over explicit probability rows (each row a simplex point).
template <typename T>
double focal_loss(const Tensor<T>& probs, const std::vector<int>& targets,
                  const FocalConfig& cfg) {
    CASSKIT_CHECK(probs.rank() == 2, ValidationError, "probabilities must be (B, K)");
    const std::size_t b = probs.dim(0), k = probs.dim(1);
    CASSKIT_CHECK(targets.size() == b, ValidationError,
                  "target count does not match batch size");
    cfg.validate(k);
    for (std::size_t r = 0; r < b; ++r) {
        double sum = 0.0;
        for (std::size_t c = 0; c < k; ++c) {
            const double p = probs.at2(r, c);
            CASSKIT_CHECK(std::isfinite(p) && p >= 0.0, ValidationError,
                          "probabilities must be finite and nonnegative");
            sum += p;
        }
        CASSKIT_CHECK(std::abs(sum - 1.0) <= 1e-5, ValidationError,
                      "probability row does not sum to 1");
    }
    double acc = 0.0;
    for (std::size_t r = 0; r < b; ++r) {
        const int y = targets[r];
        CASSKIT_CHECK(y >= 0 && static_cast<std::size_t>(y) < k, ValidationError,
                      "target class out of range");
        const auto yc = static_cast<std::size_t>(y);
        acc += detail::focal_term(probs.at2(r, yc), cfg.weight(yc), cfg.alpha, cfg.gamma);
    }
    return acc / static_cast<double>(b);
}

// Training entry point: softmax over logits, focal terms, mean over the
// batch. Fills dlogits (same shape) when requested.
template <typename T>
double focal_loss_with_logits(const Tensor<T>& logits, const std::vector<int>& targets,
                              const FocalConfig& cfg, Tensor<T>* dlogits = nullptr) {
    CASSKIT_CHECK(logits.rank() == 2, ValidationError, "logits must be (B, K)");
    const std::size_t b = logits.dim(0), k = logits.dim(1);
    CASSKIT_CHECK(targets.size() == b, ValidationError,
                  "target count does not match batch size");
    cfg.validate(k);
    if (dlogits) *dlogits = Tensor<T>(logits.shape());

    double acc = 0.0;
    std::vector<double> p(k);
    for (std::size_t r = 0; r < b; ++r) {
        const int y = targets[r];
        CASSKIT_CHECK(y >= 0 && static_cast<std::size_t>(y) < k, ValidationError,
                      "target class out of range");
        const auto yc = static_cast<std::size_t>(y);
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < k; ++c)
            mx = std::max(mx, static_cast<double>(logits.at2(r, c)));
        double z = 0.0;
        for (std::size_t c = 0; c < k; ++c) {
            p[c] = std::exp(static_cast<double>(logits.at2(r, c)) - mx);
            z += p[c];
        }
        for (std::size_t c = 0; c < k; ++c) p[c] /= z;

        const double w = cfg.weight(yc);
        acc += detail::focal_term(p[yc], w, cfg.alpha, cfg.gamma);
        if (dlogits) {
            const double dldp = detail::focal_dldp(p[yc], w, cfg.alpha, cfg.gamma);
            for (std::size_t c = 0; c < k; ++c) {
                const double delta = c == yc ? 1.0 : 0.0;
                dlogits->at2(r, c) = static_cast<T>(dldp * p[yc] * (delta - p[c]) /
                                                    static_cast<double>(b));
            }
        }
    }
    return acc / static_cast<double>(b);
}

// Multi-label mode: element-wise sigmoid, one binary focal term per
// class, class weight applied to that class's column, mean over all
// B·K terms.
template <typename T>
double focal_loss_multilabel(const Tensor<T>& logits,
                             const std::vector<std::vector<int>>& targets,
                             const FocalConfig& cfg, Tensor<T>* dlogits = nullptr) {
    CASSKIT_CHECK(logits.rank() == 2, ValidationError, "logits must be (B, K)");
    const std::size_t b = logits.dim(0), k = logits.dim(1);
    CASSKIT_CHECK(targets.size() == b, ValidationError,
                  "target count does not match batch size");
    cfg.validate(k);
    if (dlogits) *dlogits = Tensor<T>(logits.shape());

    double acc = 0.0;
    for (std::size_t r = 0; r < b; ++r) {
        CASSKIT_CHECK(targets[r].size() == k, ValidationError,
                      "multi-label target width mismatch");
        for (std::size_t c = 0; c < k; ++c) {
            const int yv = targets[r][c];
            CASSKIT_CHECK(yv == 0 || yv == 1, ValidationError,
                          "multi-label targets must be binary");
            const double z = logits.at2(r, c);
            const double p = 1.0 / (1.0 + std::exp(-z));
            const double t = yv ? p : 1.0 - p;
            const double w = cfg.weight(c);
            acc += detail::focal_term(t, w, cfg.alpha, cfg.gamma);
            if (dlogits) {
                const double dldt = detail::focal_dldp(t, w, cfg.alpha, cfg.gamma);
                const double dtdz = (yv ? 1.0 : -1.0) * p * (1.0 - p);
                dlogits->at2(r, c) = static_cast<T>(
                    dldt * dtdz / static_cast<double>(b * k));
            }
        }
    }
    return acc / static_cast<double>(b * k);
}

} // namespace casskit
