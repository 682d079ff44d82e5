#pragma once

#include <cmath>
#include <utility>

#include "casskit/errors.hpp"
#include "casskit/tensor.hpp"

namespace casskit {

// Optional output head applied to raw logits before normalization
// (ablation axis; the default pipeline contrasts raw logits).
enum class LossHead { none, softmax, sigmoid };

inline const char* to_string(LossHead h) {
    switch (h) {
        case LossHead::none: return "none";
        case LossHead::softmax: return "softmax";
        case LossHead::sigmoid: return "sigmoid";
    }
    return "?";
}

inline LossHead loss_head_from_string(const std::string& s) {
    if (s == "none") return LossHead::none;
    if (s == "softmax") return LossHead::softmax;
    if (s == "sigmoid") return LossHead::sigmoid;
    throw ConfigError("unknown loss head: " + s);
}

struct LossConfig {
    double epsilon = 1e-8;
    LossHead head = LossHead::none;
};

template <typename T>
void validate_logit_batch(const Tensor<T>& x, const char* name) {
    CASSKIT_CHECK(x.rank() == 2, ValidationError,
                  std::string(name) + ": logit batch must be rank-2, got " + x.shape_str());
    CASSKIT_CHECK(x.dim(0) >= 1, ValidationError,
                  std::string(name) + ": batch size must be >= 1");
    CASSKIT_CHECK(x.dim(1) >= 2, ValidationError,
                  std::string(name) + ": logit width must be >= 2");
    CASSKIT_CHECK(x.all_finite(), ValidationError,
                  std::string(name) + ": non-finite logit value");
}

// Row-wise x / max(||x||_2, eps). Rows with norm below eps are scaled by
// 1/eps and do not become unit vectors.
template <typename T>
Tensor<T> normalize_logits(const Tensor<T>& x, double epsilon) {
    validate_logit_batch(x, "normalize_logits");
    CASSKIT_CHECK(epsilon > 0.0, ValidationError, "normalize_logits: epsilon must be > 0");
    const std::size_t b = x.dim(0), n = x.dim(1);
    Tensor<T> out({b, n});
    for (std::size_t i = 0; i < b; ++i) {
        double ss = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double v = static_cast<double>(x.at2(i, j));
            ss += v * v;
        }
        const double denom = std::max(std::sqrt(ss), epsilon);
        for (std::size_t j = 0; j < n; ++j)
            out.at2(i, j) = static_cast<T>(static_cast<double>(x.at2(i, j)) / denom);
    }
    return out;
}

namespace detail {

// Applies the configured head to one row; identity when head == none.
template <typename T>
void apply_head_row(LossHead head, const Tensor<T>& x, std::size_t i,
                    std::vector<double>& out) {
    const std::size_t n = x.dim(1);
    out.resize(n);
    switch (head) {
        case LossHead::none:
            for (std::size_t j = 0; j < n; ++j) out[j] = static_cast<double>(x.at2(i, j));
            return;
        case LossHead::softmax: {
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < n; ++j)
                mx = std::max(mx, static_cast<double>(x.at2(i, j)));
            double sum = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                out[j] = std::exp(static_cast<double>(x.at2(i, j)) - mx);
                sum += out[j];
            }
            for (std::size_t j = 0; j < n; ++j) out[j] /= sum;
            return;
        }
        case LossHead::sigmoid:
            for (std::size_t j = 0; j < n; ++j)
                out[j] = 1.0 / (1.0 + std::exp(-static_cast<double>(x.at2(i, j))));
            return;
    }
}

// d(similarity term)/d(head output u) for one sample:
//   c = <u/du, v/dv>,  du = max(||u||, eps).
// Returns dc/du into grad_u.
inline void dcos_du(const std::vector<double>& u, const std::vector<double>& v,
                    double eps, std::vector<double>& grad_u) {
    const std::size_t n = u.size();
    double nu = 0.0, nv = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
        nu += u[j] * u[j];
        nv += v[j] * v[j];
    }
    nu = std::sqrt(nu);
    nv = std::sqrt(nv);
    const double du = std::max(nu, eps);
    const double dv = std::max(nv, eps);
    double c = 0.0;
    for (std::size_t j = 0; j < n; ++j) c += (u[j] / du) * (v[j] / dv);
    grad_u.resize(n);
    if (nu >= eps) {
        // c = <u,v>/(||u|| dv); dc/du = (v/dv - (u/||u||) c) / ||u||
        for (std::size_t j = 0; j < n; ++j)
            grad_u[j] = (v[j] / dv - (u[j] / nu) * c) / nu;
    } else {
        // denominator is the constant eps
        for (std::size_t j = 0; j < n; ++j) grad_u[j] = (v[j] / dv) / eps;
    }
}

// Chain rule through the head: g_out = J_head^T * g_in, evaluated at raw row x_i.
template <typename T>
void head_backward_row(LossHead head, const Tensor<T>& x, std::size_t i,
                       const std::vector<double>& u, const std::vector<double>& g_in,
                       std::vector<double>& g_out) {
    const std::size_t n = x.dim(1);
    g_out.resize(n);
    switch (head) {
        case LossHead::none:
            g_out = g_in;
            return;
        case LossHead::softmax: {
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += g_in[j] * u[j];
            for (std::size_t j = 0; j < n; ++j) g_out[j] = u[j] * (g_in[j] - dot);
            return;
        }
        case LossHead::sigmoid:
            for (std::size_t j = 0; j < n; ++j) g_out[j] = g_in[j] * u[j] * (1.0 - u[j]);
            return;
    }
}

} // namespace detail

// Eq-style dissimilarity: per sample 2 - 2 * <F(r), F(t)>, mean over batch.
template <typename T>
double cass_loss(const Tensor<T>& r, const Tensor<T>& t, const LossConfig& cfg = {}) {
    validate_logit_batch(r, "cass_loss: R");
    validate_logit_batch(t, "cass_loss: T");
    CASSKIT_CHECK(r.same_shape(t), ValidationError,
                  "cass_loss: shape mismatch " + r.shape_str() + " vs " + t.shape_str());
    CASSKIT_CHECK(cfg.epsilon > 0.0, ValidationError, "cass_loss: epsilon must be > 0");

    const std::size_t b = r.dim(0), n = r.dim(1);
    std::vector<double> u, v;
    double total = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
        detail::apply_head_row(cfg.head, r, i, u);
        detail::apply_head_row(cfg.head, t, i, v);
        double nu = 0.0, nv = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            nu += u[j] * u[j];
            nv += v[j] * v[j];
        }
        const double du = std::max(std::sqrt(nu), cfg.epsilon);
        const double dv = std::max(std::sqrt(nv), cfg.epsilon);
        double c = 0.0;
        for (std::size_t j = 0; j < n; ++j) c += (u[j] / du) * (v[j] / dv);
        total += 2.0 - 2.0 * c;
    }
    return total / static_cast<double>(b);
}

// Analytic gradients with respect to both raw inputs. No stop-gradient:
// both returned tensors are generically nonzero.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> cass_loss_gradients(const Tensor<T>& r, const Tensor<T>& t,
                                                    const LossConfig& cfg = {}) {
    validate_logit_batch(r, "cass_loss_gradients: R");
    validate_logit_batch(t, "cass_loss_gradients: T");
    CASSKIT_CHECK(r.same_shape(t), ValidationError,
                  "cass_loss_gradients: shape mismatch " + r.shape_str() + " vs " +
                      t.shape_str());
    CASSKIT_CHECK(cfg.epsilon > 0.0, ValidationError,
                  "cass_loss_gradients: epsilon must be > 0");

    const std::size_t b = r.dim(0), n = r.dim(1);
    Tensor<T> gr({b, n}), gt({b, n});
    std::vector<double> u, v, dcu, dcv, gu, gv;
    const double scale = -2.0 / static_cast<double>(b);
    for (std::size_t i = 0; i < b; ++i) {
        detail::apply_head_row(cfg.head, r, i, u);
        detail::apply_head_row(cfg.head, t, i, v);
        detail::dcos_du(u, v, cfg.epsilon, dcu);
        detail::dcos_du(v, u, cfg.epsilon, dcv);
        for (std::size_t j = 0; j < n; ++j) {
            dcu[j] *= scale;
            dcv[j] *= scale;
        }
        detail::head_backward_row(cfg.head, r, i, u, dcu, gu);
        detail::head_backward_row(cfg.head, t, i, v, dcv, gv);
        for (std::size_t j = 0; j < n; ++j) {
            gr.at2(i, j) = static_cast<T>(gu[j]);
            gt.at2(i, j) = static_cast<T>(gv[j]);
        }
    }
    return {std::move(gr), std::move(gt)};
}

} // namespace casskit
