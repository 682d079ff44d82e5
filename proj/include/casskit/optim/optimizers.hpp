#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "casskit/errors.hpp"
#include "casskit/nn/param.hpp"

namespace casskit {

enum class OptimizerKind { adaptive_moment, sgd };

inline const char* to_string(OptimizerKind k) {
    return k == OptimizerKind::adaptive_moment ? "adaptive_moment" : "sgd";
}

inline OptimizerKind optimizer_kind_from_string(const std::string& s) {
    if (s == "adaptive_moment" || s == "adam") return OptimizerKind::adaptive_moment;
    if (s == "sgd") return OptimizerKind::sgd;
    throw ConfigError("unknown optimizer kind: " + s);
}

// Optimizers are bound to one parameter list; per-slot state is index-aligned.
template <typename T>
class Optimizer {
public:
    virtual ~Optimizer() = default;
    virtual void step(double lr) = 0;
};

template <typename T>
class AdamOptimizer final : public Optimizer<T> {
public:
    explicit AdamOptimizer(ParamRefs<T> params, double beta1 = 0.9, double beta2 = 0.999,
                           double eps = 1e-8)
        : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
        m_.reserve(params_.size());
        v_.reserve(params_.size());
        for (const auto* p : params_) {
            m_.emplace_back(p->value.size(), 0.0);
            v_.emplace_back(p->value.size(), 0.0);
        }
    }

    void step(double lr) override {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, t_);
        const double bc2 = 1.0 - std::pow(beta2_, t_);
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& val = params_[i]->value;
            const auto& grad = params_[i]->grad;
            auto& m = m_[i];
            auto& v = v_[i];
            for (std::size_t j = 0; j < val.size(); ++j) {
                const double g = static_cast<double>(grad[j]);
                m[j] = beta1_ * m[j] + (1.0 - beta1_) * g;
                v[j] = beta2_ * v[j] + (1.0 - beta2_) * g * g;
                const double mhat = m[j] / bc1;
                const double vhat = v[j] / bc2;
                val[j] = static_cast<T>(static_cast<double>(val[j]) -
                                        lr * mhat / (std::sqrt(vhat) + eps_));
            }
        }
    }

private:
    ParamRefs<T> params_;
    double beta1_, beta2_, eps_;
    long t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

template <typename T>
class SgdOptimizer final : public Optimizer<T> {
public:
    explicit SgdOptimizer(ParamRefs<T> params, double momentum = 0.9)
        : params_(std::move(params)), momentum_(momentum) {
        for (const auto* p : params_) vel_.emplace_back(p->value.size(), 0.0);
    }

    void step(double lr) override {
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& val = params_[i]->value;
            const auto& grad = params_[i]->grad;
            auto& vel = vel_[i];
            for (std::size_t j = 0; j < val.size(); ++j) {
                vel[j] = momentum_ * vel[j] + static_cast<double>(grad[j]);
                val[j] = static_cast<T>(static_cast<double>(val[j]) - lr * vel[j]);
            }
        }
    }

private:
    ParamRefs<T> params_;
    double momentum_;
    std::vector<std::vector<double>> vel_;
};

template <typename T>
std::unique_ptr<Optimizer<T>> make_optimizer(OptimizerKind kind, ParamRefs<T> params) {
    if (kind == OptimizerKind::adaptive_moment)
        return std::make_unique<AdamOptimizer<T>>(std::move(params));
    return std::make_unique<SgdOptimizer<T>>(std::move(params));
}

} // namespace casskit
