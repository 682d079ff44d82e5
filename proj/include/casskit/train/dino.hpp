#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "casskit/augment/augment.hpp"
#include "casskit/backbone.hpp"
#include "casskit/errors.hpp"
#include "casskit/optim/optimizers.hpp"
#include "casskit/optim/schedule.hpp"
#include "casskit/report.hpp"
#include "casskit/rng.hpp"
#include "casskit/train/pretrain.hpp"

namespace casskit {

// ---------------------------------------------------------------------------
// Self-distillation baseline: one architecture per pass, two views, EMA
// teacher with centering and sharpening. Exists for relative comparison with
// the single-pass dual-branch objective; multi-crop is deliberately omitted.
// ---------------------------------------------------------------------------

struct DinoConfig {
    BackboneSpec spec{BackboneFamily::conv, "tiny-conv4"};
    int epochs = 100;
    int batch_size = 16;
    OptimizerKind optimizer = OptimizerKind::adaptive_moment;
    double base_lr = 1e-3;
    CosineSchedule schedule;
    double teacher_momentum = 0.996;
    double center_momentum = 0.9;
    double tau_student = 0.1;
    double tau_teacher = 0.04;
    std::uint64_t seed = 0;

    void validate() const {
        spec.validate();
        CASSKIT_CHECK(epochs >= 1, ConfigError, "dino: epochs must be >= 1");
        CASSKIT_CHECK(batch_size >= 1, ConfigError, "dino: batch_size must be >= 1");
        CASSKIT_CHECK(base_lr > 0.0, ConfigError, "dino: base_lr must be > 0");
        CASSKIT_CHECK(teacher_momentum > 0.0 && teacher_momentum < 1.0, ConfigError,
                      "dino: teacher momentum must lie in (0, 1)");
        CASSKIT_CHECK(center_momentum >= 0.0 && center_momentum < 1.0, ConfigError,
                      "dino: center momentum must lie in [0, 1)");
        CASSKIT_CHECK(tau_student > 0.0 && tau_teacher > 0.0, ConfigError,
                      "dino: temperatures must be > 0");
    }

    CosineSchedule effective_schedule() const {
        CosineSchedule s = schedule;
        s.lr_max = base_lr;
        return s;
    }

    nlohmann::json to_json() const {
        return nlohmann::json{{"spec", spec_to_json(spec)},
                              {"epochs", epochs},
                              {"batch_size", batch_size},
                              {"optimizer", to_string(optimizer)},
                              {"base_lr", base_lr},
                              {"lr_min", schedule.lr_min},
                              {"t_max", schedule.t_max},
                              {"warm_restarts", schedule.warm_restarts},
                              {"teacher_momentum", teacher_momentum},
                              {"center_momentum", center_momentum},
                              {"tau_student", tau_student},
                              {"tau_teacher", tau_teacher},
                              {"seed", seed}};
    }
};

struct DinoBaselineState {
    NetworkPtr<float> student;
    NetworkPtr<float> teacher;
    std::vector<double> center;
    DinoConfig cfg;
};

// Teacher starts as an exact copy of the student: separate parameter
// storage, equal values (same deterministic build).
inline DinoBaselineState init_dino(const DinoConfig& cfg) {
    cfg.validate();
    DinoBaselineState state;
    state.cfg = cfg;
    state.student = build_backbone(cfg.spec, derive_seed(cfg.seed, "dino-init"));
    state.teacher = build_backbone(cfg.spec, derive_seed(cfg.seed, "dino-init"));
    // Student trains; the teacher stays in eval mode so EMA is the only
    // path that ever moves its parameters (batch-stat buffers included).
    state.student->set_training(true);
    state.teacher->set_training(false);
    state.center.assign(state.student->logit_width(), 0.0);
    return state;
}

namespace detail {

// Row-wise softmax of logits/tau in double precision; optional centering.
template <typename T>
std::vector<std::vector<double>> sharpen(const Tensor<T>& logits, double tau,
                                         const std::vector<double>* center) {
    const std::size_t b = logits.dim(0), n = logits.dim(1);
    std::vector<std::vector<double>> out(b, std::vector<double>(n));
    for (std::size_t i = 0; i < b; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) {
            double v = static_cast<double>(logits.at2(i, j));
            if (center) v -= (*center)[j];
            out[i][j] = v / tau;
            mx = std::max(mx, out[i][j]);
        }
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            out[i][j] = std::exp(out[i][j] - mx);
            sum += out[i][j];
        }
        for (std::size_t j = 0; j < n; ++j) out[i][j] /= sum;
    }
    return out;
}

// Mean over batch of -sum_j p[j] log q[j], with q from stable log-softmax.
template <typename T>
double cross_entropy_vs(const std::vector<std::vector<double>>& p, const Tensor<T>& s_logits,
                        double tau) {
    const std::size_t b = s_logits.dim(0), n = s_logits.dim(1);
    double total = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j)
            mx = std::max(mx, static_cast<double>(s_logits.at2(i, j)) / tau);
        double lse = 0.0;
        for (std::size_t j = 0; j < n; ++j)
            lse += std::exp(static_cast<double>(s_logits.at2(i, j)) / tau - mx);
        lse = mx + std::log(lse);
        for (std::size_t j = 0; j < n; ++j)
            total -= p[i][j] * (static_cast<double>(s_logits.at2(i, j)) / tau - lse);
    }
    return total / static_cast<double>(b);
}

// d/ds of the term above: (softmax(s/tau) - p) / (tau * B), times weight.
template <typename T>
Tensor<T> ce_grad_wrt_student(const std::vector<std::vector<double>>& p,
                              const Tensor<T>& s_logits, double tau, double weight) {
    const std::size_t b = s_logits.dim(0), n = s_logits.dim(1);
    const auto q = sharpen(s_logits, tau, nullptr);
    Tensor<T> g({b, n});
    const double scale = weight / (tau * static_cast<double>(b));
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < n; ++j)
            g.at2(i, j) = static_cast<T>(scale * (q[i][j] - p[i][j]));
    return g;
}

} // namespace detail

// One baseline step. Gradients flow only through the student; the teacher
// moves by EMA of the freshly updated student, the center by EMA of the
// pre-update teacher batch mean over both views.
inline StepStats dino_baseline_step(DinoBaselineState& state,
                                    const std::vector<Tensor<float>>& views, double lr,
                                    Optimizer<float>& opt) {
    CASSKIT_CHECK(views.size() == 2, ProtocolError,
                  "dino_baseline_step: self-distillation needs exactly two views, got " +
                      std::to_string(views.size()));
    CASSKIT_CHECK(views[0].rank() == 4 && views[0].same_shape(views[1]), ValidationError,
                  "dino_baseline_step: views must be equal-shape (B, 3, S, S) batches");
    const DinoConfig& cfg = state.cfg;

    auto student_params = state.student->params();
    auto teacher_params = state.teacher->params();
    zero_grads(student_params);
    zero_grads(teacher_params);

    // Teacher passes (no backward ever runs on this network).
    const Tensor<float> t1 = state.teacher->forward(views[0]);
    const Tensor<float> t2 = state.teacher->forward(views[1]);
    CASSKIT_CHECK(t1.all_finite() && t2.all_finite(), NumericsError,
                  "dino_baseline_step: non-finite teacher logits");
    const auto p1 = detail::sharpen(t1, cfg.tau_teacher, &state.center);
    const auto p2 = detail::sharpen(t2, cfg.tau_teacher, &state.center);

    // Pre-update batch mean of raw teacher outputs, both views.
    const std::size_t b = t1.dim(0), n = t1.dim(1);
    std::vector<double> batch_mean(n, 0.0);
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < n; ++j)
            batch_mean[j] += static_cast<double>(t1.at2(i, j)) + static_cast<double>(t2.at2(i, j));
    for (std::size_t j = 0; j < n; ++j) batch_mean[j] /= static_cast<double>(2 * b);

    // Student passes, crossed with the opposite teacher view. Each backward
    // reuses the caches of the forward right before it; gradients accumulate.
    StepStats stats;
    stats.lr = lr;
    const Tensor<float> s1 = state.student->forward(views[0]);
    CASSKIT_CHECK(s1.all_finite(), NumericsError, "dino_baseline_step: non-finite student logits");
    state.student->backward(detail::ce_grad_wrt_student(p2, s1, cfg.tau_student, 0.5));
    const Tensor<float> s2 = state.student->forward(views[1]);
    CASSKIT_CHECK(s2.all_finite(), NumericsError, "dino_baseline_step: non-finite student logits");
    state.student->backward(detail::ce_grad_wrt_student(p1, s2, cfg.tau_student, 0.5));

    stats.loss = 0.5 * (detail::cross_entropy_vs(p2, s1, cfg.tau_student) +
                        detail::cross_entropy_vs(p1, s2, cfg.tau_student));
    CASSKIT_CHECK(std::isfinite(stats.loss), NumericsError, "dino_baseline_step: non-finite loss");
    stats.grad_norm_a = grad_l2_norm(student_params);
    stats.grad_norm_b = 0.0;
    opt.step(lr);

    // EMA from the *updated* student.
    const double m = cfg.teacher_momentum;
    for (std::size_t k = 0; k < teacher_params.size(); ++k) {
        auto& tv = teacher_params[k]->value;
        const auto& sv = student_params[k]->value;
        for (std::size_t j = 0; j < tv.size(); ++j)
            tv[j] = static_cast<float>(m * static_cast<double>(tv[j]) +
                                       (1.0 - m) * static_cast<double>(sv[j]));
    }
    for (std::size_t j = 0; j < n; ++j)
        state.center[j] =
            cfg.center_momentum * state.center[j] + (1.0 - cfg.center_momentum) * batch_mean[j];

    stats.logits_a = s1;
    stats.logits_b = t1;
    if (b >= 2) {
        stats.collapse = collapse_metric(s1, t1);
        stats.collapse_valid = true;
    }
    return stats;
}

struct DinoResult {
    DinoBaselineState state;
    RunReport report;
    std::string report_path;
};

// Baseline pass over the dataset: same loop shape as the main pretrainer
// (per-epoch shuffle, per-epoch scheduler step) but two augmented views per
// image and one trained architecture per run.
inline DinoResult run_dino_pretraining(const DinoConfig& cfg,
                                       const std::vector<LabeledSample>& images,
                                       const std::string& out_dir) {
    cfg.validate();
    CASSKIT_CHECK(!images.empty(), ConfigError, "dino: dataset is empty");
    std::filesystem::create_directories(out_dir);

    DinoResult result;
    result.state = init_dino(cfg);
    result.report_path = (std::filesystem::path(out_dir) / "report.jsonl").string();

    const AugmentationPolicy policy =
        build_policy(AugmentVariant::dino_like, static_cast<std::size_t>(cfg.spec.input_size));
    auto opt = make_optimizer(cfg.optimizer, result.state.student->params());
    ScheduleState sched{cfg.effective_schedule(), 0};
    const std::string digest = config_digest(cfg.to_json());

    std::vector<std::size_t> order(images.size());
    std::iota(order.begin(), order.end(), 0);
    const std::size_t s = policy.input_size;

    std::int64_t global_step = 0;
    const auto run_start = std::chrono::steady_clock::now();
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng shuffle_rng(derive_seed(cfg.seed, "dino-shuffle", epoch));
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1],
                      order[static_cast<std::size_t>(
                          shuffle_rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);

        for (std::size_t first = 0; first < order.size();
             first += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t count =
                std::min(static_cast<std::size_t>(cfg.batch_size), order.size() - first);
            const auto t0 = std::chrono::steady_clock::now();
            std::vector<Tensor<float>> batches(2, Tensor<float>({count, 3, s, s}));
            for (std::size_t k = 0; k < count; ++k) {
                const auto views =
                    apply_views(policy, images[order[first + k]].image,
                                derive_seed(cfg.seed, "dino-aug", epoch,
                                            static_cast<int>(first + k)));
                for (int v = 0; v < 2; ++v)
                    std::copy(views[v].data(), views[v].data() + views[v].size(),
                              batches[v].data() + k * views[v].size());
            }
            const StepStats stats =
                dino_baseline_step(result.state, batches, cosine_lr(sched), *opt);
            const auto t1 = std::chrono::steady_clock::now();

            StepRecord rec;
            rec.step = global_step;
            rec.epoch = epoch;
            rec.loss = stats.loss;
            rec.lr = stats.lr;
            rec.grad_norm_a = stats.grad_norm_a;
            rec.grad_norm_b = stats.grad_norm_b;
            rec.collapse_std_a = stats.collapse_valid ? stats.collapse.std_a : 0.0;
            rec.collapse_std_b = stats.collapse_valid ? stats.collapse.std_b : 0.0;
            rec.wall_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
            result.report.steps.push_back(rec);
            ++global_step;
        }
        sched.step += 1;
    }
    const auto run_end = std::chrono::steady_clock::now();

    result.report.summary.total_wall_s =
        std::chrono::duration<double>(run_end - run_start).count();
    result.report.summary.epochs = cfg.epochs;
    result.report.summary.config_digest = digest;
    result.report.summary.hardware_tag = hardware_tag();
    save_run_report(result.report, result.report_path);
    return result;
}

} // namespace casskit
