#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "casskit/augment/augment.hpp"
#include "casskit/backbone.hpp"
#include "casskit/checkpoint.hpp"
#include "casskit/data/dataset.hpp"
#include "casskit/errors.hpp"
#include "casskit/loss/cass_loss.hpp"
#include "casskit/optim/optimizers.hpp"
#include "casskit/optim/schedule.hpp"
#include "casskit/optim/swa.hpp"
#include "casskit/report.hpp"
#include "casskit/rng.hpp"

namespace casskit {

// ---------------------------------------------------------------------------
// Collapse monitor
// ---------------------------------------------------------------------------

// Across-batch statistics of normalized logits. A branch whose outputs stop
// depending on the input shows near-zero spread and near-unit pairwise
// cosine; healthy training shows neither.
struct CollapseStats {
    double std_a = 0.0;
    double std_b = 0.0;
    double mean_cos_a = 0.0;
    double mean_cos_b = 0.0;

    static constexpr double kStdThreshold = 1e-4;
    static constexpr double kCosThreshold = 0.999;

    bool collapse_indicated() const {
        return std_a < kStdThreshold || std_b < kStdThreshold ||
               mean_cos_a > kCosThreshold || mean_cos_b > kCosThreshold;
    }
};

namespace detail {

// Mean over dimensions of the per-dimension population std across the batch,
// plus the mean pairwise cosine, both on row-normalized logits.
template <typename T>
std::pair<double, double> batch_spread(const Tensor<T>& logits, double epsilon) {
    const Tensor<T> norm = normalize_logits(logits, epsilon);
    const std::size_t b = norm.dim(0), n = norm.dim(1);
    double std_acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
        double mean = 0.0;
        for (std::size_t i = 0; i < b; ++i) mean += static_cast<double>(norm.at2(i, j));
        mean /= static_cast<double>(b);
        double var = 0.0;
        for (std::size_t i = 0; i < b; ++i) {
            const double d = static_cast<double>(norm.at2(i, j)) - mean;
            var += d * d;
        }
        std_acc += std::sqrt(var / static_cast<double>(b));
    }
    double cos_acc = 0.0;
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t k = i + 1; k < b; ++k) {
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j)
                dot += static_cast<double>(norm.at2(i, j)) * static_cast<double>(norm.at2(k, j));
            cos_acc += dot;
        }
    const double pairs = static_cast<double>(b) * static_cast<double>(b - 1) / 2.0;
    return {std_acc / static_cast<double>(n), cos_acc / pairs};
}

} // namespace detail

inline CollapseStats collapse_metric(const Tensor<float>& logits_a, const Tensor<float>& logits_b,
                                     double epsilon = 1e-8) {
    validate_logit_batch(logits_a, "collapse_metric: A");
    validate_logit_batch(logits_b, "collapse_metric: B");
    CASSKIT_CHECK(logits_a.dim(0) >= 2 && logits_b.dim(0) >= 2, ValidationError,
                  "collapse_metric: across-batch statistics undefined for batch size < 2");
    CollapseStats s;
    std::tie(s.std_a, s.mean_cos_a) = detail::batch_spread(logits_a, epsilon);
    std::tie(s.std_b, s.mean_cos_b) = detail::batch_spread(logits_b, epsilon);
    return s;
}

// Run-level rule: flagged once the instantaneous condition holds for three
// consecutive epoch checkpoints. Fed with one CollapseStats per epoch
// (taken from the last qualifying step of that epoch).
struct CollapseMonitor {
    int consecutive_needed = 3;
    std::vector<CollapseStats> epoch_series;
    int streak = 0;
    bool flagged = false;
    int first_flagged_epoch = -1;

    void record_epoch(const CollapseStats& s) {
        epoch_series.push_back(s);
        streak = s.collapse_indicated() ? streak + 1 : 0;
        if (!flagged && streak >= consecutive_needed) {
            flagged = true;
            first_flagged_epoch = static_cast<int>(epoch_series.size()) - 1;
        }
    }
};

// ---------------------------------------------------------------------------
// Pretraining configuration
// ---------------------------------------------------------------------------

struct PretrainConfig {
    BackboneSpec spec_a{BackboneFamily::conv, "tiny-conv4"};
    BackboneSpec spec_b{BackboneFamily::attention, "tiny-vit2"};
    int epochs = 100;
    int batch_size = 16;
    OptimizerKind optimizer_a = OptimizerKind::adaptive_moment;
    OptimizerKind optimizer_b = OptimizerKind::adaptive_moment;
    double base_lr = 1e-3;
    // base_lr is the schedule peak; lr_max is kept in lockstep by validate().
    CosineSchedule schedule;
    bool swa_enabled = true;
    LossConfig loss;
    AugmentVariant variant = AugmentVariant::cass;
    std::uint64_t seed = 0;

    void validate() const {
        spec_a.validate();
        spec_b.validate();
        CASSKIT_CHECK(epochs >= 1, ConfigError, "pretrain: epochs must be >= 1");
        CASSKIT_CHECK(batch_size >= 1, ConfigError, "pretrain: batch_size must be >= 1");
        CASSKIT_CHECK(base_lr > 0.0, ConfigError, "pretrain: base_lr must be > 0");
        CASSKIT_CHECK(schedule.t_max >= 1, ConfigError, "pretrain: schedule period must be >= 1");
        CASSKIT_CHECK(schedule.lr_min >= 0.0, ConfigError, "pretrain: lr_min must be >= 0");
        CASSKIT_CHECK(loss.epsilon > 0.0, ConfigError, "pretrain: loss epsilon must be > 0");
    }

    CosineSchedule effective_schedule() const {
        CosineSchedule s = schedule;
        s.lr_max = base_lr;
        return s;
    }

    nlohmann::json to_json() const {
        return nlohmann::json{{"spec_a", spec_to_json(spec_a)},
                              {"spec_b", spec_to_json(spec_b)},
                              {"epochs", epochs},
                              {"batch_size", batch_size},
                              {"optimizer_a", to_string(optimizer_a)},
                              {"optimizer_b", to_string(optimizer_b)},
                              {"base_lr", base_lr},
                              {"lr_min", schedule.lr_min},
                              {"t_max", schedule.t_max},
                              {"warm_restarts", schedule.warm_restarts},
                              {"swa_enabled", swa_enabled},
                              {"loss_epsilon", loss.epsilon},
                              {"loss_head", to_string(loss.head)},
                              {"variant", to_string(variant)},
                              {"seed", seed}};
    }
};

// ---------------------------------------------------------------------------
// One optimization step
// ---------------------------------------------------------------------------

struct StepStats {
    double loss = 0.0;
    double lr = 0.0;
    double grad_norm_a = 0.0;
    double grad_norm_b = 0.0;
    Tensor<float> logits_a;
    Tensor<float> logits_b;
    CollapseStats collapse;
    bool collapse_valid = false;
};

// Forwards ONE augmented view through BOTH branches, applies the
// dissimilarity loss on the logits, and updates both branches with the same
// learning rate. No stop-gradient on either side, no gradient clipping.
inline StepStats pretrain_step(DualBackbone& pair, const Tensor<float>& views,
                               const PretrainConfig& cfg, double lr, Optimizer<float>& opt_a,
                               Optimizer<float>& opt_b) {
    CASSKIT_CHECK(views.rank() == 4 && views.dim(1) == 3, ValidationError,
                  "pretrain_step: batch must be (B, 3, S, S), got " + views.shape_str());
    CASSKIT_CHECK(views.dim(0) >= 1, ValidationError, "pretrain_step: empty batch");

    StepStats stats;
    stats.lr = lr;
    stats.logits_a = pair.branch_a->forward(views);
    stats.logits_b = pair.branch_b->forward(views);
    CASSKIT_CHECK(stats.logits_a.all_finite() && stats.logits_b.all_finite(), NumericsError,
                  "pretrain_step: non-finite logits");
    stats.loss = cass_loss(stats.logits_a, stats.logits_b, cfg.loss);
    CASSKIT_CHECK(std::isfinite(stats.loss), NumericsError, "pretrain_step: non-finite loss");

    auto [grad_a, grad_b] = cass_loss_gradients(stats.logits_a, stats.logits_b, cfg.loss);
    auto params_a = pair.branch_a->params();
    auto params_b = pair.branch_b->params();
    zero_grads(params_a);
    zero_grads(params_b);
    pair.branch_a->backward(grad_a);
    pair.branch_b->backward(grad_b);
    stats.grad_norm_a = grad_l2_norm(params_a);
    stats.grad_norm_b = grad_l2_norm(params_b);
    opt_a.step(lr);
    opt_b.step(lr);

    if (views.dim(0) >= 2) {
        stats.collapse = collapse_metric(stats.logits_a, stats.logits_b, cfg.loss.epsilon);
        stats.collapse_valid = true;
    }
    return stats;
}

// ---------------------------------------------------------------------------
// Full pretraining run
// ---------------------------------------------------------------------------

struct PretrainResult {
    DualBackbone pair;
    TrainState state;
    RunReport report;
    CollapseMonitor monitor;
    std::string checkpoint_path;
    std::string report_path;
};

// Epoch at which weight averaging begins: last quarter of the run.
inline int swa_start_epoch(int epochs) {
    return std::min(epochs - 1, (3 * epochs) / 4);
}

namespace detail {

inline Tensor<float> assemble_views(const std::vector<LabeledSample>& images,
                                    const std::vector<std::size_t>& order, std::size_t first,
                                    std::size_t count, const AugmentationPolicy& policy,
                                    std::uint64_t seed, int epoch) {
    const std::size_t s = policy.input_size;
    Tensor<float> batch({count, 3, s, s});
    for (std::size_t k = 0; k < count; ++k) {
        const std::size_t idx = order[first + k];
        const Tensor<float> view = apply(policy, images[idx].image,
                                         derive_seed(seed, "pretrain-aug", epoch,
                                                     static_cast<int>(first + k)));
        std::copy(view.data(), view.data() + view.size(), batch.data() + k * view.size());
    }
    return batch;
}

} // namespace detail

inline PretrainResult run_pretraining(const PretrainConfig& cfg,
                                      const std::vector<LabeledSample>& images,
                                      const std::string& out_dir) {
    cfg.validate();
    CASSKIT_CHECK(!images.empty(), ConfigError, "pretrain: dataset is empty");
    CASSKIT_CHECK(images.size() >= 2, ConfigError,
                  "pretrain: need at least 2 images for collapse monitoring");
    std::filesystem::create_directories(out_dir);

    PretrainResult result;
    result.pair = pair_backbones(cfg.spec_a, cfg.spec_b, cfg.seed);
    result.checkpoint_path = (std::filesystem::path(out_dir) / "checkpoint.ckpt").string();
    result.report_path = (std::filesystem::path(out_dir) / "report.jsonl").string();

    const AugmentationPolicy policy =
        build_policy(cfg.variant, static_cast<std::size_t>(cfg.spec_a.input_size));
    CASSKIT_CHECK(policy.num_views == 1, ConfigError,
                  "pretrain: variant '" + std::string(to_string(cfg.variant)) +
                      "' produces multiple views; the single-view objective takes one");

    result.pair.branch_a->set_training(true);
    result.pair.branch_b->set_training(true);
    auto params_a = result.pair.branch_a->params();
    auto params_b = result.pair.branch_b->params();
    auto opt_a = make_optimizer(cfg.optimizer_a, params_a);
    auto opt_b = make_optimizer(cfg.optimizer_b, params_b);

    ScheduleState sched{cfg.effective_schedule(), 0};
    const int swa_start = swa_start_epoch(cfg.epochs);
    SwaState<float> swa_a, swa_b;
    swa_a.start_epoch = swa_start;
    swa_b.start_epoch = swa_start;

    const std::string digest = config_digest(cfg.to_json());
    std::vector<std::size_t> order(images.size());
    std::iota(order.begin(), order.end(), 0);

    std::int64_t global_step = 0;
    CollapseStats carried;
    bool carried_valid = false;
    const auto run_start = std::chrono::steady_clock::now();

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng shuffle_rng(derive_seed(cfg.seed, "pretrain-shuffle", epoch));
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1],
                      order[static_cast<std::size_t>(
                          shuffle_rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);

        for (std::size_t first = 0; first < order.size();
             first += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t count =
                std::min(static_cast<std::size_t>(cfg.batch_size), order.size() - first);
            const auto t0 = std::chrono::steady_clock::now();
            Tensor<float> batch =
                detail::assemble_views(images, order, first, count, policy, cfg.seed, epoch);
            StepStats stats;
            try {
                stats = pretrain_step(result.pair, batch, cfg, cosine_lr(sched), *opt_a, *opt_b);
            } catch (const NumericsError& e) {
                const std::string diag =
                    (std::filesystem::path(out_dir) / "diagnostic.ckpt").string();
                TrainState snap{global_step, sched, swa_a, swa_b, digest};
                save_checkpoint(result.pair, snap, diag);
                throw NumericsError(std::string(e.what()) + " at step " +
                                    std::to_string(global_step) + "; diagnostic snapshot at " +
                                    diag);
            }
            const auto t1 = std::chrono::steady_clock::now();

            if (stats.collapse_valid) {
                carried = stats.collapse;
                carried_valid = true;
            }
            StepRecord rec;
            rec.step = global_step;
            rec.epoch = epoch;
            rec.loss = stats.loss;
            rec.lr = stats.lr;
            rec.grad_norm_a = stats.grad_norm_a;
            rec.grad_norm_b = stats.grad_norm_b;
            rec.collapse_std_a = carried_valid ? carried.std_a : 0.0;
            rec.collapse_std_b = carried_valid ? carried.std_b : 0.0;
            rec.wall_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
            result.report.steps.push_back(rec);
            ++global_step;
        }

        sched.step += 1;
        if (cfg.swa_enabled && epoch >= swa_start) {
            swa_update(swa_a, params_a);
            swa_update(swa_b, params_b);
        }
        CASSKIT_CHECK(carried_valid, NumericsError,
                      "pretrain: no collapse statistics recorded this epoch");
        result.monitor.record_epoch(carried);
    }

    const auto run_end = std::chrono::steady_clock::now();
    result.pair.branch_a->set_training(false);
    result.pair.branch_b->set_training(false);
    result.state = TrainState{global_step, sched, swa_a, swa_b, digest};
    save_checkpoint(result.pair, result.state, result.checkpoint_path);

    result.report.summary.total_wall_s =
        std::chrono::duration<double>(run_end - run_start).count();
    result.report.summary.epochs = cfg.epochs;
    result.report.summary.config_digest = digest;
    result.report.summary.hardware_tag = hardware_tag();
    save_run_report(result.report, result.report_path);
    return result;
}

} // namespace casskit
