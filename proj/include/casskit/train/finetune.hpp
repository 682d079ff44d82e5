#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "casskit/augment/augment.hpp"
#include "casskit/backbone.hpp"
#include "casskit/checkpoint.hpp"
#include "casskit/data/dataset.hpp"
#include "casskit/data/metrics.hpp"
#include "casskit/errors.hpp"
#include "casskit/loss/focal_loss.hpp"
#include "casskit/optim/optimizers.hpp"
#include "casskit/optim/schedule.hpp"
#include "casskit/report.hpp"
#include "casskit/rng.hpp"

namespace casskit {

// ---------------------------------------------------------------------------
// Supervised fine-tuning: whole-network training of one pretrained branch
// with a fresh class head, class-distribution-normalized focal loss, and
// validation-loss early stopping. No linear probe, nothing frozen.
// ---------------------------------------------------------------------------

enum class WeightSelection { swa, final_weights };

inline const char* to_string(WeightSelection w) {
    return w == WeightSelection::swa ? "swa" : "final";
}

inline WeightSelection weight_selection_from_string(const std::string& s) {
    if (s == "swa") return WeightSelection::swa;
    if (s == "final") return WeightSelection::final_weights;
    throw ConfigError("unknown weight selection '" + s + "' (expected swa|final)");
}

struct FinetuneConfig {
    int max_epochs = 50;
    int patience = 5;
    int batch_size = 16;
    double lr = 3e-4;
    FocalConfig focal; // empty class_weights: derived from the training view
    double label_fraction = 1.0;
    std::uint64_t seed = 0;
    // Empty checkpoint path trains from random initialization (the
    // supervised-from-scratch baseline); `spec` is only consulted then.
    std::string checkpoint_path;
    std::string branch = "a";
    WeightSelection weights = WeightSelection::swa;
    BackboneSpec spec{BackboneFamily::conv, "tiny-conv4"};
    AugmentVariant augment = AugmentVariant::cass;

    void validate() const {
        CASSKIT_CHECK(max_epochs >= 1, ConfigError, "finetune: max_epochs must be >= 1");
        CASSKIT_CHECK(patience >= 1, ConfigError, "finetune: patience must be >= 1");
        CASSKIT_CHECK(batch_size >= 1, ConfigError, "finetune: batch_size must be >= 1");
        CASSKIT_CHECK(lr > 0.0, ConfigError, "finetune: lr must be > 0");
        CASSKIT_CHECK(label_fraction > 0.0 && label_fraction <= 1.0, ConfigError,
                      "finetune: label_fraction must lie in (0, 1]");
        CASSKIT_CHECK(branch == "a" || branch == "b", ConfigError,
                      "finetune: branch must be 'a' or 'b'");
        if (checkpoint_path.empty()) spec.validate();
    }

    // Annealing covers the whole run and decays to zero.
    CosineSchedule annealing() const { return CosineSchedule{lr, 0.0, max_epochs, false}; }

    nlohmann::json to_json() const {
        return nlohmann::json{{"max_epochs", max_epochs},
                              {"patience", patience},
                              {"batch_size", batch_size},
                              {"lr", lr},
                              {"alpha", focal.alpha},
                              {"gamma", focal.gamma},
                              {"class_weights", focal.class_weights},
                              {"label_fraction", label_fraction},
                              {"seed", seed},
                              {"checkpoint", checkpoint_path},
                              {"branch", branch},
                              {"weights", to_string(weights)},
                              {"spec", spec_to_json(spec)},
                              {"augment", to_string(augment)}};
    }
};

struct FinetuneResult {
    NetworkPtr<float> model;
    MetricRecord record;
    RunReport report;
    std::vector<double> val_losses; // one entry per epoch actually run
    int epochs_run = 0;
    int best_epoch = 0; // ordinal within the run; first epoch = 1
    std::string report_path;
};

// Strict-improvement early stopping: replays the patience rule over a
// validation-loss series and reports (epochs run, best epoch ordinal).
// Improvement means a loss lower than the best so far by at least min_delta.
struct EarlyStopOutcome {
    int epochs_run = 0;
    int best_epoch = 0;
};

inline EarlyStopOutcome replay_early_stopping(const std::vector<double>& val_losses, int patience,
                                              double min_delta = 1e-6) {
    CASSKIT_CHECK(patience >= 1, ConfigError, "early stopping: patience must be >= 1");
    EarlyStopOutcome out;
    double best = std::numeric_limits<double>::infinity();
    int streak = 0;
    for (std::size_t i = 0; i < val_losses.size(); ++i) {
        if (val_losses[i] < best - min_delta) {
            best = val_losses[i];
            out.best_epoch = static_cast<int>(i) + 1;
            streak = 0;
        } else {
            ++streak;
        }
        out.epochs_run = static_cast<int>(i) + 1;
        if (streak >= patience) break;
    }
    return out;
}

namespace detail {

// Branch spec recorded in a checkpoint header, retargeted to a new class
// head and forced to random initialization (weights are copied explicitly).
inline BackboneSpec checkpoint_branch_spec(const std::string& path, const std::string& branch,
                                           std::size_t num_classes) {
    RawCheckpoint raw = read_raw_checkpoint(path);
    BackboneSpec spec = spec_from_json(raw.header.at(branch == "a" ? "spec_a" : "spec_b"));
    spec.logit_width = num_classes;
    spec.init_mode = InitMode::random;
    spec.pretrained_path.clear();
    return spec;
}

// Averaged-weight initialization with the same fresh-head rule as the
// final-weight loader: head entries that are absent or shaped for a
// different class count keep their fresh initialization.
inline void load_swa_into(Network<float>& net, const std::string& path,
                          const std::string& branch) {
    const auto weights = load_swa_weights(path, branch);
    CASSKIT_CHECK(!weights.empty(), CheckpointError,
                  "checkpoint " + path + " holds no averaged weights for branch " + branch);
    for (auto* p : net.params()) {
        const auto it = weights.find(p->name);
        const bool is_head = p->name.rfind("head.", 0) == 0;
        if (it == weights.end()) {
            CASSKIT_CHECK(is_head, CheckpointError,
                          "checkpoint " + path + " lacks averaged entry " + p->name);
            continue;
        }
        if (!it->second.same_shape(p->value)) {
            CASSKIT_CHECK(is_head, CheckpointError,
                          "averaged entry " + p->name + " has shape " + it->second.shape_str() +
                              ", expected " + p->value.shape_str());
            continue;
        }
        p->value = it->second;
    }
}

struct EvalBatch {
    Tensor<float> images;
    std::vector<int> labels;
    std::vector<std::vector<int>> multi_labels;
};

inline EvalBatch gather_eval_batch(const Dataset& ds, const std::vector<std::size_t>& ids,
                                   std::size_t first, std::size_t count, std::size_t input_size) {
    EvalBatch batch;
    batch.images = Tensor<float>({count, 3, input_size, input_size});
    for (std::size_t k = 0; k < count; ++k) {
        const auto& sample = ds.samples[ids[first + k]];
        const Tensor<float> img = eval_transform(sample.image, input_size);
        std::copy(img.data(), img.data() + img.size(), batch.images.data() + k * img.size());
        batch.labels.push_back(sample.label);
        batch.multi_labels.push_back(sample.multi_label);
    }
    return batch;
}

} // namespace detail

// Mean focal loss of the model over a fixed id list (no parameter updates).
inline double evaluate_loss(Network<float>& net, const Dataset& ds,
                            const std::vector<std::size_t>& ids, const FocalConfig& focal,
                            std::size_t input_size, int batch_size) {
    CASSKIT_CHECK(!ids.empty(), ValidationError, "evaluate_loss: empty id list");
    const bool was_training = net.is_training();
    net.set_training(false);
    double total = 0.0;
    for (std::size_t first = 0; first < ids.size(); first += static_cast<std::size_t>(batch_size)) {
        const std::size_t count =
            std::min(static_cast<std::size_t>(batch_size), ids.size() - first);
        const auto batch = detail::gather_eval_batch(ds, ids, first, count, input_size);
        const Tensor<float> logits = net.forward(batch.images);
        const double loss = ds.multi_label
                                ? focal_loss_multilabel(logits, batch.multi_labels, focal)
                                : focal_loss_with_logits(logits, batch.labels, focal);
        total += loss * static_cast<double>(count);
    }
    net.set_training(was_training);
    return total / static_cast<double>(ids.size());
}

// Test-set predictions: argmax for single-label, per-class sigmoid at 0.5
// (logit sign) for multi-label.
inline MetricReport evaluate_metrics(Network<float>& net, const Dataset& ds,
                                     const std::vector<std::size_t>& ids, std::size_t input_size,
                                     int batch_size) {
    CASSKIT_CHECK(!ids.empty(), ValidationError, "evaluate_metrics: empty id list");
    const bool was_training = net.is_training();
    net.set_training(false);
    const std::size_t k = static_cast<std::size_t>(ds.num_classes);
    std::vector<int> preds, labels;
    std::vector<std::vector<int>> mpreds, mlabels;
    for (std::size_t first = 0; first < ids.size(); first += static_cast<std::size_t>(batch_size)) {
        const std::size_t count =
            std::min(static_cast<std::size_t>(batch_size), ids.size() - first);
        const auto batch = detail::gather_eval_batch(ds, ids, first, count, input_size);
        const Tensor<float> logits = net.forward(batch.images);
        for (std::size_t i = 0; i < count; ++i) {
            if (ds.multi_label) {
                std::vector<int> row(k, 0);
                for (std::size_t j = 0; j < k; ++j) row[j] = logits.at2(i, j) > 0.0f ? 1 : 0;
                mpreds.push_back(std::move(row));
                mlabels.push_back(batch.multi_labels[i]);
            } else {
                std::size_t arg = 0;
                for (std::size_t j = 1; j < k; ++j)
                    if (logits.at2(i, j) > logits.at2(i, arg)) arg = j;
                preds.push_back(static_cast<int>(arg));
                labels.push_back(batch.labels[i]);
            }
        }
    }
    net.set_training(was_training);
    const ConfusionCounts counts = ds.multi_label
                                       ? confusion_from_multilabel(mpreds, mlabels, ds.num_classes)
                                       : confusion_from_predictions(preds, labels, ds.num_classes);
    return compute_metrics(counts);
}

inline FinetuneResult finetune(const FinetuneConfig& cfg, const Dataset& ds,
                               const DatasetSplit& split, const std::string& out_dir = "") {
    cfg.validate();
    const LabelFractionView view = label_fraction_view(ds, split, cfg.label_fraction, cfg.seed);
    CASSKIT_CHECK(!view.selected.empty(), ConfigError, "finetune: empty label-fraction view");
    CASSKIT_CHECK(!split.val.empty(), ConfigError, "finetune: empty validation split");
    CASSKIT_CHECK(!split.test.empty(), ConfigError, "finetune: empty test split");

    // Network: checkpoint branch spec (or the configured spec for the
    // from-scratch baseline) with a fresh head sized to the class count.
    BackboneSpec spec;
    if (cfg.checkpoint_path.empty()) {
        spec = cfg.spec;
        spec.logit_width = ds.num_classes;
        spec.init_mode = InitMode::random;
    } else {
        spec = detail::checkpoint_branch_spec(cfg.checkpoint_path, cfg.branch, ds.num_classes);
    }
    FinetuneResult result;
    result.model = build_backbone(spec, derive_seed(cfg.seed, "finetune-init"));
    if (!cfg.checkpoint_path.empty()) {
        if (cfg.weights == WeightSelection::swa)
            detail::load_swa_into(*result.model, cfg.checkpoint_path, cfg.branch);
        else
            load_pretrained_into(*result.model, cfg.checkpoint_path, cfg.branch,
                                 static_cast<std::size_t>(ds.num_classes));
    }

    // Class-distribution-normalized weights from the labels actually used.
    FocalConfig focal = cfg.focal;
    if (focal.class_weights.empty()) {
        std::vector<std::int64_t> counts(static_cast<std::size_t>(ds.num_classes), 0);
        for (std::size_t id : view.selected) {
            const auto& sample = ds.samples[id];
            if (ds.multi_label) {
                for (std::size_t c = 0; c < counts.size(); ++c)
                    counts[c] += sample.multi_label[c];
            } else {
                counts[static_cast<std::size_t>(sample.label)] += 1;
            }
        }
        focal.class_weights = class_weights_from_distribution(counts);
    }

    const std::size_t input_size = static_cast<std::size_t>(spec.input_size);
    const AugmentationPolicy policy = build_policy(cfg.augment, input_size);
    CASSKIT_CHECK(policy.num_views == 1, ConfigError,
                  "finetune: augmentation variant must produce a single view");

    result.model->set_training(true);
    auto params = result.model->params();
    auto opt = make_optimizer(OptimizerKind::adaptive_moment, params);
    ScheduleState sched{cfg.annealing(), 0};
    const std::string digest = config_digest(cfg.to_json());

    std::vector<std::size_t> order(view.selected);
    std::vector<Tensor<float>> best_params = snapshot_params(params);
    double best_loss = std::numeric_limits<double>::infinity();
    int streak = 0;
    std::int64_t global_step = 0;
    const auto run_start = std::chrono::steady_clock::now();

    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        const double lr = cosine_lr(sched);
        Rng shuffle_rng(derive_seed(cfg.seed, "finetune-shuffle", epoch));
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1],
                      order[static_cast<std::size_t>(
                          shuffle_rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);

        for (std::size_t first = 0; first < order.size();
             first += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t count =
                std::min(static_cast<std::size_t>(cfg.batch_size), order.size() - first);
            const auto t0 = std::chrono::steady_clock::now();
            Tensor<float> images({count, 3, input_size, input_size});
            std::vector<int> labels;
            std::vector<std::vector<int>> multi_labels;
            for (std::size_t k = 0; k < count; ++k) {
                const auto& sample = ds.samples[order[first + k]];
                const Tensor<float> img =
                    apply(policy, sample.image,
                          derive_seed(cfg.seed, "finetune-aug", epoch,
                                      static_cast<int>(first + k)));
                std::copy(img.data(), img.data() + img.size(), images.data() + k * img.size());
                labels.push_back(sample.label);
                multi_labels.push_back(sample.multi_label);
            }

            const Tensor<float> logits = result.model->forward(images);
            CASSKIT_CHECK(logits.all_finite(), NumericsError, "finetune: non-finite logits");
            Tensor<float> dlogits;
            const double loss = ds.multi_label
                                    ? focal_loss_multilabel(logits, multi_labels, focal, &dlogits)
                                    : focal_loss_with_logits(logits, labels, focal, &dlogits);
            CASSKIT_CHECK(std::isfinite(loss), NumericsError, "finetune: non-finite loss");
            zero_grads(params);
            result.model->backward(dlogits);
            const double grad_norm = grad_l2_norm(params);
            opt->step(lr);
            const auto t1 = std::chrono::steady_clock::now();

            StepRecord rec;
            rec.step = global_step;
            rec.epoch = epoch;
            rec.loss = loss;
            rec.lr = lr;
            rec.grad_norm_a = grad_norm;
            rec.wall_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
            result.report.steps.push_back(rec);
            ++global_step;
        }
        sched.step += 1;

        const double val_loss =
            evaluate_loss(*result.model, ds, split.val, focal, input_size, cfg.batch_size);
        result.val_losses.push_back(val_loss);
        if (val_loss < best_loss - 1e-6) {
            best_loss = val_loss;
            result.best_epoch = epoch + 1;
            best_params = snapshot_params(params);
            streak = 0;
        } else {
            ++streak;
        }
        result.epochs_run = epoch + 1;
        if (streak >= cfg.patience) break;
    }

    restore_params(params, best_params);
    result.model->set_training(false);
    const auto run_end = std::chrono::steady_clock::now();

    result.record.metrics =
        evaluate_metrics(*result.model, ds, split.test, input_size, cfg.batch_size);
    result.record.label_fraction = cfg.label_fraction;
    result.record.seed = cfg.seed;
    result.report.metric_records.push_back(result.record);
    result.report.summary.total_wall_s =
        std::chrono::duration<double>(run_end - run_start).count();
    result.report.summary.epochs = result.epochs_run;
    result.report.summary.config_digest = digest;
    result.report.summary.hardware_tag = hardware_tag();
    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        result.report_path = (std::filesystem::path(out_dir) / "report.jsonl").string();
        save_run_report(result.report, result.report_path);
    }
    return result;
}

} // namespace casskit
