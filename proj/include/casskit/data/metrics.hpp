#pragma once

#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "casskit/errors.hpp"

namespace casskit {

struct ConfusionCounts {
    std::vector<std::int64_t> tp, fp, fn, tn;

    std::size_t num_classes() const { return tp.size(); }

    void validate() const {
        CASSKIT_CHECK(!tp.empty(), ValidationError, "confusion counts are empty");
        CASSKIT_CHECK(tp.size() == fp.size() && tp.size() == fn.size() &&
                          tp.size() == tn.size(),
                      ValidationError, "confusion count vectors disagree in length");
        std::int64_t grand = 0;
        const std::int64_t total0 = tp[0] + fp[0] + fn[0] + tn[0];
        for (std::size_t c = 0; c < tp.size(); ++c) {
            CASSKIT_CHECK(tp[c] >= 0 && fp[c] >= 0 && fn[c] >= 0 && tn[c] >= 0,
                          ValidationError, "negative confusion count");
            CASSKIT_CHECK(tp[c] + fp[c] + fn[c] + tn[c] == total0, ValidationError,
                          "per-class totals disagree");
            grand += tp[c] + fp[c] + fn[c] + tn[c];
        }
        CASSKIT_CHECK(grand > 0, ValidationError,
                      "metrics undefined for all-zero confusion counts");
    }
};

inline ConfusionCounts confusion_from_predictions(const std::vector<int>& predictions,
                                                  const std::vector<int>& labels,
                                                  std::size_t num_classes) {
    CASSKIT_CHECK(predictions.size() == labels.size(), ValidationError,
                  "prediction/label length mismatch");
    CASSKIT_CHECK(!predictions.empty(), ValidationError, "no predictions");
    ConfusionCounts counts;
    counts.tp.assign(num_classes, 0);
    counts.fp.assign(num_classes, 0);
    counts.fn.assign(num_classes, 0);
    counts.tn.assign(num_classes, 0);
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        const int p = predictions[i], y = labels[i];
        CASSKIT_CHECK(p >= 0 && static_cast<std::size_t>(p) < num_classes &&
                          y >= 0 && static_cast<std::size_t>(y) < num_classes,
                      ValidationError, "prediction or label out of class range");
        for (std::size_t c = 0; c < num_classes; ++c) {
            const bool is_p = static_cast<std::size_t>(p) == c;
            const bool is_y = static_cast<std::size_t>(y) == c;
            if (is_p && is_y)
                ++counts.tp[c];
            else if (is_p)
                ++counts.fp[c];
            else if (is_y)
                ++counts.fn[c];
            else
                ++counts.tn[c];
        }
    }
    return counts;
}

// Per-class binary decisions for multi-label outputs: rows are samples,
// entries are 0/1 per class.
inline ConfusionCounts confusion_from_multilabel(
    const std::vector<std::vector<int>>& predictions,
    const std::vector<std::vector<int>>& labels, std::size_t num_classes) {
    CASSKIT_CHECK(predictions.size() == labels.size() && !predictions.empty(),
                  ValidationError, "prediction/label shape mismatch");
    ConfusionCounts counts;
    counts.tp.assign(num_classes, 0);
    counts.fp.assign(num_classes, 0);
    counts.fn.assign(num_classes, 0);
    counts.tn.assign(num_classes, 0);
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        CASSKIT_CHECK(predictions[i].size() == num_classes &&
                          labels[i].size() == num_classes,
                      ValidationError, "multi-label row width mismatch");
        for (std::size_t c = 0; c < num_classes; ++c) {
            const bool p = predictions[i][c] != 0;
            const bool y = labels[i][c] != 0;
            if (p && y)
                ++counts.tp[c];
            else if (p)
                ++counts.fp[c];
            else if (y)
                ++counts.fn[c];
            else
                ++counts.tn[c];
        }
    }
    return counts;
}

enum class F1Average { macro, micro };

struct MetricFlags {
    std::vector<std::size_t> undefined_f1_classes;
    std::vector<std::size_t> undefined_recall_classes;
};

// F1 per class is 2TP / (2TP + FP + FN); a class whose denominator is
// zero contributes 0 and is flagged rather than poisoning the average.
inline double f1_score(const ConfusionCounts& counts, F1Average mode = F1Average::macro,
                       MetricFlags* flags = nullptr) {
    counts.validate();
    if (mode == F1Average::micro) {
        std::int64_t tp = 0, fp = 0, fn = 0;
        for (std::size_t c = 0; c < counts.num_classes(); ++c) {
            tp += counts.tp[c];
            fp += counts.fp[c];
            fn += counts.fn[c];
        }
        const std::int64_t denom = 2 * tp + fp + fn;
        if (denom == 0) {
            if (flags) flags->undefined_f1_classes.push_back(0);
            return 0.0;
        }
        return 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
    }
    double sum = 0.0;
    for (std::size_t c = 0; c < counts.num_classes(); ++c) {
        const std::int64_t denom = 2 * counts.tp[c] + counts.fp[c] + counts.fn[c];
        if (denom == 0) {
            if (flags) flags->undefined_f1_classes.push_back(c);
            continue; // contributes 0
        }
        sum += 2.0 * static_cast<double>(counts.tp[c]) / static_cast<double>(denom);
    }
    return sum / static_cast<double>(counts.num_classes());
}

inline std::vector<double> per_class_recall(const ConfusionCounts& counts,
                                            MetricFlags* flags = nullptr) {
    counts.validate();
    std::vector<double> recalls(counts.num_classes(), 0.0);
    for (std::size_t c = 0; c < counts.num_classes(); ++c) {
        const std::int64_t denom = counts.tp[c] + counts.fn[c];
        if (denom == 0) {
            if (flags) flags->undefined_recall_classes.push_back(c);
            continue;
        }
        recalls[c] = static_cast<double>(counts.tp[c]) / static_cast<double>(denom);
    }
    return recalls;
}

// Balanced accuracy is the mean of per-class recalls, which is exactly
// macro-averaged recall.
inline double balanced_accuracy(const ConfusionCounts& counts,
                                MetricFlags* flags = nullptr) {
    const std::vector<double> recalls = per_class_recall(counts, flags);
    return std::accumulate(recalls.begin(), recalls.end(), 0.0) /
           static_cast<double>(recalls.size());
}

inline double macro_recall(const ConfusionCounts& counts, MetricFlags* flags = nullptr) {
    return balanced_accuracy(counts, flags);
}

struct MetricReport {
    double f1 = 0.0;
    double balanced_acc = 0.0;
    std::vector<double> recalls;
    MetricFlags flags;
};

inline MetricReport compute_metrics(const ConfusionCounts& counts,
                                    F1Average mode = F1Average::macro) {
    MetricReport report;
    report.f1 = f1_score(counts, mode, &report.flags);
    report.recalls = per_class_recall(counts, nullptr);
    report.balanced_acc = balanced_accuracy(counts, &report.flags);
    return report;
}

} // namespace casskit
