#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "casskit/errors.hpp"
#include "casskit/rng.hpp"
#include "casskit/tensor.hpp"

namespace casskit {

struct LabeledSample {
    TensorF image;                 // (C, H, W), intensities in [0, 1]
    int label = -1;                // class index; -1 when multi-label
    std::vector<int> multi_label;  // binary vector (multi-label datasets)
    std::string id;
};

struct Dataset {
    std::vector<LabeledSample> samples;
    std::size_t num_classes = 0;
    bool multi_label = false;

    std::size_t size() const { return samples.size(); }
};

// Class-conditional structured images: class k renders k+1 gaussian
// blobs over a sinusoidal grating whose orientation and frequency step
// with the class index. Separation lives in blob count, stripe angle,
// and texture frequency, not in global color statistics, so a linear
// probe on channel means stays near chance while a small conv net can
// learn the classes.
struct SynthConfig {
    std::size_t n = 128;
    std::size_t classes = 3;
    std::size_t image_size = 64;
    double noise_sigma = 0.03;
};

inline LabeledSample synth_sample(const SynthConfig& cfg, std::uint64_t seed,
                                  std::size_t index) {
    const std::size_t s = cfg.image_size;
    const int k = static_cast<int>(index % cfg.classes);
    Rng rng(derive_seed(seed, "sample", index));
    LabeledSample sample;
    sample.label = k;
    sample.id = "synth-" + std::to_string(index);
    sample.image = TensorF({3, s, s});

    const double bg = rng.uniform(0.15, 0.30);
    const double angle =
        (static_cast<double>(k) * 180.0 / static_cast<double>(cfg.classes) +
         rng.uniform(-8.0, 8.0)) *
        M_PI / 180.0;
    const double freq = 3.0 + 2.0 * k + rng.uniform(-0.25, 0.25);
    const double phase = rng.uniform(0.0, 2.0 * M_PI);
    const double ca = std::cos(angle), sa = std::sin(angle);
    const std::array<double, 3> grating_amp{0.13, 0.09, 0.13};

    struct Blob {
        double cy, cx, sigma, amp;
    };
    std::vector<Blob> blobs;
    for (int b = 0; b <= k; ++b) {
        Blob blob;
        blob.cy = rng.uniform(0.22, 0.78) * static_cast<double>(s);
        blob.cx = rng.uniform(0.22, 0.78) * static_cast<double>(s);
        blob.sigma = rng.uniform(0.055, 0.085) * static_cast<double>(s);
        blob.amp = rng.uniform(0.45, 0.60);
        blobs.push_back(blob);
    }

    for (std::size_t i = 0; i < s; ++i)
        for (std::size_t j = 0; j < s; ++j) {
            const double y = static_cast<double>(i) / static_cast<double>(s);
            const double x = static_cast<double>(j) / static_cast<double>(s);
            const double g =
                std::sin(2.0 * M_PI * freq * (x * ca + y * sa) + phase);
            double bump = 0.0;
            for (const Blob& b : blobs) {
                const double dy = static_cast<double>(i) - b.cy;
                const double dx = static_cast<double>(j) - b.cx;
                bump += b.amp * std::exp(-(dy * dy + dx * dx) / (2.0 * b.sigma * b.sigma));
            }
            for (std::size_t c = 0; c < 3; ++c) {
                double v = bg + grating_amp[c] * g + bump +
                           rng.normal(0.0, cfg.noise_sigma);
                sample.image.at3(c, i, j) =
                    static_cast<float>(std::min(1.0, std::max(0.0, v)));
            }
        }
    return sample;
}

inline Dataset synth_dataset(const SynthConfig& cfg, std::uint64_t seed) {
    CASSKIT_CHECK(cfg.classes >= 2, ConfigError, "need at least 2 classes");
    CASSKIT_CHECK(cfg.n >= cfg.classes, ConfigError,
                  "need at least one sample per class");
    CASSKIT_CHECK(cfg.image_size >= 16, ConfigError, "image size too small");
    CASSKIT_CHECK(cfg.noise_sigma >= 0.0, ConfigError, "noise must be nonnegative");
    Dataset ds;
    ds.num_classes = cfg.classes;
    ds.samples.reserve(cfg.n);
    for (std::size_t i = 0; i < cfg.n; ++i)
        ds.samples.push_back(synth_sample(cfg, seed, i));
    return ds;
}

struct DatasetSplit {
    std::vector<std::size_t> train, val, test;
    std::size_t num_classes = 0;

    std::vector<std::size_t> class_counts(const Dataset& ds,
                                          const std::vector<std::size_t>& ids) const {
        std::vector<std::size_t> counts(num_classes, 0);
        for (std::size_t i : ids) ++counts[static_cast<std::size_t>(ds.samples[i].label)];
        return counts;
    }
};

namespace detail {

// Largest-remainder allocation of `target` slots across classes with
// ideal shares `ideal` and per-class capacity `cap`. Ties break on the
// lower class index.
inline std::vector<std::size_t> allocate_largest_remainder(
    const std::vector<double>& ideal, const std::vector<std::size_t>& cap,
    std::size_t target) {
    const std::size_t k = ideal.size();
    std::vector<std::size_t> got(k, 0);
    std::vector<double> rem(k, 0.0);
    std::size_t assigned = 0;
    for (std::size_t c = 0; c < k; ++c) {
        got[c] = std::min(cap[c], static_cast<std::size_t>(std::floor(ideal[c])));
        rem[c] = ideal[c] - std::floor(ideal[c]);
        assigned += got[c];
    }
    while (assigned < target) {
        std::size_t best = k;
        for (std::size_t c = 0; c < k; ++c) {
            if (got[c] >= cap[c]) continue;
            if (best == k || rem[c] > rem[best]) best = c;
        }
        CASSKIT_CHECK(best < k, ValidationError, "split allocation infeasible");
        ++got[best];
        rem[best] -= 1.0; // deprioritize after winning a slot
        ++assigned;
    }
    return got;
}

} // namespace detail

// Stratified 70/10/20. Global sizes are fixed first (round(0.7n),
// round(0.1n), remainder), then distributed across classes by largest
// remainder so per-class proportions track the global ones within one
// sample. Order within each class is shuffled deterministically per seed.
inline DatasetSplit split_dataset(const Dataset& ds, std::uint64_t seed) {
    const std::size_t n = ds.size();
    CASSKIT_CHECK(n >= 10, ValidationError, "need at least 10 samples to split");
    CASSKIT_CHECK(ds.num_classes >= 2, ValidationError, "need at least 2 classes");

    std::vector<std::vector<std::size_t>> per_class(ds.num_classes);
    for (std::size_t i = 0; i < n; ++i) {
        const int label = ds.samples[i].label;
        CASSKIT_CHECK(label >= 0 && static_cast<std::size_t>(label) < ds.num_classes,
                      ValidationError,
                      "sample label out of range: " + std::to_string(label));
        per_class[static_cast<std::size_t>(label)].push_back(i);
    }
    for (std::size_t c = 0; c < ds.num_classes; ++c) {
        CASSKIT_CHECK(!per_class[c].empty(), ValidationError,
                      "class " + std::to_string(c) + " has zero samples");
        Rng rng(derive_seed(seed, "split-class", c));
        for (std::size_t i = per_class[c].size(); i > 1; --i)
            std::swap(per_class[c][i - 1],
                      per_class[c][static_cast<std::size_t>(
                          rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
    }

    const auto n_train = static_cast<std::size_t>(std::lround(0.7 * static_cast<double>(n)));
    const auto n_val = static_cast<std::size_t>(std::lround(0.1 * static_cast<double>(n)));

    std::vector<double> ideal_train(ds.num_classes), ideal_val(ds.num_classes);
    std::vector<std::size_t> cap(ds.num_classes);
    for (std::size_t c = 0; c < ds.num_classes; ++c) {
        cap[c] = per_class[c].size();
        ideal_train[c] = 0.7 * static_cast<double>(cap[c]);
    }
    std::vector<std::size_t> take_train =
        detail::allocate_largest_remainder(ideal_train, cap, n_train);
    std::vector<std::size_t> cap_val(ds.num_classes);
    for (std::size_t c = 0; c < ds.num_classes; ++c) {
        cap_val[c] = cap[c] - take_train[c];
        ideal_val[c] = 0.1 * static_cast<double>(cap[c]);
    }
    std::vector<std::size_t> take_val =
        detail::allocate_largest_remainder(ideal_val, cap_val, n_val);

    DatasetSplit split;
    split.num_classes = ds.num_classes;
    for (std::size_t c = 0; c < ds.num_classes; ++c) {
        const auto& ids = per_class[c];
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (i < take_train[c])
                split.train.push_back(ids[i]);
            else if (i < take_train[c] + take_val[c])
                split.val.push_back(ids[i]);
            else
                split.test.push_back(ids[i]);
        }
    }
    std::sort(split.train.begin(), split.train.end());
    std::sort(split.val.begin(), split.val.end());
    std::sort(split.test.begin(), split.test.end());
    return split;
}

struct LabelFractionView {
    double fraction = 1.0;
    std::uint64_t seed = 0;
    std::vector<std::size_t> selected; // sorted sample indices
};

// Nested label-fraction subsets: per-class shuffles are interleaved
// round-robin and every fraction takes a prefix of that one ordering, so
// view(f1) ⊆ view(f2) whenever f1 ≤ f2 for the same seed, and small
// fractions still touch every class as soon as size permits.
inline LabelFractionView label_fraction_view(const Dataset& ds, const DatasetSplit& split,
                                             double fraction, std::uint64_t seed) {
    CASSKIT_CHECK(fraction > 0.0 && fraction <= 1.0, ValidationError,
                  "label fraction must be in (0, 1]");
    const std::size_t want = static_cast<std::size_t>(
        std::lround(fraction * static_cast<double>(split.train.size())));
    CASSKIT_CHECK(want >= 1, ValidationError,
                  "label fraction " + std::to_string(fraction) +
                      " selects zero labeled samples");

    std::vector<std::vector<std::size_t>> per_class(split.num_classes);
    for (std::size_t i : split.train)
        per_class[static_cast<std::size_t>(ds.samples[i].label)].push_back(i);
    for (std::size_t c = 0; c < per_class.size(); ++c) {
        Rng rng(derive_seed(seed, "fraction-class", c));
        auto& ids = per_class[c];
        for (std::size_t i = ids.size(); i > 1; --i)
            std::swap(ids[i - 1], ids[static_cast<std::size_t>(rng.uniform_int(
                                      0, static_cast<std::int64_t>(i) - 1))]);
    }

    std::vector<std::size_t> interleaved;
    interleaved.reserve(split.train.size());
    for (std::size_t round = 0; interleaved.size() < split.train.size(); ++round)
        for (const auto& ids : per_class)
            if (round < ids.size()) interleaved.push_back(ids[round]);

    LabelFractionView view;
    view.fraction = fraction;
    view.seed = seed;
    view.selected.assign(interleaved.begin(),
                         interleaved.begin() + static_cast<std::ptrdiff_t>(want));
    std::sort(view.selected.begin(), view.selected.end());
    return view;
}

} // namespace casskit
