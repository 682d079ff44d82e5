#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include <opencv2/imgcodecs.hpp>

#include "casskit/augment/augment.hpp"
#include "casskit/data/dataset.hpp"
#include "casskit/data/loader.hpp"
#include "casskit/data/metrics.hpp"
#include "casskit/nn/conv_net.hpp"
#include "casskit/optim/optimizers.hpp"

using namespace casskit;

namespace {

Dataset balanced_dataset(std::size_t n, std::size_t classes) {
    SynthConfig cfg;
    cfg.n = n;
    cfg.classes = classes;
    cfg.image_size = 16; // small images keep split tests fast
    return synth_dataset(cfg, 99);
}

Dataset dataset_with_counts(const std::vector<std::size_t>& counts) {
    Dataset ds;
    ds.num_classes = counts.size();
    std::size_t id = 0;
    for (std::size_t c = 0; c < counts.size(); ++c)
        for (std::size_t i = 0; i < counts[c]; ++i) {
            LabeledSample s;
            s.label = static_cast<int>(c);
            s.id = "s" + std::to_string(id++);
            s.image = TensorF({1, 4, 4});
            ds.samples.push_back(std::move(s));
        }
    return ds;
}

bool is_subset(const std::vector<std::size_t>& small, const std::vector<std::size_t>& big) {
    std::set<std::size_t> bigset(big.begin(), big.end());
    return std::all_of(small.begin(), small.end(),
                       [&](std::size_t v) { return bigset.count(v) > 0; });
}

} // namespace

TEST_CASE("splits hit the 70/10/20 sizes") {
    Dataset d100 = balanced_dataset(100, 2);
    DatasetSplit s100 = split_dataset(d100, 1);
    REQUIRE(s100.train.size() == 70);
    REQUIRE(s100.val.size() == 10);
    REQUIRE(s100.test.size() == 20);

    Dataset d10 = balanced_dataset(10, 2);
    DatasetSplit s10 = split_dataset(d10, 1);
    REQUIRE(s10.train.size() == 7);
    REQUIRE(s10.val.size() == 1);
    REQUIRE(s10.test.size() == 2);
}

TEST_CASE("splits are disjoint, cover the dataset, and repeat per seed") {
    Dataset ds = dataset_with_counts({33, 41, 26});
    DatasetSplit a = split_dataset(ds, 7);
    DatasetSplit b = split_dataset(ds, 7);
    REQUIRE(a.train == b.train);
    REQUIRE(a.val == b.val);
    REQUIRE(a.test == b.test);

    std::set<std::size_t> all;
    for (const auto* part : {&a.train, &a.val, &a.test})
        for (std::size_t i : *part) REQUIRE(all.insert(i).second);
    REQUIRE(all.size() == ds.size());

    DatasetSplit c = split_dataset(ds, 8);
    REQUIRE((a.train != c.train || a.val != c.val));
}

TEST_CASE("stratification keeps per-class train counts near the global rate") {
    Dataset ds = dataset_with_counts({30, 50, 20});
    DatasetSplit split = split_dataset(ds, 3);
    std::vector<std::size_t> train_counts = split.class_counts(ds, split.train);
    const std::vector<double> ideal{21.0, 35.0, 14.0};
    for (std::size_t c = 0; c < 3; ++c)
        REQUIRE(std::abs(static_cast<double>(train_counts[c]) - ideal[c]) <= 1.0);
    // counting oracle: per-class totals across splits reconstruct the dataset
    std::vector<std::size_t> val_counts = split.class_counts(ds, split.val);
    std::vector<std::size_t> test_counts = split.class_counts(ds, split.test);
    REQUIRE(train_counts[0] + val_counts[0] + test_counts[0] == 30);
    REQUIRE(train_counts[1] + val_counts[1] + test_counts[1] == 50);
    REQUIRE(train_counts[2] + val_counts[2] + test_counts[2] == 20);
}

TEST_CASE("split preconditions are enforced") {
    Dataset tiny = dataset_with_counts({4, 5});
    tiny.samples.resize(8); // below the minimum of 10
    REQUIRE_THROWS_AS(split_dataset(tiny, 1), ValidationError);

    Dataset hole = dataset_with_counts({6, 6});
    hole.num_classes = 3; // class 2 exists nominally but has no samples
    REQUIRE_THROWS_AS(split_dataset(hole, 1), ValidationError);
}

TEST_CASE("label fraction views are sized, nested, and stratified") {
    Dataset ds = dataset_with_counts({40, 40, 20});
    DatasetSplit split = split_dataset(ds, 5);
    REQUIRE(split.train.size() == 70);

    LabelFractionView v10 = label_fraction_view(ds, split, 0.10, 13);
    REQUIRE(v10.selected.size() == 7);
    LabelFractionView v01 = label_fraction_view(ds, split, 0.01, 13);
    REQUIRE(v01.selected.size() == 1);
    LabelFractionView v100 = label_fraction_view(ds, split, 1.00, 13);
    REQUIRE(v100.selected.size() == 70);

    REQUIRE(is_subset(v01.selected, v10.selected));
    REQUIRE(is_subset(v10.selected, v100.selected));
    std::vector<std::size_t> train_sorted = split.train;
    std::sort(train_sorted.begin(), train_sorted.end());
    REQUIRE(v100.selected == train_sorted);

    // the 10% view touches every class (round-robin order)
    std::vector<std::size_t> counts = split.class_counts(ds, v10.selected);
    for (std::size_t c = 0; c < 3; ++c) REQUIRE(counts[c] >= 1);

    // a fraction that rounds to zero samples is an explicit error
    REQUIRE_THROWS_AS(label_fraction_view(ds, split, 0.002, 13), ValidationError);
    REQUIRE_THROWS_AS(label_fraction_view(ds, split, 0.0, 13), ValidationError);
    REQUIRE_THROWS_AS(label_fraction_view(ds, split, 1.5, 13), ValidationError);
}

TEST_CASE("synthetic dataset is deterministic and covers its classes") {
    SynthConfig cfg;
    cfg.n = 32;
    cfg.classes = 3;
    cfg.image_size = 64;
    Dataset a = synth_dataset(cfg, 1);
    REQUIRE(a.size() == 32);
    std::set<int> labels;
    for (const auto& s : a.samples) {
        labels.insert(s.label);
        REQUIRE(s.image.dim(0) == 3);
        REQUIRE(s.image.dim(1) == 64);
        for (std::size_t i = 0; i < s.image.size(); ++i) {
            REQUIRE(s.image[i] >= 0.0f);
            REQUIRE(s.image[i] <= 1.0f);
        }
    }
    REQUIRE(labels.size() == 3);

    Dataset b = synth_dataset(cfg, 1);
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t k = 0; k < a.samples[i].image.size(); ++k)
            REQUIRE(a.samples[i].image[k] == b.samples[i].image[k]);

    Dataset c = synth_dataset(cfg, 2);
    bool any_diff = false;
    for (std::size_t k = 0; k < a.samples[0].image.size() && !any_diff; ++k)
        any_diff = a.samples[0].image[k] != c.samples[0].image[k];
    REQUIRE(any_diff);

    SynthConfig bad = cfg;
    bad.classes = 1;
    REQUIRE_THROWS_AS(synth_dataset(bad, 1), ConfigError);
    bad = cfg;
    bad.n = 2;
    bad.classes = 3;
    REQUIRE_THROWS_AS(synth_dataset(bad, 1), ConfigError);
    bad = cfg;
    bad.image_size = 4;
    REQUIRE_THROWS_AS(synth_dataset(bad, 1), ConfigError);
}

TEST_CASE("metric formulas reproduce frozen values") {
    ConfusionCounts one;
    one.tp = {2};
    one.fp = {1};
    one.fn = {1};
    one.tn = {0};
    REQUIRE(f1_score(one) == Catch::Approx(4.0 / 6.0).epsilon(1e-12));

    // recalls 1.0 and 0.5 -> balanced accuracy 0.75
    ConfusionCounts two;
    two.tp = {3, 1};
    two.fp = {1, 0};
    two.fn = {0, 1};
    two.tn = {1, 3};
    REQUIRE(balanced_accuracy(two) == Catch::Approx(0.75).epsilon(1e-12));

    // perfect predictions
    ConfusionCounts perfect = confusion_from_predictions({0, 1, 2, 0}, {0, 1, 2, 0}, 3);
    REQUIRE(f1_score(perfect) == 1.0);
    REQUIRE(balanced_accuracy(perfect) == 1.0);
}

TEST_CASE("zero-denominator classes contribute zero and are flagged") {
    // class 2 never appears in labels or predictions
    ConfusionCounts counts = confusion_from_predictions({0, 1, 0, 1}, {0, 1, 1, 0}, 3);
    MetricFlags flags;
    const double f1 = f1_score(counts, F1Average::macro, &flags);
    REQUIRE(flags.undefined_f1_classes == std::vector<std::size_t>{2});
    REQUIRE(f1 == Catch::Approx((0.5 + 0.5 + 0.0) / 3.0).epsilon(1e-12));

    MetricFlags rflags;
    balanced_accuracy(counts, &rflags);
    REQUIRE(rflags.undefined_recall_classes == std::vector<std::size_t>{2});

    ConfusionCounts zero;
    zero.tp = {0};
    zero.fp = {0};
    zero.fn = {0};
    zero.tn = {0};
    REQUIRE_THROWS_AS(f1_score(zero), ValidationError);
}

TEST_CASE("metrics match a brute-force oracle on random confusion matrices") {
    Rng rng(2024);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t k = static_cast<std::size_t>(rng.uniform_int(2, 6));
        const std::size_t n = static_cast<std::size_t>(rng.uniform_int(4, 60));
        std::vector<int> preds(n), labels(n);
        for (std::size_t i = 0; i < n; ++i) {
            preds[i] = static_cast<int>(rng.uniform_int(0, static_cast<std::int64_t>(k) - 1));
            labels[i] = static_cast<int>(rng.uniform_int(0, static_cast<std::int64_t>(k) - 1));
        }
        ConfusionCounts counts = confusion_from_predictions(preds, labels, k);
        counts.validate();

        // independent recomputation straight from the prediction lists
        double f1_sum = 0.0, recall_sum = 0.0;
        std::int64_t micro_tp = 0, micro_fp = 0, micro_fn = 0;
        for (std::size_t c = 0; c < k; ++c) {
            std::int64_t tp = 0, fp = 0, fn = 0;
            for (std::size_t i = 0; i < n; ++i) {
                const bool p = preds[i] == static_cast<int>(c);
                const bool y = labels[i] == static_cast<int>(c);
                tp += p && y;
                fp += p && !y;
                fn += !p && y;
            }
            micro_tp += tp;
            micro_fp += fp;
            micro_fn += fn;
            if (2 * tp + fp + fn > 0)
                f1_sum += 2.0 * static_cast<double>(tp) /
                          static_cast<double>(2 * tp + fp + fn);
            if (tp + fn > 0)
                recall_sum += static_cast<double>(tp) / static_cast<double>(tp + fn);
        }
        const double want_f1 = f1_sum / static_cast<double>(k);
        const double want_bal = recall_sum / static_cast<double>(k);
        const double want_micro =
            2.0 * static_cast<double>(micro_tp) /
            static_cast<double>(2 * micro_tp + micro_fp + micro_fn);

        REQUIRE(std::abs(f1_score(counts) - want_f1) < 1e-12);
        REQUIRE(std::abs(balanced_accuracy(counts) - want_bal) < 1e-12);
        REQUIRE(std::abs(f1_score(counts, F1Average::micro) - want_micro) < 1e-12);
        // identity: balanced accuracy is macro recall
        REQUIRE(balanced_accuracy(counts) == macro_recall(counts));
    }
}

TEST_CASE("confusion counts keep consistent per-class totals") {
    ConfusionCounts counts = confusion_from_predictions({0, 1, 2, 1, 0}, {0, 2, 2, 1, 1}, 3);
    for (std::size_t c = 0; c < 3; ++c)
        REQUIRE(counts.tp[c] + counts.fp[c] + counts.fn[c] + counts.tn[c] == 5);
}

TEST_CASE("multi-label confusion counts per-class binary decisions") {
    const std::vector<std::vector<int>> preds{{1, 0, 1}, {0, 1, 0}};
    const std::vector<std::vector<int>> labels{{1, 1, 0}, {0, 1, 0}};
    ConfusionCounts counts = confusion_from_multilabel(preds, labels, 3);
    REQUIRE(counts.tp == std::vector<std::int64_t>{1, 1, 0});
    REQUIRE(counts.fp == std::vector<std::int64_t>{0, 0, 1});
    REQUIRE(counts.fn == std::vector<std::int64_t>{0, 1, 0});
    REQUIRE(counts.tn == std::vector<std::int64_t>{1, 0, 1});
}

TEST_CASE("image folder loader ingests a manifest and reports bad files") {
    namespace fs = std::filesystem;
    const fs::path root = fs::temp_directory_path() / "casskit_loader_test";
    fs::create_directories(root);

    cv::Mat color(6, 5, CV_8UC3, cv::Scalar(10, 20, 30)); // BGR constant
    cv::imwrite((root / "a.png").string(), color);
    cv::Mat gray(4, 4, CV_8UC1, cv::Scalar(128));
    cv::imwrite((root / "b.png").string(), gray);
    std::ofstream bad(root / "broken.png");
    bad << "this is not an image";
    bad.close();

    {
        std::ofstream manifest(root / "manifest.csv");
        manifest << "a.png,cat\n";
        manifest << "b.png,dog\n";
        manifest << "broken.png,cat\n";
        manifest << "missing.png,dog\n";
    }
    LoadResult result = load_image_folder(root.string(), (root / "manifest.csv").string());
    REQUIRE(result.dataset.size() == 2);
    REQUIRE(result.errors.size() == 2);
    REQUIRE(result.dataset.num_classes == 2);
    REQUIRE_FALSE(result.dataset.multi_label);

    // labels map in sorted order: cat=0, dog=1
    REQUIRE(result.dataset.samples[0].label == 0);
    REQUIRE(result.dataset.samples[1].label == 1);

    // color file: BGR(10,20,30) -> RGB floats
    const TensorF& img = result.dataset.samples[0].image;
    REQUIRE(img.dim(0) == 3);
    REQUIRE(img.dim(1) == 6);
    REQUIRE(img.dim(2) == 5);
    REQUIRE(img.at3(0, 0, 0) == Catch::Approx(30.0 / 255.0).margin(1e-6));
    REQUIRE(img.at3(2, 0, 0) == Catch::Approx(10.0 / 255.0).margin(1e-6));

    // grayscale stays single-channel at load time
    REQUIRE(result.dataset.samples[1].image.dim(0) == 1);
    REQUIRE(result.dataset.samples[1].image.at3(0, 1, 1) ==
            Catch::Approx(128.0 / 255.0).margin(1e-6));

    fs::remove_all(root);
}

TEST_CASE("multi-label manifests produce binary label vectors") {
    namespace fs = std::filesystem;
    const fs::path root = fs::temp_directory_path() / "casskit_multilabel_test";
    fs::create_directories(root);
    cv::Mat m(4, 4, CV_8UC3, cv::Scalar(1, 2, 3));
    cv::imwrite((root / "x.png").string(), m);
    cv::imwrite((root / "y.png").string(), m);
    {
        std::ofstream manifest(root / "manifest.csv");
        manifest << "x.png,edema;effusion\n";
        manifest << "y.png,normal\n";
    }
    LoadResult result = load_image_folder(root.string(), (root / "manifest.csv").string());
    REQUIRE(result.dataset.multi_label);
    REQUIRE(result.dataset.num_classes == 3);
    // sorted labels: edema=0, effusion=1, normal=2
    REQUIRE(result.dataset.samples[0].multi_label == std::vector<int>{1, 1, 0});
    REQUIRE(result.dataset.samples[1].multi_label == std::vector<int>{0, 0, 1});
    fs::remove_all(root);
}

TEST_CASE("external split manifests override the split strategy") {
    namespace fs = std::filesystem;
    Dataset ds = dataset_with_counts({3, 3});
    const fs::path path = fs::temp_directory_path() / "casskit_split.json";
    {
        std::ofstream out(path);
        out << R"({"train": ["s0", "s1", "s3", "s4"], "val": [], "test": ["s2", "s5"]})";
    }
    DatasetSplit split = load_split_manifest(ds, path.string());
    REQUIRE(split.train.size() == 4);
    REQUIRE(split.val.empty());
    REQUIRE(split.test == std::vector<std::size_t>{2, 5});

    {
        std::ofstream out(path);
        out << R"({"train": ["s0", "nope"], "test": ["s2"]})";
    }
    REQUIRE_THROWS_AS(load_split_manifest(ds, path.string()), ValidationError);
    {
        std::ofstream out(path);
        out << R"({"train": ["s0", "s0"], "test": ["s2"]})";
    }
    REQUIRE_THROWS_AS(load_split_manifest(ds, path.string()), ValidationError);
    fs::remove(path.c_str());
}

TEST_CASE("a small supervised conv net can learn the synthetic classes") {
    SynthConfig cfg;
    cfg.n = 120;
    cfg.classes = 3;
    cfg.image_size = 64;
    Dataset ds = synth_dataset(cfg, 7);
    DatasetSplit split = split_dataset(ds, 7);

    TinyConvNet<float> net(64, 3, 42);
    ParamRefs<float> params = net.params();
    AdamOptimizer<float> opt(params);

    auto make_batch = [&](const std::vector<std::size_t>& ids, std::size_t from,
                          std::size_t count, TensorF& x, std::vector<int>& y) {
        x = TensorF({count, 3, 64, 64});
        y.resize(count);
        for (std::size_t i = 0; i < count; ++i) {
            const LabeledSample& s = ds.samples[ids[from + i]];
            TensorF img = eval_transform(s.image, 64);
            std::copy(img.data(), img.data() + img.size(),
                      x.data() + i * img.size());
            y[i] = s.label;
        }
    };

    std::vector<std::size_t> order = split.train;
    Rng shuffle_rng(3);
    double last_acc = 0.0;
    for (int epoch = 0; epoch < 20; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[static_cast<std::size_t>(shuffle_rng.uniform_int(
                                        0, static_cast<std::int64_t>(i) - 1))]);
        for (std::size_t at = 0; at < order.size(); at += 16) {
            const std::size_t count = std::min<std::size_t>(16, order.size() - at);
            TensorF x;
            std::vector<int> y;
            make_batch(order, at, count, x, y);
            TensorF logits = net.forward(x);
            // softmax cross entropy gradient
            TensorF dlogits(logits.shape());
            for (std::size_t r = 0; r < count; ++r) {
                double mx = logits.at2(r, 0);
                for (std::size_t c = 1; c < 3; ++c)
                    mx = std::max<double>(mx, logits.at2(r, c));
                double sum = 0.0;
                for (std::size_t c = 0; c < 3; ++c)
                    sum += std::exp(static_cast<double>(logits.at2(r, c)) - mx);
                for (std::size_t c = 0; c < 3; ++c) {
                    const double p =
                        std::exp(static_cast<double>(logits.at2(r, c)) - mx) / sum;
                    dlogits.at2(r, c) = static_cast<float>(
                        (p - (y[r] == static_cast<int>(c) ? 1.0 : 0.0)) /
                        static_cast<double>(count));
                }
            }
            zero_grads(params);
            net.backward(dlogits);
            opt.step(1e-3);
        }

        // check test F1 once learning has clearly started
        TensorF x;
        std::vector<int> y;
        make_batch(split.test, 0, split.test.size(), x, y);
        TensorF logits = net.forward(x);
        std::vector<int> preds(y.size());
        for (std::size_t r = 0; r < y.size(); ++r) {
            int best = 0;
            for (std::size_t c = 1; c < 3; ++c)
                if (logits.at2(r, c) > logits.at2(r, static_cast<std::size_t>(best)))
                    best = static_cast<int>(c);
            preds[r] = best;
        }
        last_acc = f1_score(confusion_from_predictions(preds, y, 3));
        if (last_acc >= 0.9) break;
    }
    INFO("test F1 after supervised training: " << last_acc);
    REQUIRE(last_acc >= 0.9);
}
