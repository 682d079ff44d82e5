#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "casskit/data/dataset.hpp"
#include "casskit/errors.hpp"
#include "casskit/report.hpp"
#include "casskit/train/finetune.hpp"
#include "casskit/train/pretrain.hpp"

namespace casskit {

// ---------------------------------------------------------------------------
// Experiment configuration: one structured file drives the whole matrix
// ---------------------------------------------------------------------------

enum class BaselineKind { none, dino, supervised };

inline const char* to_string(BaselineKind b) {
    switch (b) {
        case BaselineKind::none: return "none";
        case BaselineKind::dino: return "dino";
        case BaselineKind::supervised: return "supervised";
    }
    return "?";
}

inline BaselineKind baseline_from_string(const std::string& s) {
    if (s == "none") return BaselineKind::none;
    if (s == "dino") return BaselineKind::dino;
    if (s == "supervised") return BaselineKind::supervised;
    throw ConfigError("config: baseline must be one of none|dino|supervised, got \"" + s +
                      "\"");
}

struct DatasetSource {
    std::string kind = "synthetic"; // synthetic | folder
    SynthConfig synth;
    std::string root;     // folder source
    std::string manifest; // folder source, CSV path,label
};

struct ExperimentConfig {
    DatasetSource dataset;
    PretrainConfig pretrain; // holds the backbone pair specs
    FinetuneConfig finetune; // template; label_fraction filled per job
    std::vector<double> label_fractions{1.0};
    std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
    BaselineKind baseline = BaselineKind::none;
    SpreadKind spread = SpreadKind::variance;
    std::string out_dir = "runs";

    // One fine-tuning job per label fraction, as declared.
    std::vector<FinetuneConfig> finetune_jobs() const {
        std::vector<FinetuneConfig> jobs;
        for (double f : label_fractions) {
            FinetuneConfig job = finetune;
            job.label_fraction = f;
            jobs.push_back(job);
        }
        return jobs;
    }

    void validate() const {
        CASSKIT_CHECK(dataset.kind == "synthetic" || dataset.kind == "folder", ConfigError,
                      "config: dataset.source must be \"synthetic\" or \"folder\", got \"" +
                          dataset.kind + "\"");
        if (dataset.kind == "folder") {
            CASSKIT_CHECK(!dataset.root.empty(), ConfigError,
                          "config: dataset.root required for the folder source");
            CASSKIT_CHECK(!dataset.manifest.empty(), ConfigError,
                          "config: dataset.manifest required for the folder source");
        } else {
            CASSKIT_CHECK(dataset.synth.n >= 10, ConfigError,
                          "config: dataset.n must be >= 10");
            CASSKIT_CHECK(dataset.synth.classes >= 2, ConfigError,
                          "config: dataset.classes must be >= 2");
        }
        pretrain.validate();
        for (const auto& job : finetune_jobs()) job.validate();
        CASSKIT_CHECK(!seeds.empty(), ConfigError, "config: seeds must be nonempty");
        CASSKIT_CHECK(!label_fractions.empty(), ConfigError,
                      "config: label_fractions must be nonempty");
        CASSKIT_CHECK(!out_dir.empty(), ConfigError, "config: out must be nonempty");
        // Finetune-only configs reference an existing checkpoint.
        if (!finetune.checkpoint_path.empty())
            CASSKIT_CHECK(std::filesystem::exists(finetune.checkpoint_path), ConfigError,
                          "config: finetune.checkpoint does not exist: " +
                              finetune.checkpoint_path);
    }

    nlohmann::json to_json() const {
        nlohmann::json dset{{"source", dataset.kind}};
        if (dataset.kind == "folder") {
            dset["root"] = dataset.root;
            dset["manifest"] = dataset.manifest;
        } else {
            dset["n"] = dataset.synth.n;
            dset["classes"] = dataset.synth.classes;
            dset["image_size"] = dataset.synth.image_size;
            dset["noise_sigma"] = dataset.synth.noise_sigma;
        }
        return nlohmann::json{{"dataset", dset},
                              {"pretrain", pretrain.to_json()},
                              {"finetune", finetune.to_json()},
                              {"label_fractions", label_fractions},
                              {"seeds", seeds},
                              {"baseline", to_string(baseline)},
                              {"spread", spread == SpreadKind::variance ? "variance" : "stddev"},
                              {"out", out_dir}};
    }

    std::string digest() const { return config_digest(to_json()); }
};

// ---------------------------------------------------------------------------
// Schema-checked parsing with precise error paths
// ---------------------------------------------------------------------------

namespace detail {

inline void expect_object(const nlohmann::json& j, const std::string& path) {
    CASSKIT_CHECK(j.is_object(), ConfigError, "config: " + path + " must be an object");
}

inline std::string join_path(const std::string& path, const std::string& key) {
    return path.empty() ? key : path + "." + key;
}

template <typename T>
T scalar_field(const nlohmann::json& j, const std::string& path, const std::string& key,
               T fallback) {
    if (!j.contains(key)) return fallback;
    const nlohmann::json& v = j.at(key);
    try {
        return v.get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError("config: " + join_path(path, key) + " has the wrong type (" +
                          std::string(v.type_name()) + ")");
    }
}

// Wraps enum-style string conversions so the thrown message names the field.
template <typename F>
auto convert_field(const std::string& path, const std::string& key, F&& f) {
    try {
        return f();
    } catch (const ValidationError& e) {
        throw ConfigError("config: " + join_path(path, key) + ": " + e.what());
    }
}

inline void reject_unknown_keys(const nlohmann::json& j, const std::string& path,
                                std::initializer_list<const char*> known) {
    for (const auto& item : j.items()) {
        bool ok = false;
        for (const char* k : known)
            if (item.key() == k) { ok = true; break; }
        CASSKIT_CHECK(ok, ConfigError,
                      "config: unknown key " + join_path(path, item.key()));
    }
}

inline BackboneSpec parse_spec(const nlohmann::json& j, const std::string& path) {
    expect_object(j, path);
    reject_unknown_keys(j, path,
                        {"family", "variant", "input_size", "patch_size", "logit_width",
                         "init", "pretrained_path", "pretrained_branch"});
    BackboneSpec spec;
    const std::string family = scalar_field<std::string>(j, path, "family", "conv");
    spec.family =
        convert_field(path, "family", [&] { return backbone_family_from_string(family); });
    const std::string init = scalar_field<std::string>(j, path, "init", "random");
    spec.init_mode = convert_field(path, "init", [&] { return init_mode_from_string(init); });
    spec.variant = scalar_field<std::string>(
        j, path, "variant",
        spec.family == BackboneFamily::conv ? "tiny-conv4" : "tiny-vit2");
    spec.input_size = scalar_field<std::size_t>(j, path, "input_size", spec.input_size);
    spec.patch_size = scalar_field<std::size_t>(j, path, "patch_size", spec.patch_size);
    spec.logit_width = scalar_field<std::size_t>(j, path, "logit_width", spec.logit_width);
    spec.pretrained_path = scalar_field<std::string>(j, path, "pretrained_path", "");
    spec.pretrained_branch = scalar_field<std::string>(j, path, "pretrained_branch", "a");
    return spec;
}

inline DatasetSource parse_dataset(const nlohmann::json& j) {
    expect_object(j, "dataset");
    reject_unknown_keys(j, "dataset",
                        {"source", "root", "manifest", "n", "classes", "image_size",
                         "noise_sigma"});
    DatasetSource out;
    out.kind = scalar_field<std::string>(j, "dataset", "source", "synthetic");
    out.root = scalar_field<std::string>(j, "dataset", "root", "");
    out.manifest = scalar_field<std::string>(j, "dataset", "manifest", "");
    out.synth.n = scalar_field<std::size_t>(j, "dataset", "n", out.synth.n);
    out.synth.classes = scalar_field<std::size_t>(j, "dataset", "classes", out.synth.classes);
    out.synth.image_size =
        scalar_field<std::size_t>(j, "dataset", "image_size", out.synth.image_size);
    out.synth.noise_sigma =
        scalar_field<double>(j, "dataset", "noise_sigma", out.synth.noise_sigma);
    return out;
}

inline void parse_pretrain(const nlohmann::json& j, PretrainConfig& cfg) {
    expect_object(j, "pretrain");
    reject_unknown_keys(j, "pretrain",
                        {"epochs", "batch_size", "optimizer_a", "optimizer_b", "base_lr",
                         "lr_min", "period", "warm_restarts", "swa", "loss_epsilon",
                         "loss_head", "variant"});
    cfg.epochs = scalar_field<int>(j, "pretrain", "epochs", cfg.epochs);
    cfg.batch_size = scalar_field<int>(j, "pretrain", "batch_size", cfg.batch_size);
    cfg.base_lr = scalar_field<double>(j, "pretrain", "base_lr", cfg.base_lr);
    cfg.schedule.lr_min = scalar_field<double>(j, "pretrain", "lr_min", cfg.schedule.lr_min);
    cfg.schedule.t_max = scalar_field<int>(j, "pretrain", "period", cfg.schedule.t_max);
    cfg.schedule.warm_restarts =
        scalar_field<bool>(j, "pretrain", "warm_restarts", cfg.schedule.warm_restarts);
    cfg.swa_enabled = scalar_field<bool>(j, "pretrain", "swa", cfg.swa_enabled);
    cfg.loss.epsilon = scalar_field<double>(j, "pretrain", "loss_epsilon", cfg.loss.epsilon);
    const std::string opt_a =
        scalar_field<std::string>(j, "pretrain", "optimizer_a", "adaptive_moment");
    cfg.optimizer_a = convert_field("pretrain", "optimizer_a",
                                    [&] { return optimizer_kind_from_string(opt_a); });
    const std::string opt_b =
        scalar_field<std::string>(j, "pretrain", "optimizer_b", "adaptive_moment");
    cfg.optimizer_b = convert_field("pretrain", "optimizer_b",
                                    [&] { return optimizer_kind_from_string(opt_b); });
    const std::string head = scalar_field<std::string>(j, "pretrain", "loss_head", "none");
    cfg.loss.head =
        convert_field("pretrain", "loss_head", [&] { return loss_head_from_string(head); });
    const std::string variant = scalar_field<std::string>(j, "pretrain", "variant", "cass");
    cfg.variant = convert_field("pretrain", "variant",
                                [&] { return augment_variant_from_string(variant); });
}

inline void parse_finetune(const nlohmann::json& j, FinetuneConfig& cfg,
                           std::vector<double>& fractions) {
    expect_object(j, "finetune");
    reject_unknown_keys(j, "finetune",
                        {"max_epochs", "patience", "batch_size", "lr", "alpha", "gamma",
                         "class_weights", "label_fractions", "checkpoint", "branch",
                         "weights", "augment"});
    cfg.max_epochs = scalar_field<int>(j, "finetune", "max_epochs", cfg.max_epochs);
    cfg.patience = scalar_field<int>(j, "finetune", "patience", cfg.patience);
    cfg.batch_size = scalar_field<int>(j, "finetune", "batch_size", cfg.batch_size);
    cfg.lr = scalar_field<double>(j, "finetune", "lr", cfg.lr);
    cfg.focal.alpha = scalar_field<double>(j, "finetune", "alpha", cfg.focal.alpha);
    cfg.focal.gamma = scalar_field<double>(j, "finetune", "gamma", cfg.focal.gamma);
    cfg.checkpoint_path = scalar_field<std::string>(j, "finetune", "checkpoint", "");
    cfg.branch = scalar_field<std::string>(j, "finetune", "branch", cfg.branch);
    if (j.contains("class_weights")) {
        CASSKIT_CHECK(j.at("class_weights").is_array(), ConfigError,
                      "config: finetune.class_weights must be an array");
        cfg.focal.class_weights = j.at("class_weights").get<std::vector<double>>();
    }
    if (j.contains("label_fractions")) {
        CASSKIT_CHECK(j.at("label_fractions").is_array() && !j.at("label_fractions").empty(),
                      ConfigError,
                      "config: finetune.label_fractions must be a nonempty array");
        try {
            fractions = j.at("label_fractions").get<std::vector<double>>();
        } catch (const nlohmann::json::exception&) {
            throw ConfigError("config: finetune.label_fractions must hold numbers");
        }
    }
    const std::string weights = scalar_field<std::string>(j, "finetune", "weights", "swa");
    cfg.weights = convert_field("finetune", "weights",
                                [&] { return weight_selection_from_string(weights); });
    const std::string augment = scalar_field<std::string>(j, "finetune", "augment", "cass");
    cfg.augment = convert_field("finetune", "augment",
                                [&] { return augment_variant_from_string(augment); });
}

} // namespace detail

inline ExperimentConfig parse_experiment_config(const nlohmann::json& j) {
    detail::expect_object(j, "(root)");
    detail::reject_unknown_keys(j, "",
                                {"dataset", "pair", "pretrain", "finetune", "seeds",
                                 "baseline", "spread", "out"});
    ExperimentConfig cfg;
    if (j.contains("dataset")) cfg.dataset = detail::parse_dataset(j.at("dataset"));
    if (j.contains("pair")) {
        const nlohmann::json& pair = j.at("pair");
        detail::expect_object(pair, "pair");
        detail::reject_unknown_keys(pair, "pair", {"a", "b"});
        if (pair.contains("a")) cfg.pretrain.spec_a = detail::parse_spec(pair.at("a"), "pair.a");
        if (pair.contains("b")) cfg.pretrain.spec_b = detail::parse_spec(pair.at("b"), "pair.b");
    }
    if (j.contains("pretrain")) detail::parse_pretrain(j.at("pretrain"), cfg.pretrain);
    if (j.contains("finetune"))
        detail::parse_finetune(j.at("finetune"), cfg.finetune, cfg.label_fractions);
    if (j.contains("seeds")) {
        CASSKIT_CHECK(j.at("seeds").is_array() && !j.at("seeds").empty(), ConfigError,
                      "config: seeds must be a nonempty array");
        try {
            cfg.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
        } catch (const nlohmann::json::exception&) {
            throw ConfigError("config: seeds must hold nonnegative integers");
        }
    }
    cfg.baseline =
        baseline_from_string(detail::scalar_field<std::string>(j, "", "baseline", "none"));
    const std::string spread = detail::scalar_field<std::string>(j, "", "spread", "variance");
    CASSKIT_CHECK(spread == "variance" || spread == "stddev", ConfigError,
                  "config: spread must be \"variance\" or \"stddev\", got \"" + spread + "\"");
    cfg.spread = spread == "variance" ? SpreadKind::variance : SpreadKind::stddev;
    cfg.out_dir = detail::scalar_field<std::string>(j, "", "out", cfg.out_dir);

    // The fine-tune head must match the dataset; specs only matter for
    // supervised-from-scratch jobs and are patched in by the runner.
    cfg.finetune.spec = cfg.pretrain.spec_a;
    cfg.validate();
    return cfg;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
    std::ifstream in(path);
    CASSKIT_CHECK(in.good(), ConfigError, "cannot open config file: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config: " + path + " is not valid JSON: " + e.what());
    }
    return parse_experiment_config(j);
}

} // namespace casskit
