// casskit: pretrain / finetune / evaluate / compare / visualize / synth-data
//
// Exit codes: 0 success, 1 configuration or validation problem, 2 runtime
// failure. Set CASSKIT_DETERMINISTIC=1 to force single-worker data handling.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <opencv2/imgcodecs.hpp>

#include "casskit/augment/augment.hpp"
#include "casskit/config.hpp"
#include "casskit/experiment.hpp"
#include "casskit/introspect.hpp"

namespace {

using namespace casskit;

struct CommonOpts {
    std::string config_path;
    std::vector<std::uint64_t> seeds;
    std::vector<double> fractions;
    std::string out;
    std::string baseline;
    std::string variant;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
    cmd->add_option("--config", o.config_path, "experiment config file (JSON)");
    cmd->add_option("--seed", o.seeds, "seed to run; repeat for a sweep");
    cmd->add_option("--out", o.out, "output directory");
    cmd->add_option("--label-fraction", o.fractions, "label fraction; repeatable");
    cmd->add_option("--baseline", o.baseline, "baseline: dino, supervised or none")
        ->check(CLI::IsMember({"dino", "supervised", "none"}));
    cmd->add_option("--variant", o.variant, "augmentation variant for pretraining");
}

// Config file first, flags override.
ExperimentConfig resolve(const CommonOpts& o) {
    ExperimentConfig cfg = o.config_path.empty() ? ExperimentConfig{}
                                                 : load_experiment_config(o.config_path);
    if (!o.seeds.empty()) cfg.seeds = o.seeds;
    if (!o.fractions.empty()) cfg.label_fractions = o.fractions;
    if (!o.out.empty()) cfg.out_dir = o.out;
    if (!o.baseline.empty()) cfg.baseline = baseline_from_string(o.baseline);
    if (!o.variant.empty()) cfg.pretrain.variant = augment_variant_from_string(o.variant);
    cfg.validate();
    if (std::getenv("CASSKIT_DETERMINISTIC"))
        std::cout << "deterministic mode: jobs run sequentially, single worker\n";
    return cfg;
}

int cmd_pretrain(const CommonOpts& o) {
    const ExperimentConfig cfg = resolve(o);
    const Dataset ds = materialize_dataset(cfg.dataset);
    std::cout << "config digest " << cfg.digest() << ", " << ds.samples.size()
              << " images\n";
    for (std::uint64_t seed : cfg.seeds) {
        PretrainConfig pc = cfg.pretrain;
        pc.seed = seed;
        const auto dir =
            std::filesystem::path(cfg.out_dir) / ("seed-" + std::to_string(seed)) / "pretrain";
        const PretrainResult r = run_pretraining(pc, ds.samples, dir.string());
        std::cout << "seed " << seed << ": " << r.report.steps.size() << " steps, final loss "
                  << r.report.steps.back().loss << ", checkpoint " << r.checkpoint_path
                  << (r.monitor.flagged ? " [collapse flagged]" : "") << "\n";
    }
    return 0;
}

int cmd_finetune(const CommonOpts& o, const std::string& checkpoint,
                 const std::string& branch) {
    ExperimentConfig cfg = resolve(o);
    if (!checkpoint.empty()) cfg.finetune.checkpoint_path = checkpoint;
    if (!branch.empty()) cfg.finetune.branch = branch;
    const Dataset ds = materialize_dataset(cfg.dataset);
    const DatasetSplit split = split_dataset(ds, derive_seed(0, "split"));
    for (std::uint64_t seed : cfg.seeds) {
        for (FinetuneConfig job : cfg.finetune_jobs()) {
            job.seed = seed;
            job.checkpoint_path = cfg.finetune.checkpoint_path;
            job.branch = cfg.finetune.branch;
            const std::string tag = job.checkpoint_path.empty() ? "scratch" : "pretrained";
            const auto dir = std::filesystem::path(cfg.out_dir) /
                             ("seed-" + std::to_string(seed)) /
                             ("ft-" + tag + "-" + job.branch + "-f" +
                              casskit::detail::fraction_tag(job.label_fraction));
            const FinetuneResult r = finetune(job, ds, split, dir.string());
            std::cout << "seed " << seed << " fraction " << job.label_fraction << " branch "
                      << job.branch << " (" << tag << "): f1 " << r.record.metrics.f1
                      << ", balanced " << r.record.metrics.balanced_acc << ", epochs "
                      << r.epochs_run << " (best " << r.best_epoch << ")\n";
        }
    }
    return 0;
}

int cmd_evaluate(const std::string& out) {
    CASSKIT_CHECK(!out.empty(), ConfigError, "evaluate: --out is required");
    CASSKIT_CHECK(std::filesystem::exists(out), ConfigError,
                  "evaluate: no such directory: " + out);
    std::size_t found = 0;
    for (const auto& entry : std::filesystem::recursive_directory_iterator(out)) {
        if (!entry.is_regular_file() || entry.path().filename() != "report.jsonl") continue;
        const RunReport report = load_run_report(entry.path().string());
        const std::string rel =
            std::filesystem::relative(entry.path().parent_path(), out).string();
        ++found;
        std::cout << rel << ": " << report.steps.size() << " steps, wall "
                  << report.summary.total_wall_s << " s";
        for (const MetricRecord& m : report.metric_records)
            std::cout << "; f1 " << m.metrics.f1 << " balanced " << m.metrics.balanced_acc
                      << " @ fraction " << m.label_fraction << " seed " << m.seed;
        std::cout << "\n";
    }
    CASSKIT_CHECK(found > 0, ValidationError, "evaluate: no run reports under " + out);
    std::cout << found << " run report(s)\n";
    return 0;
}

int cmd_compare(const CommonOpts& o, const std::string& format) {
    const ExperimentConfig cfg = resolve(o);
    ExperimentJournal journal;
    const ComparisonTable table = run_experiment(cfg, &journal);
    const TableFormat fmt = table_format_from_string(format);
    const char* ext = fmt == TableFormat::markdown ? "md" : fmt == TableFormat::csv ? "csv" : "json";
    const auto path = std::filesystem::path(cfg.out_dir) / (std::string("table.") + ext);
    emit_table(table, fmt, path.string());
    std::cout << render_table(table, fmt);
    for (const TimeComparison& t : journal.wallclock)
        std::cout << "wall clock: cass " << t.cass_wall_s << " s vs dino " << t.dino_a_wall_s
                  << " + " << t.dino_b_wall_s << " s, ratio " << t.ratio << "\n";
    if (!journal.failures.empty())
        std::cout << journal.failures.size() << " job(s) failed; see "
                  << (std::filesystem::path(cfg.out_dir) / "failures.json").string() << "\n";
    std::cout << "table written to " << path.string() << "\n";
    return 0;
}

int cmd_visualize(const CommonOpts& o, const std::string& checkpoint,
                  const std::string& branch, const std::string& image_path) {
    CASSKIT_CHECK(!checkpoint.empty(), ConfigError, "visualize: --checkpoint is required");
    CASSKIT_CHECK(branch == "a" || branch == "b", ConfigError,
                  "visualize: branch must be 'a' or 'b'");
    LoadedCheckpoint loaded = load_checkpoint(checkpoint);
    Network<float>& net = branch == "a" ? *loaded.pair.branch_a : *loaded.pair.branch_b;
    const BackboneSpec& spec = branch == "a" ? loaded.pair.spec_a : loaded.pair.spec_b;

    Tensor<float> image;
    std::string sample_id;
    if (image_path.empty()) {
        SynthConfig sc;
        sc.image_size = spec.input_size;
        image = synth_sample(sc, derive_seed(7, "visualize"), 0).image;
        sample_id = "synthetic-demo";
    } else {
        cv::Mat mat = cv::imread(image_path, cv::IMREAD_COLOR);
        CASSKIT_CHECK(!mat.empty(), ValidationError,
                      "visualize: cannot read image " + image_path);
        image = eval_transform(casskit::detail::mat_to_tensor(mat), spec.input_size);
        sample_id = image_path;
    }

    const std::string out = o.out.empty() ? "maps" : o.out;
    std::filesystem::create_directories(out);
    std::size_t emitted = 0;
    if (net.num_conv_layers() > 0) {
        std::vector<std::size_t> layers;
        for (std::size_t l = 1; l <= net.num_conv_layers(); ++l) layers.push_back(l);
        for (const ActivationMap& m : extract_feature_maps(net, image, layers, 4, sample_id)) {
            const auto png = std::filesystem::path(out) /
                             ("feature-l" + std::to_string(m.source_index) + "-c" +
                              std::to_string(m.channel) + ".png");
            emit_activation_artifact(m, png.string(), RenderMode::grayscale);
            ++emitted;
        }
    }
    if (net.has_cls_token()) {
        for (std::size_t b = 1; b <= net.num_attention_blocks(); ++b) {
            const ActivationMap m =
                extract_attention_map(net, image, b, std::nullopt, sample_id);
            const auto heat =
                std::filesystem::path(out) / ("attention-b" + std::to_string(b) + ".png");
            emit_activation_artifact(m, heat.string(), RenderMode::heatmap);
            const auto over = std::filesystem::path(out) /
                              ("attention-b" + std::to_string(b) + "-overlay.png");
            emit_activation_artifact(m, over.string(), RenderMode::overlay, &image);
            emitted += 2;
        }
    }
    CASSKIT_CHECK(emitted > 0, ValidationError,
                  "visualize: the selected backbone exposes no inspectable maps");
    std::cout << emitted << " map(s) under " << out << "\n";
    return 0;
}

int cmd_synth_data(const std::string& out, std::size_t n, std::size_t classes,
                   std::size_t image_size, double noise, std::uint64_t seed) {
    CASSKIT_CHECK(!out.empty(), ConfigError, "synth-data: --out is required");
    SynthConfig sc;
    sc.n = n;
    sc.classes = classes;
    sc.image_size = image_size;
    sc.noise_sigma = noise;
    const Dataset ds = synth_dataset(sc, seed);

    std::filesystem::create_directories(out);
    std::ofstream manifest(std::filesystem::path(out) / "manifest.csv", std::ios::trunc);
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
        const LabeledSample& s = ds.samples[i];
        const std::string cls_dir = "class-" + std::to_string(s.label);
        std::filesystem::create_directories(std::filesystem::path(out) / cls_dir);
        const std::string rel = cls_dir + "/img-" + std::to_string(i) + ".png";
        CASSKIT_CHECK(cv::imwrite((std::filesystem::path(out) / rel).string(),
                                  casskit::detail::tensor_to_bgr(s.image)),
                      ValidationError, "synth-data: failed to write " + rel);
        manifest << rel << "," << s.label << "\n";
    }
    std::cout << "wrote " << ds.samples.size() << " images across " << classes
              << " classes under " << out << " (manifest.csv alongside)\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"self-supervised pretraining toolkit"};
    app.require_subcommand(1);

    CommonOpts opts;
    std::string checkpoint, branch = "a", image_path, format = "markdown";
    std::string synth_out;
    std::size_t synth_n = 128, synth_classes = 3, synth_size = 64;
    double synth_noise = 0.03;
    std::uint64_t synth_seed = 1;

    CLI::App* pretrain = app.add_subcommand("pretrain", "run self-supervised pretraining");
    add_common(pretrain, opts);
    CLI::App* finetune = app.add_subcommand("finetune", "fine-tune from a checkpoint");
    add_common(finetune, opts);
    finetune->add_option("--checkpoint", checkpoint, "pretraining checkpoint to start from");
    finetune->add_option("--branch", branch, "checkpoint branch: a or b")
        ->check(CLI::IsMember({"a", "b"}));
    CLI::App* evaluate = app.add_subcommand("evaluate", "summarize run reports");
    evaluate->add_option("--out", opts.out, "directory holding run reports");
    CLI::App* compare = app.add_subcommand("compare", "run the experiment matrix");
    add_common(compare, opts);
    compare->add_option("--format", format, "table format: markdown, csv or json")
        ->check(CLI::IsMember({"markdown", "csv", "json"}));
    CLI::App* visualize = app.add_subcommand("visualize", "emit activation and attention maps");
    add_common(visualize, opts);
    visualize->add_option("--checkpoint", checkpoint, "checkpoint to inspect");
    visualize->add_option("--branch", branch, "checkpoint branch: a or b")
        ->check(CLI::IsMember({"a", "b"}));
    visualize->add_option("--image", image_path, "input image; synthetic demo if omitted");
    CLI::App* synth = app.add_subcommand("synth-data", "write a synthetic image folder");
    synth->add_option("--out", synth_out, "target directory")->required();
    synth->add_option("--n", synth_n, "number of images");
    synth->add_option("--classes", synth_classes, "number of classes");
    synth->add_option("--image-size", synth_size, "square image size");
    synth->add_option("--noise", synth_noise, "additive noise sigma");
    synth->add_option("--seed", synth_seed, "generation seed");

    try {
        app.parse(argc, argv);
        if (pretrain->parsed()) return cmd_pretrain(opts);
        if (finetune->parsed()) return cmd_finetune(opts, checkpoint, branch);
        if (evaluate->parsed()) return cmd_evaluate(opts.out);
        if (compare->parsed()) return cmd_compare(opts, format);
        if (visualize->parsed()) return cmd_visualize(opts, checkpoint, branch, image_path);
        if (synth->parsed())
            return cmd_synth_data(synth_out, synth_n, synth_classes, synth_size, synth_noise,
                                  synth_seed);
        return 1;
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    } catch (const casskit::ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "runtime failure: " << e.what() << "\n";
        return 2;
    }
}
