#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "casskit/checkpoint.hpp"
#include "casskit/config.hpp"
#include "casskit/data/loader.hpp"
#include "casskit/report.hpp"
#include "casskit/train/dino.hpp"
#include "casskit/train/finetune.hpp"
#include "casskit/train/pretrain.hpp"

namespace casskit {

// ---------------------------------------------------------------------------
// Experiment orchestration: seed sweep over pretrain + finetune + baselines
// ---------------------------------------------------------------------------

struct JobFailure {
    std::uint64_t seed = 0;
    std::string job;
    std::string message;
};

struct ExperimentJournal {
    std::vector<JobFailure> failures;
    std::vector<std::string> run_ids;
    std::vector<TimeComparison> wallclock; // one per seed when the DINO baseline ran
};

// One fine-tuned evaluation feeding a table cell.
struct CellSample {
    std::uint64_t seed = 0;
    double value = 0.0;
    double wall_s = 0.0;
    std::vector<std::string> run_ids;
};

using RowKey = std::tuple<std::string, std::string, double>; // technique, backbone, fraction

// Pure fold from collected cells to the report table. Cells average over the
// seeds that actually delivered a value; declared seeds without one are
// flagged on the row.
inline ComparisonTable aggregate_cells(const std::map<RowKey, std::vector<CellSample>>& cells,
                                       const std::vector<std::uint64_t>& declared_seeds,
                                       SpreadKind spread) {
    ComparisonTable table;
    table.spread = spread;
    for (const auto& [key, samples] : cells) {
        if (samples.empty()) continue;
        TableRow row;
        row.technique = std::get<0>(key);
        row.backbone = std::get<1>(key);
        row.label_fraction = std::get<2>(key);
        std::vector<double> values;
        double wall = 0.0;
        for (const CellSample& s : samples) {
            values.push_back(s.value);
            wall += s.wall_s;
            row.seeds.push_back(s.seed);
            for (const auto& id : s.run_ids) row.run_ids.push_back(id);
        }
        const auto [mean, spr] = mean_and_spread(values, spread);
        row.metric_mean = mean;
        row.metric_spread = spr;
        row.wall_clock_s = wall / static_cast<double>(samples.size());
        for (std::uint64_t s : declared_seeds) {
            bool present = false;
            for (const CellSample& c : samples)
                if (c.seed == s) { present = true; break; }
            if (!present) row.missing_seeds.push_back(s);
        }
        table.rows.push_back(std::move(row));
    }
    return table;
}

inline Dataset materialize_dataset(const DatasetSource& src) {
    if (src.kind == "folder") {
        LoadResult loaded = load_image_folder(src.root, src.manifest);
        CASSKIT_CHECK(loaded.errors.empty(), ValidationError,
                      "dataset folder had unreadable entries; first: " +
                          (loaded.errors.empty() ? std::string() : loaded.errors[0].message));
        return std::move(loaded.dataset);
    }
    return synth_dataset(src.synth, derive_seed(0, "dataset"));
}

namespace detail {

inline std::string fraction_tag(double f) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(2);
    os << f;
    return os.str();
}

// Persists a DINO student so the shared fine-tuning path can consume it;
// the teacher rides along on branch b.
inline std::string save_dino_checkpoint(DinoResult& result, const BackboneSpec& spec,
                                        const std::filesystem::path& dir) {
    DualBackbone pair;
    pair.branch_a = std::move(result.state.student);
    pair.branch_b = std::move(result.state.teacher);
    pair.spec_a = spec;
    pair.spec_b = spec;
    TrainState state;
    state.step = result.report.steps.empty() ? 0 : result.report.steps.back().step;
    state.schedule.schedule = result.state.cfg.effective_schedule();
    state.schedule.step = result.state.cfg.epochs;
    state.config_digest = result.report.summary.config_digest;
    const std::string path = (dir / "final.ckpt").string();
    save_checkpoint(pair, state, path);
    return path;
}

} // namespace detail

// Runs the full matrix. Failures in one seed or job are recorded and the
// sweep continues; the table aggregates whatever completed.
inline ComparisonTable run_experiment(const ExperimentConfig& cfg,
                                      ExperimentJournal* journal = nullptr) {
    cfg.validate();
    const Dataset ds = materialize_dataset(cfg.dataset);
    const DatasetSplit split = split_dataset(ds, derive_seed(0, "split"));
    const std::filesystem::path out(cfg.out_dir);
    std::filesystem::create_directories(out);

    ExperimentJournal local;
    ExperimentJournal& log = journal ? *journal : local;
    std::map<RowKey, std::vector<CellSample>> cells;

    const std::string cass_technique = to_string(cfg.pretrain.variant);
    const auto branch_spec = [&](const std::string& branch) {
        return branch == "a" ? cfg.pretrain.spec_a : cfg.pretrain.spec_b;
    };

    for (std::uint64_t seed : cfg.seeds) {
        const std::string seed_tag = "seed-" + std::to_string(seed);
        const std::filesystem::path seed_dir = out / seed_tag;

        // Main pretraining. A failure here only takes the dependent
        // fine-tunes with it.
        std::string cass_ckpt;
        double cass_wall = 0.0;
        RunReport cass_report;
        try {
            PretrainConfig pc = cfg.pretrain;
            pc.seed = seed;
            PretrainResult pr = run_pretraining(pc, ds.samples, (seed_dir / "pretrain").string());
            cass_ckpt = pr.checkpoint_path;
            cass_wall = pr.report.summary.total_wall_s;
            cass_report = std::move(pr.report);
            log.run_ids.push_back(seed_tag + "/pretrain");
        } catch (const std::exception& e) {
            log.failures.push_back({seed, "pretrain", e.what()});
        }

        const auto finetune_cell = [&](const std::string& technique, const std::string& branch,
                                       const FinetuneConfig& base, const std::string& ckpt,
                                       double pretrain_wall, const std::string& pretrain_id) {
            for (const FinetuneConfig& job : cfg.finetune_jobs()) {
                FinetuneConfig fc = job;
                fc.seed = seed;
                fc.checkpoint_path = ckpt;
                fc.branch = branch;
                fc.weights = base.weights;
                if (ckpt.empty()) {
                    fc.spec = branch_spec(branch);
                    fc.spec.init_mode = InitMode::random;
                    fc.spec.pretrained_path.clear();
                }
                const std::string run_name = "ft-" + technique + "-" + branch + "-f" +
                                             detail::fraction_tag(fc.label_fraction);
                const std::string run_id = seed_tag + "/" + run_name;
                try {
                    FinetuneResult fr = finetune(fc, ds, split, (seed_dir / run_name).string());
                    CellSample cell;
                    cell.seed = seed;
                    cell.value = fr.record.metrics.f1;
                    cell.wall_s = pretrain_wall + fr.report.summary.total_wall_s;
                    cell.run_ids.push_back(run_id);
                    if (!pretrain_id.empty()) cell.run_ids.push_back(pretrain_id);
                    cells[{technique, branch_spec(branch).variant, fc.label_fraction}]
                        .push_back(std::move(cell));
                    log.run_ids.push_back(run_id);
                } catch (const std::exception& e) {
                    log.failures.push_back({seed, run_id, e.what()});
                }
            }
        };

        if (!cass_ckpt.empty()) {
            finetune_cell(cass_technique, "a", cfg.finetune, cass_ckpt, cass_wall,
                          seed_tag + "/pretrain");
            finetune_cell(cass_technique, "b", cfg.finetune, cass_ckpt, cass_wall,
                          seed_tag + "/pretrain");
        }

        if (cfg.baseline == BaselineKind::dino) {
            RunReport dino_reports[2];
            bool dino_ok[2] = {false, false};
            const std::string tags[2] = {"dino-a", "dino-b"};
            for (int i = 0; i < 2; ++i) {
                const std::string branch = i == 0 ? "a" : "b";
                try {
                    DinoConfig dc;
                    dc.spec = branch_spec(branch);
                    dc.epochs = cfg.pretrain.epochs;
                    dc.batch_size = cfg.pretrain.batch_size;
                    dc.optimizer = i == 0 ? cfg.pretrain.optimizer_a : cfg.pretrain.optimizer_b;
                    dc.base_lr = cfg.pretrain.base_lr;
                    dc.schedule = cfg.pretrain.schedule;
                    dc.seed = seed;
                    DinoResult dr =
                        run_dino_pretraining(dc, ds.samples, (seed_dir / tags[i]).string());
                    dino_reports[i] = dr.report;
                    dino_ok[i] = true;
                    log.run_ids.push_back(seed_tag + "/" + tags[i]);
                    const std::string ckpt =
                        detail::save_dino_checkpoint(dr, dc.spec, seed_dir / tags[i]);
                    FinetuneConfig base = cfg.finetune;
                    base.weights = WeightSelection::final_weights; // no averaging in the baseline
                    // The student sits on branch a of its own checkpoint, so the
                    // row's backbone label still follows the originating branch.
                    for (const FinetuneConfig& job : cfg.finetune_jobs()) {
                        FinetuneConfig fc = job;
                        fc.seed = seed;
                        fc.checkpoint_path = ckpt;
                        fc.branch = "a";
                        fc.weights = WeightSelection::final_weights;
                        const std::string run_name = "ft-dino-" + branch + "-f" +
                                                     detail::fraction_tag(fc.label_fraction);
                        const std::string run_id = seed_tag + "/" + run_name;
                        try {
                            FinetuneResult fr =
                                finetune(fc, ds, split, (seed_dir / run_name).string());
                            CellSample cell;
                            cell.seed = seed;
                            cell.value = fr.record.metrics.f1;
                            cell.wall_s = dr.report.summary.total_wall_s +
                                          fr.report.summary.total_wall_s;
                            cell.run_ids = {run_id, seed_tag + "/" + tags[i]};
                            cells[{"dino", dc.spec.variant, fc.label_fraction}].push_back(
                                std::move(cell));
                            log.run_ids.push_back(run_id);
                        } catch (const std::exception& e) {
                            log.failures.push_back({seed, run_id, e.what()});
                        }
                    }
                } catch (const std::exception& e) {
                    log.failures.push_back({seed, seed_tag + "/" + tags[i], e.what()});
                }
            }
            if (!cass_ckpt.empty() && dino_ok[0] && dino_ok[1]) {
                log.wallclock.push_back(
                    compare_wallclock(cass_report, dino_reports[0], dino_reports[1]));
            }
        }

        if (cfg.baseline == BaselineKind::supervised) {
            finetune_cell("supervised", "a", cfg.finetune, "", 0.0, "");
            finetune_cell("supervised", "b", cfg.finetune, "", 0.0, "");
        }
    }

    ComparisonTable table = aggregate_cells(cells, cfg.seeds, cfg.spread);

    nlohmann::json failures = nlohmann::json::array();
    for (const JobFailure& f : log.failures)
        failures.push_back({{"seed", f.seed}, {"job", f.job}, {"message", f.message}});
    std::ofstream fail_out(out / "failures.json", std::ios::trunc);
    fail_out << failures.dump(2) << "\n";

    if (!log.wallclock.empty()) {
        nlohmann::json walls = nlohmann::json::array();
        for (const TimeComparison& t : log.wallclock)
            walls.push_back({{"cass_wall_s", t.cass_wall_s},
                             {"dino_a_wall_s", t.dino_a_wall_s},
                             {"dino_b_wall_s", t.dino_b_wall_s},
                             {"ratio", t.ratio}});
        std::ofstream wall_out(out / "wallclock.json", std::ios::trunc);
        wall_out << walls.dump(2) << "\n";
    }
    return table;
}

} // namespace casskit
