#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "casskit/data/metrics.hpp"
#include "casskit/errors.hpp"

namespace casskit {

// ---------------------------------------------------------------------------
// Config digest
// ---------------------------------------------------------------------------

// FNV-1a over the canonical serialized form (nlohmann keeps object keys
// sorted, so semantically identical configs serialize identically).
inline std::uint64_t fnv1a64(const std::string& bytes) {
    std::uint64_t h = 14695981039346656037ull;
    for (unsigned char c : bytes) {
        h ^= static_cast<std::uint64_t>(c);
        h *= 1099511628211ull;
    }
    return h;
}

inline std::string config_digest(const nlohmann::json& config) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << fnv1a64(config.dump());
    return os.str();
}

// Coarse machine descriptor; wall-clock comparisons require equal tags.
inline std::string hardware_tag() {
    std::ostringstream os;
    os << "cpu-" << std::thread::hardware_concurrency() << "thr-" << (8 * sizeof(void*)) << "bit";
    return os.str();
}

// ---------------------------------------------------------------------------
// RunReport: JSON lines, one record per training step plus one summary
// ---------------------------------------------------------------------------

struct StepRecord {
    std::int64_t step = 0;
    std::int64_t epoch = 0;
    double loss = 0.0;
    double lr = 0.0;
    double grad_norm_a = 0.0;
    double grad_norm_b = 0.0;
    double collapse_std_a = 0.0;
    double collapse_std_b = 0.0;
    double wall_ms = 0.0;
};

struct RunSummary {
    double total_wall_s = 0.0;
    std::int64_t epochs = 0;
    std::string config_digest;
    std::string hardware_tag;
};

// Final evaluation record appended by fine-tuning runs.
struct MetricRecord {
    MetricReport metrics;
    double label_fraction = 1.0;
    std::uint64_t seed = 0;
};

struct RunReport {
    std::vector<StepRecord> steps;
    RunSummary summary;
    std::vector<MetricRecord> metric_records;

    void validate() const {
        CASSKIT_CHECK(summary.epochs >= 0, ValidationError, "run report: negative epoch count");
        for (std::size_t i = 1; i < steps.size(); ++i)
            CASSKIT_CHECK(steps[i].step > steps[i - 1].step, ValidationError,
                          "run report: step indices must be strictly increasing");
    }
};

inline nlohmann::json to_json(const StepRecord& r) {
    return nlohmann::json{{"kind", "step"},
                          {"step", r.step},
                          {"epoch", r.epoch},
                          {"loss", r.loss},
                          {"lr", r.lr},
                          {"grad_norm_a", r.grad_norm_a},
                          {"grad_norm_b", r.grad_norm_b},
                          {"collapse_std_a", r.collapse_std_a},
                          {"collapse_std_b", r.collapse_std_b},
                          {"wall_ms", r.wall_ms}};
}

inline nlohmann::json to_json(const RunSummary& s) {
    return nlohmann::json{{"kind", "summary"},
                          {"total_wall_s", s.total_wall_s},
                          {"epochs", s.epochs},
                          {"config_digest", s.config_digest},
                          {"hardware_tag", s.hardware_tag}};
}

inline nlohmann::json to_json(const MetricRecord& m) {
    return nlohmann::json{{"kind", "metrics"},
                          {"f1", m.metrics.f1},
                          {"balanced_accuracy", m.metrics.balanced_acc},
                          {"per_class_recall", m.metrics.recalls},
                          {"label_fraction", m.label_fraction},
                          {"seed", m.seed}};
}

inline void save_run_report(const RunReport& report, const std::string& path) {
    report.validate();
    std::ofstream out(path, std::ios::trunc);
    CASSKIT_CHECK(out.good(), ValidationError, "run report: cannot open " + path + " for writing");
    for (const auto& s : report.steps) out << to_json(s).dump() << "\n";
    for (const auto& m : report.metric_records) out << to_json(m).dump() << "\n";
    out << to_json(report.summary).dump() << "\n";
    CASSKIT_CHECK(out.good(), ValidationError, "run report: write failed for " + path);
}

inline RunReport load_run_report(const std::string& path) {
    std::ifstream in(path);
    CASSKIT_CHECK(in.good(), ValidationError, "run report: cannot open " + path);
    RunReport report;
    bool saw_summary = false;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError("run report: " + path + ":" + std::to_string(lineno) + ": " +
                                  e.what());
        }
        const std::string kind = j.value("kind", "");
        if (kind == "step") {
            StepRecord r;
            r.step = j.at("step").get<std::int64_t>();
            r.epoch = j.at("epoch").get<std::int64_t>();
            r.loss = j.at("loss").get<double>();
            r.lr = j.at("lr").get<double>();
            r.grad_norm_a = j.at("grad_norm_a").get<double>();
            r.grad_norm_b = j.at("grad_norm_b").get<double>();
            r.collapse_std_a = j.at("collapse_std_a").get<double>();
            r.collapse_std_b = j.at("collapse_std_b").get<double>();
            r.wall_ms = j.at("wall_ms").get<double>();
            report.steps.push_back(r);
        } else if (kind == "metrics") {
            MetricRecord m;
            m.metrics.f1 = j.at("f1").get<double>();
            m.metrics.balanced_acc = j.at("balanced_accuracy").get<double>();
            m.metrics.recalls = j.at("per_class_recall").get<std::vector<double>>();
            m.label_fraction = j.at("label_fraction").get<double>();
            m.seed = j.at("seed").get<std::uint64_t>();
            report.metric_records.push_back(m);
        } else if (kind == "summary") {
            report.summary.total_wall_s = j.at("total_wall_s").get<double>();
            report.summary.epochs = j.at("epochs").get<std::int64_t>();
            report.summary.config_digest = j.at("config_digest").get<std::string>();
            report.summary.hardware_tag = j.at("hardware_tag").get<std::string>();
            saw_summary = true;
        } else {
            throw ValidationError("run report: " + path + ":" + std::to_string(lineno) +
                                  ": unknown record kind '" + kind + "'");
        }
    }
    CASSKIT_CHECK(saw_summary, ValidationError, "run report: " + path + " has no summary record");
    report.validate();
    return report;
}

// ---------------------------------------------------------------------------
// Wall-clock comparison
// ---------------------------------------------------------------------------

struct TimeComparison {
    double cass_wall_s = 0.0;
    double dino_a_wall_s = 0.0;
    double dino_b_wall_s = 0.0;
    // cass / (dino_a + dino_b); the one-pass design targets a value below 1.
    double ratio = 0.0;
};

inline TimeComparison compare_wallclock(const RunReport& cass, const RunReport& dino_a,
                                        const RunReport& dino_b) {
    const auto& c = cass.summary;
    const auto& a = dino_a.summary;
    const auto& b = dino_b.summary;
    CASSKIT_CHECK(c.epochs == a.epochs && c.epochs == b.epochs, ValidationError,
                  "wall-clock comparison: runs cover unequal epoch counts");
    CASSKIT_CHECK(c.hardware_tag == a.hardware_tag && c.hardware_tag == b.hardware_tag,
                  ValidationError, "wall-clock comparison: runs cover unequal hardware tags");
    CASSKIT_CHECK(c.total_wall_s > 0.0 && a.total_wall_s > 0.0 && b.total_wall_s > 0.0,
                  ValidationError, "wall-clock comparison: nonpositive wall time");
    TimeComparison t;
    t.cass_wall_s = c.total_wall_s;
    t.dino_a_wall_s = a.total_wall_s;
    t.dino_b_wall_s = b.total_wall_s;
    t.ratio = c.total_wall_s / (a.total_wall_s + b.total_wall_s);
    return t;
}

// ---------------------------------------------------------------------------
// ComparisonTable: aggregated seed-sweep results
// ---------------------------------------------------------------------------

// The literature reports "mean±spread" without defining the spread; population
// variance is the default here, standard deviation selectable.
enum class SpreadKind { variance, stddev };

struct TableRow {
    std::string technique;
    std::string backbone;
    double label_fraction = 1.0;
    double metric_mean = 0.0;
    double metric_spread = 0.0;
    double wall_clock_s = 0.0;
    std::vector<std::uint64_t> seeds;
    std::vector<std::string> run_ids;
    std::vector<std::uint64_t> missing_seeds; // declared seeds with no value
};

struct ComparisonTable {
    std::vector<TableRow> rows;
    SpreadKind spread = SpreadKind::variance;
};

inline std::pair<double, double> mean_and_spread(const std::vector<double>& values,
                                                 SpreadKind kind) {
    CASSKIT_CHECK(!values.empty(), ValidationError, "mean_and_spread: empty value list");
    double sum = 0.0;
    for (double v : values) sum += v;
    const double mean = sum / static_cast<double>(values.size());
    double ss = 0.0;
    for (double v : values) ss += (v - mean) * (v - mean);
    const double var = ss / static_cast<double>(values.size());
    return {mean, kind == SpreadKind::variance ? var : std::sqrt(var)};
}

enum class TableFormat { markdown, csv, json };

inline TableFormat table_format_from_string(const std::string& s) {
    if (s == "markdown") return TableFormat::markdown;
    if (s == "csv") return TableFormat::csv;
    if (s == "json") return TableFormat::json;
    throw ConfigError("unknown table format '" + s + "'");
}

namespace detail {

inline std::string fmt4(double v) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(4) << v;
    return os.str();
}

} // namespace detail

inline std::string render_table(const ComparisonTable& table, TableFormat format) {
    CASSKIT_CHECK(!table.rows.empty(), ValidationError, "emit_table: empty table");
    std::ostringstream os;
    if (format == TableFormat::markdown) {
        os << "| technique | backbone | label fraction | metric (mean\xc2\xb1"
           << (table.spread == SpreadKind::variance ? "var" : "std") << ") | wall clock [s] |\n";
        os << "|---|---|---|---|---|\n";
        for (const auto& r : table.rows) {
            os << "| " << r.technique << " | " << r.backbone << " | " << detail::fmt4(r.label_fraction)
               << " | " << detail::fmt4(r.metric_mean) << "\xc2\xb1" << detail::fmt4(r.metric_spread)
               << (r.missing_seeds.empty() ? "" : " (missing seeds)") << " | "
               << detail::fmt4(r.wall_clock_s)
               << " |\n";
        }
    } else if (format == TableFormat::csv) {
        os << "technique,backbone,label_fraction,metric_mean,metric_spread,wall_clock_s,missing_seeds\n";
        for (const auto& r : table.rows) {
            os << r.technique << "," << r.backbone << "," << detail::fmt4(r.label_fraction) << ","
               << detail::fmt4(r.metric_mean) << "," << detail::fmt4(r.metric_spread) << ","
               << detail::fmt4(r.wall_clock_s) << "," << r.missing_seeds.size() << "\n";
        }
    } else {
        nlohmann::json rows = nlohmann::json::array();
        for (const auto& r : table.rows) {
            rows.push_back({{"technique", r.technique},
                            {"backbone", r.backbone},
                            {"label_fraction", r.label_fraction},
                            {"metric_mean", r.metric_mean},
                            {"metric_spread", r.metric_spread},
                            {"wall_clock_s", r.wall_clock_s},
                            {"seeds", r.seeds},
                            {"run_ids", r.run_ids},
                            {"missing_seeds", r.missing_seeds}});
        }
        nlohmann::json doc{{"spread", table.spread == SpreadKind::variance ? "variance" : "stddev"},
                           {"rows", rows}};
        os << doc.dump(2) << "\n";
    }
    return os.str();
}

inline void emit_table(const ComparisonTable& table, TableFormat format, const std::string& path) {
    const std::string body = render_table(table, format);
    std::ofstream out(path, std::ios::trunc);
    CASSKIT_CHECK(out.good(), ValidationError, "emit_table: cannot open " + path);
    out << body;
    CASSKIT_CHECK(out.good(), ValidationError, "emit_table: write failed for " + path);
}

} // namespace casskit
