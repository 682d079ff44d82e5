#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "casskit/backbone.hpp"
#include "casskit/errors.hpp"
#include "casskit/nn/network.hpp"
#include "casskit/optim/schedule.hpp"
#include "casskit/optim/swa.hpp"

#include <json.hpp>

namespace casskit {

// Checkpoint container, format "CASSKIT-CKPT-1":
//   magic (14 bytes) | u64 LE header length | header JSON | scalar blob
// The header carries both backbone specs, the step counter, schedule and
// weight-averaging state, the config digest, and an entry table mapping
// namespaced parameter names to (dtype, shape, byte offset) in the blob.
// Final weights are stored as f32, averaging accumulators as f64 so a
// resumed run reproduces the same averages bit for bit.
inline constexpr char kCheckpointMagic[] = "CASSKIT-CKPT-1";
inline constexpr std::size_t kCheckpointMagicLen = 14;

struct TrainState {
    std::int64_t step = 0;
    ScheduleState schedule;
    SwaState<float> swa_a;
    SwaState<float> swa_b;
    std::string config_digest;
};

inline nlohmann::json spec_to_json(const BackboneSpec& s) {
    return {{"family", to_string(s.family)},
            {"variant", s.variant},
            {"input_size", s.input_size},
            {"patch_size", s.patch_size},
            {"logit_width", s.logit_width},
            {"init_mode", to_string(s.init_mode)}};
}

inline BackboneSpec spec_from_json(const nlohmann::json& j) {
    BackboneSpec s;
    try {
        s.family = backbone_family_from_string(j.at("family").get<std::string>());
        s.variant = j.at("variant").get<std::string>();
        s.input_size = j.at("input_size").get<std::size_t>();
        s.patch_size = j.at("patch_size").get<std::size_t>();
        s.logit_width = j.at("logit_width").get<std::size_t>();
        s.init_mode = init_mode_from_string(j.at("init_mode").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("checkpoint spec field invalid: ") + e.what());
    }
    return s;
}

namespace detail {

template <typename S>
void append_tensor_bytes(std::vector<char>& blob, const Tensor<S>& t) {
    const std::size_t bytes = t.size() * sizeof(S);
    const std::size_t at = blob.size();
    blob.resize(at + bytes);
    std::memcpy(blob.data() + at, t.data(), bytes);
}

inline nlohmann::json entry_json(const std::string& name, const char* dtype,
                                 const std::vector<std::size_t>& shape,
                                 std::size_t offset) {
    return {{"name", name}, {"dtype", dtype}, {"shape", shape}, {"offset", offset}};
}

struct BlobReader {
    const std::vector<char>& blob;

    template <typename S>
    Tensor<S> read(const nlohmann::json& entry, const char* want_dtype) const {
        const std::string name = entry.at("name").get<std::string>();
        const std::string dtype = entry.at("dtype").get<std::string>();
        CASSKIT_CHECK(dtype == want_dtype, CheckpointError,
                      "checkpoint entry '" + name + "': dtype " + dtype + ", expected " +
                          want_dtype);
        std::vector<std::size_t> shape =
            entry.at("shape").get<std::vector<std::size_t>>();
        const std::size_t offset = entry.at("offset").get<std::size_t>();
        Tensor<S> t(shape);
        const std::size_t bytes = t.size() * sizeof(S);
        CASSKIT_CHECK(offset + bytes <= blob.size(), CheckpointError,
                      "checkpoint entry '" + name + "': blob range out of bounds");
        std::memcpy(t.data(), blob.data() + offset, bytes);
        return t;
    }
};

// Collect entries for one branch: final weights, plus averaging
// accumulators and the materialized average when averaging has begun.
inline void emit_branch(nlohmann::json& entries, std::vector<char>& blob,
                        const std::string& tag, Network<float>& net,
                        const SwaState<float>& swa) {
    ParamRefs<float> params = net.params();
    for (const auto* p : params) {
        entries.push_back(entry_json(tag + "/" + p->name, "f32", p->value.shape(),
                                     blob.size()));
        append_tensor_bytes(blob, p->value);
    }
    if (swa.count > 0) {
        CASSKIT_CHECK(swa.sums.size() == params.size(), CheckpointError,
                      "weight-averaging state does not match parameter list");
        for (std::size_t i = 0; i < params.size(); ++i) {
            entries.push_back(entry_json(tag + "_swa_sum/" + params[i]->name, "f64",
                                         swa.sums[i].shape(), blob.size()));
            append_tensor_bytes(blob, swa.sums[i]);
        }
        std::vector<Tensor<float>> avg = swa_average(swa);
        for (std::size_t i = 0; i < params.size(); ++i) {
            entries.push_back(entry_json(tag + "_swa_avg/" + params[i]->name, "f32",
                                         avg[i].shape(), blob.size()));
            append_tensor_bytes(blob, avg[i]);
        }
    }
}

inline void load_branch(const nlohmann::json& header, const BlobReader& reader,
                        const std::string& tag, Network<float>& net,
                        SwaState<float>& swa) {
    std::map<std::string, const nlohmann::json*> by_name;
    for (const auto& e : header.at("entries"))
        by_name[e.at("name").get<std::string>()] = &e;

    ParamRefs<float> params = net.params();
    for (auto* p : params) {
        auto it = by_name.find(tag + "/" + p->name);
        CASSKIT_CHECK(it != by_name.end(), CheckpointError,
                      "checkpoint missing entry '" + tag + "/" + p->name + "'");
        Tensor<float> v = reader.read<float>(*it->second, "f32");
        CASSKIT_CHECK(v.same_shape(p->value), CheckpointError,
                      "checkpoint entry '" + tag + "/" + p->name + "': shape " +
                          v.shape_str() + " does not match network " +
                          p->value.shape_str());
        p->value = std::move(v);
    }

    swa = SwaState<float>{};
    swa.count = header.at("swa").at(tag + "_count").get<std::int64_t>();
    swa.start_epoch = header.at("swa").at("start_epoch").get<int>();
    if (swa.count > 0) {
        swa.sums.reserve(params.size());
        for (const auto* p : params) {
            auto it = by_name.find(tag + "_swa_sum/" + p->name);
            CASSKIT_CHECK(it != by_name.end(), CheckpointError,
                          "checkpoint missing entry '" + tag + "_swa_sum/" + p->name +
                              "'");
            swa.sums.push_back(reader.read<double>(*it->second, "f64"));
        }
    }
}

} // namespace detail

inline void save_checkpoint(const DualBackbone& pair, const TrainState& state,
                            const std::string& path) {
    nlohmann::json header;
    header["spec_a"] = spec_to_json(pair.spec_a);
    header["spec_b"] = spec_to_json(pair.spec_b);
    header["step"] = state.step;
    header["config_digest"] = state.config_digest;
    header["schedule"] = {{"lr_max", state.schedule.schedule.lr_max},
                          {"lr_min", state.schedule.schedule.lr_min},
                          {"t_max", state.schedule.schedule.t_max},
                          {"warm_restarts", state.schedule.schedule.warm_restarts},
                          {"step", state.schedule.step}};
    header["swa"] = {{"a_count", state.swa_a.count},
                     {"b_count", state.swa_b.count},
                     {"start_epoch", state.swa_a.start_epoch}};

    nlohmann::json entries = nlohmann::json::array();
    std::vector<char> blob;
    detail::emit_branch(entries, blob, "a", *pair.branch_a, state.swa_a);
    detail::emit_branch(entries, blob, "b", *pair.branch_b, state.swa_b);
    header["entries"] = std::move(entries);

    const std::string header_str = header.dump();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    CASSKIT_CHECK(out.good(), CheckpointError, "cannot open for writing: " + path);
    out.write(kCheckpointMagic, kCheckpointMagicLen);
    const std::uint64_t hlen = header_str.size();
    out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    CASSKIT_CHECK(out.good(), CheckpointError, "write failed: " + path);
}

struct LoadedCheckpoint {
    DualBackbone pair;
    TrainState state;
};

// Raw file sections, shared by the full loader and the pretrained-init path.
namespace detail {
struct RawCheckpoint {
    nlohmann::json header;
    std::vector<char> blob;
};

inline RawCheckpoint read_raw_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    CASSKIT_CHECK(in.good(), CheckpointError, "cannot open checkpoint: " + path);
    char magic[kCheckpointMagicLen];
    in.read(magic, kCheckpointMagicLen);
    CASSKIT_CHECK(in.gcount() == static_cast<std::streamsize>(kCheckpointMagicLen) &&
                      std::memcmp(magic, kCheckpointMagic, kCheckpointMagicLen) == 0,
                  CheckpointError, "bad checkpoint magic in " + path);
    std::uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    CASSKIT_CHECK(in.gcount() == sizeof(hlen), CheckpointError,
                  "truncated checkpoint header length in " + path);
    std::string header_str(hlen, '\0');
    in.read(header_str.data(), static_cast<std::streamsize>(hlen));
    CASSKIT_CHECK(in.gcount() == static_cast<std::streamsize>(hlen), CheckpointError,
                  "truncated checkpoint header in " + path);
    RawCheckpoint raw;
    try {
        raw.header = nlohmann::json::parse(header_str);
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("checkpoint header is not valid JSON: ") +
                              e.what());
    }
    raw.blob.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    return raw;
}
} // namespace detail

inline LoadedCheckpoint load_checkpoint(const std::string& path,
                                        const std::string& expected_digest = "") {
    detail::RawCheckpoint raw = detail::read_raw_checkpoint(path);
    const nlohmann::json& h = raw.header;
    for (const char* key : {"spec_a", "spec_b", "step", "config_digest", "schedule",
                            "swa", "entries"})
        CASSKIT_CHECK(h.contains(key), CheckpointError,
                      std::string("checkpoint header missing field '") + key + "'");

    LoadedCheckpoint out;
    out.state.config_digest = h.at("config_digest").get<std::string>();
    if (!expected_digest.empty())
        CASSKIT_CHECK(out.state.config_digest == expected_digest, CheckpointError,
                      "checkpoint field 'config_digest' mismatch: stored " +
                          out.state.config_digest + ", expected " + expected_digest);

    out.pair.spec_a = spec_from_json(h.at("spec_a"));
    out.pair.spec_b = spec_from_json(h.at("spec_b"));
    // Weights come from the file; never re-trigger a pretrained load here.
    out.pair.spec_a.init_mode = InitMode::random;
    out.pair.spec_b.init_mode = InitMode::random;
    out.pair.branch_a = build_backbone(out.pair.spec_a, 0);
    out.pair.branch_b = build_backbone(out.pair.spec_b, 0);

    try {
        out.state.step = h.at("step").get<std::int64_t>();
        const auto& sch = h.at("schedule");
        out.state.schedule.schedule.lr_max = sch.at("lr_max").get<double>();
        out.state.schedule.schedule.lr_min = sch.at("lr_min").get<double>();
        out.state.schedule.schedule.t_max = sch.at("t_max").get<int>();
        out.state.schedule.schedule.warm_restarts = sch.at("warm_restarts").get<bool>();
        out.state.schedule.step = sch.at("step").get<int>();
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("checkpoint field 'schedule' invalid: ") +
                              e.what());
    }

    detail::BlobReader reader{raw.blob};
    detail::load_branch(h, reader, "a", *out.pair.branch_a, out.state.swa_a);
    detail::load_branch(h, reader, "b", *out.pair.branch_b, out.state.swa_b);
    return out;
}

// Materialized averaged weights stored in a checkpoint, keyed by
// parameter name, for one branch. Empty if averaging never ran.
inline std::map<std::string, Tensor<float>> load_swa_weights(const std::string& path,
                                                             const std::string& branch) {
    detail::RawCheckpoint raw = detail::read_raw_checkpoint(path);
    detail::BlobReader reader{raw.blob};
    std::map<std::string, Tensor<float>> out;
    const std::string prefix = branch + "_swa_avg/";
    for (const auto& e : raw.header.at("entries")) {
        const std::string name = e.at("name").get<std::string>();
        if (name.rfind(prefix, 0) == 0)
            out.emplace(name.substr(prefix.size()), reader.read<float>(e, "f32"));
    }
    return out;
}

// Pretrained initialization: copy weights for one branch of a saved
// checkpoint into a freshly built network. A head whose stored shape
// disagrees with the requested logit width keeps its fresh random
// initialization; any other shape mismatch is an error.
inline void load_pretrained_into(Network<float>& net, const std::string& path,
                                 const std::string& branch, std::size_t logit_width) {
    detail::RawCheckpoint raw = detail::read_raw_checkpoint(path);
    detail::BlobReader reader{raw.blob};
    std::map<std::string, const nlohmann::json*> by_name;
    for (const auto& e : raw.header.at("entries"))
        by_name[e.at("name").get<std::string>()] = &e;

    for (auto* p : net.params()) {
        const std::string key = branch + "/" + p->name;
        auto it = by_name.find(key);
        const bool is_head = p->name.rfind("head.", 0) == 0;
        if (it == by_name.end()) {
            CASSKIT_CHECK(is_head, CheckpointError,
                          "pretrained weights missing entry '" + key + "'");
            continue;
        }
        Tensor<float> v = reader.read<float>(*it->second, "f32");
        if (!v.same_shape(p->value)) {
            CASSKIT_CHECK(is_head, CheckpointError,
                          "pretrained entry '" + key + "': shape " + v.shape_str() +
                              " does not match network " + p->value.shape_str());
            continue; // fresh head of the requested width stays in place
        }
        p->value = std::move(v);
    }
    (void)logit_width;
}

namespace detail {
inline const bool pretrained_loader_installed = [] {
    pretrained_loader() = [](Network<float>& net, const BackboneSpec& spec) {
        load_pretrained_into(net, spec.pretrained_path, spec.pretrained_branch,
                             spec.logit_width);
    };
    return true;
}();
} // namespace detail

} // namespace casskit
