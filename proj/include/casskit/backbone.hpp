#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <unordered_set>

#include "casskit/errors.hpp"
#include "casskit/nn/conv_net.hpp"
#include "casskit/nn/network.hpp"
#include "casskit/nn/vit.hpp"
#include "casskit/rng.hpp"

namespace casskit {

enum class BackboneFamily { conv, attention };

inline std::string to_string(BackboneFamily f) {
    return f == BackboneFamily::conv ? "conv" : "attention";
}

inline BackboneFamily backbone_family_from_string(const std::string& s) {
    if (s == "conv") return BackboneFamily::conv;
    if (s == "attention") return BackboneFamily::attention;
    throw ConfigError("unknown backbone family: " + s);
}

enum class InitMode { random, pretrained };

inline std::string to_string(InitMode m) {
    return m == InitMode::random ? "random" : "pretrained";
}

inline InitMode init_mode_from_string(const std::string& s) {
    if (s == "random") return InitMode::random;
    if (s == "pretrained") return InitMode::pretrained;
    throw ConfigError("unknown init mode: " + s);
}

struct BackboneSpec {
    BackboneFamily family = BackboneFamily::conv;
    std::string variant = "tiny-conv4";
    std::size_t input_size = 64;
    std::size_t patch_size = 16; // attention family only
    std::size_t logit_width = 32;
    InitMode init_mode = InitMode::random;
    // Source weights for pretrained mode: a checkpoint file plus the
    // branch to pull from ("a" or "b").
    std::string pretrained_path;
    std::string pretrained_branch = "a";

    void validate() const {
        CASSKIT_CHECK(logit_width >= 2, SpecError, "logit_width must be >= 2");
        CASSKIT_CHECK(input_size >= 8, SpecError, "input_size must be >= 8");
        if (family == BackboneFamily::attention) {
            CASSKIT_CHECK(patch_size > 0 && input_size % patch_size == 0, SpecError,
                          "patch_size " + std::to_string(patch_size) +
                              " must divide input_size " + std::to_string(input_size));
        }
        if (init_mode == InitMode::pretrained) {
            CASSKIT_CHECK(!pretrained_path.empty(), SpecError,
                          "pretrained init requires a weight file path");
        }
    }
};

inline bool operator==(const BackboneSpec& a, const BackboneSpec& b) {
    return a.family == b.family && a.variant == b.variant && a.input_size == b.input_size &&
           a.patch_size == b.patch_size && a.logit_width == b.logit_width &&
           a.init_mode == b.init_mode;
}

// Registry of buildable variants. Ships the two desk-scale networks;
// externally supplied architectures hook in through register_backbone.
using BackboneFactory =
    std::function<NetworkPtr<float>(const BackboneSpec&, std::uint64_t seed)>;

inline std::map<std::string, BackboneFactory>& backbone_registry() {
    static std::map<std::string, BackboneFactory> reg{
        {"tiny-conv4",
         [](const BackboneSpec& spec, std::uint64_t seed) -> NetworkPtr<float> {
             CASSKIT_CHECK(spec.family == BackboneFamily::conv, SpecError,
                           "tiny-conv4 is a conv-family variant");
             return std::make_unique<TinyConvNet<float>>(spec.input_size,
                                                         spec.logit_width, seed);
         }},
        {"tiny-vit2",
         [](const BackboneSpec& spec, std::uint64_t seed) -> NetworkPtr<float> {
             CASSKIT_CHECK(spec.family == BackboneFamily::attention, SpecError,
                           "tiny-vit2 is an attention-family variant");
             return std::make_unique<TinyViT<float>>(spec.input_size, spec.patch_size,
                                                     spec.logit_width, seed);
         }},
    };
    return reg;
}

inline void register_backbone(const std::string& variant, BackboneFactory factory) {
    backbone_registry()[variant] = std::move(factory);
}

// Pretrained initialization reads a saved weight file; the routine lives
// with the checkpoint format and installs itself here when that header
// is included, keeping this header free of file-format code.
using PretrainedLoader = std::function<void(Network<float>&, const BackboneSpec&)>;

inline PretrainedLoader& pretrained_loader() {
    static PretrainedLoader fn;
    return fn;
}

inline NetworkPtr<float> build_backbone(const BackboneSpec& spec, std::uint64_t seed) {
    spec.validate();
    auto& reg = backbone_registry();
    auto it = reg.find(spec.variant);
    CASSKIT_CHECK(it != reg.end(), RegistryError,
                  "unknown backbone variant: " + spec.variant);
    NetworkPtr<float> net = it->second(spec, seed);
    if (spec.init_mode == InitMode::pretrained) {
        CASSKIT_CHECK(static_cast<bool>(pretrained_loader()), RegistryError,
                      "pretrained init requires the checkpoint header to be included");
        pretrained_loader()(*net, spec);
    }
    return net;
}

struct DualBackbone {
    NetworkPtr<float> branch_a;
    NetworkPtr<float> branch_b;
    BackboneSpec spec_a;
    BackboneSpec spec_b;
};

inline DualBackbone pair_backbones(const BackboneSpec& spec_a, const BackboneSpec& spec_b,
                                   std::uint64_t seed) {
    CASSKIT_CHECK(spec_a.logit_width == spec_b.logit_width, PairingError,
                  "logit widths differ: " + std::to_string(spec_a.logit_width) + " vs " +
                      std::to_string(spec_b.logit_width));
    CASSKIT_CHECK(spec_a.input_size == spec_b.input_size, PairingError,
                  "input sizes differ: " + std::to_string(spec_a.input_size) + " vs " +
                      std::to_string(spec_b.input_size));
    DualBackbone pair;
    pair.spec_a = spec_a;
    pair.spec_b = spec_b;
    pair.branch_a = build_backbone(spec_a, derive_seed(seed, "branch", 0));
    pair.branch_b = build_backbone(spec_b, derive_seed(seed, "branch", 1));
    return pair;
}

// The no-sharing contract, checkable: the two branches must not alias
// any parameter storage.
inline bool params_disjoint(Network<float>& a, Network<float>& b) {
    std::unordered_set<const void*> seen;
    for (const auto* p : a.params()) seen.insert(static_cast<const void*>(p));
    for (const auto* p : b.params())
        if (seen.count(static_cast<const void*>(p))) return false;
    return true;
}

} // namespace casskit
