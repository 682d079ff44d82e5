#pragma once

#include <array>
#include <string>
#include <vector>

#include "casskit/augment/image_ops.hpp"
#include "casskit/errors.hpp"
#include "casskit/rng.hpp"
#include "casskit/tensor.hpp"

#include <json.hpp>

namespace casskit {

enum class TransformKind {
    resize_bilinear,
    color_jitter_or_perspective,
    color_jitter_or_affine,
    hflip,
    vflip,
    solarize,
    gaussian_blur,
    normalize,
};

inline std::string to_string(TransformKind k) {
    switch (k) {
        case TransformKind::resize_bilinear: return "resize_bilinear";
        case TransformKind::color_jitter_or_perspective: return "color_jitter_or_perspective";
        case TransformKind::color_jitter_or_affine: return "color_jitter_or_affine";
        case TransformKind::hflip: return "hflip";
        case TransformKind::vflip: return "vflip";
        case TransformKind::solarize: return "solarize";
        case TransformKind::gaussian_blur: return "gaussian_blur";
        case TransformKind::normalize: return "normalize";
    }
    return "?";
}

struct TransformStep {
    TransformKind kind = TransformKind::resize_bilinear;
    double probability = 1.0;
    // kind-specific parameters; unused fields keep their defaults
    std::size_t size = 64;              // resize
    double jitter_bcs = 0.4;            // jitter brightness/contrast/saturation factor
    double jitter_hue = 0.1;            // jitter hue fraction
    double distortion = 0.2;            // perspective
    double affine_degree = 10.0;        // affine rotation bound
    double solarize_threshold = 0.5;    // solarize
    double blur_sigma_lo = 0.1;         // blur sigma range
    double blur_sigma_hi = 2.0;
    std::array<double, 3> mean{0.485, 0.456, 0.406}; // normalize
    std::array<double, 3> stddev{0.229, 0.224, 0.225};

    void validate() const {
        CASSKIT_CHECK(probability >= 0.0 && probability <= 1.0, ValidationError,
                      "step probability out of [0,1]");
        switch (kind) {
            case TransformKind::resize_bilinear:
                CASSKIT_CHECK(size >= 2, ValidationError, "resize target too small");
                break;
            case TransformKind::color_jitter_or_perspective:
                CASSKIT_CHECK(distortion >= 0.0 && distortion < 1.0, ValidationError,
                              "distortion out of range");
                break;
            case TransformKind::color_jitter_or_affine:
                CASSKIT_CHECK(affine_degree >= 0.0 && affine_degree <= 180.0,
                              ValidationError, "affine degree out of range");
                break;
            case TransformKind::solarize:
                CASSKIT_CHECK(solarize_threshold >= 0.0 && solarize_threshold <= 1.0,
                              ValidationError, "solarize threshold out of range");
                break;
            case TransformKind::gaussian_blur:
                CASSKIT_CHECK(blur_sigma_lo > 0.0 && blur_sigma_hi >= blur_sigma_lo,
                              ValidationError, "blur sigma range invalid");
                break;
            case TransformKind::normalize:
                for (double s : stddev)
                    CASSKIT_CHECK(s > 0.0, ValidationError,
                                  "normalization std must be strictly positive");
                break;
            default:
                break;
        }
    }
};

enum class AugmentVariant { cass, cass_solarize, cass_blur, cass_blur_solarize, dino_like };

inline std::string to_string(AugmentVariant v) {
    switch (v) {
        case AugmentVariant::cass: return "cass";
        case AugmentVariant::cass_solarize: return "cass_solarize";
        case AugmentVariant::cass_blur: return "cass_blur";
        case AugmentVariant::cass_blur_solarize: return "cass_blur_solarize";
        case AugmentVariant::dino_like: return "dino_like";
    }
    return "?";
}

inline AugmentVariant augment_variant_from_string(const std::string& s) {
    if (s == "cass") return AugmentVariant::cass;
    if (s == "cass_solarize") return AugmentVariant::cass_solarize;
    if (s == "cass_blur") return AugmentVariant::cass_blur;
    if (s == "cass_blur_solarize") return AugmentVariant::cass_blur_solarize;
    if (s == "dino_like") return AugmentVariant::dino_like;
    throw ConfigError("unknown augmentation variant: " + s);
}

struct AugmentationPolicy {
    std::vector<TransformStep> steps;
    std::size_t num_views = 1;
    std::size_t input_size = 64;

    void validate() const {
        CASSKIT_CHECK(!steps.empty(), ValidationError, "policy has no steps");
        CASSKIT_CHECK(steps.back().kind == TransformKind::normalize, ValidationError,
                      "normalize must be the final step");
        for (const auto& s : steps) s.validate();
        CASSKIT_CHECK(num_views >= 1, ValidationError, "policy must produce >= 1 view");
    }
};

// The pipeline, in its fixed order: resize; jitter-or-perspective p=0.3;
// jitter-or-affine p=0.3; hflip p=0.3; vflip p=0.3; [solarize p=0.3]
// [blur p=0.3] (ablation variants only, before normalize); normalize.
// The two-view variant reuses the same step list per view.
inline AugmentationPolicy build_policy(AugmentVariant variant, std::size_t input_size) {
    AugmentationPolicy policy;
    policy.input_size = input_size;

    TransformStep resize;
    resize.kind = TransformKind::resize_bilinear;
    resize.size = input_size;
    policy.steps.push_back(resize);

    TransformStep jp;
    jp.kind = TransformKind::color_jitter_or_perspective;
    jp.probability = 0.3;
    policy.steps.push_back(jp);

    TransformStep ja;
    ja.kind = TransformKind::color_jitter_or_affine;
    ja.probability = 0.3;
    policy.steps.push_back(ja);

    TransformStep hf;
    hf.kind = TransformKind::hflip;
    hf.probability = 0.3;
    policy.steps.push_back(hf);

    TransformStep vf;
    vf.kind = TransformKind::vflip;
    vf.probability = 0.3;
    policy.steps.push_back(vf);

    const bool with_blur = variant == AugmentVariant::cass_blur ||
                           variant == AugmentVariant::cass_blur_solarize ||
                           variant == AugmentVariant::dino_like;
    const bool with_solarize = variant == AugmentVariant::cass_solarize ||
                               variant == AugmentVariant::cass_blur_solarize ||
                               variant == AugmentVariant::dino_like;
    if (with_blur) {
        TransformStep blur;
        blur.kind = TransformKind::gaussian_blur;
        blur.probability = 0.3;
        policy.steps.push_back(blur);
    }
    if (with_solarize) {
        TransformStep sol;
        sol.kind = TransformKind::solarize;
        sol.probability = 0.3;
        policy.steps.push_back(sol);
    }

    TransformStep norm;
    norm.kind = TransformKind::normalize;
    policy.steps.push_back(norm);

    if (variant == AugmentVariant::dino_like) policy.num_views = 2;
    policy.validate();
    return policy;
}

namespace detail {

inline TensorF apply_steps(const AugmentationPolicy& policy, const TensorF& image,
                           Rng& rng) {
    TensorF cur = image;
    for (const TransformStep& step : policy.steps) {
        switch (step.kind) {
            case TransformKind::resize_bilinear:
                cur = resize_bilinear(cur, step.size, step.size);
                break;
            case TransformKind::color_jitter_or_perspective:
                if (rng.bernoulli(step.probability)) {
                    if (rng.uniform_int(0, 1) == 0)
                        cur = color_jitter(cur, rng, step.jitter_bcs, step.jitter_hue);
                    else
                        cur = random_perspective(cur, rng, step.distortion);
                }
                break;
            case TransformKind::color_jitter_or_affine:
                if (rng.bernoulli(step.probability)) {
                    if (rng.uniform_int(0, 1) == 0)
                        cur = color_jitter(cur, rng, step.jitter_bcs, step.jitter_hue);
                    else
                        cur = random_affine(cur, rng, step.affine_degree);
                }
                break;
            case TransformKind::hflip:
                if (rng.bernoulli(step.probability)) cur = hflip(cur);
                break;
            case TransformKind::vflip:
                if (rng.bernoulli(step.probability)) cur = vflip(cur);
                break;
            case TransformKind::solarize:
                if (rng.bernoulli(step.probability))
                    cur = solarize(cur, static_cast<float>(step.solarize_threshold));
                break;
            case TransformKind::gaussian_blur:
                if (rng.bernoulli(step.probability)) {
                    const double sigma = rng.uniform(step.blur_sigma_lo, step.blur_sigma_hi);
                    cur = gaussian_blur(cur, blur_kernel_for(policy.input_size), sigma);
                }
                break;
            case TransformKind::normalize:
                cur = normalize_channels(cur, step.mean, step.stddev);
                break;
        }
    }
    return cur;
}

inline TensorF prepare_input(const TensorF& image) {
    CASSKIT_CHECK(image.rank() == 3, ValidationError,
                  "augmentation input must be (C, H, W)");
    CASSKIT_CHECK(image.dim(0) == 1 || image.dim(0) == 3, ValidationError,
                  "augmentation input must have 1 or 3 channels");
    CASSKIT_CHECK(image.all_finite(), ValidationError,
                  "augmentation input has non-finite pixels");
    return image.dim(0) == 1 ? replicate_gray(image) : image;
}

} // namespace detail

// One augmented view, deterministic in (policy, image, seed).
inline TensorF apply(const AugmentationPolicy& policy, const TensorF& image,
                     std::uint64_t seed) {
    policy.validate();
    TensorF in = detail::prepare_input(image);
    Rng rng(seed);
    return detail::apply_steps(policy, in, rng);
}

// All views the policy defines: one for the single-view recipe, two for
// the two-view baseline policy. View i draws from its own derived seed.
inline std::vector<TensorF> apply_views(const AugmentationPolicy& policy,
                                        const TensorF& image, std::uint64_t seed) {
    policy.validate();
    TensorF in = detail::prepare_input(image);
    std::vector<TensorF> views;
    views.reserve(policy.num_views);
    for (std::size_t v = 0; v < policy.num_views; ++v) {
        Rng rng(derive_seed(seed, "view", v));
        views.push_back(detail::apply_steps(policy, in, rng));
    }
    return views;
}

// The evaluation-time transform: deterministic resize plus normalize,
// no stochastic steps.
inline TensorF eval_transform(const TensorF& image, std::size_t input_size) {
    TensorF in = detail::prepare_input(image);
    TensorF resized = resize_bilinear(in, input_size, input_size);
    TransformStep norm;
    return normalize_channels(resized, norm.mean, norm.stddev);
}

inline nlohmann::json policy_to_json(const AugmentationPolicy& policy) {
    nlohmann::json steps = nlohmann::json::array();
    for (const auto& s : policy.steps) {
        nlohmann::json j{{"kind", to_string(s.kind)}, {"p", s.probability}};
        switch (s.kind) {
            case TransformKind::resize_bilinear: j["size"] = s.size; break;
            case TransformKind::color_jitter_or_perspective:
                j["jitter_bcs"] = s.jitter_bcs;
                j["jitter_hue"] = s.jitter_hue;
                j["distortion"] = s.distortion;
                break;
            case TransformKind::color_jitter_or_affine:
                j["jitter_bcs"] = s.jitter_bcs;
                j["jitter_hue"] = s.jitter_hue;
                j["degree"] = s.affine_degree;
                break;
            case TransformKind::solarize: j["threshold"] = s.solarize_threshold; break;
            case TransformKind::gaussian_blur:
                j["sigma_lo"] = s.blur_sigma_lo;
                j["sigma_hi"] = s.blur_sigma_hi;
                break;
            case TransformKind::normalize:
                j["mean"] = s.mean;
                j["std"] = s.stddev;
                break;
            default: break;
        }
        steps.push_back(std::move(j));
    }
    return {{"steps", std::move(steps)}, {"num_views", policy.num_views},
            {"input_size", policy.input_size}};
}

} // namespace casskit
