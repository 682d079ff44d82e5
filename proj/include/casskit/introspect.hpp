#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "casskit/errors.hpp"
#include "casskit/augment/image_ops.hpp"
#include "casskit/nn/network.hpp"
#include "casskit/tensor.hpp"

namespace casskit {

// ---------------------------------------------------------------------------
// Activation maps: conv feature maps and CLS attention maps
// ---------------------------------------------------------------------------

enum class MapKind { feature, attention };

inline const char* to_string(MapKind k) {
    return k == MapKind::feature ? "feature" : "attention";
}

struct ActivationMap {
    MapKind kind = MapKind::feature;
    std::size_t source_index = 0; // 1-based layer or block
    std::size_t channel = 0;      // feature maps only
    Tensor<float> map;            // (H', W')
    std::vector<std::string> sample_ids;
    bool normalized = false; // attention maps: min-max applied
};

namespace detail {

inline void check_single_image(const Tensor<float>& image) {
    CASSKIT_CHECK(image.rank() == 3 && image.dim(0) == 3, ValidationError,
                  "introspection expects one (3, S, S) image, got " + image.shape_str());
    CASSKIT_CHECK(image.dim(1) == image.dim(2), ValidationError,
                  "introspection expects a square image");
}

inline Tensor<float> as_batch(const Tensor<float>& image) {
    Tensor<float> batch({1, image.dim(0), image.dim(1), image.dim(2)});
    std::copy(image.data(), image.data() + image.size(), batch.data());
    return batch;
}

// Min-max to [0, 1]; a constant map carries no ordering information and is
// rendered mid-gray.
inline void minmax_normalize(Tensor<float>& map) {
    float lo = std::numeric_limits<float>::infinity();
    float hi = -std::numeric_limits<float>::infinity();
    for (std::size_t i = 0; i < map.size(); ++i) {
        lo = std::min(lo, map[i]);
        hi = std::max(hi, map[i]);
    }
    if (static_cast<double>(hi) - static_cast<double>(lo) < 1e-12) {
        map.fill(0.5f);
        return;
    }
    const float span = hi - lo;
    for (std::size_t i = 0; i < map.size(); ++i) map[i] = (map[i] - lo) / span;
}

} // namespace detail

// Top-k channels of the requested conv layers, ranked by mean absolute
// activation (ties broken toward the lower channel index). Maps are the raw
// convolution outputs: real-valued, pre-activation.
inline std::vector<ActivationMap> extract_feature_maps(Network<float>& net,
                                                       const Tensor<float>& image,
                                                       const std::vector<std::size_t>& layers,
                                                       std::size_t top_k = 8,
                                                       const std::string& sample_id = "") {
    detail::check_single_image(image);
    CASSKIT_CHECK(net.num_conv_layers() > 0, ValidationError,
                  "unsupported architecture: network exposes no conv feature maps");
    CASSKIT_CHECK(!layers.empty(), ValidationError, "no layers requested");
    CASSKIT_CHECK(top_k >= 1, ValidationError, "top_k must be >= 1");
    for (std::size_t l : layers)
        CASSKIT_CHECK(l >= 1 && l <= net.num_conv_layers(), ValidationError,
                      "feature layer index " + std::to_string(l) + " out of range [1, " +
                          std::to_string(net.num_conv_layers()) + "]");

    net.forward(detail::as_batch(image));
    std::vector<ActivationMap> out;
    for (std::size_t l : layers) {
        const Tensor<float>& maps = net.conv_feature_map(l); // (1, C, H', W')
        const std::size_t c = maps.dim(1), h = maps.dim(2), w = maps.dim(3);
        std::vector<std::pair<double, std::size_t>> ranked;
        for (std::size_t ch = 0; ch < c; ++ch) {
            double acc = 0.0;
            for (std::size_t i = 0; i < h; ++i)
                for (std::size_t j = 0; j < w; ++j)
                    acc += std::abs(static_cast<double>(maps.at4(0, ch, i, j)));
            ranked.emplace_back(acc / static_cast<double>(h * w), ch);
        }
        std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first > b.first;
            return a.second < b.second;
        });
        const std::size_t keep = std::min(top_k, c);
        for (std::size_t r = 0; r < keep; ++r) {
            ActivationMap m;
            m.kind = MapKind::feature;
            m.source_index = l;
            m.channel = ranked[r].second;
            m.map = Tensor<float>({h, w});
            for (std::size_t i = 0; i < h; ++i)
                for (std::size_t j = 0; j < w; ++j)
                    m.map.at2(i, j) = maps.at4(0, m.channel, i, j);
            if (!sample_id.empty()) m.sample_ids.push_back(sample_id);
            out.push_back(std::move(m));
        }
    }
    return out;
}

// Head selection for attention maps: empty optional averages all heads.
using HeadChoice = std::optional<std::size_t>;

namespace detail {

// CLS-to-patch attention of one block, aggregated over heads, reshaped to
// the patch grid and bilinearly resized to the input resolution. No final
// normalization here so that sample averages can run on raw weights.
inline Tensor<float> attention_map_raw(Network<float>& net, const Tensor<float>& image,
                                       std::size_t block, HeadChoice head) {
    check_single_image(image);
    CASSKIT_CHECK(net.has_cls_token(), ValidationError,
                  "unsupported architecture: network has no CLS token");
    CASSKIT_CHECK(block >= 1 && block <= net.num_attention_blocks(), ValidationError,
                  "attention block index " + std::to_string(block) + " out of range [1, " +
                      std::to_string(net.num_attention_blocks()) + "]");

    net.forward(as_batch(image));
    const Tensor<float>& probs = net.attention_probs(block); // (1, H, T, T)
    const std::size_t heads = probs.dim(1), tokens = probs.dim(2);
    const std::size_t grid = net.patch_grid();
    CASSKIT_CHECK(tokens == grid * grid + 1, ValidationError,
                  "token count does not match the patch grid");
    if (head) CASSKIT_CHECK(*head < heads, ValidationError,
                            "head index " + std::to_string(*head) + " out of range [0, " +
                                std::to_string(heads) + ")");

    Tensor<float> cell({grid, grid});
    for (std::size_t p = 0; p < grid * grid; ++p) {
        double acc = 0.0;
        if (head) {
            acc = static_cast<double>(probs.at4(0, *head, 0, p + 1));
        } else {
            for (std::size_t h = 0; h < heads; ++h)
                acc += static_cast<double>(probs.at4(0, h, 0, p + 1));
            acc /= static_cast<double>(heads);
        }
        cell[p] = static_cast<float>(acc);
    }

    const std::size_t s = image.dim(1);
    Tensor<float> one({1, grid, grid});
    std::copy(cell.data(), cell.data() + cell.size(), one.data());
    const Tensor<float> resized = resize_bilinear(one, s, s);
    Tensor<float> map({s, s});
    std::copy(resized.data(), resized.data() + resized.size(), map.data());
    return map;
}

} // namespace detail

inline ActivationMap extract_attention_map(Network<float>& net, const Tensor<float>& image,
                                           std::size_t block, HeadChoice head = std::nullopt,
                                           const std::string& sample_id = "") {
    ActivationMap m;
    m.kind = MapKind::attention;
    m.source_index = block;
    m.map = detail::attention_map_raw(net, image, block, head);
    detail::minmax_normalize(m.map);
    m.normalized = true;
    if (!sample_id.empty()) m.sample_ids.push_back(sample_id);
    return m;
}

// Pixel-wise mean of per-sample attention maps, averaged before the final
// normalization so bright samples cannot dominate via rescaling.
inline ActivationMap average_attention_maps(Network<float>& net,
                                            const std::vector<Tensor<float>>& images,
                                            std::size_t block, HeadChoice head = std::nullopt,
                                            const std::vector<std::string>& sample_ids = {}) {
    CASSKIT_CHECK(!images.empty(), ValidationError,
                  "average_attention_maps: at least one sample required");
    CASSKIT_CHECK(sample_ids.empty() || sample_ids.size() == images.size(), ValidationError,
                  "average_attention_maps: sample id count mismatch");

    Tensor<double> acc;
    for (const auto& image : images) {
        const Tensor<float> raw = detail::attention_map_raw(net, image, block, head);
        if (acc.size() == 0) acc = Tensor<double>(raw.shape());
        CASSKIT_CHECK(acc.shape() == raw.shape(), ValidationError,
                      "average_attention_maps: inconsistent image sizes");
        for (std::size_t i = 0; i < raw.size(); ++i) acc[i] += static_cast<double>(raw[i]);
    }
    ActivationMap m;
    m.kind = MapKind::attention;
    m.source_index = block;
    m.map = Tensor<float>(acc.shape());
    for (std::size_t i = 0; i < acc.size(); ++i)
        m.map[i] = static_cast<float>(acc[i] / static_cast<double>(images.size()));
    detail::minmax_normalize(m.map);
    m.normalized = true;
    m.sample_ids = sample_ids;
    return m;
}

// ---------------------------------------------------------------------------
// Artifact emission: PNG plus JSON sidecar
// ---------------------------------------------------------------------------

enum class RenderMode { grayscale, heatmap, overlay };

inline const char* to_string(RenderMode r) {
    switch (r) {
        case RenderMode::grayscale: return "grayscale";
        case RenderMode::heatmap: return "heatmap";
        case RenderMode::overlay: return "overlay";
    }
    return "?";
}

struct MapStats {
    double entropy = 0.0;
    double max_value = 0.0;
    std::size_t argmax_row = 0;
    std::size_t argmax_col = 0;
};

// Shannon entropy of the map treated as a distribution over pixels
// (absolute values, normalized to unit mass). Logged, never asserted.
inline MapStats map_stats(const ActivationMap& m) {
    MapStats stats;
    CASSKIT_CHECK(m.map.rank() == 2 && m.map.size() > 0, ValidationError,
                  "map_stats: empty activation map");
    double mass = 0.0;
    stats.max_value = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < m.map.dim(0); ++i)
        for (std::size_t j = 0; j < m.map.dim(1); ++j) {
            const double v = static_cast<double>(m.map.at2(i, j));
            mass += std::abs(v);
            if (v > stats.max_value) {
                stats.max_value = v;
                stats.argmax_row = i;
                stats.argmax_col = j;
            }
        }
    if (mass > 0.0) {
        for (std::size_t i = 0; i < m.map.size(); ++i) {
            const double p = std::abs(static_cast<double>(m.map[i])) / mass;
            if (p > 0.0) stats.entropy -= p * std::log(p);
        }
    }
    return stats;
}

namespace detail {

inline cv::Mat map_to_gray(const ActivationMap& m) {
    Tensor<float> display = m.map;
    if (!m.normalized) minmax_normalize(display);
    cv::Mat gray(static_cast<int>(display.dim(0)), static_cast<int>(display.dim(1)), CV_8UC1);
    for (std::size_t i = 0; i < display.dim(0); ++i)
        for (std::size_t j = 0; j < display.dim(1); ++j)
            gray.at<std::uint8_t>(static_cast<int>(i), static_cast<int>(j)) =
                static_cast<std::uint8_t>(std::lround(
                    std::clamp(static_cast<double>(display.at2(i, j)), 0.0, 1.0) * 255.0));
    return gray;
}

inline cv::Mat tensor_to_bgr(const Tensor<float>& image) {
    cv::Mat bgr(static_cast<int>(image.dim(1)), static_cast<int>(image.dim(2)), CV_8UC3);
    for (std::size_t i = 0; i < image.dim(1); ++i)
        for (std::size_t j = 0; j < image.dim(2); ++j) {
            auto& px = bgr.at<cv::Vec3b>(static_cast<int>(i), static_cast<int>(j));
            for (int c = 0; c < 3; ++c)
                px[2 - c] = static_cast<std::uint8_t>(std::lround(
                    std::clamp(static_cast<double>(image.at3(static_cast<std::size_t>(c), i, j)),
                               0.0, 1.0) *
                    255.0));
        }
    return bgr;
}

} // namespace detail

// Writes the PNG and its sidecar JSON; returns the logged statistics.
// Overlay mode blends the heatmap onto `underlay`, an RGB image in [0,1]
// with the same spatial size as the map.
inline MapStats emit_activation_artifact(const ActivationMap& m, const std::string& png_path,
                                         RenderMode mode = RenderMode::grayscale,
                                         const Tensor<float>* underlay = nullptr) {
    const MapStats stats = map_stats(m);
    cv::Mat out;
    if (mode == RenderMode::grayscale) {
        out = detail::map_to_gray(m);
    } else {
        cv::Mat colored;
        cv::applyColorMap(detail::map_to_gray(m), colored, cv::COLORMAP_JET);
        if (mode == RenderMode::heatmap) {
            out = colored;
        } else {
            CASSKIT_CHECK(underlay != nullptr && underlay->rank() == 3 &&
                              underlay->dim(0) == 3 && underlay->dim(1) == m.map.dim(0) &&
                              underlay->dim(2) == m.map.dim(1),
                          ValidationError,
                          "overlay rendering needs a (3, H, W) underlay matching the map");
            cv::addWeighted(detail::tensor_to_bgr(*underlay), 0.5, colored, 0.5, 0.0, out);
        }
    }
    CASSKIT_CHECK(cv::imwrite(png_path, out), ValidationError,
                  "failed to write image " + png_path);

    nlohmann::json sidecar{{"kind", to_string(m.kind)},
                           {m.kind == MapKind::feature ? "layer" : "block", m.source_index},
                           {"sample_ids", m.sample_ids},
                           {"render", to_string(mode)},
                           {"stats",
                            {{"entropy", stats.entropy},
                             {"max", stats.max_value},
                             {"argmax", {stats.argmax_row, stats.argmax_col}}}}};
    if (m.kind == MapKind::feature) sidecar["channel"] = m.channel;
    std::ofstream side(png_path + ".json", std::ios::trunc);
    CASSKIT_CHECK(side.good(), ValidationError, "failed to write sidecar for " + png_path);
    side << sidecar.dump(2) << "\n";
    return stats;
}

} // namespace casskit
