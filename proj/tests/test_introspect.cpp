#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <vector>

#include <nlohmann/json.hpp>

#include "casskit/backbone.hpp"
#include "casskit/introspect.hpp"

using namespace casskit;

namespace {

struct TempDir {
    std::filesystem::path path;
    TempDir() {
        path = std::filesystem::temp_directory_path() /
               ("casskit-introspect-" + std::to_string(std::random_device{}()));
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
};

BackboneSpec conv_spec() {
    BackboneSpec spec{BackboneFamily::conv, "tiny-conv4"};
    spec.input_size = 64;
    spec.logit_width = 8;
    return spec;
}

BackboneSpec vit_spec() {
    BackboneSpec spec{BackboneFamily::attention, "tiny-vit2"};
    spec.input_size = 64;
    spec.patch_size = 16;
    spec.logit_width = 8;
    return spec;
}

Tensor<float> demo_image(std::uint64_t seed = 21, std::size_t s = 64) {
    Tensor<float> img({3, s, s});
    Rng rng(seed);
    for (std::size_t i = 0; i < img.size(); ++i)
        img[i] = static_cast<float>(rng.uniform(0.0, 1.0));
    return img;
}

void zero_params(Network<float>& net) {
    for (auto* p : net.params()) p->value.fill(0.0f);
}

// Brute-force attention average: accumulate raw CLS rows straight from the
// attention probabilities, resize each, normalize once at the end.
Tensor<float> oracle_average(Network<float>& net, const std::vector<Tensor<float>>& images,
                             std::size_t block) {
    const std::size_t grid = net.patch_grid();
    const std::size_t s = images.front().dim(1);
    Tensor<double> acc({s, s});
    for (const auto& image : images) {
        Tensor<float> batch({1, 3, s, s});
        std::copy(image.data(), image.data() + image.size(), batch.data());
        net.forward(batch);
        const Tensor<float>& probs = net.attention_probs(block);
        Tensor<float> cell({1, grid, grid});
        for (std::size_t p = 0; p < grid * grid; ++p) {
            double sum = 0.0;
            for (std::size_t h = 0; h < probs.dim(1); ++h)
                sum += static_cast<double>(probs.at4(0, h, 0, p + 1));
            cell[p] = static_cast<float>(sum / static_cast<double>(probs.dim(1)));
        }
        const Tensor<float> resized = resize_bilinear(cell, s, s);
        for (std::size_t i = 0; i < resized.size(); ++i)
            acc[i] += static_cast<double>(resized[i]);
    }
    Tensor<float> mean({s, s});
    double lo = 1e300, hi = -1e300;
    for (std::size_t i = 0; i < acc.size(); ++i) {
        mean[i] = static_cast<float>(acc[i] / static_cast<double>(images.size()));
        lo = std::min(lo, static_cast<double>(mean[i]));
        hi = std::max(hi, static_cast<double>(mean[i]));
    }
    for (std::size_t i = 0; i < mean.size(); ++i)
        mean[i] = static_cast<float>((static_cast<double>(mean[i]) - lo) / (hi - lo));
    return mean;
}

} // namespace

TEST_CASE("feature map shapes follow the stride arithmetic", "[introspect]") {
    auto net = build_backbone(conv_spec(), 3);
    const auto img = demo_image();
    const auto maps = extract_feature_maps(*net, img, {1, 2, 3, 4});

    const std::size_t sides[] = {32, 16, 8, 4};
    const std::size_t widths[] = {8, 16, 32, 64};
    std::size_t cursor = 0;
    for (std::size_t l = 0; l < 4; ++l) {
        const std::size_t keep = std::min<std::size_t>(8, widths[l]);
        for (std::size_t r = 0; r < keep; ++r, ++cursor) {
            const ActivationMap& m = maps.at(cursor);
            CHECK(m.kind == MapKind::feature);
            CHECK(m.source_index == l + 1);
            CHECK(m.channel < widths[l]);
            REQUIRE(m.map.rank() == 2);
            CHECK(m.map.dim(0) == sides[l]);
            CHECK(m.map.dim(1) == sides[l]);
        }
    }
    CHECK(maps.size() == cursor);
}

TEST_CASE("top-k selection ranks channels by mean absolute activation", "[introspect]") {
    auto net = build_backbone(conv_spec(), 5);
    const auto img = demo_image(9);
    const auto maps = extract_feature_maps(*net, img, {3}, 4);
    REQUIRE(maps.size() == 4);

    // Recompute the ranking straight from the cached activations.
    const Tensor<float>& raw = net->conv_feature_map(3);
    std::vector<std::pair<double, std::size_t>> ranked;
    for (std::size_t c = 0; c < raw.dim(1); ++c) {
        double acc = 0.0;
        for (std::size_t i = 0; i < raw.dim(2); ++i)
            for (std::size_t j = 0; j < raw.dim(3); ++j)
                acc += std::abs(static_cast<double>(raw.at4(0, c, i, j)));
        ranked.emplace_back(acc / static_cast<double>(raw.dim(2) * raw.dim(3)), c);
    }
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t r = 0; r < maps.size(); ++r) {
        CHECK(maps[r].channel == ranked[r].second);
        for (std::size_t i = 0; i < maps[r].map.dim(0); ++i)
            for (std::size_t j = 0; j < maps[r].map.dim(1); ++j)
                REQUIRE(maps[r].map.at2(i, j) == raw.at4(0, maps[r].channel, i, j));
    }

    // Asking for more channels than exist returns them all.
    CHECK(extract_feature_maps(*net, img, {1}, 100).size() == 8);
}

TEST_CASE("zero-weight conv yields all-zero maps", "[introspect]") {
    auto net = build_backbone(conv_spec(), 13);
    zero_params(*net);
    const auto maps = extract_feature_maps(*net, demo_image(), {1, 4});
    REQUIRE(!maps.empty());
    for (const auto& m : maps)
        for (std::size_t i = 0; i < m.map.size(); ++i) REQUIRE(m.map[i] == 0.0f);
}

TEST_CASE("feature extraction rejects bad requests", "[introspect]") {
    auto conv = build_backbone(conv_spec(), 3);
    auto vit = build_backbone(vit_spec(), 3);
    const auto img = demo_image();
    CHECK_THROWS_AS(extract_feature_maps(*conv, img, {0}), ValidationError);
    CHECK_THROWS_AS(extract_feature_maps(*conv, img, {5}), ValidationError);
    CHECK_THROWS_AS(extract_feature_maps(*conv, img, {}), ValidationError);
    CHECK_THROWS_AS(extract_feature_maps(*conv, img, {1}, 0), ValidationError);
    CHECK_THROWS_AS(extract_feature_maps(*vit, img, {1}), ValidationError);
    Tensor<float> flat({3, 64});
    CHECK_THROWS_AS(extract_feature_maps(*conv, flat, {1}), ValidationError);
}

TEST_CASE("attention map shape follows the token arithmetic", "[introspect]") {
    auto net = build_backbone(vit_spec(), 17);
    const auto img = demo_image(4);
    CHECK(net->patch_grid() == 4); // 64 / 16

    for (std::size_t block : {std::size_t(1), std::size_t(2)}) {
        const ActivationMap m = extract_attention_map(*net, img, block);
        CHECK(m.kind == MapKind::attention);
        CHECK(m.source_index == block);
        CHECK(m.normalized);
        REQUIRE(m.map.rank() == 2);
        CHECK(m.map.dim(0) == 64);
        CHECK(m.map.dim(1) == 64);
        float lo = 1.0f, hi = 0.0f;
        for (std::size_t i = 0; i < m.map.size(); ++i) {
            REQUIRE(m.map[i] >= 0.0f);
            REQUIRE(m.map[i] <= 1.0f);
            lo = std::min(lo, m.map[i]);
            hi = std::max(hi, m.map[i]);
        }
        CHECK(lo == 0.0f);
        CHECK(hi == 1.0f);
    }
}

TEST_CASE("attention rows are convex weights", "[introspect]") {
    auto net = build_backbone(vit_spec(), 23);
    extract_attention_map(*net, demo_image(6), 1);
    for (std::size_t block = 1; block <= net->num_attention_blocks(); ++block) {
        const Tensor<float>& probs = net->attention_probs(block);
        for (std::size_t h = 0; h < probs.dim(1); ++h)
            for (std::size_t q = 0; q < probs.dim(2); ++q) {
                double sum = 0.0;
                for (std::size_t k = 0; k < probs.dim(3); ++k) {
                    REQUIRE(probs.at4(0, h, q, k) >= 0.0f);
                    sum += static_cast<double>(probs.at4(0, h, q, k));
                }
                REQUIRE(sum == Catch::Approx(1.0).margin(1e-5));
            }
    }
}

TEST_CASE("uniform attention renders mid-gray", "[introspect]") {
    auto net = build_backbone(vit_spec(), 29);
    zero_params(*net);
    const ActivationMap m = extract_attention_map(*net, demo_image(8), 1);
    for (std::size_t i = 0; i < m.map.size(); ++i) REQUIRE(m.map[i] == 0.5f);
}

TEST_CASE("attention extraction rejects bad requests", "[introspect]") {
    auto conv = build_backbone(conv_spec(), 3);
    auto vit = build_backbone(vit_spec(), 3);
    const auto img = demo_image();
    CHECK_THROWS_WITH(extract_attention_map(*conv, img, 1),
                      Catch::Matchers::ContainsSubstring("unsupported architecture"));
    CHECK_THROWS_AS(extract_attention_map(*vit, img, 0), ValidationError);
    CHECK_THROWS_AS(extract_attention_map(*vit, img, 3), ValidationError);
    CHECK_THROWS_AS(extract_attention_map(*vit, img, 1, std::size_t(4)), ValidationError);
    CHECK_THROWS_AS(average_attention_maps(*vit, {}, 1), ValidationError);
    CHECK_THROWS_AS(average_attention_maps(*vit, {img}, 1, std::nullopt, {"a", "b"}),
                    ValidationError);
}

TEST_CASE("per-head maps differ from the head mean", "[introspect]") {
    auto net = build_backbone(vit_spec(), 31);
    const auto img = demo_image(12);
    const ActivationMap mean_map = extract_attention_map(*net, img, 1);
    bool any_differs = false;
    for (std::size_t h = 0; h < 4; ++h) {
        const ActivationMap head_map = extract_attention_map(*net, img, 1, h);
        for (std::size_t i = 0; i < head_map.map.size() && !any_differs; ++i)
            any_differs = head_map.map[i] != mean_map.map[i];
    }
    CHECK(any_differs);
}

TEST_CASE("bilinear resize preserves mass on delta maps", "[introspect]") {
    // A unit impulse in an interior cell must keep its energy through the
    // upsample, up to the pixel-area scale factor.
    for (std::size_t grid : {std::size_t(4), std::size_t(8)}) {
        for (std::size_t r = 1; r + 1 < grid; ++r)
            for (std::size_t c = 1; c + 1 < grid; ++c) {
                Tensor<float> delta({1, grid, grid});
                delta.at3(0, r, c) = 1.0f;
                const Tensor<float> up = resize_bilinear(delta, 64, 64);
                double mass = 0.0;
                for (std::size_t i = 0; i < up.size(); ++i)
                    mass += static_cast<double>(up[i]);
                const double scale = (64.0 / grid) * (64.0 / grid);
                REQUIRE(mass / scale == Catch::Approx(1.0).margin(0.02));
            }
    }
}

TEST_CASE("sample averaging matches a brute-force accumulation oracle", "[introspect]") {
    auto net = build_backbone(vit_spec(), 37);
    std::vector<Tensor<float>> images;
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < 30; ++i) {
        images.push_back(demo_image(100 + i));
        ids.push_back("img-" + std::to_string(i));
    }
    const ActivationMap avg = average_attention_maps(*net, images, 2, std::nullopt, ids);
    CHECK(avg.sample_ids == ids);

    const Tensor<float> oracle = oracle_average(*net, images, 2);
    REQUIRE(avg.map.size() == oracle.size());
    for (std::size_t i = 0; i < oracle.size(); ++i)
        REQUIRE(avg.map[i] == Catch::Approx(oracle[i]).margin(1e-7));
}

TEST_CASE("averaging is permutation-invariant and one sample is the identity",
          "[introspect]") {
    auto net = build_backbone(vit_spec(), 41);
    std::vector<Tensor<float>> images;
    for (std::size_t i = 0; i < 8; ++i) images.push_back(demo_image(300 + i));

    const ActivationMap fwd = average_attention_maps(*net, images, 1);
    std::vector<Tensor<float>> shuffled(images.rbegin(), images.rend());
    const ActivationMap rev = average_attention_maps(*net, shuffled, 1);
    for (std::size_t i = 0; i < fwd.map.size(); ++i)
        REQUIRE(fwd.map[i] == Catch::Approx(rev.map[i]).margin(1e-6));

    const ActivationMap one = average_attention_maps(*net, {images[0]}, 1);
    const ActivationMap direct = extract_attention_map(*net, images[0], 1);
    for (std::size_t i = 0; i < one.map.size(); ++i)
        REQUIRE(one.map[i] == direct.map[i]);
}

TEST_CASE("artifacts land next to their sidecars", "[introspect]") {
    TempDir tmp;
    auto conv = build_backbone(conv_spec(), 43);
    auto vit = build_backbone(vit_spec(), 43);
    const auto img = demo_image(77);

    const auto maps = extract_feature_maps(*conv, img, {2}, 1, "demo");
    REQUIRE(maps.size() == 1);
    const std::string feat_png = (tmp.path / "feature.png").string();
    emit_activation_artifact(maps[0], feat_png);
    CHECK(std::filesystem::exists(feat_png));
    REQUIRE(std::filesystem::exists(feat_png + ".json"));
    {
        std::ifstream in(feat_png + ".json");
        const auto side = nlohmann::json::parse(in);
        CHECK(side.at("kind") == "feature");
        CHECK(side.at("layer") == 2);
        CHECK(side.at("channel") == maps[0].channel);
        CHECK(side.at("sample_ids") == std::vector<std::string>{"demo"});
        CHECK(side.at("stats").contains("entropy"));
        CHECK(side.at("stats").contains("max"));
    }

    const ActivationMap attn = extract_attention_map(*vit, img, 1, std::nullopt, "demo");
    const std::string heat_png = (tmp.path / "attention-heat.png").string();
    const std::string over_png = (tmp.path / "attention-overlay.png").string();
    const MapStats stats =
        emit_activation_artifact(attn, heat_png, RenderMode::heatmap);
    emit_activation_artifact(attn, over_png, RenderMode::overlay, &img);
    CHECK(std::filesystem::exists(heat_png));
    CHECK(std::filesystem::exists(over_png));
    CHECK(std::filesystem::exists(heat_png + ".json"));
    CHECK(stats.max_value == Catch::Approx(1.0));
    CHECK(std::isfinite(stats.entropy));
    {
        std::ifstream in(heat_png + ".json");
        const auto side = nlohmann::json::parse(in);
        CHECK(side.at("kind") == "attention");
        CHECK(side.at("block") == 1);
        CHECK(!side.contains("channel"));
    }

    // Overlay needs a matching underlay.
    Tensor<float> small({3, 8, 8});
    CHECK_THROWS_AS(
        emit_activation_artifact(attn, (tmp.path / "bad.png").string(),
                                 RenderMode::overlay, &small),
        ValidationError);
    CHECK_THROWS_AS(emit_activation_artifact(attn, (tmp.path / "bad.png").string(),
                                             RenderMode::overlay, nullptr),
                    ValidationError);
}

TEST_CASE("map statistics describe a uniform map", "[introspect]") {
    ActivationMap m;
    m.kind = MapKind::attention;
    m.map = Tensor<float>({4, 4});
    m.map.fill(0.25f);
    const MapStats stats = map_stats(m);
    CHECK(stats.entropy == Catch::Approx(std::log(16.0)).margin(1e-9));
    CHECK(stats.max_value == Catch::Approx(0.25));

    m.map.fill(0.0f);
    m.map.at2(2, 3) = 1.0f;
    const MapStats peak = map_stats(m);
    CHECK(peak.entropy == Catch::Approx(0.0).margin(1e-12));
    CHECK(peak.argmax_row == 2);
    CHECK(peak.argmax_col == 3);
}
