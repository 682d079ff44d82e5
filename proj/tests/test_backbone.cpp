#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>

#include "casskit/backbone.hpp"
#include "casskit/checkpoint.hpp"
#include "casskit/nn/conv_net.hpp"
#include "casskit/nn/vit.hpp"

using namespace casskit;

namespace {

BackboneSpec conv_spec(std::size_t width = 32) {
    BackboneSpec s;
    s.family = BackboneFamily::conv;
    s.variant = "tiny-conv4";
    s.input_size = 64;
    s.logit_width = width;
    return s;
}

BackboneSpec vit_spec(std::size_t width = 32) {
    BackboneSpec s;
    s.family = BackboneFamily::attention;
    s.variant = "tiny-vit2";
    s.input_size = 64;
    s.patch_size = 16;
    s.logit_width = width;
    return s;
}

std::map<std::string, const Tensor<double>*> params_by_name(ParamRefs<double>& refs) {
    std::map<std::string, const Tensor<double>*> out;
    for (const auto* p : refs) out[p->name] = &p->value;
    return out;
}

// Independent re-execution of the tiny-conv4 arithmetic from the raw
// parameter tensors: stride-2 pad-1 3x3 convs, per-channel batch norm
// (batch statistics when training, running estimates otherwise), ReLU,
// global average pool, affine head. Written without reference to the
// layer classes so it can disagree with them.
TensorD oracle_conv4_forward(std::map<std::string, const Tensor<double>*>& p,
                             const TensorD& x, std::size_t logit_width,
                             bool training = false) {
    TensorD cur = x;
    const char* names[4] = {"features.conv1", "features.conv2", "features.conv3",
                            "features.conv4"};
    const char* bns[4] = {"features.bn1", "features.bn2", "features.bn3", "features.bn4"};
    for (int layer = 0; layer < 4; ++layer) {
        const TensorD& w = *p.at(std::string(names[layer]) + ".weight");
        const TensorD& bias = *p.at(std::string(names[layer]) + ".bias");
        const std::size_t oc = w.dim(0), ic = w.dim(1);
        const std::size_t h = cur.dim(2), ww = cur.dim(3);
        const std::size_t oh = (h + 2 - 3) / 2 + 1, ow = (ww + 2 - 3) / 2 + 1;
        TensorD next({cur.dim(0), oc, oh, ow});
        for (std::size_t b = 0; b < cur.dim(0); ++b)
            for (std::size_t o = 0; o < oc; ++o)
                for (std::size_t i = 0; i < oh; ++i)
                    for (std::size_t j = 0; j < ow; ++j) {
                        double acc = bias[o];
                        for (std::size_t c = 0; c < ic; ++c)
                            for (int ki = 0; ki < 3; ++ki)
                                for (int kj = 0; kj < 3; ++kj) {
                                    const int ih = static_cast<int>(2 * i) + ki - 1;
                                    const int iw = static_cast<int>(2 * j) + kj - 1;
                                    if (ih < 0 || iw < 0 || ih >= static_cast<int>(h) ||
                                        iw >= static_cast<int>(ww))
                                        continue;
                                    acc += cur.at4(b, c, ih, iw) * w.at4(o, c, ki, kj);
                                }
                        next.at4(b, o, i, j) = acc;
                    }
        const TensorD& gm = *p.at(std::string(bns[layer]) + ".gamma");
        const TensorD& bt = *p.at(std::string(bns[layer]) + ".beta");
        const TensorD& rm = *p.at(std::string(bns[layer]) + ".running_mean");
        const TensorD& rv = *p.at(std::string(bns[layer]) + ".running_var");
        const std::size_t nb = next.dim(0), spatial = oh * ow;
        for (std::size_t o = 0; o < oc; ++o) {
            double mean = rm[o], var = rv[o];
            if (training) {
                mean = 0.0;
                for (std::size_t b = 0; b < nb; ++b)
                    for (std::size_t k = 0; k < spatial; ++k)
                        mean += next.data()[(b * oc + o) * spatial + k];
                mean /= static_cast<double>(nb * spatial);
                var = 0.0;
                for (std::size_t b = 0; b < nb; ++b)
                    for (std::size_t k = 0; k < spatial; ++k) {
                        const double d = next.data()[(b * oc + o) * spatial + k] - mean;
                        var += d * d;
                    }
                var /= static_cast<double>(nb * spatial);
            }
            const double inv = 1.0 / std::sqrt(var + 1e-5);
            for (std::size_t b = 0; b < nb; ++b)
                for (std::size_t k = 0; k < spatial; ++k) {
                    double& v = next.data()[(b * oc + o) * spatial + k];
                    v = (v - mean) * inv * gm[o] + bt[o];
                }
        }
        for (std::size_t i = 0; i < next.size(); ++i) // ReLU after every block
            next[i] = std::max(0.0, next[i]);
        cur = next;
    }
    // global average pool
    const std::size_t b = cur.dim(0), c = cur.dim(1), hw = cur.dim(2) * cur.dim(3);
    TensorD feat({b, c});
    for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t ci = 0; ci < c; ++ci) {
            double acc = 0.0;
            for (std::size_t k = 0; k < hw; ++k)
                acc += cur.data()[(bi * c + ci) * hw + k];
            feat.at2(bi, ci) = acc / static_cast<double>(hw);
        }
    const TensorD& hw_w = *p.at("head.weight");
    const TensorD& hw_b = *p.at("head.bias");
    TensorD logits({b, logit_width});
    for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t o = 0; o < logit_width; ++o) {
            double acc = hw_b[o];
            for (std::size_t k = 0; k < c; ++k)
                acc += feat.at2(bi, k) * hw_w.at2(o, k);
            logits.at2(bi, o) = acc;
        }
    return logits;
}

std::string temp_path(const std::string& stem) {
    return (std::filesystem::temp_directory_path() / stem).string();
}

} // namespace

TEST_CASE("backbones honor the (B, logit_width) shape contract") {
    for (std::size_t b : {std::size_t{1}, std::size_t{2}, std::size_t{16}}) {
        auto net_c = build_backbone(conv_spec(), 1);
        auto net_v = build_backbone(vit_spec(), 2);
        TensorF x({b, 3, 64, 64});
        Rng rng(derive_seed(9, "x", b));
        x.fill_uniform(rng, -1.0, 1.0);
        TensorF yc = net_c->forward(x);
        TensorF yv = net_v->forward(x);
        REQUIRE(yc.dim(0) == b);
        REQUIRE(yc.dim(1) == 32);
        REQUIRE(yv.dim(0) == b);
        REQUIRE(yv.dim(1) == 32);
        REQUIRE(yc.all_finite());
        REQUIRE(yv.all_finite());
    }
}

TEST_CASE("identical spec and seed build identical parameters") {
    for (const BackboneSpec& spec : {conv_spec(), vit_spec()}) {
        auto n1 = build_backbone(spec, 77);
        auto n2 = build_backbone(spec, 77);
        ParamRefs<float> p1 = n1->params(), p2 = n2->params();
        REQUIRE(p1.size() == p2.size());
        for (std::size_t i = 0; i < p1.size(); ++i) {
            REQUIRE(p1[i]->name == p2[i]->name);
            REQUIRE(p1[i]->value.same_shape(p2[i]->value));
            for (std::size_t k = 0; k < p1[i]->value.size(); ++k)
                REQUIRE(p1[i]->value[k] == p2[i]->value[k]);
        }
        // a different seed must not reproduce them
        auto n3 = build_backbone(spec, 78);
        ParamRefs<float> p3 = n3->params();
        bool any_diff = false;
        for (std::size_t i = 0; i < p1.size() && !any_diff; ++i)
            for (std::size_t k = 0; k < p1[i]->value.size(); ++k)
                if (p1[i]->value[k] != p3[i]->value[k]) {
                    any_diff = true;
                    break;
                }
        REQUIRE(any_diff);
    }
}

TEST_CASE("tiny-conv4 forward matches an independent reimplementation") {
    TinyConvNet<double> net(64, 32, 123);
    ParamRefs<double> refs = net.params();
    auto by_name = params_by_name(refs);

    SECTION("zero image") {
        TensorD x({2, 3, 64, 64});
        TensorD got = net.forward(x);
        TensorD want = oracle_conv4_forward(by_name, x, 32);
        for (std::size_t i = 0; i < got.size(); ++i)
            REQUIRE(got[i] == Catch::Approx(want[i]).margin(1e-12));
    }
    SECTION("random image") {
        TensorD x({2, 3, 64, 64});
        Rng rng(5);
        x.fill_uniform(rng, -1.0, 1.0);
        TensorD got = net.forward(x);
        TensorD want = oracle_conv4_forward(by_name, x, 32);
        for (std::size_t i = 0; i < got.size(); ++i) {
            const double scale = std::max(1.0, std::abs(want[i]));
            REQUIRE(std::abs(got[i] - want[i]) / scale < 1e-12);
        }
    }
    SECTION("random image, batch statistics") {
        TensorD x({2, 3, 64, 64});
        Rng rng(6);
        x.fill_uniform(rng, -1.0, 1.0);
        net.set_training(true);
        TensorD got = net.forward(x);
        TensorD want = oracle_conv4_forward(by_name, x, 32, /*training=*/true);
        for (std::size_t i = 0; i < got.size(); ++i) {
            const double scale = std::max(1.0, std::abs(want[i]));
            REQUIRE(std::abs(got[i] - want[i]) / scale < 1e-12);
        }
    }
}

TEST_CASE("whole-network gradients agree with finite differences") {
    // Tiny spatial extent keeps the finite-difference sweep fast.
    SECTION("conv net") {
        TinyConvNet<double> net(16, 4, 9);
        // Train mode: the loss then flows through the batch statistics, which
        // is the branch with the nontrivial backward. The running estimates do
        // not touch the output here, so their zero gradients are exact too.
        net.set_training(true);
        TensorD x({2, 3, 16, 16});
        Rng rng(31);
        x.fill_uniform(rng, -1.0, 1.0);
        TensorD w({2, 4});
        w.fill_uniform(rng, -1.0, 1.0);

        auto eval = [&]() {
            TensorD y = net.forward(x);
            double acc = 0.0;
            for (std::size_t i = 0; i < y.size(); ++i) acc += y[i] * w[i];
            return acc;
        };
        ParamRefs<double> params = net.params();
        eval();
        zero_grads(params);
        net.forward(x);
        net.backward(w);

        Rng pick(77);
        std::size_t checked = 0;
        for (auto* p : params) {
            for (int rep = 0; rep < 12; ++rep) {
                const std::size_t i =
                    static_cast<std::size_t>(pick.uniform_int(0, static_cast<std::int64_t>(p->value.size()) - 1));
                double& slot = p->value[i];
                const double keep = slot;
                const double h = 1e-6;
                slot = keep + h;
                const double up = eval();
                slot = keep - h;
                const double dn = eval();
                slot = keep;
                const double fd = (up - dn) / (2.0 * h);
                const double scale = std::max({1.0, std::abs(fd), std::abs(p->grad[i])});
                REQUIRE(std::abs(p->grad[i] - fd) / scale < 1e-5);
                ++checked;
            }
        }
        REQUIRE(checked >= 100);
    }
    SECTION("vit") {
        TinyViT<double> net(16, 8, 4, 10);
        TensorD x({2, 3, 16, 16});
        Rng rng(32);
        x.fill_uniform(rng, -1.0, 1.0);
        TensorD w({2, 4});
        w.fill_uniform(rng, -1.0, 1.0);

        auto eval = [&]() {
            TensorD y = net.forward(x);
            double acc = 0.0;
            for (std::size_t i = 0; i < y.size(); ++i) acc += y[i] * w[i];
            return acc;
        };
        ParamRefs<double> params = net.params();
        eval();
        zero_grads(params);
        net.forward(x);
        net.backward(w);

        Rng pick(78);
        for (auto* p : params) {
            for (int rep = 0; rep < 6; ++rep) {
                const std::size_t i =
                    static_cast<std::size_t>(pick.uniform_int(0, static_cast<std::int64_t>(p->value.size()) - 1));
                double& slot = p->value[i];
                const double keep = slot;
                const double h = 1e-5;
                slot = keep + h;
                const double up = eval();
                slot = keep - h;
                const double dn = eval();
                slot = keep;
                const double fd = (up - dn) / (2.0 * h);
                const double scale = std::max({1.0, std::abs(fd), std::abs(p->grad[i])});
                REQUIRE(std::abs(p->grad[i] - fd) / scale < 1e-4);
            }
        }
    }
}

TEST_CASE("pairing accepts any family combination with matching widths") {
    DualBackbone cross = pair_backbones(conv_spec(), vit_spec(), 3);
    REQUIRE(params_disjoint(*cross.branch_a, *cross.branch_b));

    DualBackbone conv_conv = pair_backbones(conv_spec(), conv_spec(), 3);
    REQUIRE(params_disjoint(*conv_conv.branch_a, *conv_conv.branch_b));
    // same spec, same run seed, but branch-distinct derived seeds
    ParamRefs<float> pa = conv_conv.branch_a->params();
    ParamRefs<float> pb = conv_conv.branch_b->params();
    bool any_diff = false;
    for (std::size_t i = 0; i < pa.size() && !any_diff; ++i)
        for (std::size_t k = 0; k < pa[i]->value.size(); ++k)
            if (pa[i]->value[k] != pb[i]->value[k]) {
                any_diff = true;
                break;
            }
    REQUIRE(any_diff);

    DualBackbone vit_vit = pair_backbones(vit_spec(), vit_spec(), 3);
    REQUIRE(params_disjoint(*vit_vit.branch_a, *vit_vit.branch_b));
}

TEST_CASE("pairing and building reject invalid specs") {
    REQUIRE_THROWS_AS(pair_backbones(conv_spec(32), vit_spec(64), 3), PairingError);

    BackboneSpec unknown = conv_spec();
    unknown.variant = "resnet-900";
    REQUIRE_THROWS_AS(build_backbone(unknown, 1), RegistryError);

    BackboneSpec bad_patch = vit_spec();
    bad_patch.patch_size = 13;
    REQUIRE_THROWS_AS(build_backbone(bad_patch, 1), SpecError);

    BackboneSpec bad_width = conv_spec();
    bad_width.logit_width = 1;
    REQUIRE_THROWS_AS(build_backbone(bad_width, 1), SpecError);
}

TEST_CASE("external variants can be registered and built") {
    register_backbone("conv-echo", [](const BackboneSpec& spec, std::uint64_t seed) {
        return std::make_unique<TinyConvNet<float>>(spec.input_size, spec.logit_width,
                                                    seed);
    });
    BackboneSpec s = conv_spec();
    s.variant = "conv-echo";
    auto net = build_backbone(s, 4);
    TensorF x({1, 3, 64, 64});
    REQUIRE(net->forward(x).dim(1) == 32);
}

TEST_CASE("checkpoint round-trip restores parameters and state exactly") {
    DualBackbone pair = pair_backbones(conv_spec(), vit_spec(), 11);
    TrainState state;
    state.step = 137;
    state.schedule.schedule.t_max = 16;
    state.schedule.step = 7;
    state.config_digest = "deadbeef01020304";

    // two averaging snapshots so the accumulator section is exercised
    ParamRefs<float> pa = pair.branch_a->params();
    ParamRefs<float> pb = pair.branch_b->params();
    state.swa_a.start_epoch = 12;
    state.swa_b.start_epoch = 12;
    swa_update(state.swa_a, pa);
    swa_update(state.swa_a, pa);
    swa_update(state.swa_b, pb);

    TensorF x({2, 3, 64, 64});
    Rng rng(6);
    x.fill_uniform(rng, -1.0, 1.0);
    TensorF before_a = pair.branch_a->forward(x);
    TensorF before_b = pair.branch_b->forward(x);

    const std::string path = temp_path("casskit_ckpt_roundtrip.bin");
    save_checkpoint(pair, state, path);
    LoadedCheckpoint loaded = load_checkpoint(path, "deadbeef01020304");

    REQUIRE(loaded.state.step == 137);
    REQUIRE(loaded.state.schedule.step == 7);
    REQUIRE(loaded.state.config_digest == "deadbeef01020304");
    REQUIRE(loaded.state.swa_a.count == 2);
    REQUIRE(loaded.state.swa_b.count == 1);
    REQUIRE(loaded.state.swa_a.start_epoch == 12);

    ParamRefs<float> la = loaded.pair.branch_a->params();
    for (std::size_t i = 0; i < pa.size(); ++i)
        for (std::size_t k = 0; k < pa[i]->value.size(); ++k)
            REQUIRE(la[i]->value[k] == pa[i]->value[k]);

    // accumulators restored bit for bit
    for (std::size_t i = 0; i < state.swa_a.sums.size(); ++i)
        for (std::size_t k = 0; k < state.swa_a.sums[i].size(); ++k)
            REQUIRE(loaded.state.swa_a.sums[i][k] == state.swa_a.sums[i][k]);

    TensorF after_a = loaded.pair.branch_a->forward(x);
    TensorF after_b = loaded.pair.branch_b->forward(x);
    for (std::size_t i = 0; i < before_a.size(); ++i)
        REQUIRE(after_a[i] == before_a[i]);
    for (std::size_t i = 0; i < before_b.size(); ++i)
        REQUIRE(after_b[i] == before_b[i]);

    // materialized averages present for both branches
    auto avg_a = load_swa_weights(path, "a");
    REQUIRE(avg_a.size() == pa.size());
    // count==2 with identical snapshots: average equals the weights
    for (const auto* p : pa) {
        const auto& avg = avg_a.at(p->name);
        for (std::size_t k = 0; k < avg.size(); ++k)
            REQUIRE(avg[k] == Catch::Approx(p->value[k]).margin(1e-7));
    }
    std::remove(path.c_str());
}

TEST_CASE("checkpoint loader rejects corrupt files with named fields") {
    DualBackbone pair = pair_backbones(conv_spec(), conv_spec(), 21);
    TrainState state;
    state.config_digest = "0123456789abcdef";
    const std::string path = temp_path("casskit_ckpt_corrupt.bin");
    save_checkpoint(pair, state, path);

    SECTION("bad magic") {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(0);
        f.write("XXXXXX", 6);
        f.close();
        REQUIRE_THROWS_WITH(load_checkpoint(path),
                            Catch::Matchers::ContainsSubstring("magic"));
    }
    SECTION("truncated blob") {
        std::error_code ec;
        const auto full = std::filesystem::file_size(path, ec);
        std::filesystem::resize_file(path, full - 64, ec);
        REQUIRE_THROWS_AS(load_checkpoint(path), CheckpointError);
    }
    SECTION("digest mismatch is explicit") {
        REQUIRE_THROWS_WITH(load_checkpoint(path, "ffffffffffffffff"),
                            Catch::Matchers::ContainsSubstring("config_digest"));
    }
    SECTION("missing file") {
        REQUIRE_THROWS_AS(load_checkpoint(temp_path("casskit_no_such.bin")),
                          CheckpointError);
    }
    std::remove(path.c_str());
}

TEST_CASE("pretrained init pulls weights from a saved file") {
    DualBackbone pair = pair_backbones(conv_spec(), vit_spec(), 31);
    TrainState state;
    state.config_digest = "1111111111111111";
    const std::string path = temp_path("casskit_ckpt_pretrained.bin");
    save_checkpoint(pair, state, path);

    SECTION("same width restores everything including the head") {
        BackboneSpec s = conv_spec();
        s.init_mode = InitMode::pretrained;
        s.pretrained_path = path;
        s.pretrained_branch = "a";
        auto net = build_backbone(s, 999); // seed must not matter for loaded weights
        ParamRefs<float> got = net->params();
        ParamRefs<float> want = pair.branch_a->params();
        for (std::size_t i = 0; i < got.size(); ++i)
            for (std::size_t k = 0; k < got[i]->value.size(); ++k)
                REQUIRE(got[i]->value[k] == want[i]->value[k]);
    }
    SECTION("width mismatch keeps a fresh head but restores the trunk") {
        BackboneSpec s = conv_spec(16);
        s.init_mode = InitMode::pretrained;
        s.pretrained_path = path;
        s.pretrained_branch = "a";
        auto net = build_backbone(s, 999);
        ParamRefs<float> got = net->params();
        ParamRefs<float> want = pair.branch_a->params();
        for (std::size_t i = 0; i < got.size(); ++i) {
            if (got[i]->name.rfind("head.", 0) == 0) {
                REQUIRE(got[i]->value.dim(0) == 16);
            } else {
                for (std::size_t k = 0; k < got[i]->value.size(); ++k)
                    REQUIRE(got[i]->value[k] == want[i]->value[k]);
            }
        }
    }
    SECTION("attention branch loads too") {
        BackboneSpec s = vit_spec();
        s.init_mode = InitMode::pretrained;
        s.pretrained_path = path;
        s.pretrained_branch = "b";
        auto net = build_backbone(s, 999);
        ParamRefs<float> got = net->params();
        ParamRefs<float> want = pair.branch_b->params();
        for (std::size_t i = 0; i < got.size(); ++i)
            for (std::size_t k = 0; k < got[i]->value.size(); ++k)
                REQUIRE(got[i]->value[k] == want[i]->value[k]);
    }
    SECTION("missing weight file errors") {
        BackboneSpec s = conv_spec();
        s.init_mode = InitMode::pretrained;
        s.pretrained_path = temp_path("casskit_absent.bin");
        REQUIRE_THROWS_AS(build_backbone(s, 1), CheckpointError);
    }
    std::remove(path.c_str());
}

TEST_CASE("introspection hooks expose maps with the documented shapes") {
    auto net_c = build_backbone(conv_spec(), 1);
    TensorF x({2, 3, 64, 64});
    Rng rng(8);
    x.fill_uniform(rng, -1.0, 1.0);
    net_c->forward(x);
    REQUIRE(net_c->num_conv_layers() == 4);
    const TensorF& m1 = net_c->conv_feature_map(1);
    REQUIRE(m1.dim(2) == 32); // stride-2 halving of 64
    REQUIRE(m1.dim(3) == 32);
    REQUIRE(net_c->conv_feature_map(4).dim(2) == 4);
    REQUIRE_THROWS_AS(net_c->conv_feature_map(5), ValidationError);
    REQUIRE_THROWS_AS(net_c->attention_probs(1), ValidationError);

    auto net_v = build_backbone(vit_spec(), 2);
    net_v->forward(x);
    REQUIRE(net_v->num_attention_blocks() == 2);
    REQUIRE(net_v->has_cls_token());
    REQUIRE(net_v->patch_grid() == 4);
    const TensorF& probs = net_v->attention_probs(1);
    REQUIRE(probs.dim(0) == 2);
    REQUIRE(probs.dim(1) == 4);
    REQUIRE(probs.dim(2) == 17); // 16 patches + CLS
    REQUIRE(probs.dim(3) == 17);
    REQUIRE_THROWS_AS(net_v->attention_probs(3), ValidationError);
    REQUIRE_THROWS_AS(net_v->conv_feature_map(1), ValidationError);
}
