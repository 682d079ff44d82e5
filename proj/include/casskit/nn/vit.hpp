#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "casskit/nn/layers.hpp"
#include "casskit/nn/network.hpp"
#include "casskit/rng.hpp"

namespace casskit {

// Pre-norm transformer block: x + attn(ln1(x)), then x + mlp(ln2(x)).
template <typename T>
class TransformerBlock {
public:
    TransformerBlock(std::string name, std::size_t dim, std::size_t heads,
                     std::size_t mlp_ratio)
        : ln1_(name + ".ln1", dim),
          attn_(name + ".attn", dim, heads),
          ln2_(name + ".ln2", dim),
          fc1_(name + ".mlp.fc1", dim, dim * mlp_ratio),
          fc2_(name + ".mlp.fc2", dim * mlp_ratio, dim) {}

    void init_normal(Rng& rng, double stddev) {
        attn_.init_normal(rng, stddev);
        fc1_.init_normal(rng, stddev);
        fc2_.init_normal(rng, stddev);
    }

    // x: (B, S, D)
    Tensor<T> forward(const Tensor<T>& x) {
        b_ = x.dim(0);
        s_ = x.dim(1);
        d_ = x.dim(2);
        Tensor<T> a = attn_.forward(ln1_.forward(x));
        Tensor<T> mid(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) mid[i] = x[i] + a[i];

        Tensor<T> n2 = ln2_.forward(mid);
        n2.reshape({b_ * s_, d_});
        Tensor<T> m = fc2_.forward(gelu_.forward(fc1_.forward(n2)));
        Tensor<T> y(mid.shape());
        for (std::size_t i = 0; i < mid.size(); ++i) y[i] = mid[i] + m[i];
        return y;
    }

    Tensor<T> backward(const Tensor<T>& dy) {
        Tensor<T> dflat = dy;
        dflat.reshape({b_ * s_, d_});
        Tensor<T> dm = fc1_.backward(gelu_.backward(fc2_.backward(dflat)));
        dm.reshape({b_, s_, d_});
        Tensor<T> dn2 = ln2_.backward(dm);
        Tensor<T> dmid(dy.shape());
        for (std::size_t i = 0; i < dy.size(); ++i) dmid[i] = dy[i] + dn2[i];

        Tensor<T> da = attn_.backward(dmid);
        Tensor<T> dx = ln1_.backward(da);
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dmid[i];
        return dx;
    }

    const Tensor<T>& attention_probs() const { return attn_.attention_probs(); }

    void collect(ParamRefs<T>& out) {
        ln1_.collect(out);
        attn_.collect(out);
        ln2_.collect(out);
        fc1_.collect(out);
        fc2_.collect(out);
    }

private:
    LayerNorm<T> ln1_;
    MultiHeadSelfAttention<T> attn_;
    LayerNorm<T> ln2_;
    Linear<T> fc1_, fc2_;
    Gelu<T> gelu_;
    std::size_t b_ = 0, s_ = 0, d_ = 0;
};

// Patch-embed conv, learned CLS token and position embedding (both
// starting from zero), two pre-norm transformer blocks (width 64, 4 heads,
// MLP ratio 4), final layer norm, linear head on the CLS token.
template <typename T>
class TinyViT final : public Network<T> {
public:
    static constexpr std::size_t kDim = 64;
    static constexpr std::size_t kHeads = 4;
    static constexpr std::size_t kMlpRatio = 4;
    static constexpr std::size_t kBlocks = 2;

    TinyViT(std::size_t input_size, std::size_t patch_size, std::size_t logit_width,
            std::uint64_t seed)
        : patch_("features.patch", 3, kDim, patch_size, patch_size, 0),
          cls_("features.cls", {kDim}),
          pos_("features.pos", {input_size / patch_size * (input_size / patch_size) + 1, kDim}),
          block1_("features.block1", kDim, kHeads, kMlpRatio),
          block2_("features.block2", kDim, kHeads, kMlpRatio),
          norm_("features.norm", kDim),
          head_("head", kDim, logit_width),
          input_size_(input_size), patch_size_(patch_size),
          grid_(input_size / patch_size), logit_width_(logit_width) {
        CASSKIT_CHECK(patch_size_ > 0 && input_size_ % patch_size_ == 0, SpecError,
                      "patch size must divide input size");
        Rng rng(derive_seed(seed, "tiny-vit2-init"));
        // Fan-in patch embedding plus zero CLS and position embeddings: the
        // readout token starts as a pure attention average of patch content,
        // so early logits are input-driven rather than dominated by static
        // embeddings. Positions are learned from zero.
        patch_.init_he(rng);
        cls_.value.zero();
        pos_.value.zero();
        block1_.init_normal(rng, 0.02);
        block2_.init_normal(rng, 0.02);
        head_.init_normal(rng, 0.02);
    }

    Tensor<T> forward(const Tensor<T>& x) override {
        CASSKIT_CHECK(x.rank() == 4 && x.dim(1) == 3 && x.dim(2) == input_size_ &&
                          x.dim(3) == input_size_,
                      ValidationError, "tiny-vit2: bad input " + x.shape_str());
        const std::size_t b = x.dim(0);
        b_ = b;
        const std::size_t n_tok = grid_ * grid_ + 1;

        Tensor<T> pe = patch_.forward(x); // (B, D, g, g)
        Tensor<T> tokens({b, n_tok, kDim});
        for (std::size_t bi = 0; bi < b; ++bi) {
            for (std::size_t d = 0; d < kDim; ++d) {
                tokens.at3(bi, 0, d) = cls_.value[d] + pos_.value.at2(0, d);
                for (std::size_t gi = 0; gi < grid_; ++gi)
                    for (std::size_t gj = 0; gj < grid_; ++gj) {
                        const std::size_t t = 1 + gi * grid_ + gj;
                        tokens.at3(bi, t, d) =
                            pe.at4(bi, d, gi, gj) + pos_.value.at2(t, d);
                    }
            }
        }

        Tensor<T> h = block2_.forward(block1_.forward(tokens));
        Tensor<T> n = norm_.forward(h); // (B, n_tok, D)

        features_ = Tensor<T>({b, kDim});
        for (std::size_t bi = 0; bi < b; ++bi)
            for (std::size_t d = 0; d < kDim; ++d)
                features_.at2(bi, d) = n.at3(bi, 0, d);
        return head_.forward(features_);
    }

    Tensor<T> backward(const Tensor<T>& dlogits) override {
        return backward_features(head_.backward(dlogits));
    }

    Tensor<T> backward_features(const Tensor<T>& dfeatures) override {
        const std::size_t b = b_;
        const std::size_t n_tok = grid_ * grid_ + 1;
        // only the CLS row of the final norm output feeds the head
        Tensor<T> dn({b, n_tok, kDim});
        for (std::size_t bi = 0; bi < b; ++bi)
            for (std::size_t d = 0; d < kDim; ++d)
                dn.at3(bi, 0, d) = dfeatures.at2(bi, d);

        Tensor<T> dtok = block1_.backward(block2_.backward(norm_.backward(dn)));

        Tensor<T> dpe({b, kDim, grid_, grid_});
        for (std::size_t bi = 0; bi < b; ++bi)
            for (std::size_t d = 0; d < kDim; ++d) {
                cls_.grad[d] += dtok.at3(bi, 0, d);
                pos_.grad.at2(0, d) += dtok.at3(bi, 0, d);
                for (std::size_t gi = 0; gi < grid_; ++gi)
                    for (std::size_t gj = 0; gj < grid_; ++gj) {
                        const std::size_t t = 1 + gi * grid_ + gj;
                        pos_.grad.at2(t, d) += dtok.at3(bi, t, d);
                        dpe.at4(bi, d, gi, gj) = dtok.at3(bi, t, d);
                    }
            }
        return patch_.backward(dpe);
    }

    ParamRefs<T> params() override {
        ParamRefs<T> out;
        patch_.collect(out);
        out.push_back(&cls_);
        out.push_back(&pos_);
        block1_.collect(out);
        block2_.collect(out);
        norm_.collect(out);
        head_.collect(out);
        return out;
    }

    std::size_t feature_dim() const override { return kDim; }
    std::size_t logit_width() const override { return logit_width_; }
    const Tensor<T>& features() const override { return features_; }

    std::size_t num_attention_blocks() const override { return kBlocks; }
    const Tensor<T>& attention_probs(std::size_t block_1based) const override {
        CASSKIT_CHECK(block_1based >= 1 && block_1based <= kBlocks, ValidationError,
                      "attention block index out of range: " + std::to_string(block_1based));
        return block_1based == 1 ? block1_.attention_probs() : block2_.attention_probs();
    }
    bool has_cls_token() const override { return true; }
    std::size_t patch_grid() const override { return grid_; }

private:
    Conv2d<T> patch_;
    Parameter<T> cls_, pos_;
    TransformerBlock<T> block1_, block2_;
    LayerNorm<T> norm_;
    Linear<T> head_;
    std::size_t input_size_, patch_size_, grid_, logit_width_;
    std::size_t b_ = 0;
    Tensor<T> features_;
};

} // namespace casskit
