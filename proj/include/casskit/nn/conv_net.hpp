#pragma once

#include <array>
#include <cstddef>

#include "casskit/nn/layers.hpp"
#include "casskit/nn/network.hpp"
#include "casskit/rng.hpp"

namespace casskit {

// Four stride-2 conv blocks (3x3, pad 1, batch norm, ReLU), channel
// widths 8/16/32/64, global average pool, linear head. At 64x64 input the
// spatial path is 64 -> 32 -> 16 -> 8 -> 4.
template <typename T>
class TinyConvNet final : public Network<T> {
public:
    static constexpr std::array<std::size_t, 4> kChannels{8, 16, 32, 64};

    TinyConvNet(std::size_t input_size, std::size_t logit_width, std::uint64_t seed)
        : conv1_("features.conv1", 3, kChannels[0], 3, 2, 1),
          conv2_("features.conv2", kChannels[0], kChannels[1], 3, 2, 1),
          conv3_("features.conv3", kChannels[1], kChannels[2], 3, 2, 1),
          conv4_("features.conv4", kChannels[2], kChannels[3], 3, 2, 1),
          bn1_("features.bn1", kChannels[0]),
          bn2_("features.bn2", kChannels[1]),
          bn3_("features.bn3", kChannels[2]),
          bn4_("features.bn4", kChannels[3]),
          head_("head", kChannels[3], logit_width),
          input_size_(input_size), logit_width_(logit_width) {
        Rng rng(derive_seed(seed, "tiny-conv4-init"));
        conv1_.init_he(rng);
        conv2_.init_he(rng);
        conv3_.init_he(rng);
        conv4_.init_he(rng);
        head_.init_he(rng);
    }

    Tensor<T> forward(const Tensor<T>& x) override {
        CASSKIT_CHECK(x.rank() == 4 && x.dim(1) == 3 && x.dim(2) == input_size_ &&
                          x.dim(3) == input_size_,
                      ValidationError, "tiny-conv4: bad input " + x.shape_str());
        const bool train = this->is_training();
        maps_[0] = conv1_.forward(x);
        Tensor<T> h = relu1_.forward(bn1_.forward(maps_[0], train));
        maps_[1] = conv2_.forward(h);
        h = relu2_.forward(bn2_.forward(maps_[1], train));
        maps_[2] = conv3_.forward(h);
        h = relu3_.forward(bn3_.forward(maps_[2], train));
        maps_[3] = conv4_.forward(h);
        h = relu4_.forward(bn4_.forward(maps_[3], train));
        features_ = pool_.forward(h);
        return head_.forward(features_);
    }

    Tensor<T> backward(const Tensor<T>& dlogits) override {
        return backward_features(head_.backward(dlogits));
    }

    Tensor<T> backward_features(const Tensor<T>& dfeatures) override {
        Tensor<T> g = pool_.backward(dfeatures);
        g = conv4_.backward(bn4_.backward(relu4_.backward(g)));
        g = conv3_.backward(bn3_.backward(relu3_.backward(g)));
        g = conv2_.backward(bn2_.backward(relu2_.backward(g)));
        return conv1_.backward(bn1_.backward(relu1_.backward(g)));
    }

    ParamRefs<T> params() override {
        ParamRefs<T> out;
        conv1_.collect(out);
        bn1_.collect(out);
        conv2_.collect(out);
        bn2_.collect(out);
        conv3_.collect(out);
        bn3_.collect(out);
        conv4_.collect(out);
        bn4_.collect(out);
        head_.collect(out);
        return out;
    }

    std::size_t feature_dim() const override { return kChannels[3]; }
    std::size_t logit_width() const override { return logit_width_; }
    const Tensor<T>& features() const override { return features_; }

    std::size_t num_conv_layers() const override { return 4; }
    const Tensor<T>& conv_feature_map(std::size_t layer_1based) const override {
        CASSKIT_CHECK(layer_1based >= 1 && layer_1based <= 4, ValidationError,
                      "conv layer index out of range: " + std::to_string(layer_1based));
        return maps_[layer_1based - 1];
    }

private:
    Conv2d<T> conv1_, conv2_, conv3_, conv4_;
    BatchNorm2d<T> bn1_, bn2_, bn3_, bn4_;
    ReLU<T> relu1_, relu2_, relu3_, relu4_;
    GlobalAvgPool<T> pool_;
    Linear<T> head_;
    std::size_t input_size_, logit_width_;
    std::array<Tensor<T>, 4> maps_; // raw conv outputs, pre-activation
    Tensor<T> features_;
};

} // namespace casskit
