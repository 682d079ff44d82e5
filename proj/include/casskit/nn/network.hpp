#pragma once

#include <cstddef>
#include <memory>
#include <vector>

#include "casskit/errors.hpp"
#include "casskit/nn/param.hpp"
#include "casskit/tensor.hpp"

namespace casskit {

// A branch network maps an image batch (B, 3, S, S) to logits
// (B, logit_width) through a feature stage and a linear head. Training
// needs gradients for every parameter; fine-tuning additionally needs to
// re-enter the backward pass at the feature boundary so a replacement
// head can be trained end to end.
template <typename T>
class Network {
public:
    virtual ~Network() = default;

    virtual Tensor<T> forward(const Tensor<T>& x) = 0;
    virtual Tensor<T> backward(const Tensor<T>& dlogits) = 0;
    // Backprop entering at the (B, feature_dim) boundary, skipping the head.
    virtual Tensor<T> backward_features(const Tensor<T>& dfeatures) = 0;

    virtual ParamRefs<T> params() = 0;
    virtual std::size_t feature_dim() const = 0;
    virtual std::size_t logit_width() const = 0;
    // (B, feature_dim) activations cached by the last forward.
    virtual const Tensor<T>& features() const = 0;

    // Introspection hooks. Conv networks expose per-layer feature maps,
    // attention networks expose per-block attention probabilities.
    virtual std::size_t num_conv_layers() const { return 0; }
    virtual const Tensor<T>& conv_feature_map(std::size_t) const {
        throw ValidationError("network has no conv feature maps");
    }
    virtual std::size_t num_attention_blocks() const { return 0; }
    virtual const Tensor<T>& attention_probs(std::size_t) const {
        throw ValidationError("network has no attention blocks");
    }
    virtual bool has_cls_token() const { return false; }
    virtual std::size_t patch_grid() const { return 0; }

    // Networks build in eval mode; training loops opt in explicitly.
    // Only batch-statistic layers behave differently between the modes.
    void set_training(bool training) { training_ = training; }
    bool is_training() const { return training_; }

private:
    bool training_ = false;
};

template <typename T>
using NetworkPtr = std::unique_ptr<Network<T>>;

// Deep-copy helpers used by weight averaging, teacher networks, and
// best-epoch snapshots. Order follows params(), which is fixed by
// construction order.
template <typename T>
std::vector<Tensor<T>> snapshot_params(const ParamRefs<T>& params) {
    std::vector<Tensor<T>> out;
    out.reserve(params.size());
    for (const auto* p : params) out.push_back(p->value);
    return out;
}

template <typename T>
void restore_params(ParamRefs<T>& params, const std::vector<Tensor<T>>& snapshot) {
    CASSKIT_CHECK(params.size() == snapshot.size(), ValidationError,
                  "parameter snapshot length mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        CASSKIT_CHECK(params[i]->value.same_shape(snapshot[i]), ValidationError,
                      "parameter snapshot shape mismatch at " + params[i]->name);
        params[i]->value = snapshot[i];
    }
}

} // namespace casskit
