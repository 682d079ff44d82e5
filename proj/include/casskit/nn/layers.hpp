#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "casskit/errors.hpp"
#include "casskit/nn/param.hpp"
#include "casskit/rng.hpp"
#include "casskit/tensor.hpp"

namespace casskit {

// Layers cache whatever the backward pass needs during forward. backward()
// consumes the output gradient, accumulates parameter gradients, and
// returns the input gradient. One forward per backward.

template <typename T>
class Conv2d {
public:
    Conv2d(std::string name, std::size_t in_ch, std::size_t out_ch, std::size_t kernel,
           std::size_t stride, std::size_t pad)
        : weight_(name + ".weight", {out_ch, in_ch, kernel, kernel}),
          bias_(name + ".bias", {out_ch}),
          in_ch_(in_ch), out_ch_(out_ch), kernel_(kernel), stride_(stride), pad_(pad) {}

    void init_he(Rng& rng) {
        const double fan_in = static_cast<double>(in_ch_ * kernel_ * kernel_);
        weight_.value.fill_normal(rng, 0.0, std::sqrt(2.0 / fan_in));
        bias_.value.zero();
    }

    void init_normal(Rng& rng, double stddev) {
        weight_.value.fill_normal(rng, 0.0, stddev);
        bias_.value.zero();
    }

    Tensor<T> forward(const Tensor<T>& x) {
        CASSKIT_CHECK(x.rank() == 4 && x.dim(1) == in_ch_, ValidationError,
                      "Conv2d " + weight_.name + ": bad input " + x.shape_str());
        const std::size_t b = x.dim(0), h = x.dim(2), w = x.dim(3);
        CASSKIT_CHECK(h + 2 * pad_ >= kernel_ && w + 2 * pad_ >= kernel_, ValidationError,
                      "Conv2d " + weight_.name + ": input smaller than kernel");
        const std::size_t oh = (h + 2 * pad_ - kernel_) / stride_ + 1;
        const std::size_t ow = (w + 2 * pad_ - kernel_) / stride_ + 1;
        x_ = x;
        Tensor<T> y({b, out_ch_, oh, ow});
        for (std::size_t bi = 0; bi < b; ++bi)
            for (std::size_t o = 0; o < out_ch_; ++o)
                for (std::size_t i = 0; i < oh; ++i)
                    for (std::size_t j = 0; j < ow; ++j) {
                        T acc = bias_.value[o];
                        for (std::size_t c = 0; c < in_ch_; ++c)
                            for (std::size_t ki = 0; ki < kernel_; ++ki) {
                                const std::ptrdiff_t ih =
                                    static_cast<std::ptrdiff_t>(i * stride_ + ki) -
                                    static_cast<std::ptrdiff_t>(pad_);
                                if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(h)) continue;
                                for (std::size_t kj = 0; kj < kernel_; ++kj) {
                                    const std::ptrdiff_t iw =
                                        static_cast<std::ptrdiff_t>(j * stride_ + kj) -
                                        static_cast<std::ptrdiff_t>(pad_);
                                    if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(w)) continue;
                                    acc += x.at4(bi, c, ih, iw) * weight_.value.at4(o, c, ki, kj);
                                }
                            }
                        y.at4(bi, o, i, j) = acc;
                    }
        return y;
    }

    Tensor<T> backward(const Tensor<T>& dy) {
        const std::size_t b = x_.dim(0), h = x_.dim(2), w = x_.dim(3);
        const std::size_t oh = dy.dim(2), ow = dy.dim(3);
        Tensor<T> dx(x_.shape());
        for (std::size_t bi = 0; bi < b; ++bi)
            for (std::size_t o = 0; o < out_ch_; ++o)
                for (std::size_t i = 0; i < oh; ++i)
                    for (std::size_t j = 0; j < ow; ++j) {
                        const T g = dy.at4(bi, o, i, j);
                        bias_.grad[o] += g;
                        for (std::size_t c = 0; c < in_ch_; ++c)
                            for (std::size_t ki = 0; ki < kernel_; ++ki) {
                                const std::ptrdiff_t ih =
                                    static_cast<std::ptrdiff_t>(i * stride_ + ki) -
                                    static_cast<std::ptrdiff_t>(pad_);
                                if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(h)) continue;
                                for (std::size_t kj = 0; kj < kernel_; ++kj) {
                                    const std::ptrdiff_t iw =
                                        static_cast<std::ptrdiff_t>(j * stride_ + kj) -
                                        static_cast<std::ptrdiff_t>(pad_);
                                    if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(w)) continue;
                                    weight_.grad.at4(o, c, ki, kj) += g * x_.at4(bi, c, ih, iw);
                                    dx.at4(bi, c, ih, iw) += g * weight_.value.at4(o, c, ki, kj);
                                }
                            }
                    }
        return dx;
    }

    Parameter<T>& weight() { return weight_; }
    Parameter<T>& bias() { return bias_; }
    void collect(ParamRefs<T>& out) {
        out.push_back(&weight_);
        out.push_back(&bias_);
    }

private:
    Parameter<T> weight_, bias_;
    std::size_t in_ch_, out_ch_, kernel_, stride_, pad_;
    Tensor<T> x_;
};

template <typename T>
class Linear {
public:
    Linear(std::string name, std::size_t in_f, std::size_t out_f)
        : weight_(name + ".weight", {out_f, in_f}),
          bias_(name + ".bias", {out_f}),
          in_f_(in_f), out_f_(out_f) {}

    void init_he(Rng& rng) {
        weight_.value.fill_normal(rng, 0.0, std::sqrt(2.0 / static_cast<double>(in_f_)));
        bias_.value.zero();
    }

    void init_normal(Rng& rng, double stddev) {
        weight_.value.fill_normal(rng, 0.0, stddev);
        bias_.value.zero();
    }

    // x: (M, in_f) -> (M, out_f)
    Tensor<T> forward(const Tensor<T>& x) {
        CASSKIT_CHECK(x.rank() == 2 && x.dim(1) == in_f_, ValidationError,
                      "Linear " + weight_.name + ": bad input " + x.shape_str());
        const std::size_t m = x.dim(0);
        x_ = x;
        Tensor<T> y({m, out_f_});
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t o = 0; o < out_f_; ++o) {
                T acc = bias_.value[o];
                for (std::size_t k = 0; k < in_f_; ++k)
                    acc += x.at2(i, k) * weight_.value.at2(o, k);
                y.at2(i, o) = acc;
            }
        return y;
    }

    Tensor<T> backward(const Tensor<T>& dy) {
        const std::size_t m = x_.dim(0);
        Tensor<T> dx({m, in_f_});
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t o = 0; o < out_f_; ++o) {
                const T g = dy.at2(i, o);
                bias_.grad[o] += g;
                for (std::size_t k = 0; k < in_f_; ++k) {
                    weight_.grad.at2(o, k) += g * x_.at2(i, k);
                    dx.at2(i, k) += g * weight_.value.at2(o, k);
                }
            }
        return dx;
    }

    Parameter<T>& weight() { return weight_; }
    Parameter<T>& bias() { return bias_; }
    void collect(ParamRefs<T>& out) {
        out.push_back(&weight_);
        out.push_back(&bias_);
    }

private:
    Parameter<T> weight_, bias_;
    std::size_t in_f_, out_f_;
    Tensor<T> x_;
};

template <typename T>
class ReLU {
public:
    Tensor<T> forward(const Tensor<T>& x) {
        x_ = x;
        Tensor<T> y(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
        return y;
    }
    Tensor<T> backward(const Tensor<T>& dy) {
        Tensor<T> dx(x_.shape());
        for (std::size_t i = 0; i < x_.size(); ++i) dx[i] = x_[i] > T(0) ? dy[i] : T(0);
        return dx;
    }

private:
    Tensor<T> x_;
};

template <typename T>
class Gelu {
public:
    Tensor<T> forward(const Tensor<T>& x) {
        x_ = x;
        Tensor<T> y(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double v = static_cast<double>(x[i]);
            y[i] = static_cast<T>(v * 0.5 * (1.0 + std::erf(v / std::sqrt(2.0))));
        }
        return y;
    }
    Tensor<T> backward(const Tensor<T>& dy) {
        Tensor<T> dx(x_.shape());
        constexpr double inv_sqrt_2pi = 0.3989422804014327;
        for (std::size_t i = 0; i < x_.size(); ++i) {
            const double v = static_cast<double>(x_[i]);
            const double cdf = 0.5 * (1.0 + std::erf(v / std::sqrt(2.0)));
            const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
            dx[i] = static_cast<T>(static_cast<double>(dy[i]) * (cdf + v * pdf));
        }
        return dx;
    }

private:
    Tensor<T> x_;
};

// (B, C, H, W) -> (B, C) spatial mean.
template <typename T>
class GlobalAvgPool {
public:
    Tensor<T> forward(const Tensor<T>& x) {
        shape_ = x.shape();
        const std::size_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
        Tensor<T> y({b, c});
        for (std::size_t bi = 0; bi < b; ++bi)
            for (std::size_t ci = 0; ci < c; ++ci) {
                T acc = T(0);
                const T* base = x.data() + (bi * c + ci) * hw;
                for (std::size_t k = 0; k < hw; ++k) acc += base[k];
                y.at2(bi, ci) = acc / static_cast<T>(hw);
            }
        return y;
    }
    Tensor<T> backward(const Tensor<T>& dy) {
        const std::size_t b = shape_[0], c = shape_[1], hw = shape_[2] * shape_[3];
        Tensor<T> dx(shape_);
        for (std::size_t bi = 0; bi < b; ++bi)
            for (std::size_t ci = 0; ci < c; ++ci) {
                const T g = dy.at2(bi, ci) / static_cast<T>(hw);
                T* base = dx.data() + (bi * c + ci) * hw;
                for (std::size_t k = 0; k < hw; ++k) base[k] = g;
            }
        return dx;
    }

private:
    std::vector<std::size_t> shape_;
};

// BatchNorm over (B, C, H, W): per-channel statistics across batch and
// space. Training mode normalizes by batch statistics and folds them into
// running estimates; eval mode replays the running estimates. The running
// buffers ride along as zero-gradient parameters so checkpoints, weight
// averaging, and EMA copies carry them with no special cases.
template <typename T>
class BatchNorm2d {
public:
    BatchNorm2d(std::string name, std::size_t channels, double momentum = 0.1,
                double eps = 1e-5)
        : gamma_(name + ".gamma", {channels}),
          beta_(name + ".beta", {channels}),
          running_mean_(name + ".running_mean", {channels}),
          running_var_(name + ".running_var", {channels}),
          channels_(channels), momentum_(momentum), eps_(eps) {
        gamma_.value.fill(T(1));
        running_var_.value.fill(T(1));
    }

    Tensor<T> forward(const Tensor<T>& x, bool training) {
        CASSKIT_CHECK(x.rank() == 4 && x.dim(1) == channels_, ValidationError,
                      "BatchNorm2d " + gamma_.name + ": bad input " + x.shape_str());
        const std::size_t b = x.dim(0), hw = x.dim(2) * x.dim(3);
        const double m = static_cast<double>(b * hw);
        x_shape_ = x.shape();
        training_ = training;
        xhat_ = Tensor<T>(x.shape());
        inv_std_.assign(channels_, 0.0);
        Tensor<T> y(x.shape());
        for (std::size_t c = 0; c < channels_; ++c) {
            double mean, var;
            if (training) {
                mean = 0.0;
                for (std::size_t bi = 0; bi < b; ++bi) {
                    const T* in = x.data() + (bi * channels_ + c) * hw;
                    for (std::size_t k = 0; k < hw; ++k) mean += static_cast<double>(in[k]);
                }
                mean /= m;
                var = 0.0;
                for (std::size_t bi = 0; bi < b; ++bi) {
                    const T* in = x.data() + (bi * channels_ + c) * hw;
                    for (std::size_t k = 0; k < hw; ++k) {
                        const double d = static_cast<double>(in[k]) - mean;
                        var += d * d;
                    }
                }
                var /= m;
                running_mean_.value[c] = static_cast<T>(
                    (1.0 - momentum_) * static_cast<double>(running_mean_.value[c]) +
                    momentum_ * mean);
                running_var_.value[c] = static_cast<T>(
                    (1.0 - momentum_) * static_cast<double>(running_var_.value[c]) +
                    momentum_ * var);
            } else {
                mean = static_cast<double>(running_mean_.value[c]);
                var = static_cast<double>(running_var_.value[c]);
            }
            const double inv = 1.0 / std::sqrt(var + eps_);
            inv_std_[c] = inv;
            const double g = static_cast<double>(gamma_.value[c]);
            const double bt = static_cast<double>(beta_.value[c]);
            for (std::size_t bi = 0; bi < b; ++bi) {
                const T* in = x.data() + (bi * channels_ + c) * hw;
                T* hat = xhat_.data() + (bi * channels_ + c) * hw;
                T* out = y.data() + (bi * channels_ + c) * hw;
                for (std::size_t k = 0; k < hw; ++k) {
                    const double xh = (static_cast<double>(in[k]) - mean) * inv;
                    hat[k] = static_cast<T>(xh);
                    out[k] = static_cast<T>(xh * g + bt);
                }
            }
        }
        return y;
    }

    Tensor<T> backward(const Tensor<T>& dy) {
        const std::size_t b = x_shape_[0], hw = x_shape_[2] * x_shape_[3];
        const double m = static_cast<double>(b * hw);
        Tensor<T> dx(x_shape_);
        for (std::size_t c = 0; c < channels_; ++c) {
            double sum_dy = 0.0, sum_dy_h = 0.0;
            for (std::size_t bi = 0; bi < b; ++bi) {
                const T* g = dy.data() + (bi * channels_ + c) * hw;
                const T* hat = xhat_.data() + (bi * channels_ + c) * hw;
                for (std::size_t k = 0; k < hw; ++k) {
                    sum_dy += static_cast<double>(g[k]);
                    sum_dy_h += static_cast<double>(g[k]) * static_cast<double>(hat[k]);
                }
            }
            gamma_.grad[c] += static_cast<T>(sum_dy_h);
            beta_.grad[c] += static_cast<T>(sum_dy);
            const double gm = static_cast<double>(gamma_.value[c]) * inv_std_[c];
            for (std::size_t bi = 0; bi < b; ++bi) {
                const T* g = dy.data() + (bi * channels_ + c) * hw;
                const T* hat = xhat_.data() + (bi * channels_ + c) * hw;
                T* out = dx.data() + (bi * channels_ + c) * hw;
                for (std::size_t k = 0; k < hw; ++k) {
                    // eval mode has no batch-statistic coupling
                    const double corr =
                        training_ ? (sum_dy + static_cast<double>(hat[k]) * sum_dy_h) / m : 0.0;
                    out[k] = static_cast<T>(gm * (static_cast<double>(g[k]) - corr));
                }
            }
        }
        return dx;
    }

    Parameter<T>& gamma() { return gamma_; }
    Parameter<T>& beta() { return beta_; }
    Parameter<T>& running_mean() { return running_mean_; }
    Parameter<T>& running_var() { return running_var_; }
    void collect(ParamRefs<T>& out) {
        out.push_back(&gamma_);
        out.push_back(&beta_);
        out.push_back(&running_mean_);
        out.push_back(&running_var_);
    }

private:
    Parameter<T> gamma_, beta_, running_mean_, running_var_;
    std::size_t channels_;
    double momentum_, eps_;
    bool training_ = false;
    std::vector<std::size_t> x_shape_;
    Tensor<T> xhat_;
    std::vector<double> inv_std_;
};

// LayerNorm over the last dimension of a (M, D)-flattened view.
template <typename T>
class LayerNorm {
public:
    LayerNorm(std::string name, std::size_t dim, double eps = 1e-5)
        : gamma_(name + ".gamma", {dim}), beta_(name + ".beta", {dim}), dim_(dim), eps_(eps) {
        gamma_.value.fill(T(1));
    }

    Tensor<T> forward(const Tensor<T>& x) {
        CASSKIT_CHECK(x.size() % dim_ == 0, ValidationError, "LayerNorm: bad input size");
        x_shape_ = x.shape();
        const std::size_t rows = x.size() / dim_;
        xhat_ = Tensor<T>({rows, dim_});
        inv_std_.assign(rows, 0.0);
        Tensor<T> y(x.shape());
        for (std::size_t r = 0; r < rows; ++r) {
            const T* in = x.data() + r * dim_;
            double mean = 0.0;
            for (std::size_t j = 0; j < dim_; ++j) mean += static_cast<double>(in[j]);
            mean /= static_cast<double>(dim_);
            double var = 0.0;
            for (std::size_t j = 0; j < dim_; ++j) {
                const double d = static_cast<double>(in[j]) - mean;
                var += d * d;
            }
            var /= static_cast<double>(dim_);
            const double inv = 1.0 / std::sqrt(var + eps_);
            inv_std_[r] = inv;
            T* out = y.data() + r * dim_;
            for (std::size_t j = 0; j < dim_; ++j) {
                const double h = (static_cast<double>(in[j]) - mean) * inv;
                xhat_.at2(r, j) = static_cast<T>(h);
                out[j] = static_cast<T>(h * static_cast<double>(gamma_.value[j]) +
                                        static_cast<double>(beta_.value[j]));
            }
        }
        return y;
    }

    Tensor<T> backward(const Tensor<T>& dy) {
        const std::size_t rows = xhat_.dim(0);
        Tensor<T> dx(x_shape_);
        for (std::size_t r = 0; r < rows; ++r) {
            const T* g = dy.data() + r * dim_;
            double sum_dh = 0.0, sum_dh_h = 0.0;
            for (std::size_t j = 0; j < dim_; ++j) {
                const double dh = static_cast<double>(g[j]) * static_cast<double>(gamma_.value[j]);
                const double h = static_cast<double>(xhat_.at2(r, j));
                sum_dh += dh;
                sum_dh_h += dh * h;
                gamma_.grad[j] += static_cast<T>(static_cast<double>(g[j]) * h);
                beta_.grad[j] += g[j];
            }
            const double n = static_cast<double>(dim_);
            T* out = dx.data() + r * dim_;
            for (std::size_t j = 0; j < dim_; ++j) {
                const double dh = static_cast<double>(g[j]) * static_cast<double>(gamma_.value[j]);
                const double h = static_cast<double>(xhat_.at2(r, j));
                out[j] = static_cast<T>(inv_std_[r] * (dh - sum_dh / n - h * sum_dh_h / n));
            }
        }
        return dx;
    }

    Parameter<T>& gamma() { return gamma_; }
    Parameter<T>& beta() { return beta_; }
    void collect(ParamRefs<T>& out) {
        out.push_back(&gamma_);
        out.push_back(&beta_);
    }

private:
    Parameter<T> gamma_, beta_;
    std::size_t dim_;
    double eps_;
    std::vector<std::size_t> x_shape_;
    Tensor<T> xhat_;
    std::vector<double> inv_std_;
};

// Multi-head self-attention over (B, S, D) token sequences. Attention
// probabilities from the last forward stay readable for introspection.
template <typename T>
class MultiHeadSelfAttention {
public:
    MultiHeadSelfAttention(std::string name, std::size_t dim, std::size_t heads)
        : qkv_(name + ".qkv", dim, 3 * dim),
          proj_(name + ".proj", dim, dim),
          dim_(dim), heads_(heads), head_dim_(dim / heads) {
        CASSKIT_CHECK(dim % heads == 0, SpecError,
                      "attention dim must be divisible by head count");
    }

    void init_normal(Rng& rng, double stddev) {
        qkv_.init_normal(rng, stddev);
        proj_.init_normal(rng, stddev);
    }

    Tensor<T> forward(const Tensor<T>& x) {
        CASSKIT_CHECK(x.rank() == 3 && x.dim(2) == dim_, ValidationError,
                      "attention: bad input " + x.shape_str());
        const std::size_t b = x.dim(0), s = x.dim(1);
        b_ = b;
        s_ = s;

        Tensor<T> flat = x;
        flat.reshape({b * s, dim_});
        qkv_out_ = qkv_.forward(flat); // (B*S, 3D)

        // split into per-head q, k, v: (B, H, S, hd)
        q_ = Tensor<T>({b, heads_, s, head_dim_});
        k_ = Tensor<T>({b, heads_, s, head_dim_});
        v_ = Tensor<T>({b, heads_, s, head_dim_});
        for (std::size_t bi = 0; bi < b; ++bi)
            for (std::size_t si = 0; si < s; ++si)
                for (std::size_t h = 0; h < heads_; ++h)
                    for (std::size_t d = 0; d < head_dim_; ++d) {
                        const std::size_t col = h * head_dim_ + d;
                        q_.at4(bi, h, si, d) = qkv_out_.at2(bi * s + si, col);
                        k_.at4(bi, h, si, d) = qkv_out_.at2(bi * s + si, dim_ + col);
                        v_.at4(bi, h, si, d) = qkv_out_.at2(bi * s + si, 2 * dim_ + col);
                    }

        // attention probabilities, softmax over keys
        const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim_));
        probs_ = Tensor<T>({b, heads_, s, s});
        for (std::size_t bi = 0; bi < b; ++bi)
            for (std::size_t h = 0; h < heads_; ++h)
                for (std::size_t i = 0; i < s; ++i) {
                    double mx = -std::numeric_limits<double>::infinity();
                    std::vector<double> row(s);
                    for (std::size_t j = 0; j < s; ++j) {
                        double dot = 0.0;
                        for (std::size_t d = 0; d < head_dim_; ++d)
                            dot += static_cast<double>(q_.at4(bi, h, i, d)) *
                                   static_cast<double>(k_.at4(bi, h, j, d));
                        row[j] = dot * scale;
                        mx = std::max(mx, row[j]);
                    }
                    double sum = 0.0;
                    for (std::size_t j = 0; j < s; ++j) {
                        row[j] = std::exp(row[j] - mx);
                        sum += row[j];
                    }
                    for (std::size_t j = 0; j < s; ++j)
                        probs_.at4(bi, h, i, j) = static_cast<T>(row[j] / sum);
                }

        // context = probs * v, heads merged back to (B*S, D)
        ctx_ = Tensor<T>({b * s, dim_});
        for (std::size_t bi = 0; bi < b; ++bi)
            for (std::size_t h = 0; h < heads_; ++h)
                for (std::size_t i = 0; i < s; ++i)
                    for (std::size_t d = 0; d < head_dim_; ++d) {
                        T acc = T(0);
                        for (std::size_t j = 0; j < s; ++j)
                            acc += probs_.at4(bi, h, i, j) * v_.at4(bi, h, j, d);
                        ctx_.at2(bi * s + i, h * head_dim_ + d) = acc;
                    }

        Tensor<T> y = proj_.forward(ctx_);
        y.reshape({b, s, dim_});
        return y;
    }

    Tensor<T> backward(const Tensor<T>& dy) {
        const std::size_t b = b_, s = s_;
        Tensor<T> dflat = dy;
        dflat.reshape({b * s, dim_});
        Tensor<T> dctx = proj_.backward(dflat); // (B*S, D)

        Tensor<T> dq({b, heads_, s, head_dim_});
        Tensor<T> dk({b, heads_, s, head_dim_});
        Tensor<T> dv({b, heads_, s, head_dim_});
        const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim_));

        for (std::size_t bi = 0; bi < b; ++bi)
            for (std::size_t h = 0; h < heads_; ++h) {
                // dv += probs^T * dctx ; dprobs = dctx * v^T
                for (std::size_t i = 0; i < s; ++i) {
                    std::vector<double> dprobs(s, 0.0);
                    for (std::size_t j = 0; j < s; ++j) {
                        double acc = 0.0;
                        for (std::size_t d = 0; d < head_dim_; ++d)
                            acc += static_cast<double>(
                                       dctx.at2(bi * s + i, h * head_dim_ + d)) *
                                   static_cast<double>(v_.at4(bi, h, j, d));
                        dprobs[j] = acc;
                    }
                    // softmax backward on row i
                    double dot = 0.0;
                    for (std::size_t j = 0; j < s; ++j)
                        dot += dprobs[j] * static_cast<double>(probs_.at4(bi, h, i, j));
                    for (std::size_t j = 0; j < s; ++j) {
                        const double p = static_cast<double>(probs_.at4(bi, h, i, j));
                        const double dscore = p * (dprobs[j] - dot) * scale;
                        for (std::size_t d = 0; d < head_dim_; ++d) {
                            dq.at4(bi, h, i, d) += static_cast<T>(
                                dscore * static_cast<double>(k_.at4(bi, h, j, d)));
                            dk.at4(bi, h, j, d) += static_cast<T>(
                                dscore * static_cast<double>(q_.at4(bi, h, i, d)));
                        }
                    }
                    for (std::size_t j = 0; j < s; ++j) {
                        const T p = probs_.at4(bi, h, i, j);
                        for (std::size_t d = 0; d < head_dim_; ++d)
                            dv.at4(bi, h, j, d) +=
                                p * dctx.at2(bi * s + i, h * head_dim_ + d);
                    }
                }
            }

        // repack (dq, dk, dv) -> gradient of qkv output
        Tensor<T> dqkv({b * s, 3 * dim_});
        for (std::size_t bi = 0; bi < b; ++bi)
            for (std::size_t si = 0; si < s; ++si)
                for (std::size_t h = 0; h < heads_; ++h)
                    for (std::size_t d = 0; d < head_dim_; ++d) {
                        const std::size_t col = h * head_dim_ + d;
                        dqkv.at2(bi * s + si, col) = dq.at4(bi, h, si, d);
                        dqkv.at2(bi * s + si, dim_ + col) = dk.at4(bi, h, si, d);
                        dqkv.at2(bi * s + si, 2 * dim_ + col) = dv.at4(bi, h, si, d);
                    }
        Tensor<T> dx = qkv_.backward(dqkv);
        dx.reshape({b, s, dim_});
        return dx;
    }

    // (B, H, S, S) softmax rows from the most recent forward.
    const Tensor<T>& attention_probs() const { return probs_; }

    void collect(ParamRefs<T>& out) {
        qkv_.collect(out);
        proj_.collect(out);
    }

private:
    Linear<T> qkv_, proj_;
    std::size_t dim_, heads_, head_dim_;
    std::size_t b_ = 0, s_ = 0;
    Tensor<T> qkv_out_, q_, k_, v_, probs_, ctx_;
};

} // namespace casskit
