#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

#include "casskit/errors.hpp"
#include "casskit/rng.hpp"
#include "casskit/tensor.hpp"

namespace casskit {

// Pixel-level primitives over (C, H, W) float images. Intensity images
// live in [0, 1] until normalize. Everything is pure: inputs are taken
// by const reference, randomness comes in through explicit Rng handles.

inline float clamp01(float v) { return std::min(1.0f, std::max(0.0f, v)); }

inline TensorF replicate_gray(const TensorF& img) {
    CASSKIT_CHECK(img.rank() == 3 && img.dim(0) == 1, ValidationError,
                  "replicate_gray expects a single-channel image");
    TensorF out({3, img.dim(1), img.dim(2)});
    const std::size_t hw = img.dim(1) * img.dim(2);
    for (std::size_t c = 0; c < 3; ++c)
        std::copy(img.data(), img.data() + hw, out.data() + c * hw);
    return out;
}

// Bilinear resize with the half-pixel source mapping and edge clamping.
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& img, std::size_t out_h, std::size_t out_w) {
    CASSKIT_CHECK(img.rank() == 3, ValidationError, "resize expects (C, H, W)");
    const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
    Tensor<T> out({c, out_h, out_w});
    const double sy = static_cast<double>(h) / static_cast<double>(out_h);
    const double sx = static_cast<double>(w) / static_cast<double>(out_w);
    for (std::size_t i = 0; i < out_h; ++i) {
        double fy = (static_cast<double>(i) + 0.5) * sy - 0.5;
        fy = std::min(std::max(fy, 0.0), static_cast<double>(h - 1));
        const std::size_t y0 = static_cast<std::size_t>(fy);
        const std::size_t y1 = std::min(y0 + 1, h - 1);
        const double wy = fy - static_cast<double>(y0);
        for (std::size_t j = 0; j < out_w; ++j) {
            double fx = (static_cast<double>(j) + 0.5) * sx - 0.5;
            fx = std::min(std::max(fx, 0.0), static_cast<double>(w - 1));
            const std::size_t x0 = static_cast<std::size_t>(fx);
            const std::size_t x1 = std::min(x0 + 1, w - 1);
            const double wx = fx - static_cast<double>(x0);
            for (std::size_t ch = 0; ch < c; ++ch) {
                const double top = (1.0 - wx) * img.at3(ch, y0, x0) + wx * img.at3(ch, y0, x1);
                const double bot = (1.0 - wx) * img.at3(ch, y1, x0) + wx * img.at3(ch, y1, x1);
                out.at3(ch, i, j) = static_cast<T>((1.0 - wy) * top + wy * bot);
            }
        }
    }
    return out;
}

inline TensorF hflip(const TensorF& img) {
    TensorF out(img.shape());
    const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < w; ++j)
                out.at3(ch, i, j) = img.at3(ch, i, w - 1 - j);
    return out;
}

inline TensorF vflip(const TensorF& img) {
    TensorF out(img.shape());
    const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < w; ++j)
                out.at3(ch, i, j) = img.at3(ch, h - 1 - i, j);
    return out;
}

inline TensorF adjust_brightness(const TensorF& img, float factor) {
    TensorF out(img.shape());
    for (std::size_t i = 0; i < img.size(); ++i) out[i] = clamp01(img[i] * factor);
    return out;
}

namespace detail {
inline float luma(float r, float g, float b) {
    return 0.2989f * r + 0.587f * g + 0.114f * b;
}
} // namespace detail

inline TensorF adjust_contrast(const TensorF& img, float factor) {
    const std::size_t hw = img.dim(1) * img.dim(2);
    double mean = 0.0;
    for (std::size_t k = 0; k < hw; ++k)
        mean += detail::luma(img[k], img[hw + k], img[2 * hw + k]);
    mean /= static_cast<double>(hw);
    TensorF out(img.shape());
    for (std::size_t i = 0; i < img.size(); ++i)
        out[i] = clamp01(factor * img[i] + (1.0f - factor) * static_cast<float>(mean));
    return out;
}

inline TensorF adjust_saturation(const TensorF& img, float factor) {
    const std::size_t hw = img.dim(1) * img.dim(2);
    TensorF out(img.shape());
    for (std::size_t k = 0; k < hw; ++k) {
        const float gray = detail::luma(img[k], img[hw + k], img[2 * hw + k]);
        for (std::size_t c = 0; c < 3; ++c)
            out[c * hw + k] = clamp01(factor * img[c * hw + k] + (1.0f - factor) * gray);
    }
    return out;
}

// Hue shift by a fraction of a full turn, through HSV and back.
inline TensorF adjust_hue(const TensorF& img, float delta) {
    const std::size_t hw = img.dim(1) * img.dim(2);
    TensorF out(img.shape());
    for (std::size_t k = 0; k < hw; ++k) {
        const float r = img[k], g = img[hw + k], b = img[2 * hw + k];
        const float mx = std::max({r, g, b});
        const float mn = std::min({r, g, b});
        const float d = mx - mn;
        float h = 0.0f;
        if (d > 0.0f) {
            if (mx == r)
                h = std::fmod((g - b) / d, 6.0f) / 6.0f;
            else if (mx == g)
                h = ((b - r) / d + 2.0f) / 6.0f;
            else
                h = ((r - g) / d + 4.0f) / 6.0f;
            if (h < 0.0f) h += 1.0f;
        }
        const float s = mx > 0.0f ? d / mx : 0.0f;
        const float v = mx;
        h = std::fmod(h + delta + 1.0f, 1.0f);

        const float hp = h * 6.0f;
        const float c = v * s;
        const float x = c * (1.0f - std::abs(std::fmod(hp, 2.0f) - 1.0f));
        const float m = v - c;
        float rr = 0, gg = 0, bb = 0;
        switch (static_cast<int>(hp) % 6) {
            case 0: rr = c; gg = x; break;
            case 1: rr = x; gg = c; break;
            case 2: gg = c; bb = x; break;
            case 3: gg = x; bb = c; break;
            case 4: rr = x; bb = c; break;
            default: rr = c; bb = x; break;
        }
        out[k] = clamp01(rr + m);
        out[hw + k] = clamp01(gg + m);
        out[2 * hw + k] = clamp01(bb + m);
    }
    return out;
}

// Jitter factors drawn per call; sub-ops run in a fixed order
// (brightness, contrast, saturation, hue) so the stream of random draws
// stays stable across platforms.
inline TensorF color_jitter(const TensorF& img, Rng& rng, double bcs = 0.4,
                            double hue = 0.1) {
    TensorF out = adjust_brightness(img, static_cast<float>(rng.uniform(1.0 - bcs, 1.0 + bcs)));
    out = adjust_contrast(out, static_cast<float>(rng.uniform(1.0 - bcs, 1.0 + bcs)));
    out = adjust_saturation(out, static_cast<float>(rng.uniform(1.0 - bcs, 1.0 + bcs)));
    return adjust_hue(out, static_cast<float>(rng.uniform(-hue, hue)));
}

inline TensorF solarize(const TensorF& img, float threshold) {
    TensorF out(img.shape());
    for (std::size_t i = 0; i < img.size(); ++i)
        out[i] = img[i] > threshold ? 1.0f - img[i] : img[i];
    return out;
}

inline std::size_t blur_kernel_for(std::size_t image_size) {
    auto k = static_cast<std::size_t>(
        std::max<long>(1, std::lround(0.1 * static_cast<double>(image_size))));
    if (k % 2 == 0) ++k;
    return k;
}

// Separable gaussian with symmetric reflection at the borders.
inline TensorF gaussian_blur(const TensorF& img, std::size_t kernel, double sigma) {
    CASSKIT_CHECK(kernel % 2 == 1, ValidationError, "blur kernel must be odd");
    const int r = static_cast<int>(kernel / 2);
    std::vector<double> k(kernel);
    double sum = 0.0;
    for (int i = -r; i <= r; ++i) {
        k[i + r] = std::exp(-0.5 * (i * i) / (sigma * sigma));
        sum += k[i + r];
    }
    for (double& v : k) v /= sum;

    const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
    auto reflect = [](int idx, int n) {
        if (idx < 0) idx = -idx;
        if (idx >= n) idx = 2 * n - 2 - idx;
        return idx;
    };
    TensorF mid(img.shape());
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < w; ++j) {
                double acc = 0.0;
                for (int t = -r; t <= r; ++t)
                    acc += k[t + r] *
                           img.at3(ch, i, reflect(static_cast<int>(j) + t, static_cast<int>(w)));
                mid.at3(ch, i, j) = static_cast<float>(acc);
            }
    TensorF out(img.shape());
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < w; ++j) {
                double acc = 0.0;
                for (int t = -r; t <= r; ++t)
                    acc += k[t + r] *
                           mid.at3(ch, reflect(static_cast<int>(i) + t, static_cast<int>(h)), j);
                out.at3(ch, i, j) = static_cast<float>(acc);
            }
    return out;
}

inline TensorF normalize_channels(const TensorF& img, const std::array<double, 3>& mean,
                                  const std::array<double, 3>& stddev) {
    CASSKIT_CHECK(img.dim(0) == 3, ValidationError, "normalize expects 3 channels");
    for (double s : stddev)
        CASSKIT_CHECK(s > 0.0, ValidationError, "normalization std must be positive");
    TensorF out(img.shape());
    const std::size_t hw = img.dim(1) * img.dim(2);
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t k = 0; k < hw; ++k)
            out[c * hw + k] = static_cast<float>(
                (static_cast<double>(img[c * hw + k]) - mean[c]) / stddev[c]);
    return out;
}

namespace detail {

// Solve the 8x8 system for the homography taking the four `from` corners
// to the four `to` corners; returns row-major 3x3 with h22 = 1.
inline std::array<double, 9> homography(const std::array<std::array<double, 2>, 4>& from,
                                        const std::array<std::array<double, 2>, 4>& to) {
    double a[8][9] = {};
    for (int p = 0; p < 4; ++p) {
        const double x = from[p][0], y = from[p][1];
        const double u = to[p][0], v = to[p][1];
        double* r0 = a[2 * p];
        double* r1 = a[2 * p + 1];
        r0[0] = x; r0[1] = y; r0[2] = 1; r0[6] = -u * x; r0[7] = -u * y; r0[8] = u;
        r1[3] = x; r1[4] = y; r1[5] = 1; r1[6] = -v * x; r1[7] = -v * y; r1[8] = v;
    }
    for (int col = 0; col < 8; ++col) {
        int piv = col;
        for (int r = col + 1; r < 8; ++r)
            if (std::abs(a[r][col]) > std::abs(a[piv][col])) piv = r;
        CASSKIT_CHECK(std::abs(a[piv][col]) > 1e-12, NumericsError,
                      "degenerate perspective corner set");
        std::swap(a[piv], a[col]);
        for (int r = 0; r < 8; ++r) {
            if (r == col) continue;
            const double f = a[r][col] / a[col][col];
            for (int cc = col; cc < 9; ++cc) a[r][cc] -= f * a[col][cc];
        }
    }
    std::array<double, 9> h;
    for (int i = 0; i < 8; ++i) h[i] = a[i][8] / a[i][i];
    h[8] = 1.0;
    return h;
}

inline float sample_bilinear_zero(const TensorF& img, std::size_t ch, double y, double x) {
    const int h = static_cast<int>(img.dim(1)), w = static_cast<int>(img.dim(2));
    if (y < -1.0 || x < -1.0 || y > static_cast<double>(h) || x > static_cast<double>(w))
        return 0.0f;
    const int y0 = static_cast<int>(std::floor(y)), x0 = static_cast<int>(std::floor(x));
    const double wy = y - y0, wx = x - x0;
    auto px = [&](int yy, int xx) -> double {
        if (yy < 0 || xx < 0 || yy >= h || xx >= w) return 0.0;
        return img.at3(ch, yy, xx);
    };
    const double top = (1.0 - wx) * px(y0, x0) + wx * px(y0, x0 + 1);
    const double bot = (1.0 - wx) * px(y0 + 1, x0) + wx * px(y0 + 1, x0 + 1);
    return static_cast<float>((1.0 - wy) * top + wy * bot);
}

} // namespace detail

// Warp by a homography that jitters the four corners inward by up to
// distortion/2 of each dimension. Out-of-frame samples fill with zero.
inline TensorF random_perspective(const TensorF& img, Rng& rng, double distortion) {
    const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
    const double half_w = distortion * static_cast<double>(w) / 2.0;
    const double half_h = distortion * static_cast<double>(h) / 2.0;
    const std::array<std::array<double, 2>, 4> start = {{
        {0.0, 0.0},
        {static_cast<double>(w - 1), 0.0},
        {static_cast<double>(w - 1), static_cast<double>(h - 1)},
        {0.0, static_cast<double>(h - 1)},
    }};
    const std::array<std::array<double, 2>, 4> end = {{
        {rng.uniform(0.0, half_w), rng.uniform(0.0, half_h)},
        {w - 1 - rng.uniform(0.0, half_w), rng.uniform(0.0, half_h)},
        {w - 1 - rng.uniform(0.0, half_w), h - 1 - rng.uniform(0.0, half_h)},
        {rng.uniform(0.0, half_w), h - 1 - rng.uniform(0.0, half_h)},
    }};
    // map output (end frame) back to source coordinates
    const std::array<double, 9> hm = detail::homography(end, start);
    TensorF out(img.shape());
    for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) {
            const double x = static_cast<double>(j), y = static_cast<double>(i);
            const double denom = hm[6] * x + hm[7] * y + hm[8];
            const double sx = (hm[0] * x + hm[1] * y + hm[2]) / denom;
            const double sy = (hm[3] * x + hm[4] * y + hm[5]) / denom;
            for (std::size_t ch = 0; ch < c; ++ch)
                out.at3(ch, i, j) = detail::sample_bilinear_zero(img, ch, sy, sx);
        }
    return out;
}

// Rotation about the image center by an angle drawn in ±max_degree.
inline TensorF random_affine(const TensorF& img, Rng& rng, double max_degree) {
    const double theta = rng.uniform(-max_degree, max_degree) * M_PI / 180.0;
    const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
    const double cy = (static_cast<double>(h) - 1.0) / 2.0;
    const double cx = (static_cast<double>(w) - 1.0) / 2.0;
    const double ct = std::cos(theta), st = std::sin(theta);
    TensorF out(img.shape());
    for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) {
            const double dy = static_cast<double>(i) - cy;
            const double dx = static_cast<double>(j) - cx;
            const double sy = cy + (st * dx + ct * dy);
            const double sx = cx + (ct * dx - st * dy);
            for (std::size_t ch = 0; ch < c; ++ch)
                out.at3(ch, i, j) = detail::sample_bilinear_zero(img, ch, sy, sx);
        }
    return out;
}

} // namespace casskit
