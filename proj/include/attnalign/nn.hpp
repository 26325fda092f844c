#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "attnalign/errors.hpp"
#include "attnalign/rng.hpp"
#include "attnalign/tensor.hpp"

namespace attnalign {

// Fixed network geometry: 3x28x28 in, three conv blocks with 2x2 max
// pooling after the first two, global average pooling, one linear head.
// Spatial path 28 -> 14 -> 7; the 64x7x7 post-ReLU features feed both the
// head (via GAP) and the CAM saliency.
namespace model_dims {
inline constexpr std::size_t kInputChannels = 3;
inline constexpr std::size_t kImage = 28;
inline constexpr std::size_t kConv1Out = 16;
inline constexpr std::size_t kConv2Out = 32;
inline constexpr std::size_t kConv3Out = 64;
inline constexpr std::size_t kFeatureDim = 64;
inline constexpr std::size_t kClasses = 10;
inline constexpr std::size_t kCamSize = 7;
} // namespace model_dims

struct Conv2dParams {
    Tensor weights; // [outC, inC, kH, kW]
    Tensor bias;    // [outC]
    std::size_t pad = 0;

    static Conv2dParams create(std::size_t out_c, std::size_t in_c, std::size_t k,
                               std::size_t pad) {
        Conv2dParams p;
        p.weights = Tensor({out_c, in_c, k, k});
        p.bias = Tensor({out_c});
        p.pad = pad;
        return p;
    }

    std::size_t out_channels() const { return weights.dim(0); }
    std::size_t in_channels() const { return weights.dim(1); }
    std::size_t kernel_h() const { return weights.dim(2); }
    std::size_t kernel_w() const { return weights.dim(3); }
};

struct LinearParams {
    Tensor weights; // [outDim, inDim]
    Tensor bias;    // [outDim]

    static LinearParams create(std::size_t out_dim, std::size_t in_dim) {
        LinearParams p;
        p.weights = Tensor({out_dim, in_dim});
        p.bias = Tensor({out_dim});
        return p;
    }
};

// ---- convolution (stride 1, zero padding) ----

inline Tensor conv2d_forward(const Conv2dParams& p, const Tensor& x) {
    if (x.rank() != 4 || x.dim(1) != p.in_channels()) {
        throw DimensionError("conv2d_forward: input " + Tensor::shape_string(x.shape()) +
                             " does not match " + std::to_string(p.in_channels()) +
                             " input channels");
    }
    const std::size_t batch = x.dim(0), in_c = x.dim(1), in_h = x.dim(2), in_w = x.dim(3);
    const std::size_t out_c = p.out_channels(), kh = p.kernel_h(), kw = p.kernel_w();
    const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(p.pad);
    if (in_h + 2 * p.pad < kh || in_w + 2 * p.pad < kw) {
        throw DimensionError("conv2d_forward: kernel larger than padded input");
    }
    const std::size_t out_h = in_h + 2 * p.pad - kh + 1;
    const std::size_t out_w = in_w + 2 * p.pad - kw + 1;

    Tensor y({batch, out_c, out_h, out_w});
    const double* wts = p.weights.data();
    for (std::size_t b = 0; b < batch; ++b) {
        const double* xb = x.data() + b * in_c * in_h * in_w;
        double* yb = y.data() + b * out_c * out_h * out_w;
        for (std::size_t oc = 0; oc < out_c; ++oc) {
            double* ymap = yb + oc * out_h * out_w;
            const double bias = p.bias[oc];
            for (std::size_t i = 0; i < out_h * out_w; ++i) ymap[i] = bias;
            for (std::size_t ic = 0; ic < in_c; ++ic) {
                const double* xmap = xb + ic * in_h * in_w;
                for (std::size_t ky = 0; ky < kh; ++ky) {
                    for (std::size_t kx = 0; kx < kw; ++kx) {
                        const double w = wts[((oc * in_c + ic) * kh + ky) * kw + kx];
                        if (w == 0.0) continue;
                        const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - pad;
                        const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - pad;
                        const std::size_t oh_lo = dy < 0 ? static_cast<std::size_t>(-dy) : 0;
                        const std::size_t oh_hi =
                            std::min(out_h, static_cast<std::size_t>(
                                                static_cast<std::ptrdiff_t>(in_h) - dy));
                        const std::size_t ow_lo = dx < 0 ? static_cast<std::size_t>(-dx) : 0;
                        const std::size_t ow_hi =
                            std::min(out_w, static_cast<std::size_t>(
                                                static_cast<std::ptrdiff_t>(in_w) - dx));
                        for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
                            double* yrow = ymap + oh * out_w;
                            const double* xrow =
                                xmap + (oh + dy) * static_cast<std::ptrdiff_t>(in_w) + dx;
                            for (std::size_t ow = ow_lo; ow < ow_hi; ++ow)
                                yrow[ow] += w * xrow[ow];
                        }
                    }
                }
            }
        }
    }
    return y;
}

struct Conv2dGrads {
    Tensor d_input;
    Tensor d_weights;
    Tensor d_bias;
};

/// Exact gradients of conv2d_forward; x is the forward input. Skipping
/// d_input (want_dx = false) saves a pass when the layer sits at the front.
inline Conv2dGrads conv2d_backward(const Conv2dParams& p, const Tensor& x, const Tensor& d_y,
                                   bool want_dx = true) {
    const std::size_t batch = x.dim(0), in_c = x.dim(1), in_h = x.dim(2), in_w = x.dim(3);
    const std::size_t out_c = p.out_channels(), kh = p.kernel_h(), kw = p.kernel_w();
    const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(p.pad);
    const std::size_t out_h = in_h + 2 * p.pad - kh + 1;
    const std::size_t out_w = in_w + 2 * p.pad - kw + 1;
    if (d_y.rank() != 4 || d_y.dim(0) != batch || d_y.dim(1) != out_c || d_y.dim(2) != out_h ||
        d_y.dim(3) != out_w) {
        throw DimensionError("conv2d_backward: upstream gradient " +
                             Tensor::shape_string(d_y.shape()) + " does not match forward output");
    }

    Conv2dGrads g;
    g.d_weights = Tensor(p.weights.shape());
    g.d_bias = Tensor(p.bias.shape());
    if (want_dx) g.d_input = Tensor(x.shape());

    double* dw = g.d_weights.data();
    const double* wts = p.weights.data();
    for (std::size_t b = 0; b < batch; ++b) {
        const double* xb = x.data() + b * in_c * in_h * in_w;
        const double* dyb = d_y.data() + b * out_c * out_h * out_w;
        double* dxb = want_dx ? g.d_input.data() + b * in_c * in_h * in_w : nullptr;
        for (std::size_t oc = 0; oc < out_c; ++oc) {
            const double* dymap = dyb + oc * out_h * out_w;
            double bias_acc = 0.0;
            for (std::size_t i = 0; i < out_h * out_w; ++i) bias_acc += dymap[i];
            g.d_bias[oc] += bias_acc;
            for (std::size_t ic = 0; ic < in_c; ++ic) {
                const double* xmap = xb + ic * in_h * in_w;
                double* dxmap = want_dx ? dxb + ic * in_h * in_w : nullptr;
                for (std::size_t ky = 0; ky < kh; ++ky) {
                    for (std::size_t kx = 0; kx < kw; ++kx) {
                        const std::ptrdiff_t dy_off = static_cast<std::ptrdiff_t>(ky) - pad;
                        const std::ptrdiff_t dx_off = static_cast<std::ptrdiff_t>(kx) - pad;
                        const std::size_t oh_lo =
                            dy_off < 0 ? static_cast<std::size_t>(-dy_off) : 0;
                        const std::size_t oh_hi =
                            std::min(out_h, static_cast<std::size_t>(
                                                static_cast<std::ptrdiff_t>(in_h) - dy_off));
                        const std::size_t ow_lo =
                            dx_off < 0 ? static_cast<std::size_t>(-dx_off) : 0;
                        const std::size_t ow_hi =
                            std::min(out_w, static_cast<std::size_t>(
                                                static_cast<std::ptrdiff_t>(in_w) - dx_off));
                        const std::size_t widx = ((oc * in_c + ic) * kh + ky) * kw + kx;
                        const double w = wts[widx];
                        double w_acc = 0.0;
                        for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
                            const double* dyrow = dymap + oh * out_w;
                            const double* xrow =
                                xmap + (oh + dy_off) * static_cast<std::ptrdiff_t>(in_w) + dx_off;
                            double* dxrow =
                                want_dx ? dxmap + (oh + dy_off) * static_cast<std::ptrdiff_t>(
                                                                      in_w) +
                                              dx_off
                                        : nullptr;
                            if (want_dx) {
                                for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) {
                                    w_acc += dyrow[ow] * xrow[ow];
                                    dxrow[ow] += w * dyrow[ow];
                                }
                            } else {
                                for (std::size_t ow = ow_lo; ow < ow_hi; ++ow)
                                    w_acc += dyrow[ow] * xrow[ow];
                            }
                        }
                        dw[widx] += w_acc;
                    }
                }
            }
        }
    }
    return g;
}

// ---- 2x2 max pooling ----

struct MaxPoolCache {
    std::vector<std::size_t> in_shape;
    std::vector<std::uint8_t> argmax; // local window index dy*2+dx per output cell
};

inline std::pair<Tensor, MaxPoolCache> maxpool2d_forward(const Tensor& x) {
    if (x.rank() != 4 || x.dim(2) % 2 != 0 || x.dim(3) % 2 != 0) {
        throw DimensionError("maxpool2d_forward: need even spatial dims, got " +
                             Tensor::shape_string(x.shape()));
    }
    const std::size_t batch = x.dim(0), ch = x.dim(1), in_h = x.dim(2), in_w = x.dim(3);
    const std::size_t out_h = in_h / 2, out_w = in_w / 2;
    Tensor y({batch, ch, out_h, out_w});
    MaxPoolCache cache;
    cache.in_shape = x.shape();
    cache.argmax.resize(y.size());

    const double* xd = x.data();
    double* yd = y.data();
    std::size_t out_i = 0;
    for (std::size_t bc = 0; bc < batch * ch; ++bc) {
        const double* xmap = xd + bc * in_h * in_w;
        for (std::size_t oh = 0; oh < out_h; ++oh) {
            for (std::size_t ow = 0; ow < out_w; ++ow, ++out_i) {
                const double* base = xmap + (oh * 2) * in_w + ow * 2;
                // Ties keep the first candidate in row-major window order.
                double best = base[0];
                std::uint8_t arg = 0;
                if (base[1] > best) { best = base[1]; arg = 1; }
                if (base[in_w] > best) { best = base[in_w]; arg = 2; }
                if (base[in_w + 1] > best) { best = base[in_w + 1]; arg = 3; }
                yd[out_i] = best;
                cache.argmax[out_i] = arg;
            }
        }
    }
    return {std::move(y), std::move(cache)};
}

inline Tensor maxpool2d_backward(const MaxPoolCache& cache, const Tensor& d_y) {
    const std::size_t batch = cache.in_shape[0], ch = cache.in_shape[1];
    const std::size_t in_h = cache.in_shape[2], in_w = cache.in_shape[3];
    const std::size_t out_h = in_h / 2, out_w = in_w / 2;
    if (d_y.size() != cache.argmax.size()) {
        throw DimensionError("maxpool2d_backward: upstream gradient " +
                             Tensor::shape_string(d_y.shape()) + " does not match pooled shape");
    }
    Tensor d_x(cache.in_shape);
    double* dxd = d_x.data();
    const double* dyd = d_y.data();
    std::size_t out_i = 0;
    for (std::size_t bc = 0; bc < batch * ch; ++bc) {
        double* dxmap = dxd + bc * in_h * in_w;
        for (std::size_t oh = 0; oh < out_h; ++oh) {
            for (std::size_t ow = 0; ow < out_w; ++ow, ++out_i) {
                const std::uint8_t arg = cache.argmax[out_i];
                const std::size_t ih = oh * 2 + (arg >> 1);
                const std::size_t iw = ow * 2 + (arg & 1);
                dxmap[ih * in_w + iw] += dyd[out_i];
            }
        }
    }
    return d_x;
}

// ---- global average pooling over the fixed 7x7 grid ----

inline Tensor gap_forward(const Tensor& x) {
    if (x.rank() != 4 || x.dim(2) != model_dims::kCamSize || x.dim(3) != model_dims::kCamSize) {
        throw DimensionError("gap_forward: expected Bx Cx7x7 input, got " +
                             Tensor::shape_string(x.shape()));
    }
    const std::size_t batch = x.dim(0), ch = x.dim(1);
    const std::size_t spatial = model_dims::kCamSize * model_dims::kCamSize;
    Tensor y({batch, ch});
    const double inv = 1.0 / static_cast<double>(spatial);
    for (std::size_t bc = 0; bc < batch * ch; ++bc) {
        const double* xmap = x.data() + bc * spatial;
        double s = 0.0;
        for (std::size_t i = 0; i < spatial; ++i) s += xmap[i];
        y[bc] = s * inv;
    }
    return y;
}

inline Tensor gap_backward(const Tensor& d_y) {
    if (d_y.rank() != 2) {
        throw DimensionError("gap_backward: expected BxC gradient, got " +
                             Tensor::shape_string(d_y.shape()));
    }
    const std::size_t spatial = model_dims::kCamSize * model_dims::kCamSize;
    Tensor d_x({d_y.dim(0), d_y.dim(1), model_dims::kCamSize, model_dims::kCamSize});
    const double inv = 1.0 / static_cast<double>(spatial);
    for (std::size_t bc = 0; bc < d_y.size(); ++bc) {
        double* dxmap = d_x.data() + bc * spatial;
        const double v = d_y[bc] * inv;
        for (std::size_t i = 0; i < spatial; ++i) dxmap[i] = v;
    }
    return d_x;
}

// ---- linear ----

inline Tensor linear_forward(const LinearParams& p, const Tensor& x) {
    if (x.rank() != 2 || x.dim(1) != p.weights.dim(1)) {
        throw DimensionError("linear_forward: input " + Tensor::shape_string(x.shape()) +
                             " does not match weights " + Tensor::shape_string(p.weights.shape()));
    }
    const std::size_t batch = x.dim(0), in_dim = x.dim(1), out_dim = p.weights.dim(0);
    Tensor y({batch, out_dim});
    for (std::size_t b = 0; b < batch; ++b) {
        const double* xrow = x.data() + b * in_dim;
        double* yrow = y.data() + b * out_dim;
        for (std::size_t o = 0; o < out_dim; ++o) {
            const double* wrow = p.weights.data() + o * in_dim;
            double s = p.bias[o];
            for (std::size_t i = 0; i < in_dim; ++i) s += wrow[i] * xrow[i];
            yrow[o] = s;
        }
    }
    return y;
}

struct LinearGrads {
    Tensor d_input;
    Tensor d_weights;
    Tensor d_bias;
};

inline LinearGrads linear_backward(const LinearParams& p, const Tensor& x, const Tensor& d_y) {
    const std::size_t batch = x.dim(0), in_dim = x.dim(1), out_dim = p.weights.dim(0);
    if (d_y.rank() != 2 || d_y.dim(0) != batch || d_y.dim(1) != out_dim) {
        throw DimensionError("linear_backward: upstream gradient " +
                             Tensor::shape_string(d_y.shape()) + " does not match forward output");
    }
    LinearGrads g;
    g.d_input = Tensor(x.shape());
    g.d_weights = Tensor(p.weights.shape());
    g.d_bias = Tensor(p.bias.shape());
    for (std::size_t b = 0; b < batch; ++b) {
        const double* xrow = x.data() + b * in_dim;
        const double* dyrow = d_y.data() + b * out_dim;
        double* dxrow = g.d_input.data() + b * in_dim;
        for (std::size_t o = 0; o < out_dim; ++o) {
            const double dy = dyrow[o];
            g.d_bias[o] += dy;
            double* dwrow = g.d_weights.data() + o * in_dim;
            const double* wrow = p.weights.data() + o * in_dim;
            for (std::size_t i = 0; i < in_dim; ++i) {
                dwrow[i] += dy * xrow[i];
                dxrow[i] += dy * wrow[i];
            }
        }
    }
    return g;
}

// ---- the full model ----

struct ModelParams {
    Conv2dParams conv1; // 3 -> 16, 5x5, pad 2
    Conv2dParams conv2; // 16 -> 32, 5x5, pad 2
    Conv2dParams conv3; // 32 -> 64, 3x3, pad 1
    LinearParams head;  // 64 -> 10

    static ModelParams create_zero() {
        using namespace model_dims;
        ModelParams p;
        p.conv1 = Conv2dParams::create(kConv1Out, kInputChannels, 5, 2);
        p.conv2 = Conv2dParams::create(kConv2Out, kConv1Out, 5, 2);
        p.conv3 = Conv2dParams::create(kConv3Out, kConv2Out, 3, 1);
        p.head = LinearParams::create(kClasses, kFeatureDim);
        return p;
    }

    /// Seed-reproducible init: weights uniform in +-1/sqrt(fan_in), drawn
    /// from the kWeightInit child stream in layer order, biases zero.
    static ModelParams init(const SeededRng& run_rng) {
        ModelParams p = create_zero();
        SeededRng rng = run_rng.split(rng_keys::kWeightInit);
        auto fill = [&rng](Tensor& w, std::size_t fan_in) {
            const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
            for (std::size_t i = 0; i < w.size(); ++i) w[i] = rng.uniform(-bound, bound);
        };
        fill(p.conv1.weights, p.conv1.in_channels() * 5 * 5);
        fill(p.conv2.weights, p.conv2.in_channels() * 5 * 5);
        fill(p.conv3.weights, p.conv3.in_channels() * 3 * 3);
        fill(p.head.weights, model_dims::kFeatureDim);
        return p;
    }
};

// Fixed parameter order used by the optimizer, checkpoints, and tests.
inline std::vector<std::string> param_names() {
    return {"conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias",
            "conv3.weight", "conv3.bias", "head.weight",  "head.bias"};
}

inline std::vector<Tensor*> param_tensors(ModelParams& p) {
    return {&p.conv1.weights, &p.conv1.bias, &p.conv2.weights, &p.conv2.bias,
            &p.conv3.weights, &p.conv3.bias, &p.head.weights,  &p.head.bias};
}

inline std::vector<const Tensor*> param_tensors(const ModelParams& p) {
    return {&p.conv1.weights, &p.conv1.bias, &p.conv2.weights, &p.conv2.bias,
            &p.conv3.weights, &p.conv3.bias, &p.head.weights,  &p.head.bias};
}

struct ForwardCache {
    Tensor input;    // [B,3,28,28]
    Tensor act1;     // [B,16,28,28] post-ReLU
    Tensor pool1;    // [B,16,14,14]
    MaxPoolCache pool1_cache;
    Tensor act2;     // [B,32,14,14] post-ReLU
    Tensor pool2;    // [B,32,7,7]
    MaxPoolCache pool2_cache;
    Tensor features; // [B,64,7,7] post-ReLU, the CAM substrate
    Tensor gap;      // [B,64]
    Tensor logits;   // [B,10]

    std::size_t batch() const { return input.dim(0); }
};

inline void relu_inplace(Tensor& t) {
    for (std::size_t i = 0; i < t.size(); ++i)
        if (t[i] < 0.0) t[i] = 0.0;
}

inline ForwardCache model_forward(const ModelParams& p, const Tensor& x) {
    using namespace model_dims;
    if (x.rank() != 4 || x.dim(1) != kInputChannels || x.dim(2) != kImage || x.dim(3) != kImage) {
        throw DimensionError("model_forward: expected Bx3x28x28 input, got " +
                             Tensor::shape_string(x.shape()));
    }
    ForwardCache c;
    c.input = x;
    c.act1 = conv2d_forward(p.conv1, c.input);
    relu_inplace(c.act1);
    std::tie(c.pool1, c.pool1_cache) = maxpool2d_forward(c.act1);
    c.act2 = conv2d_forward(p.conv2, c.pool1);
    relu_inplace(c.act2);
    std::tie(c.pool2, c.pool2_cache) = maxpool2d_forward(c.act2);
    c.features = conv2d_forward(p.conv3, c.pool2);
    relu_inplace(c.features);
    c.gap = gap_forward(c.features);
    c.logits = linear_forward(p.head, c.gap);
    return c;
}

struct ModelGrads {
    Tensor conv1_w, conv1_b;
    Tensor conv2_w, conv2_b;
    Tensor conv3_w, conv3_b;
    Tensor head_w, head_b;

    static ModelGrads zeros_like(const ModelParams& p) {
        ModelGrads g;
        g.conv1_w = Tensor(p.conv1.weights.shape());
        g.conv1_b = Tensor(p.conv1.bias.shape());
        g.conv2_w = Tensor(p.conv2.weights.shape());
        g.conv2_b = Tensor(p.conv2.bias.shape());
        g.conv3_w = Tensor(p.conv3.weights.shape());
        g.conv3_b = Tensor(p.conv3.bias.shape());
        g.head_w = Tensor(p.head.weights.shape());
        g.head_b = Tensor(p.head.bias.shape());
        return g;
    }
};

inline std::vector<Tensor*> grad_tensors(ModelGrads& g) {
    return {&g.conv1_w, &g.conv1_b, &g.conv2_w, &g.conv2_b,
            &g.conv3_w, &g.conv3_b, &g.head_w,  &g.head_b};
}

inline std::vector<const Tensor*> grad_tensors(const ModelGrads& g) {
    return {&g.conv1_w, &g.conv1_b, &g.conv2_w, &g.conv2_b,
            &g.conv3_w, &g.conv3_b, &g.head_w,  &g.head_b};
}

/// Backward through the whole network. d_logits drives the classification
/// path; d_features_extra, when non-null, is added to the gradient reaching
/// the 64x7x7 features (the CAM path injects its contribution there).
/// Gradients are accumulated over the batch in example order.
inline ModelGrads model_backward(const ModelParams& p, const ForwardCache& c,
                                 const Tensor& d_logits,
                                 const Tensor* d_features_extra = nullptr) {
    if (!d_logits.same_shape(c.logits)) {
        throw DimensionError("model_backward: d_logits " +
                             Tensor::shape_string(d_logits.shape()) + " does not match logits");
    }
    ModelGrads g = ModelGrads::zeros_like(p);

    LinearGrads lg = linear_backward(p.head, c.gap, d_logits);
    g.head_w = std::move(lg.d_weights);
    g.head_b = std::move(lg.d_bias);

    Tensor d_feat = gap_backward(lg.d_input);
    if (d_features_extra != nullptr) {
        require_same_shape(*d_features_extra, d_feat, "model_backward");
        for (std::size_t i = 0; i < d_feat.size(); ++i) d_feat[i] += (*d_features_extra)[i];
    }
    // ReLU subgradient: 0 at exactly 0.
    for (std::size_t i = 0; i < d_feat.size(); ++i)
        if (c.features[i] <= 0.0) d_feat[i] = 0.0;

    Conv2dGrads c3 = conv2d_backward(p.conv3, c.pool2, d_feat);
    g.conv3_w = std::move(c3.d_weights);
    g.conv3_b = std::move(c3.d_bias);

    Tensor d_act2 = maxpool2d_backward(c.pool2_cache, c3.d_input);
    for (std::size_t i = 0; i < d_act2.size(); ++i)
        if (c.act2[i] <= 0.0) d_act2[i] = 0.0;

    Conv2dGrads c2 = conv2d_backward(p.conv2, c.pool1, d_act2);
    g.conv2_w = std::move(c2.d_weights);
    g.conv2_b = std::move(c2.d_bias);

    Tensor d_act1 = maxpool2d_backward(c.pool1_cache, c2.d_input);
    for (std::size_t i = 0; i < d_act1.size(); ++i)
        if (c.act1[i] <= 0.0) d_act1[i] = 0.0;

    Conv2dGrads c1 = conv2d_backward(p.conv1, c.input, d_act1, /*want_dx=*/false);
    g.conv1_w = std::move(c1.d_weights);
    g.conv1_b = std::move(c1.d_bias);

    return g;
}

// ---- CAM saliency ----

/// Normalized 7x7 saliency distribution: nonnegative, unit sum.
struct SaliencyMap {
    Tensor grid; // [7,7]
};

inline constexpr double kCamEpsilon = 1e-6;

/// CAM over single-example features A [64,7,7]: the class-c head weights
/// combine the channels, ReLU clips, and the eps-smoothed map is normalized
/// to a distribution. Differentiable w.r.t. A and head weights.
inline SaliencyMap cam_from_features(const Tensor& features, const LinearParams& head, int cls,
                                     double eps = kCamEpsilon) {
    using namespace model_dims;
    if (features.rank() != 3 || features.dim(0) != kFeatureDim || features.dim(1) != kCamSize ||
        features.dim(2) != kCamSize) {
        throw DimensionError("cam: expected 64x7x7 features, got " +
                             Tensor::shape_string(features.shape()));
    }
    if (cls < 0 || static_cast<std::size_t>(cls) >= kClasses) {
        throw IndexError("cam: class index " + std::to_string(cls) + " out of range");
    }
    const std::size_t spatial = kCamSize * kCamSize;
    Tensor raw({kCamSize, kCamSize});
    const double* wrow = head.weights.data() + static_cast<std::size_t>(cls) * kFeatureDim;
    for (std::size_t k = 0; k < kFeatureDim; ++k) {
        const double w = wrow[k];
        if (w == 0.0) continue;
        const double* amap = features.data() + k * spatial;
        for (std::size_t i = 0; i < spatial; ++i) raw[i] += w * amap[i];
    }
    double z = 0.0;
    for (std::size_t i = 0; i < spatial; ++i) {
        raw[i] = raw[i] > 0.0 ? raw[i] : 0.0;
        z += raw[i] + eps;
    }
    if (!(z > 0.0)) {
        throw DomainError("cam: normalizer is not positive (eps too small for all-zero map)");
    }
    SaliencyMap s;
    s.grid = Tensor({kCamSize, kCamSize});
    for (std::size_t i = 0; i < spatial; ++i) s.grid[i] = (raw[i] + eps) / z;
    return s;
}

inline SaliencyMap cam(const ForwardCache& cache, std::size_t example, const LinearParams& head,
                       int cls, double eps = kCamEpsilon) {
    using namespace model_dims;
    if (example >= cache.batch()) {
        throw IndexError("cam: example index " + std::to_string(example) + " out of batch");
    }
    const std::size_t spatial = kCamSize * kCamSize;
    Tensor features({kFeatureDim, kCamSize, kCamSize});
    const double* src = cache.features.data() + example * kFeatureDim * spatial;
    std::copy(src, src + features.size(), features.data());
    return cam_from_features(features, head, cls, eps);
}

struct CamVjp {
    Tensor d_features;    // [64,7,7]
    Tensor d_head_weights; // [64], gradient of the class-c head weight row
};

/// Pullback of d_saliency through the CAM map, recomputing the small
/// forward internally.
inline CamVjp cam_vjp(const Tensor& features, const LinearParams& head, int cls, double eps,
                      const Tensor& d_saliency) {
    using namespace model_dims;
    const std::size_t spatial = kCamSize * kCamSize;
    if (d_saliency.size() != spatial) {
        throw DimensionError("cam_vjp: expected 7x7 upstream gradient");
    }
    const double* wrow = head.weights.data() + static_cast<std::size_t>(cls) * kFeatureDim;

    Tensor raw({kCamSize, kCamSize});
    for (std::size_t k = 0; k < kFeatureDim; ++k) {
        const double w = wrow[k];
        if (w == 0.0) continue;
        const double* amap = features.data() + k * spatial;
        for (std::size_t i = 0; i < spatial; ++i) raw[i] += w * amap[i];
    }
    double z = 0.0;
    std::vector<double> clipped(spatial);
    for (std::size_t i = 0; i < spatial; ++i) {
        clipped[i] = raw[i] > 0.0 ? raw[i] : 0.0;
        z += clipped[i] + eps;
    }
    if (!(z > 0.0)) throw DomainError("cam_vjp: normalizer is not positive");

    // S_i = (m_i + eps) / z; dL/dm_j = (g_j - sum_i g_i S_i) / z, gated by
    // the ReLU mask (subgradient 0 at exactly 0).
    double weighted = 0.0;
    for (std::size_t i = 0; i < spatial; ++i)
        weighted += d_saliency[i] * (clipped[i] + eps) / z;
    std::vector<double> d_raw(spatial, 0.0);
    for (std::size_t i = 0; i < spatial; ++i) {
        if (raw[i] > 0.0) d_raw[i] = (d_saliency[i] - weighted) / z;
    }

    CamVjp out;
    out.d_features = Tensor({kFeatureDim, kCamSize, kCamSize});
    out.d_head_weights = Tensor({kFeatureDim});
    for (std::size_t k = 0; k < kFeatureDim; ++k) {
        const double w = wrow[k];
        const double* amap = features.data() + k * spatial;
        double* dmap = out.d_features.data() + k * spatial;
        double hw_acc = 0.0;
        for (std::size_t i = 0; i < spatial; ++i) {
            dmap[i] = w * d_raw[i];
            hw_acc += d_raw[i] * amap[i];
        }
        out.d_head_weights[k] = hw_acc;
    }
    return out;
}

} // namespace attnalign
