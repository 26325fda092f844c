#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "attnalign/nn.hpp"
#include "attnalign/tensor.hpp"

using namespace attnalign;

namespace {

// Straight-from-the-definition convolution: out[b,oc,oh,ow] =
// bias[oc] + sum_{ic,ky,kx} w[oc,ic,ky,kx] * xpad[b,ic,oh+ky,ow+kx].
Tensor conv_reference(const Conv2dParams& p, const Tensor& x) {
    const std::size_t B = x.dim(0), IC = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t OC = p.out_channels(), KH = p.kernel_h(), KW = p.kernel_w();
    const std::size_t OH = H + 2 * p.pad - KH + 1, OW = W + 2 * p.pad - KW + 1;
    Tensor y({B, OC, OH, OW});
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t oc = 0; oc < OC; ++oc)
            for (std::size_t oh = 0; oh < OH; ++oh)
                for (std::size_t ow = 0; ow < OW; ++ow) {
                    double acc = p.bias[oc];
                    for (std::size_t ic = 0; ic < IC; ++ic)
                        for (std::size_t ky = 0; ky < KH; ++ky)
                            for (std::size_t kx = 0; kx < KW; ++kx) {
                                const std::ptrdiff_t ih =
                                    static_cast<std::ptrdiff_t>(oh + ky) -
                                    static_cast<std::ptrdiff_t>(p.pad);
                                const std::ptrdiff_t iw =
                                    static_cast<std::ptrdiff_t>(ow + kx) -
                                    static_cast<std::ptrdiff_t>(p.pad);
                                if (ih < 0 || iw < 0 || ih >= static_cast<std::ptrdiff_t>(H) ||
                                    iw >= static_cast<std::ptrdiff_t>(W))
                                    continue;
                                acc += p.weights.at4(oc, ic, ky, kx) *
                                       x.at4(b, ic, static_cast<std::size_t>(ih),
                                             static_cast<std::size_t>(iw));
                            }
                    y.at4(b, oc, oh, ow) = acc;
                }
    return y;
}

bool grad_close(double got, double want, double rel_tol = 1e-4, double abs_tol = 1e-9) {
    const double denom = std::max(std::abs(want), 1e-6);
    return std::abs(got - want) / denom < rel_tol || std::abs(got - want) < abs_tol;
}

Conv2dParams random_conv(SeededRng& rng, std::size_t oc, std::size_t ic, std::size_t k,
                         std::size_t pad) {
    Conv2dParams p = Conv2dParams::create(oc, ic, k, pad);
    p.weights = random_uniform(p.weights.shape(), rng, -1.0, 1.0);
    p.bias = random_uniform(p.bias.shape(), rng, -0.5, 0.5);
    return p;
}

} // namespace

TEST(Conv2d, MatchesBruteForceOracle) {
    SeededRng rng(101);
    for (int draw = 0; draw < 25; ++draw) {
        const std::size_t B = 1 + rng.next_below(2);
        const std::size_t IC = 1 + rng.next_below(3);
        const std::size_t OC = 1 + rng.next_below(3);
        const std::size_t k = 1 + 2 * rng.next_below(3); // 1, 3, 5
        const std::size_t pad = rng.next_below(3);
        const std::size_t H = k + 2 + rng.next_below(4);
        const std::size_t W = k + 2 + rng.next_below(4);
        Conv2dParams p = random_conv(rng, OC, IC, k, pad);
        Tensor x = random_uniform({B, IC, H, W}, rng, -1.0, 1.0);

        Tensor got = conv2d_forward(p, x);
        Tensor want = conv_reference(p, x);
        ASSERT_EQ(got.shape(), want.shape());
        for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
    }
}

TEST(Conv2d, ShapeErrors) {
    Conv2dParams p = Conv2dParams::create(4, 3, 5, 2);
    EXPECT_THROW(conv2d_forward(p, Tensor({1, 2, 8, 8})), DimensionError); // wrong channels
    EXPECT_THROW(conv2d_forward(p, Tensor({3, 8, 8})), DimensionError);    // wrong rank
    Conv2dParams q = Conv2dParams::create(1, 1, 5, 0);
    EXPECT_THROW(conv2d_forward(q, Tensor({1, 1, 3, 3})), DimensionError); // kernel too big
}

TEST(Conv2d, BackwardMatchesFiniteDifferences) {
    SeededRng rng(202);
    for (int draw = 0; draw < 20; ++draw) {
        const std::size_t IC = 1 + rng.next_below(2);
        const std::size_t OC = 1 + rng.next_below(2);
        const std::size_t k = 1 + 2 * rng.next_below(2); // 1 or 3
        const std::size_t pad = rng.next_below(2);
        const std::size_t H = k + 2 + rng.next_below(3);
        const std::size_t W = k + 2 + rng.next_below(3);
        Conv2dParams p = random_conv(rng, OC, IC, k, pad);
        Tensor x = random_uniform({1, IC, H, W}, rng, -1.0, 1.0);
        Tensor y = conv2d_forward(p, x);
        // fixed random co-tangent defines the scalar loss sum(dY .* conv(x))
        Tensor dy = random_uniform(y.shape(), rng, -1.0, 1.0);

        Conv2dGrads g = conv2d_backward(p, x, dy);

        auto loss_with_w = [&](const Tensor& w) {
            Conv2dParams q = p;
            q.weights = w;
            return sum(mul(conv2d_forward(q, x), dy));
        };
        Tensor fd_w = finite_diff_gradient(loss_with_w, p.weights);
        for (std::size_t i = 0; i < fd_w.size(); ++i)
            EXPECT_TRUE(grad_close(g.d_weights[i], fd_w[i]))
                << "dW draw " << draw << " idx " << i << ": " << g.d_weights[i] << " vs "
                << fd_w[i];

        auto loss_with_b = [&](const Tensor& b) {
            Conv2dParams q = p;
            q.bias = b;
            return sum(mul(conv2d_forward(q, x), dy));
        };
        Tensor fd_b = finite_diff_gradient(loss_with_b, p.bias);
        for (std::size_t i = 0; i < fd_b.size(); ++i)
            EXPECT_TRUE(grad_close(g.d_bias[i], fd_b[i])) << "dB draw " << draw << " idx " << i;

        auto loss_with_x = [&](const Tensor& xin) {
            return sum(mul(conv2d_forward(p, xin), dy));
        };
        Tensor fd_x = finite_diff_gradient(loss_with_x, x);
        for (std::size_t i = 0; i < fd_x.size(); ++i)
            EXPECT_TRUE(grad_close(g.d_input[i], fd_x[i])) << "dX draw " << draw << " idx " << i;
    }
}

TEST(MaxPool, ForwardAndTieBreak) {
    Tensor x({1, 1, 4, 4});
    for (std::size_t i = 0; i < 16; ++i) x[i] = static_cast<double>(i);
    auto [y, cache] = maxpool2d_forward(x);
    ASSERT_EQ(y.shape(), (std::vector<std::size_t>{1, 1, 2, 2}));
    EXPECT_EQ(y.at4(0, 0, 0, 0), 5.0);
    EXPECT_EQ(y.at4(0, 0, 0, 1), 7.0);
    EXPECT_EQ(y.at4(0, 0, 1, 0), 13.0);
    EXPECT_EQ(y.at4(0, 0, 1, 1), 15.0);

    // all-equal window: the first cell in row-major order must win
    Tensor t = Tensor::full({1, 1, 2, 2}, 3.0);
    auto [yt, ct] = maxpool2d_forward(t);
    EXPECT_EQ(yt[0], 3.0);
    EXPECT_EQ(ct.argmax[0], 0);

    Tensor dy({1, 1, 1, 1}, {2.5});
    Tensor dx = maxpool2d_backward(ct, dy);
    EXPECT_EQ(dx[0], 2.5);
    EXPECT_EQ(dx[1], 0.0);
    EXPECT_EQ(dx[2], 0.0);
    EXPECT_EQ(dx[3], 0.0);

    EXPECT_THROW(maxpool2d_forward(Tensor({1, 1, 3, 4})), DimensionError);
}

TEST(MaxPool, MatchesBruteForce) {
    SeededRng rng(303);
    for (int draw = 0; draw < 20; ++draw) {
        Tensor x = random_uniform({2, 3, 8, 6}, rng, -1.0, 1.0);
        auto [y, cache] = maxpool2d_forward(x);
        for (std::size_t b = 0; b < 2; ++b)
            for (std::size_t c = 0; c < 3; ++c)
                for (std::size_t oh = 0; oh < 4; ++oh)
                    for (std::size_t ow = 0; ow < 3; ++ow) {
                        double m = -1e300;
                        for (std::size_t dy = 0; dy < 2; ++dy)
                            for (std::size_t dx = 0; dx < 2; ++dx)
                                m = std::max(m, x.at4(b, c, 2 * oh + dy, 2 * ow + dx));
                        EXPECT_EQ(y.at4(b, c, oh, ow), m);
                    }

        // backward spreads each upstream value to exactly one input cell
        Tensor dy = random_uniform(y.shape(), rng, -1.0, 1.0);
        Tensor dx = maxpool2d_backward(cache, dy);
        EXPECT_NEAR(sum(dx), sum(dy), 1e-12);
    }
}

TEST(Gap, ForwardBackward) {
    EXPECT_NEAR(sum(sub(gap_forward(Tensor::ones({1, 64, 7, 7})), Tensor::ones({1, 64}))), 0.0,
                1e-13);

    Tensor x({1, 2, 7, 7});
    x.at4(0, 1, 3, 4) = 49.0;
    Tensor y = gap_forward(x);
    EXPECT_EQ(y.at2(0, 0), 0.0);
    EXPECT_NEAR(y.at2(0, 1), 1.0, 1e-15);

    EXPECT_THROW(gap_forward(Tensor({1, 2, 8, 8})), DimensionError);

    SeededRng rng(404);
    Tensor xin = random_uniform({1, 3, 7, 7}, rng, -1.0, 1.0);
    Tensor dy = random_uniform({1, 3}, rng, -1.0, 1.0);
    Tensor dx = gap_backward(dy);
    Tensor fd = finite_diff_gradient(
        [&](const Tensor& t) { return sum(mul(gap_forward(t), dy)); }, xin);
    for (std::size_t i = 0; i < fd.size(); ++i) EXPECT_NEAR(dx[i], fd[i], 1e-6);
}

TEST(Linear, ForwardBackward) {
    LinearParams id = LinearParams::create(3, 3);
    id.weights.at2(0, 0) = id.weights.at2(1, 1) = id.weights.at2(2, 2) = 1.0;
    SeededRng rng(505);
    Tensor x = random_uniform({2, 3}, rng, -1.0, 1.0);
    Tensor y = linear_forward(id, x);
    for (std::size_t i = 0; i < y.size(); ++i) EXPECT_EQ(y[i], x[i]);

    LinearParams p = LinearParams::create(4, 3);
    p.weights = random_uniform(p.weights.shape(), rng, -1.0, 1.0);
    p.bias = random_uniform(p.bias.shape(), rng, -1.0, 1.0);
    Tensor zero({1, 3});
    Tensor yb = linear_forward(p, zero);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(yb[i], p.bias[i]);

    Tensor xin = random_uniform({2, 3}, rng, -1.0, 1.0);
    Tensor dy = random_uniform({2, 4}, rng, -1.0, 1.0);
    LinearGrads g = linear_backward(p, xin, dy);

    Tensor fd_w = finite_diff_gradient(
        [&](const Tensor& w) {
            LinearParams q = p;
            q.weights = w;
            return sum(mul(linear_forward(q, xin), dy));
        },
        p.weights);
    for (std::size_t i = 0; i < fd_w.size(); ++i) EXPECT_NEAR(g.d_weights[i], fd_w[i], 1e-6);

    Tensor fd_x = finite_diff_gradient(
        [&](const Tensor& t) { return sum(mul(linear_forward(p, t), dy)); }, xin);
    for (std::size_t i = 0; i < fd_x.size(); ++i) EXPECT_NEAR(g.d_input[i], fd_x[i], 1e-6);

    EXPECT_THROW(linear_forward(p, Tensor({1, 5})), DimensionError);
}

TEST(Model, ZeroNetworkAndPurity) {
    ModelParams p = ModelParams::create_zero();
    p.head.bias = Tensor({10}, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9});
    Tensor x({1, 3, 28, 28});
    ForwardCache c = model_forward(p, x);
    for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(c.logits[i], static_cast<double>(i));

    SeededRng rng(606);
    ModelParams q = ModelParams::init(rng);
    Tensor xr = random_uniform({2, 3, 28, 28}, rng, 0.0, 1.0);
    ForwardCache c1 = model_forward(q, xr);
    ForwardCache c2 = model_forward(q, xr);
    for (std::size_t i = 0; i < c1.logits.size(); ++i) EXPECT_EQ(c1.logits[i], c2.logits[i]);

    EXPECT_THROW(model_forward(q, Tensor({1, 3, 27, 28})), DimensionError);
}

TEST(Model, BatchIndependence) {
    SeededRng rng(707);
    ModelParams p = ModelParams::init(rng);
    Tensor x2 = random_uniform({2, 3, 28, 28}, rng, 0.0, 1.0);
    Tensor x0({1, 3, 28, 28}), x1({1, 3, 28, 28});
    std::copy(x2.data(), x2.data() + x0.size(), x0.data());
    std::copy(x2.data() + x0.size(), x2.data() + 2 * x0.size(), x1.data());

    ForwardCache cb = model_forward(p, x2);
    ForwardCache ca = model_forward(p, x0);
    ForwardCache cc = model_forward(p, x1);
    for (std::size_t i = 0; i < 10; ++i) {
        EXPECT_NEAR(cb.logits[i], ca.logits[i], 1e-12);
        EXPECT_NEAR(cb.logits[10 + i], cc.logits[i], 1e-12);
    }
}

namespace {

// Independent mean softmax cross entropy used as the finite-difference loss.
double ce_loss_oracle(const Tensor& logits, const std::vector<int>& labels) {
    const std::size_t B = logits.dim(0), C = logits.dim(1);
    double total = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
        double m = logits.at2(b, 0);
        for (std::size_t c = 1; c < C; ++c) m = std::max(m, logits.at2(b, c));
        double lse = 0.0;
        for (std::size_t c = 0; c < C; ++c) lse += std::exp(logits.at2(b, c) - m);
        lse = m + std::log(lse);
        total += lse - logits.at2(b, static_cast<std::size_t>(labels[b]));
    }
    return total / static_cast<double>(B);
}

} // namespace

TEST(Model, BackwardMatchesFiniteDifferencesOnSampledParams) {
    SeededRng rng(1313);
    ModelParams p = ModelParams::init(rng);
    Tensor x = random_uniform({2, 3, 28, 28}, rng, 0.0, 1.0);
    const std::vector<int> labels = {3, 7};

    ForwardCache c = model_forward(p, x);
    Tensor d_logits({2, 10});
    for (std::size_t b = 0; b < 2; ++b) {
        double m = c.logits.at2(b, 0);
        for (std::size_t k = 1; k < 10; ++k) m = std::max(m, c.logits.at2(b, k));
        double z = 0.0;
        for (std::size_t k = 0; k < 10; ++k) z += std::exp(c.logits.at2(b, k) - m);
        for (std::size_t k = 0; k < 10; ++k)
            d_logits.at2(b, k) = std::exp(c.logits.at2(b, k) - m) / z / 2.0;
        d_logits.at2(b, static_cast<std::size_t>(labels[b])) -= 0.5;
    }
    ModelGrads g = model_backward(p, c, d_logits);

    auto names = param_names();
    auto grads = grad_tensors(g);
    for (int s = 0; s < 25; ++s) {
        const std::size_t t = rng.next_below(8);
        ModelParams q = p;
        Tensor* target = param_tensors(q)[t];
        const std::size_t i = rng.next_below(target->size());
        const double orig = (*target)[i];
        const double h = 1e-5;
        (*target)[i] = orig + h;
        const double fp = ce_loss_oracle(model_forward(q, x).logits, labels);
        (*target)[i] = orig - h;
        const double fm = ce_loss_oracle(model_forward(q, x).logits, labels);
        const double fd = (fp - fm) / (2.0 * h);
        const double got = (*grads[t])[i];
        EXPECT_TRUE(grad_close(got, fd, 1e-3, 1e-8))
            << names[t] << "[" << i << "]: " << got << " vs " << fd;
    }
}

TEST(Model, InitIsSeedDeterministicAndBounded) {
    SeededRng a(9), b(9), c(10);
    ModelParams pa = ModelParams::init(a);
    ModelParams pb = ModelParams::init(b);
    ModelParams pc = ModelParams::init(c);
    auto ta = param_tensors(pa);
    auto tb = param_tensors(pb);
    auto tc = param_tensors(pc);
    bool any_diff = false;
    for (std::size_t t = 0; t < ta.size(); ++t) {
        for (std::size_t i = 0; i < ta[t]->size(); ++i) {
            EXPECT_EQ((*ta[t])[i], (*tb[t])[i]);
            if ((*ta[t])[i] != (*tc[t])[i]) any_diff = true;
        }
    }
    EXPECT_TRUE(any_diff);

    const double bound1 = 1.0 / std::sqrt(3.0 * 5 * 5);
    for (std::size_t i = 0; i < pa.conv1.weights.size(); ++i) {
        EXPECT_LE(std::abs(pa.conv1.weights[i]), bound1);
    }
    EXPECT_EQ(sum(pa.conv1.bias), 0.0);
    EXPECT_EQ(sum(pa.head.bias), 0.0);
}

TEST(Cam, UniformWhenHeadRowZero) {
    SeededRng rng(808);
    Tensor feats = relu(random_uniform({64, 7, 7}, rng, -1.0, 1.0));
    LinearParams head = LinearParams::create(10, 64); // all-zero weights
    SaliencyMap s = cam_from_features(feats, head, 3);
    for (std::size_t i = 0; i < 49; ++i) EXPECT_NEAR(s.grid[i], 1.0 / 49.0, 1e-12);
}

TEST(Cam, SingleChannelCase) {
    Tensor feats({64, 7, 7});
    SeededRng rng(909);
    for (std::size_t i = 0; i < 49; ++i) feats[5 * 49 + i] = rng.uniform(-0.5, 1.0);
    LinearParams head = LinearParams::create(10, 64);
    head.weights.at2(2, 5) = 1.0;
    const double eps = 1e-9;
    SaliencyMap s = cam_from_features(feats, head, 2, eps);
    double z = 0.0;
    for (std::size_t i = 0; i < 49; ++i) z += std::max(0.0, feats[5 * 49 + i]) + eps;
    for (std::size_t i = 0; i < 49; ++i) {
        EXPECT_NEAR(s.grid[i], (std::max(0.0, feats[5 * 49 + i]) + eps) / z, 1e-12);
    }
}

TEST(Cam, DistributionContractOverRandomInputs) {
    SeededRng rng(1010);
    for (int draw = 0; draw < 200; ++draw) {
        Tensor feats = relu(random_uniform({64, 7, 7}, rng, -1.0, 1.0));
        LinearParams head = LinearParams::create(10, 64);
        head.weights = random_uniform(head.weights.shape(), rng, -1.0, 1.0);
        const int cls = static_cast<int>(rng.next_below(10));
        SaliencyMap s = cam_from_features(feats, head, cls);
        double z = 0.0;
        for (std::size_t i = 0; i < 49; ++i) {
            EXPECT_GE(s.grid[i], 0.0);
            z += s.grid[i];
        }
        EXPECT_NEAR(z, 1.0, 1e-9);
    }
}

TEST(Cam, InvariantUnderPositiveScalingOfHeadRow) {
    SeededRng rng(1111);
    Tensor feats = relu(random_uniform({64, 7, 7}, rng, 0.0, 1.0));
    LinearParams head = LinearParams::create(10, 64);
    head.weights = random_uniform(head.weights.shape(), rng, 0.0, 1.0); // positive raw map
    SaliencyMap s1 = cam_from_features(feats, head, 4, 0.0);
    LinearParams scaled = head;
    // power-of-two factor keeps every intermediate exact, so the normalized
    // map must be bit-identical
    for (std::size_t k = 0; k < 64; ++k) scaled.weights.at2(4, k) *= 16.0;
    SaliencyMap s2 = cam_from_features(feats, scaled, 4, 0.0);
    for (std::size_t i = 0; i < 49; ++i) EXPECT_EQ(s1.grid[i], s2.grid[i]);

    EXPECT_THROW(cam_from_features(feats, head, 10), IndexError);
    EXPECT_THROW(cam_from_features(feats, head, -1), IndexError);
}

TEST(Cam, VjpMatchesFiniteDifferences) {
    SeededRng rng(1212);
    int accepted = 0;
    for (int attempt = 0; accepted < 20 && attempt < 200; ++attempt) {
        Tensor feats = relu(random_uniform({64, 7, 7}, rng, -0.5, 1.0));
        LinearParams head = LinearParams::create(10, 64);
        head.weights = random_uniform(head.weights.shape(), rng, -0.3, 0.3);
        const int cls = static_cast<int>(rng.next_below(10));
        const double eps = 1e-6;
        Tensor dS = random_uniform({7, 7}, rng, -1.0, 1.0);

        // skip draws where some raw map cell sits on the ReLU kink; central
        // differences straddle it and stop measuring the subgradient
        double margin = 1e300;
        for (std::size_t i = 0; i < 49; ++i) {
            double r = 0.0;
            for (std::size_t k = 0; k < 64; ++k)
                r += head.weights.at2(static_cast<std::size_t>(cls), k) * feats[k * 49 + i];
            margin = std::min(margin, std::abs(r));
        }
        if (margin < 1e-4) continue;
        ++accepted;
        const int draw = accepted;

        CamVjp vjp = cam_vjp(feats, head, cls, eps, dS);

        Tensor fd_a = finite_diff_gradient(
            [&](const Tensor& a) {
                return sum(mul(cam_from_features(a, head, cls, eps).grid, dS));
            },
            feats, 1e-6);
        for (std::size_t i = 0; i < fd_a.size(); ++i)
            EXPECT_TRUE(grad_close(vjp.d_features[i], fd_a[i], 1e-3, 1e-7))
                << "dA draw " << draw << " idx " << i << ": " << vjp.d_features[i] << " vs "
                << fd_a[i];

        // head row gradient via a probe on the full weight matrix
        Tensor fd_w = finite_diff_gradient(
            [&](const Tensor& w) {
                LinearParams h2 = head;
                h2.weights = w;
                return sum(mul(cam_from_features(feats, h2, cls, eps).grid, dS));
            },
            head.weights, 1e-6);
        for (std::size_t k = 0; k < 64; ++k) {
            EXPECT_TRUE(grad_close(vjp.d_head_weights[k],
                                   fd_w.at2(static_cast<std::size_t>(cls), k), 1e-3, 1e-7));
        }
    }
    EXPECT_EQ(accepted, 20);
}
