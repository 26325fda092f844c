// Measures single-example forward/backward/step throughput of the model on
// random data; handy for sizing experiment budgets on a new machine.
#include <chrono>
#include <cstdio>

#include "attnalign/attnalign.hpp"

using namespace attnalign;

int main() {
    SeededRng rng(7);
    ModelParams params = ModelParams::init(rng);
    SgdConfig sgd;
    SgdState state = SgdState::init(params, sgd);

    const std::size_t batch = 32;
    Tensor x = random_uniform({batch, 3, 28, 28}, rng, 0.0, 1.0);
    std::vector<int> labels(batch);
    for (std::size_t i = 0; i < batch; ++i) labels[i] = static_cast<int>(rng.next_below(10));
    Tensor teacher_grid({7, 7});
    for (std::size_t i = 0; i < teacher_grid.size(); ++i) teacher_grid[i] = 1.0 / 49.0;

    const int iters = 20;
    auto t0 = std::chrono::steady_clock::now();
    double sink = 0.0;
    for (int it = 0; it < iters; ++it) {
        ForwardCache cache = model_forward(params, x);
        CeResult ce = cross_entropy(cache.logits, labels);
        Tensor d_feat(cache.features.shape());
        Tensor features_j({64, 7, 7});
        for (std::size_t j = 0; j < batch; ++j) {
            const double* src = cache.features.data() + j * 64 * 49;
            std::copy(src, src + features_j.size(), features_j.data());
            SaliencyMap s = cam_from_features(features_j, params.head, labels[j], 1e-6);
            AttnLossResult kl = attention_loss(s.grid, teacher_grid);
            sink += kl.loss;
            for (std::size_t i = 0; i < kl.d_s.size(); ++i) kl.d_s[i] /= double(batch);
            CamVjp vjp = cam_vjp(features_j, params.head, labels[j], 1e-6, kl.d_s);
            double* dst = d_feat.data() + j * 64 * 49;
            for (std::size_t i = 0; i < vjp.d_features.size(); ++i) dst[i] += vjp.d_features[i];
        }
        ModelGrads grads = model_backward(params, cache, ce.d_logits, &d_feat);
        sgd_step(params, grads, state, sgd);
        sink += ce.loss;
    }
    auto t1 = std::chrono::steady_clock::now();
    const double sec = std::chrono::duration<double>(t1 - t0).count();
    const double per_example_ms = sec / iters / double(batch) * 1000.0;
    std::printf("%d steps of batch %zu in %.3f s -> %.3f ms/example (sink %.3f)\n", iters, batch,
                sec, per_example_ms, sink);
    return 0;
}
