#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "attnalign/checkpoint.hpp"
#include "attnalign/data.hpp"
#include "attnalign/errors.hpp"
#include "attnalign/nn.hpp"
#include "attnalign/optim.hpp"
#include "attnalign/rng.hpp"
#include "attnalign/teacher.hpp"
#include "attnalign/tensor.hpp"

namespace attnalign {

// ---- losses ----

struct CeResult {
    double loss = 0.0;
    Tensor d_logits; // already divided by B
};

/// Mean negative log-softmax of the true class, max-subtraction stabilized.
inline CeResult cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
    if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
        throw DimensionError("cross_entropy: logits " + Tensor::shape_string(logits.shape()) +
                             " do not match " + std::to_string(labels.size()) + " labels");
    }
    const std::size_t batch = logits.dim(0), classes = logits.dim(1);
    CeResult out;
    out.d_logits = Tensor(logits.shape());
    const double inv_b = 1.0 / static_cast<double>(batch);
    for (std::size_t b = 0; b < batch; ++b) {
        if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= classes) {
            throw IndexError("cross_entropy: label " + std::to_string(labels[b]) +
                             " out of range at example " + std::to_string(b));
        }
        const double* row = logits.data() + b * classes;
        double mx = row[0];
        for (std::size_t c = 1; c < classes; ++c) mx = std::max(mx, row[c]);
        double z = 0.0;
        for (std::size_t c = 0; c < classes; ++c) z += std::exp(row[c] - mx);
        const double log_z = std::log(z) + mx;
        out.loss += (log_z - row[static_cast<std::size_t>(labels[b])]) * inv_b;
        double* drow = out.d_logits.data() + b * classes;
        for (std::size_t c = 0; c < classes; ++c) {
            const double softmax = std::exp(row[c] - log_z);
            drow[c] = (softmax - (static_cast<int>(c) == labels[b] ? 1.0 : 0.0)) * inv_b;
        }
    }
    return out;
}

struct AttnLossResult {
    double loss = 0.0;
    Tensor d_s; // gradient into S for this single example, unscaled
};

/// KL(S || M) for one example; both must be strictly positive unit-sum maps
/// (the caller's eps smoothing guarantees this). M is a constant target.
inline AttnLossResult attention_loss(const Tensor& s, const Tensor& m) {
    require_same_shape(s, m, "attention_loss");
    AttnLossResult out;
    out.d_s = Tensor(s.shape());
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (!(s[i] > 0.0) || !(m[i] > 0.0)) {
            throw DomainError("attention_loss: nonpositive entry at index " + std::to_string(i) +
                              " (missing eps smoothing?)");
        }
        const double log_ratio = std::log(s[i]) - std::log(m[i]);
        out.loss += s[i] * log_ratio;
        out.d_s[i] = log_ratio + 1.0;
    }
    return out;
}

// ---- schedule ----

enum class Phase { attention, joint };

inline const char* phase_name(Phase p) { return p == Phase::attention ? "attention" : "joint"; }

struct TrainConfig {
    DatasetKind dataset = DatasetKind::colored;
    double lambda0 = 160.0;
    std::size_t e_attn = 11;
    std::size_t epochs = 30;
    std::size_t batch_size = 32;
    SgdConfig sgd;
    std::uint64_t seed = 0;
    MorphParams morph;
    double eps_kl = 1e-6;
};

inline double default_lr(DatasetKind kind) {
    return kind == DatasetKind::colored ? 1e-3 : 1e-2;
}

inline TrainConfig default_train_config(DatasetKind kind) {
    TrainConfig cfg;
    cfg.dataset = kind;
    cfg.sgd.initial_lr = default_lr(kind);
    if (kind == DatasetKind::decoy) {
        cfg.lambda0 = 8.0;
        cfg.e_attn = 13;
        cfg.morph.edge_band = false;
    }
    return cfg;
}

/// The lambda ramp: lambda_e = lambda0 * (1 + 0.1*(e - E_attn)) for e >= E_attn.
inline double lambda_at(std::size_t epoch, const TrainConfig& cfg) {
    if (epoch < cfg.e_attn) {
        throw DomainError("lambda_at: epoch " + std::to_string(epoch) +
                          " is in the attention phase, no lambda is defined");
    }
    return cfg.lambda0 * (1.0 + 0.1 * static_cast<double>(epoch - cfg.e_attn));
}

struct EpochMetrics {
    std::size_t epoch = 0;
    Phase phase = Phase::attention;
    double lambda_effective = std::numeric_limits<double>::quiet_NaN(); // joint only
    double train_ce = std::numeric_limits<double>::quiet_NaN();         // joint only
    double train_attn = 0.0;
    double val_acc = 0.0;
    double val_attn = 0.0;
    double optim_value = 0.0;
    double current_lr = 0.0;
};

inline double optim_value(double val_acc, double val_attn) {
    return val_acc * (1.0 - val_attn);
}

struct TrainReport {
    TrainConfig config;
    std::vector<EpochMetrics> per_epoch;
    double final_test_acc = 0.0;
    double best_optim_value = -std::numeric_limits<double>::infinity();
    std::string checkpoint_path;
};

// ---- evaluation ----

struct EvalResult {
    double accuracy = 0.0;
    double mean_attn = std::numeric_limits<double>::quiet_NaN();
};

/// Accuracy by logits argmax (ties to the smallest class index) and, when
/// 7x7 teachers are supplied, the mean KL of the true-class CAM to them.
inline EvalResult evaluate(const ModelParams& params, const std::vector<BiasedExample>& examples,
                           const std::vector<TeacherMap>* teachers = nullptr,
                           double eps_kl = 1e-6, std::size_t eval_batch = 64) {
    if (teachers != nullptr && teachers->size() != examples.size()) {
        throw ConfigError("evaluate: " + std::to_string(teachers->size()) + " teachers for " +
                          std::to_string(examples.size()) + " examples");
    }
    EvalResult out;
    if (examples.empty()) return out;
    std::size_t correct = 0;
    double attn_sum = 0.0;
    for (std::size_t start = 0; start < examples.size(); start += eval_batch) {
        const std::size_t b = std::min(eval_batch, examples.size() - start);
        Tensor x({b, 3, 28, 28});
        for (std::size_t j = 0; j < b; ++j) {
            const Tensor& img = examples[start + j].image;
            std::copy(img.data(), img.data() + img.size(), x.data() + j * img.size());
        }
        ForwardCache cache = model_forward(params, x);
        for (std::size_t j = 0; j < b; ++j) {
            const double* row = cache.logits.data() + j * model_dims::kClasses;
            std::size_t arg = 0;
            for (std::size_t c = 1; c < model_dims::kClasses; ++c) {
                if (row[c] > row[arg]) arg = c;
            }
            if (static_cast<int>(arg) == examples[start + j].label) ++correct;
            if (teachers != nullptr) {
                const SaliencyMap s =
                    cam(cache, j, params.head, examples[start + j].label, eps_kl);
                attn_sum += attention_loss(s.grid, (*teachers)[start + j].grid).loss;
            }
        }
    }
    out.accuracy = static_cast<double>(correct) / static_cast<double>(examples.size());
    if (teachers != nullptr) {
        out.mean_attn = attn_sum / static_cast<double>(examples.size());
    }
    return out;
}

// ---- the two-phase training loop ----

struct TrainHooks {
    // Fires after any reset, before the epoch's first step.
    std::function<void(std::size_t epoch, Phase phase, double lambda, const SgdState& state,
                       const ModelParams& params)>
        on_epoch_start;
    std::function<void(const EpochMetrics& metrics, const ModelParams& params)> on_epoch_end;
};

namespace train_detail {

struct StepOutcome {
    double ce = std::numeric_limits<double>::quiet_NaN();
    double attn = 0.0; // batch mean KL
};

/// L2 bound on a batch gradient whenever the attention path contributes.
/// The eps-floored KL emits rare spike batches (a log-ratio reaches
/// |log eps| per cell, so norms run 50-3000x the mean); momentum 0.98 turns
/// one spike into a ~50x weight displacement that can kill the run. Pure-CE
/// gradients are never touched.
inline constexpr double kAttnGradClipNorm = 1.0;

/// One optimizer step on one batch. In the attention phase the CE path is
/// skipped entirely; in the joint phase the attention gradient is scaled by
/// lambda and skipped exactly when lambda == 0 so a zero-lambda run is
/// bit-identical to plain CE training.
inline StepOutcome train_step(ModelParams& params, SgdState& state, const TrainConfig& cfg,
                              Phase phase, double lambda,
                              const std::vector<BiasedExample>& examples,
                              const std::vector<TeacherMap>& teachers,
                              const std::vector<std::size_t>& batch_idx) {
    using namespace model_dims;
    const std::size_t b = batch_idx.size();
    Tensor x({b, kInputChannels, kImage, kImage});
    std::vector<int> labels(b);
    for (std::size_t j = 0; j < b; ++j) {
        const BiasedExample& ex = examples[batch_idx[j]];
        std::copy(ex.image.data(), ex.image.data() + ex.image.size(),
                  x.data() + j * ex.image.size());
        labels[j] = ex.label;
    }

    ForwardCache cache = model_forward(params, x);

    StepOutcome out;
    Tensor d_logits(cache.logits.shape());
    if (phase == Phase::joint) {
        CeResult ce = cross_entropy(cache.logits, labels);
        out.ce = ce.loss;
        d_logits = std::move(ce.d_logits);
    }

    const bool attn_grad = phase == Phase::attention || lambda != 0.0;
    const double scale =
        (phase == Phase::attention ? 1.0 : lambda) / static_cast<double>(b);
    Tensor d_feat_extra;
    Tensor d_head_extra;
    if (attn_grad) {
        d_feat_extra = Tensor(cache.features.shape());
        d_head_extra = Tensor({kClasses, kFeatureDim});
    }
    const std::size_t spatial = kCamSize * kCamSize;
    Tensor features_j({kFeatureDim, kCamSize, kCamSize});
    double attn_sum = 0.0;
    for (std::size_t j = 0; j < b; ++j) {
        const double* src = cache.features.data() + j * kFeatureDim * spatial;
        std::copy(src, src + features_j.size(), features_j.data());
        const SaliencyMap s = cam_from_features(features_j, params.head, labels[j], cfg.eps_kl);
        AttnLossResult kl = attention_loss(s.grid, teachers[batch_idx[j]].grid);
        attn_sum += kl.loss;
        if (attn_grad) {
            for (std::size_t i = 0; i < kl.d_s.size(); ++i) kl.d_s[i] *= scale;
            CamVjp vjp = cam_vjp(features_j, params.head, labels[j], cfg.eps_kl, kl.d_s);
            double* dst = d_feat_extra.data() + j * kFeatureDim * spatial;
            for (std::size_t i = 0; i < vjp.d_features.size(); ++i) dst[i] += vjp.d_features[i];
            double* hrow =
                d_head_extra.data() + static_cast<std::size_t>(labels[j]) * kFeatureDim;
            for (std::size_t k = 0; k < kFeatureDim; ++k) hrow[k] += vjp.d_head_weights[k];
        }
    }
    out.attn = attn_sum / static_cast<double>(b);

    const double total =
        phase == Phase::attention ? out.attn : out.ce + lambda * out.attn;
    if (!std::isfinite(total)) {
        throw NumericError("non-finite loss (" + std::to_string(total) + ")");
    }

    ModelGrads grads =
        model_backward(params, cache, d_logits, attn_grad ? &d_feat_extra : nullptr);
    if (attn_grad) {
        for (std::size_t i = 0; i < grads.head_w.size(); ++i) grads.head_w[i] += d_head_extra[i];
        double gsq = 0.0;
        for (Tensor* g : grad_tensors(grads)) {
            for (std::size_t i = 0; i < g->size(); ++i) gsq += (*g)[i] * (*g)[i];
        }
        if (gsq > kAttnGradClipNorm * kAttnGradClipNorm) {
            const double s = kAttnGradClipNorm / std::sqrt(gsq);
            for (Tensor* g : grad_tensors(grads)) {
                for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] *= s;
            }
        }
    }
    sgd_step(params, grads, state, cfg.sgd);
    return out;
}

} // namespace train_detail

/// Attention-only epochs [0, E_attn), optimizer reset at E_attn with weights
/// preserved, then joint CE + lambda_e * KL per the ramp. Checkpoint (when a
/// path is given) and final test accuracy come from the last-epoch model.
inline TrainReport train_two_phase(const TrainConfig& cfg, const DatasetSplit& split,
                                   const TeacherSet& teachers, TrainHooks hooks = {},
                                   const std::string& checkpoint_path = "") {
    if (cfg.e_attn > cfg.epochs) {
        throw ConfigError("train: e_attn " + std::to_string(cfg.e_attn) + " exceeds epochs " +
                          std::to_string(cfg.epochs));
    }
    if (cfg.batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (teachers.train.size() != split.train.size() || teachers.val.size() != split.val.size()) {
        throw ConfigError("train: teacher counts (" + std::to_string(teachers.train.size()) +
                          " train, " + std::to_string(teachers.val.size()) +
                          " val) do not match the split (" + std::to_string(split.train.size()) +
                          " train, " + std::to_string(split.val.size()) + " val)");
    }
    if (split.train.empty() || split.val.empty()) {
        throw ConfigError("train: empty train or val split");
    }

    TrainReport report;
    report.config = cfg;
    report.checkpoint_path = checkpoint_path;

    SeededRng run_rng(cfg.seed);
    ModelParams params = ModelParams::init(run_rng);
    SgdState state = SgdState::init(params, cfg.sgd);
    SeededRng shuffle_base = run_rng.split(rng_keys::kEpochShuffle);

    std::vector<std::size_t> order(split.train.size());
    std::iota(order.begin(), order.end(), 0);

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const Phase phase = epoch < cfg.e_attn ? Phase::attention : Phase::joint;
        if (epoch == cfg.e_attn) reset(state, cfg.sgd);
        const double lambda = phase == Phase::joint
                                  ? lambda_at(epoch, cfg)
                                  : std::numeric_limits<double>::quiet_NaN();
        if (hooks.on_epoch_start) hooks.on_epoch_start(epoch, phase, lambda, state, params);

        SeededRng epoch_rng = shuffle_base.split(epoch);
        epoch_rng.shuffle(order);

        const double epoch_lr = state.current_lr;
        double ce_sum = 0.0, attn_sum = 0.0;
        std::size_t n_seen = 0;
        std::vector<std::size_t> batch_idx;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t b = std::min(cfg.batch_size, order.size() - start);
            batch_idx.assign(order.begin() + static_cast<std::ptrdiff_t>(start),
                             order.begin() + static_cast<std::ptrdiff_t>(start + b));
            train_detail::StepOutcome step;
            try {
                step = train_detail::train_step(params, state, cfg, phase, lambda, split.train,
                                                teachers.train, batch_idx);
            } catch (const NumericError& e) {
                throw NumericError(std::string(e.what()) + " at epoch " + std::to_string(epoch) +
                                   ", batch " + std::to_string(start / cfg.batch_size));
            }
            if (phase == Phase::joint) ce_sum += step.ce * static_cast<double>(b);
            attn_sum += step.attn * static_cast<double>(b);
            n_seen += b;
        }

        EpochMetrics m;
        m.epoch = epoch;
        m.phase = phase;
        m.lambda_effective = lambda;
        m.train_ce = phase == Phase::joint ? ce_sum / static_cast<double>(n_seen)
                                           : std::numeric_limits<double>::quiet_NaN();
        m.train_attn = attn_sum / static_cast<double>(n_seen);
        const EvalResult val = evaluate(params, split.val, &teachers.val, cfg.eps_kl);
        m.val_acc = val.accuracy;
        m.val_attn = val.mean_attn;
        m.optim_value = optim_value(m.val_acc, m.val_attn);
        m.current_lr = epoch_lr;
        report.per_epoch.push_back(m);
        if (hooks.on_epoch_end) hooks.on_epoch_end(m, params);

        epoch_tick(state, cfg.sgd);
    }

    for (const EpochMetrics& m : report.per_epoch) {
        report.best_optim_value = std::max(report.best_optim_value, m.optim_value);
    }
    report.final_test_acc = evaluate(params, split.test).accuracy;
    if (!checkpoint_path.empty()) save_checkpoint(params, checkpoint_path);
    return report;
}

// ---- metrics CSV ----

inline constexpr const char* kMetricsCsvHeader =
    "epoch,phase,lambda,train_ce,train_attn,val_acc,val_attn,optim_value,lr";

inline std::string format_g9(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

/// Enough digits that parsing the text back reproduces the double bit-exactly.
inline std::string format_g17(double v) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string metrics_csv(const TrainReport& report) {
    std::string out = kMetricsCsvHeader;
    out += "\n";
    for (const EpochMetrics& m : report.per_epoch) {
        out += std::to_string(m.epoch);
        out += ",";
        out += phase_name(m.phase);
        out += ",";
        out += format_g9(m.lambda_effective);
        out += ",";
        out += format_g9(m.train_ce);
        out += ",";
        out += format_g9(m.train_attn);
        out += ",";
        out += format_g9(m.val_acc);
        out += ",";
        out += format_g9(m.val_attn);
        out += ",";
        out += format_g9(m.optim_value);
        out += ",";
        out += format_g9(m.current_lr);
        out += "\n";
    }
    return out;
}

inline void write_metrics_csv(const TrainReport& report, const std::string& path) {
    write_file_bytes(path, metrics_csv(report));
}

// ---- multi-seed aggregation ----

struct SeedStats {
    double mean = 0.0;
    double stddev = 0.0; // sample standard deviation, N-1 denominator
};

inline SeedStats aggregate_seeds(const std::vector<TrainReport>& reports) {
    if (reports.size() < 2) {
        throw ConfigError("aggregate_seeds: need at least 2 reports, got " +
                          std::to_string(reports.size()));
    }
    SeedStats s;
    for (const TrainReport& r : reports) s.mean += r.final_test_acc;
    s.mean /= static_cast<double>(reports.size());
    double ss = 0.0;
    for (const TrainReport& r : reports) {
        const double d = r.final_test_acc - s.mean;
        ss += d * d;
    }
    s.stddev = std::sqrt(ss / static_cast<double>(reports.size() - 1));
    return s;
}

} // namespace attnalign
