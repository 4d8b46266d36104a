#pragma once
// Sequence autoencoder for windows of CAN signal values.
//
//   encoder LSTM  (k -> He), last hidden state
//   latent        z = Wl * h_T + bl                  (linear, size L)
//   decoder LSTM  (L -> Hd), fed the latent at every step
//   output        y_t = sigmoid(Wo * hd_t + bo)      (size k, in [0,1])
//
// Gate order is i, f, g, o with sigmoid on i/f/o and tanh on g and the cell
// output. Zero-initialized weights reconstruct 0.5 everywhere. Training is
// full backpropagation through time with Adam, deterministic for a given
// seed: per-epoch shuffles come from this library's own RNG, keyed by
// (seed, epoch counter), and the optimizer state can persist across calls so
// interrupted/resumed schedules reproduce uninterrupted ones exactly.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "fcw/can.hpp"
#include "fcw/segmentation.hpp"
#include "fcw/util.hpp"

namespace fcw {

struct BadDimensions : std::runtime_error {
    explicit BadDimensions(const std::string& what) : std::runtime_error(what) {}
};
struct NonFiniteLoss : std::runtime_error {
    explicit NonFiniteLoss(const std::string& what) : std::runtime_error(what) {}
};
struct BadWeightsFile : std::runtime_error {
    explicit BadWeightsFile(const std::string& what) : std::runtime_error(what) {}
};

// ---------------------------------------------------------------------------
// Architecture + flat parameter layout
// ---------------------------------------------------------------------------

struct ArchConfig {
    size_t input_width = 1;   // k: features per timestep
    size_t enc_hidden = 32;   // He
    size_t latent = 16;       // L
    size_t dec_hidden = 32;   // Hd
    size_t seq_len = 40;      // T: frames per window

    void validate() const {
        if (input_width == 0 || enc_hidden == 0 || latent == 0 || dec_hidden == 0 || seq_len == 0)
            throw BadDimensions("ArchConfig: all dimensions must be >= 1");
    }

    size_t param_count() const {
        return 4 * enc_hidden * (input_width + enc_hidden + 1) +  // encoder Wx, Wh, b
               latent * (enc_hidden + 1) +                        // latent W, b
               4 * dec_hidden * (latent + dec_hidden + 1) +       // decoder Wx, Wh, b
               input_width * (dec_hidden + 1);                    // output W, b
    }

    bool operator==(const ArchConfig& o) const {
        return input_width == o.input_width && enc_hidden == o.enc_hidden && latent == o.latent &&
               dec_hidden == o.dec_hidden && seq_len == o.seq_len;
    }
};

// Offsets of each tensor inside the flat parameter vector.
struct WeightSpans {
    size_t enc_wx, enc_wh, enc_b, lat_w, lat_b, dec_wx, dec_wh, dec_b, out_w, out_b, total;

    explicit WeightSpans(const ArchConfig& a) {
        size_t off = 0;
        enc_wx = off; off += 4 * a.enc_hidden * a.input_width;
        enc_wh = off; off += 4 * a.enc_hidden * a.enc_hidden;
        enc_b = off;  off += 4 * a.enc_hidden;
        lat_w = off;  off += a.latent * a.enc_hidden;
        lat_b = off;  off += a.latent;
        dec_wx = off; off += 4 * a.dec_hidden * a.latent;
        dec_wh = off; off += 4 * a.dec_hidden * a.dec_hidden;
        dec_b = off;  off += 4 * a.dec_hidden;
        out_w = off;  off += a.input_width * a.dec_hidden;
        out_b = off;  off += a.input_width;
        total = off;
    }
};

struct ModelWeights {
    ArchConfig arch;
    std::vector<double> w;  // size arch.param_count()
};

// Uniform(-0.1, 0.1) init, deterministic in the seed.
inline ModelWeights init_weights(const ArchConfig& arch, uint64_t seed) {
    arch.validate();
    ModelWeights m;
    m.arch = arch;
    m.w.resize(arch.param_count());
    Rng rng(seed);
    for (auto& v : m.w) v = rng.uniform(-0.1, 0.1);
    return m;
}

// ---------------------------------------------------------------------------
// Feature windows
// ---------------------------------------------------------------------------

struct FeatureWindow {
    std::vector<double> x;  // seq_len * k, row-major (timestep-major)
    AttackKind label = AttackKind::None;
    uint32_t instance = 0;
};

// Which payload signals become model features, with train-split min/max for
// scaling. CONSTANT signals and degenerate (min == max) signals are excluded.
struct FeatureSpec {
    uint16_t id = 0;
    std::vector<Signal> signals;
    std::vector<double> lo, hi;  // per signal, from the training split
};

inline FeatureSpec fit_feature_spec(const SignalLayout& layout, const IdStream& train) {
    if (train.frames.empty()) throw EmptyDataset("fit_feature_spec: empty training stream");
    FeatureSpec spec;
    spec.id = layout.id;
    for (const auto& sig : layout.signals) {
        if (sig.cls == SignalClass::Constant) continue;
        double lo = std::numeric_limits<double>::infinity(), hi = -lo;
        for (const auto& f : train.frames) {
            double v = static_cast<double>(decode_signal(f.payload, sig));
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        if (hi <= lo) continue;  // degenerate in the training data
        spec.signals.push_back(sig);
        spec.lo.push_back(lo);
        spec.hi.push_back(hi);
    }
    return spec;
}

// Min-max scales each selected signal into [0,1], clamped for values outside
// the training range.
inline FeatureWindow featurize(const Window& w, const FeatureSpec& spec) {
    const size_t k = spec.signals.size();
    if (k == 0) throw EmptyDataset("featurize: feature spec has no usable signals");
    FeatureWindow fw;
    fw.label = w.label;
    fw.instance = w.instance;
    fw.x.resize(w.frames.size() * k);
    for (size_t t = 0; t < w.frames.size(); ++t) {
        for (size_t j = 0; j < k; ++j) {
            double v = static_cast<double>(decode_signal(w.frames[t].payload, spec.signals[j]));
            double scaled = (v - spec.lo[j]) / (spec.hi[j] - spec.lo[j]);
            fw.x[t * k + j] = std::clamp(scaled, 0.0, 1.0);
        }
    }
    return fw;
}

inline std::vector<FeatureWindow> featurize_all(const std::vector<Window>& ws,
                                                const FeatureSpec& spec) {
    std::vector<FeatureWindow> out;
    out.reserve(ws.size());
    for (const auto& w : ws) out.push_back(featurize(w, spec));
    return out;
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

namespace detail {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// out(+)= W[rows x cols] * x
inline void matvec(const double* W, size_t rows, size_t cols, const double* x, double* out,
                   bool accumulate) {
    for (size_t r = 0; r < rows; ++r) {
        const double* row = W + r * cols;
        double acc = accumulate ? out[r] : 0.0;
        for (size_t c = 0; c < cols; ++c) acc += row[c] * x[c];
        out[r] = acc;
    }
}

// dx += W^T * dy
inline void matvec_t_acc(const double* W, size_t rows, size_t cols, const double* dy,
                         double* dx) {
    for (size_t r = 0; r < rows; ++r) {
        const double* row = W + r * cols;
        const double d = dy[r];
        if (d == 0.0) continue;
        for (size_t c = 0; c < cols; ++c) dx[c] += row[c] * d;
    }
}

// dW += dy * x^T
inline void outer_acc(double* dW, const double* dy, size_t rows, const double* x, size_t cols) {
    for (size_t r = 0; r < rows; ++r) {
        double* row = dW + r * cols;
        const double d = dy[r];
        if (d == 0.0) continue;
        for (size_t c = 0; c < cols; ++c) row[c] += d * x[c];
    }
}

// One LSTM cell stack: caches every gate/cell value for BPTT.
struct LstmTrace {
    size_t T = 0, H = 0;
    std::vector<double> i, f, g, o;  // T x H, post-activation
    std::vector<double> c, tc, h;    // cell, tanh(cell), hidden: T x H

    void resize(size_t T_, size_t H_) {
        T = T_;
        H = H_;
        for (auto* v : {&i, &f, &g, &o, &c, &tc, &h}) v->assign(T * H, 0.0);
    }
};

// pre: scratch of size 4H. prev_h/prev_c may be null for t == 0.
inline void lstm_step(const double* Wx, const double* Wh, const double* b, size_t H, size_t in_w,
                      const double* x, const double* prev_h, const double* prev_c, double* pre,
                      LstmTrace& tr, size_t t) {
    for (size_t r = 0; r < 4 * H; ++r) pre[r] = b[r];
    matvec(Wx, 4 * H, in_w, x, pre, true);
    if (prev_h) matvec(Wh, 4 * H, H, prev_h, pre, true);
    double* it = &tr.i[t * H];
    double* ft = &tr.f[t * H];
    double* gt = &tr.g[t * H];
    double* ot = &tr.o[t * H];
    double* ct = &tr.c[t * H];
    double* tct = &tr.tc[t * H];
    double* ht = &tr.h[t * H];
    for (size_t u = 0; u < H; ++u) {
        it[u] = sigmoid(pre[u]);
        ft[u] = sigmoid(pre[H + u]);
        gt[u] = std::tanh(pre[2 * H + u]);
        ot[u] = sigmoid(pre[3 * H + u]);
        ct[u] = it[u] * gt[u] + (prev_c ? ft[u] * prev_c[u] : 0.0);
        tct[u] = std::tanh(ct[u]);
        ht[u] = ot[u] * tct[u];
    }
}

}  // namespace detail

// Reusable scratch for forward/backward passes.
struct Workspace {
    detail::LstmTrace enc, dec;
    std::vector<double> z;       // latent
    std::vector<double> y;       // T x k reconstruction
    std::vector<double> pre;     // 4 * max(He, Hd)
    std::vector<double> dh, dc, dpre, dz, dhn;  // backward scratch

    void resize(const ArchConfig& a) {
        enc.resize(a.seq_len, a.enc_hidden);
        dec.resize(a.seq_len, a.dec_hidden);
        z.assign(a.latent, 0.0);
        y.assign(a.seq_len * a.input_width, 0.0);
        size_t hmax = std::max(a.enc_hidden, a.dec_hidden);
        pre.assign(4 * hmax, 0.0);
        dh.assign(hmax, 0.0);
        dc.assign(hmax, 0.0);
        dpre.assign(4 * hmax, 0.0);
        dz.assign(a.latent, 0.0);
        dhn.assign(hmax, 0.0);
    }
};

// Runs the full forward pass; ws.y holds the reconstruction afterwards.
inline void forward(const ModelWeights& m, const std::vector<double>& x, Workspace& ws) {
    const ArchConfig& a = m.arch;
    if (x.size() != a.seq_len * a.input_width)
        throw BadDimensions("forward: window has " + std::to_string(x.size()) +
                            " values, expected " + std::to_string(a.seq_len * a.input_width));
    const WeightSpans sp(a);
    if (m.w.size() != sp.total) throw BadDimensions("forward: weight count mismatch");
    const double* w = m.w.data();
    ws.resize(a);

    // encoder
    for (size_t t = 0; t < a.seq_len; ++t) {
        const double* prev_h = t ? &ws.enc.h[(t - 1) * a.enc_hidden] : nullptr;
        const double* prev_c = t ? &ws.enc.c[(t - 1) * a.enc_hidden] : nullptr;
        detail::lstm_step(w + sp.enc_wx, w + sp.enc_wh, w + sp.enc_b, a.enc_hidden,
                          a.input_width, &x[t * a.input_width], prev_h, prev_c, ws.pre.data(),
                          ws.enc, t);
    }
    // latent
    const double* h_last = &ws.enc.h[(a.seq_len - 1) * a.enc_hidden];
    for (size_t r = 0; r < a.latent; ++r) ws.z[r] = w[sp.lat_b + r];
    detail::matvec(w + sp.lat_w, a.latent, a.enc_hidden, h_last, ws.z.data(), true);
    // decoder: the latent is the input at every timestep
    for (size_t t = 0; t < a.seq_len; ++t) {
        const double* prev_h = t ? &ws.dec.h[(t - 1) * a.dec_hidden] : nullptr;
        const double* prev_c = t ? &ws.dec.c[(t - 1) * a.dec_hidden] : nullptr;
        detail::lstm_step(w + sp.dec_wx, w + sp.dec_wh, w + sp.dec_b, a.dec_hidden, a.latent,
                          ws.z.data(), prev_h, prev_c, ws.pre.data(), ws.dec, t);
    }
    // output head
    for (size_t t = 0; t < a.seq_len; ++t) {
        double* yt = &ws.y[t * a.input_width];
        for (size_t r = 0; r < a.input_width; ++r) yt[r] = w[sp.out_b + r];
        detail::matvec(w + sp.out_w, a.input_width, a.dec_hidden, &ws.dec.h[t * a.dec_hidden],
                       yt, true);
        for (size_t r = 0; r < a.input_width; ++r) yt[r] = detail::sigmoid(yt[r]);
    }
}

inline std::vector<double> reconstruct(const ModelWeights& m, const std::vector<double>& x) {
    Workspace ws;
    forward(m, x, ws);
    return ws.y;
}

// Mean squared error over all T*k elements.
inline double mse(const std::vector<double>& y, const std::vector<double>& x) {
    if (y.size() != x.size() || x.empty()) throw BadDimensions("mse: size mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
        double d = y[i] - x[i];
        acc += d * d;
    }
    return acc / static_cast<double>(x.size());
}

inline double reconstruction_error(const ModelWeights& m, const FeatureWindow& fw,
                                   Workspace& ws) {
    forward(m, fw.x, ws);
    return mse(ws.y, fw.x);
}

inline double reconstruction_error(const ModelWeights& m, const FeatureWindow& fw) {
    Workspace ws;
    return reconstruction_error(m, fw, ws);
}

// Mean reconstruction error over a set of windows (the validation loss).
inline double mean_error(const ModelWeights& m, const std::vector<FeatureWindow>& data) {
    if (data.empty()) throw EmptyDataset("mean_error: no windows");
    Workspace ws;
    double acc = 0.0;
    for (const auto& fw : data) acc += reconstruction_error(m, fw, ws);
    return acc / static_cast<double>(data.size());
}

// Accumulates d(mean batch loss)/dw into grad (must be pre-sized, zeroed by
// the caller) for one window, where the batch mean carries weight 1/B.
// Returns this window's loss.
namespace detail {

inline double window_gradient(const ModelWeights& m, const WeightSpans& sp,
                              const std::vector<double>& x, double inv_batch, Workspace& ws,
                              double* grad) {
    const ArchConfig& a = m.arch;
    forward(m, x, ws);
    const double* w = m.w.data();
    const size_t T = a.seq_len, k = a.input_width, He = a.enc_hidden, Hd = a.dec_hidden,
                 L = a.latent;

    double loss = 0.0;
    // dL/dy for mean over T*k elements, scaled by the batch weight
    std::vector<double>& dh = ws.dh;
    std::vector<double>& dc = ws.dc;
    std::vector<double>& dpre = ws.dpre;
    std::vector<double>& dz = ws.dz;
    std::vector<double>& dhn = ws.dhn;  // dh arriving from the next timestep
    std::fill(dz.begin(), dz.end(), 0.0);
    std::fill(dhn.begin(), dhn.begin() + static_cast<std::ptrdiff_t>(Hd), 0.0);
    std::fill(dc.begin(), dc.begin() + static_cast<std::ptrdiff_t>(Hd), 0.0);

    const double denom = static_cast<double>(T * k);
    std::vector<double> ds(k);

    // decoder + output head, t = T-1 .. 0
    for (size_t t = T; t-- > 0;) {
        const double* yt = &ws.y[t * k];
        const double* xt = &x[t * k];
        for (size_t j = 0; j < k; ++j) {
            const double diff = yt[j] - xt[j];
            loss += diff * diff;
            const double dy = 2.0 * diff / denom * inv_batch;
            ds[j] = dy * yt[j] * (1.0 - yt[j]);  // through the output sigmoid
        }
        const double* hd_t = &ws.dec.h[t * Hd];
        outer_acc(grad + sp.out_w, ds.data(), k, hd_t, Hd);
        for (size_t j = 0; j < k; ++j) grad[sp.out_b + j] += ds[j];
        // dh for this timestep = Wo^T ds + carry from t+1
        for (size_t u = 0; u < Hd; ++u) dh[u] = dhn[u];
        matvec_t_acc(w + sp.out_w, k, Hd, ds.data(), dh.data());

        const double* it = &ws.dec.i[t * Hd];
        const double* ft = &ws.dec.f[t * Hd];
        const double* gt = &ws.dec.g[t * Hd];
        const double* ot = &ws.dec.o[t * Hd];
        const double* tct = &ws.dec.tc[t * Hd];
        const double* c_prev = t ? &ws.dec.c[(t - 1) * Hd] : nullptr;
        for (size_t u = 0; u < Hd; ++u) {
            const double dtc = dh[u] * ot[u];
            dc[u] += dtc * (1.0 - tct[u] * tct[u]);
            const double d_o = dh[u] * tct[u];
            dpre[3 * Hd + u] = d_o * ot[u] * (1.0 - ot[u]);
            dpre[u] = dc[u] * gt[u] * it[u] * (1.0 - it[u]);
            dpre[Hd + u] = c_prev ? dc[u] * c_prev[u] * ft[u] * (1.0 - ft[u]) : 0.0;
            dpre[2 * Hd + u] = dc[u] * it[u] * (1.0 - gt[u] * gt[u]);
            dc[u] = dc[u] * ft[u];  // becomes dc for t-1
        }
        outer_acc(grad + sp.dec_wx, dpre.data(), 4 * Hd, ws.z.data(), L);
        if (t) {
            const double* h_prev = &ws.dec.h[(t - 1) * Hd];
            outer_acc(grad + sp.dec_wh, dpre.data(), 4 * Hd, h_prev, Hd);
        }
        for (size_t r = 0; r < 4 * Hd; ++r) grad[sp.dec_b + r] += dpre[r];
        matvec_t_acc(w + sp.dec_wx, 4 * Hd, L, dpre.data(), dz.data());
        std::fill(dhn.begin(), dhn.begin() + static_cast<std::ptrdiff_t>(Hd), 0.0);
        if (t) matvec_t_acc(w + sp.dec_wh, 4 * Hd, Hd, dpre.data(), dhn.data());
    }

    // latent layer
    const double* h_last = &ws.enc.h[(T - 1) * He];
    outer_acc(grad + sp.lat_w, dz.data(), L, h_last, He);
    for (size_t r = 0; r < L; ++r) grad[sp.lat_b + r] += dz[r];
    std::fill(dhn.begin(), dhn.begin() + static_cast<std::ptrdiff_t>(He), 0.0);
    matvec_t_acc(w + sp.lat_w, L, He, dz.data(), dhn.data());

    // encoder, t = T-1 .. 0; gradient enters only at the last hidden state
    std::fill(dc.begin(), dc.begin() + static_cast<std::ptrdiff_t>(He), 0.0);
    for (size_t t = T; t-- > 0;) {
        for (size_t u = 0; u < He; ++u) dh[u] = dhn[u];
        const double* it = &ws.enc.i[t * He];
        const double* ft = &ws.enc.f[t * He];
        const double* gt = &ws.enc.g[t * He];
        const double* ot = &ws.enc.o[t * He];
        const double* tct = &ws.enc.tc[t * He];
        const double* c_prev = t ? &ws.enc.c[(t - 1) * He] : nullptr;
        for (size_t u = 0; u < He; ++u) {
            const double dtc = dh[u] * ot[u];
            dc[u] += dtc * (1.0 - tct[u] * tct[u]);
            const double d_o = dh[u] * tct[u];
            dpre[3 * He + u] = d_o * ot[u] * (1.0 - ot[u]);
            dpre[u] = dc[u] * gt[u] * it[u] * (1.0 - it[u]);
            dpre[He + u] = c_prev ? dc[u] * c_prev[u] * ft[u] * (1.0 - ft[u]) : 0.0;
            dpre[2 * He + u] = dc[u] * it[u] * (1.0 - gt[u] * gt[u]);
            dc[u] = dc[u] * ft[u];
        }
        outer_acc(grad + sp.enc_wx, dpre.data(), 4 * He, &x[t * k], k);
        if (t) {
            const double* h_prev = &ws.enc.h[(t - 1) * He];
            outer_acc(grad + sp.enc_wh, dpre.data(), 4 * He, h_prev, He);
        }
        for (size_t r = 0; r < 4 * He; ++r) grad[sp.enc_b + r] += dpre[r];
        std::fill(dhn.begin(), dhn.begin() + static_cast<std::ptrdiff_t>(He), 0.0);
        if (t) matvec_t_acc(w + sp.enc_wh, 4 * He, He, dpre.data(), dhn.data());
    }
    return loss / denom;
}

}  // namespace detail

// Mean loss and mean gradient over the windows selected by `idx`.
inline double batch_gradient(const ModelWeights& m, const std::vector<FeatureWindow>& data,
                             const size_t* idx, size_t count, std::vector<double>& grad,
                             Workspace& ws) {
    const WeightSpans sp(m.arch);
    grad.assign(sp.total, 0.0);
    if (count == 0) throw EmptyDataset("batch_gradient: empty batch");
    double loss = 0.0;
    const double inv_batch = 1.0 / static_cast<double>(count);
    for (size_t b = 0; b < count; ++b)
        loss += detail::window_gradient(m, sp, data[idx[b]].x, inv_batch, ws, grad.data());
    return loss * inv_batch;
}

// ---------------------------------------------------------------------------
// Adam + local training
// ---------------------------------------------------------------------------

struct OptimizerConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    size_t batch = 64;
};

// Persistent optimizer state. Keeping it (and the epoch counter driving the
// shuffle seed) across training calls makes N short calls bit-identical to
// one long call.
struct TrainerState {
    std::vector<double> m, v;
    uint64_t adam_t = 0;
    uint64_t epoch = 0;

    void ensure(size_t params) {
        if (m.size() != params) {
            m.assign(params, 0.0);
            v.assign(params, 0.0);
        }
    }
};

// Trains in place for `epochs` epochs of minibatch Adam. `mu` adds a proximal
// pull toward `anchor` (pass mu = 0 and an empty anchor for plain training).
// Returns the mean training loss of the final epoch.
inline double local_train(ModelWeights& model, const std::vector<FeatureWindow>& data,
                          size_t epochs, const OptimizerConfig& opt, double mu,
                          const std::vector<double>& anchor, TrainerState& state,
                          uint64_t seed) {
    if (data.empty()) throw EmptyDataset("local_train: no training windows");
    if (opt.batch == 0) throw BadDimensions("local_train: batch must be >= 1");
    const size_t P = model.w.size();
    if (P != model.arch.param_count()) throw BadDimensions("local_train: weight count mismatch");
    if (mu != 0.0 && anchor.size() != P)
        throw BadDimensions("local_train: anchor size mismatch");
    state.ensure(P);

    Workspace ws;
    std::vector<double> grad(P);
    std::vector<size_t> order(data.size());
    double epoch_loss = 0.0;

    for (size_t e = 0; e < epochs; ++e) {
        // each epoch shuffles a fresh identity permutation keyed only by
        // (seed, epoch counter), so resumed schedules replay exactly
        std::iota(order.begin(), order.end(), 0);
        Rng shuffle_rng(Rng::mix(seed, state.epoch));
        shuffle_rng.shuffle(order);
        double loss_acc = 0.0;
        size_t batches = 0;
        for (size_t off = 0; off < order.size(); off += opt.batch) {
            const size_t count = std::min(opt.batch, order.size() - off);
            double loss = batch_gradient(model, data, order.data() + off, count, grad, ws);
            if (!std::isfinite(loss)) throw NonFiniteLoss("local_train: loss diverged");
            if (mu != 0.0)
                for (size_t p = 0; p < P; ++p) grad[p] += mu * (model.w[p] - anchor[p]);
            // Adam
            state.adam_t += 1;
            const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.adam_t));
            const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.adam_t));
            for (size_t p = 0; p < P; ++p) {
                state.m[p] = opt.beta1 * state.m[p] + (1.0 - opt.beta1) * grad[p];
                state.v[p] = opt.beta2 * state.v[p] + (1.0 - opt.beta2) * grad[p] * grad[p];
                const double mhat = state.m[p] / bc1;
                const double vhat = state.v[p] / bc2;
                model.w[p] -= opt.lr * mhat / (std::sqrt(vhat) + opt.eps);
            }
            loss_acc += loss;
            ++batches;
        }
        state.epoch += 1;
        epoch_loss = loss_acc / static_cast<double>(batches);
    }
    return epoch_loss;
}

// ---------------------------------------------------------------------------
// Thresholds
// ---------------------------------------------------------------------------

enum class ThresholdMode : uint8_t { LabeledOptimal = 0, Quantile };

// A window is anomalous iff its error exceeds the threshold (strictly).
inline bool classify(double error, double threshold) { return error > threshold; }

// Linear-interpolation quantile of the errors (q in [0,1]).
inline double quantile(std::vector<double> xs, double q) {
    if (xs.empty()) throw EmptyDataset("quantile: no samples");
    if (q < 0.0 || q > 1.0) throw OutOfRange("quantile: q outside [0,1]");
    std::sort(xs.begin(), xs.end());
    const double p = q * static_cast<double>(xs.size() - 1);
    const size_t i = static_cast<size_t>(p);
    if (i + 1 >= xs.size()) return xs.back();
    const double frac = p - static_cast<double>(i);
    return xs[i] + frac * (xs[i + 1] - xs[i]);
}

// Picks the threshold maximizing Youden's J = TPR - FPR over candidate cuts:
// midpoints between consecutive distinct observed errors, plus the maximum
// (classify-nothing cut). Ties resolve to the smallest candidate.
inline double optimal_threshold(const std::vector<double>& clean_errors,
                                const std::vector<double>& attack_errors) {
    if (clean_errors.empty() || attack_errors.empty())
        throw EmptyDataset("optimal_threshold: need both clean and attack errors");
    std::vector<double> all;
    all.reserve(clean_errors.size() + attack_errors.size());
    all.insert(all.end(), clean_errors.begin(), clean_errors.end());
    all.insert(all.end(), attack_errors.begin(), attack_errors.end());
    std::sort(all.begin(), all.end());
    all.erase(std::unique(all.begin(), all.end()), all.end());

    std::vector<double> candidates;
    for (size_t i = 0; i + 1 < all.size(); ++i)
        candidates.push_back(0.5 * (all[i] + all[i + 1]));
    candidates.push_back(all.back());

    double best_theta = candidates.front();
    double best_j = -2.0;
    for (double theta : candidates) {
        size_t tp = 0, fp = 0;
        for (double e : attack_errors)
            if (classify(e, theta)) ++tp;
        for (double e : clean_errors)
            if (classify(e, theta)) ++fp;
        const double tpr = static_cast<double>(tp) / static_cast<double>(attack_errors.size());
        const double fpr = static_cast<double>(fp) / static_cast<double>(clean_errors.size());
        const double j = tpr - fpr;
        if (j > best_j + 1e-15) {
            best_j = j;
            best_theta = theta;
        }
    }
    return best_theta;
}

// ---------------------------------------------------------------------------
// Weights file: "FCW1" magic, u32 LE count, then count f32 LE values.
// ---------------------------------------------------------------------------

inline std::string save_weights(const ModelWeights& m) {
    ByteWriter w;
    w.bytes("FCW1", 4);
    w.u32(static_cast<uint32_t>(m.w.size()));
    for (double v : m.w) w.f32(static_cast<float>(v));
    return std::string(reinterpret_cast<const char*>(w.buf.data()), w.buf.size());
}

inline ModelWeights load_weights(const std::string& bytes, const ArchConfig& arch) {
    ByteReader r(reinterpret_cast<const uint8_t*>(bytes.data()), bytes.size());
    if (!r.need(8)) throw BadWeightsFile("weights file truncated");
    char magic[4];
    r.bytes(magic, 4);
    if (std::string(magic, 4) != "FCW1") throw BadWeightsFile("bad weights magic");
    const uint32_t count = r.u32();
    if (count != arch.param_count())
        throw BadDimensions("weights file has " + std::to_string(count) +
                            " params, architecture needs " +
                            std::to_string(arch.param_count()));
    if (!r.need(4ull * count)) throw BadWeightsFile("weights file truncated");
    ModelWeights m;
    m.arch = arch;
    m.w.resize(count);
    for (auto& v : m.w) v = static_cast<double>(r.f32());
    if (r.remaining() != 0) throw BadWeightsFile("trailing bytes in weights file");
    return m;
}

}  // namespace fcw
