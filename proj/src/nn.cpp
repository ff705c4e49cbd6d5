#include "fafesort/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace fafesort::nn {

namespace {

constexpr double kNormEps = 1e-8;

// Correlation pass: out[t] += sum_j w[j] * x[t+j]. One shared routine so
// every caller produces bit-identical arithmetic. Fixed-K variants let the
// compiler unroll the tap loop and vectorize over t.
template <int K>
void corr_fixed(const double* x, const double* w, double* out, int t_len) {
    for (int t = 0; t < t_len; ++t) {
        double acc = out[t];
        for (int j = 0; j < K; ++j) acc += w[j] * x[t + j];
        out[t] = acc;
    }
}

void corr_rows(const double* x, const double* w, double* out, int t_len, int k) {
    switch (k) {
        case 3: corr_fixed<3>(x, w, out, t_len); return;
        case 5: corr_fixed<5>(x, w, out, t_len); return;
        case 7: corr_fixed<7>(x, w, out, t_len); return;
        case 9: corr_fixed<9>(x, w, out, t_len); return;
        case 11: corr_fixed<11>(x, w, out, t_len); return;
        case 13: corr_fixed<13>(x, w, out, t_len); return;
        default:
            for (int t = 0; t < t_len; ++t) {
                double acc = out[t];
                for (int j = 0; j < k; ++j) acc += w[j] * x[t + j];
                out[t] = acc;
            }
    }
}


// Four-lane dot product; fixed partial order keeps it deterministic.
double dot(const double* a, const double* b, size_t n) {
    double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
    size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    for (; i < n; ++i) s0 += a[i] * b[i];
    return (s0 + s1) + (s2 + s3);
}

double sum(const double* a, size_t n) {
    double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
    size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 += a[i];
        s1 += a[i + 1];
        s2 += a[i + 2];
        s3 += a[i + 3];
    }
    for (; i < n; ++i) s0 += a[i];
    return (s0 + s1) + (s2 + s3);
}

double sum_sq_dev(const double* a, size_t n, double mu) {
    double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
    size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        const double d0 = a[i] - mu, d1 = a[i + 1] - mu, d2 = a[i + 2] - mu, d3 = a[i + 3] - mu;
        s0 += d0 * d0;
        s1 += d1 * d1;
        s2 += d2 * d2;
        s3 += d3 * d3;
    }
    for (; i < n; ++i) {
        const double d = a[i] - mu;
        s0 += d * d;
    }
    return (s0 + s1) + (s2 + s3);
}

void axpy1(double* out, int t_len, const double* x, double w) {
    for (int t = 0; t < t_len; ++t) out[t] += w * x[t];
}

// out[t] += w0*x0[t] + w1*x1[t] + w2*x2[t] + w3*x3[t]
void axpy4(double* out, int t_len, const double* x0, double w0, const double* x1, double w1,
           const double* x2, double w2, const double* x3, double w3) {
    for (int t = 0; t < t_len; ++t)
        out[t] += w0 * x0[t] + w1 * x1[t] + w2 * x2[t] + w3 * x3[t];
}

// Normalize `a` (n elements, n_maps maps of map_len each) into xhat and
// apply per-map gain/bias + ReLU into r (which may be strided for padding).
struct NormStats {
    double mu, inv;
};

NormStats norm_relu(const double* a, double* xhat, size_t n, const double* gain,
                    const double* bias, int n_outer, int n_maps, int map_len, double* r,
                    int r_stride) {
    const double mu = sum(a, n) / static_cast<double>(n);
    const double var = sum_sq_dev(a, n, mu) / static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + kNormEps);
    // n = n_outer * n_maps * map_len; gain/bias indexed by map.
    size_t e = 0;
    size_t ro = 0;
    for (int o = 0; o < n_outer; ++o) {
        for (int m = 0; m < n_maps; ++m) {
            const double g = gain[m], b = bias[m];
            double* rrow = r + ro;
            for (int t = 0; t < map_len; ++t) {
                const double xh = (a[e] - mu) * inv;
                xhat[e] = xh;
                const double y = g * xh + b;
                rrow[t] = y > 0.0 ? y : 0.0;
                ++e;
            }
            ro += static_cast<size_t>(r_stride);
        }
    }
    return {mu, inv};
}

// Backward of norm_relu. dy arrives in `d` (already masked by ReLU),
// gradients da overwrite `d`; dg/db accumulate.
void norm_backward(const double* xhat, double* d, size_t n, const double* gain, double* dgain,
                   double* dbias, int n_outer, int n_maps, int map_len, double inv) {
    size_t e = 0;
    for (int o = 0; o < n_outer; ++o) {
        for (int m = 0; m < n_maps; ++m) {
            double sg = 0, sb = 0;
            const double g = gain[m];
            for (int t = 0; t < map_len; ++t) {
                sg += d[e] * xhat[e];
                sb += d[e];
                d[e] *= g;  // now holds dL/dxhat
                ++e;
            }
            dgain[m] += sg;
            dbias[m] += sb;
        }
    }
    const double nd = static_cast<double>(n);
    const double mean_t = sum(d, n) / nd;
    const double mean_tx = dot(d, xhat, n) / nd;
    for (size_t i = 0; i < n; ++i) d[i] = inv * (d[i] - mean_t - xhat[i] * mean_tx);
}

struct GradLayout {
    size_t conv1_w, conv1_b, norm1_g, norm1_b;
    size_t conv2_w, conv2_b, norm2_g, norm2_b;
    size_t spat_w, spat_b, norm3_g, norm3_b;
    size_t fc_w, fc_b;
    size_t total;
};

GradLayout grad_layout(const SorterModel& m) {
    const Backbone& bb = m.backbone;
    GradLayout L{};
    size_t off = 0;
    auto place = [&off](size_t n) {
        const size_t at = off;
        off += n;
        return at;
    };
    L.conv1_w = place(bb.conv1_w.size());
    L.conv1_b = place(bb.conv1_b.size());
    L.norm1_g = place(bb.norm1_g.size());
    L.norm1_b = place(bb.norm1_b.size());
    L.conv2_w = place(bb.conv2_w.size());
    L.conv2_b = place(bb.conv2_b.size());
    L.norm2_g = place(bb.norm2_g.size());
    L.norm2_b = place(bb.norm2_b.size());
    L.spat_w = place(bb.spat_w.size());
    L.spat_b = place(bb.spat_b.size());
    L.norm3_g = place(bb.norm3_g.size());
    L.norm3_b = place(bb.norm3_b.size());
    L.fc_w = place(m.fc_w.size());
    L.fc_b = place(m.fc_b.size());
    L.total = off;
    return L;
}

void ensure_cache(const SorterModel& m, ForwardCache& c) {
    const BackboneConfig& cfg = m.backbone.cfg;
    const int C = m.n_channels(), T = m.t_window();
    const int64_t signature =
        ((static_cast<int64_t>(C) * 8192 + T) * 8192 + m.n_classes) * 64 + cfg.c_t1 +
        64 * (cfg.c_t2 + 64 * (cfg.c_s + 64 * (cfg.k_t1 + 64 * cfg.k_t2)));
    if (c.sized_for == signature) return;  // pad margins already zeroed
    const size_t tp1 = static_cast<size_t>(T + cfg.k_t1 - 1);
    const size_t tp2 = static_cast<size_t>(T + cfg.k_t2 - 1);
    c.xpad.assign(static_cast<size_t>(C) * tp1, 0.0);
    c.a1.resize(static_cast<size_t>(C) * cfg.c_t1 * T);
    c.x1hat.resize(c.a1.size());
    c.r1pad.assign(static_cast<size_t>(C) * cfg.c_t1 * tp2, 0.0);
    c.a2.resize(static_cast<size_t>(C) * cfg.c_t2 * T);
    c.x2hat.resize(c.a2.size());
    c.r2.resize(c.a2.size());
    c.a3.resize(static_cast<size_t>(cfg.c_s) * T);
    c.x3hat.resize(c.a3.size());
    c.r3.resize(c.a3.size());
    c.logits.resize(static_cast<size_t>(m.n_classes));
    c.probs.resize(static_cast<size_t>(m.n_classes));
    c.d3.resize(c.a3.size());
    c.d2pad.assign(static_cast<size_t>(C) * cfg.c_t2 * tp2, 0.0);
    c.d2.resize(c.a2.size());
    c.d1.resize(c.a1.size());
    c.sized_for = signature;
}

}  // namespace

void BackboneConfig::validate(int t_window) const {
    if (c_t1 < 1 || c_t2 < 1 || c_s < 1)
        throw ValidationError("backbone: feature-map counts must be >= 1");
    if (k_t1 < 1 || k_t1 % 2 == 0 || k_t2 < 1 || k_t2 % 2 == 0)
        throw ValidationError("backbone: kernel lengths must be odd");
    if (k_t1 > 31 || k_t2 > 31)
        throw ValidationError("backbone: temporal kernels longer than 31 taps unsupported");
    if (t_window > 0 && (k_t1 > t_window || k_t2 > t_window))
        throw ValidationError("backbone: kernels must not exceed t_window");
}

void TrainConfig::validate() const {
    if (epochs < 1) throw ValidationError("train: epochs must be >= 1");
    if (learning_rate < 0.0) throw ValidationError("train: learning_rate must be >= 0");
    if (batch_size < 1) throw ValidationError("train: batch_size must be >= 1");
}

std::vector<TensorRef> tensor_refs(Backbone& bb) {
    const BackboneConfig& c = bb.cfg;
    const int64_t C = bb.n_channels;
    return {
        {"conv1_w", {c.c_t1, c.k_t1}, &bb.conv1_w},
        {"conv1_b", {c.c_t1}, &bb.conv1_b},
        {"norm1_g", {c.c_t1}, &bb.norm1_g},
        {"norm1_b", {c.c_t1}, &bb.norm1_b},
        {"conv2_w", {c.c_t2, c.c_t1, c.k_t2}, &bb.conv2_w},
        {"conv2_b", {c.c_t2}, &bb.conv2_b},
        {"norm2_g", {c.c_t2}, &bb.norm2_g},
        {"norm2_b", {c.c_t2}, &bb.norm2_b},
        {"spatial_w", {c.c_s, C * c.c_t2}, &bb.spat_w},
        {"spatial_b", {c.c_s}, &bb.spat_b},
        {"norm3_g", {c.c_s}, &bb.norm3_g},
        {"norm3_b", {c.c_s}, &bb.norm3_b},
    };
}

std::vector<TensorRef> tensor_refs(SorterModel& m) {
    auto refs = tensor_refs(m.backbone);
    refs.push_back({"fc_w",
                    {m.n_classes, static_cast<int64_t>(m.backbone.cfg.c_s) * m.t_window()},
                    &m.fc_w});
    refs.push_back({"fc_b", {m.n_classes}, &m.fc_b});
    return refs;
}

size_t n_params(const SorterModel& m) {
    return grad_layout(m).total;
}

namespace {

void fill_uniform(std::vector<double>& v, double bound, Rng& rng) {
    for (double& x : v) x = (2.0 * rng.next_uniform() - 1.0) * bound;
}

}  // namespace

Backbone init_backbone(const BackboneConfig& cfg, int n_channels, int t_window, Rng& rng) {
    cfg.validate(t_window);
    if (n_channels < 1) throw ValidationError("backbone: n_channels must be >= 1");
    Backbone bb;
    bb.cfg = cfg;
    bb.n_channels = n_channels;
    bb.t_window = t_window;
    bb.conv1_w.resize(static_cast<size_t>(cfg.c_t1) * cfg.k_t1);
    bb.conv1_b.assign(static_cast<size_t>(cfg.c_t1), 0.0);
    bb.norm1_g.assign(static_cast<size_t>(cfg.c_t1), 1.0);
    bb.norm1_b.assign(static_cast<size_t>(cfg.c_t1), 0.0);
    bb.conv2_w.resize(static_cast<size_t>(cfg.c_t2) * cfg.c_t1 * cfg.k_t2);
    bb.conv2_b.assign(static_cast<size_t>(cfg.c_t2), 0.0);
    bb.norm2_g.assign(static_cast<size_t>(cfg.c_t2), 1.0);
    bb.norm2_b.assign(static_cast<size_t>(cfg.c_t2), 0.0);
    bb.spat_w.resize(static_cast<size_t>(cfg.c_s) * n_channels * cfg.c_t2);
    bb.spat_b.assign(static_cast<size_t>(cfg.c_s), 0.0);
    bb.norm3_g.assign(static_cast<size_t>(cfg.c_s), 1.0);
    bb.norm3_b.assign(static_cast<size_t>(cfg.c_s), 0.0);
    // Fan-in-scaled uniform weights; biases zero, gains one. Only the
    // weight tensors consume the stream, in declaration order.
    fill_uniform(bb.conv1_w, std::sqrt(1.0 / cfg.k_t1), rng);
    fill_uniform(bb.conv2_w, std::sqrt(1.0 / (static_cast<double>(cfg.c_t1) * cfg.k_t2)), rng);
    fill_uniform(bb.spat_w, std::sqrt(1.0 / (static_cast<double>(n_channels) * cfg.c_t2)), rng);
    return bb;
}

SorterModel init_model(const Backbone& backbone, int n_classes, Rng& rng) {
    if (n_classes < 2) throw ValidationError("model: n_classes must be >= 2");
    SorterModel m;
    m.backbone = backbone;
    m.n_classes = n_classes;
    const size_t fc_in = static_cast<size_t>(backbone.cfg.c_s) * backbone.t_window;
    m.fc_w.resize(static_cast<size_t>(n_classes) * fc_in);
    m.fc_b.assign(static_cast<size_t>(n_classes), 0.0);
    fill_uniform(m.fc_w, std::sqrt(1.0 / static_cast<double>(fc_in)), rng);
    return m;
}

std::span<const double> forward(const SorterModel& m, const float* window, ForwardCache& c) {
    const Backbone& bb = m.backbone;
    const BackboneConfig& cfg = bb.cfg;
    const int C = m.n_channels(), T = m.t_window();
    const int h1 = cfg.k_t1 / 2, h2 = cfg.k_t2 / 2;
    const int tp1 = T + cfg.k_t1 - 1, tp2 = T + cfg.k_t2 - 1;
    ensure_cache(m, c);

    for (int ch = 0; ch < C; ++ch) {
        double* row = c.xpad.data() + static_cast<size_t>(ch) * tp1 + h1;
        const float* src = window + static_cast<size_t>(ch) * T;
        for (int t = 0; t < T; ++t) row[t] = static_cast<double>(src[t]);
    }

    // temporal filter 1: shared across probe channels, same padding
    for (int ch = 0; ch < C; ++ch) {
        const double* x = c.xpad.data() + static_cast<size_t>(ch) * tp1;
        for (int mf = 0; mf < cfg.c_t1; ++mf) {
            double* out = c.a1.data() + (static_cast<size_t>(ch) * cfg.c_t1 + mf) * T;
            std::fill_n(out, T, bb.conv1_b[static_cast<size_t>(mf)]);
            corr_rows(x, bb.conv1_w.data() + static_cast<size_t>(mf) * cfg.k_t1, out, T, cfg.k_t1);
        }
    }
    const NormStats s1 = norm_relu(c.a1.data(), c.x1hat.data(), c.a1.size(), bb.norm1_g.data(),
                                   bb.norm1_b.data(), C, cfg.c_t1, T,
                                   c.r1pad.data() + h2, tp2);
    c.mu1 = s1.mu;
    c.inv1 = s1.inv;

    // temporal filter 2
    for (int ch = 0; ch < C; ++ch) {
        const double* xrow = c.r1pad.data() + static_cast<size_t>(ch) * cfg.c_t1 * tp2;
        for (int f = 0; f < cfg.c_t2; ++f) {
            double* out = c.a2.data() + (static_cast<size_t>(ch) * cfg.c_t2 + f) * T;
            std::fill_n(out, T, bb.conv2_b[static_cast<size_t>(f)]);
            for (int mf = 0; mf < cfg.c_t1; ++mf)
                corr_rows(xrow + static_cast<size_t>(mf) * tp2,
                          bb.conv2_w.data() + (static_cast<size_t>(f) * cfg.c_t1 + mf) * cfg.k_t2,
                          out, T, cfg.k_t2);
        }
    }
    const NormStats s2 = norm_relu(c.a2.data(), c.x2hat.data(), c.a2.size(), bb.norm2_g.data(),
                                   bb.norm2_b.data(), C, cfg.c_t2, T, c.r2.data(), T);
    c.mu2 = s2.mu;
    c.inv2 = s2.inv;

    // spatial filter: dense map across (channel, feature) at each timestep
    const int q_total = C * cfg.c_t2;
    for (int sft = 0; sft < cfg.c_s; ++sft) {
        double* out = c.a3.data() + static_cast<size_t>(sft) * T;
        std::fill_n(out, T, bb.spat_b[static_cast<size_t>(sft)]);
        const double* wrow = bb.spat_w.data() + static_cast<size_t>(sft) * q_total;
        int q = 0;
        for (; q + 4 <= q_total; q += 4)
            axpy4(out, T, c.r2.data() + static_cast<size_t>(q) * T, wrow[q],
                  c.r2.data() + (static_cast<size_t>(q) + 1) * T, wrow[q + 1],
                  c.r2.data() + (static_cast<size_t>(q) + 2) * T, wrow[q + 2],
                  c.r2.data() + (static_cast<size_t>(q) + 3) * T, wrow[q + 3]);
        for (; q < q_total; ++q)
            axpy1(out, T, c.r2.data() + static_cast<size_t>(q) * T, wrow[q]);
    }
    const NormStats s3 = norm_relu(c.a3.data(), c.x3hat.data(), c.a3.size(), bb.norm3_g.data(),
                                   bb.norm3_b.data(), 1, cfg.c_s, T, c.r3.data(), T);
    c.mu3 = s3.mu;
    c.inv3 = s3.inv;

    // classifier
    const size_t fc_in = static_cast<size_t>(cfg.c_s) * T;
    for (int k = 0; k < m.n_classes; ++k)
        c.logits[static_cast<size_t>(k)] =
            m.fc_b[static_cast<size_t>(k)] +
            dot(m.fc_w.data() + static_cast<size_t>(k) * fc_in, c.r3.data(), fc_in);

    // softmax, log-sum-exp stabilized
    double max_logit = c.logits[0];
    for (double v : c.logits) max_logit = std::max(max_logit, v);
    double denom = 0.0;
    for (int k = 0; k < m.n_classes; ++k) {
        const double e = std::exp(c.logits[static_cast<size_t>(k)] - max_logit);
        c.probs[static_cast<size_t>(k)] = e;
        denom += e;
    }
    for (double& p : c.probs) p /= denom;
    return {c.probs.data(), c.probs.size()};
}

std::vector<double> forward(const SorterModel& m, const float* window) {
    ForwardCache cache;
    forward(m, window, cache);
    return cache.probs;
}

double loss_cross_entropy(std::span<const double> probs, int label) {
    if (label < 0 || label >= static_cast<int>(probs.size()))
        throw ValidationError("loss: label " + std::to_string(label) + " out of range [0," +
                              std::to_string(probs.size()) + ")");
    return -std::log(std::max(probs[static_cast<size_t>(label)], 1e-12));
}

void backward(const SorterModel& m, const float* window, int label, ForwardCache& c,
              double* grad) {
    (void)window;  // activations are already cached
    const Backbone& bb = m.backbone;
    const BackboneConfig& cfg = bb.cfg;
    const int C = m.n_channels(), T = m.t_window();
    const int h2 = cfg.k_t2 / 2;
    const int tp1 = T + cfg.k_t1 - 1, tp2 = T + cfg.k_t2 - 1;
    const GradLayout L = grad_layout(m);
    const size_t fc_in = static_cast<size_t>(cfg.c_s) * T;

    // softmax + cross-entropy
    // dlogits[k] = probs[k] - [k == label]
    for (int k = 0; k < m.n_classes; ++k) {
        const double dl =
            c.probs[static_cast<size_t>(k)] - (k == label ? 1.0 : 0.0);
        grad[L.fc_b + static_cast<size_t>(k)] += dl;
        double* dw = grad + L.fc_w + static_cast<size_t>(k) * fc_in;
        axpy1(dw, static_cast<int>(fc_in), c.r3.data(), dl);
    }
    std::fill(c.d3.begin(), c.d3.end(), 0.0);
    for (int k = 0; k < m.n_classes; ++k) {
        const double dl = c.probs[static_cast<size_t>(k)] - (k == label ? 1.0 : 0.0);
        axpy1(c.d3.data(), static_cast<int>(fc_in),
              m.fc_w.data() + static_cast<size_t>(k) * fc_in, dl);
    }

    // norm3 + ReLU backward
    for (size_t i = 0; i < c.d3.size(); ++i)
        if (!(c.r3[i] > 0.0)) c.d3[i] = 0.0;
    norm_backward(c.x3hat.data(), c.d3.data(), c.d3.size(), bb.norm3_g.data(),
                  grad + L.norm3_g, grad + L.norm3_b, 1, cfg.c_s, T, c.inv3);

    // spatial backward
    const int q_total = C * cfg.c_t2;
    std::fill(c.d2.begin(), c.d2.end(), 0.0);
    for (int sft = 0; sft < cfg.c_s; ++sft) {
        const double* da3 = c.d3.data() + static_cast<size_t>(sft) * T;
        grad[L.spat_b + static_cast<size_t>(sft)] += sum(da3, static_cast<size_t>(T));
        double* dwrow = grad + L.spat_w + static_cast<size_t>(sft) * q_total;
        const double* wrow = bb.spat_w.data() + static_cast<size_t>(sft) * q_total;
        for (int q = 0; q < q_total; ++q) {
            const double* r2q = c.r2.data() + static_cast<size_t>(q) * T;
            dwrow[q] += dot(da3, r2q, static_cast<size_t>(T));
            axpy1(c.d2.data() + static_cast<size_t>(q) * T, T, da3, wrow[q]);
        }
    }

    // norm2 + ReLU backward
    for (size_t i = 0; i < c.d2.size(); ++i)
        if (!(c.r2[i] > 0.0)) c.d2[i] = 0.0;
    norm_backward(c.x2hat.data(), c.d2.data(), c.d2.size(), bb.norm2_g.data(),
                  grad + L.norm2_g, grad + L.norm2_b, C, cfg.c_t2, T, c.inv2);

    // conv2 backward: weight grads, then input grads via the flipped kernel
    for (int ch = 0; ch < C; ++ch) {
        for (int f = 0; f < cfg.c_t2; ++f) {
            const double* da2 = c.d2.data() + (static_cast<size_t>(ch) * cfg.c_t2 + f) * T;
            grad[L.conv2_b + static_cast<size_t>(f)] += sum(da2, static_cast<size_t>(T));
            for (int mf = 0; mf < cfg.c_t1; ++mf) {
                const double* r1row =
                    c.r1pad.data() + (static_cast<size_t>(ch) * cfg.c_t1 + mf) * tp2;
                double* dw = grad + L.conv2_w +
                             (static_cast<size_t>(f) * cfg.c_t1 + mf) * cfg.k_t2;
                for (int j = 0; j < cfg.k_t2; ++j)
                    dw[j] += dot(da2, r1row + j, static_cast<size_t>(T));
            }
            // pad for the transposed pass
            double* dst = c.d2pad.data() + (static_cast<size_t>(ch) * cfg.c_t2 + f) * tp2;
            std::memcpy(dst + h2, da2, sizeof(double) * static_cast<size_t>(T));
        }
    }
    std::fill(c.d1.begin(), c.d1.end(), 0.0);
    // reversed kernels regrouped so four f-rows fold per pass
    std::vector<double>& wrev = c.dwork;
    wrev.resize(static_cast<size_t>(cfg.c_t1) * cfg.c_t2 * cfg.k_t2);
    for (int mf = 0; mf < cfg.c_t1; ++mf)
        for (int f = 0; f < cfg.c_t2; ++f) {
            const double* w =
                bb.conv2_w.data() + (static_cast<size_t>(f) * cfg.c_t1 + mf) * cfg.k_t2;
            double* out = wrev.data() + (static_cast<size_t>(mf) * cfg.c_t2 + f) * cfg.k_t2;
            for (int j = 0; j < cfg.k_t2; ++j) out[j] = w[cfg.k_t2 - 1 - j];
        }
    for (int ch = 0; ch < C; ++ch) {
        const double* d2base = c.d2pad.data() + static_cast<size_t>(ch) * cfg.c_t2 * tp2;
        for (int mf = 0; mf < cfg.c_t1; ++mf) {
            double* d1row = c.d1.data() + (static_cast<size_t>(ch) * cfg.c_t1 + mf) * T;
            const double* wmf = wrev.data() + static_cast<size_t>(mf) * cfg.c_t2 * cfg.k_t2;
            for (int f = 0; f < cfg.c_t2; ++f)
                corr_rows(d2base + static_cast<size_t>(f) * tp2,
                          wmf + static_cast<size_t>(f) * cfg.k_t2, d1row, T, cfg.k_t2);
        }
    }

    // norm1 + ReLU backward. The ReLU mask needs the unpadded r1 values,
    // which live inside r1pad.
    {
        size_t e = 0;
        for (int ch = 0; ch < C; ++ch) {
            for (int mf = 0; mf < cfg.c_t1; ++mf) {
                const double* r1row =
                    c.r1pad.data() + (static_cast<size_t>(ch) * cfg.c_t1 + mf) * tp2 + h2;
                for (int t = 0; t < T; ++t, ++e)
                    if (!(r1row[t] > 0.0)) c.d1[e] = 0.0;
            }
        }
    }
    norm_backward(c.x1hat.data(), c.d1.data(), c.d1.size(), bb.norm1_g.data(),
                  grad + L.norm1_g, grad + L.norm1_b, C, cfg.c_t1, T, c.inv1);

    // conv1 weight grads
    for (int ch = 0; ch < C; ++ch) {
        const double* xrow = c.xpad.data() + static_cast<size_t>(ch) * tp1;
        for (int mf = 0; mf < cfg.c_t1; ++mf) {
            const double* da1 = c.d1.data() + (static_cast<size_t>(ch) * cfg.c_t1 + mf) * T;
            grad[L.conv1_b + static_cast<size_t>(mf)] += sum(da1, static_cast<size_t>(T));
            double* dw = grad + L.conv1_w + static_cast<size_t>(mf) * cfg.k_t1;
            for (int j = 0; j < cfg.k_t1; ++j)
                dw[j] += dot(da1, xrow + j, static_cast<size_t>(T));
        }
    }
}

namespace {

void check_dims(const SorterModel& m, const dataset::WindowDataset& ds) {
    if (ds.n_channels != m.n_channels() || ds.spec.t_window != m.t_window())
        throw ValidationError("model expects " + std::to_string(m.n_channels()) + "x" +
                              std::to_string(m.t_window()) + " windows, dataset has " +
                              std::to_string(ds.n_channels) + "x" +
                              std::to_string(ds.spec.t_window));
    if (ds.n_classes != m.n_classes)
        throw ValidationError("model has " + std::to_string(m.n_classes) +
                              " classes, dataset has " + std::to_string(ds.n_classes));
}

struct BatchWorkspace {
    std::vector<int64_t> sorted;
    std::vector<double> item_grads;
    std::vector<double> item_losses;
};

// Per-item gradients land in private slots (parallel), then fold in
// ascending-dataset-index order: bit-identical for any thread count or
// presentation order of `indices`.
void batch_gradient_ws(const SorterModel& m, const dataset::WindowDataset& ds,
                       std::span<const int64_t> indices, double* grad_sum, double* loss_sum,
                       BatchWorkspace& ws) {
    const size_t n_p = n_params(m);
    const int64_t n_items = static_cast<int64_t>(indices.size());
    ws.sorted.assign(indices.begin(), indices.end());
    std::sort(ws.sorted.begin(), ws.sorted.end());
    ws.item_grads.assign(static_cast<size_t>(n_items) * n_p, 0.0);
    ws.item_losses.assign(static_cast<size_t>(n_items), 0.0);

#pragma omp parallel
    {
        ForwardCache cache;
#pragma omp for schedule(static)
        for (int64_t i = 0; i < n_items; ++i) {
            const int64_t w = ws.sorted[static_cast<size_t>(i)];
            const float* win = ds.window_data(w);
            const auto probs = forward(m, win, cache);
            const int label = ds.labels[static_cast<size_t>(w)];
            ws.item_losses[static_cast<size_t>(i)] = loss_cross_entropy(probs, label);
            backward(m, win, label, cache, ws.item_grads.data() + static_cast<size_t>(i) * n_p);
        }
    }
    for (int64_t i = 0; i < n_items; ++i) {
        const double* g = ws.item_grads.data() + static_cast<size_t>(i) * n_p;
        for (size_t p = 0; p < n_p; ++p) grad_sum[p] += g[p];
        *loss_sum += ws.item_losses[static_cast<size_t>(i)];
    }
}

}  // namespace

void batch_gradient(const SorterModel& m, const dataset::WindowDataset& ds,
                    std::span<const int64_t> indices, double* grad_sum, double* loss_sum) {
    BatchWorkspace ws;
    batch_gradient_ws(m, ds, indices, grad_sum, loss_sum, ws);
}

TrainResult train(SorterModel& model, const dataset::WindowDataset& ds, const TrainConfig& cfg) {
    cfg.validate();
    ds.validate();
    if (ds.n_windows == 0) throw ValidationError("train: dataset is empty");
    check_dims(model, ds);

    const size_t n_p = n_params(model);
    std::vector<double> grad(n_p), adam_m(n_p, 0.0), adam_v(n_p, 0.0);

    // Flat parameter view in tensor order.
    std::vector<double*> param_ptrs;
    param_ptrs.reserve(n_p);
    for (const TensorRef& t : tensor_refs(model))
        for (double& x : *t.data) param_ptrs.push_back(&x);

    Rng shuffle_rng(derive_seed(cfg.seed, "shuffle"));
    std::vector<int64_t> order(static_cast<size_t>(ds.n_windows));
    for (int64_t i = 0; i < ds.n_windows; ++i) order[static_cast<size_t>(i)] = i;

    BatchWorkspace ws;
    TrainResult result;
    result.epoch_losses.reserve(static_cast<size_t>(cfg.epochs));
    int64_t step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (size_t i = order.size(); i > 1; --i) {
            const size_t j = static_cast<size_t>(shuffle_rng.next_below(i));
            std::swap(order[i - 1], order[j]);
        }
        double epoch_loss = 0.0;
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
            const size_t count = std::min(static_cast<size_t>(cfg.batch_size),
                                          order.size() - start);
            std::fill(grad.begin(), grad.end(), 0.0);
            double loss_sum = 0.0;
            batch_gradient_ws(model, ds, {order.data() + start, count}, grad.data(), &loss_sum,
                              ws);
            epoch_loss += loss_sum;

            ++step;
            const double scale = 1.0 / static_cast<double>(count);
            const double bc1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(step));
            const double bc2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(step));
            for (size_t p = 0; p < n_p; ++p) {
                const double g = grad[p] * scale;
                adam_m[p] = cfg.adam_beta1 * adam_m[p] + (1.0 - cfg.adam_beta1) * g;
                adam_v[p] = cfg.adam_beta2 * adam_v[p] + (1.0 - cfg.adam_beta2) * g * g;
                const double mhat = adam_m[p] / bc1;
                const double vhat = adam_v[p] / bc2;
                *param_ptrs[p] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.adam_eps);
            }
        }
        epoch_loss /= static_cast<double>(ds.n_windows);
        if (!std::isfinite(epoch_loss))
            throw DivergenceError("train: mean loss became non-finite in epoch " +
                                  std::to_string(epoch + 1));
        result.epoch_losses.push_back(epoch_loss);
    }
    return result;
}

Backbone pretrain(const Recording& rec, const GroundTruth& gt, const dataset::WindowSpec& wspec,
                  const BackboneConfig& bcfg, const TrainConfig& tcfg) {
    if (gt.n_neurons < 2)
        throw ValidationError("pretrain: recording must contain at least 2 neurons");
    Rng ds_rng(derive_seed(tcfg.seed, "pretrain-dataset"));
    const dataset::WindowDataset ds = dataset::build_dataset(rec, gt, wspec, ds_rng);
    Rng init_rng(derive_seed(tcfg.seed, "init"));
    Backbone bb = init_backbone(bcfg, rec.n_channels, wspec.t_window, init_rng);
    SorterModel model = init_model(bb, gt.n_neurons + 1, init_rng);
    train(model, ds, tcfg);
    return model.backbone;
}

SorterModel finetune(const Backbone& backbone, const dataset::WindowDataset& ds,
                     const TrainConfig& tcfg) {
    if (backbone.n_channels != ds.n_channels)
        throw ValidationError("finetune: backbone expects " +
                              std::to_string(backbone.n_channels) + " channels, dataset has " +
                              std::to_string(ds.n_channels));
    if (backbone.t_window != ds.spec.t_window)
        throw ValidationError("finetune: backbone t_window " +
                              std::to_string(backbone.t_window) + " vs dataset " +
                              std::to_string(ds.spec.t_window));
    Rng clf_rng(derive_seed(tcfg.seed, "classifier-init"));
    SorterModel model = init_model(backbone, ds.n_classes, clf_rng);
    train(model, ds, tcfg);
    return model;
}

}  // namespace fafesort::nn
