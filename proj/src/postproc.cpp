#include "fafesort/postproc.hpp"

#include <algorithm>
#include <cstring>

#include "fafesort/parallel.hpp"

namespace fafesort::postproc {

void PostprocConfig::validate() const {
    if (triangle_half_width < 0)
        throw ValidationError("postproc: triangle_half_width must be >= 0");
    if (!(threshold > 0.0) || threshold > 1.0)
        throw ValidationError("postproc: threshold must be in (0, 1]");
}

std::vector<double> triangle_taps(int h) {
    const int n = 2 * h + 1;
    const double denom = static_cast<double>(h + 1) * static_cast<double>(h + 1);
    std::vector<double> taps(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i)
        taps[static_cast<size_t>(i)] = static_cast<double>(i <= h ? i + 1 : n - i) / denom;
    return taps;
}

namespace {

void uniform_row(double* row, int n_classes) {
    const double u = 1.0 / static_cast<double>(n_classes);
    for (int k = 0; k < n_classes; ++k) row[k] = u;
}

// Rows [t0, t1) of the trace, one window at a time. Shared by the serial
// and OpenMP paths so both produce identical bits.
void infer_rows(const nn::SorterModel& model, const Recording& rec, int64_t t0, int64_t t1,
                ProbTrace& trace, nn::ForwardCache& cache, std::vector<float>& winbuf) {
    const int T = model.t_window();
    const int half = T / 2;
    const int C = rec.n_channels;
    winbuf.resize(static_cast<size_t>(C) * static_cast<size_t>(T));
    for (int64_t t = t0; t < t1; ++t) {
        for (int c = 0; c < C; ++c)
            std::memcpy(winbuf.data() + static_cast<size_t>(c) * T,
                        rec.channel(c) + (t - half), sizeof(float) * static_cast<size_t>(T));
        const auto probs = nn::forward(model, winbuf.data(), cache);
        std::memcpy(trace.probs.data() + static_cast<size_t>(t) * trace.n_classes, probs.data(),
                    sizeof(double) * probs.size());
    }
}

ProbTrace make_trace_shell(const nn::SorterModel& model, const Recording& rec) {
    if (rec.n_channels != model.n_channels())
        throw ValidationError("infer: model expects " + std::to_string(model.n_channels()) +
                              " channels, recording has " + std::to_string(rec.n_channels));
    ProbTrace trace;
    trace.n_samples = rec.n_samples;
    trace.n_classes = model.n_classes;
    const int half = model.t_window() / 2;
    trace.valid_begin = std::min<int64_t>(half, rec.n_samples);
    trace.valid_end = std::max<int64_t>(trace.valid_begin, rec.n_samples - half);
    trace.probs.resize(static_cast<size_t>(rec.n_samples) * model.n_classes);
    for (int64_t t = 0; t < trace.valid_begin; ++t)
        uniform_row(trace.probs.data() + static_cast<size_t>(t) * trace.n_classes,
                    trace.n_classes);
    for (int64_t t = trace.valid_end; t < trace.n_samples; ++t)
        uniform_row(trace.probs.data() + static_cast<size_t>(t) * trace.n_classes,
                    trace.n_classes);
    return trace;
}

}  // namespace

ProbTrace infer_trace(const nn::SorterModel& model, const Recording& rec, int threads) {
    ProbTrace trace = make_trace_shell(model, rec);
    const int n_threads = effective_threads(threads);
#pragma omp parallel num_threads(n_threads)
    {
        nn::ForwardCache cache;
        std::vector<float> winbuf;
#pragma omp for schedule(static)
        for (int64_t t = trace.valid_begin; t < trace.valid_end; ++t)
            infer_rows(model, rec, t, t + 1, trace, cache, winbuf);
    }
    return trace;
}

ProbTrace infer_trace_serial(const nn::SorterModel& model, const Recording& rec) {
    ProbTrace trace = make_trace_shell(model, rec);
    nn::ForwardCache cache;
    std::vector<float> winbuf;
    infer_rows(model, rec, trace.valid_begin, trace.valid_end, trace, cache, winbuf);
    return trace;
}

namespace {

// Filtered rows [t0, t1): triangle kernel along time per non-background
// class, zero-padded at the trace edges; class 0 copied through.
void filter_rows(const ProbTrace& in, const std::vector<double>& taps, int h, int64_t t0,
                 int64_t t1, ProbTrace& out) {
    const int K = in.n_classes;
    std::vector<double> acc(static_cast<size_t>(K));
    for (int64_t t = t0; t < t1; ++t) {
        std::fill(acc.begin(), acc.end(), 0.0);
        const int64_t d_lo = std::max<int64_t>(-h, -t);
        const int64_t d_hi = std::min<int64_t>(h, in.n_samples - 1 - t);
        for (int64_t d = d_lo; d <= d_hi; ++d) {
            const double tap = taps[static_cast<size_t>(d + h)];
            const double* row = in.probs.data() + static_cast<size_t>(t + d) * K;
            for (int k = 1; k < K; ++k) acc[static_cast<size_t>(k)] += tap * row[k];
        }
        double* orow = out.probs.data() + static_cast<size_t>(t) * K;
        orow[0] = in.probs[static_cast<size_t>(t) * K];
        for (int k = 1; k < K; ++k) orow[k] = acc[static_cast<size_t>(k)];
    }
}

}  // namespace

ProbTrace triangle_filter(const ProbTrace& trace, int h, int threads) {
    if (h < 0) throw ValidationError("triangle_filter: h must be >= 0");
    ProbTrace out = trace;
    const std::vector<double> taps = triangle_taps(h);
    const int n_threads = effective_threads(threads);
    const int64_t n_chunks = std::min<int64_t>(trace.n_samples, 8LL * n_threads);
#pragma omp parallel for schedule(static) num_threads(n_threads)
    for (int64_t chunk = 0; chunk < n_chunks; ++chunk) {
        const int64_t t0 = trace.n_samples * chunk / n_chunks;
        const int64_t t1 = trace.n_samples * (chunk + 1) / n_chunks;
        filter_rows(trace, taps, h, t0, t1, out);
    }
    return out;
}

ProbTrace triangle_filter_serial(const ProbTrace& trace, int h) {
    if (h < 0) throw ValidationError("triangle_filter: h must be >= 0");
    ProbTrace out = trace;
    const std::vector<double> taps = triangle_taps(h);
    filter_rows(trace, taps, h, 0, trace.n_samples, out);
    return out;
}

void triangle_filter_range(const ProbTrace& trace, int h, int64_t begin, int64_t end,
                           ProbTrace& out) {
    if (h < 0) throw ValidationError("triangle_filter: h must be >= 0");
    const std::vector<double> taps = triangle_taps(h);
    filter_rows(trace, taps, h, begin, end, out);
}

std::vector<int64_t> detect_peaks(const std::vector<double>& column) {
    std::vector<int64_t> peaks;
    const int64_t n = static_cast<int64_t>(column.size());
    for (int64_t t = 1; t + 1 < n; ++t) {
        if (column[static_cast<size_t>(t)] > column[static_cast<size_t>(t - 1)] &&
            column[static_cast<size_t>(t)] >= column[static_cast<size_t>(t + 1)])
            peaks.push_back(t);
    }
    return peaks;
}

SortedOutput finalize_range(const ProbTrace& filtered, const PostprocConfig& cfg, int64_t begin,
                            int64_t end) {
    cfg.validate();
    const int K = filtered.n_classes;
    SortedOutput out;
    out.n_neurons = K - 1;
    const int64_t lo = std::max<int64_t>(begin, 1);
    const int64_t hi = std::min<int64_t>(end, filtered.n_samples - 1);
    for (int64_t t = lo; t < hi; ++t) {
        const double* prev = filtered.probs.data() + static_cast<size_t>(t - 1) * K;
        const double* cur = filtered.probs.data() + static_cast<size_t>(t) * K;
        const double* next = filtered.probs.data() + static_cast<size_t>(t + 1) * K;
        for (int k = 1; k < K; ++k) {
            const double v = cur[k];
            if (v > cfg.threshold && v > prev[k] && v >= next[k])
                out.spikes.push_back({k - 1, t, v});
        }
    }
    return out;
}

SortedOutput finalize(const ProbTrace& filtered, const PostprocConfig& cfg) {
    return finalize_range(filtered, cfg, 0, filtered.n_samples);
}

SortedOutput sort_recording(const nn::SorterModel& model, const Recording& rec,
                            const PostprocConfig& cfg, int threads) {
    cfg.validate();
    const ProbTrace trace = infer_trace(model, rec, threads);
    const ProbTrace filtered = triangle_filter(trace, cfg.triangle_half_width, threads);
    return finalize(filtered, cfg);
}

}  // namespace fafesort::postproc
