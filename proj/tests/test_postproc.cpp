#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "fafesort/postproc.hpp"
#include "fafesort/synth.hpp"

using namespace fafesort;
using namespace fafesort::postproc;

namespace {

ProbTrace make_trace(int64_t n, int k) {
    ProbTrace t;
    t.n_samples = n;
    t.n_classes = k;
    t.valid_begin = 0;
    t.valid_end = n;
    t.probs.assign(static_cast<size_t>(n) * static_cast<size_t>(k), 0.0);
    return t;
}

ProbTrace random_trace(int64_t n, int k, uint64_t seed) {
    ProbTrace t = make_trace(n, k);
    Rng rng(seed);
    for (int64_t i = 0; i < n; ++i) {
        double sum = 0;
        for (int c = 0; c < k; ++c) {
            const double v = rng.next_uniform();
            t.probs[static_cast<size_t>(i) * k + static_cast<size_t>(c)] = v;
            sum += v;
        }
        for (int c = 0; c < k; ++c) t.probs[static_cast<size_t>(i) * k + static_cast<size_t>(c)] /= sum;
    }
    return t;
}

nn::SorterModel small_model(uint64_t seed, int n_channels, int t_window, int n_classes) {
    nn::BackboneConfig cfg;
    cfg.c_t1 = 4;
    cfg.c_t2 = 3;
    cfg.c_s = 6;
    cfg.k_t1 = 7;
    cfg.k_t2 = 3;
    Rng rng(seed);
    nn::Backbone bb = nn::init_backbone(cfg, n_channels, t_window, rng);
    return nn::init_model(bb, n_classes, rng);
}

}  // namespace

TEST_CASE("triangle taps sum to one and ramp linearly") {
    const std::vector<double> t0 = triangle_taps(0);
    REQUIRE(t0.size() == 1);
    CHECK(t0[0] == 1.0);
    const std::vector<double> t2 = triangle_taps(2);
    REQUIRE(t2.size() == 5);
    for (int i = 0; i < 5; ++i)
        CHECK(t2[static_cast<size_t>(i)] ==
              doctest::Approx((i <= 2 ? i + 1 : 5 - i) / 9.0));
    for (int h = 0; h < 9; ++h) {
        const std::vector<double> taps = triangle_taps(h);
        double s = 0;
        for (double x : taps) s += x;
        CHECK(s == doctest::Approx(1.0));
    }
}

TEST_CASE("triangle filter: identity at h=0, impulse response, DC preservation") {
    ProbTrace t = make_trace(200, 3);
    Rng rng(1);
    for (auto& v : t.probs) v = rng.next_uniform();
    const ProbTrace id = triangle_filter_serial(t, 0);
    CHECK(id.probs == t.probs);

    ProbTrace imp = make_trace(200, 2);
    imp.probs[100 * 2 + 1] = 1.0;
    const ProbTrace f = triangle_filter_serial(imp, 2);
    for (int64_t i = 0; i < 200; ++i) {
        const double expect = (std::abs(i - 100) <= 2)
                                  ? triangle_taps(2)[static_cast<size_t>(i - 98)]
                                  : 0.0;
        CHECK(f.at(i, 1) == doctest::Approx(expect));
    }

    ProbTrace dc = make_trace(100, 2);
    for (int64_t i = 0; i < 100; ++i) dc.probs[static_cast<size_t>(i) * 2 + 1] = 0.37;
    const ProbTrace fdc = triangle_filter_serial(dc, 3);
    for (int64_t i = 3; i < 97; ++i) CHECK(fdc.at(i, 1) == doctest::Approx(0.37));
}

TEST_CASE("background class passes through untouched") {
    const ProbTrace t = random_trace(300, 4, 2);
    const ProbTrace f = triangle_filter_serial(t, 4);
    for (int64_t i = 0; i < 300; ++i) CHECK(f.at(i, 0) == t.at(i, 0));
}

TEST_CASE("triangle filter is linear") {
    const ProbTrace x = random_trace(256, 3, 3);
    const ProbTrace y = random_trace(256, 3, 4);
    const double a = 0.7, b = -0.3;
    ProbTrace mix = make_trace(256, 3);
    for (size_t i = 0; i < mix.probs.size(); ++i) mix.probs[i] = a * x.probs[i] + b * y.probs[i];
    const ProbTrace fx = triangle_filter_serial(x, 5);
    const ProbTrace fy = triangle_filter_serial(y, 5);
    const ProbTrace fmix = triangle_filter_serial(mix, 5);
    for (int64_t i = 0; i < 256; ++i)
        for (int k = 1; k < 3; ++k)
            CHECK(fmix.at(i, k) == doctest::Approx(a * fx.at(i, k) + b * fy.at(i, k))
                                       .epsilon(1e-9));
}

TEST_CASE("parallel filter equals serial bit-for-bit") {
    const ProbTrace t = random_trace(1000, 5, 5);
    const ProbTrace f1 = triangle_filter_serial(t, 5);
    const ProbTrace f2 = triangle_filter(t, 5, 2);
    CHECK(f1.probs == f2.probs);
}

TEST_CASE("peak detection rule and brute-force scan agree") {
    CHECK(detect_peaks({0, 1, 3, 2, 1}) == std::vector<int64_t>{2});
    CHECK(detect_peaks({0, 2, 2, 2, 0}) == std::vector<int64_t>{1});
    CHECK(detect_peaks({1, 2, 3, 4, 5}) == std::vector<int64_t>{});
    CHECK(detect_peaks({5, 4, 3}) == std::vector<int64_t>{});

    Rng rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> col(64);
        for (double& v : col) v = rng.next_below(6);  // plateaus likely
        std::vector<int64_t> expect;
        for (int64_t i = 1; i + 1 < 64; ++i)
            if (col[static_cast<size_t>(i)] > col[static_cast<size_t>(i - 1)] &&
                col[static_cast<size_t>(i)] >= col[static_cast<size_t>(i + 1)])
                expect.push_back(i);
        CHECK(detect_peaks(col) == expect);
    }
}

TEST_CASE("finalize: vacuous threshold, run de-duplication, blip suppression") {
    PostprocConfig cfg;
    cfg.triangle_half_width = 5;
    cfg.threshold = 1.0;
    const ProbTrace t = random_trace(400, 3, 8);
    CHECK(finalize(triangle_filter_serial(t, 5), cfg).spikes.empty());

    // one contiguous 11-sample run of p=0.9 -> one spike near its center
    ProbTrace run = make_trace(400, 2);
    for (int64_t i = 180; i < 191; ++i) run.probs[static_cast<size_t>(i) * 2 + 1] = 0.9;
    cfg.threshold = 0.5;
    const SortedOutput out = finalize(triangle_filter_serial(run, 5), cfg);
    REQUIRE(out.spikes.size() == 1);
    CHECK(out.spikes[0].neuron_id == 0);
    CHECK(std::abs(out.spikes[0].sample_index - 185) <= 1);
    CHECK(out.spikes[0].score > 0.5);

    // isolated single-sample blip of 0.6: filtered peak 0.6*6/36 = 0.1
    ProbTrace blip = make_trace(400, 2);
    blip.probs[200 * 2 + 1] = 0.6;
    const ProbTrace fblip = triangle_filter_serial(blip, 5);
    CHECK(fblip.at(200, 1) == doctest::Approx(0.1));
    CHECK(finalize(fblip, cfg).spikes.empty());
}

TEST_CASE("raising the threshold never adds spikes") {
    const ProbTrace t = random_trace(600, 4, 9);
    const ProbTrace f = triangle_filter_serial(t, 3);
    PostprocConfig lo, hi;
    lo.threshold = 0.3;
    hi.threshold = 0.6;
    const SortedOutput slo = finalize(f, lo);
    const SortedOutput shi = finalize(f, hi);
    CHECK(shi.spikes.size() <= slo.spikes.size());
    for (const SortedSpike& s : shi.spikes) {
        const bool present = std::any_of(slo.spikes.begin(), slo.spikes.end(), [&](const SortedSpike& q) {
            return q.neuron_id == s.neuron_id && q.sample_index == s.sample_index;
        });
        CHECK(present);
    }
}

TEST_CASE("tiled post-processing equals the global pass bit-for-bit") {
    const ProbTrace t = random_trace(997, 4, 11);
    const ProbTrace f = triangle_filter_serial(t, 5);
    PostprocConfig cfg;
    const SortedOutput whole = finalize(f, cfg);
    for (const int n_tiles : {3, 10}) {
        std::vector<SortedSpike> glued;
        for (int i = 0; i < n_tiles; ++i) {
            const int64_t b = t.n_samples * i / n_tiles;
            const int64_t e = t.n_samples * (i + 1) / n_tiles;
            const SortedOutput part = finalize_range(f, cfg, b, e);
            glued.insert(glued.end(), part.spikes.begin(), part.spikes.end());
        }
        REQUIRE(glued.size() == whole.spikes.size());
        for (size_t i = 0; i < glued.size(); ++i) {
            CHECK(glued[i].neuron_id == whole.spikes[i].neuron_id);
            CHECK(glued[i].sample_index == whole.spikes[i].sample_index);
            CHECK(glued[i].score == whole.spikes[i].score);
        }
    }
}

TEST_CASE("per-neuron spike indices are strictly increasing") {
    const ProbTrace t = random_trace(500, 3, 13);
    const SortedOutput out = finalize(triangle_filter_serial(t, 2), PostprocConfig{2, 0.4});
    std::vector<int64_t> last(3, -1);
    for (const SortedSpike& s : out.spikes) {
        CHECK(s.sample_index > last[static_cast<size_t>(s.neuron_id)]);
        last[static_cast<size_t>(s.neuron_id)] = s.sample_index;
    }
}

TEST_CASE("infer_trace: shape, edge rows, uniform degenerate model") {
    nn::SorterModel model = small_model(3, 4, 9, 3);
    for (const nn::TensorRef& t : nn::tensor_refs(model))
        std::fill(t.data->begin(), t.data->end(), 0.0);
    Recording rec;
    rec.n_channels = 4;
    rec.n_samples = 64;
    rec.sample_rate_hz = 1000;
    rec.geometry.pitch_um = 10;
    rec.geometry.name = "r";
    for (int c = 0; c < 4; ++c) rec.geometry.channel_positions.push_back({0.0, 0.0, 10.0 * c});
    rec.samples.assign(4 * 64, 1.5f);
    const ProbTrace trace = infer_trace(model, rec, 2);
    CHECK(trace.n_samples == rec.n_samples);
    CHECK(trace.valid_begin == 4);
    CHECK(trace.valid_end == 60);
    for (int64_t t = 0; t < trace.n_samples; ++t)
        for (int k = 0; k < 3; ++k) CHECK(trace.at(t, k) == doctest::Approx(1.0 / 3));
}

TEST_CASE("batched inference equals the sequential loop bit-for-bit") {
    nn::SorterModel model = small_model(17, 4, 9, 3);
    Recording rec;
    rec.n_channels = 4;
    rec.n_samples = 300;
    rec.sample_rate_hz = 1000;
    rec.geometry.pitch_um = 10;
    rec.geometry.name = "r";
    for (int c = 0; c < 4; ++c) rec.geometry.channel_positions.push_back({0.0, 0.0, 10.0 * c});
    Rng rng(23);
    rec.samples.resize(4 * 300);
    for (float& v : rec.samples) v = static_cast<float>(15.0 * rng.next_gaussian());

    const ProbTrace serial = infer_trace_serial(model, rec);
    const ProbTrace parallel = infer_trace(model, rec, 2);
    REQUIRE(serial.probs.size() == parallel.probs.size());
    CHECK(serial.probs == parallel.probs);

    // rows are the per-window forward outputs
    nn::ForwardCache cache;
    std::vector<float> win(4 * 9);
    for (int c = 0; c < 4; ++c)
        for (int t = 0; t < 9; ++t) win[static_cast<size_t>(c) * 9 + t] = rec.at(c, 100 - 4 + t);
    const auto probs = nn::forward(model, win.data(), cache);
    for (int k = 0; k < 3; ++k) CHECK(probs[static_cast<size_t>(k)] == serial.at(100, k));
}
