#include <cmath>

#include "doctest.h"
#include "fafesort/synth.hpp"

using namespace fafesort;
using namespace fafesort::synth;

namespace {

SynthConfig small_config(uint64_t seed) {
    SynthConfig cfg;
    cfg.probe = standard_probe(ProbeKind::medium16);
    cfg.n_neurons = 4;
    cfg.duration_s = 8.0;
    cfg.noise_uv = 10.0;
    cfg.sample_rate_hz = 10000.0;
    cfg.firing_rate_hz = 3.0;
    cfg.seed = seed;
    return cfg;
}

// Replays every footprint in injection order (per neuron, time-ascending).
std::vector<double> reconstruct_signal(const SynthResult& r) {
    std::vector<double> signal(r.recording.samples.size(), 0.0);
    for (int nrn = 0; nrn < r.ground_truth.n_neurons; ++nrn) {
        for (const SpikeEvent& e : r.ground_truth.spikes) {
            if (e.neuron_id != nrn) continue;
            const double t = static_cast<double>(e.sample_index) / r.recording.sample_rate_hz;
            add_spike_footprint(signal, r.recording.n_channels, r.recording.n_samples,
                                r.recording.geometry, r.neurons[static_cast<size_t>(nrn)],
                                r.drift.displacement_um(t, nrn), e.sample_index);
        }
    }
    return signal;
}

}  // namespace

TEST_CASE("synthesis is bit-identical for equal seeds") {
    const SynthResult a = synthesize(small_config(5));
    const SynthResult b = synthesize(small_config(5));
    CHECK(a.recording.samples == b.recording.samples);
    REQUIRE(a.ground_truth.spikes.size() == b.ground_truth.spikes.size());
    for (size_t i = 0; i < a.ground_truth.spikes.size(); ++i) {
        CHECK(a.ground_truth.spikes[i].neuron_id == b.ground_truth.spikes[i].neuron_id);
        CHECK(a.ground_truth.spikes[i].sample_index == b.ground_truth.spikes[i].sample_index);
    }
    const SynthResult c = synthesize(small_config(6));
    CHECK(a.recording.samples != c.recording.samples);
}

TEST_CASE("single footprint is the scaled template, zeros elsewhere") {
    const ProbeGeometry probe = standard_probe(ProbeKind::medium16);
    NeuronModel nm;
    nm.position = {7.5, 0.0, 50.0};
    nm.amplitude_uv = 120.0;
    nm.firing_rate_hz = 1.0;
    nm.decay_um = 25.0;
    nm.waveform = make_biphasic_waveform(21, 2.0, 4.0, 0.4);
    nm.validate();

    const int64_t n_samples = 3000;
    std::vector<double> signal(static_cast<size_t>(probe.n_channels()) * n_samples, 0.0);
    add_spike_footprint(signal, probe.n_channels(), n_samples, probe, nm, 0.0, 1000);

    for (int c = 0; c < probe.n_channels(); ++c) {
        const double dist = distance_um(nm.position, probe.channel_positions[static_cast<size_t>(c)]);
        const double amp = nm.amplitude_uv * std::exp(-dist / nm.decay_um);
        for (int64_t t = 0; t < n_samples; ++t) {
            const double v = signal[static_cast<size_t>(c) * n_samples + t];
            if (t >= 990 && t <= 1010)
                CHECK(v == amp * nm.waveform[static_cast<size_t>(t - 990)]);
            else
                CHECK(v == 0.0);
        }
    }
}

TEST_CASE("noise-free synthesis equals the replayed footprints exactly") {
    SynthConfig cfg = small_config(11);
    cfg.noise_uv = 0.0;
    const SynthResult r = synthesize(cfg);
    const std::vector<double> expected = reconstruct_signal(r);
    REQUIRE(expected.size() == r.recording.samples.size());
    for (size_t i = 0; i < expected.size(); ++i)
        REQUIRE(r.recording.samples[i] == static_cast<float>(expected[i]));
}

TEST_CASE("slow drift follows the triangle law") {
    const DriftSpec spec = DriftSpec::with_defaults(DriftKind::slow);
    Rng rng(1);
    const DriftField field(spec, 5, 100.0, rng);
    CHECK(field.displacement_um(0.0, 0) == doctest::Approx(0.0));
    CHECK(field.displacement_um(3.0, 0) == doctest::Approx(30.0));
    CHECK(field.displacement_um(6.0, 0) == doctest::Approx(0.0));
    CHECK(field.displacement_um(1.5, 0) == doctest::Approx(15.0));
    // coherent across neurons
    for (int n = 0; n < 5; ++n)
        CHECK(field.displacement_um(2.2, n) == field.displacement_um(2.2, 0));
}

TEST_CASE("fast drift jumps at period boundaries, bounded by the max jump") {
    const DriftSpec spec = DriftSpec::with_defaults(DriftKind::fast);
    Rng rng(42);
    const DriftField field(spec, 3, 100.0, rng);
    CHECK(field.displacement_um(19.99, 0) == 0.0);
    const double off = field.displacement_um(20.01, 1);
    CHECK(off != 0.0);
    CHECK(std::abs(off) <= 15.0);
    CHECK(field.displacement_um(39.9, 2) == off);  // piecewise constant, coherent
    CHECK(std::abs(field.displacement_um(95.0, 0)) <= spec.range_um);
}

TEST_CASE("non-rigid drift differs across neurons") {
    const DriftSpec spec = DriftSpec::with_defaults(DriftKind::non_rigid);
    Rng rng(9);
    const DriftField field(spec, 6, 50.0, rng);
    bool any_differ = false;
    for (int n = 1; n < 6; ++n)
        any_differ |= field.displacement_um(0.31, n) != field.displacement_um(0.31, 0);
    CHECK(any_differ);
    for (int n = 0; n < 6; ++n) CHECK(std::abs(field.displacement_um(17.3, n)) <= 10.0);
    CHECK(DriftField(DriftSpec{}, 3, 50.0, rng).displacement_um(25.0, 0) == 0.0);
}

TEST_CASE("refractory period holds in samples") {
    const SynthResult r = synthesize(small_config(13));
    const int64_t refr = static_cast<int64_t>(
        std::ceil(0.002 * r.recording.sample_rate_hz));
    std::vector<int64_t> last(static_cast<size_t>(r.ground_truth.n_neurons), -refr);
    for (const SpikeEvent& e : r.ground_truth.spikes) {
        if (last[static_cast<size_t>(e.neuron_id)] >= 0)
            CHECK(e.sample_index - last[static_cast<size_t>(e.neuron_id)] >= refr);
        last[static_cast<size_t>(e.neuron_id)] = e.sample_index;
    }
    for (int64_t c : r.ground_truth.count_per_neuron()) CHECK(c > 0);
}

TEST_CASE("noise variance scales monotonically for a fixed seed") {
    SynthConfig cfg = small_config(17);
    auto noise_var = [&](double noise_uv) {
        cfg.noise_uv = noise_uv;
        const SynthResult r = synthesize(cfg);
        const std::vector<double> clean = reconstruct_signal(r);
        double sq = 0;
        for (size_t i = 0; i < clean.size(); ++i) {
            const double d = r.recording.samples[i] - clean[i];
            sq += d * d;
        }
        return sq / static_cast<double>(clean.size());
    };
    const double v5 = noise_var(5.0);
    const double v10 = noise_var(10.0);
    const double v20 = noise_var(20.0);
    CHECK(v5 < v10);
    CHECK(v10 < v20);
    CHECK(v10 == doctest::Approx(100.0).epsilon(0.05));
}

TEST_CASE("cell selection enforces visibility and separation floors") {
    SynthConfig cfg = small_config(23);
    cfg.n_neurons = 10;
    const SynthResult r = synthesize(cfg);
    REQUIRE(r.neurons.size() == 10);
    for (size_t i = 0; i < r.neurons.size(); ++i) {
        double best = 0.0;
        for (const Vec3& ch : cfg.probe.channel_positions)
            best = std::max(best, r.neurons[i].amplitude_uv *
                                      std::exp(-distance_um(r.neurons[i].position, ch) /
                                               r.neurons[i].decay_um));
        CHECK(best >= cfg.min_visible_uv);
        for (size_t j = 0; j < i; ++j)
            CHECK(distance_um(r.neurons[i].position, r.neurons[j].position) >=
                  cfg.min_separation_um);
    }
    // infeasible floors are reported
    SynthConfig bad = small_config(23);
    bad.n_neurons = 2;
    bad.min_visible_uv = 1e6;
    CHECK_THROWS_WITH_AS(synthesize(bad), doctest::Contains("place neuron"), ValidationError);
}

TEST_CASE("config validation rejects too-short recordings") {
    SynthConfig cfg = small_config(1);
    cfg.duration_s = 1.0;
    cfg.firing_rate_hz = 1.0;  // min per-neuron rate 0.5 Hz -> expected 0.5 spikes
    CHECK_THROWS_WITH_AS(synthesize(cfg), doctest::Contains("expected spikes"), ValidationError);
    cfg.duration_s = 0.0;
    CHECK_THROWS_AS(synthesize(cfg), ValidationError);
    cfg.duration_s = 10.0;
    cfg.n_neurons = 0;
    CHECK_THROWS_AS(synthesize(cfg), ValidationError);
}
