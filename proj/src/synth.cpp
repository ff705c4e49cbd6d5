#include "fafesort/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>

#include "fafesort/parallel.hpp"

namespace fafesort::synth {

void NeuronModel::validate() const {
    if (!(amplitude_uv > 0.0)) throw ValidationError("neuron: amplitude_uv must be > 0");
    if (!(firing_rate_hz > 0.0)) throw ValidationError("neuron: firing_rate_hz must be > 0");
    if (!(decay_um > 0.0)) throw ValidationError("neuron: decay_um must be > 0");
    if (waveform.empty() || waveform.size() % 2 == 0)
        throw ValidationError("neuron: waveform length must be odd");
    const size_t center = waveform.size() / 2;
    double max_abs = 0.0;
    size_t argmax = 0;
    for (size_t i = 0; i < waveform.size(); ++i) {
        const double a = std::abs(waveform[i]);
        if (a > max_abs) {
            max_abs = a;
            argmax = i;
        }
    }
    if (argmax != center || std::abs(max_abs - 1.0) > 1e-9)
        throw ValidationError("neuron: waveform abs peak must be 1 at the center sample");
}

DriftKind drift_kind_from_string(std::string_view s) {
    if (s == "none") return DriftKind::none;
    if (s == "slow") return DriftKind::slow;
    if (s == "fast") return DriftKind::fast;
    if (s == "non_rigid" || s == "non-rigid") return DriftKind::non_rigid;
    throw ValidationError("unknown drift kind '" + std::string(s) +
                          "' (expected none|slow|fast|non_rigid)");
}

std::string_view to_string(DriftKind kind) {
    switch (kind) {
        case DriftKind::none: return "none";
        case DriftKind::slow: return "slow";
        case DriftKind::fast: return "fast";
        case DriftKind::non_rigid: return "non_rigid";
    }
    return "?";
}

DriftSpec DriftSpec::with_defaults(DriftKind kind) {
    DriftSpec s;
    s.kind = kind;
    switch (kind) {
        case DriftKind::none: break;
        case DriftKind::slow:
            s.velocity_um_per_s = 10.0;
            s.range_um = 30.0;
            break;
        case DriftKind::fast:
            s.jump_max_um = 15.0;
            s.jump_period_s = 20.0;
            s.range_um = 15.0;
            break;
        case DriftKind::non_rigid:
            s.velocity_um_per_s = 80.0;
            s.range_um = 10.0;
            break;
    }
    return s;
}

namespace {

// One-sided triangle wave: 0 -> range -> 0 with slope `velocity`.
double triangle(double pos, double range) {
    if (!(range > 0.0)) return 0.0;
    double ph = std::fmod(pos, 2.0 * range);
    if (ph < 0.0) ph += 2.0 * range;
    return ph <= range ? ph : 2.0 * range - ph;
}

}  // namespace

DriftField::DriftField(const DriftSpec& spec, int n_neurons, double duration_s, Rng& rng)
    : spec_(spec) {
    if (spec_.kind == DriftKind::fast) {
        if (!(spec_.jump_period_s > 0.0))
            throw ValidationError("drift fast: jump_period_s must be > 0");
        const int n_jumps = static_cast<int>(std::floor(duration_s / spec_.jump_period_s)) + 1;
        jump_offsets_.assign(static_cast<size_t>(n_jumps) + 1, 0.0);
        for (size_t j = 1; j < jump_offsets_.size(); ++j) {
            double off =
                jump_offsets_[j - 1] + (2.0 * rng.next_uniform() - 1.0) * spec_.jump_max_um;
            if (spec_.range_um > 0.0)
                off = std::clamp(off, -spec_.range_um, spec_.range_um);
            jump_offsets_[j] = off;
        }
    } else if (spec_.kind == DriftKind::non_rigid) {
        phases_um_.reserve(static_cast<size_t>(n_neurons));
        for (int i = 0; i < n_neurons; ++i)
            phases_um_.push_back(rng.next_uniform() * 2.0 * spec_.range_um);
    }
}

double DriftField::displacement_um(double t_s, int neuron_index) const {
    switch (spec_.kind) {
        case DriftKind::none: return 0.0;
        case DriftKind::slow: return triangle(spec_.velocity_um_per_s * t_s, spec_.range_um);
        case DriftKind::fast: {
            const size_t period = static_cast<size_t>(std::floor(t_s / spec_.jump_period_s));
            if (jump_offsets_.empty()) return 0.0;
            return jump_offsets_[std::min(period, jump_offsets_.size() - 1)];
        }
        case DriftKind::non_rigid: {
            const double phase = phases_um_.empty()
                                     ? 0.0
                                     : phases_um_[static_cast<size_t>(neuron_index) %
                                                  phases_um_.size()];
            return triangle(phase + spec_.velocity_um_per_s * t_s, spec_.range_um);
        }
    }
    return 0.0;
}

void SynthConfig::validate() const {
    probe.validate();
    if (n_neurons < 1) throw ValidationError("synth: n_neurons must be >= 1");
    if (!(duration_s > 0.0)) throw ValidationError("synth: duration_s must be > 0");
    if (noise_uv < 0.0) throw ValidationError("synth: noise_uv must be >= 0");
    if (!(sample_rate_hz > 0.0)) throw ValidationError("synth: sample_rate_hz must be > 0");
    if (!(firing_rate_hz > 0.0)) throw ValidationError("synth: firing_rate_hz must be > 0");
    // Per-neuron rates go as low as 0.5x the configured mean.
    const double min_expected = duration_s * 0.5 * firing_rate_hz;
    if (min_expected < 1.0)
        throw ValidationError(
            "synth: expected spikes per neuron < 1 (duration " + std::to_string(duration_s) +
            " s at minimum rate " + std::to_string(0.5 * firing_rate_hz) +
            " Hz); increase duration or firing rate");
}

std::vector<double> make_biphasic_waveform(int n_samples, double trough_sigma_samples,
                                           double lobe_delay_samples, double lobe_ratio) {
    if (n_samples < 3 || n_samples % 2 == 0)
        throw ValidationError("waveform length must be odd and >= 3");
    std::vector<double> w(static_cast<size_t>(n_samples));
    const int c = n_samples / 2;
    const double s1 = std::max(trough_sigma_samples, 0.5);
    const double s2 = 1.5 * s1;
    for (int i = 0; i < n_samples; ++i) {
        const double u = (i - c) / s1;
        const double v = (i - c - lobe_delay_samples) / s2;
        w[static_cast<size_t>(i)] = -std::exp(-0.5 * u * u) + lobe_ratio * std::exp(-0.5 * v * v);
    }
    const double scale = 1.0 / std::abs(w[static_cast<size_t>(c)]);
    for (double& x : w) x *= scale;
    return w;
}

void add_spike_footprint(std::vector<double>& signal, int n_channels, int64_t n_samples,
                         const ProbeGeometry& probe, const NeuronModel& neuron,
                         double z_offset_um, int64_t center_sample) {
    const int w_len = static_cast<int>(neuron.waveform.size());
    const int half = w_len / 2;
    Vec3 pos = neuron.position;
    pos.z += z_offset_um;
    for (int c = 0; c < n_channels; ++c) {
        const double dist = distance_um(pos, probe.channel_positions[static_cast<size_t>(c)]);
        const double amp = neuron.amplitude_uv * std::exp(-dist / neuron.decay_um);
        double* chan = signal.data() + static_cast<size_t>(c) * n_samples;
        for (int w = 0; w < w_len; ++w) {
            const int64_t idx = center_sample + w - half;
            if (idx >= 0 && idx < n_samples) chan[idx] += amp * neuron.waveform[static_cast<size_t>(w)];
        }
    }
}

SynthResult synthesize(const SynthConfig& config) {
    config.validate();
    const int n_channels = config.probe.n_channels();
    const int64_t n_samples =
        static_cast<int64_t>(std::llround(config.duration_s * config.sample_rate_hz));
    if (n_samples < 1) throw ValidationError("synth: recording would be empty");

    // Template length: 2 ms rounded up to odd.
    int w_len = static_cast<int>(std::ceil(0.002 * config.sample_rate_hz));
    if (w_len % 2 == 0) w_len += 1;
    w_len = std::max(w_len, 3);

    // Neuron placement box: probe hull extended by 50 um on every axis.
    Vec3 lo = config.probe.channel_positions.front();
    Vec3 hi = lo;
    for (const Vec3& p : config.probe.channel_positions) {
        lo.x = std::min(lo.x, p.x);
        lo.y = std::min(lo.y, p.y);
        lo.z = std::min(lo.z, p.z);
        hi.x = std::max(hi.x, p.x);
        hi.y = std::max(hi.y, p.y);
        hi.z = std::max(hi.z, p.z);
    }
    const double margin = 50.0;

    // Neuron parameters come off the master stream in a fixed order so the
    // whole synthesis is reproducible from the seed alone.
    Rng master(config.seed);
    const double samples_per_ms = config.sample_rate_hz / 1000.0;
    std::vector<NeuronModel> neurons;
    neurons.reserve(static_cast<size_t>(config.n_neurons));
    for (int i = 0; i < config.n_neurons; ++i) {
        NeuronModel nm;
        nm.decay_um = 25.0;
        // Cell selection: redraw position+amplitude until the unit clears
        // the visibility and separation floors.
        bool placed = false;
        for (int attempt = 0; attempt < 10000; ++attempt) {
            nm.position.x = lo.x - margin + master.next_uniform() * (hi.x - lo.x + 2 * margin);
            nm.position.y = lo.y - margin + master.next_uniform() * (hi.y - lo.y + 2 * margin);
            nm.position.z = lo.z - margin + master.next_uniform() * (hi.z - lo.z + 2 * margin);
            nm.amplitude_uv = 60.0 + master.next_uniform() * 140.0;
            if (config.min_visible_uv > 0.0) {
                double best = 0.0;
                for (const Vec3& ch : config.probe.channel_positions)
                    best = std::max(best, nm.amplitude_uv *
                                              std::exp(-distance_um(nm.position, ch) /
                                                       nm.decay_um));
                if (best < config.min_visible_uv) continue;
            }
            if (config.min_separation_um > 0.0) {
                bool crowded = false;
                for (const NeuronModel& other : neurons)
                    if (distance_um(nm.position, other.position) < config.min_separation_um)
                        crowded = true;
                if (crowded) continue;
            }
            placed = true;
            break;
        }
        if (!placed)
            throw ValidationError("synth: could not place neuron " + std::to_string(i) +
                                  " under the visibility/separation floors");
        nm.firing_rate_hz = config.firing_rate_hz * (0.5 + master.next_uniform());
        const double sigma_ms = 0.10 + master.next_uniform() * 0.15;
        const double delay_ms = 0.30 + master.next_uniform() * 0.30;
        const double ratio = 0.25 + master.next_uniform() * 0.25;
        nm.waveform = make_biphasic_waveform(w_len, sigma_ms * samples_per_ms,
                                             delay_ms * samples_per_ms, ratio);
        nm.validate();
        neurons.push_back(std::move(nm));
    }

    Rng drift_rng(derive_seed(config.seed, "drift"));
    DriftField drift(config.drift, config.n_neurons, config.duration_s, drift_rng);

    // Poisson trains with an absolute refractory period, drawn in the
    // sample domain so the 2 ms gap holds exactly in samples.
    const int64_t refractory =
        static_cast<int64_t>(std::ceil(0.002 * config.sample_rate_hz));
    std::vector<std::vector<int64_t>> trains(static_cast<size_t>(config.n_neurons));
    for (int i = 0; i < config.n_neurons; ++i) {
        Rng rng(derive_seed(config.seed, "spikes", static_cast<uint64_t>(i)));
        const double rate = neurons[static_cast<size_t>(i)].firing_rate_hz;
        auto gap = [&]() {
            const double e = -std::log(1.0 - rng.next_uniform()) / rate;
            return static_cast<int64_t>(std::llround(e * config.sample_rate_hz));
        };
        int64_t s = gap();
        while (s < n_samples) {
            trains[static_cast<size_t>(i)].push_back(s);
            s += refractory + gap();
        }
    }

    std::vector<double> signal(static_cast<size_t>(n_channels) * static_cast<size_t>(n_samples),
                               0.0);
    GroundTruth gt;
    gt.n_neurons = config.n_neurons;
    for (int i = 0; i < config.n_neurons; ++i) {
        for (int64_t s : trains[static_cast<size_t>(i)]) {
            const double t = static_cast<double>(s) / config.sample_rate_hz;
            add_spike_footprint(signal, n_channels, n_samples, config.probe,
                                neurons[static_cast<size_t>(i)], drift.displacement_um(t, i), s);
            gt.spikes.push_back({i, s});
        }
    }
    gt.normalize();

    if (config.noise_uv > 0.0) {
        // Independent per-channel streams keep this deterministic under OpenMP.
#pragma omp parallel for schedule(static)
        for (int c = 0; c < n_channels; ++c) {
            Rng rng(derive_seed(config.seed, "noise", static_cast<uint64_t>(c)));
            double* chan = signal.data() + static_cast<size_t>(c) * n_samples;
            for (int64_t t = 0; t < n_samples; ++t) chan[t] += config.noise_uv * rng.next_gaussian();
        }
    }

    SynthResult out;
    out.recording.n_channels = n_channels;
    out.recording.n_samples = n_samples;
    out.recording.sample_rate_hz = config.sample_rate_hz;
    out.recording.geometry = config.probe;
    out.recording.samples.resize(signal.size());
    for (size_t i = 0; i < signal.size(); ++i)
        out.recording.samples[i] = static_cast<float>(signal[i]);
    out.ground_truth = std::move(gt);
    out.neurons = std::move(neurons);
    out.drift = std::move(drift);
    return out;
}

}  // namespace fafesort::synth
