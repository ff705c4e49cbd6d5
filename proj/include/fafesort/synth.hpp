#pragma once

#include <cstdint>
#include <vector>

#include "fafesort/core.hpp"

namespace fafesort::synth {

/// One source unit: a unit-normalized temporal template scaled by
/// amplitude and an exponential spatial decay around `position`.
struct NeuronModel {
    Vec3 position;
    double amplitude_uv = 0.0;
    std::vector<double> waveform;  // odd length, |waveform[center]| == 1 and is the abs peak
    double firing_rate_hz = 0.0;
    double decay_um = 0.0;

    void validate() const;
};

enum class DriftKind { none, slow, fast, non_rigid };

DriftKind drift_kind_from_string(std::string_view s);
std::string_view to_string(DriftKind kind);

struct DriftSpec {
    DriftKind kind = DriftKind::none;
    double velocity_um_per_s = 0.0;
    double range_um = 0.0;
    double jump_period_s = 0.0;  // fast only
    double jump_max_um = 0.0;    // fast only

    /// Canonical per-kind defaults: slow v=10 r=30; fast jump 15 every 20 s,
    /// clamp 15; non_rigid v=80 r=10.
    static DriftSpec with_defaults(DriftKind kind);
};

/// Realized drift trajectory for one recording: fast-jump offsets and
/// non-rigid phases are drawn once at construction so displacement is a
/// pure function afterwards.
class DriftField {
  public:
    DriftField() = default;
    DriftField(const DriftSpec& spec, int n_neurons, double duration_s, Rng& rng);

    /// z-offset in micrometers at time t for the given neuron.
    double displacement_um(double t_s, int neuron_index) const;
    const DriftSpec& spec() const { return spec_; }

  private:
    DriftSpec spec_;
    std::vector<double> jump_offsets_;  // fast: cumulative clamped offset per period
    std::vector<double> phases_um_;     // non_rigid: per-neuron initial phase
};

struct SynthConfig {
    ProbeGeometry probe;
    int n_neurons = 20;
    double duration_s = 100.0;
    double noise_uv = 10.0;
    DriftSpec drift;
    double sample_rate_hz = 30000.0;
    double firing_rate_hz = 2.0;  // mean; per-neuron rates drawn in [0.5, 1.5]x
    // Cell-selection floors (0 disables): candidate positions/amplitudes
    // are redrawn until the strongest channel sees at least min_visible_uv
    // and the unit is at least min_separation_um from every earlier one.
    double min_visible_uv = 30.0;
    double min_separation_um = 20.0;
    uint64_t seed = 1;

    void validate() const;
};

struct SynthResult {
    Recording recording;
    GroundTruth ground_truth;
    std::vector<NeuronModel> neurons;
    DriftField drift;
};

/// Biphasic template: negative trough at the center, smaller delayed
/// positive lobe, normalized to |w[center]| == 1.
std::vector<double> make_biphasic_waveform(int n_samples, double trough_sigma_samples,
                                           double lobe_delay_samples, double lobe_ratio);

/// Add one spike's footprint (template x per-channel exponential decay)
/// into a channel-major double signal buffer. Exposed so tests can
/// reconstruct a synthesis bit-exactly.
void add_spike_footprint(std::vector<double>& signal, int n_channels, int64_t n_samples,
                         const ProbeGeometry& probe, const NeuronModel& neuron,
                         double z_offset_um, int64_t center_sample);

SynthResult synthesize(const SynthConfig& config);

}  // namespace fafesort::synth
