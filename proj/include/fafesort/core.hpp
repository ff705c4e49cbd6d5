#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace fafesort {

// Error taxonomy, mapped 1:1 to CLI exit codes (2/3/4).
struct ValidationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DivergenceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Vec3 {
    double x = 0.0;
    double y = 0.0;
    double z = 0.0;
};

double distance_um(const Vec3& a, const Vec3& b);

/// Electrode layout. Positions in micrometers, one per channel.
struct ProbeGeometry {
    std::vector<Vec3> channel_positions;
    double pitch_um = 0.0;
    std::string name;

    int n_channels() const { return static_cast<int>(channel_positions.size()); }
    void validate() const;
};

enum class ProbeKind { dense16, medium16, sparse16 };

ProbeKind probe_kind_from_string(std::string_view s);
std::string_view to_string(ProbeKind kind);

/// 16-channel, two-column probe at 6/15/20 um pitch.
ProbeGeometry standard_probe(ProbeKind kind);

/// Multi-channel voltage trace. Samples are stored channel-major
/// (samples[c * n_samples + t], microvolts) for fast window slicing;
/// the on-disk format is sample-major and converted on read/write.
struct Recording {
    int n_channels = 0;
    int64_t n_samples = 0;
    double sample_rate_hz = 0.0;
    ProbeGeometry geometry;
    std::vector<float> samples;

    float at(int c, int64_t t) const { return samples[static_cast<size_t>(c) * n_samples + t]; }
    const float* channel(int c) const { return samples.data() + static_cast<size_t>(c) * n_samples; }
    double duration_s() const { return sample_rate_hz > 0 ? n_samples / sample_rate_hz : 0.0; }
    void validate() const;
};

struct SpikeEvent {
    int32_t neuron_id = 0;
    int64_t sample_index = 0;
};

/// Known spike times per neuron. Spikes are kept sorted ascending by
/// sample index, ties broken by neuron id.
struct GroundTruth {
    int32_t n_neurons = 0;
    std::vector<SpikeEvent> spikes;

    void normalize();  // sort into the canonical order
    // n_samples < 0 skips the bounds check.
    void validate(int64_t n_samples = -1) const;
    std::vector<int64_t> count_per_neuron() const;
};

/// Deterministic portable PRNG (splitmix64). Same seed produces the same
/// stream on every platform; see README "Reproducibility" for the exact
/// state update and the uniform/gaussian mappings.
class Rng {
  public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64();
    /// Uniform in [0,1), 53-bit resolution.
    double next_uniform();
    /// Standard normal via the Marsaglia polar method (two uniforms per
    /// pair, rejection loop; the spare value is cached).
    double next_gaussian();
    /// Unbiased integer in [0, bound), bound >= 1.
    uint64_t next_below(uint64_t bound);

  private:
    uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

uint64_t fnv1a64(std::string_view s);

/// Stage sub-seed: one splitmix64 step of (root ^ fnv1a64(stage)).
uint64_t derive_seed(uint64_t root, std::string_view stage);
/// Indexed variant for per-channel / per-neuron streams.
uint64_t derive_seed(uint64_t root, std::string_view stage, uint64_t index);

}  // namespace fafesort
