#include "fafesort/core.hpp"

#include <algorithm>
#include <cmath>

namespace fafesort {

double distance_um(const Vec3& a, const Vec3& b) {
    const double dx = a.x - b.x;
    const double dy = a.y - b.y;
    const double dz = a.z - b.z;
    return std::sqrt(dx * dx + dy * dy + dz * dz);
}

void ProbeGeometry::validate() const {
    if (channel_positions.empty())
        throw ValidationError("probe '" + name + "': needs at least one channel");
    if (!(pitch_um > 0.0))
        throw ValidationError("probe '" + name + "': pitch_um must be > 0");
    for (size_t i = 0; i < channel_positions.size(); ++i) {
        for (size_t j = i + 1; j < channel_positions.size(); ++j) {
            const Vec3& a = channel_positions[i];
            const Vec3& b = channel_positions[j];
            if (a.x == b.x && a.y == b.y && a.z == b.z)
                throw ValidationError("probe '" + name + "': channels " + std::to_string(i) +
                                      " and " + std::to_string(j) + " share a position");
        }
    }
}

ProbeKind probe_kind_from_string(std::string_view s) {
    if (s == "dense16") return ProbeKind::dense16;
    if (s == "medium16") return ProbeKind::medium16;
    if (s == "sparse16") return ProbeKind::sparse16;
    throw ValidationError("unknown probe kind '" + std::string(s) +
                          "' (expected dense16|medium16|sparse16)");
}

std::string_view to_string(ProbeKind kind) {
    switch (kind) {
        case ProbeKind::dense16: return "dense16";
        case ProbeKind::medium16: return "medium16";
        case ProbeKind::sparse16: return "sparse16";
    }
    return "?";
}

ProbeGeometry standard_probe(ProbeKind kind) {
    double pitch = 0.0;
    switch (kind) {
        case ProbeKind::dense16: pitch = 6.0; break;
        case ProbeKind::medium16: pitch = 15.0; break;
        case ProbeKind::sparse16: pitch = 20.0; break;
    }
    ProbeGeometry g;
    g.pitch_um = pitch;
    g.name = std::string(to_string(kind));
    g.channel_positions.reserve(16);
    // Two columns of eight rows; rows run along z (the drift axis).
    for (int row = 0; row < 8; ++row) {
        g.channel_positions.push_back({0.0, 0.0, row * pitch});
        g.channel_positions.push_back({pitch, 0.0, row * pitch});
    }
    g.validate();
    return g;
}

void Recording::validate() const {
    if (n_channels != geometry.n_channels())
        throw ValidationError("recording: " + std::to_string(n_channels) +
                              " channels but geometry has " +
                              std::to_string(geometry.n_channels()));
    if (!(sample_rate_hz > 0.0)) throw ValidationError("recording: sample_rate_hz must be > 0");
    if (samples.size() != static_cast<size_t>(n_channels) * static_cast<size_t>(n_samples))
        throw ValidationError("recording: sample buffer size mismatch");
    for (float v : samples) {
        if (!std::isfinite(v)) throw ValidationError("recording: non-finite sample value");
    }
    geometry.validate();
}

void GroundTruth::normalize() {
    std::sort(spikes.begin(), spikes.end(), [](const SpikeEvent& a, const SpikeEvent& b) {
        if (a.sample_index != b.sample_index) return a.sample_index < b.sample_index;
        return a.neuron_id < b.neuron_id;
    });
}

void GroundTruth::validate(int64_t n_samples) const {
    for (size_t i = 0; i < spikes.size(); ++i) {
        const SpikeEvent& e = spikes[i];
        if (e.neuron_id < 0 || e.neuron_id >= n_neurons)
            throw ValidationError("ground truth: neuron id " + std::to_string(e.neuron_id) +
                                  " out of range [0," + std::to_string(n_neurons) + ")");
        if (e.sample_index < 0 || (n_samples >= 0 && e.sample_index >= n_samples))
            throw ValidationError("ground truth: sample index " +
                                  std::to_string(e.sample_index) + " out of range");
        if (i > 0) {
            const SpikeEvent& p = spikes[i - 1];
            const bool ordered = p.sample_index < e.sample_index ||
                                 (p.sample_index == e.sample_index && p.neuron_id <= e.neuron_id);
            if (!ordered) throw ValidationError("ground truth: spikes not in canonical order");
        }
    }
}

std::vector<int64_t> GroundTruth::count_per_neuron() const {
    std::vector<int64_t> counts(static_cast<size_t>(n_neurons), 0);
    for (const SpikeEvent& e : spikes) counts[static_cast<size_t>(e.neuron_id)]++;
    return counts;
}

uint64_t Rng::next_u64() {
    // splitmix64 (Steele, Lea, Flood 2014 mixing constants)
    state_ += 0x9E3779B97F4A7C15ULL;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

double Rng::next_uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::next_gaussian() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u, v, s;
    do {
        u = 2.0 * next_uniform() - 1.0;
        v = 2.0 * next_uniform() - 1.0;
        s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double f = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * f;
    has_spare_ = true;
    return u * f;
}

uint64_t Rng::next_below(uint64_t bound) {
    if (bound == 0) throw ValidationError("Rng::next_below: bound must be >= 1");
    const uint64_t min = (0 - bound) % bound;  // 2^64 mod bound
    for (;;) {
        const uint64_t x = next_u64();
        if (x >= min) return x % bound;
    }
}

uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x00000100000001B3ULL;
    }
    return h;
}

uint64_t derive_seed(uint64_t root, std::string_view stage) {
    Rng r(root ^ fnv1a64(stage));
    return r.next_u64();
}

uint64_t derive_seed(uint64_t root, std::string_view stage, uint64_t index) {
    uint64_t h = fnv1a64(stage);
    for (int i = 0; i < 8; ++i) {
        h ^= (index >> (8 * i)) & 0xFF;
        h *= 0x00000100000001B3ULL;
    }
    Rng r(root ^ h);
    return r.next_u64();
}

}  // namespace fafesort
