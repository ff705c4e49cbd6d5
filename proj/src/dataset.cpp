#include "fafesort/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace fafesort::dataset {

int WindowSpec::default_t_window(double sample_rate_hz) {
    int n = static_cast<int>(std::ceil(0.002 * sample_rate_hz));
    if (n % 2 == 0) n += 1;
    return std::max(n, 3);
}

void WindowSpec::validate() const {
    if (t_window < 3 || t_window % 2 == 0)
        throw ValidationError("window spec: t_window must be odd and >= 3");
    if (t_shift < 0 || 2 * t_shift >= t_window)
        throw ValidationError("window spec: need 0 <= t_shift < t_window/2");
    if (center_tolerance < 0) throw ValidationError("window spec: center_tolerance must be >= 0");
}

int64_t WindowDataset::count_spike_windows() const {
    int64_t n = 0;
    for (int32_t l : labels) n += (l != 0);
    return n;
}

int64_t WindowDataset::count_nospike_windows() const {
    return static_cast<int64_t>(labels.size()) - count_spike_windows();
}

void WindowDataset::validate() const {
    spec.validate();
    if (n_windows != static_cast<int64_t>(labels.size()) ||
        n_windows != static_cast<int64_t>(centers.size()) ||
        n_windows != static_cast<int64_t>(group.size()) ||
        data.size() != static_cast<size_t>(n_windows) * window_size())
        throw ValidationError("dataset: inconsistent buffer sizes");
    for (int32_t l : labels)
        if (l < 0 || l >= n_classes) throw ValidationError("dataset: label out of range");
}

namespace {

// Nearest ground-truth spike to `center`; ties on distance go to the
// lower neuron id. gt must be in canonical order.
const SpikeEvent& nearest_spike(const GroundTruth& gt, int64_t center) {
    const auto& sp = gt.spikes;
    auto it = std::lower_bound(sp.begin(), sp.end(), center,
                               [](const SpikeEvent& e, int64_t c) { return e.sample_index < c; });
    size_t best = sp.size();
    int64_t best_dist = INT64_MAX;
    auto consider = [&](size_t i) {
        const int64_t d = std::abs(sp[i].sample_index - center);
        if (d < best_dist || (d == best_dist && best < sp.size() &&
                              sp[i].neuron_id < sp[best].neuron_id)) {
            best = i;
            best_dist = d;
        }
    };
    for (size_t i = static_cast<size_t>(it - sp.begin()); i < sp.size(); ++i) {
        if (sp[i].sample_index - center > best_dist) break;
        consider(i);
    }
    for (size_t i = static_cast<size_t>(it - sp.begin()); i-- > 0;) {
        if (center - sp[i].sample_index > best_dist) break;
        consider(i);
    }
    return sp[best];
}

void extract_window(const Recording& rec, int64_t center, int half, float* out) {
    const int64_t lo = center - half;
    const int t_window = 2 * half + 1;
    for (int c = 0; c < rec.n_channels; ++c) {
        const float* chan = rec.channel(c);
        float* row = out + static_cast<size_t>(c) * t_window;
        for (int t = 0; t < t_window; ++t) {
            const int64_t idx = lo + t;
            row[t] = (idx >= 0 && idx < rec.n_samples) ? chan[idx] : 0.0f;
        }
    }
}

}  // namespace

WindowDataset build_dataset(const Recording& rec, const GroundTruth& gt, const WindowSpec& spec,
                            Rng& rng) {
    spec.validate();
    gt.validate(rec.n_samples);
    const int half = spec.t_window / 2;
    const int64_t n_spikes = static_cast<int64_t>(gt.spikes.size());
    const int64_t per_spike = 2 * spec.t_shift + 1;
    const int64_t n_pos = n_spikes * per_spike;

    WindowDataset ds;
    ds.spec = spec;
    ds.n_channels = rec.n_channels;
    ds.n_classes = gt.n_neurons + 1;
    ds.n_windows = 2 * n_pos;
    ds.labels.resize(static_cast<size_t>(ds.n_windows));
    ds.centers.resize(static_cast<size_t>(ds.n_windows));
    ds.group.resize(static_cast<size_t>(ds.n_windows));
    ds.group_neuron.resize(static_cast<size_t>(n_spikes));

    for (int64_t k = 0; k < n_spikes; ++k)
        ds.group_neuron[static_cast<size_t>(k)] = gt.spikes[static_cast<size_t>(k)].neuron_id;

    // Spike windows: one group of 2*t_shift+1 center offsets per spike. The
    // label follows the spike nearest that window's center, so colliding
    // spikes resolve consistently.
    for (int64_t k = 0; k < n_spikes; ++k) {
        const int64_t s = gt.spikes[static_cast<size_t>(k)].sample_index;
        for (int d = -spec.t_shift; d <= spec.t_shift; ++d) {
            const int64_t w = k * per_spike + (d + spec.t_shift);
            const int64_t center = s + d;
            ds.centers[static_cast<size_t>(w)] = center;
            ds.labels[static_cast<size_t>(w)] = nearest_spike(gt, center).neuron_id + 1;
            ds.group[static_cast<size_t>(w)] = static_cast<int32_t>(k);
        }
    }

    // No-spike windows: uniform over interior centers with no spike within
    // t_window/2, distinct centers, one stream so the draw is reproducible.
    if (n_pos > 0) {
        const int64_t lo_valid = half;
        const int64_t hi_valid = rec.n_samples - 1 - half;  // inclusive
        struct Interval {
            int64_t lo, hi;
        };
        std::vector<Interval> allowed;
        int64_t cursor = lo_valid;
        for (const SpikeEvent& e : gt.spikes) {
            const int64_t ex_lo = e.sample_index - half;
            const int64_t ex_hi = e.sample_index + half;
            if (ex_lo > cursor) allowed.push_back({cursor, std::min(ex_lo - 1, hi_valid)});
            cursor = std::max(cursor, ex_hi + 1);
            if (cursor > hi_valid) break;
        }
        if (cursor <= hi_valid) allowed.push_back({cursor, hi_valid});

        std::vector<int64_t> prefix;  // cumulative allowed counts
        prefix.reserve(allowed.size() + 1);
        prefix.push_back(0);
        for (const Interval& iv : allowed)
            if (iv.hi >= iv.lo) prefix.push_back(prefix.back() + (iv.hi - iv.lo + 1));
            else prefix.push_back(prefix.back());
        const int64_t n_allowed = prefix.back();
        if (n_allowed < n_pos)
            throw ValidationError("dataset: only " + std::to_string(n_allowed) +
                                  " spike-free window centers available but " +
                                  std::to_string(n_pos) + " needed (firing too dense)");

        std::unordered_set<int64_t> used;
        used.reserve(static_cast<size_t>(n_pos) * 2);
        int64_t drawn = 0;
        while (drawn < n_pos) {
            const int64_t r = static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(n_allowed)));
            const size_t iv = static_cast<size_t>(
                std::upper_bound(prefix.begin(), prefix.end(), r) - prefix.begin() - 1);
            const int64_t center = allowed[iv].lo + (r - prefix[iv]);
            if (!used.insert(center).second) continue;
            const size_t w = static_cast<size_t>(n_pos + drawn);
            ds.centers[w] = center;
            ds.labels[w] = 0;
            ds.group[w] = -1;
            ++drawn;
        }
    }

    ds.data.resize(static_cast<size_t>(ds.n_windows) * ds.window_size());
#pragma omp parallel for schedule(static)
    for (int64_t w = 0; w < ds.n_windows; ++w)
        extract_window(rec, ds.centers[static_cast<size_t>(w)], half,
                       ds.data.data() + static_cast<size_t>(w) * ds.window_size());

    return ds;
}

WindowDataset subsample_few_shot(const WindowDataset& ds, int n_ft, Rng& rng) {
    if (n_ft < 1) throw ValidationError("subsample: n_ft must be >= 1");
    const int n_neurons = ds.n_classes - 1;
    std::vector<std::vector<int32_t>> groups_of(static_cast<size_t>(n_neurons));
    for (size_t g = 0; g < ds.group_neuron.size(); ++g)
        groups_of[static_cast<size_t>(ds.group_neuron[g])].push_back(static_cast<int32_t>(g));

    std::vector<char> keep_group(ds.group_neuron.size(), 0);
    for (int nrn = 0; nrn < n_neurons; ++nrn) {
        auto& list = groups_of[static_cast<size_t>(nrn)];
        if (static_cast<int>(list.size()) < n_ft)
            throw ValidationError("subsample: neuron " + std::to_string(nrn) + " has only " +
                                  std::to_string(list.size()) + " spikes, need " +
                                  std::to_string(n_ft));
        for (int j = 0; j < n_ft; ++j) {
            const size_t pick =
                static_cast<size_t>(j) +
                static_cast<size_t>(rng.next_below(static_cast<uint64_t>(list.size() - j)));
            std::swap(list[static_cast<size_t>(j)], list[pick]);
            keep_group[static_cast<size_t>(list[static_cast<size_t>(j)])] = 1;
        }
    }

    std::vector<int64_t> keep_windows;
    std::vector<int64_t> negatives;
    for (int64_t w = 0; w < ds.n_windows; ++w) {
        const int32_t g = ds.group[static_cast<size_t>(w)];
        if (g >= 0) {
            if (keep_group[static_cast<size_t>(g)]) keep_windows.push_back(w);
        } else {
            negatives.push_back(w);
        }
    }
    const int64_t n_kept_pos = static_cast<int64_t>(keep_windows.size());
    if (n_kept_pos > static_cast<int64_t>(negatives.size()))
        throw ValidationError("subsample: not enough no-spike windows to re-balance");
    for (int64_t j = 0; j < n_kept_pos; ++j) {
        const size_t pick = static_cast<size_t>(j) + static_cast<size_t>(rng.next_below(
                                static_cast<uint64_t>(negatives.size() - static_cast<size_t>(j))));
        std::swap(negatives[static_cast<size_t>(j)], negatives[pick]);
    }
    negatives.resize(static_cast<size_t>(n_kept_pos));
    std::sort(negatives.begin(), negatives.end());
    keep_windows.insert(keep_windows.end(), negatives.begin(), negatives.end());

    // Remap kept groups to a dense 0..n-1 range.
    std::vector<int32_t> group_map(ds.group_neuron.size(), -1);
    WindowDataset out;
    out.spec = ds.spec;
    out.n_channels = ds.n_channels;
    out.n_classes = ds.n_classes;
    for (size_t g = 0; g < keep_group.size(); ++g) {
        if (keep_group[g]) {
            group_map[g] = static_cast<int32_t>(out.group_neuron.size());
            out.group_neuron.push_back(ds.group_neuron[g]);
        }
    }
    out.n_windows = static_cast<int64_t>(keep_windows.size());
    out.labels.reserve(keep_windows.size());
    out.centers.reserve(keep_windows.size());
    out.group.reserve(keep_windows.size());
    out.data.resize(static_cast<size_t>(out.n_windows) * out.window_size());
    for (size_t i = 0; i < keep_windows.size(); ++i) {
        const size_t w = static_cast<size_t>(keep_windows[i]);
        out.labels.push_back(ds.labels[w]);
        out.centers.push_back(ds.centers[w]);
        const int32_t g = ds.group[w];
        out.group.push_back(g >= 0 ? group_map[static_cast<size_t>(g)] : -1);
        std::copy_n(ds.window_data(static_cast<int64_t>(w)), ds.window_size(),
                    out.data.data() + i * out.window_size());
    }
    return out;
}

SplitResult split_train_test(const Recording& rec, const GroundTruth& gt, double boundary_s) {
    if (!(boundary_s > 0.0) || !(boundary_s < rec.duration_s()))
        throw ValidationError("split: boundary must lie strictly inside the recording");
    const int64_t b = static_cast<int64_t>(std::llround(boundary_s * rec.sample_rate_hz));
    if (b <= 0 || b >= rec.n_samples)
        throw ValidationError("split: boundary sample out of range");

    SplitResult out;
    out.boundary_sample = b;
    auto cut = [&](int64_t lo, int64_t len) {
        Recording r;
        r.n_channels = rec.n_channels;
        r.n_samples = len;
        r.sample_rate_hz = rec.sample_rate_hz;
        r.geometry = rec.geometry;
        r.samples.resize(static_cast<size_t>(rec.n_channels) * static_cast<size_t>(len));
        for (int c = 0; c < rec.n_channels; ++c)
            std::copy_n(rec.channel(c) + lo, len,
                        r.samples.data() + static_cast<size_t>(c) * len);
        return r;
    };
    out.rec_train = cut(0, b);
    out.rec_test = cut(b, rec.n_samples - b);
    out.gt_train.n_neurons = gt.n_neurons;
    out.gt_test.n_neurons = gt.n_neurons;
    for (const SpikeEvent& e : gt.spikes) {
        if (e.sample_index < b)
            out.gt_train.spikes.push_back(e);
        else
            out.gt_test.spikes.push_back({e.neuron_id, e.sample_index - b});
    }
    return out;
}

}  // namespace fafesort::dataset
