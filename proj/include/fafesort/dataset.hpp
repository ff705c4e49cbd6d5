#pragma once

#include <cstdint>
#include <vector>

#include "fafesort/core.hpp"

namespace fafesort::dataset {

struct WindowSpec {
    int t_window = 0;  // odd, >= 3
    int t_shift = 5;
    int center_tolerance = 0;

    /// 2 ms at the given rate rounded up to odd.
    static int default_t_window(double sample_rate_hz);
    void validate() const;
};

/// Labeled window view. Label 0 is the no-spike class; label k >= 1 means
/// neuron k-1.
struct LabeledWindow {
    const float* data;  // [n_channels][t_window]
    int32_t label;
    int64_t center_sample;
};

struct WindowDataset {
    WindowSpec spec;
    int n_channels = 0;
    int32_t n_classes = 0;
    int64_t n_windows = 0;
    std::vector<float> data;        // [w][c][t]
    std::vector<int32_t> labels;    // per window
    std::vector<int64_t> centers;   // per window, absolute sample of the window center
    std::vector<int32_t> group;     // per window: source-spike index, -1 for no-spike
    std::vector<int32_t> group_neuron;  // per source spike: its neuron id

    size_t window_size() const {
        return static_cast<size_t>(n_channels) * static_cast<size_t>(spec.t_window);
    }
    const float* window_data(int64_t w) const {
        return data.data() + static_cast<size_t>(w) * window_size();
    }
    LabeledWindow window(int64_t w) const {
        return {window_data(w), labels[static_cast<size_t>(w)], centers[static_cast<size_t>(w)]};
    }
    int64_t count_spike_windows() const;
    int64_t count_nospike_windows() const;
    void validate() const;
};

/// Per-spike windows augmented with +-t_shift center offsets, balanced 1:1
/// with randomly drawn spike-free windows.
WindowDataset build_dataset(const Recording& rec, const GroundTruth& gt, const WindowSpec& spec,
                            Rng& rng);

/// Keep the full augmentation group for n_ft randomly chosen spikes per
/// neuron; re-balance the no-spike windows to match.
WindowDataset subsample_few_shot(const WindowDataset& ds, int n_ft, Rng& rng);

struct SplitResult {
    Recording rec_train;
    GroundTruth gt_train;
    Recording rec_test;
    GroundTruth gt_test;
    int64_t boundary_sample = 0;
};

/// Cut recording and ground truth at boundary_s; test-side spike indices
/// are re-based to the test segment's origin.
SplitResult split_train_test(const Recording& rec, const GroundTruth& gt, double boundary_s);

}  // namespace fafesort::dataset
