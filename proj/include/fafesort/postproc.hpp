#pragma once

#include <cstdint>
#include <vector>

#include "fafesort/core.hpp"
#include "fafesort/nn.hpp"

namespace fafesort::postproc {

/// Per-timestep class probabilities: row t is the network output for the
/// window centered at sample t. Rows outside [valid_begin, valid_end) are
/// the uniform distribution (no full window exists there).
struct ProbTrace {
    int64_t n_samples = 0;
    int n_classes = 0;
    int64_t valid_begin = 0;
    int64_t valid_end = 0;
    std::vector<double> probs;  // [t][k]

    double at(int64_t t, int k) const {
        return probs[static_cast<size_t>(t) * n_classes + static_cast<size_t>(k)];
    }
};

struct PostprocConfig {
    int triangle_half_width = 5;  // filter has 2h+1 taps [1..h+1..1]/(h+1)^2
    double threshold = 0.5;

    void validate() const;
};

struct SortedSpike {
    int32_t neuron_id = 0;
    int64_t sample_index = 0;
    double score = 0.0;  // filtered probability at the peak
};

struct SortedOutput {
    int32_t n_neurons = 0;
    std::vector<SortedSpike> spikes;  // sorted by (sample_index, neuron_id)
};

/// Normalized triangle taps [1,2,...,h+1,...,2,1] / (h+1)^2.
std::vector<double> triangle_taps(int h);

/// Sliding-window inference at stride 1 over every sample with a full
/// window; OpenMP over windows. Bit-identical to infer_trace_serial.
ProbTrace infer_trace(const nn::SorterModel& model, const Recording& rec, int threads = 0);
/// Reference loop: forward() per window, one thread.
ProbTrace infer_trace_serial(const nn::SorterModel& model, const Recording& rec);

/// Convolve each neuron-class column with the triangle kernel
/// (zero-padded); class 0 passes through. Output rows [begin,end) only.
ProbTrace triangle_filter(const ProbTrace& trace, int h, int threads = 0);
ProbTrace triangle_filter_serial(const ProbTrace& trace, int h);
/// Filter only rows [begin,end) into `out` (sized like `trace`), reading
/// up to h raw samples beyond the range: the tile primitive.
void triangle_filter_range(const ProbTrace& trace, int h, int64_t begin, int64_t end,
                           ProbTrace& out);

/// Interior local maxima: strict rise on the left, non-strict on the
/// right; endpoints never qualify.
std::vector<int64_t> detect_peaks(const std::vector<double>& column);

/// Peaks above threshold per neuron class, merged and time-sorted.
SortedOutput finalize(const ProbTrace& filtered, const PostprocConfig& cfg);
/// Same decision rule restricted to peaks in [begin,end); reads the
/// filtered trace's real neighbors, so tile concatenations equal the
/// global result exactly.
SortedOutput finalize_range(const ProbTrace& filtered, const PostprocConfig& cfg, int64_t begin,
                            int64_t end);

/// infer + filter + finalize. h < 0 selects the default (the dataset's
/// t_shift is the natural choice).
SortedOutput sort_recording(const nn::SorterModel& model, const Recording& rec,
                            const PostprocConfig& cfg, int threads = 0);

}  // namespace fafesort::postproc
