#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fafesort/core.hpp"
#include "fafesort/dataset.hpp"
#include "fafesort/nn.hpp"
#include "fafesort/postproc.hpp"

namespace fafesort::eval {

struct MatchConfig {
    int64_t tolerance_samples = 12;  // 0.4 ms at 30 kHz

    static MatchConfig for_rate(double sample_rate_hz);
    void validate() const;
};

struct NeuronReport {
    int32_t neuron_id = 0;
    int64_t tp = 0, fp = 0, fn = 0;
    double accuracy = 1.0;
};

struct EvalReport {
    int64_t tp = 0, fp = 0, fn = 0;
    double accuracy = 1.0;  // tp / (tp+fp+fn); 1 when all counts are zero
    std::vector<NeuronReport> per_neuron;
};

/// Greedy one-to-one matching per neuron: detections in time order each
/// take the nearest unmatched ground-truth spike within tolerance (ties to
/// the earlier one). Neuron id spaces must already correspond.
EvalReport match(const postproc::SortedOutput& sorted, const GroundTruth& gt,
                 const MatchConfig& cfg);

std::string render_table(const EvalReport& report);

struct CurvePoint {
    int n_ft = 0;
    double accuracy = 0.0;
};

struct CurveConfig {
    dataset::WindowSpec window;
    nn::BackboneConfig backbone;
    nn::TrainConfig train;
    postproc::PostprocConfig postproc;
    MatchConfig match;
    int threads = 0;
};

/// Accuracy as a function of spikes-per-neuron available for finetuning.
/// With no pretrained backbone every point trains from scratch.
std::vector<CurvePoint> fewshot_curve(const nn::Backbone* pretrained, const Recording& rec_train,
                                      const GroundTruth& gt_train, const Recording& rec_test,
                                      const GroundTruth& gt_test,
                                      const std::vector<int>& n_ft_list, const CurveConfig& cfg,
                                      uint64_t seed);

std::string render_curve_csv(const std::vector<CurvePoint>& curve);

}  // namespace fafesort::eval
