#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fafesort/core.hpp"
#include "fafesort/dataset.hpp"

namespace fafesort::nn {

struct BackboneConfig {
    int c_t1 = 8;   // feature maps of temporal filter 1
    int c_t2 = 8;   // feature maps of temporal filter 2
    int c_s = 24;   // feature maps of the spatial filter
    int k_t1 = 11;  // temporal kernel lengths (odd)
    int k_t2 = 5;

    void validate(int t_window) const;
};

/// Feature extractor: two temporal convolutions (shared across probe
/// channels, "same" padding) and one dense spatial map across channels,
/// each followed by normalization and ReLU. Parameters are doubles in
/// memory; checkpoints store f32.
struct Backbone {
    BackboneConfig cfg;
    int t_window = 0;
    int n_channels = 0;

    std::vector<double> conv1_w, conv1_b;  // [c_t1][k_t1], [c_t1]
    std::vector<double> norm1_g, norm1_b;  // [c_t1]
    std::vector<double> conv2_w, conv2_b;  // [c_t2][c_t1][k_t2], [c_t2]
    std::vector<double> norm2_g, norm2_b;  // [c_t2]
    std::vector<double> spat_w, spat_b;    // [c_s][n_channels*c_t2], [c_s]
    std::vector<double> norm3_g, norm3_b;  // [c_s]
};

struct SorterModel {
    Backbone backbone;
    int n_classes = 0;
    std::vector<double> fc_w, fc_b;  // [n_classes][c_s*t_window], [n_classes]

    int t_window() const { return backbone.t_window; }
    int n_channels() const { return backbone.n_channels; }
};

struct TrainConfig {
    int epochs = 50;
    double learning_rate = 5e-3;
    int batch_size = 64;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    uint64_t seed = 0;

    void validate() const;
};

/// Named view of every parameter tensor, in the fixed serialization order.
struct TensorRef {
    std::string name;
    std::vector<int64_t> shape;
    std::vector<double>* data;
};
std::vector<TensorRef> tensor_refs(SorterModel& model);
std::vector<TensorRef> tensor_refs(Backbone& backbone);
size_t n_params(const SorterModel& model);

Backbone init_backbone(const BackboneConfig& cfg, int n_channels, int t_window, Rng& rng);
/// Fresh fan-in-scaled classifier on top of an existing backbone.
SorterModel init_model(const Backbone& backbone, int n_classes, Rng& rng);

/// Per-call scratch: activations and cached normalization statistics.
/// Reused across windows; one instance per thread.
struct ForwardCache {
    std::vector<double> xpad;            // [C][T + k_t1-1]
    std::vector<double> a1, x1hat;       // [C][c_t1][T]
    double mu1 = 0, inv1 = 0;
    std::vector<double> r1pad;           // [C][c_t1][T + k_t2-1]
    std::vector<double> a2, x2hat;       // [C][c_t2][T]
    double mu2 = 0, inv2 = 0;
    std::vector<double> r2;              // [C][c_t2][T]
    std::vector<double> a3, x3hat;       // [c_s][T]
    double mu3 = 0, inv3 = 0;
    std::vector<double> r3;              // [c_s][T]
    std::vector<double> logits, probs;   // [n_classes]
    // backward scratch
    std::vector<double> d3, d2pad, d2, d1, dwork;
    // dims signature so buffers are only re-prepared when shapes change
    int64_t sized_for = -1;
};

/// Class probabilities for one window (channels x t_window, microvolts).
/// Fills the cache; probs end up in cache.probs and are returned.
std::span<const double> forward(const SorterModel& model, const float* window,
                                ForwardCache& cache);
std::vector<double> forward(const SorterModel& model, const float* window);

double loss_cross_entropy(std::span<const double> probs, int label);

/// Analytic gradient of loss(forward(window), label) w.r.t. every
/// parameter, accumulated (+=) into grad (layout = tensor_refs order,
/// n_params doubles). forward() must have been run on this cache.
void backward(const SorterModel& model, const float* window, int label, ForwardCache& cache,
              double* grad);

/// Summed gradient and loss over the given windows, accumulated in
/// ascending-index order regardless of `indices` order or thread count.
void batch_gradient(const SorterModel& model, const dataset::WindowDataset& ds,
                    std::span<const int64_t> indices, double* grad_sum, double* loss_sum);

struct TrainResult {
    std::vector<double> epoch_losses;  // mean per epoch
};

/// Mini-batch Adam over seeded shuffles. Deterministic for a fixed seed
/// and any thread count.
TrainResult train(SorterModel& model, const dataset::WindowDataset& ds, const TrainConfig& cfg);

/// Train a full model on the complete dataset of a neuron-rich recording,
/// then drop the classifier.
Backbone pretrain(const Recording& rec, const GroundTruth& gt, const dataset::WindowSpec& wspec,
                  const BackboneConfig& bcfg, const TrainConfig& tcfg);

/// Warm-start from a pretrained backbone, fresh classifier; all parameters
/// receive updates.
SorterModel finetune(const Backbone& backbone, const dataset::WindowDataset& ds_fewshot,
                     const TrainConfig& tcfg);

}  // namespace fafesort::nn
