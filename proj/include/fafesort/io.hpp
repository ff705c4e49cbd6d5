#pragma once

#include <string>

#include "fafesort/core.hpp"
#include "fafesort/dataset.hpp"
#include "fafesort/eval.hpp"
#include "fafesort/nn.hpp"
#include "fafesort/postproc.hpp"
#include "fafesort/synth.hpp"

#include "json.hpp"

namespace fafesort::io {

inline constexpr int kFormatVersion = 1;

// ".rec": 8-byte magic "FAFEREC1", u32 LE header length, JSON header,
// then n_samples frames of n_channels little-endian f32 (sample-major).
void write_recording(const std::string& path, const Recording& rec);
Recording read_recording(const std::string& path);

// ".gt.json"
void write_ground_truth(const std::string& path, const GroundTruth& gt);
GroundTruth read_ground_truth(const std::string& path);

// ".ckpt": magic "FAFECKP1", u32 LE manifest length, JSON manifest
// {format_version, backbone_cfg, meta, tensors:[{name,shape,offset}]},
// then concatenated little-endian f32 tensor data, row-major. Offsets are
// byte positions in the payload and are authoritative over order.
void write_model(const std::string& path, const nn::SorterModel& model);
void write_backbone(const std::string& path, const nn::Backbone& backbone);

struct LoadedCheckpoint {
    bool classifier_present = false;
    nn::SorterModel model;  // n_classes 0 / empty fc when backbone-only

    const nn::Backbone& backbone() const { return model.backbone; }
};
LoadedCheckpoint read_checkpoint(const std::string& path);

// ".wds" (debug dump): magic "FAFEWDS1", manifest, then per-window f32
// blocks in manifest order.
void write_dataset(const std::string& path, const dataset::WindowDataset& ds);
dataset::WindowDataset read_dataset(const std::string& path);

// ".spikes.json"
void write_sorted(const std::string& path, const postproc::SortedOutput& sorted);
postproc::SortedOutput read_sorted(const std::string& path);

/// Complete run configuration; unknown keys are rejected, defaults are
/// materialized on load (t_window / tolerance resolve against the synth
/// sample rate when left 0 = auto).
struct RunConfig {
    struct SynthSection {
        std::string probe = "medium16";
        int n_neurons = 20;
        double duration_s = 100.0;
        double noise_uv = 10.0;
        synth::DriftSpec drift;
        double sample_rate_hz = 30000.0;
        double firing_rate_hz = 2.0;
        double min_visible_uv = 30.0;
        double min_separation_um = 20.0;
    } synth;
    dataset::WindowSpec window{0, 5, 0};
    nn::BackboneConfig backbone;
    nn::TrainConfig train;
    postproc::PostprocConfig postproc;
    eval::MatchConfig eval{0};

    void resolve();  // materialize auto fields
    synth::SynthConfig make_synth_config(uint64_t seed) const;
};

nlohmann::json to_json(const RunConfig& cfg);
RunConfig run_config_from_json(const nlohmann::json& j);
/// Accepts a bare RunConfig document or a run sidecar (uses its "config").
RunConfig load_run_config(const std::string& path);
void save_run_config(const std::string& path, const RunConfig& cfg);

nlohmann::json to_json(const eval::EvalReport& report);

/// Whole-file helpers with IoError reporting.
std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& bytes);

}  // namespace fafesort::io
