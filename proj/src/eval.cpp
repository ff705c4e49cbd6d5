#include "fafesort/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace fafesort::eval {

MatchConfig MatchConfig::for_rate(double sample_rate_hz) {
    MatchConfig cfg;
    cfg.tolerance_samples = static_cast<int64_t>(std::llround(4e-4 * sample_rate_hz));
    return cfg;
}

void MatchConfig::validate() const {
    if (tolerance_samples < 0) throw ValidationError("match: tolerance must be >= 0");
}

namespace {

double safe_accuracy(int64_t tp, int64_t fp, int64_t fn) {
    const int64_t denom = tp + fp + fn;
    return denom > 0 ? static_cast<double>(tp) / static_cast<double>(denom) : 1.0;
}

}  // namespace

EvalReport match(const postproc::SortedOutput& sorted, const GroundTruth& gt,
                 const MatchConfig& cfg) {
    cfg.validate();
    if (sorted.n_neurons != gt.n_neurons)
        throw ValidationError("match: sorted output has " + std::to_string(sorted.n_neurons) +
                              " neurons, ground truth has " + std::to_string(gt.n_neurons));

    std::vector<std::vector<int64_t>> gt_times(static_cast<size_t>(gt.n_neurons));
    for (const SpikeEvent& e : gt.spikes)
        gt_times[static_cast<size_t>(e.neuron_id)].push_back(e.sample_index);
    std::vector<std::vector<int64_t>> det_times(static_cast<size_t>(gt.n_neurons));
    for (const postproc::SortedSpike& s : sorted.spikes)
        det_times[static_cast<size_t>(s.neuron_id)].push_back(s.sample_index);

    EvalReport report;
    report.per_neuron.reserve(static_cast<size_t>(gt.n_neurons));
    for (int32_t nrn = 0; nrn < gt.n_neurons; ++nrn) {
        const auto& gts = gt_times[static_cast<size_t>(nrn)];
        const auto& dets = det_times[static_cast<size_t>(nrn)];
        std::vector<char> taken(gts.size(), 0);
        int64_t tp = 0;
        for (const int64_t t : dets) {
            // candidates within tolerance, nearest unmatched wins, ties to
            // the earlier ground-truth spike
            const auto lo = std::lower_bound(gts.begin(), gts.end(), t - cfg.tolerance_samples);
            ptrdiff_t best = -1;
            int64_t best_dist = cfg.tolerance_samples + 1;
            for (auto it = lo; it != gts.end() && *it <= t + cfg.tolerance_samples; ++it) {
                const ptrdiff_t i = it - gts.begin();
                if (taken[static_cast<size_t>(i)]) continue;
                const int64_t d = std::abs(*it - t);
                if (d < best_dist) {
                    best_dist = d;
                    best = i;
                }
            }
            if (best >= 0) {
                taken[static_cast<size_t>(best)] = 1;
                ++tp;
            }
        }
        NeuronReport nr;
        nr.neuron_id = nrn;
        nr.tp = tp;
        nr.fp = static_cast<int64_t>(dets.size()) - tp;
        nr.fn = static_cast<int64_t>(gts.size()) - tp;
        nr.accuracy = safe_accuracy(nr.tp, nr.fp, nr.fn);
        report.tp += nr.tp;
        report.fp += nr.fp;
        report.fn += nr.fn;
        report.per_neuron.push_back(nr);
    }
    report.accuracy = safe_accuracy(report.tp, report.fp, report.fn);
    return report;
}

std::string render_table(const EvalReport& report) {
    std::string out;
    char line[128];
    std::snprintf(line, sizeof(line), "%8s %8s %8s %8s %10s\n", "neuron", "tp", "fp", "fn",
                  "accuracy");
    out += line;
    for (const NeuronReport& nr : report.per_neuron) {
        std::snprintf(line, sizeof(line), "%8d %8lld %8lld %8lld %10.4f\n", nr.neuron_id,
                      static_cast<long long>(nr.tp), static_cast<long long>(nr.fp),
                      static_cast<long long>(nr.fn), nr.accuracy);
        out += line;
    }
    std::snprintf(line, sizeof(line), "%8s %8lld %8lld %8lld %10.4f\n", "total",
                  static_cast<long long>(report.tp), static_cast<long long>(report.fp),
                  static_cast<long long>(report.fn), report.accuracy);
    out += line;
    return out;
}

std::vector<CurvePoint> fewshot_curve(const nn::Backbone* pretrained, const Recording& rec_train,
                                      const GroundTruth& gt_train, const Recording& rec_test,
                                      const GroundTruth& gt_test,
                                      const std::vector<int>& n_ft_list, const CurveConfig& cfg,
                                      uint64_t seed) {
    if (n_ft_list.empty()) throw ValidationError("curve: n_ft list is empty");
    Rng ds_rng(derive_seed(seed, "dataset"));
    const dataset::WindowDataset ds_full =
        dataset::build_dataset(rec_train, gt_train, cfg.window, ds_rng);

    std::vector<CurvePoint> curve;
    curve.reserve(n_ft_list.size());
    for (const int n_ft : n_ft_list) {
        Rng sub_rng(derive_seed(seed, "subsample", static_cast<uint64_t>(n_ft)));
        const dataset::WindowDataset ds_few = dataset::subsample_few_shot(ds_full, n_ft, sub_rng);
        nn::TrainConfig tcfg = cfg.train;
        tcfg.seed = derive_seed(seed, "train", static_cast<uint64_t>(n_ft));
        nn::SorterModel model;
        if (pretrained) {
            model = nn::finetune(*pretrained, ds_few, tcfg);
        } else {
            Rng init_rng(derive_seed(seed, "scratch-init", static_cast<uint64_t>(n_ft)));
            nn::Backbone bb = nn::init_backbone(cfg.backbone, rec_train.n_channels,
                                                cfg.window.t_window, init_rng);
            model = nn::init_model(bb, ds_few.n_classes, init_rng);
            nn::train(model, ds_few, tcfg);
        }
        const postproc::SortedOutput sorted =
            postproc::sort_recording(model, rec_test, cfg.postproc, cfg.threads);
        const EvalReport report = match(sorted, gt_test, cfg.match);
        curve.push_back({n_ft, report.accuracy});
    }
    return curve;
}

std::string render_curve_csv(const std::vector<CurvePoint>& curve) {
    std::string out = "n_ft,accuracy\n";
    char line[64];
    for (const CurvePoint& p : curve) {
        std::snprintf(line, sizeof(line), "%d,%.6f\n", p.n_ft, p.accuracy);
        out += line;
    }
    return out;
}

}  // namespace fafesort::eval
