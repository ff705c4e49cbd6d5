// fafesort command-line workflow runner: synth | pretrain | finetune |
// sort | eval | curve | bench. Flags override --config values, which
// override built-in defaults. All randomness derives from --seed.

#include <chrono>
#include <cstdio>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "fafesort/core.hpp"
#include "fafesort/dataset.hpp"
#include "fafesort/eval.hpp"
#include "fafesort/io.hpp"
#include "fafesort/nn.hpp"
#include "fafesort/parallel.hpp"
#include "fafesort/postproc.hpp"
#include "fafesort/synth.hpp"

namespace {

using namespace fafesort;
using nlohmann::json;

double now_s() {
    return std::chrono::duration<double>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

struct Common {
    std::string config_path;
    uint64_t seed = 1;
    int threads = 0;
    io::RunConfig cfg;
    double t_start = 0;

    void load() {
        t_start = now_s();
        if (!config_path.empty()) cfg = io::load_run_config(config_path);
    }
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--config", c.config_path, "run config or sidecar JSON");
    cmd->add_option("--seed", c.seed, "master seed; every stage derives from it");
    cmd->add_option("--threads", c.threads,
                    "worker threads (0 = FAFESORT_THREADS env or all cores)");
}

void write_sidecar(const std::string& output, const std::string& command, const Common& c,
                   const std::vector<std::string>& outputs) {
    json j;
    j["command"] = command;
    j["seed"] = c.seed;
    j["format_versions"] = {{"rec", io::kFormatVersion},
                            {"gt", io::kFormatVersion},
                            {"ckpt", io::kFormatVersion},
                            {"wds", io::kFormatVersion},
                            {"spikes", io::kFormatVersion}};
    j["config"] = io::to_json(c.cfg);
    j["outputs"] = outputs;
    j["wall_time_s"] = now_s() - c.t_start;
    io::write_file(output + ".run.json", j.dump(2) + "\n");
}

std::string gt_path_for(const std::string& rec_path) {
    std::string p = rec_path;
    const size_t dot = p.rfind(".rec");
    if (dot != std::string::npos && dot == p.size() - 4) p.resize(dot);
    return p + ".gt.json";
}

std::vector<int> parse_n_ft_list(const std::string& text) {
    std::vector<int> out;
    size_t pos = 0;
    while (pos < text.size()) {
        size_t comma = text.find(',', pos);
        if (comma == std::string::npos) comma = text.size();
        const std::string item = text.substr(pos, comma - pos);
        const size_t dots = item.find("..");
        if (dots != std::string::npos) {
            const int lo = std::stoi(item.substr(0, dots));
            const int hi = std::stoi(item.substr(dots + 2));
            for (int v = lo; v <= hi; ++v) out.push_back(v);
        } else if (!item.empty()) {
            out.push_back(std::stoi(item));
        }
        pos = comma + 1;
    }
    if (out.empty()) throw ValidationError("curve: empty n_ft list");
    return out;
}

dataset::WindowDataset build_training_dataset(const Recording& rec, const GroundTruth& gt,
                                              const io::RunConfig& cfg, uint64_t seed, int n_ft,
                                              double until_s) {
    const Recording* train_rec = &rec;
    const GroundTruth* train_gt = &gt;
    dataset::SplitResult split;
    if (until_s > 0.0 && until_s < rec.duration_s()) {
        split = dataset::split_train_test(rec, gt, until_s);
        train_rec = &split.rec_train;
        train_gt = &split.gt_train;
    }
    Rng ds_rng(derive_seed(seed, "dataset"));
    dataset::WindowDataset ds = dataset::build_dataset(*train_rec, *train_gt, cfg.window, ds_rng);
    if (n_ft > 0) {
        Rng sub_rng(derive_seed(seed, "subsample", static_cast<uint64_t>(n_ft)));
        ds = dataset::subsample_few_shot(ds, n_ft, sub_rng);
    }
    return ds;
}

int run_app(int argc, char** argv) {
    CLI::App app{
        "fafesort: few-shot neural spike sorter with parallel post-processing.\n"
        "Exit codes: 0 ok, 2 validation error, 3 I/O error, 4 numeric divergence."};
    app.require_subcommand(1);

    // ---- synth ----
    auto* synth_cmd = app.add_subcommand("synth", "generate a recording + ground truth");
    Common synth_c;
    add_common(synth_cmd, synth_c);
    std::string synth_out = "out.rec";
    synth_cmd->add_option("--out", synth_out, "output .rec path (.gt.json written alongside)");
    auto* o_probe = synth_cmd->add_option("--probe", synth_c.cfg.synth.probe,
                                          "dense16|medium16|sparse16");
    auto* o_neurons = synth_cmd->add_option("--neurons", synth_c.cfg.synth.n_neurons, "");
    auto* o_duration = synth_cmd->add_option("--duration", synth_c.cfg.synth.duration_s, "s");
    auto* o_noise = synth_cmd->add_option("--noise", synth_c.cfg.synth.noise_uv, "uV std");
    auto* o_rate = synth_cmd->add_option("--rate", synth_c.cfg.synth.sample_rate_hz, "Hz");
    auto* o_fr = synth_cmd->add_option("--firing-rate", synth_c.cfg.synth.firing_rate_hz, "Hz");
    auto* o_vis = synth_cmd->add_option("--min-visible", synth_c.cfg.synth.min_visible_uv,
                                        "uV floor on each unit's strongest channel");
    auto* o_sep = synth_cmd->add_option("--min-separation", synth_c.cfg.synth.min_separation_um,
                                        "um floor between units");
    std::string drift_kind = "none";
    auto* o_drift = synth_cmd->add_option("--drift", drift_kind, "none|slow|fast|non_rigid");
    synth_cmd->callback([&] {
        auto probe = synth_c.cfg.synth.probe;
        auto neurons = synth_c.cfg.synth.n_neurons;
        auto duration = synth_c.cfg.synth.duration_s;
        auto noise = synth_c.cfg.synth.noise_uv;
        auto rate = synth_c.cfg.synth.sample_rate_hz;
        auto fr = synth_c.cfg.synth.firing_rate_hz;
        auto vis = synth_c.cfg.synth.min_visible_uv;
        auto sep = synth_c.cfg.synth.min_separation_um;
        synth_c.load();
        if (o_probe->count()) synth_c.cfg.synth.probe = probe;
        if (o_neurons->count()) synth_c.cfg.synth.n_neurons = neurons;
        if (o_duration->count()) synth_c.cfg.synth.duration_s = duration;
        if (o_noise->count()) synth_c.cfg.synth.noise_uv = noise;
        if (o_rate->count()) synth_c.cfg.synth.sample_rate_hz = rate;
        if (o_fr->count()) synth_c.cfg.synth.firing_rate_hz = fr;
        if (o_vis->count()) synth_c.cfg.synth.min_visible_uv = vis;
        if (o_sep->count()) synth_c.cfg.synth.min_separation_um = sep;
        if (o_drift->count())
            synth_c.cfg.synth.drift =
                synth::DriftSpec::with_defaults(synth::drift_kind_from_string(drift_kind));
        synth_c.cfg.resolve();

        const synth::SynthConfig scfg =
            synth_c.cfg.make_synth_config(derive_seed(synth_c.seed, "synth"));
        const synth::SynthResult result = synth::synthesize(scfg);
        io::write_recording(synth_out, result.recording);
        const std::string gt_out = gt_path_for(synth_out);
        io::write_ground_truth(gt_out, result.ground_truth);
        const auto counts = result.ground_truth.count_per_neuron();
        std::printf("wrote %s (%lld samples, %d ch) and %s\n", synth_out.c_str(),
                    static_cast<long long>(result.recording.n_samples),
                    result.recording.n_channels, gt_out.c_str());
        for (size_t i = 0; i < counts.size(); ++i)
            std::printf("neuron %zu: %lld spikes\n", i, static_cast<long long>(counts[i]));
        write_sidecar(synth_out, "synth", synth_c, {synth_out, gt_out});
    });

    // ---- pretrain ----
    auto* pre_cmd = app.add_subcommand("pretrain", "train a backbone on a full recording");
    Common pre_c;
    add_common(pre_cmd, pre_c);
    std::string pre_rec, pre_gt, pre_out = "backbone.ckpt";
    pre_cmd->add_option("--rec", pre_rec, ".rec recording")->required();
    pre_cmd->add_option("--gt", pre_gt, ".gt.json (default: derived from --rec)");
    pre_cmd->add_option("--out", pre_out, "backbone checkpoint");
    auto* p_epochs = pre_cmd->add_option("--epochs", pre_c.cfg.train.epochs, "");
    auto* p_lr = pre_cmd->add_option("--lr", pre_c.cfg.train.learning_rate, "");
    auto* p_batch = pre_cmd->add_option("--batch", pre_c.cfg.train.batch_size, "");
    pre_cmd->callback([&] {
        auto epochs = pre_c.cfg.train.epochs;
        auto lr = pre_c.cfg.train.learning_rate;
        auto batch = pre_c.cfg.train.batch_size;
        pre_c.load();
        if (p_epochs->count()) pre_c.cfg.train.epochs = epochs;
        if (p_lr->count()) pre_c.cfg.train.learning_rate = lr;
        if (p_batch->count()) pre_c.cfg.train.batch_size = batch;

        const Recording rec = io::read_recording(pre_rec);
        const GroundTruth gt =
            io::read_ground_truth(pre_gt.empty() ? gt_path_for(pre_rec) : pre_gt);
        pre_c.cfg.synth.sample_rate_hz = rec.sample_rate_hz;
        pre_c.cfg.resolve();
        nn::TrainConfig tcfg = pre_c.cfg.train;
        tcfg.seed = derive_seed(pre_c.seed, "pretrain");
        const nn::Backbone bb =
            nn::pretrain(rec, gt, pre_c.cfg.window, pre_c.cfg.backbone, tcfg);
        io::write_backbone(pre_out, bb);
        std::printf("wrote %s (backbone %dx%d window, %d+%d+%d maps)\n", pre_out.c_str(),
                    bb.n_channels, bb.t_window, bb.cfg.c_t1, bb.cfg.c_t2, bb.cfg.c_s);
        write_sidecar(pre_out, "pretrain", pre_c, {pre_out});
    });

    // ---- finetune ----
    auto* ft_cmd = app.add_subcommand(
        "finetune", "train a sorter; with --backbone warm-starts, otherwise from scratch");
    Common ft_c;
    add_common(ft_cmd, ft_c);
    std::string ft_rec, ft_gt, ft_backbone, ft_out = "model.ckpt";
    int ft_n = 0;
    double ft_until = 0.0;
    ft_cmd->add_option("--rec", ft_rec, ".rec recording")->required();
    ft_cmd->add_option("--gt", ft_gt, ".gt.json (default: derived from --rec)");
    ft_cmd->add_option("--backbone", ft_backbone, "pretrained backbone checkpoint");
    ft_cmd->add_option("--n-ft", ft_n, "spikes per neuron (0 = all)");
    ft_cmd->add_option("--until-s", ft_until, "train on [0, until) seconds (0 = whole)");
    ft_cmd->add_option("--out", ft_out, "model checkpoint");
    auto* f_epochs = ft_cmd->add_option("--epochs", ft_c.cfg.train.epochs, "");
    auto* f_lr = ft_cmd->add_option("--lr", ft_c.cfg.train.learning_rate, "");
    auto* f_batch = ft_cmd->add_option("--batch", ft_c.cfg.train.batch_size, "");
    ft_cmd->callback([&] {
        auto epochs = ft_c.cfg.train.epochs;
        auto lr = ft_c.cfg.train.learning_rate;
        auto batch = ft_c.cfg.train.batch_size;
        ft_c.load();
        if (f_epochs->count()) ft_c.cfg.train.epochs = epochs;
        if (f_lr->count()) ft_c.cfg.train.learning_rate = lr;
        if (f_batch->count()) ft_c.cfg.train.batch_size = batch;

        const Recording rec = io::read_recording(ft_rec);
        const GroundTruth gt =
            io::read_ground_truth(ft_gt.empty() ? gt_path_for(ft_rec) : ft_gt);
        ft_c.cfg.synth.sample_rate_hz = rec.sample_rate_hz;
        ft_c.cfg.resolve();
        const dataset::WindowDataset ds =
            build_training_dataset(rec, gt, ft_c.cfg, ft_c.seed, ft_n, ft_until);
        nn::TrainConfig tcfg = ft_c.cfg.train;
        tcfg.seed = derive_seed(ft_c.seed, "finetune");
        nn::SorterModel model;
        nn::TrainResult tr;
        if (!ft_backbone.empty()) {
            const io::LoadedCheckpoint ck = io::read_checkpoint(ft_backbone);
            model = nn::finetune(ck.backbone(), ds, tcfg);
        } else {
            Rng init_rng(derive_seed(tcfg.seed, "scratch-init"));
            nn::Backbone bb = nn::init_backbone(ft_c.cfg.backbone, rec.n_channels,
                                                ft_c.cfg.window.t_window, init_rng);
            model = nn::init_model(bb, ds.n_classes, init_rng);
            tr = nn::train(model, ds, tcfg);
        }
        io::write_model(ft_out, model);
        std::printf("wrote %s (%lld training windows, %d classes)\n", ft_out.c_str(),
                    static_cast<long long>(ds.n_windows), ds.n_classes);
        write_sidecar(ft_out, "finetune", ft_c, {ft_out});
    });

    // ---- sort ----
    auto* sort_cmd = app.add_subcommand("sort", "run inference + post-processing");
    Common sort_c;
    add_common(sort_cmd, sort_c);
    std::string sort_model, sort_rec, sort_out = "out.spikes.json";
    double sort_from = 0.0;
    sort_cmd->add_option("--model", sort_model, "model checkpoint")->required();
    sort_cmd->add_option("--rec", sort_rec, ".rec recording")->required();
    sort_cmd->add_option("--from-s", sort_from,
                         "sort only [from, end); emitted indices stay absolute");
    sort_cmd->add_option("--out", sort_out, ".spikes.json path");
    auto* s_thr = sort_cmd->add_option("--threshold", sort_c.cfg.postproc.threshold, "(0,1]");
    auto* s_h = sort_cmd->add_option("--half-width", sort_c.cfg.postproc.triangle_half_width,
                                     "triangle filter half width");
    sort_cmd->callback([&] {
        auto thr = sort_c.cfg.postproc.threshold;
        auto h = sort_c.cfg.postproc.triangle_half_width;
        sort_c.load();
        if (s_thr->count()) sort_c.cfg.postproc.threshold = thr;
        if (s_h->count()) sort_c.cfg.postproc.triangle_half_width = h;

        const io::LoadedCheckpoint ck = io::read_checkpoint(sort_model);
        if (!ck.classifier_present)
            throw ValidationError("sort: '" + sort_model +
                                  "' is a backbone-only checkpoint; finetune first");
        const Recording rec = io::read_recording(sort_rec);
        int64_t base = 0;
        postproc::SortedOutput sorted;
        if (sort_from > 0.0) {
            const dataset::SplitResult split =
                dataset::split_train_test(rec, GroundTruth{ck.model.n_classes - 1, {}},
                                          sort_from);
            base = split.boundary_sample;
            sorted = postproc::sort_recording(ck.model, split.rec_test, sort_c.cfg.postproc,
                                              sort_c.threads);
            for (auto& s : sorted.spikes) s.sample_index += base;
        } else {
            sorted =
                postproc::sort_recording(ck.model, rec, sort_c.cfg.postproc, sort_c.threads);
        }
        io::write_sorted(sort_out, sorted);
        std::printf("wrote %s (%zu spikes from %d neurons)\n", sort_out.c_str(),
                    sorted.spikes.size(), sorted.n_neurons);
        write_sidecar(sort_out, "sort", sort_c, {sort_out});
    });

    // ---- eval ----
    auto* eval_cmd = app.add_subcommand("eval", "match sorted spikes against ground truth");
    Common eval_c;
    add_common(eval_cmd, eval_c);
    std::string eval_spikes, eval_gt, eval_out;
    int64_t eval_from_sample = 0;
    double eval_rate = 0.0;
    eval_cmd->add_option("--spikes", eval_spikes, ".spikes.json")->required();
    eval_cmd->add_option("--gt", eval_gt, ".gt.json")->required();
    eval_cmd->add_option("--from-sample", eval_from_sample,
                         "evaluate only spikes at/after this sample");
    eval_cmd->add_option("--sample-rate", eval_rate,
                         "Hz; derives the 0.4 ms tolerance when given");
    eval_cmd->add_option("--out", eval_out, "also write the report as JSON");
    auto* e_tol =
        eval_cmd->add_option("--tolerance-samples", eval_c.cfg.eval.tolerance_samples, "");
    eval_cmd->callback([&] {
        auto tol = eval_c.cfg.eval.tolerance_samples;
        eval_c.load();
        if (eval_rate > 0.0) eval_c.cfg.synth.sample_rate_hz = eval_rate;
        eval_c.cfg.resolve();
        if (e_tol->count()) eval_c.cfg.eval.tolerance_samples = tol;
        if (eval_rate > 0.0 && !e_tol->count())
            eval_c.cfg.eval = eval::MatchConfig::for_rate(eval_rate);

        postproc::SortedOutput sorted = io::read_sorted(eval_spikes);
        GroundTruth gt = io::read_ground_truth(eval_gt);
        if (eval_from_sample > 0) {
            std::erase_if(sorted.spikes, [&](const postproc::SortedSpike& s) {
                return s.sample_index < eval_from_sample;
            });
            std::erase_if(gt.spikes, [&](const SpikeEvent& e) {
                return e.sample_index < eval_from_sample;
            });
        }
        const eval::EvalReport report = eval::match(sorted, gt, eval_c.cfg.eval);
        std::printf("%s", eval::render_table(report).c_str());
        std::printf("accuracy %.6f\n", report.accuracy);
        if (!eval_out.empty()) {
            io::write_file(eval_out, io::to_json(report).dump(2) + "\n");
            write_sidecar(eval_out, "eval", eval_c, {eval_out});
        }
    });

    // ---- curve ----
    auto* curve_cmd =
        app.add_subcommand("curve", "accuracy vs spikes-per-neuron, finetune or scratch");
    Common curve_c;
    add_common(curve_cmd, curve_c);
    std::string curve_rec, curve_gt, curve_backbone, curve_out = "curve.csv";
    std::string curve_nft = "3..37";
    double curve_boundary = 50.0;
    curve_cmd->add_option("--rec", curve_rec, "recording to finetune/test on")->required();
    curve_cmd->add_option("--gt", curve_gt, ".gt.json (default: derived)");
    curve_cmd->add_option("--backbone", curve_backbone, "pretrained backbone (else scratch)");
    curve_cmd->add_option("--n-ft", curve_nft, "list: '3..37' or '3,5,10'");
    curve_cmd->add_option("--boundary-s", curve_boundary, "train/test split point");
    curve_cmd->add_option("--out", curve_out, "CSV output");
    curve_cmd->callback([&] {
        curve_c.load();
        const Recording rec = io::read_recording(curve_rec);
        const GroundTruth gt =
            io::read_ground_truth(curve_gt.empty() ? gt_path_for(curve_rec) : curve_gt);
        curve_c.cfg.synth.sample_rate_hz = rec.sample_rate_hz;
        curve_c.cfg.resolve();
        const dataset::SplitResult split = dataset::split_train_test(rec, gt, curve_boundary);
        eval::CurveConfig ccfg;
        ccfg.window = curve_c.cfg.window;
        ccfg.backbone = curve_c.cfg.backbone;
        ccfg.train = curve_c.cfg.train;
        ccfg.postproc = curve_c.cfg.postproc;
        ccfg.match = curve_c.cfg.eval;
        ccfg.threads = curve_c.threads;
        nn::Backbone bb;
        const nn::Backbone* bb_ptr = nullptr;
        if (!curve_backbone.empty()) {
            bb = io::read_checkpoint(curve_backbone).backbone();
            bb_ptr = &bb;
        }
        const std::vector<eval::CurvePoint> curve =
            eval::fewshot_curve(bb_ptr, split.rec_train, split.gt_train, split.rec_test,
                                split.gt_test, parse_n_ft_list(curve_nft), ccfg, curve_c.seed);
        const std::string csv = eval::render_curve_csv(curve);
        io::write_file(curve_out, csv);
        std::printf("%s", csv.c_str());
        write_sidecar(curve_out, "curve", curve_c, {curve_out});
    });

    // ---- bench ----
    auto* bench_cmd =
        app.add_subcommand("bench", "time sort (OpenMP vs serial reference) on a recording");
    Common bench_c;
    add_common(bench_cmd, bench_c);
    std::string bench_model, bench_rec;
    int bench_repeat = 5;
    bool bench_serial = false;
    bench_cmd->add_option("--model", bench_model, "model checkpoint")->required();
    bench_cmd->add_option("--rec", bench_rec, ".rec recording")->required();
    bench_cmd->add_option("--repeat", bench_repeat, "repetitions per mode");
    bench_cmd->add_flag("--with-serial", bench_serial, "also time the serial reference");
    bench_cmd->callback([&] {
        bench_c.load();
        if (bench_repeat < 1) throw ValidationError("bench: --repeat must be >= 1");
        const io::LoadedCheckpoint ck = io::read_checkpoint(bench_model);
        if (!ck.classifier_present)
            throw ValidationError("bench: needs a full model checkpoint");
        const Recording rec = io::read_recording(bench_rec);
        auto stats = [](std::vector<double> v) {
            std::sort(v.begin(), v.end());
            const double median = v[v.size() / 2];
            const double p90 = v[static_cast<size_t>(0.9 * (static_cast<double>(v.size()) - 1))];
            return std::tuple<double, double, double>(v.front(), median, p90);
        };
        auto run_mode = [&](bool serial) {
            std::vector<double> times;
            size_t n_spikes = 0;
            for (int r = 0; r < bench_repeat; ++r) {
                const double t0 = now_s();
                postproc::SortedOutput sorted;
                if (serial) {
                    const postproc::ProbTrace trace =
                        postproc::infer_trace_serial(ck.model, rec);
                    const postproc::ProbTrace filtered = postproc::triangle_filter_serial(
                        trace, bench_c.cfg.postproc.triangle_half_width);
                    sorted = postproc::finalize(filtered, bench_c.cfg.postproc);
                } else {
                    sorted = postproc::sort_recording(ck.model, rec, bench_c.cfg.postproc,
                                                      bench_c.threads);
                }
                times.push_back(now_s() - t0);
                n_spikes = sorted.spikes.size();
            }
            const auto [mn, md, p90] = stats(times);
            std::printf("%-8s threads=%-2d min %.3f s  median %.3f s  p90 %.3f s  (%zu spikes)\n",
                        serial ? "serial" : "openmp",
                        serial ? 1 : effective_threads(bench_c.threads), mn, md, p90, n_spikes);
            return md;
        };
        const double par = run_mode(false);
        if (bench_serial) {
            const double ser = run_mode(true);
            std::printf("speedup %.2fx\n", ser / par);
        }
    });

    CLI11_PARSE(app, argc, argv);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run_app(argc, argv);
    } catch (const ValidationError& e) {
        std::fprintf(stderr, "validation error: %s\n", e.what());
        return 2;
    } catch (const IoError& e) {
        std::fprintf(stderr, "io error: %s\n", e.what());
        return 3;
    } catch (const DivergenceError& e) {
        std::fprintf(stderr, "divergence: %s\n", e.what());
        return 4;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
}
