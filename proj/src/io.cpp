#include "fafesort/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace fafesort::io {

using nlohmann::json;

namespace {

constexpr char kRecMagic[9] = "FAFEREC1";
constexpr char kCkptMagic[9] = "FAFECKP1";
constexpr char kWdsMagic[9] = "FAFEWDS1";

void put_u32le(std::string& out, uint32_t v) {
    out.push_back(static_cast<char>(v & 0xFF));
    out.push_back(static_cast<char>((v >> 8) & 0xFF));
    out.push_back(static_cast<char>((v >> 16) & 0xFF));
    out.push_back(static_cast<char>((v >> 24) & 0xFF));
}

uint32_t get_u32le(const unsigned char* p) {
    return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
           (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}

void put_f32le(std::string& out, float v) {
    const uint32_t bits = std::bit_cast<uint32_t>(v);
    put_u32le(out, bits);
}

float get_f32le(const unsigned char* p) {
    return std::bit_cast<float>(get_u32le(p));
}

json parse_json(const std::string& text, const std::string& context) {
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        throw IoError(context + ": JSON parse error at byte " + std::to_string(e.byte) + ": " +
                      e.what());
    }
}

void check_version(const json& j, const std::string& context) {
    if (!j.contains("format_version"))
        throw IoError(context + ": missing format_version");
    const int v = j.at("format_version").get<int>();
    if (v != kFormatVersion)
        throw IoError(context + ": format_version " + std::to_string(v) + ", expected " +
                      std::to_string(kFormatVersion));
}

void check_keys(const json& j, const std::string& path,
                std::initializer_list<const char*> allowed) {
    for (const auto& [key, value] : j.items()) {
        bool ok = false;
        for (const char* a : allowed)
            if (key == a) {
                ok = true;
                break;
            }
        if (!ok) throw IoError("config: unknown key at " + path + "/" + key);
    }
}

struct FramedFile {
    json manifest;
    std::string payload;
};

// magic + u32 manifest length + manifest + payload
std::string frame(const char* magic, const json& manifest, const std::string& payload) {
    std::string out;
    const std::string m = manifest.dump();
    out.reserve(12 + m.size() + payload.size());
    out.append(magic, 8);
    put_u32le(out, static_cast<uint32_t>(m.size()));
    out += m;
    out += payload;
    return out;
}

FramedFile unframe(const std::string& bytes, const char* magic, const std::string& context) {
    if (bytes.size() < 12 || std::memcmp(bytes.data(), magic, 8) != 0)
        throw IoError(context + ": bad magic (expected " + std::string(magic) + ")");
    const uint32_t mlen = get_u32le(reinterpret_cast<const unsigned char*>(bytes.data()) + 8);
    if (bytes.size() < 12 + static_cast<size_t>(mlen))
        throw IoError(context + ": truncated header (need " + std::to_string(12 + mlen) +
                      " bytes, have " + std::to_string(bytes.size()) + ")");
    FramedFile f;
    f.manifest = parse_json(bytes.substr(12, mlen), context);
    f.payload = bytes.substr(12 + static_cast<size_t>(mlen));
    return f;
}

}  // namespace

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "' for reading");
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (!in.good() && !in.eof()) throw IoError("read failed on '" + path + "'");
    return bytes;
}

void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out.good()) throw IoError("write failed on '" + path + "'");
}

void write_recording(const std::string& path, const Recording& rec) {
    rec.validate();
    json header;
    header["format_version"] = kFormatVersion;
    header["sample_rate_hz"] = rec.sample_rate_hz;
    header["n_channels"] = rec.n_channels;
    header["n_samples"] = rec.n_samples;
    json geom = json::array();
    for (const Vec3& p : rec.geometry.channel_positions) geom.push_back({p.x, p.y, p.z});
    header["geometry"] = geom;
    header["pitch_um"] = rec.geometry.pitch_um;
    header["name"] = rec.geometry.name;

    std::string payload;
    payload.reserve(rec.samples.size() * 4);
    // sample-major frames on disk
    for (int64_t t = 0; t < rec.n_samples; ++t)
        for (int c = 0; c < rec.n_channels; ++c) put_f32le(payload, rec.at(c, t));
    write_file(path, frame(kRecMagic, header, payload));
}

Recording read_recording(const std::string& path) {
    const std::string bytes = read_file(path);
    const FramedFile f = unframe(bytes, kRecMagic, path);
    check_version(f.manifest, path);
    Recording rec;
    try {
        rec.sample_rate_hz = f.manifest.at("sample_rate_hz").get<double>();
        rec.n_channels = f.manifest.at("n_channels").get<int>();
        rec.n_samples = f.manifest.at("n_samples").get<int64_t>();
        rec.geometry.pitch_um = f.manifest.at("pitch_um").get<double>();
        rec.geometry.name = f.manifest.at("name").get<std::string>();
        for (const auto& p : f.manifest.at("geometry"))
            rec.geometry.channel_positions.push_back(
                {p.at(0).get<double>(), p.at(1).get<double>(), p.at(2).get<double>()});
    } catch (const json::exception& e) {
        throw IoError(path + ": bad header: " + e.what());
    }
    const size_t expected = static_cast<size_t>(rec.n_samples) *
                            static_cast<size_t>(rec.n_channels) * 4;
    if (f.payload.size() != expected)
        throw IoError(path + ": payload is " + std::to_string(f.payload.size()) +
                      " bytes, expected " + std::to_string(expected));
    rec.samples.resize(static_cast<size_t>(rec.n_samples) * rec.n_channels);
    const unsigned char* p = reinterpret_cast<const unsigned char*>(f.payload.data());
    for (int64_t t = 0; t < rec.n_samples; ++t)
        for (int c = 0; c < rec.n_channels; ++c) {
            rec.samples[static_cast<size_t>(c) * rec.n_samples + t] = get_f32le(p);
            p += 4;
        }
    rec.validate();
    return rec;
}

void write_ground_truth(const std::string& path, const GroundTruth& gt) {
    gt.validate();
    json j;
    j["format_version"] = kFormatVersion;
    j["n_neurons"] = gt.n_neurons;
    json spikes = json::array();
    for (const SpikeEvent& e : gt.spikes) spikes.push_back({e.neuron_id, e.sample_index});
    j["spikes"] = spikes;
    write_file(path, j.dump(2) + "\n");
}

GroundTruth read_ground_truth(const std::string& path) {
    const json j = parse_json(read_file(path), path);
    check_version(j, path);
    GroundTruth gt;
    try {
        gt.n_neurons = j.at("n_neurons").get<int32_t>();
        for (const auto& e : j.at("spikes"))
            gt.spikes.push_back({e.at(0).get<int32_t>(), e.at(1).get<int64_t>()});
    } catch (const json::exception& e) {
        throw IoError(path + ": bad ground truth: " + e.what());
    }
    gt.validate();
    return gt;
}

namespace {

std::string checkpoint_bytes(nn::SorterModel& model, bool classifier_present) {
    json manifest;
    manifest["format_version"] = kFormatVersion;
    manifest["backbone_cfg"] = {{"c_t1", model.backbone.cfg.c_t1},
                                {"c_t2", model.backbone.cfg.c_t2},
                                {"c_s", model.backbone.cfg.c_s},
                                {"k_t1", model.backbone.cfg.k_t1},
                                {"k_t2", model.backbone.cfg.k_t2}};
    manifest["meta"] = {{"n_classes", classifier_present ? model.n_classes : 0},
                        {"t_window", model.t_window()},
                        {"n_channels", model.n_channels()},
                        {"classifier_present", classifier_present}};
    const std::vector<nn::TensorRef> refs =
        classifier_present ? nn::tensor_refs(model) : nn::tensor_refs(model.backbone);
    std::string payload;
    json tensors = json::array();
    for (const nn::TensorRef& t : refs) {
        tensors.push_back(
            {{"name", t.name}, {"shape", t.shape}, {"offset", payload.size()}});
        for (double v : *t.data) put_f32le(payload, static_cast<float>(v));
    }
    manifest["tensors"] = tensors;
    return frame(kCkptMagic, manifest, payload);
}

}  // namespace

void write_model(const std::string& path, const nn::SorterModel& model) {
    nn::SorterModel copy = model;
    write_file(path, checkpoint_bytes(copy, true));
}

void write_backbone(const std::string& path, const nn::Backbone& backbone) {
    nn::SorterModel shell;
    shell.backbone = backbone;
    write_file(path, checkpoint_bytes(shell, false));
}

LoadedCheckpoint read_checkpoint(const std::string& path) {
    const FramedFile f = unframe(read_file(path), kCkptMagic, path);
    check_version(f.manifest, path);
    LoadedCheckpoint out;
    nn::BackboneConfig cfg;
    int n_classes = 0, t_window = 0, n_channels = 0;
    try {
        const json& bc = f.manifest.at("backbone_cfg");
        cfg.c_t1 = bc.at("c_t1").get<int>();
        cfg.c_t2 = bc.at("c_t2").get<int>();
        cfg.c_s = bc.at("c_s").get<int>();
        cfg.k_t1 = bc.at("k_t1").get<int>();
        cfg.k_t2 = bc.at("k_t2").get<int>();
        const json& meta = f.manifest.at("meta");
        n_classes = meta.at("n_classes").get<int>();
        t_window = meta.at("t_window").get<int>();
        n_channels = meta.at("n_channels").get<int>();
        out.classifier_present = meta.at("classifier_present").get<bool>();
    } catch (const json::exception& e) {
        throw IoError(path + ": bad manifest: " + e.what());
    }

    // Build empty tensors of the right shapes, then fill by name+offset.
    Rng dummy(0);
    out.model.backbone = nn::init_backbone(cfg, n_channels, t_window, dummy);
    if (out.classifier_present) {
        out.model = nn::init_model(out.model.backbone, n_classes, dummy);
    }
    std::vector<nn::TensorRef> refs = out.classifier_present
                                          ? nn::tensor_refs(out.model)
                                          : nn::tensor_refs(out.model.backbone);
    std::vector<bool> seen(refs.size(), false);
    for (const auto& tj : f.manifest.at("tensors")) {
        const std::string name = tj.at("name").get<std::string>();
        const size_t offset = tj.at("offset").get<size_t>();
        auto it = std::find_if(refs.begin(), refs.end(),
                               [&](const nn::TensorRef& r) { return r.name == name; });
        if (it == refs.end()) throw IoError(path + ": unexpected tensor '" + name + "'");
        const std::vector<int64_t> shape = tj.at("shape").get<std::vector<int64_t>>();
        if (shape != it->shape) throw IoError(path + ": tensor '" + name + "' shape mismatch");
        const size_t n = it->data->size();
        if (offset + 4 * n > f.payload.size())
            throw IoError(path + ": tensor '" + name + "' needs bytes [" +
                          std::to_string(offset) + "," + std::to_string(offset + 4 * n) +
                          ") but payload has " + std::to_string(f.payload.size()));
        const unsigned char* p =
            reinterpret_cast<const unsigned char*>(f.payload.data()) + offset;
        for (size_t i = 0; i < n; ++i, p += 4)
            (*it->data)[i] = static_cast<double>(get_f32le(p));
        seen[static_cast<size_t>(it - refs.begin())] = true;
    }
    for (size_t i = 0; i < refs.size(); ++i)
        if (!seen[i]) throw IoError(path + ": missing tensor '" + refs[i].name + "'");
    return out;
}

void write_dataset(const std::string& path, const dataset::WindowDataset& ds) {
    json manifest;
    manifest["format_version"] = kFormatVersion;
    manifest["spec"] = {{"t_window", ds.spec.t_window},
                        {"t_shift", ds.spec.t_shift},
                        {"center_tolerance", ds.spec.center_tolerance}};
    manifest["n_classes"] = ds.n_classes;
    manifest["n_channels"] = ds.n_channels;
    manifest["counts"] = {{"n_windows", ds.n_windows},
                          {"n_spike", ds.count_spike_windows()},
                          {"n_nospike", ds.count_nospike_windows()}};
    manifest["labels"] = ds.labels;
    manifest["centers"] = ds.centers;
    manifest["groups"] = ds.group;
    manifest["group_neurons"] = ds.group_neuron;
    std::string payload;
    payload.reserve(ds.data.size() * 4);
    for (float v : ds.data) put_f32le(payload, v);
    write_file(path, frame(kWdsMagic, manifest, payload));
}

dataset::WindowDataset read_dataset(const std::string& path) {
    const FramedFile f = unframe(read_file(path), kWdsMagic, path);
    check_version(f.manifest, path);
    dataset::WindowDataset ds;
    try {
        const json& spec = f.manifest.at("spec");
        ds.spec.t_window = spec.at("t_window").get<int>();
        ds.spec.t_shift = spec.at("t_shift").get<int>();
        ds.spec.center_tolerance = spec.at("center_tolerance").get<int>();
        ds.n_classes = f.manifest.at("n_classes").get<int32_t>();
        ds.n_channels = f.manifest.at("n_channels").get<int>();
        ds.n_windows = f.manifest.at("counts").at("n_windows").get<int64_t>();
        ds.labels = f.manifest.at("labels").get<std::vector<int32_t>>();
        ds.centers = f.manifest.at("centers").get<std::vector<int64_t>>();
        ds.group = f.manifest.at("groups").get<std::vector<int32_t>>();
        ds.group_neuron = f.manifest.at("group_neurons").get<std::vector<int32_t>>();
    } catch (const json::exception& e) {
        throw IoError(path + ": bad manifest: " + e.what());
    }
    const size_t n_floats = static_cast<size_t>(ds.n_windows) * ds.window_size();
    if (f.payload.size() != n_floats * 4)
        throw IoError(path + ": payload is " + std::to_string(f.payload.size()) +
                      " bytes, expected " + std::to_string(n_floats * 4));
    ds.data.resize(n_floats);
    const unsigned char* p = reinterpret_cast<const unsigned char*>(f.payload.data());
    for (size_t i = 0; i < n_floats; ++i, p += 4) ds.data[i] = get_f32le(p);
    ds.validate();
    return ds;
}

void write_sorted(const std::string& path, const postproc::SortedOutput& sorted) {
    json j;
    j["format_version"] = kFormatVersion;
    j["n_neurons"] = sorted.n_neurons;
    json spikes = json::array();
    for (const postproc::SortedSpike& s : sorted.spikes)
        spikes.push_back({s.neuron_id, s.sample_index, s.score});
    j["spikes"] = spikes;
    write_file(path, j.dump(2) + "\n");
}

postproc::SortedOutput read_sorted(const std::string& path) {
    const json j = parse_json(read_file(path), path);
    check_version(j, path);
    postproc::SortedOutput out;
    try {
        out.n_neurons = j.at("n_neurons").get<int32_t>();
        for (const auto& s : j.at("spikes"))
            out.spikes.push_back(
                {s.at(0).get<int32_t>(), s.at(1).get<int64_t>(), s.at(2).get<double>()});
    } catch (const json::exception& e) {
        throw IoError(path + ": bad spikes file: " + e.what());
    }
    return out;
}

void RunConfig::resolve() {
    if (window.t_window == 0)
        window.t_window = dataset::WindowSpec::default_t_window(synth.sample_rate_hz);
    if (eval.tolerance_samples == 0)
        eval = eval::MatchConfig::for_rate(synth.sample_rate_hz);
}

synth::SynthConfig RunConfig::make_synth_config(uint64_t seed) const {
    synth::SynthConfig cfg;
    cfg.probe = standard_probe(probe_kind_from_string(synth.probe));
    cfg.n_neurons = synth.n_neurons;
    cfg.duration_s = synth.duration_s;
    cfg.noise_uv = synth.noise_uv;
    cfg.drift = synth.drift;
    cfg.sample_rate_hz = synth.sample_rate_hz;
    cfg.firing_rate_hz = synth.firing_rate_hz;
    cfg.min_visible_uv = synth.min_visible_uv;
    cfg.min_separation_um = synth.min_separation_um;
    cfg.seed = seed;
    return cfg;
}

nlohmann::json to_json(const RunConfig& cfg) {
    json j;
    j["synth"] = {{"probe", cfg.synth.probe},
                  {"n_neurons", cfg.synth.n_neurons},
                  {"duration_s", cfg.synth.duration_s},
                  {"noise_uv", cfg.synth.noise_uv},
                  {"drift",
                   {{"kind", std::string(synth::to_string(cfg.synth.drift.kind))},
                    {"velocity_um_per_s", cfg.synth.drift.velocity_um_per_s},
                    {"range_um", cfg.synth.drift.range_um},
                    {"jump_period_s", cfg.synth.drift.jump_period_s},
                    {"jump_max_um", cfg.synth.drift.jump_max_um}}},
                  {"sample_rate_hz", cfg.synth.sample_rate_hz},
                  {"firing_rate_hz", cfg.synth.firing_rate_hz},
                  {"min_visible_uv", cfg.synth.min_visible_uv},
                  {"min_separation_um", cfg.synth.min_separation_um}};
    j["window"] = {{"t_window", cfg.window.t_window},
                   {"t_shift", cfg.window.t_shift},
                   {"center_tolerance", cfg.window.center_tolerance}};
    j["backbone"] = {{"c_t1", cfg.backbone.c_t1},
                     {"c_t2", cfg.backbone.c_t2},
                     {"c_s", cfg.backbone.c_s},
                     {"k_t1", cfg.backbone.k_t1},
                     {"k_t2", cfg.backbone.k_t2}};
    j["train"] = {{"epochs", cfg.train.epochs},
                  {"learning_rate", cfg.train.learning_rate},
                  {"batch_size", cfg.train.batch_size},
                  {"adam_beta1", cfg.train.adam_beta1},
                  {"adam_beta2", cfg.train.adam_beta2},
                  {"adam_eps", cfg.train.adam_eps}};
    j["postproc"] = {{"triangle_half_width", cfg.postproc.triangle_half_width},
                     {"threshold", cfg.postproc.threshold}};
    j["eval"] = {{"tolerance_samples", cfg.eval.tolerance_samples}};
    return j;
}

RunConfig run_config_from_json(const nlohmann::json& j) {
    RunConfig cfg;
    check_keys(j, "", {"synth", "window", "backbone", "train", "postproc", "eval"});
    try {
        if (j.contains("synth")) {
            const json& s = j.at("synth");
            check_keys(s, "synth",
                       {"probe", "n_neurons", "duration_s", "noise_uv", "drift",
                        "sample_rate_hz", "firing_rate_hz", "min_visible_uv",
                        "min_separation_um"});
            if (s.contains("probe")) cfg.synth.probe = s.at("probe").get<std::string>();
            if (s.contains("n_neurons")) cfg.synth.n_neurons = s.at("n_neurons").get<int>();
            if (s.contains("duration_s")) cfg.synth.duration_s = s.at("duration_s").get<double>();
            if (s.contains("noise_uv")) cfg.synth.noise_uv = s.at("noise_uv").get<double>();
            if (s.contains("sample_rate_hz"))
                cfg.synth.sample_rate_hz = s.at("sample_rate_hz").get<double>();
            if (s.contains("firing_rate_hz"))
                cfg.synth.firing_rate_hz = s.at("firing_rate_hz").get<double>();
            if (s.contains("min_visible_uv"))
                cfg.synth.min_visible_uv = s.at("min_visible_uv").get<double>();
            if (s.contains("min_separation_um"))
                cfg.synth.min_separation_um = s.at("min_separation_um").get<double>();
            if (s.contains("drift")) {
                const json& d = s.at("drift");
                check_keys(d, "synth/drift",
                           {"kind", "velocity_um_per_s", "range_um", "jump_period_s",
                            "jump_max_um"});
                cfg.synth.drift = synth::DriftSpec::with_defaults(
                    synth::drift_kind_from_string(d.at("kind").get<std::string>()));
                if (d.contains("velocity_um_per_s"))
                    cfg.synth.drift.velocity_um_per_s = d.at("velocity_um_per_s").get<double>();
                if (d.contains("range_um"))
                    cfg.synth.drift.range_um = d.at("range_um").get<double>();
                if (d.contains("jump_period_s"))
                    cfg.synth.drift.jump_period_s = d.at("jump_period_s").get<double>();
                if (d.contains("jump_max_um"))
                    cfg.synth.drift.jump_max_um = d.at("jump_max_um").get<double>();
            }
        }
        if (j.contains("window")) {
            const json& w = j.at("window");
            check_keys(w, "window", {"t_window", "t_shift", "center_tolerance"});
            if (w.contains("t_window")) cfg.window.t_window = w.at("t_window").get<int>();
            if (w.contains("t_shift")) cfg.window.t_shift = w.at("t_shift").get<int>();
            if (w.contains("center_tolerance"))
                cfg.window.center_tolerance = w.at("center_tolerance").get<int>();
        }
        if (j.contains("backbone")) {
            const json& b = j.at("backbone");
            check_keys(b, "backbone", {"c_t1", "c_t2", "c_s", "k_t1", "k_t2"});
            if (b.contains("c_t1")) cfg.backbone.c_t1 = b.at("c_t1").get<int>();
            if (b.contains("c_t2")) cfg.backbone.c_t2 = b.at("c_t2").get<int>();
            if (b.contains("c_s")) cfg.backbone.c_s = b.at("c_s").get<int>();
            if (b.contains("k_t1")) cfg.backbone.k_t1 = b.at("k_t1").get<int>();
            if (b.contains("k_t2")) cfg.backbone.k_t2 = b.at("k_t2").get<int>();
        }
        if (j.contains("train")) {
            const json& t = j.at("train");
            check_keys(t, "train",
                       {"epochs", "learning_rate", "batch_size", "adam_beta1", "adam_beta2",
                        "adam_eps"});
            if (t.contains("epochs")) cfg.train.epochs = t.at("epochs").get<int>();
            if (t.contains("learning_rate"))
                cfg.train.learning_rate = t.at("learning_rate").get<double>();
            if (t.contains("batch_size")) cfg.train.batch_size = t.at("batch_size").get<int>();
            if (t.contains("adam_beta1")) cfg.train.adam_beta1 = t.at("adam_beta1").get<double>();
            if (t.contains("adam_beta2")) cfg.train.adam_beta2 = t.at("adam_beta2").get<double>();
            if (t.contains("adam_eps")) cfg.train.adam_eps = t.at("adam_eps").get<double>();
        }
        if (j.contains("postproc")) {
            const json& p = j.at("postproc");
            check_keys(p, "postproc", {"triangle_half_width", "threshold"});
            if (p.contains("triangle_half_width"))
                cfg.postproc.triangle_half_width = p.at("triangle_half_width").get<int>();
            if (p.contains("threshold")) cfg.postproc.threshold = p.at("threshold").get<double>();
        }
        if (j.contains("eval")) {
            const json& e = j.at("eval");
            check_keys(e, "eval", {"tolerance_samples"});
            if (e.contains("tolerance_samples"))
                cfg.eval.tolerance_samples = e.at("tolerance_samples").get<int64_t>();
        }
    } catch (const json::exception& e) {
        throw IoError(std::string("config: ") + e.what());
    }
    cfg.resolve();
    return cfg;
}

RunConfig load_run_config(const std::string& path) {
    json j = parse_json(read_file(path), path);
    if (j.contains("config")) j = j.at("config");  // run sidecar
    return run_config_from_json(j);
}

void save_run_config(const std::string& path, const RunConfig& cfg) {
    write_file(path, to_json(cfg).dump(2) + "\n");
}

nlohmann::json to_json(const eval::EvalReport& report) {
    json j;
    j["tp"] = report.tp;
    j["fp"] = report.fp;
    j["fn"] = report.fn;
    j["accuracy"] = report.accuracy;
    json per = json::array();
    for (const eval::NeuronReport& nr : report.per_neuron)
        per.push_back({{"neuron_id", nr.neuron_id},
                       {"tp", nr.tp},
                       {"fp", nr.fp},
                       {"fn", nr.fn},
                       {"accuracy", nr.accuracy}});
    j["per_neuron"] = per;
    return j;
}

}  // namespace fafesort::io
