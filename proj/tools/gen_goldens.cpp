// Regenerates the committed golden files (tests/golden). Run from the
// repo root: build/gen_goldens tests/golden
#include <cstdio>
#include <string>

#include "fafesort/io.hpp"

using namespace fafesort;

int main(int argc, char** argv) {
    const std::string dir = argc > 1 ? argv[1] : "tests/golden";

    Recording rec;
    rec.n_channels = 4;
    rec.n_samples = 256;
    rec.sample_rate_hz = 10000.0;
    rec.geometry.pitch_um = 15.0;
    rec.geometry.name = "golden4";
    for (int c = 0; c < 4; ++c) rec.geometry.channel_positions.push_back({0.0, 0.0, 15.0 * c});
    Rng rng(20240101);
    rec.samples.resize(4 * 256);
    for (float& v : rec.samples) v = static_cast<float>(25.0 * rng.next_gaussian());
    io::write_recording(dir + "/golden.rec", rec);

    nn::BackboneConfig cfg;
    cfg.c_t1 = 3;
    cfg.c_t2 = 2;
    cfg.c_s = 4;
    cfg.k_t1 = 5;
    cfg.k_t2 = 3;
    Rng mrng(20240102);
    nn::Backbone bb = nn::init_backbone(cfg, 4, 9, mrng);
    nn::SorterModel model = nn::init_model(bb, 3, mrng);
    io::write_model(dir + "/golden.ckpt", model);

    postproc::SortedOutput so;
    so.n_neurons = 2;
    so.spikes = {{0, 31, 0.875}, {1, 64, 0.625}, {0, 190, 0.90625}};
    io::write_sorted(dir + "/golden.spikes.json", so);

    std::printf("wrote golden files under %s\n", dir.c_str());
    return 0;
}
