#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "fafesort/dataset.hpp"
#include "fafesort/nn.hpp"
#include "fafesort/synth.hpp"

using namespace fafesort;
using namespace fafesort::nn;

namespace {

SorterModel toy_model(uint64_t seed, int n_channels = 4, int t_window = 9, int n_classes = 3) {
    BackboneConfig cfg;
    cfg.c_t1 = 3;
    cfg.c_t2 = 2;
    cfg.c_s = 4;
    cfg.k_t1 = 5;
    cfg.k_t2 = 3;
    Rng rng(seed);
    Backbone bb = init_backbone(cfg, n_channels, t_window, rng);
    return init_model(bb, n_classes, rng);
}

std::vector<float> random_window(const SorterModel& m, uint64_t seed) {
    Rng rng(seed);
    std::vector<float> w(static_cast<size_t>(m.n_channels()) * m.t_window());
    for (float& x : w) x = static_cast<float>(20.0 * rng.next_gaussian());
    return w;
}

dataset::WindowDataset tiny_dataset(const SorterModel& m, int64_t n_windows, uint64_t seed) {
    dataset::WindowDataset ds;
    ds.spec = {m.t_window(), 0, 0};
    ds.n_channels = m.n_channels();
    ds.n_classes = m.n_classes;
    ds.n_windows = n_windows;
    Rng rng(seed);
    ds.data.resize(static_cast<size_t>(n_windows) * ds.window_size());
    for (float& x : ds.data) x = static_cast<float>(10.0 * rng.next_gaussian());
    for (int64_t w = 0; w < n_windows; ++w) {
        ds.labels.push_back(static_cast<int32_t>(rng.next_below(
            static_cast<uint64_t>(m.n_classes))));
        ds.centers.push_back(w);
        ds.group.push_back(-1);
    }
    return ds;
}

}  // namespace

TEST_CASE("gradients match central finite differences on a toy model") {
    SorterModel model = toy_model(101);
    const std::vector<float> window = random_window(model, 7);
    const int label = 1;

    const size_t n_p = n_params(model);
    std::vector<double> analytic(n_p, 0.0);
    ForwardCache cache;
    forward(model, window.data(), cache);
    backward(model, window.data(), label, cache, analytic.data());

    std::vector<double*> params;
    for (const TensorRef& t : tensor_refs(model))
        for (double& x : *t.data) params.push_back(&x);
    REQUIRE(params.size() == n_p);

    const double h = 1e-4;
    double worst = 0.0;
    for (size_t p = 0; p < n_p; ++p) {
        const double saved = *params[p];
        *params[p] = saved + h;
        const double lp = loss_cross_entropy(forward(model, window.data(), cache), label);
        *params[p] = saved - h;
        const double lm = loss_cross_entropy(forward(model, window.data(), cache), label);
        *params[p] = saved;
        const double numeric = (lp - lm) / (2.0 * h);
        const double rel = std::abs(analytic[p] - numeric) /
                           std::max({std::abs(numeric), std::abs(analytic[p]), 1e-8});
        worst = std::max(worst, rel);
        REQUIRE(rel <= 1e-3);
    }
    MESSAGE("worst relative gradient error: ", worst);
}

TEST_CASE("cross-entropy closed forms") {
    CHECK(loss_cross_entropy(std::vector<double>{1.0, 0.0, 0.0}, 0) <= 1e-11);
    CHECK(loss_cross_entropy(std::vector<double>{0.25, 0.25, 0.25, 0.25}, 2) ==
          doctest::Approx(std::log(4.0)));
    CHECK(loss_cross_entropy(std::vector<double>{0.5, 0.5}, 1) ==
          doctest::Approx(std::log(2.0)));
    CHECK_THROWS_AS(loss_cross_entropy(std::vector<double>{0.5, 0.5}, 2), ValidationError);
    CHECK(std::isfinite(loss_cross_entropy(std::vector<double>{0.0, 1.0}, 0)));
}

TEST_CASE("softmax handles extreme logits without NaN") {
    SorterModel model = toy_model(5);
    // zero weights, huge biases: logits equal fc_b exactly
    for (const TensorRef& t : tensor_refs(model))
        if (t.name != "fc_b") std::fill(t.data->begin(), t.data->end(), 0.0);
    model.fc_b = {1e3, -1e3, 0.0};
    const std::vector<float> window = random_window(model, 1);
    const std::vector<double> probs = forward(model, window.data());
    double sum = 0;
    for (double p : probs) {
        CHECK(std::isfinite(p));
        sum += p;
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(probs[0] > 0.999);
}

TEST_CASE("normalization produces zero mean, unit variance pre-affine") {
    SorterModel model = toy_model(29);
    const std::vector<float> window = random_window(model, 3);
    ForwardCache cache;
    forward(model, window.data(), cache);
    auto stats = [](const std::vector<double>& v) {
        const double mu = std::accumulate(v.begin(), v.end(), 0.0) / v.size();
        double var = 0;
        for (double x : v) var += (x - mu) * (x - mu);
        return std::pair<double, double>(mu, var / v.size());
    };
    for (const auto* xhat : {&cache.x1hat, &cache.x2hat, &cache.x3hat}) {
        const auto [mu, var] = stats(*xhat);
        CHECK(std::abs(mu) < 1e-4);
        CHECK(std::abs(var - 1.0) < 1e-4);
    }
}

TEST_CASE("all-zero window with zero biases gives the uniform distribution") {
    SorterModel model = toy_model(31);
    const std::vector<float> window(static_cast<size_t>(model.n_channels()) * model.t_window(),
                                    0.0f);
    const std::vector<double> probs = forward(model, window.data());
    for (double p : probs) CHECK(p == doctest::Approx(1.0 / model.n_classes));
}

TEST_CASE("zero weights give the uniform distribution for any input") {
    SorterModel model = toy_model(37);
    for (const TensorRef& t : tensor_refs(model)) std::fill(t.data->begin(), t.data->end(), 0.0);
    const std::vector<float> window = random_window(model, 4);
    const std::vector<double> probs = forward(model, window.data());
    for (double p : probs) CHECK(p == doctest::Approx(1.0 / model.n_classes));
}

TEST_CASE("shape mismatch is reported with expected dimensions") {
    SorterModel model = toy_model(41);
    const dataset::WindowDataset ds = tiny_dataset(toy_model(41, 6, 9, 3), 8, 1);
    TrainConfig cfg;
    cfg.epochs = 1;
    CHECK_THROWS_WITH_AS(train(model, ds, cfg), doctest::Contains("expects"), ValidationError);
}

TEST_CASE("batch gradients: order-invariant, linear in duplicates") {
    SorterModel model = toy_model(43);
    const dataset::WindowDataset ds = tiny_dataset(model, 10, 2);
    const size_t n_p = n_params(model);

    std::vector<double> g1(n_p, 0.0), g2(n_p, 0.0);
    double l1 = 0, l2 = 0;
    const std::vector<int64_t> idx_a = {5, 2, 9, 0};
    const std::vector<int64_t> idx_b = {9, 0, 5, 2};
    batch_gradient(model, ds, idx_a, g1.data(), &l1);
    batch_gradient(model, ds, idx_b, g2.data(), &l2);
    CHECK(g1 == g2);
    CHECK(l1 == l2);

    std::vector<double> gs(n_p, 0.0), gd(n_p, 0.0);
    double ls = 0, ld = 0;
    batch_gradient(model, ds, std::vector<int64_t>{3}, gs.data(), &ls);
    batch_gradient(model, ds, std::vector<int64_t>{3, 3}, gd.data(), &ld);
    for (size_t p = 0; p < n_p; ++p) CHECK(gd[p] == 2.0 * gs[p]);
    CHECK(ld == 2.0 * ls);
}

TEST_CASE("lr=0 leaves parameters untouched") {
    SorterModel model = toy_model(47);
    const SorterModel before = model;
    const dataset::WindowDataset ds = tiny_dataset(model, 12, 3);
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.learning_rate = 0.0;
    train(model, ds, cfg);
    CHECK(model.fc_w == before.fc_w);
    CHECK(model.backbone.conv1_w == before.backbone.conv1_w);
    CHECK(model.backbone.norm3_g == before.backbone.norm3_g);
}

TEST_CASE("training is deterministic for a fixed seed") {
    const dataset::WindowDataset ds = tiny_dataset(toy_model(53), 20, 4);
    TrainConfig cfg;
    cfg.epochs = 4;
    cfg.batch_size = 8;  // several batches, so the seeded shuffle matters
    cfg.seed = 99;
    SorterModel a = toy_model(53), b = toy_model(53);
    const TrainResult ra = train(a, ds, cfg);
    const TrainResult rb = train(b, ds, cfg);
    CHECK(a.fc_w == b.fc_w);
    CHECK(a.backbone.conv2_w == b.backbone.conv2_w);
    CHECK(ra.epoch_losses == rb.epoch_losses);
    // different seed, different trajectory
    cfg.seed = 100;
    SorterModel c = toy_model(53);
    train(c, ds, cfg);
    CHECK(c.fc_w != a.fc_w);
}

TEST_CASE("divergence guard trips on non-finite loss") {
    SorterModel model = toy_model(59);
    model.fc_w[0] = std::numeric_limits<double>::infinity();
    const dataset::WindowDataset ds = tiny_dataset(toy_model(59), 6, 5);
    TrainConfig cfg;
    cfg.epochs = 1;
    CHECK_THROWS_AS(train(model, ds, cfg), DivergenceError);
}

TEST_CASE("separable toy recording trains to >=99% window accuracy") {
    synth::SynthConfig scfg;
    scfg.probe = standard_probe(ProbeKind::medium16);
    scfg.n_neurons = 2;
    scfg.duration_s = 10.0;
    scfg.noise_uv = 0.0;
    scfg.sample_rate_hz = 10000.0;
    scfg.firing_rate_hz = 2.0;
    scfg.seed = 61;
    const synth::SynthResult r = synth::synthesize(scfg);
    dataset::WindowSpec wspec{21, 5, 0};
    Rng ds_rng(1);
    const dataset::WindowDataset ds =
        dataset::build_dataset(r.recording, r.ground_truth, wspec, ds_rng);

    BackboneConfig bcfg;  // defaults
    Rng init_rng(2);
    Backbone bb = init_backbone(bcfg, r.recording.n_channels, wspec.t_window, init_rng);
    SorterModel model = init_model(bb, ds.n_classes, init_rng);
    TrainConfig tcfg;
    tcfg.seed = 3;
    const TrainResult tr = train(model, ds, tcfg);
    CHECK(tr.epoch_losses.size() == 50);
    CHECK(tr.epoch_losses.back() < tr.epoch_losses.front());

    ForwardCache cache;
    int64_t correct = 0;
    for (int64_t w = 0; w < ds.n_windows; ++w) {
        const auto probs = forward(model, ds.window_data(w), cache);
        const int pred = static_cast<int>(
            std::max_element(probs.begin(), probs.end()) - probs.begin());
        correct += (pred == ds.labels[static_cast<size_t>(w)]);
    }
    CHECK(static_cast<double>(correct) / static_cast<double>(ds.n_windows) >= 0.99);
}

TEST_CASE("pretrained backbone loads across class counts; finetune warm-starts") {
    synth::SynthConfig scfg;
    scfg.probe = standard_probe(ProbeKind::medium16);
    scfg.n_neurons = 3;
    scfg.duration_s = 8.0;
    scfg.noise_uv = 5.0;
    scfg.sample_rate_hz = 10000.0;
    scfg.firing_rate_hz = 3.0;
    scfg.seed = 67;
    const synth::SynthResult r = synth::synthesize(scfg);
    dataset::WindowSpec wspec{21, 5, 0};

    BackboneConfig bcfg;
    TrainConfig tcfg;
    tcfg.epochs = 12;
    tcfg.seed = 5;
    const Backbone bb = pretrain(r.recording, r.ground_truth, wspec, bcfg, tcfg);
    CHECK(bb.n_channels == 16);

    // loadable under a different class count
    Rng rng(1);
    const SorterModel other = init_model(bb, 7, rng);
    CHECK(other.n_classes == 7);

    // warm start beats scratch on the pretraining data's own dataset
    Rng ds_rng(2);
    const dataset::WindowDataset ds =
        dataset::build_dataset(r.recording, r.ground_truth, wspec, ds_rng);
    TrainConfig one;
    one.epochs = 1;
    one.seed = 9;
    SorterModel warm_model;
    {
        const Backbone bb_copy = bb;
        warm_model = finetune(bb_copy, ds, one);
    }
    Rng scratch_rng(derive_seed(one.seed, "classifier-init"));
    Backbone fresh = init_backbone(bcfg, r.recording.n_channels, wspec.t_window, scratch_rng);
    SorterModel scratch_model = init_model(fresh, ds.n_classes, scratch_rng);
    const TrainResult scratch_tr = train(scratch_model, ds, one);

    // re-run one epoch explicitly to read the warm model's loss trace
    Rng warm_rng(derive_seed(one.seed, "classifier-init"));
    SorterModel warm_again = init_model(bb, ds.n_classes, warm_rng);
    const TrainResult warm_tr = train(warm_again, ds, one);
    CHECK(warm_tr.epoch_losses[0] < scratch_tr.epoch_losses[0]);

    // channel-count mismatch is rejected
    const dataset::WindowDataset bad = [&] {
        dataset::WindowDataset d = ds;
        d.n_channels = 8;
        return d;
    }();
    CHECK_THROWS_WITH_AS(finetune(bb, bad, one), doctest::Contains("channels"), ValidationError);
}
