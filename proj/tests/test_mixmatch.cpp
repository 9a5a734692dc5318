#include <doctest.h>

#include <numeric>

#include "cgssl/confidence.hpp"
#include "cgssl/error.hpp"
#include "cgssl/mixmatch.hpp"
#include "helpers.hpp"

using namespace cgssl;
using namespace cgssl::testing;

namespace {

double entropy(std::span<const double> p) {
    double h = 0.0;
    for (const double v : p) h -= v > 0.0 ? v * std::log(v) : 0.0;
    return h;
}

MixMatchConfig quick_mixmatch() {
    MixMatchConfig c;
    c.train.max_steps = 12;
    c.train.eval_interval = 4;
    c.train.batch_size = 8;
    c.train.seed = 3;
    c.k_aug = 2;
    return c;
}

}  // namespace

TEST_CASE("sharpening oracles") {
    const auto s = sharpen(std::vector<double>{0.6, 0.4}, 0.5);
    CHECK(std::abs(s[0] - 0.36 / 0.52) < 1e-9);
    CHECK(std::abs(s[1] - 0.16 / 0.52) < 1e-9);
    const std::vector<double> p{0.1, 0.2, 0.3, 0.4};
    CHECK(sharpen(p, 1.0) == p);
    for (const double v : sharpen(std::vector<double>(5, 0.2), 0.3)) CHECK(std::abs(v - 0.2) < 1e-15);
    CHECK_THROWS_AS(sharpen(p, 0.0), InvalidInput);
    CHECK_THROWS_AS(sharpen(std::vector<double>{0.5, 0.2}, 0.5), InvalidInput);
}

TEST_CASE("sharpening keeps the simplex and the argmax and lowers entropy") {
    Rng rng(12);
    for (int t = 0; t < 300; ++t) {
        std::vector<double> z(2 + rng.index(9));
        for (auto& v : z) v = rng.uniform(-4, 4);
        const auto p = softmax(z);
        const auto s = sharpen(p, 0.5);
        CHECK(std::abs(std::accumulate(s.begin(), s.end(), 0.0) - 1.0) < 1e-6);
        CHECK(std::max_element(s.begin(), s.end()) - s.begin() == std::max_element(p.begin(), p.end()) - p.begin());
        CHECK(entropy(s) <= entropy(p) + 1e-12);
    }
}

TEST_CASE("mixup with a fixed lambda") {
    const Tensor x1({1, 2}, std::vector<double>{1.0, 0.0}), x2({1, 2}, std::vector<double>{0.0, 1.0});
    const auto m = mixup_with_lambda(x1, x1, x2, x2, 0.3);
    CHECK(m.lambda == 0.7);
    CHECK(std::abs(m.targets[0] - 0.7) < 1e-15);
    CHECK(std::abs(m.targets[1] - 0.3) < 1e-15);
    CHECK(std::abs(m.inputs[0] - 0.7) < 1e-15);
    CHECK_THROWS_AS(mixup_with_lambda(x1, x1, Tensor({2, 2}), Tensor({2, 2}), 0.5), InvalidInput);

    // lambda' >= 0.5 keeps the mix closer to the primary operand.
    for (std::uint64_t seed = 0; seed < 50; ++seed) CHECK(mixup(x1, x1, x2, x2, 0.75, seed).lambda >= 0.5);
}

TEST_CASE("label guessing") {
    const auto data = generate_toy_dataset(3, 3, 8, 2);
    auto m = build_classifier(small_cnn(3, 8, 4), 5);

    // One view, no augmentation, T = 1: plain softmax of the batch-normalized logits,
    // and the running statistics are left alone.
    const StateDict before = m.state();
    const auto g = guess_labels(m, data.samples, 1, 1.0, 7, false);
    CHECK(m.state() == before);
    const Tensor expected = softmax_rows(m.forward(to_batch(data.samples), Mode::kTrain));
    m.load_state(before);
    REQUIRE(g.targets.shape() == expected.shape());
    for (std::size_t i = 0; i < expected.size(); ++i) CHECK(std::abs(g.targets[i] - expected[i]) < 1e-12);

    // A model with constant logits guesses sharpen(softmax(bias)) for every sample.
    m.head().weight().fill(0.0);
    m.head().bias()[0] = 1.0;
    m.head().bias()[1] = 0.5;
    m.head().bias()[2] = -0.25;
    const auto c = guess_labels(m, data.samples, 3, 0.5, 7);
    const auto oracle = sharpen(softmax(std::vector<double>{1.0, 0.5, -0.25}), 0.5);
    CHECK(c.augmented.size() == 3);
    for (std::size_t i = 0; i < data.size(); ++i) {
        for (std::size_t k = 0; k < 3; ++k) CHECK(std::abs(c.targets.row(i)[k] - oracle[k]) < 1e-12);
    }
    CHECK_THROWS_AS(guess_labels(m, std::span<const ImageSample>{}, 2, 0.5, 1), InvalidInput);
}

TEST_CASE("MixMatch batch shapes, permutation and degenerate trace") {
    const auto lab = generate_toy_dataset(2, 3, 8, 2);
    const auto unl = generate_toy_dataset(2, 2, 8, 9);
    auto m = build_classifier(small_cnn(2, 8, 4), 5);
    auto cfg = quick_mixmatch();
    const auto b = mixmatch_batch(m, lab.samples, lab.labels, unl.samples, cfg, 4);
    CHECK(b.x.inputs.dim(0) == 6);
    CHECK(b.u.inputs.dim(0) == 8);
    CHECK(b.x.targets.shape() == Shape{6, 2});
    CHECK(b.u.targets.shape() == Shape{8, 2});
    auto perm = b.permutation;
    std::sort(perm.begin(), perm.end());
    for (std::size_t i = 0; i < perm.size(); ++i) CHECK(perm[i] == i);
    CHECK(perm.size() == 14);
    for (std::size_t i = 0; i < b.u.targets.dim(0); ++i) {
        const auto r = b.u.targets.row(i);
        CHECK(std::abs(std::accumulate(r.begin(), r.end(), 0.0) - 1.0) < 1e-12);
    }

    cfg.lambda_override = 1.0;
    cfg.k_aug = 1;
    cfg.temperature = 1.0;
    cfg.train.augment = false;
    const auto d = mixmatch_batch(m, lab.samples, lab.labels, unl.samples, cfg, 4);
    CHECK(d.x.inputs == to_batch(lab.samples));
    CHECK(d.x.targets == one_hot(lab.labels, 2));
    CHECK(d.u.inputs == to_batch(unl.samples));
    const auto trace = trace_to_json(d, lab.samples, lab.labels, unl.samples);
    CHECK(trace.at("lambda_x") == 1.0);
    CHECK(trace.at("labeled_ids").get<std::vector<std::int64_t>>() == ids_of(lab.samples));
}

TEST_CASE("MixMatch loss") {
    const Tensor zeros({2, 2});
    const Tensor t = one_hot(std::vector<int>{0, 1}, 2);
    const auto l = mixmatch_loss(zeros, t, zeros, t, 3.0);
    CHECK(std::abs(l.l_u - 0.25) < 1e-15);
    CHECK(std::abs(l.l_x - std::log(2.0)) < 1e-15);
    CHECK(l.total == l.l_x + 3.0 * l.l_u);

    const auto z = mixmatch_loss(random_tensor({3, 4}, 1, -2, 2), softmax_rows(random_tensor({3, 4}, 2)),
                                 random_tensor({5, 4}, 3, -2, 2), softmax_rows(random_tensor({5, 4}, 4)), 0.0);
    CHECK(z.total == z.l_x);
    for (const double g : z.grad_u.values()) CHECK(g == 0.0);
    CHECK_THROWS_AS(mixmatch_loss(Tensor({2, 2}), t, Tensor({2, 3}), Tensor({2, 3}), 1.0), InvalidInput);

    MixMatchConfig c;
    c.beta = 100.0;
    c.ramp_up_steps = 200;
    CHECK(effective_beta(c, 50) == 25.0);
    CHECK(effective_beta(c, 400) == 100.0);
    c.ramp_up_steps = 0;
    CHECK(effective_beta(c, 1) == 100.0);
}

TEST_CASE("beta = 0 reduces MixMatch to its labeled term") {
    const auto data = generate_toy_dataset(2, 10, 8, 4);
    const auto val = generate_toy_dataset(2, 4, 8, 5);
    const auto unl = drop_labels(generate_toy_dataset(2, 6, 8, 6));
    const auto arch = small_cnn(2, 8, 4);
    auto cfg = quick_mixmatch();
    cfg.beta = 0.0;
    auto [m1, h1] = train_mixmatch(data, unl, val, arch, cfg);
    cfg.unlabeled_term = false;
    auto [m2, h2] = train_mixmatch(data, unl, val, arch, cfg);
    REQUIRE(h1.records.size() == h2.records.size());
    for (std::size_t i = 0; i < h1.records.size(); ++i) CHECK(h1.records[i].train_loss == h2.records[i].train_loss);
    CHECK(m1.state() == m2.state());
}

TEST_CASE("MixMatch training is deterministic and honours the initial state") {
    const auto data = generate_toy_dataset(2, 10, 8, 4);
    const auto val = generate_toy_dataset(2, 4, 8, 5);
    const auto unl = drop_labels(generate_toy_dataset(2, 6, 8, 6));
    const auto arch = small_cnn(2, 8, 4);
    auto cfg = quick_mixmatch();
    auto [a, ha] = train_mixmatch(data, unl, val, arch, cfg);
    auto [b, hb] = train_mixmatch(data, unl, val, arch, cfg);
    CHECK(ha == hb);
    CHECK(a.state() == b.state());

    auto init = build_classifier(arch, 77).state();
    cfg.train.learning_rate = 0.0;
    cfg.train.momentum = 0.0;
    auto [c, hc] = train_mixmatch(data, unl, val, arch, cfg, &init);
    const auto s = c.state();
    for (const auto& [name, t] : init) {
        if (name.find("running") != std::string::npos) continue;
        CHECK(s.at(name) == t);
    }
    CHECK_THROWS_AS(train_mixmatch(data, UnlabeledSet{}, val, arch, cfg), InvalidInput);
}
