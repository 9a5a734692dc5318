#include <doctest.h>

#include "cgssl/error.hpp"
#include "cgssl/supervised.hpp"
#include "helpers.hpp"

using namespace cgssl;
using namespace cgssl::testing;

namespace {

TrainConfig quick(long steps, long eval = 10) {
    TrainConfig c;
    c.max_steps = steps;
    c.eval_interval = eval;
    c.batch_size = 16;
    c.seed = 5;
    return c;
}

struct Toy {
    LabeledSet train, val;
};

Toy toy_sets() {
    const auto data = generate_toy_dataset(4, 25, 16, 3);
    SplitSpec spec;
    spec.fractions = {0.6, 0.4, 0.0};
    spec.seed = 1;
    auto s = split_dataset(data, spec);
    return {s.labeled, s.validation};
}

}  // namespace

TEST_CASE("supervised training beats chance and is deterministic") {
    const auto t = toy_sets();
    const auto arch = small_cnn(4, 16, 8);
    auto [model, history] = train_supervised(t.train, t.val, arch, quick(150, 25));
    const auto val = evaluate(model, t.val);
    CHECK(val.accuracy > 0.25);
    auto [model2, history2] = train_supervised(t.train, t.val, arch, quick(150, 25));
    CHECK(history == history2);
    CHECK(model.state() == model2.state());

    // Best-checkpoint contract.
    for (const auto& r : history.records) CHECK(val.accuracy >= r.val_accuracy);
    for (std::size_t i = 1; i < history.records.size(); ++i) {
        CHECK(history.records[i].step > history.records[i - 1].step);
        CHECK(history.records[i].learning_rate <= history.records[i - 1].learning_rate);
    }
}

TEST_CASE("supervised accuracy regression snapshot") {
    const auto t = toy_sets();
    auto [model, history] = train_supervised(t.train, t.val, small_cnn(4, 16, 4), quick(40, 20));
    CHECK(evaluate(model, t.val).accuracy == 0.725);
    CHECK(history.best_step == 40);
}

TEST_CASE("small D_L can be overfit") {
    auto data = generate_toy_dataset(4, 5, 8, 12);
    TrainConfig c = quick(300, 50);
    c.augment = false;
    c.batch_size = 20;
    auto [model, history] = train_supervised(data, data, small_cnn(4, 8, 8), c);
    CHECK(evaluate(model, data).accuracy == 1.0);
}

TEST_CASE("learning-rate decay multiplies by exactly the factor") {
    const auto t = toy_sets();
    TrainConfig c = quick(120, 5);
    c.plateau_patience = 1;
    c.plateau_decay_factor = 0.5;
    auto [model, history] = train_supervised(t.train, t.val, small_cnn(4, 16, 4), c);
    bool decayed = false;
    for (std::size_t i = 1; i < history.records.size(); ++i) {
        const double prev = history.records[i - 1].learning_rate, cur = history.records[i].learning_rate;
        if (cur != prev) {
            decayed = true;
            CHECK(cur == prev * 0.5);
        }
    }
    CHECK(decayed);
}

TEST_CASE("zero learning rate leaves parameters unchanged") {
    const auto t = toy_sets();
    TrainConfig c = quick(20, 10);
    c.learning_rate = 0.0;
    c.momentum = 0.0;
    const auto arch = small_cnn(4, 16, 4);
    auto [model, history] = train_supervised(t.train, t.val, arch, c);
    auto fresh = build_classifier(arch, derive_seed(c.seed, "init"));
    const auto a = model.state(), b = fresh.state();
    for (const auto& [name, tensor] : b) {
        if (name.find("running") != std::string::npos) continue;  // batch statistics still move
        CHECK(a.at(name) == tensor);
    }
}

TEST_CASE("config validation") {
    TrainConfig c;
    c.learning_rate = -1;
    CHECK_THROWS_AS(validate(c), InvalidSpec);
    c = TrainConfig{};
    c.momentum = 1.0;
    CHECK_THROWS_AS(validate(c), InvalidSpec);
    c = TrainConfig{};
    c.plateau_decay_factor = 1.0;
    CHECK_THROWS_AS(validate(c), InvalidSpec);
    CHECK_THROWS_AS(train_supervised(LabeledSet{}, toy_sets().val, small_cnn(4, 16), TrainConfig{}), InvalidInput);
}

TEST_CASE("evaluate: perfect and always-wrong predictors") {
    auto data = generate_toy_dataset(2, 10, 8, 1);
    auto m = build_classifier(small_cnn(2, 8, 4), 2);
    const auto preds = argmax_rows(forward_logits(m, to_batch(data.samples)));
    LabeledSet right = data, wrong = data;
    for (std::size_t i = 0; i < data.size(); ++i) {
        right.labels[i] = preds[i];
        wrong.labels[i] = 1 - preds[i];
    }
    CHECK(evaluate(m, right).accuracy == 1.0);
    CHECK(evaluate(m, wrong).accuracy == 0.0);
    CHECK_THROWS_AS(evaluate(m, LabeledSet{}), InvalidInput);
}

TEST_CASE("divergence is reported with its step") {
    const auto t = toy_sets();
    auto m = build_classifier(small_cnn(4, 16, 4), 1);
    try {
        run_training_loop(m, t.val, quick(10), [](long step) { return step == 4 ? std::nan("") : 1.0; });
        FAIL("expected divergence");
    } catch (const DivergenceError& e) {
        CHECK(e.step() == 4);
    }
}

TEST_CASE("history JSON-lines round-trip") {
    TempDir dir("hist");
    TrainHistory h;
    h.records = {{10, 1.5, 1.25, 0.5, 0.03}, {20, 0.75, 1.0 / 3.0, 0.625, 3e-4}};
    h.best_step = 20;
    write_history_jsonl(dir / "h.jsonl", h);
    CHECK(read_history_jsonl(dir / "h.jsonl") == h);
}
