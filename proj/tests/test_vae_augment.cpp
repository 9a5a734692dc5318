#include <doctest.h>

#include <set>

#include "cgssl/error.hpp"
#include "cgssl/image_io.hpp"
#include "helpers.hpp"

using namespace cgssl;
using namespace cgssl::testing;

namespace {

VAETrainConfig tiny_vae(long epochs = 2) {
    VAETrainConfig c;
    c.latent_dim = 3;
    c.decoder_channels = 4;
    c.epochs = epochs;
    c.batch_size = 8;
    c.seed = 4;
    return c;
}

}  // namespace

TEST_CASE("VAE training set assembly") {
    const auto low = labeled_from_scores(std::vector<int>(30, 1), 2);
    auto d_l = labeled_from_scores(std::vector<int>(70, 0), 2);
    for (auto& s : d_l.samples) s.id += 1000;

    const auto same = assemble_vae_train_set(low, d_l, 0, 1);
    CHECK(same == low);

    const auto full = assemble_vae_train_set(low, d_l, 70, 1);
    CHECK(full.size() == 100);
    const auto ids = ids_of(full.samples);
    CHECK(std::set<std::int64_t>(ids.begin(), ids.end()).size() == 100);
    CHECK(std::equal(low.samples.begin(), low.samples.end(), full.samples.begin()));

    const auto a = assemble_vae_train_set(low, d_l, 20, 9), b = assemble_vae_train_set(low, d_l, 20, 9);
    CHECK(a == b);
    CHECK(a.size() == 50);
    for (std::size_t i = 30; i < a.size(); ++i) CHECK(a.samples[i].id > 1000);
    CHECK_THROWS_AS(assemble_vae_train_set(low, d_l, 71, 1), InvalidInput);
}

TEST_CASE("analytic KL oracles") {
    const std::size_t d = 5;
    CHECK(gaussian_kl(Tensor({3, d}), Tensor({3, d})) == 0.0);
    Tensor ones({2, d});
    ones.fill(1.0);
    CHECK(std::abs(gaussian_kl(ones, Tensor({2, d})) - 0.5 * d) < 1e-9);

    double previous = 0.0;
    for (int k = 1; k <= 6; ++k) {
        Tensor lv({1, d});
        lv.fill(-0.5 * k);
        const double kl = gaussian_kl(Tensor({1, d}), lv);
        CHECK(kl > previous);
        previous = kl;
    }
    CHECK_THROWS_AS(gaussian_kl(Tensor({2, 3}), Tensor({2, 4})), InvalidInput);
}

TEST_CASE("ELBO gradients match central differences") {
    VAEModel vae(VaeSpec{small_cnn(2, 8, 2), 3, 3}, 31);
    const Tensor x = random_tensor({3, 3, 8, 8}, 32);
    Tensor noise({3, 3});
    Rng rng(33);
    for (std::size_t i = 0; i < noise.size(); ++i) noise[i] = rng.normal();
    // Conv biases start at zero, which leaves ReLU inputs of all-zero windows exactly on the kink.
    for (auto& p : vae.parameters()) {
        if (p.name.ends_with("bias")) {
            for (std::size_t i = 0; i < p.value->size(); ++i) (*p.value)[i] += rng.uniform(-0.1, 0.1);
        }
    }

    auto loss = [&] { return elbo_loss_backward(vae, x, noise).total; };
    auto analytic = [&] {
        vae.zero_grad();
        elbo_loss_backward(vae, x, noise);
    };
    const auto r = check_gradients(vae.parameters(), loss, analytic, 1e-4, 30);
    INFO(r.worst);
    CHECK(r.checked > 100);
    CHECK(r.max_rel_error < 1e-3);

    const auto pure = elbo_loss(vae, x, noise);
    CHECK(pure.total == doctest::Approx(pure.recon + pure.kl).epsilon(1e-12));
    CHECK(pure.recon >= 0.0);
    CHECK(pure.kl >= 0.0);
    CHECK_THROWS_AS(elbo_loss(vae, x, Tensor({2, 3})), InvalidInput);
}

TEST_CASE("VAE training is deterministic and reduces the loss") {
    const auto data = generate_toy_dataset(2, 12, 8, 3);
    const auto enc = small_cnn(2, 8, 4);
    auto a = train_vae(data, enc, tiny_vae(6));
    auto b = train_vae(data, enc, tiny_vae(6));
    CHECK(a.history == b.history);
    CHECK(a.model.state() == b.model.state());
    REQUIRE(a.history.size() == 6);
    CHECK(a.history.back().total < a.history.front().total);
    CHECK(reconstruction_mse(a.model, data) >= 0.0);
    CHECK_THROWS_AS(train_vae(LabeledSet{}, enc, tiny_vae()), InvalidInput);
}

TEST_CASE("a frozen pretrained trunk is left untouched") {
    const auto data = generate_toy_dataset(2, 8, 8, 3);
    const auto enc = small_cnn(2, 8, 4);
    TrainConfig pre;
    pre.max_steps = 10;
    pre.eval_interval = 5;
    pre.batch_size = 8;
    const StateDict trunk = pretrain_encoder(generate_toy_dataset(2, 10, 8, 40), enc, pre);
    for (const auto& [name, t] : trunk) CHECK(name.rfind("trunk.", 0) == 0);

    auto cfg = tiny_vae(2);
    cfg.freeze_trunk = true;
    auto r = train_vae(data, enc, cfg, &trunk);
    const auto state = r.model.state();
    for (const auto& [name, t] : trunk) {
        if (name.find("running") != std::string::npos) continue;
        CHECK(state.at(name) == t);
    }
}

TEST_CASE("reconstruction and synthesis set algebra") {
    const auto data = generate_toy_dataset(3, 4, 8, 6);
    VAEModel vae(VaeSpec{small_cnn(3, 8, 4), 3, 4}, 2);
    const auto low = subset(data, std::vector<std::size_t>{1, 5, 7, 10});

    const auto sets = generate_reconstructions(vae, low, 500);
    CHECK(sets.d_rec.size() == low.size());
    CHECK(sets.d_rec.labels == low.labels);
    CHECK(sets.rec_seed_ids == ids_of(low.samples));
    for (std::size_t i = 0; i < sets.d_rec.size(); ++i) {
        CHECK(sets.d_rec.samples[i].id == 500 + static_cast<std::int64_t>(i));
        CHECK(sets.d_rec.samples[i].shape == low.samples[i].shape);
    }
    CHECK_THROWS_AS(generate_reconstructions(vae, LabeledSet{}), InvalidInput);

    for (const std::size_t K : {0, 1, 17}) {
        const auto synth = generate_synthetic(vae, K, 8, 100);
        CHECK(synth.size() == K);
        for (std::size_t j = 0; j < K; ++j) {
            CHECK(synth.samples[j].id == 100 + static_cast<std::int64_t>(j));
            for (const float v : synth.samples[j].pixels) CHECK((v >= 0.0f && v <= 1.0f));
        }
    }
    CHECK(generate_synthetic(vae, 5, 8).samples == generate_synthetic(vae, 5, 8).samples);
    CHECK_FALSE(generate_synthetic(vae, 5, 8).samples == generate_synthetic(vae, 5, 9).samples);
}

TEST_CASE("augmented sets export and import through manifests") {
    TempDir dir("aug");
    const auto data = generate_toy_dataset(2, 3, 8, 6);
    VAEModel vae(VaeSpec{small_cnn(2, 8, 4), 3, 4}, 2);
    auto sets = generate_reconstructions(vae, data, 10);
    sets.d_synth = generate_synthetic(vae, 4, 3, 90);
    for (auto& s : sets.d_rec.samples) quantize_8bit(s);
    for (auto& s : sets.d_synth.samples) quantize_8bit(s);
    export_augmented(dir.path(), sets);
    CHECK(std::filesystem::exists(dir / "rec/manifest.json"));
    CHECK(std::filesystem::exists(dir / "synth/manifest.json"));
    const auto back = import_augmented(dir.path());
    CHECK(back.d_rec == sets.d_rec);
    CHECK(back.rec_seed_ids == sets.rec_seed_ids);
    CHECK(back.d_synth.samples == sets.d_synth.samples);
    CHECK_THROWS_AS(import_augmented(dir / "nothing"), MissingArtifact);
}

TEST_CASE("VAE config validation and JSON") {
    auto c = tiny_vae();
    c.pad_count = 7;
    nlohmann::json j = c;
    CHECK(j.at("pad_count") == 7);
    const auto back = j.get<VAETrainConfig>();
    CHECK(back.pad_count == std::optional<std::size_t>(7));
    c.latent_dim = 0;
    CHECK_THROWS_AS(validate(c), InvalidSpec);
}
