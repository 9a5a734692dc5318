#include <doctest.h>

#include "cgssl/error.hpp"
#include "helpers.hpp"

using namespace cgssl;
using namespace cgssl::testing;

TEST_CASE("named backbones resolve") {
    const ImageShape toy{16, 16, 3};
    const auto wrn = named_arch("wrn-10-1", 4, toy);
    CHECK(wrn.family == "wrn");
    CHECK(wrn.depth == 10);
    CHECK(wrn.width == 1);
    const auto big = named_arch("wrn-50", 10, ImageShape{96, 96, 3});
    CHECK(big.family == "bottleneck");
    CHECK(big.depth == 50);
    CHECK(big.width == 2);
    CHECK(named_arch("resnet18", 10, ImageShape{32, 32, 3}).family == "resnet");
    CHECK_THROWS_AS(named_arch("wrn-11-1", 4, toy), InvalidArchitecture);
    CHECK_THROWS_AS(named_arch("vgg", 4, toy), InvalidArchitecture);
    CHECK_THROWS_AS(named_arch("resnet20", 4, toy), InvalidArchitecture);
}

TEST_CASE("classifier output shapes for every family") {
    const ImageShape img{16, 16, 3};
    for (const char* name : {"wrn-10-1", "cnn", "mlp", "resnet18"}) {
        auto m = build_classifier(named_arch(name, 4, img), 1);
        CHECK(forward_logits(m, random_tensor({8, 3, 16, 16}, 2)).shape() == Shape{8, 4});
        CHECK(forward_logits(m, Tensor({0, 3, 16, 16})).shape() == Shape{0, 4});
    }
    auto m = build_classifier(named_arch("cnn", 4, img), 1);
    CHECK_THROWS_AS(forward_logits(m, Tensor({2, 3, 8, 8})), InvalidInput);
}

TEST_CASE("wide bottleneck backbone runs on small inputs") {
    auto m = build_classifier(named_arch("wrn-50", 3, ImageShape{32, 32, 3}), 5);
    const Tensor logits = forward_logits(m, random_tensor({1, 3, 32, 32}, 6));
    CHECK(logits.shape() == Shape{1, 3});
    CHECK(logits.all_finite());
}

TEST_CASE("initialization is deterministic per seed") {
    const auto spec = named_arch("wrn-10-1", 4, ImageShape{16, 16, 3});
    CHECK(build_classifier(spec, 3).state() == build_classifier(spec, 3).state());
    CHECK_FALSE(build_classifier(spec, 3).state() == build_classifier(spec, 4).state());
}

TEST_CASE("duplicated rows give identical logits and head bias shifts one logit") {
    auto m = build_classifier(named_arch("wrn-10-1", 4, ImageShape{16, 16, 3}), 8);
    const Tensor x = random_tensor({1, 3, 16, 16}, 9);
    const Tensor twice = concat_rows(x, x);
    const Tensor logits = forward_logits(m, twice);
    for (std::size_t c = 0; c < 4; ++c) CHECK(std::abs(logits.row(0)[c] - logits.row(1)[c]) < 1e-12);
    m.head().bias()[2] += 0.75;
    const Tensor shifted = forward_logits(m, x);
    for (std::size_t c = 0; c < 4; ++c) {
        CHECK(shifted.row(0)[c] == doctest::Approx(logits.row(0)[c] + (c == 2 ? 0.75 : 0.0)).epsilon(1e-12));
    }
}

TEST_CASE("classifier logits regression snapshot") {
    auto m = build_classifier(named_arch("wrn-10-1", 4, ImageShape{16, 16, 3}), 1234);
    const Tensor logits = forward_logits(m, random_tensor({2, 3, 16, 16}, 77));
    const std::vector<double> expected{0.0779675215181, -0.145835135799, 0.405256153559, -0.103717396955,
                                       0.0901118149057, -0.14787424797,  0.409754453397, -0.0988144526217};
    REQUIRE(logits.size() == expected.size());
    for (std::size_t i = 0; i < expected.size(); ++i) CHECK(std::abs(logits[i] - expected[i]) < 1e-6);
}

TEST_CASE("VAE encode/decode shapes, range and snapshots") {
    VaeSpec spec{small_cnn(4, 16, 4), 3, 4};
    VAEModel vae(spec, 99);
    const Tensor x = random_tensor({2, 3, 16, 16}, 78);
    const auto [mu, lv] = encode(vae, x);
    CHECK(mu.shape() == Shape{2, 3});
    CHECK(lv.shape() == Shape{2, 3});
    const std::vector<double> mu_ref{0.122455073377, 0.129977247673, -0.0263397755164,
                                     0.140939709677, 0.121154543008, -0.0314041117619};
    const std::vector<double> lv_ref{0.163349540354, -0.0910972592883, 0.053277129381,
                                     0.142882466912, -0.0952932144018, 0.0684167247122};
    for (std::size_t i = 0; i < 6; ++i) {
        CHECK(std::abs(mu[i] - mu_ref[i]) < 1e-6);
        CHECK(std::abs(lv[i] - lv_ref[i]) < 1e-6);
    }

    const Tensor img = decode(vae, Tensor({1, 3}, std::vector<double>{0.5, -1.0, 2.0}));
    CHECK(img.shape() == Shape{1, 3, 16, 16});
    const std::vector<double> img_ref{0.876916234265, 0.44205286303,  0.580573916447, 0.296926821155,
                                      0.257431700177, 0.450597139493, 0.589658768763, 0.687900852111};
    for (std::size_t k = 0; k < img_ref.size(); ++k) CHECK(std::abs(img[k * 97] - img_ref[k]) < 1e-6);

    const Tensor dup = encode(vae, concat_rows(slice_rows(x, 0, 1), slice_rows(x, 0, 1))).first;
    for (std::size_t j = 0; j < 3; ++j) CHECK(std::abs(dup.row(0)[j] - dup.row(1)[j]) < 1e-12);

    Rng rng(5);
    Tensor z({6, 3});
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = 50.0 * rng.normal();
    const Tensor extreme = decode(vae, z);
    CHECK(extreme.shape() == Shape{6, 3, 16, 16});
    for (const double v : extreme.values()) CHECK((v >= 0.0 && v <= 1.0));
    CHECK_THROWS_AS(decode(vae, Tensor({1, 4})), InvalidInput);
}

TEST_CASE("classifier cross-entropy gradients match central differences") {
    auto m = build_classifier(small_cnn(3, 8, 4), 21);
    const Tensor x = random_tensor({4, 3, 8, 8}, 22);
    const std::vector<int> y{0, 2, 1, 2};
    const Tensor t = one_hot(y, 3);
    auto loss = [&] { return soft_cross_entropy(m.forward(x, Mode::kTrain), t).loss; };
    auto analytic = [&] {
        m.zero_grad();
        auto ce = soft_cross_entropy(m.forward(x, Mode::kTrain), t);
        m.backward(ce.grad);
    };
    const auto r = check_gradients(m.parameters(), loss, analytic, 1e-4, 40);
    INFO(r.worst);
    CHECK(r.checked > 100);
    CHECK(r.max_rel_error < 1e-3);
}

TEST_CASE("checkpoints round-trip and report missing files") {
    TempDir dir("ckpt");
    auto m = build_classifier(small_cnn(), 4);
    save_classifier(dir / "model", m, 17);
    CHECK(checkpoint_exists(dir / "model"));
    auto back = load_classifier(dir / "model");
    CHECK(back.state() == m.state());
    CHECK(back.spec() == m.spec());
    try {
        load_classifier(dir / "absent");
        FAIL("expected a missing checkpoint error");
    } catch (const MissingArtifact& e) {
        CHECK(std::string(e.what()).find("absent.bin") != std::string::npos);
    }
}
