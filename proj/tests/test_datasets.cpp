#include <doctest.h>

#include <numeric>
#include <set>

#include "cgssl/error.hpp"
#include "cgssl/image_io.hpp"
#include "helpers.hpp"

using namespace cgssl;
using namespace cgssl::testing;

namespace {

std::set<std::int64_t> id_set(const LabeledSet& s) {
    const auto ids = ids_of(s.samples);
    return {ids.begin(), ids.end()};
}

}  // namespace

TEST_CASE("split sizes follow floor-plus-remainder") {
    SplitSpec spec;
    spec.seed = 3;
    const auto s10 = split_dataset(labeled_from_scores(std::vector<int>(10, 0), 2), spec);
    CHECK(s10.labeled.size() == 6);
    CHECK(s10.validation.size() == 2);
    CHECK(s10.reference.size() == 2);
    const auto s11 = split_dataset(labeled_from_scores(std::vector<int>(11, 0), 2), spec);
    CHECK(s11.labeled.size() == 6);
    CHECK(s11.validation.size() == 2);
    CHECK(s11.reference.size() == 3);
}

TEST_CASE("splits partition the input for many sizes and seeds") {
    for (std::size_t n = 1; n <= 60; n += 7) {
        for (bool stratified : {false, true}) {
            std::vector<int> labels(n);
            for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % 3);
            const auto data = labeled_from_scores(labels, 3);
            SplitSpec spec;
            spec.seed = n;
            spec.stratified = stratified;
            const auto s = split_dataset(data, spec);
            auto a = id_set(s.labeled), b = id_set(s.validation), c = id_set(s.reference);
            CHECK(a.size() + b.size() + c.size() == n);
            std::set<std::int64_t> all(a);
            all.insert(b.begin(), b.end());
            all.insert(c.begin(), c.end());
            CHECK(all == id_set(data));
            if (!stratified) {
                CHECK(std::abs(static_cast<double>(s.labeled.size()) - 0.6 * static_cast<double>(n)) < 1.0);
                CHECK(std::abs(static_cast<double>(s.validation.size()) - 0.2 * static_cast<double>(n)) < 1.0);
            }
        }
    }
}

TEST_CASE("split errors") {
    CHECK_THROWS_AS(split_dataset(LabeledSet{}, SplitSpec{}), InvalidInput);
    SplitSpec bad;
    bad.fractions = {0.5, 0.2, 0.2};
    CHECK_THROWS_AS(split_dataset(labeled_from_scores({0, 1}, 2), bad), InvalidSpec);
}

TEST_CASE("split is deterministic per seed") {
    const auto data = generate_toy_dataset(3, 10, 8, 5);
    SplitSpec spec;
    spec.seed = 11;
    CHECK(split_dataset(data, spec).labeled == split_dataset(data, spec).labeled);
    SplitSpec other = spec;
    other.seed = 12;
    CHECK_FALSE(ids_of(split_dataset(data, spec).labeled.samples) == ids_of(split_dataset(data, other).labeled.samples));
}

TEST_CASE("toy dataset sizes, range and determinism") {
    const auto a = generate_toy_dataset(4, 25, 16, 7);
    CHECK(a.size() == 100);
    CHECK(a.num_classes == 4);
    for (int c = 0; c < 4; ++c) CHECK(std::count(a.labels.begin(), a.labels.end(), c) == 25);
    for (const auto& img : a.samples) {
        CHECK(img.shape == ImageShape{16, 16, 3});
        CHECK(*std::min_element(img.pixels.begin(), img.pixels.end()) >= 0.0f);
        CHECK(*std::max_element(img.pixels.begin(), img.pixels.end()) <= 1.0f);
    }
    CHECK(a == generate_toy_dataset(4, 25, 16, 7));
    CHECK_THROWS_AS(generate_toy_dataset(0, 25, 16, 7), InvalidInput);
}

TEST_CASE("toy dataset is linearly learnable") {
    const auto data = generate_toy_dataset(2, 200, 16, 1);
    const std::size_t d = 16 * 16 * 3;
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(99);
    rng.shuffle(std::span<std::size_t>(order));
    const std::size_t n_train = 300;

    // Logistic regression on raw pixels, full-batch gradient descent.
    std::vector<double> w(d, 0.0);
    double b = 0.0;
    for (int epoch = 0; epoch < 300; ++epoch) {
        std::vector<double> gw(d, 0.0);
        double gb = 0.0;
        for (std::size_t k = 0; k < n_train; ++k) {
            const auto& img = data.samples[order[k]];
            double z = b;
            for (std::size_t j = 0; j < d; ++j) z += w[j] * (img.pixels[j] - 0.5);
            const double err = 1.0 / (1.0 + std::exp(-z)) - data.labels[order[k]];
            for (std::size_t j = 0; j < d; ++j) gw[j] += err * (img.pixels[j] - 0.5);
            gb += err;
        }
        for (std::size_t j = 0; j < d; ++j) w[j] -= 0.05 * gw[j] / n_train;
        b -= 0.05 * gb / n_train;
    }
    std::size_t correct = 0;
    for (std::size_t k = n_train; k < data.size(); ++k) {
        const auto& img = data.samples[order[k]];
        double z = b;
        for (std::size_t j = 0; j < d; ++j) z += w[j] * (img.pixels[j] - 0.5);
        correct += static_cast<std::size_t>((z > 0) == (data.labels[order[k]] == 1));
    }
    CHECK(static_cast<double>(correct) / static_cast<double>(data.size() - n_train) > 0.6);
}

TEST_CASE("augmentation preserves shape and range, is pure in the seed") {
    const auto data = generate_toy_dataset(2, 5, 16, 4);
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto& x = data.samples[seed % data.size()];
        const auto y = augment_stochastic(x, seed);
        CHECK(y.shape == x.shape);
        CHECK(*std::min_element(y.pixels.begin(), y.pixels.end()) >= 0.0f);
        CHECK(*std::max_element(y.pixels.begin(), y.pixels.end()) <= 1.0f);
        CHECK(y == augment_stochastic(x, seed));
    }
    const auto& x = data.samples[0];
    CHECK(flip_horizontal(flip_horizontal(x)) == x);
    CHECK_FALSE(flip_horizontal(x) == x);
}

TEST_CASE("unknown benchmark and missing files raise ingestion errors") {
    CHECK_THROWS_AS(load_benchmark("unknown", "/nonexistent"), IngestionError);
    try {
        load_benchmark("cifar100", "/nonexistent");
        FAIL("expected an ingestion error");
    } catch (const IngestionError& e) {
        CHECK(std::string(e.what()).find("/nonexistent") != std::string::npos);
    }
}

TEST_CASE("cifar binary records are decoded with the right label byte") {
    TempDir dir("cifar");
    // Two CIFAR-100 records: coarse label, fine label, then 3 x 1024 channel-planar bytes.
    std::string bytes;
    for (int r = 0; r < 2; ++r) {
        bytes.push_back(static_cast<char>(7));
        bytes.push_back(static_cast<char>(42 + r));
        for (int c = 0; c < 3; ++c) bytes.append(1024, static_cast<char>(c * 100 + r));
    }
    std::ofstream(dir / "train.bin", std::ios::binary) << bytes;
    const auto set = load_benchmark("cifar100", dir.path());
    REQUIRE(set.size() == 2);
    CHECK(set.num_classes == 100);
    CHECK(set.labels[0] == 42);
    CHECK(set.labels[1] == 43);
    CHECK(set.samples[0].shape == ImageShape{32, 32, 3});
    CHECK(set.samples[1].at(5, 5, 2) == doctest::Approx(201.0 / 255.0));

    std::ofstream(dir / "truncated" , std::ios::binary) << bytes.substr(0, 100);
    std::filesystem::create_directories(dir / "bad");
    std::filesystem::copy_file(dir / "truncated", dir / "bad" / "train.bin");
    CHECK_THROWS_AS(load_benchmark("cifar100", dir / "bad"), IngestionError);
}

TEST_CASE("batches round-trip through NCHW tensors") {
    const auto data = generate_toy_dataset(2, 3, 8, 2);
    const Tensor batch = to_batch(data.samples);
    CHECK(batch.shape() == Shape{6, 3, 8, 8});
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto back = from_batch(batch, i, data.samples[i].id);
        CHECK(back == data.samples[i]);
    }
}

TEST_CASE("png export is lossless for 8-bit images") {
    TempDir dir("png");
    auto data = generate_toy_dataset(3, 2, 8, 9);
    export_labeled_set(dir / "set", data);
    const auto back = import_labeled_set(dir / "set");
    CHECK(back == data);

    ImageSample odd = data.samples[0];
    odd.pixels[0] = 0.123456f;
    quantize_8bit(odd);
    write_png(dir / "odd.png", odd);
    CHECK(read_png(dir / "odd.png", odd.id) == odd);
}

TEST_CASE("subset, merge and drop_labels") {
    const auto a = labeled_from_scores({0, 1, 2}, 3);
    std::vector<std::size_t> idx{2, 0};
    const auto s = subset(a, idx);
    CHECK(ids_of(s.samples) == std::vector<std::int64_t>{3, 1});
    CHECK(s.labels == std::vector<int>{2, 0});
    const auto m = merge(a, s);
    CHECK(m.size() == 5);
    CHECK(drop_labels(m).size() == 5);
    CHECK_THROWS_AS(merge(a, labeled_from_scores({0}, 2)), InvalidInput);
}
