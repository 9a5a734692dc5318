#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cgssl/models.hpp"

namespace cgssl {

// One image, pixels stored height x width x channels in [0,1].
struct ImageSample {
    std::int64_t id = 0;
    ImageShape shape;
    std::vector<float> pixels;

    float at(std::size_t y, std::size_t x, std::size_t c) const {
        return pixels[(y * shape.width + x) * shape.channels + c];
    }
    float& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * shape.width + x) * shape.channels + c]; }
    bool operator==(const ImageSample&) const = default;
};

void validate(const ImageSample& sample);

struct LabeledSet {
    std::vector<ImageSample> samples;
    std::vector<int> labels;
    std::size_t num_classes = 0;

    std::size_t size() const { return samples.size(); }
    bool empty() const { return samples.empty(); }
    ImageShape image_shape() const;
    bool operator==(const LabeledSet&) const = default;
};

struct UnlabeledSet {
    std::vector<ImageSample> samples;

    std::size_t size() const { return samples.size(); }
    bool empty() const { return samples.empty(); }
};

// Checks sizes, label range and that every image shares one valid shape.
void validate(const LabeledSet& set);
UnlabeledSet drop_labels(const LabeledSet& set);
LabeledSet subset(const LabeledSet& set, std::span<const std::size_t> indices);
// Concatenation; both sets must share num_classes and image shape.
LabeledSet merge(const LabeledSet& a, const LabeledSet& b);
std::vector<std::int64_t> ids_of(std::span<const ImageSample> samples);

struct SplitSpec {
    std::array<double, 3> fractions{0.6, 0.2, 0.2};
    std::uint64_t seed = 0;
    bool stratified = false;
};

void validate(const SplitSpec& spec);
void to_json(nlohmann::json& j, const SplitSpec& s);
void from_json(const nlohmann::json& j, SplitSpec& s);

struct Splits {
    LabeledSet labeled;     // D_L
    LabeledSet validation;  // D_V
    LabeledSet reference;   // D_REF
};

// The first two partitions take floor(fraction * n) samples; D_REF takes the rest.
// Within a partition, samples keep their input order.
Splits split_dataset(const LabeledSet& data, const SplitSpec& spec);

struct ToyOptions {
    double noise = 0.10;           // per-pixel Gaussian noise std
    double hue_jitter = 0.12;      // fraction of the hue circle
    double distractor_prob = 0.5;  // chance of a second, off-class shape
    double min_scale = 0.22;       // shape radius as a fraction of image size
    double max_scale = 0.40;
};

// Procedural shapes: each class owns a shape and a colour family; position,
// scale, colour, background and noise are randomized per image. Pixels are
// quantized to multiples of 1/255 so lossless 8-bit export is exact.
LabeledSet generate_toy_dataset(std::size_t num_classes, std::size_t per_class, std::size_t image_size,
                                std::uint64_t seed, const ToyOptions& options = {});

struct AugmentOptions {
    bool flip = true;
    bool crop = true;
};

ImageSample flip_horizontal(const ImageSample& x);
// Random horizontal flip (p = 0.5) then a random crop after reflect-padding by
// max(1, size / 8) pixels. Pure in (x, seed).
ImageSample augment_stochastic(const ImageSample& x, std::uint64_t seed, const AugmentOptions& options = {});

// Training partitions of the standard binary distributions:
//   "cifar10":  <root>/data_batch_{1..5}.bin or under <root>/cifar-10-batches-bin/
//   "cifar100": <root>/train.bin or <root>/cifar-100-binary/train.bin
//   "stl10":    <root>/train_X.bin + train_y.bin, or under <root>/stl10_binary/
LabeledSet load_benchmark(const std::string& name, const std::filesystem::path& root);
LabeledSet load_benchmark_test(const std::string& name, const std::filesystem::path& root);

// Packs samples into an NCHW batch.
Tensor to_batch(std::span<const ImageSample> samples);
Tensor to_batch(std::span<const ImageSample> samples, std::span<const std::size_t> indices);
// Unpacks row `row` of an NCHW batch; values are clamped into [0,1].
ImageSample from_batch(const Tensor& batch, std::size_t row, std::int64_t id);

}  // namespace cgssl
