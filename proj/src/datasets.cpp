#include "cgssl/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>

#include "cgssl/error.hpp"
#include "cgssl/random.hpp"

namespace cgssl {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Containers

void validate(const ImageSample& sample) {
    const auto& s = sample.shape;
    if (s.height == 0 || s.width == 0 || s.channels == 0) throw InvalidInput("image dimensions must be positive");
    if (sample.pixels.size() != s.height * s.width * s.channels) {
        throw InvalidInput("image " + std::to_string(sample.id) + " has " + std::to_string(sample.pixels.size()) +
                           " values, shape requires " + std::to_string(s.height * s.width * s.channels));
    }
    for (const float v : sample.pixels) {
        if (!(v >= 0.0f && v <= 1.0f)) throw InvalidInput("image " + std::to_string(sample.id) + " has pixels outside [0,1]");
    }
}

ImageShape LabeledSet::image_shape() const {
    if (samples.empty()) throw InvalidInput("empty set has no image shape");
    return samples.front().shape;
}

void validate(const LabeledSet& set) {
    if (set.samples.size() != set.labels.size()) {
        throw InvalidInput("labeled set has " + std::to_string(set.samples.size()) + " samples but " +
                           std::to_string(set.labels.size()) + " labels");
    }
    if (set.num_classes == 0) throw InvalidInput("labeled set must have at least one class");
    for (const int label : set.labels) {
        if (label < 0 || static_cast<std::size_t>(label) >= set.num_classes) {
            throw InvalidInput("label " + std::to_string(label) + " outside [0, " + std::to_string(set.num_classes) + ")");
        }
    }
    for (const auto& s : set.samples) {
        validate(s);
        if (!(s.shape == set.samples.front().shape)) throw InvalidInput("images within a set must share one shape");
    }
}

UnlabeledSet drop_labels(const LabeledSet& set) { return UnlabeledSet{set.samples}; }

LabeledSet subset(const LabeledSet& set, std::span<const std::size_t> indices) {
    LabeledSet out;
    out.num_classes = set.num_classes;
    out.samples.reserve(indices.size());
    out.labels.reserve(indices.size());
    for (const auto i : indices) {
        if (i >= set.size()) throw InvalidInput("subset index out of range");
        out.samples.push_back(set.samples[i]);
        out.labels.push_back(set.labels[i]);
    }
    return out;
}

LabeledSet merge(const LabeledSet& a, const LabeledSet& b) {
    if (a.num_classes != b.num_classes) throw InvalidInput("cannot merge sets with different class counts");
    if (!a.empty() && !b.empty() && !(a.image_shape() == b.image_shape())) {
        throw InvalidInput("cannot merge sets with different image shapes");
    }
    LabeledSet out = a;
    out.samples.insert(out.samples.end(), b.samples.begin(), b.samples.end());
    out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
    return out;
}

std::vector<std::int64_t> ids_of(std::span<const ImageSample> samples) {
    std::vector<std::int64_t> ids;
    ids.reserve(samples.size());
    for (const auto& s : samples) ids.push_back(s.id);
    return ids;
}

// ---------------------------------------------------------------------------
// Splitting

void validate(const SplitSpec& spec) {
    double sum = 0.0;
    for (const double f : spec.fractions) {
        if (!(f >= 0.0)) throw InvalidSpec("split fractions must be non-negative");
        sum += f;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw InvalidSpec("split fractions sum to " + std::to_string(sum) + ", not 1");
}

void to_json(json& j, const SplitSpec& s) {
    j = json{{"fractions", s.fractions}, {"seed", s.seed}, {"stratified", s.stratified}};
}

void from_json(const json& j, SplitSpec& s) {
    SplitSpec d;
    s.fractions = j.value("fractions", d.fractions);
    s.seed = j.value("seed", d.seed);
    s.stratified = j.value("stratified", d.stratified);
}

namespace {

std::size_t floor_count(double fraction, std::size_t n) {
    return static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + 1e-9));
}

}  // namespace

Splits split_dataset(const LabeledSet& data, const SplitSpec& spec) {
    if (data.empty()) throw InvalidInput("cannot split an empty dataset");
    validate(spec);
    if (data.samples.size() != data.labels.size()) throw InvalidInput("labeled set is inconsistent");

    Rng rng(spec.seed);
    std::array<std::vector<std::size_t>, 3> parts;
    auto assign = [&](std::vector<std::size_t> indices) {
        rng.shuffle(std::span<std::size_t>(indices));
        const std::size_t n = indices.size();
        const std::size_t n_l = floor_count(spec.fractions[0], n);
        const std::size_t n_v = std::min(n - n_l, floor_count(spec.fractions[1], n));
        parts[0].insert(parts[0].end(), indices.begin(), indices.begin() + static_cast<std::ptrdiff_t>(n_l));
        parts[1].insert(parts[1].end(), indices.begin() + static_cast<std::ptrdiff_t>(n_l),
                        indices.begin() + static_cast<std::ptrdiff_t>(n_l + n_v));
        parts[2].insert(parts[2].end(), indices.begin() + static_cast<std::ptrdiff_t>(n_l + n_v), indices.end());
    };

    if (spec.stratified) {
        std::map<int, std::vector<std::size_t>> by_class;
        for (std::size_t i = 0; i < data.size(); ++i) by_class[data.labels[i]].push_back(i);
        for (auto& [label, indices] : by_class) assign(std::move(indices));
    } else {
        std::vector<std::size_t> all(data.size());
        std::iota(all.begin(), all.end(), std::size_t{0});
        assign(std::move(all));
    }
    for (auto& p : parts) std::sort(p.begin(), p.end());
    return Splits{subset(data, parts[0]), subset(data, parts[1]), subset(data, parts[2])};
}

// ---------------------------------------------------------------------------
// Toy dataset

namespace {

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
    h = h - std::floor(h);
    const double hh = h * 6.0;
    const int sector = static_cast<int>(hh) % 6;
    const double f = hh - std::floor(hh);
    const double p = v * (1.0 - s), q = v * (1.0 - s * f), t = v * (1.0 - s * (1.0 - f));
    switch (sector) {
        case 0: return {v, t, p};
        case 1: return {q, v, p};
        case 2: return {p, v, t};
        case 3: return {p, q, v};
        case 4: return {t, p, v};
        default: return {v, p, q};
    }
}

bool inside_shape(int shape, double dx, double dy, double r) {
    switch (shape) {
        case 0: return dx * dx + dy * dy <= r * r;
        case 1: return std::abs(dx) <= 0.85 * r && std::abs(dy) <= 0.85 * r;
        case 2: return dy >= -r && dy <= r && std::abs(dx) <= 0.5 * (dy + r);
        default: {
            const double arm = 0.3 * r;
            return (std::abs(dx) <= arm && std::abs(dy) <= r) || (std::abs(dy) <= arm && std::abs(dx) <= r);
        }
    }
}

void paint_shape(std::vector<double>& img, std::size_t size, int shape, double cx, double cy, double r,
                 const std::array<double, 3>& rgb) {
    for (std::size_t y = 0; y < size; ++y) {
        for (std::size_t x = 0; x < size; ++x) {
            const double dx = static_cast<double>(x) + 0.5 - cx;
            const double dy = static_cast<double>(y) + 0.5 - cy;
            if (!inside_shape(shape, dx, dy, r)) continue;
            for (std::size_t c = 0; c < 3; ++c) img[(y * size + x) * 3 + c] = rgb[c];
        }
    }
}

}  // namespace

LabeledSet generate_toy_dataset(std::size_t num_classes, std::size_t per_class, std::size_t image_size,
                                std::uint64_t seed, const ToyOptions& options) {
    if (num_classes < 2) throw InvalidInput("toy dataset needs at least 2 classes");
    if (per_class < 1) throw InvalidInput("toy dataset needs at least 1 image per class");
    if (image_size < 8) throw InvalidInput("toy images must be at least 8 pixels wide");

    constexpr int kShapes = 4;
    const double size = static_cast<double>(image_size);
    LabeledSet set;
    set.num_classes = num_classes;
    set.samples.reserve(num_classes * per_class);
    Rng rng(seed);
    std::int64_t next_id = 0;
    // Interleave classes so that prefixes of the set stay balanced.
    for (std::size_t i = 0; i < per_class; ++i) {
        for (std::size_t label = 0; label < num_classes; ++label) {
            std::vector<double> img(image_size * image_size * 3);
            const double gray = rng.uniform(0.15, 0.55);
            std::array<double, 3> bg{};
            for (auto& b : bg) b = gray + rng.uniform(-0.08, 0.08);
            for (std::size_t p = 0; p < image_size * image_size; ++p) {
                for (std::size_t c = 0; c < 3; ++c) img[p * 3 + c] = bg[c];
            }

            if (rng.bernoulli(options.distractor_prob)) {
                const int shape = static_cast<int>(rng.index(kShapes));
                const double r = 0.5 * rng.uniform(options.min_scale, options.max_scale) * size;
                const auto rgb = hsv_to_rgb(rng.uniform(), rng.uniform(0.3, 1.0), rng.uniform(0.4, 1.0));
                paint_shape(img, image_size, shape, rng.uniform(0.15, 0.85) * size, rng.uniform(0.15, 0.85) * size, r,
                            rgb);
            }

            const int shape = static_cast<int>(label % kShapes);
            const double base_hue = static_cast<double>(label) / static_cast<double>(num_classes);
            const double hue = base_hue + rng.uniform(-options.hue_jitter, options.hue_jitter);
            const auto rgb = hsv_to_rgb(hue, rng.uniform(0.55, 1.0), rng.uniform(0.65, 1.0));
            const double r = rng.uniform(options.min_scale, options.max_scale) * size;
            const double cx = rng.uniform(0.3, 0.7) * size;
            const double cy = rng.uniform(0.3, 0.7) * size;
            paint_shape(img, image_size, shape, cx, cy, r, rgb);

            ImageSample sample;
            sample.id = next_id++;
            sample.shape = ImageShape{image_size, image_size, 3};
            sample.pixels.resize(img.size());
            for (std::size_t k = 0; k < img.size(); ++k) {
                const double v = std::clamp(img[k] + options.noise * rng.normal(), 0.0, 1.0);
                sample.pixels[k] = static_cast<float>(std::round(v * 255.0) / 255.0);
            }
            set.samples.push_back(std::move(sample));
            set.labels.push_back(static_cast<int>(label));
        }
    }
    return set;
}

// ---------------------------------------------------------------------------
// Augmentation

ImageSample flip_horizontal(const ImageSample& x) {
    ImageSample out = x;
    const auto& s = x.shape;
    for (std::size_t y = 0; y < s.height; ++y) {
        for (std::size_t col = 0; col < s.width; ++col) {
            for (std::size_t c = 0; c < s.channels; ++c) out.at(y, col, c) = x.at(y, s.width - 1 - col, c);
        }
    }
    return out;
}

namespace {

std::size_t reflect(long i, std::size_t n) {
    if (n == 1) return 0;
    const long period = 2 * (static_cast<long>(n) - 1);
    i = ((i % period) + period) % period;
    return static_cast<std::size_t>(i < static_cast<long>(n) ? i : period - i);
}

}  // namespace

ImageSample augment_stochastic(const ImageSample& x, std::uint64_t seed, const AugmentOptions& options) {
    validate(x);
    Rng rng(seed);
    const bool flip = rng.bernoulli(0.5);
    const std::size_t pad = std::max<std::size_t>(1, std::min(x.shape.height, x.shape.width) / 8);
    const auto oy = static_cast<long>(rng.index(2 * pad + 1)) - static_cast<long>(pad);
    const auto ox = static_cast<long>(rng.index(2 * pad + 1)) - static_cast<long>(pad);

    ImageSample out = (options.flip && flip) ? flip_horizontal(x) : x;
    if (!options.crop) return out;
    const ImageSample src = out;
    const auto& s = x.shape;
    for (std::size_t y = 0; y < s.height; ++y) {
        const std::size_t sy = reflect(static_cast<long>(y) + oy, s.height);
        for (std::size_t col = 0; col < s.width; ++col) {
            const std::size_t sx = reflect(static_cast<long>(col) + ox, s.width);
            for (std::size_t c = 0; c < s.channels; ++c) out.at(y, col, c) = src.at(sy, sx, c);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Benchmarks

namespace {

std::vector<unsigned char> read_all(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IngestionError("cannot open " + path.string());
    return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

fs::path locate(const fs::path& root, const std::string& subdir, const std::string& file) {
    for (const auto& candidate : {root / file, root / subdir / file}) {
        if (fs::exists(candidate)) return candidate;
    }
    throw IngestionError("missing dataset file " + (root / subdir / file).string());
}

// CIFAR binary records: label byte(s) then 32x32 R, G, B planes. `label_bytes` is 1
// for CIFAR-10 and 2 (coarse, fine) for CIFAR-100, whose fine label is used.
void append_cifar(LabeledSet& set, const fs::path& path, std::size_t label_bytes) {
    constexpr std::size_t kSide = 32, kPlane = kSide * kSide;
    const std::size_t record = label_bytes + 3 * kPlane;
    const auto bytes = read_all(path);
    if (bytes.empty() || bytes.size() % record != 0) {
        throw IngestionError("corrupt CIFAR file " + path.string() + ": size " + std::to_string(bytes.size()) +
                             " is not a multiple of " + std::to_string(record));
    }
    const std::size_t n = bytes.size() / record;
    for (std::size_t i = 0; i < n; ++i) {
        const unsigned char* rec = bytes.data() + i * record;
        const int label = rec[label_bytes - 1];
        if (static_cast<std::size_t>(label) >= set.num_classes) {
            throw IngestionError("corrupt CIFAR file " + path.string() + ": label " + std::to_string(label));
        }
        ImageSample s;
        s.id = static_cast<std::int64_t>(set.samples.size());
        s.shape = ImageShape{kSide, kSide, 3};
        s.pixels.resize(3 * kPlane);
        for (std::size_t c = 0; c < 3; ++c) {
            for (std::size_t p = 0; p < kPlane; ++p) {
                s.pixels[p * 3 + c] = static_cast<float>(rec[label_bytes + c * kPlane + p]) / 255.0f;
            }
        }
        set.samples.push_back(std::move(s));
        set.labels.push_back(label);
    }
}

LabeledSet load_stl10(const fs::path& x_path, const fs::path& y_path) {
    constexpr std::size_t kSide = 96, kPlane = kSide * kSide, kImage = 3 * kPlane;
    const auto xs = read_all(x_path);
    const auto ys = read_all(y_path);
    if (xs.empty() || xs.size() % kImage != 0) {
        throw IngestionError("corrupt STL-10 file " + x_path.string() + ": size " + std::to_string(xs.size()) +
                             " is not a multiple of " + std::to_string(kImage));
    }
    const std::size_t n = xs.size() / kImage;
    if (ys.size() != n) {
        throw IngestionError("corrupt STL-10 file " + y_path.string() + ": " + std::to_string(ys.size()) +
                             " labels for " + std::to_string(n) + " images");
    }
    LabeledSet set;
    set.num_classes = 10;
    for (std::size_t i = 0; i < n; ++i) {
        if (ys[i] < 1 || ys[i] > 10) {
            throw IngestionError("corrupt STL-10 file " + y_path.string() + ": label " + std::to_string(ys[i]));
        }
        ImageSample s;
        s.id = static_cast<std::int64_t>(i);
        s.shape = ImageShape{kSide, kSide, 3};
        s.pixels.resize(kImage);
        const unsigned char* img = xs.data() + i * kImage;
        // Channel planes stored column-major.
        for (std::size_t c = 0; c < 3; ++c) {
            for (std::size_t col = 0; col < kSide; ++col) {
                for (std::size_t row = 0; row < kSide; ++row) {
                    s.pixels[(row * kSide + col) * 3 + c] = static_cast<float>(img[c * kPlane + col * kSide + row]) / 255.0f;
                }
            }
        }
        set.samples.push_back(std::move(s));
        set.labels.push_back(ys[i] - 1);
    }
    return set;
}

LabeledSet load_partition(const std::string& name, const fs::path& root, bool train) {
    LabeledSet set;
    if (name == "cifar100") {
        set.num_classes = 100;
        append_cifar(set, locate(root, "cifar-100-binary", train ? "train.bin" : "test.bin"), 2);
        return set;
    }
    if (name == "cifar10") {
        set.num_classes = 10;
        if (!train) {
            append_cifar(set, locate(root, "cifar-10-batches-bin", "test_batch.bin"), 1);
            return set;
        }
        for (int b = 1; b <= 5; ++b) {
            append_cifar(set, locate(root, "cifar-10-batches-bin", "data_batch_" + std::to_string(b) + ".bin"), 1);
        }
        return set;
    }
    if (name == "stl10") {
        const std::string prefix = train ? "train" : "test";
        return load_stl10(locate(root, "stl10_binary", prefix + "_X.bin"), locate(root, "stl10_binary", prefix + "_y.bin"));
    }
    throw IngestionError("unsupported benchmark '" + name + "' (expected cifar10, cifar100 or stl10)");
}

}  // namespace

LabeledSet load_benchmark(const std::string& name, const fs::path& root) { return load_partition(name, root, true); }

LabeledSet load_benchmark_test(const std::string& name, const fs::path& root) {
    return load_partition(name, root, false);
}

// ---------------------------------------------------------------------------
// Batching

Tensor to_batch(std::span<const ImageSample> samples) {
    std::vector<std::size_t> all(samples.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    return to_batch(samples, all);
}

Tensor to_batch(std::span<const ImageSample> samples, std::span<const std::size_t> indices) {
    if (samples.empty() || indices.empty()) {
        const ImageShape s = samples.empty() ? ImageShape{} : samples.front().shape;
        return Tensor({0, s.channels, s.height, s.width});
    }
    const ImageShape s = samples[indices.front()].shape;
    Tensor batch({indices.size(), s.channels, s.height, s.width});
    const std::size_t plane = s.height * s.width;
    for (std::size_t b = 0; b < indices.size(); ++b) {
        const auto& img = samples[indices[b]];
        if (!(img.shape == s)) throw InvalidInput("batch images must share one shape");
        double* dst = batch.data() + b * s.channels * plane;
        for (std::size_t p = 0; p < plane; ++p) {
            for (std::size_t c = 0; c < s.channels; ++c) dst[c * plane + p] = img.pixels[p * s.channels + c];
        }
    }
    return batch;
}

ImageSample from_batch(const Tensor& batch, std::size_t row, std::int64_t id) {
    if (batch.rank() != 4 || row >= batch.dim(0)) throw InvalidInput("from_batch expects an NCHW batch");
    ImageSample s;
    s.id = id;
    s.shape = ImageShape{batch.dim(2), batch.dim(3), batch.dim(1)};
    const auto& sh = s.shape;
    const std::size_t plane = sh.height * sh.width;
    s.pixels.resize(plane * sh.channels);
    const double* src = batch.data() + row * sh.channels * plane;
    for (std::size_t p = 0; p < plane; ++p) {
        for (std::size_t c = 0; c < sh.channels; ++c) {
            s.pixels[p * sh.channels + c] = static_cast<float>(std::clamp(src[c * plane + p], 0.0, 1.0));
        }
    }
    return s;
}

}  // namespace cgssl
