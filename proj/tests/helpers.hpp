#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <unistd.h>

#include "cgssl/datasets.hpp"
#include "cgssl/losses.hpp"
#include "cgssl/models.hpp"
#include "cgssl/pipeline.hpp"
#include "cgssl/random.hpp"
#include "cgssl/vae_augment.hpp"

namespace cgssl::testing {

using nn::Shape;

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static int counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                ("cgssl_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

inline LabeledSet labeled_from_scores(const std::vector<int>& labels, std::size_t num_classes, std::size_t size = 4) {
    LabeledSet s;
    s.num_classes = num_classes;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        ImageSample img;
        img.id = static_cast<std::int64_t>(i + 1);
        img.shape = ImageShape{size, size, 3};
        img.pixels.assign(size * size * 3, static_cast<float>(i % 7) / 7.0f);
        s.samples.push_back(img);
        s.labels.push_back(labels[i]);
    }
    return s;
}

inline ArchSpec small_cnn(std::size_t classes = 4, std::size_t size = 8, std::size_t base = 4) {
    ArchSpec a;
    a.family = "cnn";
    a.base_channels = base;
    a.num_classes = classes;
    a.input = ImageShape{size, size, 3};
    return a;
}

inline Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    Rng rng(seed);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

struct GradCheck {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    std::string worst;
};

// Compares analytic gradients against central differences of `loss`.
// `analytic` must leave the gradients of `params` populated; at most
// `per_tensor` evenly spaced entries of each parameter are probed.
inline GradCheck check_gradients(std::vector<nn::ParamRef> params, const std::function<double()>& loss,
                                 const std::function<void()>& analytic, double eps = 1e-4,
                                 std::size_t per_tensor = 0, double floor = 1e-6) {
    analytic();
    std::vector<Tensor> grads;
    for (const auto& p : params) grads.push_back(*p.grad);
    GradCheck out;
    for (std::size_t k = 0; k < params.size(); ++k) {
        Tensor& w = *params[k].value;
        const std::size_t n = w.size();
        const std::size_t stride = per_tensor == 0 || n <= per_tensor ? 1 : n / per_tensor;
        for (std::size_t i = 0; i < n; i += stride) {
            const double orig = w[i];
            w[i] = orig + eps;
            const double up = loss();
            w[i] = orig - eps;
            const double down = loss();
            w[i] = orig;
            const double numeric = (up - down) / (2.0 * eps);
            const double a = grads[k][i];
            const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
            if (rel > out.max_rel_error) {
                out.max_rel_error = rel;
                out.worst = params[k].name + "[" + std::to_string(i) + "] analytic " + std::to_string(a) +
                            " numeric " + std::to_string(numeric);
            }
            ++out.checked;
        }
    }
    return out;
}

// Quantile oracle independent of sorting: order statistics are found by counting.
inline double order_statistic(const std::vector<double>& xs, std::size_t k) {
    for (const double x : xs) {
        std::size_t less = 0, less_equal = 0;
        for (const double y : xs) {
            less += static_cast<std::size_t>(y < x);
            less_equal += static_cast<std::size_t>(y <= x);
        }
        if (less <= k && k < less_equal) return x;
    }
    throw std::logic_error("order statistic out of range");
}

inline double brute_quantile(const std::vector<double>& xs, double p) {
    const double pos = p * static_cast<double>(xs.size() - 1);
    const auto lo = static_cast<std::size_t>(pos);
    const std::size_t hi = lo + 1 < xs.size() ? lo + 1 : lo;
    const double a = order_statistic(xs, lo), b = order_statistic(xs, hi);
    return a + (pos - static_cast<double>(lo)) * (b - a);
}

inline std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

// Relative path -> bytes of every regular file below `root`.
inline std::map<std::string, std::string> tree_bytes(const std::filesystem::path& root) {
    std::map<std::string, std::string> out;
    for (const auto& e : std::filesystem::recursive_directory_iterator(root)) {
        if (e.is_regular_file()) out[std::filesystem::relative(e.path(), root).string()] = slurp(e.path());
    }
    return out;
}

// A pipeline configuration small enough for unit tests (a few seconds per run).
inline PipelineConfig tiny_config(const std::filesystem::path& run_dir) {
    PipelineConfig c;
    c.dataset.num_classes = 3;
    c.dataset.train_per_class = 20;
    c.dataset.test_per_class = 10;
    c.dataset.image_size = 8;
    c.model = small_cnn(3, 8, 4);
    c.supervised.max_steps = 20;
    c.supervised.batch_size = 16;
    c.supervised.eval_interval = 10;
    c.pretrain.per_class = 10;
    c.pretrain.train = c.supervised;
    c.vae.latent_dim = 4;
    c.vae.decoder_channels = 4;
    c.vae.epochs = 2;
    c.vae.batch_size = 8;
    c.mixmatch.train = c.supervised;
    c.mixmatch.train.max_steps = 10;
    c.mixmatch.train.eval_interval = 5;
    c.K = 12;
    c.num_iterations = 1;
    c.num_seeds = 1;
    c.run_dir = run_dir.string();
    return c;
}

}  // namespace cgssl::testing
