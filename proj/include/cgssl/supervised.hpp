#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "cgssl/datasets.hpp"
#include "cgssl/models.hpp"
#include "cgssl/nn/optim.hpp"

namespace cgssl {

struct TrainConfig {
    double learning_rate = 3e-2;
    double momentum = 0.9;
    double weight_decay = 0.0;
    long max_steps = 10000;
    double plateau_decay_factor = 1e-2;
    int plateau_patience = 5;  // evaluations without validation-loss improvement before decay
    std::size_t batch_size = 64;
    long eval_interval = 100;
    std::uint64_t seed = 0;
    bool augment = true;
};

void validate(const TrainConfig& config);
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct EvalRecord {
    long step = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_accuracy = 0.0;
    double learning_rate = 0.0;
    bool operator==(const EvalRecord&) const = default;
};

struct TrainHistory {
    std::vector<EvalRecord> records;
    long best_step = 0;
    bool operator==(const TrainHistory&) const = default;
};

void write_history_jsonl(const std::filesystem::path& path, const TrainHistory& history);
TrainHistory read_history_jsonl(const std::filesystem::path& path);

struct EvalResult {
    double accuracy = 0.0;
    double mean_loss = 0.0;
};

EvalResult evaluate(ClassifierModel& model, const LabeledSet& data, std::size_t batch_size = 256);

// Drives SGD with plateau decay and best-on-validation selection. `step_fn`
// computes gradients for one step (already zeroed) and returns its training loss;
// the loop applies the optimizer update. On return `model` holds the parameters
// with the best validation accuracy.
using TrainStepFn = std::function<double(long step)>;
TrainHistory run_training_loop(ClassifierModel& model, const LabeledSet& validation, const TrainConfig& config,
                               const TrainStepFn& step_fn);

// Fully supervised cross-entropy training on D_L with model selection on D_V.
std::pair<ClassifierModel, TrainHistory> train_supervised(const LabeledSet& labeled, const LabeledSet& validation,
                                                          const ArchSpec& spec, const TrainConfig& config);

// Epoch-wise shuffled minibatch index stream.
class BatchSampler {
public:
    BatchSampler(std::size_t n, std::size_t batch_size, std::uint64_t seed);
    std::vector<std::size_t> next();

private:
    std::size_t n_, batch_size_, cursor_;
    std::vector<std::size_t> order_;
    Rng rng_;
};

// Augmented NCHW batch of the given samples, one derived seed per sample.
Tensor augmented_batch(std::span<const ImageSample> samples, std::span<const std::size_t> indices, Rng& rng,
                       bool augment);

}  // namespace cgssl
