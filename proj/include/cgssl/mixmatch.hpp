#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "cgssl/datasets.hpp"
#include "cgssl/losses.hpp"
#include "cgssl/models.hpp"
#include "cgssl/supervised.hpp"

namespace cgssl {

struct MixMatchConfig {
    TrainConfig train;
    double alpha = 0.5;
    double temperature = 0.5;
    double beta = 100.0;
    int k_aug = 2;
    long ramp_up_steps = 0;  // 0 keeps beta constant
    // false skips the unlabeled forward/backward pass entirely.
    bool unlabeled_term = true;
    // Forces lambda' for every MixUp instead of sampling it.
    std::optional<double> lambda_override;
};

void validate(const MixMatchConfig& config);
// Flat object: the TrainConfig keys plus the MixMatch-specific ones.
void to_json(nlohmann::json& j, const MixMatchConfig& c);
void from_json(const nlohmann::json& j, MixMatchConfig& c);

std::vector<double> sharpen(std::span<const double> p, double T);
Tensor sharpen_rows(const Tensor& p, double T);

struct MixedBatch {
    Tensor inputs;
    Tensor targets;
    double lambda = 1.0;  // lambda' applied to the primary batch
};

// lambda' = max(lambda, 1 - lambda); out = lambda' * primary + (1 - lambda') * partner.
MixedBatch mixup_with_lambda(const Tensor& x1, const Tensor& t1, const Tensor& x2, const Tensor& t2, double lambda);
MixedBatch mixup(const Tensor& x1, const Tensor& t1, const Tensor& x2, const Tensor& t2, double alpha,
                 std::uint64_t seed);

struct GuessedLabels {
    std::vector<Tensor> augmented;  // k_aug NCHW batches
    Tensor targets;                 // (N, C), sharpened average prediction
};

// Label guess from a batch-statistics pass over k_aug augmentations; running statistics are restored. Targets are constants.
GuessedLabels guess_labels(ClassifierModel& model, std::span<const ImageSample> unlabeled, int k_aug, double T,
                           std::uint64_t seed, bool augment = true);

struct MixMatchBatch {
    MixedBatch x;  // |labeled| rows
    MixedBatch u;  // k_aug * |unlabeled| rows
    Tensor guessed;
    std::vector<std::size_t> permutation;  // order of the shuffled pool W
};

MixMatchBatch mixmatch_batch(ClassifierModel& model, std::span<const ImageSample> labeled,
                             std::span<const int> labels, std::span<const ImageSample> unlabeled,
                             const MixMatchConfig& config, std::uint64_t seed);

// Audit document of one batch transform: inputs, guesses, lambdas, mixed targets.
nlohmann::json trace_to_json(const MixMatchBatch& batch, std::span<const ImageSample> labeled,
                             std::span<const int> labels, std::span<const ImageSample> unlabeled);

struct MixMatchLoss {
    double total = 0.0;
    double l_x = 0.0;
    double l_u = 0.0;
    Tensor grad_x;  // d total / d pred_x
    Tensor grad_u;  // d total / d pred_u, already scaled by beta_effective
};

MixMatchLoss mixmatch_loss(const Tensor& pred_x, const Tensor& targets_x, const Tensor& pred_u,
                           const Tensor& targets_u, double beta_effective);

double effective_beta(const MixMatchConfig& config, long step);

// Starts from `init_state` (e.g. the current reference model) when given,
// otherwise from a fresh initialization.
std::pair<ClassifierModel, TrainHistory> train_mixmatch(const LabeledSet& labeled, const UnlabeledSet& unlabeled,
                                                        const LabeledSet& validation, const ArchSpec& spec,
                                                        const MixMatchConfig& config,
                                                        const StateDict* init_state = nullptr);

}  // namespace cgssl
