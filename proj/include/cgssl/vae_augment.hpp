#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cgssl/datasets.hpp"
#include "cgssl/models.hpp"
#include "cgssl/supervised.hpp"

namespace cgssl {

struct VAETrainConfig {
    std::size_t latent_dim = 32;
    std::size_t decoder_channels = 32;
    long epochs = 40;
    std::size_t batch_size = 32;
    double learning_rate = 2e-3;
    double kl_weight = 1.0;
    // D_L samples added to D_REF_LOW; unset means |D_REF_LOW| (capped at |D_L|).
    std::optional<std::size_t> pad_count;
    std::uint64_t seed = 0;
    // Checkpoint stem of a pretrained trunk; empty trains the encoder from scratch.
    std::string pretrained_encoder;
    bool freeze_trunk = false;
    // Named backbone of the encoder trunk; empty uses the classifier backbone.
    std::string encoder_backbone;
};

void validate(const VAETrainConfig& config);
void to_json(nlohmann::json& j, const VAETrainConfig& c);
void from_json(const nlohmann::json& j, VAETrainConfig& c);

// Trains a classifier on `aux` (80/20 internal split for selection) and returns
// its trunk tensors, named "trunk.*".
StateDict pretrain_encoder(const LabeledSet& aux, const ArchSpec& spec, const TrainConfig& config);
void save_encoder(const std::filesystem::path& stem, const StateDict& trunk, const ArchSpec& spec, std::uint64_t seed);
StateDict load_encoder(const std::filesystem::path& stem);

// d_ref_low followed by pad_count distinct samples of d_l drawn without replacement.
LabeledSet assemble_vae_train_set(const LabeledSet& d_ref_low, const LabeledSet& d_l, std::size_t pad_count,
                                  std::uint64_t seed);

struct ElboTerms {
    double total = 0.0;
    double recon = 0.0;  // squared error summed over pixels, mean over the batch
    double kl = 0.0;     // KL(q(z|x) || N(0, I)), mean over the batch
};

// Analytic Gaussian KL to the standard normal, averaged over rows.
double gaussian_kl(const Tensor& mu, const Tensor& logvar);

// Negative ELBO with explicit reparametrization noise. Pure: evaluation mode, no gradients.
ElboTerms elbo_loss(VAEModel& vae, const Tensor& batch, const Tensor& noise, double kl_weight = 1.0);
// Same objective in training mode; accumulates parameter gradients.
ElboTerms elbo_loss_backward(VAEModel& vae, const Tensor& batch, const Tensor& noise, double kl_weight = 1.0);

struct VaeEpochRecord {
    long epoch = 0;
    double total = 0.0;
    double recon = 0.0;
    double kl = 0.0;
    bool operator==(const VaeEpochRecord&) const = default;
};

struct VaeTrainResult {
    VAEModel model;
    std::vector<VaeEpochRecord> history;
};

VaeSpec vae_spec_for(const ArchSpec& encoder, const VAETrainConfig& config);

// Adam on the negative ELBO. `pretrained_trunk` takes precedence over
// config.pretrained_encoder when both are given.
VaeTrainResult train_vae(const LabeledSet& train_set, const ArchSpec& encoder, const VAETrainConfig& config,
                         const StateDict* pretrained_trunk = nullptr);

void write_vae_history_jsonl(const std::filesystem::path& path, const std::vector<VaeEpochRecord>& history);

// Mean per-image squared error of posterior-mean reconstructions.
double reconstruction_mse(VAEModel& vae, const LabeledSet& data);

struct AugmentedSets {
    LabeledSet d_rec;
    std::vector<std::int64_t> rec_seed_ids;  // d_rec[i] reconstructs sample rec_seed_ids[i]
    UnlabeledSet d_synth;
};

// Posterior-mean reconstructions; ids are id_base + i, labels copied from the seeds.
AugmentedSets generate_reconstructions(VAEModel& vae, const LabeledSet& d_ref_low, std::int64_t id_base = 0);
// K prior samples decoded; ids are id_base + j.
UnlabeledSet generate_synthetic(VAEModel& vae, std::size_t K, std::uint64_t seed, std::int64_t id_base = 0);

// <dir>/rec and <dir>/synth, each with PNG files and manifest.json.
void export_augmented(const std::filesystem::path& dir, const AugmentedSets& sets);
AugmentedSets import_augmented(const std::filesystem::path& dir);

}  // namespace cgssl
