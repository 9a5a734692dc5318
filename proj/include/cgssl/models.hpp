#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <utility>

#include <nlohmann/json.hpp>

#include "cgssl/nn/layers.hpp"

namespace cgssl {

using nn::Mode;
using nn::StateDict;
using nn::Tensor;

struct ImageShape {
    std::size_t height = 16;
    std::size_t width = 16;
    std::size_t channels = 3;
    bool operator==(const ImageShape&) const = default;
};

// Backbone description.
//   "wrn"        pre-activation WideResNet, depth = 6n+4, widen factor `width`
//   "bottleneck" ResNet-50-style bottleneck stages; `width` multiplies the inner width
//   "cnn"        four conv-BN-ReLU blocks starting at `base_channels`
//   "mlp"        one hidden layer of `hidden` units
struct ArchSpec {
    std::string family = "cnn";
    std::size_t depth = 10;
    std::size_t width = 1;
    std::size_t base_channels = 16;
    std::size_t hidden = 32;
    std::size_t num_classes = 4;
    ImageShape input;
    bool operator==(const ArchSpec&) const = default;
};

// Resolves a backbone name ("wrn-50", "wrn-28-2", "resnet18", "cnn", "mlp") to a spec.
ArchSpec named_arch(const std::string& name, std::size_t num_classes, ImageShape input);
void validate(const ArchSpec& spec);

void to_json(nlohmann::json& j, const ImageShape& s);
void from_json(const nlohmann::json& j, ImageShape& s);
void to_json(nlohmann::json& j, const ArchSpec& s);
void from_json(const nlohmann::json& j, ArchSpec& s);

// Builds the feature extractor of `spec` (everything but the classification head).
// Returns the trunk and its output feature width.
std::pair<std::unique_ptr<nn::Sequential>, std::size_t> build_trunk(const ArchSpec& spec, Rng& rng);

class ClassifierModel {
public:
    ClassifierModel(ArchSpec spec, std::uint64_t seed);

    const ArchSpec& spec() const { return spec_; }
    std::uint64_t seed() const { return seed_; }

    Tensor forward(const Tensor& batch, Mode mode);
    Tensor backward(const Tensor& grad_logits);

    nn::Sequential& trunk() { return *trunk_; }
    nn::Linear& head() { return *head_; }

    std::vector<nn::ParamRef> parameters();
    StateDict state();
    void load_state(const StateDict& state);
    void zero_grad();

private:
    ArchSpec spec_;
    std::uint64_t seed_;
    std::unique_ptr<nn::Sequential> trunk_;
    std::unique_ptr<nn::Linear> head_;
};

ClassifierModel build_classifier(const ArchSpec& spec, std::uint64_t seed);

// Evaluation-mode logits, shape (batch, num_classes).
Tensor forward_logits(ClassifierModel& model, const Tensor& batch);

struct VaeSpec {
    ArchSpec encoder;
    std::size_t latent_dim = 32;
    std::size_t decoder_channels = 32;
    bool operator==(const VaeSpec&) const = default;
};

void to_json(nlohmann::json& j, const VaeSpec& s);
void from_json(const nlohmann::json& j, VaeSpec& s);

// Gaussian-posterior encoder (trunk + mean and log-variance heads) paired with a
// decoder whose logistic output keeps pixels in [0,1]. The prior is N(0, I).
class VAEModel {
public:
    VAEModel(VaeSpec spec, std::uint64_t seed);

    const VaeSpec& spec() const { return spec_; }
    std::size_t latent_dim() const { return spec_.latent_dim; }
    const ImageShape& image_shape() const { return spec_.encoder.input; }

    std::pair<Tensor, Tensor> encode(const Tensor& x, Mode mode);
    Tensor decode(const Tensor& z, Mode mode);
    // Backward through the last decode(); returns d/dz.
    Tensor backward_decoder(const Tensor& grad_image);
    // Backward through the last encode(); returns d/dx.
    Tensor backward_encoder(const Tensor& grad_mu, const Tensor& grad_logvar);

    nn::Sequential& trunk() { return *trunk_; }

    std::vector<nn::ParamRef> parameters();
    std::vector<nn::ParamRef> parameters_excluding_trunk();
    StateDict state();
    void load_state(const StateDict& state);
    // Loads "trunk.*" entries only, e.g. from a pretrained classifier.
    void load_trunk(const StateDict& state);
    void zero_grad();

private:
    nn::LayerState collect();

    VaeSpec spec_;
    std::unique_ptr<nn::Sequential> trunk_;
    std::unique_ptr<nn::Linear> mu_head_, logvar_head_;
    std::unique_ptr<nn::Sequential> decoder_;
};

VAEModel build_vae(const VaeSpec& spec, std::uint64_t seed);

std::pair<Tensor, Tensor> encode(VAEModel& vae, const Tensor& x);
Tensor decode(VAEModel& vae, const Tensor& z);

// Named-array archive: <stem>.bin holds the tensors, <stem>.json the sidecar.
struct Checkpoint {
    StateDict tensors;
    nlohmann::json meta;
};

void save_checkpoint(const std::filesystem::path& stem, const StateDict& tensors, const nlohmann::json& meta);
Checkpoint load_checkpoint(const std::filesystem::path& stem);
bool checkpoint_exists(const std::filesystem::path& stem);
std::filesystem::path checkpoint_binary(const std::filesystem::path& stem);
std::filesystem::path checkpoint_sidecar(const std::filesystem::path& stem);

void save_classifier(const std::filesystem::path& stem, ClassifierModel& model, long step);
ClassifierModel load_classifier(const std::filesystem::path& stem);
void save_vae(const std::filesystem::path& stem, VAEModel& vae, std::uint64_t seed, long step);
VAEModel load_vae(const std::filesystem::path& stem);

}  // namespace cgssl
