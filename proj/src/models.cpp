#include "cgssl/models.hpp"

#include <array>
#include <cstring>
#include <fstream>
#include <regex>

#include "cgssl/error.hpp"

namespace cgssl {

using nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Architecture specs

ArchSpec named_arch(const std::string& name, std::size_t num_classes, ImageShape input) {
    ArchSpec spec;
    spec.num_classes = num_classes;
    spec.input = input;
    std::smatch m;
    if (name == "wrn-50") {
        // Bottleneck ResNet-50 layout with doubled inner width.
        spec.family = "bottleneck";
        spec.depth = 50;
        spec.width = 2;
    } else if (std::regex_match(name, m, std::regex(R"(wrn-(\d+)-(\d+))"))) {
        spec.family = "wrn";
        spec.depth = std::stoul(m[1]);
        spec.width = std::stoul(m[2]);
    } else if (std::regex_match(name, m, std::regex(R"(resnet(\d+))"))) {
        spec.family = "resnet";
        spec.depth = std::stoul(m[1]);
    } else if (name == "cnn" || name == "mlp") {
        spec.family = name;
    } else {
        throw InvalidArchitecture("unknown backbone name '" + name + "'");
    }
    validate(spec);
    return spec;
}

namespace {

std::array<std::size_t, 4> resnet_layout(std::size_t depth) {
    switch (depth) {
        case 18: return {2, 2, 2, 2};
        case 34: return {3, 4, 6, 3};
        default: throw InvalidArchitecture("resnet depth must be 18 or 34, got " + std::to_string(depth));
    }
}

std::array<std::size_t, 4> bottleneck_layout(std::size_t depth) {
    switch (depth) {
        case 50: return {3, 4, 6, 3};
        case 101: return {3, 4, 23, 3};
        case 152: return {3, 8, 36, 3};
        default: throw InvalidArchitecture("bottleneck depth must be 50, 101 or 152, got " + std::to_string(depth));
    }
}

}  // namespace

void validate(const ArchSpec& spec) {
    if (spec.num_classes < 2) throw InvalidArchitecture("num_classes must be at least 2");
    if (spec.input.height == 0 || spec.input.width == 0 || spec.input.channels == 0) {
        throw InvalidArchitecture("input shape must be positive");
    }
    if (spec.width == 0) throw InvalidArchitecture("width factor must be positive");
    if (spec.family == "wrn") {
        if (spec.depth < 10 || (spec.depth - 4) % 6 != 0) {
            throw InvalidArchitecture("WideResNet depth must be 6n+4 with n >= 1, got " + std::to_string(spec.depth));
        }
    } else if (spec.family == "bottleneck") {
        bottleneck_layout(spec.depth);
    } else if (spec.family == "resnet") {
        resnet_layout(spec.depth);
    } else if (spec.family == "cnn") {
        if (spec.base_channels == 0) throw InvalidArchitecture("base_channels must be positive");
        if (spec.input.height < 4 || spec.input.width < 4) throw InvalidArchitecture("cnn needs inputs of at least 4x4");
    } else if (spec.family == "mlp") {
        if (spec.hidden == 0) throw InvalidArchitecture("hidden must be positive");
    } else {
        throw InvalidArchitecture("unknown backbone family '" + spec.family + "'");
    }
}

void to_json(json& j, const ImageShape& s) {
    j = json{{"height", s.height}, {"width", s.width}, {"channels", s.channels}};
}

void from_json(const json& j, ImageShape& s) {
    j.at("height").get_to(s.height);
    j.at("width").get_to(s.width);
    j.at("channels").get_to(s.channels);
}

void to_json(json& j, const ArchSpec& s) {
    j = json{{"family", s.family},   {"depth", s.depth},   {"width", s.width},
             {"base_channels", s.base_channels}, {"hidden", s.hidden}, {"num_classes", s.num_classes},
             {"input", s.input}};
}

void from_json(const json& j, ArchSpec& s) {
    ArchSpec d;
    s.family = j.value("family", d.family);
    s.depth = j.value("depth", d.depth);
    s.width = j.value("width", d.width);
    s.base_channels = j.value("base_channels", d.base_channels);
    s.hidden = j.value("hidden", d.hidden);
    s.num_classes = j.value("num_classes", d.num_classes);
    s.input = j.contains("input") ? j.at("input").get<ImageShape>() : d.input;
}

void to_json(json& j, const VaeSpec& s) {
    j = json{{"encoder", s.encoder}, {"latent_dim", s.latent_dim}, {"decoder_channels", s.decoder_channels}};
}

void from_json(const json& j, VaeSpec& s) {
    j.at("encoder").get_to(s.encoder);
    j.at("latent_dim").get_to(s.latent_dim);
    s.decoder_channels = j.value("decoder_channels", VaeSpec{}.decoder_channels);
}

std::pair<std::unique_ptr<nn::Sequential>, std::size_t> build_trunk(const ArchSpec& spec, Rng& rng) {
    validate(spec);
    using namespace nn;
    auto trunk = std::make_unique<Sequential>();
    const std::size_t in_c = spec.input.channels;
    std::size_t features = 0;
    if (spec.family == "wrn") {
        const std::size_t blocks = (spec.depth - 4) / 6;
        const std::array<std::size_t, 4> ch{16, 16 * spec.width, 32 * spec.width, 64 * spec.width};
        trunk->emplace<Conv2d>(in_c, ch[0], 3, 1, 1, false, rng);
        for (std::size_t g = 0; g < 3; ++g) {
            for (std::size_t b = 0; b < blocks; ++b) {
                const std::size_t stride = (b == 0 && g > 0) ? 2 : 1;
                trunk->emplace<WideBasicBlock>(b == 0 ? ch[g] : ch[g + 1], ch[g + 1], stride, rng);
            }
        }
        trunk->emplace<BatchNorm2d>(ch[3]);
        trunk->emplace<ReLU>();
        trunk->emplace<GlobalAvgPool>();
        features = ch[3];
    } else if (spec.family == "bottleneck") {
        const auto layout = bottleneck_layout(spec.depth);
        trunk->emplace<Conv2d>(in_c, 64, 7, 2, 3, false, rng);
        trunk->emplace<BatchNorm2d>(64);
        trunk->emplace<ReLU>();
        trunk->emplace<MaxPool2d>(3, 2, 1);
        std::size_t in = 64;
        for (std::size_t stage = 0; stage < 4; ++stage) {
            const std::size_t inner = (64u << stage) * spec.width;
            const std::size_t out = 256u << stage;
            for (std::size_t b = 0; b < layout[stage]; ++b) {
                const std::size_t stride = (b == 0 && stage > 0) ? 2 : 1;
                trunk->emplace<BottleneckBlock>(in, inner, out, stride, rng);
                in = out;
            }
        }
        trunk->emplace<GlobalAvgPool>();
        features = in;
    } else if (spec.family == "resnet") {
        // Pre-activation basic blocks, 3x3 stem for small images.
        const auto layout = resnet_layout(spec.depth);
        trunk->emplace<Conv2d>(in_c, 64, 3, 1, 1, false, rng);
        std::size_t in = 64;
        for (std::size_t stage = 0; stage < 4; ++stage) {
            const std::size_t out = 64u << stage;
            for (std::size_t b = 0; b < layout[stage]; ++b) {
                trunk->emplace<WideBasicBlock>(in, out, (b == 0 && stage > 0) ? 2 : 1, rng);
                in = out;
            }
        }
        trunk->emplace<BatchNorm2d>(in);
        trunk->emplace<ReLU>();
        trunk->emplace<GlobalAvgPool>();
        features = in;
    } else if (spec.family == "cnn") {
        const std::size_t c = spec.base_channels;
        const std::array<std::size_t, 5> ch{in_c, c, 2 * c, 4 * c, 4 * c};
        const std::array<std::size_t, 4> strides{1, 2, 2, 1};
        for (std::size_t i = 0; i < 4; ++i) {
            trunk->emplace<Conv2d>(ch[i], ch[i + 1], 3, strides[i], 1, false, rng);
            trunk->emplace<BatchNorm2d>(ch[i + 1]);
            trunk->emplace<ReLU>();
        }
        trunk->emplace<GlobalAvgPool>();
        features = ch[4];
    } else {
        trunk->emplace<Flatten>();
        trunk->emplace<Linear>(spec.input.height * spec.input.width * in_c, spec.hidden, rng);
        trunk->emplace<ReLU>();
        features = spec.hidden;
    }
    return {std::move(trunk), features};
}

namespace {

void check_image_batch(const Tensor& batch, const ImageShape& shape, const char* what) {
    if (batch.rank() != 4 || batch.dim(1) != shape.channels || batch.dim(2) != shape.height ||
        batch.dim(3) != shape.width) {
        throw InvalidInput(std::string(what) + " expects a batch of shape (N, " + std::to_string(shape.channels) +
                           ", " + std::to_string(shape.height) + ", " + std::to_string(shape.width) + "), got " +
                           nn::shape_string(batch.shape()));
    }
}

std::vector<nn::ParamRef> params_of(nn::LayerState&& s) { return std::move(s.params); }

}  // namespace

// ---------------------------------------------------------------------------
// Classifier

ClassifierModel::ClassifierModel(ArchSpec spec, std::uint64_t seed) : spec_(std::move(spec)), seed_(seed) {
    Rng rng(seed);
    auto [trunk, features] = build_trunk(spec_, rng);
    trunk_ = std::move(trunk);
    head_ = std::make_unique<nn::Linear>(features, spec_.num_classes, rng);
}

Tensor ClassifierModel::forward(const Tensor& batch, Mode mode) {
    check_image_batch(batch, spec_.input, "classifier");
    if (batch.dim(0) == 0) return Tensor({0, spec_.num_classes});
    return head_->forward(trunk_->forward(batch, mode), mode);
}

Tensor ClassifierModel::backward(const Tensor& grad_logits) { return trunk_->backward(head_->backward(grad_logits)); }

std::vector<nn::ParamRef> ClassifierModel::parameters() {
    auto params = params_of(nn::collect_state(*trunk_, "trunk."));
    auto head = params_of(nn::collect_state(*head_, "head."));
    params.insert(params.end(), head.begin(), head.end());
    return params;
}

StateDict ClassifierModel::state() {
    StateDict out = nn::state_dict(*trunk_, "trunk.");
    out.merge(nn::state_dict(*head_, "head."));
    return out;
}

void ClassifierModel::load_state(const StateDict& state) {
    nn::load_state_dict(*trunk_, state, "trunk.");
    nn::load_state_dict(*head_, state, "head.");
}

void ClassifierModel::zero_grad() {
    nn::zero_grad(*trunk_);
    nn::zero_grad(*head_);
}

ClassifierModel build_classifier(const ArchSpec& spec, std::uint64_t seed) { return ClassifierModel(spec, seed); }

Tensor forward_logits(ClassifierModel& model, const Tensor& batch) { return model.forward(batch, Mode::kEval); }

// ---------------------------------------------------------------------------
// VAE

VAEModel::VAEModel(VaeSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
    if (spec_.latent_dim == 0) throw InvalidArchitecture("latent_dim must be positive");
    Rng rng(seed);
    auto [trunk, features] = build_trunk(spec_.encoder, rng);
    trunk_ = std::move(trunk);
    mu_head_ = std::make_unique<nn::Linear>(features, spec_.latent_dim, rng);
    logvar_head_ = std::make_unique<nn::Linear>(features, spec_.latent_dim, rng);

    const auto& img = spec_.encoder.input;
    decoder_ = std::make_unique<nn::Sequential>();
    const bool conv = spec_.encoder.family != "mlp" && img.height % 4 == 0 && img.width % 4 == 0;
    if (conv) {
        const std::size_t c = spec_.decoder_channels;
        const std::size_t c2 = std::max<std::size_t>(1, c / 2);
        decoder_->emplace<nn::Linear>(spec_.latent_dim, c * (img.height / 4) * (img.width / 4), rng);
        decoder_->emplace<nn::Reshape>(nn::Shape{c, img.height / 4, img.width / 4});
        decoder_->emplace<nn::ReLU>();
        decoder_->emplace<nn::Upsample2x>();
        decoder_->emplace<nn::Conv2d>(c, c2, 3, 1, 1, true, rng);
        decoder_->emplace<nn::ReLU>();
        decoder_->emplace<nn::Upsample2x>();
        decoder_->emplace<nn::Conv2d>(c2, img.channels, 3, 1, 1, true, rng);
    } else {
        const std::size_t hidden = std::max(spec_.decoder_channels, spec_.encoder.hidden);
        decoder_->emplace<nn::Linear>(spec_.latent_dim, hidden, rng);
        decoder_->emplace<nn::ReLU>();
        decoder_->emplace<nn::Linear>(hidden, img.height * img.width * img.channels, rng);
        decoder_->emplace<nn::Reshape>(nn::Shape{img.channels, img.height, img.width});
    }
    decoder_->emplace<nn::Sigmoid>();
}

std::pair<Tensor, Tensor> VAEModel::encode(const Tensor& x, Mode mode) {
    check_image_batch(x, spec_.encoder.input, "encoder");
    if (x.dim(0) == 0) return {Tensor({0, spec_.latent_dim}), Tensor({0, spec_.latent_dim})};
    const Tensor h = trunk_->forward(x, mode);
    return {mu_head_->forward(h, mode), logvar_head_->forward(h, mode)};
}

Tensor VAEModel::decode(const Tensor& z, Mode mode) {
    if (z.rank() != 2 || z.dim(1) != spec_.latent_dim) {
        throw InvalidInput("decoder expects latents of shape (N, " + std::to_string(spec_.latent_dim) + "), got " +
                           nn::shape_string(z.shape()));
    }
    const auto& img = spec_.encoder.input;
    if (z.dim(0) == 0) return Tensor({0, img.channels, img.height, img.width});
    return decoder_->forward(z, mode);
}

Tensor VAEModel::backward_decoder(const Tensor& grad_image) { return decoder_->backward(grad_image); }

Tensor VAEModel::backward_encoder(const Tensor& grad_mu, const Tensor& grad_logvar) {
    Tensor gh = mu_head_->backward(grad_mu);
    const Tensor gl = logvar_head_->backward(grad_logvar);
    for (std::size_t i = 0; i < gh.size(); ++i) gh[i] += gl[i];
    return trunk_->backward(gh);
}

nn::LayerState VAEModel::collect() {
    nn::LayerState s;
    trunk_->collect("trunk.", s.params, s.buffers);
    mu_head_->collect("mu.", s.params, s.buffers);
    logvar_head_->collect("logvar.", s.params, s.buffers);
    decoder_->collect("decoder.", s.params, s.buffers);
    return s;
}

std::vector<nn::ParamRef> VAEModel::parameters() { return collect().params; }

std::vector<nn::ParamRef> VAEModel::parameters_excluding_trunk() {
    std::vector<nn::ParamRef> out;
    for (auto& p : collect().params) {
        if (p.name.rfind("trunk.", 0) != 0) out.push_back(p);
    }
    return out;
}

StateDict VAEModel::state() {
    StateDict out;
    auto s = collect();
    for (const auto& p : s.params) out.emplace(p.name, *p.value);
    for (const auto& b : s.buffers) out.emplace(b.name, *b.value);
    return out;
}

void VAEModel::load_state(const StateDict& state) {
    nn::load_state_dict(*trunk_, state, "trunk.");
    nn::load_state_dict(*mu_head_, state, "mu.");
    nn::load_state_dict(*logvar_head_, state, "logvar.");
    nn::load_state_dict(*decoder_, state, "decoder.");
}

void VAEModel::load_trunk(const StateDict& state) { nn::load_state_dict(*trunk_, state, "trunk."); }

void VAEModel::zero_grad() {
    for (auto& p : parameters()) p.grad->fill(0.0);
}

VAEModel build_vae(const VaeSpec& spec, std::uint64_t seed) { return VAEModel(spec, seed); }

std::pair<Tensor, Tensor> encode(VAEModel& vae, const Tensor& x) { return vae.encode(x, Mode::kEval); }

Tensor decode(VAEModel& vae, const Tensor& z) { return vae.decode(z, Mode::kEval); }

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr std::array<char, 8> kArchiveMagic{'C', 'G', 'S', 'S', 'L', 'N', 'A', '1'};

template <typename T>
void write_pod(std::ostream& out, T value) {
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in, const fs::path& path) {
    T value{};
    in.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (!in) throw IngestionError("truncated checkpoint archive " + path.string());
    return value;
}

}  // namespace

fs::path checkpoint_binary(const fs::path& stem) { return fs::path(stem.string() + ".bin"); }
fs::path checkpoint_sidecar(const fs::path& stem) { return fs::path(stem.string() + ".json"); }

bool checkpoint_exists(const fs::path& stem) {
    return fs::exists(checkpoint_binary(stem)) && fs::exists(checkpoint_sidecar(stem));
}

void save_checkpoint(const fs::path& stem, const StateDict& tensors, const json& meta) {
    if (stem.has_parent_path()) fs::create_directories(stem.parent_path());
    std::ofstream out(checkpoint_binary(stem), std::ios::binary);
    if (!out) throw Error("cannot write checkpoint " + checkpoint_binary(stem).string());
    out.write(kArchiveMagic.data(), kArchiveMagic.size());
    write_pod<std::uint64_t>(out, tensors.size());
    for (const auto& [name, t] : tensors) {
        write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
        for (auto d : t.shape()) write_pod<std::uint64_t>(out, d);
        out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    }
    std::ofstream side(checkpoint_sidecar(stem));
    side << meta.dump(2) << '\n';
}

Checkpoint load_checkpoint(const fs::path& stem) {
    const auto bin = checkpoint_binary(stem);
    std::ifstream in(bin, std::ios::binary);
    if (!in) throw MissingArtifact("missing checkpoint " + bin.string());
    std::array<char, 8> magic{};
    in.read(magic.data(), magic.size());
    if (!in || magic != kArchiveMagic) throw IngestionError("not a checkpoint archive: " + bin.string());
    Checkpoint ck;
    const auto count = read_pod<std::uint64_t>(in, bin);
    for (std::uint64_t i = 0; i < count; ++i) {
        const auto len = read_pod<std::uint32_t>(in, bin);
        std::string name(len, '\0');
        in.read(name.data(), len);
        const auto rank = read_pod<std::uint32_t>(in, bin);
        nn::Shape shape(rank);
        for (auto& d : shape) d = read_pod<std::uint64_t>(in, bin);
        Tensor t(shape);
        in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
        if (!in) throw IngestionError("truncated checkpoint archive " + bin.string());
        ck.tensors.emplace(std::move(name), std::move(t));
    }
    const auto side_path = checkpoint_sidecar(stem);
    std::ifstream side(side_path);
    if (!side) throw MissingArtifact("missing checkpoint sidecar " + side_path.string());
    try {
        ck.meta = json::parse(side);
    } catch (const json::exception& e) {
        throw IngestionError("corrupt checkpoint sidecar " + side_path.string() + ": " + e.what());
    }
    return ck;
}

void save_classifier(const fs::path& stem, ClassifierModel& model, long step) {
    const json meta{{"schema_version", 1}, {"kind", "classifier"}, {"architecture", model.spec()},
                    {"seed", model.seed()}, {"step", step}};
    save_checkpoint(stem, model.state(), meta);
}

ClassifierModel load_classifier(const fs::path& stem) {
    const auto ck = load_checkpoint(stem);
    if (ck.meta.value("kind", "") != "classifier") {
        throw IngestionError(checkpoint_sidecar(stem).string() + " does not describe a classifier");
    }
    ClassifierModel model(ck.meta.at("architecture").get<ArchSpec>(), ck.meta.value("seed", std::uint64_t{0}));
    model.load_state(ck.tensors);
    return model;
}

void save_vae(const fs::path& stem, VAEModel& vae, std::uint64_t seed, long step) {
    const json meta{{"schema_version", 1}, {"kind", "vae"}, {"architecture", vae.spec()}, {"seed", seed},
                    {"step", step}};
    save_checkpoint(stem, vae.state(), meta);
}

VAEModel load_vae(const fs::path& stem) {
    const auto ck = load_checkpoint(stem);
    if (ck.meta.value("kind", "") != "vae") {
        throw IngestionError(checkpoint_sidecar(stem).string() + " does not describe a VAE");
    }
    VAEModel vae(ck.meta.at("architecture").get<VaeSpec>(), ck.meta.value("seed", std::uint64_t{0}));
    vae.load_state(ck.tensors);
    return vae;
}

}  // namespace cgssl
