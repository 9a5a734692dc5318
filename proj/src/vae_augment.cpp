#include "cgssl/vae_augment.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <spdlog/spdlog.h>

#include "cgssl/error.hpp"
#include "cgssl/image_io.hpp"
#include "cgssl/nn/optim.hpp"

namespace cgssl {

namespace fs = std::filesystem;
using nlohmann::json;

void validate(const VAETrainConfig& c) {
    if (c.latent_dim == 0) throw InvalidSpec("vae latent_dim must be positive");
    if (c.decoder_channels == 0) throw InvalidSpec("vae decoder_channels must be positive");
    if (c.epochs < 0) throw InvalidSpec("vae epochs must be non-negative");
    if (c.batch_size == 0) throw InvalidSpec("vae batch_size must be positive");
    if (!(c.learning_rate > 0.0)) throw InvalidSpec("vae learning_rate must be positive");
    if (!(c.kl_weight >= 0.0)) throw InvalidSpec("kl_weight must be non-negative");
}

void to_json(json& j, const VAETrainConfig& c) {
    j = json{{"latent_dim", c.latent_dim},
             {"decoder_channels", c.decoder_channels},
             {"epochs", c.epochs},
             {"batch_size", c.batch_size},
             {"learning_rate", c.learning_rate},
             {"kl_weight", c.kl_weight},
             {"pad_count", c.pad_count ? json(*c.pad_count) : json(nullptr)},
             {"seed", c.seed},
             {"pretrained_encoder", c.pretrained_encoder},
             {"freeze_trunk", c.freeze_trunk},
             {"encoder_backbone", c.encoder_backbone}};
}

void from_json(const json& j, VAETrainConfig& c) {
    const VAETrainConfig d;
    c.latent_dim = j.value("latent_dim", d.latent_dim);
    c.decoder_channels = j.value("decoder_channels", d.decoder_channels);
    c.epochs = j.value("epochs", d.epochs);
    c.batch_size = j.value("batch_size", d.batch_size);
    c.learning_rate = j.value("learning_rate", d.learning_rate);
    c.kl_weight = j.value("kl_weight", d.kl_weight);
    c.pad_count.reset();
    if (j.contains("pad_count") && !j.at("pad_count").is_null()) {
        if (!j.at("pad_count").is_number_integer() || j.at("pad_count").get<long long>() < 0) {
            throw InvalidSpec("pad_count must be a non-negative integer or null");
        }
        c.pad_count = j.at("pad_count").get<std::size_t>();
    }
    c.seed = j.value("seed", d.seed);
    c.pretrained_encoder = j.value("pretrained_encoder", d.pretrained_encoder);
    c.freeze_trunk = j.value("freeze_trunk", d.freeze_trunk);
    c.encoder_backbone = j.value("encoder_backbone", d.encoder_backbone);
}

StateDict pretrain_encoder(const LabeledSet& aux, const ArchSpec& spec, const TrainConfig& config) {
    if (aux.size() < 2) throw InvalidInput("auxiliary set needs at least two samples");
    std::vector<std::size_t> order(aux.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(config.seed, "aux-split"));
    rng.shuffle(std::span<std::size_t>(order));
    const std::size_t n_train = std::max<std::size_t>(1, aux.size() * 4 / 5);
    std::vector<std::size_t> train_idx(order.begin(), order.begin() + static_cast<long>(n_train));
    std::vector<std::size_t> val_idx(order.begin() + static_cast<long>(n_train), order.end());
    std::sort(train_idx.begin(), train_idx.end());
    std::sort(val_idx.begin(), val_idx.end());

    ArchSpec aux_spec = spec;
    aux_spec.num_classes = aux.num_classes;
    aux_spec.input = aux.samples.front().shape;
    auto [model, history] = train_supervised(subset(aux, train_idx), subset(aux, val_idx), aux_spec, config);
    StateDict trunk;
    for (auto& [name, tensor] : model.state()) {
        if (name.rfind("trunk.", 0) == 0) trunk.emplace(name, std::move(tensor));
    }
    return trunk;
}

void save_encoder(const fs::path& stem, const StateDict& trunk, const ArchSpec& spec, std::uint64_t seed) {
    save_checkpoint(stem, trunk, json{{"schema_version", 1}, {"kind", "encoder"}, {"architecture", spec}, {"seed", seed}});
}

StateDict load_encoder(const fs::path& stem) {
    auto ckpt = load_checkpoint(stem);
    if (ckpt.meta.value("kind", "") != "encoder" && ckpt.meta.value("kind", "") != "classifier") {
        throw IngestionError(stem.string() + " is not an encoder checkpoint");
    }
    StateDict trunk;
    for (auto& [name, tensor] : ckpt.tensors) {
        if (name.rfind("trunk.", 0) == 0) trunk.emplace(name, std::move(tensor));
    }
    return trunk;
}

LabeledSet assemble_vae_train_set(const LabeledSet& d_ref_low, const LabeledSet& d_l, std::size_t pad_count,
                                  std::uint64_t seed) {
    if (pad_count > d_l.size()) {
        throw InvalidInput("pad_count " + std::to_string(pad_count) + " exceeds |D_L| = " + std::to_string(d_l.size()));
    }
    if (pad_count == 0) return d_ref_low;
    std::vector<std::size_t> order(d_l.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(seed);
    rng.shuffle(std::span<std::size_t>(order));
    order.resize(pad_count);
    const LabeledSet pad = subset(d_l, order);
    if (d_ref_low.empty()) return pad;
    return merge(d_ref_low, pad);
}

double gaussian_kl(const Tensor& mu, const Tensor& logvar) {
    if (mu.shape() != logvar.shape() || mu.rank() != 2) throw InvalidInput("mu and logvar must be matching (N, d) matrices");
    if (mu.dim(0) == 0) return 0.0;
    double kl = 0.0;
    for (std::size_t i = 0; i < mu.size(); ++i) kl += mu[i] * mu[i] + std::exp(logvar[i]) - 1.0 - logvar[i];
    return 0.5 * kl / static_cast<double>(mu.dim(0));
}

namespace {

void check_noise(VAEModel& vae, const Tensor& batch, const Tensor& noise) {
    if (batch.rank() != 4 || noise.rank() != 2 || noise.dim(0) != batch.dim(0) || noise.dim(1) != vae.latent_dim()) {
        throw InvalidInput("noise " + nn::shape_string(noise.shape()) + " does not match batch " +
                           nn::shape_string(batch.shape()) + " and latent_dim " + std::to_string(vae.latent_dim()));
    }
    if (batch.dim(0) == 0) throw InvalidInput("ELBO of an empty batch");
}

ElboTerms elbo_impl(VAEModel& vae, const Tensor& batch, const Tensor& noise, double kl_weight, bool train) {
    check_noise(vae, batch, noise);
    const Mode mode = train ? Mode::kTrain : Mode::kEval;
    const auto [mu, logvar] = vae.encode(batch, mode);
    const double n = static_cast<double>(batch.dim(0));
    Tensor sigma(mu.shape());
    Tensor z(mu.shape());
    for (std::size_t i = 0; i < z.size(); ++i) {
        sigma[i] = std::exp(0.5 * logvar[i]);
        z[i] = mu[i] + sigma[i] * noise[i];
    }
    const Tensor recon_img = vae.decode(z, mode);
    ElboTerms terms;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const double d = recon_img[i] - batch[i];
        terms.recon += d * d;
    }
    terms.recon /= n;
    terms.kl = gaussian_kl(mu, logvar);
    terms.total = terms.recon + kl_weight * terms.kl;
    if (!train) return terms;

    Tensor grad_img(recon_img.shape());
    for (std::size_t i = 0; i < batch.size(); ++i) grad_img[i] = 2.0 * (recon_img[i] - batch[i]) / n;
    const Tensor dz = vae.backward_decoder(grad_img);
    Tensor grad_mu(mu.shape());
    Tensor grad_logvar(mu.shape());
    for (std::size_t i = 0; i < mu.size(); ++i) {
        grad_mu[i] = dz[i] + kl_weight * mu[i] / n;
        grad_logvar[i] = dz[i] * noise[i] * 0.5 * sigma[i] + kl_weight * 0.5 * (std::exp(logvar[i]) - 1.0) / n;
    }
    vae.backward_encoder(grad_mu, grad_logvar);
    return terms;
}

}  // namespace

ElboTerms elbo_loss(VAEModel& vae, const Tensor& batch, const Tensor& noise, double kl_weight) {
    return elbo_impl(vae, batch, noise, kl_weight, false);
}

ElboTerms elbo_loss_backward(VAEModel& vae, const Tensor& batch, const Tensor& noise, double kl_weight) {
    return elbo_impl(vae, batch, noise, kl_weight, true);
}

VaeSpec vae_spec_for(const ArchSpec& encoder, const VAETrainConfig& config) {
    return VaeSpec{encoder, config.latent_dim, config.decoder_channels};
}

VaeTrainResult train_vae(const LabeledSet& train_set, const ArchSpec& encoder, const VAETrainConfig& config,
                         const StateDict* pretrained_trunk) {
    validate(config);
    if (train_set.empty()) throw InvalidInput("VAE training set is empty");
    VaeTrainResult result{build_vae(vae_spec_for(encoder, config), derive_seed(config.seed, "vae-init")), {}};
    VAEModel& vae = result.model;
    if (pretrained_trunk) {
        vae.load_trunk(*pretrained_trunk);
    } else if (!config.pretrained_encoder.empty()) {
        vae.load_trunk(load_encoder(config.pretrained_encoder));
    }
    nn::Adam optimizer(config.freeze_trunk ? vae.parameters_excluding_trunk() : vae.parameters(), config.learning_rate);

    Rng order_rng(derive_seed(config.seed, "vae-batches"));
    Rng noise_rng(derive_seed(config.seed, "vae-noise"));
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    long step = 0;
    for (long epoch = 1; epoch <= config.epochs; ++epoch) {
        order_rng.shuffle(std::span<std::size_t>(order));
        VaeEpochRecord rec{epoch, 0.0, 0.0, 0.0};
        for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
            const std::size_t end = std::min(order.size(), begin + config.batch_size);
            const std::span<const std::size_t> idx(order.data() + begin, end - begin);
            const Tensor x = to_batch(train_set.samples, idx);
            Tensor noise({idx.size(), config.latent_dim});
            for (std::size_t i = 0; i < noise.size(); ++i) noise[i] = noise_rng.normal();
            vae.zero_grad();
            const ElboTerms t = elbo_loss_backward(vae, x, noise, config.kl_weight);
            ++step;
            if (!std::isfinite(t.total)) {
                throw DivergenceError("VAE loss became non-finite at step " + std::to_string(step), step);
            }
            optimizer.step();
            const double w = static_cast<double>(idx.size());
            rec.total += t.total * w;
            rec.recon += t.recon * w;
            rec.kl += t.kl * w;
        }
        const double n = static_cast<double>(order.size());
        rec.total /= n;
        rec.recon /= n;
        rec.kl /= n;
        spdlog::debug("vae epoch {}: loss {:.4f} recon {:.4f} kl {:.4f}", epoch, rec.total, rec.recon, rec.kl);
        result.history.push_back(rec);
    }
    return result;
}

void write_vae_history_jsonl(const fs::path& path, const std::vector<VaeEpochRecord>& history) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    for (const auto& r : history) {
        out << json{{"epoch", r.epoch}, {"loss", r.total}, {"recon", r.recon}, {"kl", r.kl}}.dump() << '\n';
    }
}

double reconstruction_mse(VAEModel& vae, const LabeledSet& data) {
    if (data.empty()) throw InvalidInput("reconstruction error of an empty set");
    const auto rec = generate_reconstructions(vae, data);
    double sq = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto& a = data.samples[i].pixels;
        const auto& b = rec.d_rec.samples[i].pixels;
        for (std::size_t k = 0; k < a.size(); ++k) {
            const double d = static_cast<double>(a[k]) - static_cast<double>(b[k]);
            sq += d * d;
        }
        count += a.size();
    }
    return sq / static_cast<double>(count);
}

AugmentedSets generate_reconstructions(VAEModel& vae, const LabeledSet& d_ref_low, std::int64_t id_base) {
    if (d_ref_low.empty()) throw InvalidInput("no seed images to reconstruct");
    AugmentedSets out;
    out.d_rec.num_classes = d_ref_low.num_classes;
    constexpr std::size_t kBatch = 256;
    for (std::size_t begin = 0; begin < d_ref_low.size(); begin += kBatch) {
        const std::size_t end = std::min(d_ref_low.size(), begin + kBatch);
        std::vector<std::size_t> idx(end - begin);
        std::iota(idx.begin(), idx.end(), begin);
        const auto mu = encode(vae, to_batch(d_ref_low.samples, idx)).first;
        const Tensor images = decode(vae, mu);
        for (std::size_t r = 0; r < idx.size(); ++r) {
            out.d_rec.samples.push_back(from_batch(images, r, id_base + static_cast<std::int64_t>(idx[r])));
            out.d_rec.labels.push_back(d_ref_low.labels[idx[r]]);
            out.rec_seed_ids.push_back(d_ref_low.samples[idx[r]].id);
        }
    }
    return out;
}

UnlabeledSet generate_synthetic(VAEModel& vae, std::size_t K, std::uint64_t seed, std::int64_t id_base) {
    UnlabeledSet out;
    out.samples.reserve(K);
    Rng rng(seed);
    constexpr std::size_t kBatch = 256;
    for (std::size_t begin = 0; begin < K; begin += kBatch) {
        const std::size_t rows = std::min(K, begin + kBatch) - begin;
        Tensor z({rows, vae.latent_dim()});
        for (std::size_t i = 0; i < z.size(); ++i) z[i] = rng.normal();
        const Tensor images = decode(vae, z);
        for (std::size_t r = 0; r < rows; ++r) {
            out.samples.push_back(from_batch(images, r, id_base + static_cast<std::int64_t>(begin + r)));
        }
    }
    return out;
}

namespace {

void write_manifest(const fs::path& path, const json& doc) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    out << doc.dump(2) << '\n';
}

json read_manifest(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw MissingArtifact("missing manifest " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw IngestionError("corrupt manifest " + path.string() + ": " + e.what());
    }
}

}  // namespace

void export_augmented(const fs::path& dir, const AugmentedSets& sets) {
    const fs::path rec_dir = dir / "rec";
    const fs::path synth_dir = dir / "synth";
    fs::create_directories(rec_dir);
    fs::create_directories(synth_dir);

    json rec = json::array();
    for (std::size_t i = 0; i < sets.d_rec.size(); ++i) {
        const auto& s = sets.d_rec.samples[i];
        const std::string file = std::to_string(s.id) + ".png";
        write_png(rec_dir / file, s);
        rec.push_back({{"id", s.id},
                       {"source", "rec"},
                       {"seed_id", sets.rec_seed_ids.at(i)},
                       {"label", sets.d_rec.labels[i]},
                       {"file", file}});
    }
    write_manifest(rec_dir / "manifest.json",
                   json{{"schema_version", 1}, {"num_classes", sets.d_rec.num_classes}, {"samples", rec}});

    json synth = json::array();
    for (const auto& s : sets.d_synth.samples) {
        const std::string file = std::to_string(s.id) + ".png";
        write_png(synth_dir / file, s);
        synth.push_back({{"id", s.id}, {"source", "synth"}, {"file", file}});
    }
    write_manifest(synth_dir / "manifest.json", json{{"schema_version", 1}, {"samples", synth}});
}

AugmentedSets import_augmented(const fs::path& dir) {
    AugmentedSets out;
    const json rec = read_manifest(dir / "rec" / "manifest.json");
    out.d_rec.num_classes = rec.at("num_classes").get<std::size_t>();
    for (const auto& e : rec.at("samples")) {
        out.d_rec.samples.push_back(read_png(dir / "rec" / e.at("file").get<std::string>(), e.at("id").get<std::int64_t>()));
        out.d_rec.labels.push_back(e.at("label").get<int>());
        out.rec_seed_ids.push_back(e.at("seed_id").get<std::int64_t>());
    }
    const json synth = read_manifest(dir / "synth" / "manifest.json");
    for (const auto& e : synth.at("samples")) {
        out.d_synth.samples.push_back(
            read_png(dir / "synth" / e.at("file").get<std::string>(), e.at("id").get<std::int64_t>()));
    }
    return out;
}

}  // namespace cgssl
