#include "cgssl/mixmatch.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cgssl/error.hpp"

namespace cgssl {

using nlohmann::json;

void validate(const MixMatchConfig& c) {
    validate(c.train);
    if (!(c.alpha > 0.0)) throw InvalidSpec("alpha must be positive");
    if (!(c.temperature > 0.0)) throw InvalidSpec("temperature must be positive");
    if (!(c.beta >= 0.0)) throw InvalidSpec("beta must be non-negative");
    if (c.k_aug < 1) throw InvalidSpec("k_aug must be at least 1");
    if (c.ramp_up_steps < 0) throw InvalidSpec("ramp_up_steps must be non-negative");
    if (c.lambda_override && !(*c.lambda_override >= 0.0 && *c.lambda_override <= 1.0)) {
        throw InvalidSpec("lambda_override must lie in [0, 1]");
    }
}

void to_json(json& j, const MixMatchConfig& c) {
    j = c.train;
    j["alpha"] = c.alpha;
    j["temperature"] = c.temperature;
    j["beta"] = c.beta;
    j["k_aug"] = c.k_aug;
    j["ramp_up_steps"] = c.ramp_up_steps;
    j["unlabeled_term"] = c.unlabeled_term;
    j["lambda_override"] = c.lambda_override ? json(*c.lambda_override) : json(nullptr);
}

void from_json(const json& j, MixMatchConfig& c) {
    const MixMatchConfig d;
    c.train = j.get<TrainConfig>();
    c.alpha = j.value("alpha", d.alpha);
    c.temperature = j.value("temperature", d.temperature);
    c.beta = j.value("beta", d.beta);
    c.k_aug = j.value("k_aug", d.k_aug);
    c.ramp_up_steps = j.value("ramp_up_steps", d.ramp_up_steps);
    c.unlabeled_term = j.value("unlabeled_term", d.unlabeled_term);
    c.lambda_override.reset();
    if (j.contains("lambda_override") && !j.at("lambda_override").is_null()) {
        c.lambda_override = j.at("lambda_override").get<double>();
    }
}

std::vector<double> sharpen(std::span<const double> p, double T) {
    if (!(T > 0.0)) throw InvalidInput("sharpening temperature must be positive");
    if (p.empty()) throw InvalidInput("cannot sharpen an empty distribution");
    double sum = 0.0;
    for (const double v : p) {
        if (!(v >= -1e-6) || !std::isfinite(v)) throw InvalidInput("sharpen input has a negative or non-finite entry");
        sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-6) throw InvalidInput("sharpen input does not sum to 1");
    if (T == 1.0) return {p.begin(), p.end()};
    // Scaling by the largest entry keeps p^(1/T) from underflowing for small T.
    const double m = *std::max_element(p.begin(), p.end());
    std::vector<double> out(p.size());
    double norm = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        out[i] = std::pow(std::max(p[i], 0.0) / m, 1.0 / T);
        norm += out[i];
    }
    for (auto& v : out) v /= norm;
    return out;
}

Tensor sharpen_rows(const Tensor& p, double T) {
    if (p.rank() != 2) throw InvalidInput("sharpen_rows expects an (N, C) matrix");
    Tensor out(p.shape());
    for (std::size_t i = 0; i < p.dim(0); ++i) {
        const auto row = sharpen(p.row(i), T);
        std::copy(row.begin(), row.end(), out.data() + i * p.dim(1));
    }
    return out;
}

MixedBatch mixup_with_lambda(const Tensor& x1, const Tensor& t1, const Tensor& x2, const Tensor& t2, double lambda) {
    if (x1.shape() != x2.shape() || t1.shape() != t2.shape() || t1.rank() != 2 || x1.rank() < 1 ||
        x1.dim(0) != t1.dim(0)) {
        throw InvalidInput("mixup operands do not match: " + nn::shape_string(x1.shape()) + "/" +
                           nn::shape_string(t1.shape()) + " vs " + nn::shape_string(x2.shape()) + "/" +
                           nn::shape_string(t2.shape()));
    }
    const double l = std::max(lambda, 1.0 - lambda);
    MixedBatch out{Tensor(x1.shape()), Tensor(t1.shape()), l};
    for (std::size_t i = 0; i < x1.size(); ++i) out.inputs[i] = l * x1[i] + (1.0 - l) * x2[i];
    for (std::size_t i = 0; i < t1.size(); ++i) out.targets[i] = l * t1[i] + (1.0 - l) * t2[i];
    return out;
}

MixedBatch mixup(const Tensor& x1, const Tensor& t1, const Tensor& x2, const Tensor& t2, double alpha,
                 std::uint64_t seed) {
    if (!(alpha > 0.0)) throw InvalidInput("mixup alpha must be positive");
    Rng rng(seed);
    return mixup_with_lambda(x1, t1, x2, t2, rng.beta(alpha, alpha));
}

namespace {

// Training-mode normalization (statistics of this batch) without touching
// the running statistics or any parameter.
Tensor batch_stat_logits(ClassifierModel& model, const Tensor& batch) {
    const auto buffers = nn::collect_state(model.trunk(), "trunk.").buffers;
    std::vector<Tensor> saved;
    saved.reserve(buffers.size());
    for (const auto& b : buffers) saved.push_back(*b.value);
    Tensor logits = model.forward(batch, Mode::kTrain);
    for (std::size_t i = 0; i < buffers.size(); ++i) *buffers[i].value = std::move(saved[i]);
    return logits;
}

}  // namespace

GuessedLabels guess_labels(ClassifierModel& model, std::span<const ImageSample> unlabeled, int k_aug, double T,
                           std::uint64_t seed, bool augment) {
    if (unlabeled.empty()) throw InvalidInput("label guessing needs a non-empty batch");
    if (k_aug < 1) throw InvalidInput("k_aug must be at least 1");
    Rng rng(seed);
    GuessedLabels out;
    Tensor mean({unlabeled.size(), model.spec().num_classes});
    for (int k = 0; k < k_aug; ++k) {
        std::vector<ImageSample> view;
        view.reserve(unlabeled.size());
        for (const auto& s : unlabeled) view.push_back(augment ? augment_stochastic(s, rng.next()) : s);
        Tensor batch = to_batch(view);
        const Tensor p = softmax_rows(batch_stat_logits(model, batch));
        for (std::size_t i = 0; i < p.size(); ++i) mean[i] += p[i] / static_cast<double>(k_aug);
        out.augmented.push_back(std::move(batch));
    }
    out.targets = sharpen_rows(mean, T);
    return out;
}

MixMatchBatch mixmatch_batch(ClassifierModel& model, std::span<const ImageSample> labeled,
                             std::span<const int> labels, std::span<const ImageSample> unlabeled,
                             const MixMatchConfig& config, std::uint64_t seed) {
    if (labeled.empty() || unlabeled.empty()) throw InvalidInput("MixMatch needs non-empty labeled and unlabeled batches");
    if (labels.size() != labeled.size()) throw InvalidInput("labels do not match the labeled batch");
    Rng rng(seed);
    const std::size_t nx = labeled.size();
    const std::size_t k = static_cast<std::size_t>(config.k_aug);

    std::vector<ImageSample> x_aug;
    x_aug.reserve(nx);
    for (const auto& s : labeled) x_aug.push_back(config.train.augment ? augment_stochastic(s, rng.next()) : s);
    const Tensor x_hat = to_batch(x_aug);
    const Tensor p = one_hot(labels, model.spec().num_classes);

    GuessedLabels guess = guess_labels(model, unlabeled, config.k_aug, config.temperature, rng.next(), config.train.augment);
    const Tensor u_hat = nn::concat_rows(guess.augmented);
    const Tensor q = nn::concat_rows(std::vector<Tensor>(k, guess.targets));

    const Tensor w_x = nn::concat_rows({x_hat, u_hat});
    const Tensor w_t = nn::concat_rows({p, q});
    std::vector<std::size_t> perm(w_x.dim(0));
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    rng.shuffle(std::span<std::size_t>(perm));
    const Tensor w_xs = nn::gather_rows(w_x, perm);
    const Tensor w_ts = nn::gather_rows(w_t, perm);

    const double lambda_x = config.lambda_override ? *config.lambda_override : rng.beta(config.alpha, config.alpha);
    const double lambda_u = config.lambda_override ? *config.lambda_override : rng.beta(config.alpha, config.alpha);
    MixMatchBatch out;
    out.x = mixup_with_lambda(x_hat, p, nn::slice_rows(w_xs, 0, nx), nn::slice_rows(w_ts, 0, nx), lambda_x);
    out.u = mixup_with_lambda(u_hat, q, nn::slice_rows(w_xs, nx, w_xs.dim(0)), nn::slice_rows(w_ts, nx, w_ts.dim(0)),
                              lambda_u);
    out.guessed = std::move(guess.targets);
    out.permutation = std::move(perm);
    return out;
}

json trace_to_json(const MixMatchBatch& batch, std::span<const ImageSample> labeled, std::span<const int> labels,
                   std::span<const ImageSample> unlabeled) {
    auto rows = [](const Tensor& t) {
        json out = json::array();
        for (std::size_t i = 0; i < t.dim(0); ++i) {
            const auto r = t.row(i);
            out.push_back(std::vector<double>(r.begin(), r.end()));
        }
        return out;
    };
    auto row_means = [](const Tensor& t) {
        std::vector<double> out;
        for (std::size_t i = 0; i < t.dim(0); ++i) {
            const auto r = t.row(i);
            out.push_back(std::accumulate(r.begin(), r.end(), 0.0) / static_cast<double>(r.size()));
        }
        return out;
    };
    return json{{"schema_version", 1},
                {"labeled_ids", ids_of(labeled)},
                {"labels", std::vector<int>(labels.begin(), labels.end())},
                {"unlabeled_ids", ids_of(unlabeled)},
                {"guessed_labels", rows(batch.guessed)},
                {"pool_permutation", batch.permutation},
                {"lambda_x", batch.x.lambda},
                {"lambda_u", batch.u.lambda},
                {"mixed_x_shape", batch.x.inputs.shape()},
                {"mixed_u_shape", batch.u.inputs.shape()},
                {"mixed_x_pixel_means", row_means(batch.x.inputs)},
                {"mixed_u_pixel_means", row_means(batch.u.inputs)},
                {"mixed_x_targets", rows(batch.x.targets)},
                {"mixed_u_targets", rows(batch.u.targets)}};
}

MixMatchLoss mixmatch_loss(const Tensor& pred_x, const Tensor& targets_x, const Tensor& pred_u,
                           const Tensor& targets_u, double beta_effective) {
    if (pred_x.rank() != 2 || pred_u.rank() != 2 || pred_x.dim(1) != pred_u.dim(1)) {
        throw InvalidInput("labeled and unlabeled predictions must share the class dimension");
    }
    auto lx = soft_cross_entropy(pred_x, targets_x);
    auto lu = softmax_squared_error(pred_u, targets_u);
    for (std::size_t i = 0; i < lu.grad.size(); ++i) lu.grad[i] *= beta_effective;
    return MixMatchLoss{lx.loss + beta_effective * lu.loss, lx.loss, lu.loss, std::move(lx.grad), std::move(lu.grad)};
}

double effective_beta(const MixMatchConfig& config, long step) {
    if (config.ramp_up_steps <= 0) return config.beta;
    return config.beta * std::min(1.0, static_cast<double>(step) / static_cast<double>(config.ramp_up_steps));
}

std::pair<ClassifierModel, TrainHistory> train_mixmatch(const LabeledSet& labeled, const UnlabeledSet& unlabeled,
                                                        const LabeledSet& validation, const ArchSpec& spec,
                                                        const MixMatchConfig& config, const StateDict* init_state) {
    validate(config);
    if (labeled.empty() || unlabeled.empty() || validation.empty()) {
        throw InvalidInput("MixMatch training needs non-empty labeled, unlabeled and validation sets");
    }
    if (labeled.num_classes != spec.num_classes || validation.num_classes != spec.num_classes) {
        throw InvalidInput("labeled set, validation set and architecture must share num_classes");
    }
    const std::uint64_t seed = config.train.seed;
    ClassifierModel model = build_classifier(spec, derive_seed(seed, "init"));
    if (init_state) model.load_state(*init_state);
    BatchSampler labeled_sampler(labeled.size(), config.train.batch_size, derive_seed(seed, "batches"));
    BatchSampler unlabeled_sampler(unlabeled.size(), config.train.batch_size, derive_seed(seed, "unlabeled-batches"));
    const std::uint64_t step_seed = derive_seed(seed, "mixmatch");

    auto step_fn = [&](long step) {
        std::vector<ImageSample> xs;
        std::vector<int> ys;
        for (const auto i : labeled_sampler.next()) {
            xs.push_back(labeled.samples[i]);
            ys.push_back(labeled.labels[i]);
        }
        std::vector<ImageSample> us;
        for (const auto i : unlabeled_sampler.next()) us.push_back(unlabeled.samples[i]);

        const MixMatchBatch mb = mixmatch_batch(model, xs, ys, us, config, derive_seed(step_seed, static_cast<std::uint64_t>(step)));
        const double beta = config.unlabeled_term ? effective_beta(config, step) : 0.0;
        if (beta == 0.0) {
            const auto lx = soft_cross_entropy(model.forward(mb.x.inputs, Mode::kTrain), mb.x.targets);
            model.backward(lx.grad);
            return lx.loss;
        }
        // X' and U' share one forward pass so batch normalization sees both,
        // as interleaving does in multi-device MixMatch.
        const std::size_t nx = mb.x.inputs.dim(0);
        const Tensor logits = model.forward(nn::concat_rows({mb.x.inputs, mb.u.inputs}), Mode::kTrain);
        const auto loss = mixmatch_loss(nn::slice_rows(logits, 0, nx), mb.x.targets,
                                        nn::slice_rows(logits, nx, logits.dim(0)), mb.u.targets, beta);
        model.backward(nn::concat_rows({loss.grad_x, loss.grad_u}));
        return loss.total;
    };
    TrainHistory history = run_training_loop(model, validation, config.train, step_fn);
    return {std::move(model), std::move(history)};
}

}  // namespace cgssl
