#include "cgssl/supervised.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "cgssl/error.hpp"
#include "cgssl/losses.hpp"

namespace cgssl {

using nlohmann::json;

void validate(const TrainConfig& c) {
    if (!(c.learning_rate >= 0.0)) throw InvalidSpec("learning_rate must be non-negative");
    if (!(c.momentum >= 0.0 && c.momentum < 1.0)) throw InvalidSpec("momentum must lie in [0, 1)");
    if (!(c.plateau_decay_factor > 0.0 && c.plateau_decay_factor < 1.0)) {
        throw InvalidSpec("plateau_decay_factor must lie in (0, 1)");
    }
    if (c.plateau_patience < 1) throw InvalidSpec("plateau_patience must be at least 1");
    if (c.batch_size == 0) throw InvalidSpec("batch_size must be positive");
    if (c.eval_interval < 1) throw InvalidSpec("eval_interval must be positive");
    if (c.max_steps < 0) throw InvalidSpec("max_steps must be non-negative");
}

void to_json(json& j, const TrainConfig& c) {
    j = json{{"learning_rate", c.learning_rate},
             {"momentum", c.momentum},
             {"weight_decay", c.weight_decay},
             {"max_steps", c.max_steps},
             {"plateau_decay_factor", c.plateau_decay_factor},
             {"plateau_patience", c.plateau_patience},
             {"batch_size", c.batch_size},
             {"eval_interval", c.eval_interval},
             {"seed", c.seed},
             {"augment", c.augment}};
}

void from_json(const json& j, TrainConfig& c) {
    const TrainConfig d;
    c.learning_rate = j.value("learning_rate", d.learning_rate);
    c.momentum = j.value("momentum", d.momentum);
    c.weight_decay = j.value("weight_decay", d.weight_decay);
    c.max_steps = j.value("max_steps", d.max_steps);
    c.plateau_decay_factor = j.value("plateau_decay_factor", d.plateau_decay_factor);
    c.plateau_patience = j.value("plateau_patience", d.plateau_patience);
    c.batch_size = j.value("batch_size", d.batch_size);
    c.eval_interval = j.value("eval_interval", d.eval_interval);
    c.seed = j.value("seed", d.seed);
    c.augment = j.value("augment", d.augment);
}

void write_history_jsonl(const std::filesystem::path& path, const TrainHistory& history) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    for (const auto& r : history.records) {
        out << json{{"step", r.step},
                    {"train_loss", r.train_loss},
                    {"val_loss", r.val_loss},
                    {"val_accuracy", r.val_accuracy},
                    {"learning_rate", r.learning_rate},
                    {"best", r.step == history.best_step}}
                   .dump()
            << '\n';
    }
}

TrainHistory read_history_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw MissingArtifact("missing history " + path.string());
    TrainHistory h;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto j = json::parse(line);
        EvalRecord r{j.at("step").get<long>(), j.at("train_loss").get<double>(), j.at("val_loss").get<double>(),
                     j.at("val_accuracy").get<double>(), j.at("learning_rate").get<double>()};
        if (j.value("best", false)) h.best_step = r.step;
        h.records.push_back(r);
    }
    return h;
}

EvalResult evaluate(ClassifierModel& model, const LabeledSet& data, std::size_t batch_size) {
    if (data.empty()) throw InvalidInput("cannot evaluate on an empty set");
    if (batch_size == 0) batch_size = 256;
    std::size_t correct = 0;
    double loss = 0.0;
    for (std::size_t begin = 0; begin < data.size(); begin += batch_size) {
        const std::size_t end = std::min(data.size(), begin + batch_size);
        std::vector<std::size_t> idx(end - begin);
        std::iota(idx.begin(), idx.end(), begin);
        const Tensor logits = forward_logits(model, to_batch(data.samples, idx));
        const std::span<const int> labels(data.labels.data() + begin, end - begin);
        const auto ce = soft_cross_entropy(logits, one_hot(labels, model.spec().num_classes));
        loss += ce.loss * static_cast<double>(end - begin);
        const auto pred = argmax_rows(logits);
        for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == labels[i] ? 1 : 0;
    }
    const double n = static_cast<double>(data.size());
    return EvalResult{static_cast<double>(correct) / n, loss / n};
}

BatchSampler::BatchSampler(std::size_t n, std::size_t batch_size, std::uint64_t seed)
    : n_(n), batch_size_(batch_size), cursor_(n), order_(n), rng_(seed) {
    if (n == 0 || batch_size == 0) throw InvalidInput("batch sampler needs a non-empty set and batch size");
    std::iota(order_.begin(), order_.end(), std::size_t{0});
}

std::vector<std::size_t> BatchSampler::next() {
    std::vector<std::size_t> batch;
    batch.reserve(batch_size_);
    while (batch.size() < batch_size_) {
        if (cursor_ == n_) {
            rng_.shuffle(std::span<std::size_t>(order_));
            cursor_ = 0;
        }
        batch.push_back(order_[cursor_++]);
        // Sets smaller than a batch contribute each sample once per batch.
        if (batch.size() == n_) break;
    }
    return batch;
}

Tensor augmented_batch(std::span<const ImageSample> samples, std::span<const std::size_t> indices, Rng& rng,
                       bool augment) {
    if (!augment) return to_batch(samples, indices);
    std::vector<ImageSample> aug;
    aug.reserve(indices.size());
    for (const auto i : indices) aug.push_back(augment_stochastic(samples[i], rng.next()));
    return to_batch(aug);
}

TrainHistory run_training_loop(ClassifierModel& model, const LabeledSet& validation, const TrainConfig& config,
                               const TrainStepFn& step_fn) {
    validate(config);
    if (validation.empty()) throw InvalidInput("validation set is empty");
    nn::Sgd optimizer(model.parameters(), config.learning_rate, config.momentum, config.weight_decay);

    TrainHistory history;
    double best_val_loss = std::numeric_limits<double>::infinity();
    double best_accuracy = -1.0;
    int bad_evals = 0;
    StateDict best_state = model.state();
    double loss_sum = 0.0;
    long loss_count = 0;

    for (long step = 1; step <= config.max_steps; ++step) {
        optimizer.zero_grad();
        const double loss = step_fn(step);
        if (!std::isfinite(loss)) throw DivergenceError("training loss became non-finite at step " + std::to_string(step), step);
        optimizer.step();
        loss_sum += loss;
        ++loss_count;

        if (step % config.eval_interval != 0 && step != config.max_steps) continue;
        const auto val = evaluate(model, validation);
        history.records.push_back({step, loss_sum / static_cast<double>(loss_count), val.mean_loss, val.accuracy,
                                   optimizer.learning_rate()});
        loss_sum = 0.0;
        loss_count = 0;
        if (val.accuracy > best_accuracy) {
            best_accuracy = val.accuracy;
            best_state = model.state();
            history.best_step = step;
        }
        if (val.mean_loss < best_val_loss) {
            best_val_loss = val.mean_loss;
            bad_evals = 0;
        } else if (++bad_evals >= config.plateau_patience) {
            optimizer.set_learning_rate(optimizer.learning_rate() * config.plateau_decay_factor);
            bad_evals = 0;
        }
    }
    model.load_state(best_state);
    return history;
}

std::pair<ClassifierModel, TrainHistory> train_supervised(const LabeledSet& labeled, const LabeledSet& validation,
                                                          const ArchSpec& spec, const TrainConfig& config) {
    if (labeled.empty() || validation.empty()) throw InvalidInput("supervised training needs non-empty D_L and D_V");
    if (labeled.num_classes != validation.num_classes || labeled.num_classes != spec.num_classes) {
        throw InvalidInput("D_L, D_V and the architecture must share num_classes");
    }
    validate(config);
    ClassifierModel model = build_classifier(spec, derive_seed(config.seed, "init"));
    BatchSampler sampler(labeled.size(), config.batch_size, derive_seed(config.seed, "batches"));
    Rng aug_rng(derive_seed(config.seed, "augment"));

    auto step_fn = [&](long) {
        const auto idx = sampler.next();
        const Tensor x = augmented_batch(labeled.samples, idx, aug_rng, config.augment);
        std::vector<int> y;
        y.reserve(idx.size());
        for (const auto i : idx) y.push_back(labeled.labels[i]);
        const Tensor logits = model.forward(x, Mode::kTrain);
        auto ce = soft_cross_entropy(logits, one_hot(y, spec.num_classes));
        model.backward(ce.grad);
        return ce.loss;
    };
    TrainHistory history = run_training_loop(model, validation, config, step_fn);
    return {std::move(model), std::move(history)};
}

}  // namespace cgssl
