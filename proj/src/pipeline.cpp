#include "cgssl/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <set>

#include <spdlog/spdlog.h>

#include "cgssl/error.hpp"
#include "cgssl/image_io.hpp"

namespace cgssl {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kSchemaVersion = 1;
const std::set<std::string> kBenchmarks{"cifar10", "cifar100", "stl10"};

json toy_to_json(const ToyOptions& t) {
    return json{{"noise", t.noise},
                {"hue_jitter", t.hue_jitter},
                {"distractor_prob", t.distractor_prob},
                {"min_scale", t.min_scale},
                {"max_scale", t.max_scale}};
}

ToyOptions toy_from_json(const json& j) {
    ToyOptions t;
    t.noise = j.value("noise", t.noise);
    t.hue_jitter = j.value("hue_jitter", t.hue_jitter);
    t.distractor_prob = j.value("distractor_prob", t.distractor_prob);
    t.min_scale = j.value("min_scale", t.min_scale);
    t.max_scale = j.value("max_scale", t.max_scale);
    return t;
}

json without_seed(json j) {
    j.erase("seed");
    return j;
}

void write_json(const fs::path& path, const json& doc) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    out << doc.dump(2) << '\n';
}

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw MissingArtifact("missing " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw IngestionError("corrupt JSON " + path.string() + ": " + e.what());
    }
}

std::uint64_t stage_seed(const PipelineConfig& c, const std::string& stage) { return derive_seed(c.seed, stage); }

std::string iter_tag(int n) { return "iter_" + std::to_string(n); }

void require_checkpoint(const fs::path& stem, const std::string& producer) {
    if (!checkpoint_exists(stem)) {
        throw MissingArtifact("missing checkpoint " + checkpoint_binary(stem).string() + " (produced by `" + producer +
                              "`)");
    }
}

template <typename Fn>
auto run_stage(const std::string& name, Fn&& fn) {
    const auto start = std::chrono::steady_clock::now();
    spdlog::info("stage {} ...", name);
    try {
        if constexpr (std::is_void_v<decltype(fn())>) {
            fn();
            spdlog::info("stage {} done in {:.1f}s", name,
                         std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
        } else {
            auto result = fn();
            spdlog::info("stage {} done in {:.1f}s", name,
                         std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
            return result;
        }
    } catch (const StageError&) {
        throw;
    } catch (const std::exception& e) {
        throw StageError(name, e.what());
    }
}

void write_partition(const fs::path& path, const std::string& name, const LabeledSet& set) {
    write_json(path, json{{"schema_version", kSchemaVersion},
                          {"partition", name},
                          {"num_classes", set.num_classes},
                          {"ids", ids_of(set.samples)},
                          {"labels", set.labels}});
}

LabeledSet read_partition(const fs::path& path, const LabeledSet& data, const std::map<std::int64_t, std::size_t>& index) {
    const json doc = read_json(path);
    const auto ids = doc.at("ids").get<std::vector<std::int64_t>>();
    const auto labels = doc.at("labels").get<std::vector<int>>();
    if (ids.size() != labels.size()) throw IngestionError("corrupt split file " + path.string());
    std::vector<std::size_t> rows;
    rows.reserve(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const auto it = index.find(ids[i]);
        if (it == index.end() || data.labels[it->second] != labels[i]) {
            throw IngestionError("split file " + path.string() + " does not match the configured dataset (id " +
                                 std::to_string(ids[i]) + ")");
        }
        rows.push_back(it->second);
    }
    return subset(data, rows);
}

std::string split_checksum(const RunLayout& run) {
    std::string digest;
    for (const char* part : {"labeled.json", "validation.json", "reference.json"}) digest += file_checksum(run.splits() / part);
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a64(digest)));
    return buf;
}

ArchSpec model_from_json(const json& j) {
    ArchSpec d;
    ArchSpec s;
    s.family = j.value("family", d.family);
    s.depth = j.value("depth", d.depth);
    s.width = j.value("width", d.width);
    s.base_channels = j.value("base_channels", d.base_channels);
    s.hidden = j.value("hidden", d.hidden);
    return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

json to_json(const PipelineConfig& c) {
    json j;
    j["schema_version"] = kSchemaVersion;
    j["seed"] = c.seed;
    j["num_seeds"] = c.num_seeds;
    j["run_dir"] = c.run_dir;
    j["dataset"] = json{{"name", c.dataset.name},
                        {"root", c.dataset.root},
                        {"num_classes", c.dataset.num_classes},
                        {"train_per_class", c.dataset.train_per_class},
                        {"test_per_class", c.dataset.test_per_class},
                        {"image_size", c.dataset.image_size},
                        {"toy", toy_to_json(c.dataset.toy)}};
    j["split"] = without_seed(c.split);
    j["backbone"] = c.backbone;
    j["model"] = json{{"family", c.model.family},
                      {"depth", c.model.depth},
                      {"width", c.model.width},
                      {"base_channels", c.model.base_channels},
                      {"hidden", c.model.hidden}};
    j["supervised"] = without_seed(c.supervised);
    j["pretrain"] = json{{"enabled", c.pretrain.enabled},
                         {"dataset", c.pretrain.dataset},
                         {"root", c.pretrain.root},
                         {"per_class", c.pretrain.per_class},
                         {"train", without_seed(c.pretrain.train)}};
    j["vae"] = without_seed(c.vae);
    j["mixmatch"] = without_seed(c.mixmatch);
    j["init_from_reference"] = c.init_from_reference;
    j["K"] = c.K;
    j["num_iterations"] = c.num_iterations;
    j["mode"] = c.mode;
    j["confidence_mode"] = c.confidence_mode;
    j["fallback_fraction"] = c.fallback_fraction;
    j["expected"] = c.expected.is_null() ? json::object() : c.expected;
    return j;
}

void check_known_keys(const json& given, const json& schema, const std::string& prefix) {
    if (!given.is_object()) return;
    for (const auto& [key, value] : given.items()) {
        const std::string path = prefix.empty() ? key : prefix + "." + key;
        if (!schema.is_object() || !schema.contains(key)) throw InvalidSpec("unknown configuration key '" + path + "'");
        if (key == "expected" && prefix.empty()) continue;
        if (value.is_object()) check_known_keys(value, schema.at(key), path);
    }
}

PipelineConfig pipeline_config_from_json(const json& j) {
    if (!j.is_object()) throw InvalidSpec("configuration must be a JSON object");
    check_known_keys(j, to_json(PipelineConfig{}));
    if (j.value("schema_version", kSchemaVersion) != kSchemaVersion) {
        throw InvalidSpec("unsupported configuration schema_version " + j.at("schema_version").dump());
    }
    PipelineConfig c;
    try {
        c.seed = j.value("seed", c.seed);
        c.num_seeds = j.value("num_seeds", c.num_seeds);
        c.run_dir = j.value("run_dir", c.run_dir);
        if (j.contains("dataset")) {
            const auto& d = j.at("dataset");
            c.dataset.name = d.value("name", c.dataset.name);
            c.dataset.root = d.value("root", c.dataset.root);
            c.dataset.num_classes = d.value("num_classes", c.dataset.num_classes);
            c.dataset.train_per_class = d.value("train_per_class", c.dataset.train_per_class);
            c.dataset.test_per_class = d.value("test_per_class", c.dataset.test_per_class);
            c.dataset.image_size = d.value("image_size", c.dataset.image_size);
            if (d.contains("toy")) c.dataset.toy = toy_from_json(d.at("toy"));
        }
        if (j.contains("split")) c.split = j.at("split").get<SplitSpec>();
        c.backbone = j.value("backbone", c.backbone);
        if (j.contains("model")) c.model = model_from_json(j.at("model"));
        if (j.contains("supervised")) c.supervised = j.at("supervised").get<TrainConfig>();
        if (j.contains("pretrain")) {
            const auto& p = j.at("pretrain");
            c.pretrain.enabled = p.value("enabled", c.pretrain.enabled);
            c.pretrain.dataset = p.value("dataset", c.pretrain.dataset);
            c.pretrain.root = p.value("root", c.pretrain.root);
            c.pretrain.per_class = p.value("per_class", c.pretrain.per_class);
            if (p.contains("train")) c.pretrain.train = p.at("train").get<TrainConfig>();
        }
        if (j.contains("vae")) c.vae = j.at("vae").get<VAETrainConfig>();
        if (j.contains("mixmatch")) c.mixmatch = j.at("mixmatch").get<MixMatchConfig>();
        c.init_from_reference = j.value("init_from_reference", c.init_from_reference);
        c.K = j.value("K", c.K);
        c.num_iterations = j.value("num_iterations", c.num_iterations);
        c.mode = j.value("mode", c.mode);
        c.confidence_mode = j.value("confidence_mode", c.confidence_mode);
        c.fallback_fraction = j.value("fallback_fraction", c.fallback_fraction);
        if (j.contains("expected")) c.expected = j.at("expected");
    } catch (const json::exception& e) {
        throw InvalidSpec(std::string("malformed configuration: ") + e.what());
    }
    validate(c);
    return c;
}

void validate(const PipelineConfig& c) {
    if (c.num_iterations < 1) throw InvalidSpec("num_iterations must be at least 1");
    if (c.num_seeds < 1) throw InvalidSpec("num_seeds must be at least 1");
    if (c.mode != "generated" && c.mode != "raw-ref") throw InvalidSpec("mode must be 'generated' or 'raw-ref'");
    parse_confidence_mode(c.confidence_mode);
    if (!(c.fallback_fraction > 0.0 && c.fallback_fraction <= 1.0)) throw InvalidSpec("fallback_fraction must lie in (0, 1]");
    if (c.run_dir.empty()) throw InvalidSpec("run_dir must not be empty");
    if (c.dataset.name == "toy") {
        if (c.dataset.train_per_class == 0 || c.dataset.test_per_class == 0) {
            throw InvalidSpec("toy dataset needs positive per-class counts");
        }
    } else if (!kBenchmarks.count(c.dataset.name)) {
        throw InvalidSpec("unknown dataset '" + c.dataset.name + "'");
    }
    if (c.pretrain.enabled && c.pretrain.dataset != "toy" && !kBenchmarks.count(c.pretrain.dataset)) {
        throw InvalidSpec("unknown pretraining dataset '" + c.pretrain.dataset + "'");
    }
    validate(c.split);
    validate(c.supervised);
    validate(c.pretrain.train);
    validate(c.vae);
    encoder_arch(c);
    validate(c.mixmatch);
    resolve_arch(c);
}

ArchSpec resolve_arch(const PipelineConfig& c) {
    std::size_t classes = c.dataset.num_classes;
    ImageShape shape{c.dataset.image_size, c.dataset.image_size, 3};
    if (c.dataset.name == "cifar10" || c.dataset.name == "cifar100") {
        classes = c.dataset.name == "cifar10" ? 10 : 100;
        shape = ImageShape{32, 32, 3};
    } else if (c.dataset.name == "stl10") {
        classes = 10;
        shape = ImageShape{96, 96, 3};
    }
    if (!c.backbone.empty()) return named_arch(c.backbone, classes, shape);
    ArchSpec spec = c.model;
    spec.num_classes = classes;
    spec.input = shape;
    validate(spec);
    return spec;
}

ArchSpec encoder_arch(const PipelineConfig& c) {
    const ArchSpec cls = resolve_arch(c);
    if (c.vae.encoder_backbone.empty()) return cls;
    return named_arch(c.vae.encoder_backbone, cls.num_classes, cls.input);
}

DataBundle load_data(const PipelineConfig& c) {
    const auto& d = c.dataset;
    if (d.name == "toy") {
        return DataBundle{
            generate_toy_dataset(d.num_classes, d.train_per_class, d.image_size, stage_seed(c, "data"), d.toy),
            generate_toy_dataset(d.num_classes, d.test_per_class, d.image_size, stage_seed(c, "test"), d.toy)};
    }
    return DataBundle{load_benchmark(d.name, d.root), load_benchmark_test(d.name, d.root)};
}

std::string file_checksum(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifact("missing " + path.string());
    const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a64(bytes)));
    return buf;
}

fs::path RunLayout::reference_checkpoint(int n) const {
    return n <= 1 ? checkpoint("baseline") : checkpoint(iter_tag(n - 1) + "_mixmatch");
}

// ---------------------------------------------------------------------------
// Stages

void write_config(const RunLayout& run, const PipelineConfig& config) { write_json(run.config(), to_json(config)); }

Splits stage_split(const PipelineConfig& c, const RunLayout& run) {
    const DataBundle data = load_data(c);
    SplitSpec spec = c.split;
    spec.seed = stage_seed(c, "split");
    Splits s = split_dataset(data.train, spec);
    write_partition(run.splits() / "labeled.json", "labeled", s.labeled);
    write_partition(run.splits() / "validation.json", "validation", s.validation);
    write_partition(run.splits() / "reference.json", "reference", s.reference);
    spdlog::info("split {} samples into D_L={} D_V={} D_REF={}", data.train.size(), s.labeled.size(),
                 s.validation.size(), s.reference.size());
    return s;
}

Splits load_splits(const RunLayout& run, const LabeledSet& data) {
    std::map<std::int64_t, std::size_t> index;
    for (std::size_t i = 0; i < data.size(); ++i) index.emplace(data.samples[i].id, i);
    return Splits{read_partition(run.splits() / "labeled.json", data, index),
                  read_partition(run.splits() / "validation.json", data, index),
                  read_partition(run.splits() / "reference.json", data, index)};
}

void stage_pretrain(const PipelineConfig& c, const RunLayout& run) {
    LabeledSet aux;
    if (c.pretrain.dataset == "toy") {
        aux = generate_toy_dataset(c.dataset.num_classes, c.pretrain.per_class, c.dataset.image_size,
                                   stage_seed(c, "aux"), c.dataset.toy);
    } else {
        aux = load_benchmark(c.pretrain.dataset, c.pretrain.root);
    }
    TrainConfig tc = c.pretrain.train;
    tc.seed = stage_seed(c, "pretrain");
    const StateDict trunk = pretrain_encoder(aux, encoder_arch(c), tc);
    save_encoder(run.checkpoint("encoder"), trunk, encoder_arch(c), tc.seed);
}

EvalResult stage_supervised(const PipelineConfig& c, const RunLayout& run) {
    const DataBundle data = load_data(c);
    const Splits s = load_splits(run, data.train);
    TrainConfig tc = c.supervised;
    tc.seed = stage_seed(c, "supervised");
    auto [model, history] = train_supervised(s.labeled, s.validation, resolve_arch(c), tc);
    save_classifier(run.checkpoint("baseline"), model, history.best_step);
    write_history_jsonl(run.history("baseline"), history);
    const EvalResult val = evaluate(model, s.validation);
    const EvalResult test = evaluate(model, data.test);
    write_json(run.metrics("baseline"), json{{"schema_version", kSchemaVersion},
                                             {"stage", "baseline"},
                                             {"iteration", 0},
                                             {"val_accuracy", val.accuracy},
                                             {"val_loss", val.mean_loss},
                                             {"test_accuracy", test.accuracy},
                                             {"test_loss", test.mean_loss},
                                             {"best_step", history.best_step},
                                             {"labeled_size", s.labeled.size()}});
    spdlog::info("baseline: val {:.4f} test {:.4f}", val.accuracy, test.accuracy);
    return test;
}

FilterReport stage_filter(const PipelineConfig& c, const RunLayout& run, int n) {
    const fs::path ref = run.reference_checkpoint(n);
    require_checkpoint(ref, n <= 1 ? "train-supervised" : "train-mixmatch --iteration " + std::to_string(n - 1));
    const DataBundle data = load_data(c);
    const Splits s = load_splits(run, data.train);
    ClassifierModel model = load_classifier(ref);
    const FilterReport report =
        filter_reference(model, s.reference, parse_confidence_mode(c.confidence_mode), c.fallback_fraction);
    write_filter_report(run.filter_report(n), report);
    write_confidence_histogram(run.iteration(n) / "confidence_histogram.png", report);
    spdlog::info("filter: gamma {:.4f}, |D_REF_LOW| = {} of {}{}", report.stats.gamma, report.selected_ids.size(),
                 s.reference.size(), report.fallback_used ? " (fallback)" : "");
    return report;
}

void stage_train_vae(const PipelineConfig& c, const RunLayout& run, int n) {
    const FilterReport report = read_filter_report(run.filter_report(n));
    const DataBundle data = load_data(c);
    const Splits s = load_splits(run, data.train);
    const LabeledSet low = selected_subset(s.reference, report);
    const std::size_t pad = c.vae.pad_count ? *c.vae.pad_count : std::min(low.size(), s.labeled.size());
    const LabeledSet train = assemble_vae_train_set(low, s.labeled, pad, stage_seed(c, iter_tag(n) + "/pad"));

    VAETrainConfig vc = c.vae;
    vc.seed = stage_seed(c, iter_tag(n) + "/vae");
    if (vc.pretrained_encoder.empty() && c.pretrain.enabled) {
        if (!checkpoint_exists(run.checkpoint("encoder"))) run_stage("pretrain", [&] { stage_pretrain(c, run); });
        vc.pretrained_encoder = run.checkpoint("encoder").string();
    }
    auto result = train_vae(train, encoder_arch(c), vc);
    save_vae(run.checkpoint(iter_tag(n) + "_vae"), result.model, vc.seed, vc.epochs);
    write_vae_history_jsonl(run.history(iter_tag(n) + "_vae"), result.history);
    if (!result.history.empty()) {
        spdlog::info("vae: {} samples, loss {:.3f} -> {:.3f}", train.size(), result.history.front().total,
                     result.history.back().total);
    }
}

AugmentedSets stage_generate(const PipelineConfig& c, const RunLayout& run, int n) {
    const fs::path stem = run.checkpoint(iter_tag(n) + "_vae");
    require_checkpoint(stem, "train-vae --iteration " + std::to_string(n));
    const FilterReport report = read_filter_report(run.filter_report(n));
    const DataBundle data = load_data(c);
    const Splits s = load_splits(run, data.train);
    const LabeledSet low = selected_subset(s.reference, report);
    VAEModel vae = load_vae(stem);

    // Generated ids live far above dataset ids: rec at n * 1e9, synth at n * 1e9 + 5e8.
    const std::int64_t base = static_cast<std::int64_t>(n) * 1'000'000'000;
    AugmentedSets sets = generate_reconstructions(vae, low, base);
    sets.d_synth = generate_synthetic(vae, c.K, stage_seed(c, iter_tag(n) + "/synth"), base + 500'000'000);
    for (auto& img : sets.d_rec.samples) quantize_8bit(img);
    for (auto& img : sets.d_synth.samples) quantize_8bit(img);
    fs::remove_all(run.augmented(n));
    export_augmented(run.augmented(n), sets);
    spdlog::info("generate: |D_Rec| = {}, |D_Synth| = {}", sets.d_rec.size(), sets.d_synth.size());
    return sets;
}

namespace {

struct MixMatchData {
    DataBundle data;
    Splits splits;
    LabeledSet labeled;
    UnlabeledSet unlabeled;
    std::size_t rec_size = 0;
};

MixMatchData mixmatch_data(const PipelineConfig& c, const RunLayout& run, int n, const std::string& mode) {
    if (mode != "generated" && mode != "raw-ref") throw InvalidSpec("unknown MixMatch data mode '" + mode + "'");
    MixMatchData d;
    d.data = load_data(c);
    d.splits = load_splits(run, d.data.train);
    d.labeled = d.splits.labeled;
    if (mode == "generated") {
        AugmentedSets aug = import_augmented(run.augmented(n));
        d.rec_size = aug.d_rec.size();
        if (!aug.d_rec.empty()) d.labeled = merge(d.splits.labeled, aug.d_rec);
        d.unlabeled = std::move(aug.d_synth);
        if (d.unlabeled.empty()) throw InvalidInput("D_Synth is empty (K = 0); MixMatch needs unlabeled data");
    } else {
        d.unlabeled = drop_labels(d.splits.reference);
    }
    return d;
}

std::optional<StateDict> mixmatch_init(const PipelineConfig& c, const RunLayout& run, int n) {
    if (!c.init_from_reference) return std::nullopt;
    const fs::path ref = run.reference_checkpoint(n);
    require_checkpoint(ref, n <= 1 ? "train-supervised" : "train-mixmatch --iteration " + std::to_string(n - 1));
    return load_checkpoint(ref).tensors;
}

}  // namespace

json stage_mixmatch(const PipelineConfig& c, const RunLayout& run, int n, const std::string& mode,
                    const std::string& name) {
    MixMatchData d = mixmatch_data(c, run, n, mode);
    const DataBundle& data = d.data;
    const Splits& s = d.splits;
    const LabeledSet& labeled = d.labeled;
    const UnlabeledSet& unlabeled = d.unlabeled;
    const std::size_t rec_size = d.rec_size;

    MixMatchConfig mc = c.mixmatch;
    mc.train.seed = stage_seed(c, iter_tag(n) + "/mixmatch");
    const fs::path ref = run.reference_checkpoint(n);
    const std::optional<StateDict> init = mixmatch_init(c, run, n);
    std::string ref_checksum;
    if (checkpoint_exists(ref)) ref_checksum = file_checksum(checkpoint_binary(ref));

    auto [model, history] = train_mixmatch(labeled, unlabeled, s.validation, resolve_arch(c), mc, init ? &*init : nullptr);
    save_classifier(run.checkpoint(name), model, history.best_step);
    write_history_jsonl(run.history(name), history);
    const EvalResult val = evaluate(model, s.validation);
    const EvalResult test = evaluate(model, data.test);

    json metrics{{"schema_version", kSchemaVersion},
                 {"stage", "mixmatch"},
                 {"name", name},
                 {"iteration", n},
                 {"mode", mode},
                 {"val_accuracy", val.accuracy},
                 {"val_loss", val.mean_loss},
                 {"test_accuracy", test.accuracy},
                 {"test_loss", test.mean_loss},
                 {"best_step", history.best_step},
                 {"labeled_size", labeled.size()},
                 {"unlabeled_size", unlabeled.size()},
                 {"d_rec_size", rec_size},
                 {"reference_checksum", ref_checksum},
                 {"split_checksum", split_checksum(run)}};
    if (fs::exists(run.filter_report(n))) {
        const FilterReport report = read_filter_report(run.filter_report(n));
        metrics["d_ref_low_size"] = report.selected_ids.size();
        metrics["gamma"] = report.stats.gamma;
        metrics["fallback_used"] = report.fallback_used;
    }
    write_json(run.metrics(name), metrics);
    spdlog::info("mixmatch {} ({}): val {:.4f} test {:.4f}", name, mode, val.accuracy, test.accuracy);
    return metrics;
}

json mixmatch_trace(const PipelineConfig& c, const RunLayout& run, int n, const std::string& mode) {
    const MixMatchData d = mixmatch_data(c, run, n, mode);
    const std::optional<StateDict> init = mixmatch_init(c, run, n);
    const std::uint64_t seed = stage_seed(c, iter_tag(n) + "/mixmatch");
    ClassifierModel model = build_classifier(resolve_arch(c), derive_seed(seed, "init"));
    if (init) model.load_state(*init);
    const std::size_t b = c.mixmatch.train.batch_size;
    const std::size_t nl = std::min(b, d.labeled.size());
    const std::size_t nu = std::min(b, d.unlabeled.size());
    const std::span<const ImageSample> xs(d.labeled.samples.data(), nl);
    const std::span<const int> ys(d.labeled.labels.data(), nl);
    const std::span<const ImageSample> us(d.unlabeled.samples.data(), nu);
    const MixMatchBatch batch = mixmatch_batch(model, xs, ys, us, c.mixmatch, derive_seed(seed, "trace"));
    json trace = trace_to_json(batch, xs, ys, us);
    trace["iteration"] = n;
    trace["mode"] = mode;
    trace["temperature"] = c.mixmatch.temperature;
    trace["alpha"] = c.mixmatch.alpha;
    trace["k_aug"] = c.mixmatch.k_aug;
    return trace;
}

// ---------------------------------------------------------------------------
// Orchestration

std::string mixmatch_name(const PipelineConfig& c, int n, const std::string& mode) {
    if (mode == c.mode) return iter_tag(n) + "_mixmatch";
    const std::string arm = mode == "raw-ref" ? "raw_ref" : "generated";
    return n == 1 ? "ablation_" + arm : iter_tag(n) + "_ablation_" + arm;
}

PipelineState run_iteration(const PipelineState& state, const PipelineConfig& c, const RunLayout& run) {
    const int n = state.iteration + 1;
    const std::string tag = iter_tag(n);
    if (!checkpoint_exists(run.reference_checkpoint(n))) {
        throw StageError(tag, "reference model " + checkpoint_binary(run.reference_checkpoint(n)).string() + " is missing");
    }
    run_stage(tag + "/filter", [&] { stage_filter(c, run, n); });
    if (c.mode == "generated") {
        run_stage(tag + "/train-vae", [&] { stage_train_vae(c, run, n); });
        run_stage(tag + "/generate", [&] { stage_generate(c, run, n); });
    }
    const json metrics = run_stage(tag + "/mixmatch", [&] { return stage_mixmatch(c, run, n, c.mode, tag + "_mixmatch"); });

    PipelineState next = state;
    next.iteration = n;
    next.reference_checkpoint = run.checkpoint(tag + "_mixmatch");
    next.filter_report = run.filter_report(n);
    next.augmented = c.mode == "generated" ? run.augmented(n) : fs::path{};
    next.metrics.push_back(metrics);
    return next;
}

fs::path seed_dir(const PipelineConfig& c, int k) {
    return c.num_seeds == 1 ? fs::path(c.run_dir) : fs::path(c.run_dir) / ("seed_" + std::to_string(k));
}

PipelineConfig seed_config(const PipelineConfig& c, int k) {
    PipelineConfig s = c;
    s.seed = c.seed + static_cast<std::uint64_t>(k);
    s.num_seeds = 1;
    s.run_dir = seed_dir(c, k).string();
    return s;
}

json single_report(const PipelineConfig& c, const RunLayout& run) {
    const json base = read_json(run.metrics("baseline"));
    json iterations = json::array();
    for (int n = 1; n <= c.num_iterations; ++n) {
        const json m = read_json(run.metrics(iter_tag(n) + "_mixmatch"));
        json entry{{"iteration", n},
                   {"val_accuracy", m.at("val_accuracy")},
                   {"test_accuracy", m.at("test_accuracy")},
                   {"labeled_size", m.at("labeled_size")},
                   {"unlabeled_size", m.at("unlabeled_size")}};
        for (const char* key : {"d_ref_low_size", "gamma", "fallback_used"}) {
            if (m.contains(key)) entry[key] = m.at(key);
        }
        iterations.push_back(entry);
    }
    return json{{"schema_version", kSchemaVersion},
                {"kind", "seed_report"},
                {"seed", c.seed},
                {"mode", c.mode},
                {"baseline", {{"val_accuracy", base.at("val_accuracy")}, {"test_accuracy", base.at("test_accuracy")}}},
                {"iterations", iterations}};
}

SummaryStats summarize(const std::vector<double>& values) {
    SummaryStats s;
    s.values = values;
    if (values.empty()) return s;
    const double n = static_cast<double>(values.size());
    s.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
    double sq = 0.0;
    for (const double v : values) sq += (v - s.mean) * (v - s.mean);
    s.std = values.size() > 1 ? std::sqrt(sq / (n - 1.0)) : 0.0;
    s.min = *std::min_element(values.begin(), values.end());
    s.max = *std::max_element(values.begin(), values.end());
    s.half_range = 0.5 * (s.max - s.min);
    return s;
}

json to_json(const SummaryStats& s) {
    return json{{"mean", s.mean}, {"std", s.std},           {"min", s.min},
                {"max", s.max},   {"half_range", s.half_range}, {"values", s.values}};
}

json aggregate_reports(const PipelineConfig& c, const std::vector<json>& per_seed) {
    std::vector<std::uint64_t> seeds;
    std::vector<double> base_test, base_val;
    for (const auto& r : per_seed) {
        seeds.push_back(r.at("seed").get<std::uint64_t>());
        base_test.push_back(r.at("baseline").at("test_accuracy").get<double>());
        base_val.push_back(r.at("baseline").at("val_accuracy").get<double>());
    }
    json stages = json::array();
    stages.push_back({{"name", "baseline"},
                      {"iteration", 0},
                      {"test_accuracy", to_json(summarize(base_test))},
                      {"val_accuracy", to_json(summarize(base_val))}});
    for (int n = 1; n <= c.num_iterations; ++n) {
        std::vector<double> test, val;
        for (const auto& r : per_seed) {
            const auto& it = r.at("iterations").at(static_cast<std::size_t>(n - 1));
            test.push_back(it.at("test_accuracy").get<double>());
            val.push_back(it.at("val_accuracy").get<double>());
        }
        stages.push_back({{"name", "mixmatch"},
                          {"iteration", n},
                          {"test_accuracy", to_json(summarize(test))},
                          {"val_accuracy", to_json(summarize(val))}});
    }
    return json{{"schema_version", kSchemaVersion},
                {"kind", "pipeline"},
                {"mode", c.mode},
                {"num_seeds", per_seed.size()},
                {"seeds", seeds},
                {"stages", stages},
                {"per_seed", per_seed}};
}

json run_single(const PipelineConfig& c) {
    validate(c);
    const RunLayout run{c.run_dir};
    write_config(run, c);
    run_stage("split", [&] { stage_split(c, run); });
    if (c.mode == "generated" && c.pretrain.enabled && c.vae.pretrained_encoder.empty()) {
        run_stage("pretrain", [&] { stage_pretrain(c, run); });
    }
    run_stage("train-supervised", [&] { stage_supervised(c, run); });
    PipelineState state;
    state.reference_checkpoint = run.checkpoint("baseline");
    for (int n = 1; n <= c.num_iterations; ++n) state = run_iteration(state, c, run);
    const json report = single_report(c, run);
    write_json(run.root / "seed_report.json", report);
    return report;
}

json run_pipeline(const PipelineConfig& c) {
    validate(c);
    if (c.num_seeds > 1) write_config(RunLayout{c.run_dir}, c);
    std::vector<json> per_seed;
    for (int k = 0; k < c.num_seeds; ++k) {
        const PipelineConfig sc = seed_config(c, k);
        spdlog::info("seed {} -> {}", sc.seed, sc.run_dir);
        per_seed.push_back(run_single(sc));
    }
    const json report = aggregate_reports(c, per_seed);
    write_json(RunLayout{c.run_dir}.report(), report);
    return report;
}

json rebuild_report(const PipelineConfig& c) {
    std::vector<json> per_seed;
    for (int k = 0; k < c.num_seeds; ++k) {
        const PipelineConfig sc = seed_config(c, k);
        per_seed.push_back(single_report(sc, RunLayout{sc.run_dir}));
    }
    return aggregate_reports(c, per_seed);
}

namespace {

// Reuses artifacts of an earlier run of the same configuration and computes the rest.
json ablation_seed(const PipelineConfig& c) {
    const RunLayout run{c.run_dir};
    if (fs::exists(run.config())) {
        if (read_json(run.config()) != to_json(c)) {
            throw InvalidSpec("run directory " + run.root.string() + " holds a different configuration");
        }
    } else {
        write_config(run, c);
    }
    if (!fs::exists(run.splits() / "reference.json")) run_stage("split", [&] { stage_split(c, run); });
    if (c.pretrain.enabled && c.vae.pretrained_encoder.empty() && !checkpoint_exists(run.checkpoint("encoder"))) {
        run_stage("pretrain", [&] { stage_pretrain(c, run); });
    }
    if (!fs::exists(run.metrics("baseline")) || !checkpoint_exists(run.checkpoint("baseline"))) {
        run_stage("train-supervised", [&] { stage_supervised(c, run); });
    }
    const std::string baseline_sum = file_checksum(checkpoint_binary(run.checkpoint("baseline")));
    const std::string split_sum = split_checksum(run);

    if (!fs::exists(run.filter_report(1))) run_stage("iter_1/filter", [&] { stage_filter(c, run, 1); });
    if (!checkpoint_exists(run.checkpoint("iter_1_vae"))) run_stage("iter_1/train-vae", [&] { stage_train_vae(c, run, 1); });
    if (!fs::exists(run.augmented(1) / "synth" / "manifest.json")) {
        run_stage("iter_1/generate", [&] { stage_generate(c, run, 1); });
    }

    auto arm = [&](const std::string& mode) {
        const std::string name = mixmatch_name(c, 1, mode);
        if (fs::exists(run.metrics(name)) && checkpoint_exists(run.checkpoint(name))) return read_json(run.metrics(name));
        return run_stage("ablation/" + mode, [&] { return stage_mixmatch(c, run, 1, mode, name); });
    };
    const json generated = arm("generated");
    const json raw = arm("raw-ref");
    for (const json* m : {&generated, &raw}) {
        if (c.init_from_reference && m->at("reference_checksum").get<std::string>() != baseline_sum) {
            throw Error("ablation arms did not start from the same baseline checkpoint");
        }
        if (m->at("split_checksum").get<std::string>() != split_sum) {
            throw Error("ablation arms did not use the same split");
        }
    }
    return json{{"seed", c.seed},
                {"baseline_checksum", baseline_sum},
                {"split_checksum", split_sum},
                {"baseline", read_json(run.metrics("baseline")).at("test_accuracy")},
                {"raw_ref", {{"test_accuracy", raw.at("test_accuracy")}, {"val_accuracy", raw.at("val_accuracy")}}},
                {"generated",
                 {{"test_accuracy", generated.at("test_accuracy")}, {"val_accuracy", generated.at("val_accuracy")}}}};
}

}  // namespace

json run_ablation(const PipelineConfig& c) {
    validate(c);
    if (c.num_seeds > 1) {
        const RunLayout top{c.run_dir};
        if (!fs::exists(top.config())) write_config(top, c);
    }
    std::vector<json> per_seed;
    std::vector<double> raw_test, gen_test, raw_val, gen_val, diff;
    for (int k = 0; k < c.num_seeds; ++k) {
        const json r = ablation_seed(seed_config(c, k));
        raw_test.push_back(r.at("raw_ref").at("test_accuracy").get<double>());
        gen_test.push_back(r.at("generated").at("test_accuracy").get<double>());
        raw_val.push_back(r.at("raw_ref").at("val_accuracy").get<double>());
        gen_val.push_back(r.at("generated").at("val_accuracy").get<double>());
        diff.push_back(gen_test.back() - raw_test.back());
        per_seed.push_back(r);
    }
    const json report{{"schema_version", kSchemaVersion},
                      {"kind", "ablation"},
                      {"num_seeds", c.num_seeds},
                      {"raw_ref", {{"test_accuracy", to_json(summarize(raw_test))}, {"val_accuracy", to_json(summarize(raw_val))}}},
                      {"generated", {{"test_accuracy", to_json(summarize(gen_test))}, {"val_accuracy", to_json(summarize(gen_val))}}},
                      {"test_accuracy_difference", to_json(summarize(diff))},
                      {"per_seed", per_seed}};
    write_json(RunLayout{c.run_dir}.ablation_report(), report);
    return report;
}

}  // namespace cgssl
