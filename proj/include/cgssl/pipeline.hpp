#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cgssl/confidence.hpp"
#include "cgssl/datasets.hpp"
#include "cgssl/mixmatch.hpp"
#include "cgssl/models.hpp"
#include "cgssl/supervised.hpp"
#include "cgssl/vae_augment.hpp"

namespace cgssl {

struct DatasetConfig {
    std::string name = "toy";  // "toy", "cifar10", "cifar100" or "stl10"
    std::string root;          // benchmark directory
    std::size_t num_classes = 4;
    std::size_t train_per_class = 100;
    std::size_t test_per_class = 100;
    std::size_t image_size = 16;
    ToyOptions toy;
};

// Auxiliary classification task whose trunk initializes the VAE encoder.
struct PretrainConfig {
    bool enabled = true;
    std::string dataset = "toy";
    std::string root;
    std::size_t per_class = 100;  // toy only
    TrainConfig train;
};

// Nested `seed` fields are not part of the schema: every stage seed is derived
// from the top-level seed.
struct PipelineConfig {
    DatasetConfig dataset;
    SplitSpec split;
    std::string backbone;  // named preset ("wrn-50", "wrn-28-2", ...); overrides `model` when set
    ArchSpec model;
    TrainConfig supervised;
    PretrainConfig pretrain;
    VAETrainConfig vae;
    MixMatchConfig mixmatch;
    // MixMatch starts from the iteration's reference model rather than from scratch.
    bool init_from_reference = true;
    std::size_t K = 5000;
    int num_iterations = 2;
    int num_seeds = 3;
    std::string mode = "generated";  // or "raw-ref"
    std::string confidence_mode = "true_class";
    double fallback_fraction = 0.05;
    std::string run_dir = "runs/default";
    std::uint64_t seed = 0;
    nlohmann::json expected;  // free-form documentation, not interpreted
};

void validate(const PipelineConfig& config);
nlohmann::json to_json(const PipelineConfig& config);
PipelineConfig pipeline_config_from_json(const nlohmann::json& j);

// Throws InvalidSpec naming the first key of `given` that `schema` lacks.
void check_known_keys(const nlohmann::json& given, const nlohmann::json& schema, const std::string& prefix = "");

// Resolved backbone for the configured dataset.
ArchSpec resolve_arch(const PipelineConfig& config);
// Backbone of the VAE encoder trunk: vae.encoder_backbone, else the classifier's.
ArchSpec encoder_arch(const PipelineConfig& config);

struct DataBundle {
    LabeledSet train;  // input data, split into D_L / D_V / D_REF
    LabeledSet test;
};

DataBundle load_data(const PipelineConfig& config);

// Artifact paths inside one run directory.
struct RunLayout {
    std::filesystem::path root;

    std::filesystem::path config() const { return root / "config.json"; }
    std::filesystem::path splits() const { return root / "splits"; }
    std::filesystem::path checkpoint(const std::string& name) const { return root / "checkpoints" / name; }
    std::filesystem::path history(const std::string& name) const { return root / "history" / (name + ".jsonl"); }
    std::filesystem::path metrics(const std::string& name) const { return root / "metrics" / (name + ".json"); }
    std::filesystem::path iteration(int n) const { return root / ("iter_" + std::to_string(n)); }
    std::filesystem::path filter_report(int n) const { return iteration(n) / "filter_report.json"; }
    std::filesystem::path augmented(int n) const { return iteration(n) / "augmented"; }
    std::filesystem::path report() const { return root / "report.json"; }
    std::filesystem::path ablation_report() const { return root / "ablation_report.json"; }
    // Reference model scored by iteration n.
    std::filesystem::path reference_checkpoint(int n) const;
};

// Individual stages over one run directory. Each reads its prerequisites from
// disk and raises MissingArtifact when one is absent.
void write_config(const RunLayout& run, const PipelineConfig& config);
Splits stage_split(const PipelineConfig& config, const RunLayout& run);
Splits load_splits(const RunLayout& run, const LabeledSet& data);
void stage_pretrain(const PipelineConfig& config, const RunLayout& run);
EvalResult stage_supervised(const PipelineConfig& config, const RunLayout& run);
FilterReport stage_filter(const PipelineConfig& config, const RunLayout& run, int iteration);
void stage_train_vae(const PipelineConfig& config, const RunLayout& run, int iteration);
AugmentedSets stage_generate(const PipelineConfig& config, const RunLayout& run, int iteration);
// mode "generated": D_L + D_Rec labeled, D_Synth unlabeled; "raw-ref": D_L labeled, D_REF unlabeled.
nlohmann::json stage_mixmatch(const PipelineConfig& config, const RunLayout& run, int iteration, const std::string& mode,
                              const std::string& name);

// Artifact name of iteration n's MixMatch model trained in `mode`: iter_<n>_mixmatch
// for the configured mode, ablation_<mode> for the other one.
std::string mixmatch_name(const PipelineConfig& config, int iteration, const std::string& mode);

// One batch transform on the first batch_size labeled and unlabeled samples,
// starting from the model MixMatch would start from.
nlohmann::json mixmatch_trace(const PipelineConfig& config, const RunLayout& run, int iteration, const std::string& mode);

struct PipelineState {
    int iteration = 0;
    std::filesystem::path reference_checkpoint;
    std::filesystem::path filter_report;
    std::filesystem::path augmented;
    nlohmann::json metrics = nlohmann::json::array();
};

// Filter, VAE, generation and MixMatch for iteration state.iteration + 1.
PipelineState run_iteration(const PipelineState& state, const PipelineConfig& config, const RunLayout& run);

// Per-seed configuration: seed = base + k, single seed, own run directory.
PipelineConfig seed_config(const PipelineConfig& config, int k);

nlohmann::json run_single(const PipelineConfig& config);
// Runs every seed and writes the aggregated report.json; returns it.
nlohmann::json run_pipeline(const PipelineConfig& config);
nlohmann::json run_ablation(const PipelineConfig& config);

// Rebuilds a seed's report from persisted metrics without recomputation.
nlohmann::json single_report(const PipelineConfig& config, const RunLayout& run);
nlohmann::json aggregate_reports(const PipelineConfig& config, const std::vector<nlohmann::json>& per_seed);
// Aggregated report of every seed under config.run_dir, read from disk only.
nlohmann::json rebuild_report(const PipelineConfig& config);
// Directory of seed k under the run directory (the run directory itself for one seed).
std::filesystem::path seed_dir(const PipelineConfig& config, int k);

struct SummaryStats {
    double mean = 0.0;
    double std = 0.0;  // sample standard deviation; 0 for one value
    double min = 0.0;
    double max = 0.0;
    double half_range = 0.0;
    std::vector<double> values;
};

SummaryStats summarize(const std::vector<double>& values);
nlohmann::json to_json(const SummaryStats& s);

// Hex FNV-1a digest of a file's bytes.
std::string file_checksum(const std::filesystem::path& path);

}  // namespace cgssl
