#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cgssl/datasets.hpp"
#include "cgssl/models.hpp"

namespace cgssl {

// Numerically stable softmax of one logit vector.
std::vector<double> softmax(std::span<const double> logits);

enum class ConfidenceMode {
    kTrueClass,      // probability assigned to the sample's true label (default)
    kMaxProbability  // probability of the predicted label
};

ConfidenceMode parse_confidence_mode(const std::string& name);
std::string to_string(ConfidenceMode mode);

struct ScoredSample {
    std::int64_t id = 0;
    int true_label = 0;
    int predicted_label = 0;
    double confidence = 0.0;
};

// Softmax confidence of every reference sample, in input order.
std::vector<double> true_class_confidences(ClassifierModel& model, const LabeledSet& reference,
                                           ConfidenceMode mode = ConfidenceMode::kTrueClass);
std::vector<ScoredSample> score_samples(ClassifierModel& model, const LabeledSet& reference,
                                        ConfidenceMode mode = ConfidenceMode::kTrueClass);

// Linear-interpolation quantile at position p * (n - 1) of the sorted scores.
double quantile(std::span<const double> scores, double p);

struct ThresholdStats {
    double q1 = 0.0;
    double q3 = 0.0;
    double iqr = 0.0;
    double gamma = 0.0;  // lower outlier fence q1 - 1.5 * iqr
};

ThresholdStats compute_threshold(std::span<const double> scores);

// Samples whose score is <= gamma, in input order.
LabeledSet select_low_confidence(const LabeledSet& reference, std::span<const double> scores, double gamma);

struct FilterReport {
    std::vector<ScoredSample> samples;
    ThresholdStats stats;
    std::vector<std::int64_t> selected_ids;
    ConfidenceMode mode = ConfidenceMode::kTrueClass;
    // Set when no score fell below gamma and the lowest-confidence fraction was used.
    bool fallback_used = false;
};

// Scores D_REF, computes gamma and picks D_REF_LOW. When the selection is empty,
// falls back to the ceil(fallback_fraction * n) lowest-confidence samples.
FilterReport filter_reference(ClassifierModel& model, const LabeledSet& reference,
                              ConfidenceMode mode = ConfidenceMode::kTrueClass, double fallback_fraction = 0.05);
LabeledSet selected_subset(const LabeledSet& reference, const FilterReport& report);

nlohmann::json to_json(const FilterReport& report);
FilterReport filter_report_from_json(const nlohmann::json& j);
void write_filter_report(const std::filesystem::path& path, const FilterReport& report);
FilterReport read_filter_report(const std::filesystem::path& path);

// Bar histogram of the confidence distribution with gamma marked in red.
void write_confidence_histogram(const std::filesystem::path& path, const FilterReport& report, std::size_t bins = 20);

}  // namespace cgssl
