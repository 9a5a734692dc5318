#include "cgssl/confidence.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <spdlog/spdlog.h>

#include "cgssl/error.hpp"
#include "cgssl/image_io.hpp"
#include "cgssl/losses.hpp"

namespace cgssl {

using nlohmann::json;

std::vector<double> softmax(std::span<const double> logits) {
    if (logits.empty()) throw InvalidInput("softmax of an empty vector");
    for (const double z : logits) {
        if (!std::isfinite(z)) throw InvalidInput("softmax input contains a non-finite logit");
    }
    const double m = *std::max_element(logits.begin(), logits.end());
    std::vector<double> p(logits.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        p[i] = std::exp(logits[i] - m);
        sum += p[i];
    }
    for (auto& v : p) v /= sum;
    return p;
}

ConfidenceMode parse_confidence_mode(const std::string& name) {
    if (name == "true_class") return ConfidenceMode::kTrueClass;
    if (name == "max_probability") return ConfidenceMode::kMaxProbability;
    throw InvalidSpec("unknown confidence mode '" + name + "'");
}

std::string to_string(ConfidenceMode mode) {
    return mode == ConfidenceMode::kTrueClass ? "true_class" : "max_probability";
}

std::vector<ScoredSample> score_samples(ClassifierModel& model, const LabeledSet& reference, ConfidenceMode mode) {
    if (reference.empty()) throw InvalidInput("reference set is empty");
    std::vector<ScoredSample> out;
    out.reserve(reference.size());
    constexpr std::size_t kBatch = 256;
    for (std::size_t begin = 0; begin < reference.size(); begin += kBatch) {
        const std::size_t end = std::min(reference.size(), begin + kBatch);
        std::vector<std::size_t> idx(end - begin);
        std::iota(idx.begin(), idx.end(), begin);
        const Tensor logits = forward_logits(model, to_batch(reference.samples, idx));
        for (std::size_t r = 0; r < idx.size(); ++r) {
            const auto p = softmax(logits.row(r));
            const int predicted = static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
            const int label = reference.labels[idx[r]];
            const double conf = mode == ConfidenceMode::kTrueClass ? p[static_cast<std::size_t>(label)]
                                                                   : p[static_cast<std::size_t>(predicted)];
            out.push_back({reference.samples[idx[r]].id, label, predicted, conf});
        }
    }
    return out;
}

std::vector<double> true_class_confidences(ClassifierModel& model, const LabeledSet& reference, ConfidenceMode mode) {
    const auto scored = score_samples(model, reference, mode);
    std::vector<double> out;
    out.reserve(scored.size());
    for (const auto& s : scored) out.push_back(s.confidence);
    return out;
}

double quantile(std::span<const double> scores, double p) {
    if (scores.empty()) throw InvalidInput("quantile of an empty sample");
    std::vector<double> sorted(scores.begin(), scores.end());
    std::sort(sorted.begin(), sorted.end());
    const double pos = p * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

ThresholdStats compute_threshold(std::span<const double> scores) {
    if (scores.empty()) throw InvalidInput("cannot compute a threshold from no scores");
    ThresholdStats s;
    s.q1 = quantile(scores, 0.25);
    s.q3 = quantile(scores, 0.75);
    s.iqr = s.q3 - s.q1;
    s.gamma = s.q1 - 1.5 * s.iqr;
    return s;
}

LabeledSet select_low_confidence(const LabeledSet& reference, std::span<const double> scores, double gamma) {
    if (scores.size() != reference.size()) {
        throw InvalidInput("got " + std::to_string(scores.size()) + " scores for " + std::to_string(reference.size()) +
                           " reference samples");
    }
    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (scores[i] <= gamma) keep.push_back(i);
    }
    return subset(reference, keep);
}

FilterReport filter_reference(ClassifierModel& model, const LabeledSet& reference, ConfidenceMode mode,
                              double fallback_fraction) {
    FilterReport report;
    report.mode = mode;
    report.samples = score_samples(model, reference, mode);
    std::vector<double> scores;
    for (const auto& s : report.samples) scores.push_back(s.confidence);
    report.stats = compute_threshold(scores);
    for (const auto& s : report.samples) {
        if (s.confidence <= report.stats.gamma) report.selected_ids.push_back(s.id);
    }
    if (report.selected_ids.empty()) {
        report.fallback_used = true;
        const auto count = static_cast<std::size_t>(
            std::max(1.0, std::ceil(fallback_fraction * static_cast<double>(scores.size()))));
        std::vector<std::size_t> order(scores.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });
        order.resize(std::min(count, order.size()));
        std::sort(order.begin(), order.end());
        for (const auto i : order) report.selected_ids.push_back(report.samples[i].id);
        spdlog::warn("no reference sample scored at or below gamma = {:.6f}; falling back to the {} lowest-confidence samples",
                     report.stats.gamma, report.selected_ids.size());
    }
    return report;
}

LabeledSet selected_subset(const LabeledSet& reference, const FilterReport& report) {
    std::vector<std::size_t> keep;
    std::size_t cursor = 0;
    for (std::size_t i = 0; i < reference.size() && cursor < report.selected_ids.size(); ++i) {
        if (reference.samples[i].id == report.selected_ids[cursor]) {
            keep.push_back(i);
            ++cursor;
        }
    }
    if (cursor != report.selected_ids.size()) throw InvalidInput("filter report does not match the reference set");
    return subset(reference, keep);
}

json to_json(const FilterReport& report) {
    json samples = json::array();
    for (const auto& s : report.samples) {
        samples.push_back({{"id", s.id},
                           {"true_label", s.true_label},
                           {"predicted_label", s.predicted_label},
                           {"confidence", s.confidence}});
    }
    return json{{"schema_version", 1},
                {"confidence_mode", to_string(report.mode)},
                {"q1", report.stats.q1},
                {"q3", report.stats.q3},
                {"iqr", report.stats.iqr},
                {"gamma", report.stats.gamma},
                {"fallback_used", report.fallback_used},
                {"selected_ids", report.selected_ids},
                {"samples", samples}};
}

FilterReport filter_report_from_json(const json& j) {
    FilterReport r;
    r.mode = parse_confidence_mode(j.value("confidence_mode", "true_class"));
    r.stats.q1 = j.at("q1").get<double>();
    r.stats.q3 = j.at("q3").get<double>();
    r.stats.iqr = j.at("iqr").get<double>();
    r.stats.gamma = j.at("gamma").get<double>();
    r.fallback_used = j.value("fallback_used", false);
    r.selected_ids = j.at("selected_ids").get<std::vector<std::int64_t>>();
    for (const auto& s : j.at("samples")) {
        r.samples.push_back({s.at("id").get<std::int64_t>(), s.at("true_label").get<int>(),
                             s.at("predicted_label").get<int>(), s.at("confidence").get<double>()});
    }
    return r;
}

void write_filter_report(const std::filesystem::path& path, const FilterReport& report) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    out << to_json(report).dump(2) << '\n';
}

FilterReport read_filter_report(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw MissingArtifact("missing filter report " + path.string());
    return filter_report_from_json(json::parse(in));
}

void write_confidence_histogram(const std::filesystem::path& path, const FilterReport& report, std::size_t bins) {
    if (bins == 0) throw InvalidInput("histogram needs at least one bin");
    constexpr std::size_t kBarWidth = 12, kHeight = 120, kMargin = 6;
    std::vector<std::size_t> counts(bins, 0);
    for (const auto& s : report.samples) {
        const auto b = std::min(bins - 1, static_cast<std::size_t>(s.confidence * static_cast<double>(bins)));
        ++counts[b];
    }
    const std::size_t peak = std::max<std::size_t>(1, *std::max_element(counts.begin(), counts.end()));

    ImageSample img;
    img.shape = ImageShape{kHeight + 2 * kMargin, bins * kBarWidth + 2 * kMargin, 3};
    img.pixels.assign(img.shape.height * img.shape.width * 3, 1.0f);
    for (std::size_t b = 0; b < bins; ++b) {
        const std::size_t bar = counts[b] * kHeight / peak;
        for (std::size_t y = kMargin + kHeight - bar; y < kMargin + kHeight; ++y) {
            for (std::size_t x = kMargin + b * kBarWidth + 1; x < kMargin + (b + 1) * kBarWidth - 1; ++x) {
                for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = 0.35f;
            }
        }
    }
    for (std::size_t x = kMargin; x < kMargin + bins * kBarWidth; ++x) {
        for (std::size_t c = 0; c < 3; ++c) img.at(kMargin + kHeight, x, c) = 0.0f;
    }
    const double g = std::clamp(report.stats.gamma, 0.0, 1.0);
    const auto gx = std::min(img.shape.width - 1, kMargin + static_cast<std::size_t>(g * static_cast<double>(bins * kBarWidth)));
    for (std::size_t y = 0; y < img.shape.height; ++y) {
        img.at(y, gx, 0) = 0.9f;
        img.at(y, gx, 1) = 0.1f;
        img.at(y, gx, 2) = 0.1f;
    }
    write_png(path, img);
}

}  // namespace cgssl
