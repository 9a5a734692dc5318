#include "cgssl/cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "cgssl/error.hpp"
#include "cgssl/image_io.hpp"
#include "cgssl/pipeline.hpp"

namespace cgssl {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct UsageError : Error {
    using Error::Error;
};

struct Options {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string run_dir;
    std::vector<std::string> overrides;
    int iteration = 1;
    std::string mode;
    std::string trace_path;
    std::string out_dir;
    std::size_t grid_count = 16;
    bool quiet = false;
};

json read_json_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open config file " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw UsageError("config file " + path.string() + " is not valid JSON: " + e.what());
    }
}

void write_json_file(const fs::path& path, const json& doc) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    out << doc.dump(2) << '\n';
}

// Order: --config file (or the run directory's config.json), --set overrides,
// then --seed and --run-dir. CGSSL_RUN_DIR fills in an unset run directory.
PipelineConfig resolve_config(const Options& o) {
    std::string run_dir = o.run_dir;
    if (run_dir.empty()) {
        if (const char* env = std::getenv("CGSSL_RUN_DIR"); env && *env) run_dir = env;
    }
    json doc = json::object();
    bool has_run_dir = false;
    if (!o.config_path.empty()) {
        doc = read_json_file(o.config_path);
        has_run_dir = doc.is_object() && doc.contains("run_dir");
    } else if (!run_dir.empty() && fs::exists(fs::path(run_dir) / "config.json")) {
        doc = read_json_file(fs::path(run_dir) / "config.json");
        has_run_dir = true;
    }
    for (const auto& a : o.overrides) {
        apply_override(doc, a);
        if (a.rfind("run_dir=", 0) == 0) has_run_dir = true;
    }
    if (o.seed) doc["seed"] = *o.seed;
    if (!o.run_dir.empty()) {
        doc["run_dir"] = o.run_dir;
    } else if (!has_run_dir && !run_dir.empty()) {
        doc["run_dir"] = run_dir;
    }
    try {
        return pipeline_config_from_json(doc);
    } catch (const InvalidSpec& e) {
        throw UsageError(e.what());
    }
}

std::string fmt_pct(double v) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(2) << 100.0 * v;
    return s.str();
}

void print_stats_row(std::ostream& out, const std::string& label, const json& stats) {
    out << std::left << std::setw(22) << label << std::right << std::setw(8) << fmt_pct(stats.at("mean").get<double>())
        << std::setw(8) << fmt_pct(stats.at("std").get<double>()) << std::setw(8)
        << fmt_pct(stats.at("half_range").get<double>()) << std::setw(8) << fmt_pct(stats.at("min").get<double>())
        << std::setw(8) << fmt_pct(stats.at("max").get<double>()) << '\n';
}

void print_header(std::ostream& out, const std::string& title) {
    out << std::left << std::setw(22) << title << std::right << std::setw(8) << "mean" << std::setw(8) << "std"
        << std::setw(8) << "+-rng" << std::setw(8) << "min" << std::setw(8) << "max" << '\n';
}

bool same_numbers(const json& a, const json& b) {
    if (a.is_number() && b.is_number()) return std::abs(a.get<double>() - b.get<double>()) <= 1e-12;
    if (a.type() != b.type()) return false;
    if (a.is_object()) {
        if (a.size() != b.size()) return false;
        for (const auto& [k, v] : a.items()) {
            if (!b.contains(k) || !same_numbers(v, b.at(k))) return false;
        }
        return true;
    }
    if (a.is_array()) {
        if (a.size() != b.size()) return false;
        for (std::size_t i = 0; i < a.size(); ++i) {
            if (!same_numbers(a[i], b[i])) return false;
        }
        return true;
    }
    return a == b;
}

int cmd_report(const PipelineConfig& c, std::ostream& out) {
    const RunLayout run{c.run_dir};
    bool printed = false;
    if (fs::exists(run.report()) || fs::exists(run.metrics("baseline")) || fs::exists(seed_dir(c, 0) / "metrics")) {
        const json rebuilt = rebuild_report(c);
        out << "accuracy (%) over " << rebuilt.at("num_seeds").get<std::size_t>() << " seed(s), mode " << c.mode
            << ", test set\n";
        print_header(out, "stage");
        for (const auto& s : rebuilt.at("stages")) {
            const int n = s.at("iteration").get<int>();
            print_stats_row(out, n == 0 ? "baseline" : "mixmatch iter " + std::to_string(n), s.at("test_accuracy"));
        }
        if (fs::exists(run.report())) {
            std::ifstream in(run.report());
            const json stored = json::parse(in);
            if (!same_numbers(stored.at("stages"), rebuilt.at("stages"))) {
                throw Error("report.json disagrees with the persisted metrics in " + run.root.string());
            }
            out << "matches " << run.report().string() << '\n';
        }
        printed = true;
    }
    if (fs::exists(run.ablation_report())) {
        std::ifstream in(run.ablation_report());
        const json ab = json::parse(in);
        out << (printed ? "\n" : "") << "ablation, iteration 1, test accuracy (%)\n";
        print_header(out, "arm");
        print_stats_row(out, "D_L + D_REF", ab.at("raw_ref").at("test_accuracy"));
        print_stats_row(out, "D_L + D_Rec + D_Synth", ab.at("generated").at("test_accuracy"));
        print_stats_row(out, "difference", ab.at("test_accuracy_difference"));
        printed = true;
    }
    if (!printed) throw MissingArtifact("no metrics or reports under " + run.root.string());
    return 0;
}

void cmd_grid(const PipelineConfig& c, int n, const fs::path& out_dir, std::size_t count, std::ostream& out) {
    const RunLayout run{c.run_dir};
    const AugmentedSets aug = import_augmented(run.augmented(n));
    const DataBundle data = load_data(c);
    const Splits s = load_splits(run, data.train);
    std::map<std::int64_t, const ImageSample*> by_id;
    for (const auto& img : s.reference.samples) by_id.emplace(img.id, &img);

    const fs::path dir = out_dir.empty() ? run.iteration(n) / "grids" : out_dir;
    fs::create_directories(dir);
    if (!aug.d_rec.empty()) {
        std::vector<ImageSample> seeds, pairs;
        for (std::size_t i = 0; i < std::min(count, aug.d_rec.size()); ++i) {
            const auto it = by_id.find(aug.rec_seed_ids[i]);
            if (it == by_id.end()) throw IngestionError("reconstruction seed " + std::to_string(aug.rec_seed_ids[i]) + " not in D_REF");
            seeds.push_back(*it->second);
            pairs.push_back(*it->second);
            pairs.push_back(aug.d_rec.samples[i]);
        }
        write_png(dir / "seeds.png", make_grid(seeds, 8));
        write_png(dir / "reconstructions.png", make_grid(pairs, 8));
        out << "wrote " << (dir / "seeds.png").string() << " and " << (dir / "reconstructions.png").string()
            << " (seed | reconstruction pairs)\n";
    }
    if (!aug.d_synth.empty()) {
        const std::span<const ImageSample> synth(aug.d_synth.samples.data(), std::min(count * 2, aug.d_synth.size()));
        write_png(dir / "synthetic.png", make_grid(synth, 8));
        out << "wrote " << (dir / "synthetic.png").string() << '\n';
    }
}

int dispatch(const std::string& cmd, const Options& o, std::ostream& out) {
    const PipelineConfig c = resolve_config(o);
    const RunLayout run{c.run_dir};
    const int n = o.iteration;
    if (n < 1) throw UsageError("--iteration must be at least 1");
    const std::string mode = o.mode.empty() ? c.mode : o.mode;
    if (mode != "generated" && mode != "raw-ref") throw UsageError("--mode must be 'generated' or 'raw-ref'");

    if (cmd == "report") return cmd_report(c, out);
    if (cmd == "grid") {
        cmd_grid(c, n, o.out_dir, o.grid_count, out);
        return 0;
    }
    if (cmd == "run") {
        const json report = run_pipeline(c);
        (void)report;
        return cmd_report(c, out);
    }
    if (cmd == "ablation") {
        run_ablation(c);
        out << "wrote " << run.ablation_report().string() << '\n';
        return 0;
    }
    if (cmd == "split") {
        write_config(run, c);
        const Splits s = stage_split(c, run);
        out << "D_L " << s.labeled.size() << ", D_V " << s.validation.size() << ", D_REF " << s.reference.size() << '\n';
        return 0;
    }
    if (cmd == "pretrain") {
        stage_pretrain(c, run);
        out << "wrote " << checkpoint_binary(run.checkpoint("encoder")).string() << '\n';
        return 0;
    }
    if (cmd == "train-supervised") {
        const EvalResult r = stage_supervised(c, run);
        out << "baseline test accuracy " << fmt_pct(r.accuracy) << "%\n";
        return 0;
    }
    if (cmd == "filter") {
        const FilterReport r = stage_filter(c, run, n);
        out << "gamma " << r.stats.gamma << ", selected " << r.selected_ids.size() << " of " << r.samples.size()
            << (r.fallback_used ? " (fallback)" : "") << '\n';
        return 0;
    }
    if (cmd == "train-vae") {
        stage_train_vae(c, run, n);
        out << "wrote " << checkpoint_binary(run.checkpoint("iter_" + std::to_string(n) + "_vae")).string() << '\n';
        return 0;
    }
    if (cmd == "generate") {
        const AugmentedSets a = stage_generate(c, run, n);
        out << "D_Rec " << a.d_rec.size() << ", D_Synth " << a.d_synth.size() << '\n';
        return 0;
    }
    if (cmd == "train-mixmatch") {
        if (!o.trace_path.empty()) {
            write_json_file(o.trace_path, mixmatch_trace(c, run, n, mode));
            out << "wrote " << o.trace_path << '\n';
        }
        const json m = stage_mixmatch(c, run, n, mode, mixmatch_name(c, n, mode));
        out << m.at("name").get<std::string>() << " test accuracy " << fmt_pct(m.at("test_accuracy").get<double>())
            << "%\n";
        return 0;
    }
    throw UsageError("unknown subcommand " + cmd);
}

}  // namespace

void apply_override(json& config, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw UsageError("override '" + assignment + "' is not key=value");
    const std::string key = assignment.substr(0, eq);
    const std::string text = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(text);
    } catch (const json::exception&) {
        value = text;
    }
    if (!config.is_object()) throw UsageError("configuration must be a JSON object");
    json* node = &config;
    std::size_t start = 0;
    while (true) {
        const auto dot = key.find('.', start);
        const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (part.empty()) throw UsageError("override key '" + key + "' is malformed");
        if (dot == std::string::npos) {
            (*node)[part] = value;
            break;
        }
        json& child = (*node)[part];
        if (child.is_null()) child = json::object();
        if (!child.is_object()) throw UsageError("override key '" + key + "' descends into a non-object");
        node = &child;
        start = dot + 1;
    }
    // Reject unknown keys right away so the message names the flag.
    try {
        check_known_keys(config, to_json(PipelineConfig{}));
    } catch (const InvalidSpec& e) {
        throw UsageError(std::string(e.what()) + " in --set " + assignment);
    }
}

int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Confidence-guided augmentation for semi-supervised learning"};
    app.require_subcommand(1, 1);
    app.fallthrough();
    Options o;
    std::uint64_t seed_value = 0;
    auto* seed_opt = app.add_option("--seed", seed_value, "Base seed; every stage seed derives from it");
    app.add_option("--config", o.config_path, "JSON configuration file");
    app.add_option("--run-dir", o.run_dir, "Run directory (default: $CGSSL_RUN_DIR or the config's run_dir)");
    app.add_option("--set", o.overrides, "Override a configuration key: dotted.key=value")->take_all();
    app.add_flag("--quiet", o.quiet, "Only log warnings and errors");

    const std::vector<std::pair<std::string, std::string>> commands{
        {"split", "Split the input data into D_L, D_V and D_REF"},
        {"pretrain", "Pretrain the encoder trunk on the auxiliary task"},
        {"train-supervised", "Train the supervised baseline on D_L"},
        {"filter", "Score D_REF with the reference model and select D_REF_LOW"},
        {"train-vae", "Train the VAE on D_REF_LOW padded with D_L"},
        {"generate", "Generate D_Rec and D_Synth"},
        {"train-mixmatch", "Train MixMatch on the augmented data"},
        {"run", "Run the full pipeline over every seed"},
        {"ablation", "Compare MixMatch on D_L + D_REF against D_L + D_Rec + D_Synth"},
        {"report", "Print the accuracy table of a finished run (read-only)"},
        {"grid", "Write seed, reconstruction and synthetic image grids"}};
    for (const auto& [name, help] : commands) {
        auto* sub = app.add_subcommand(name, help);
        if (name == "filter" || name == "train-vae" || name == "generate" || name == "train-mixmatch" || name == "grid") {
            sub->add_option("--iteration", o.iteration, "Iteration number (1-based)");
        }
        if (name == "train-mixmatch") {
            sub->add_option("--mode", o.mode, "generated or raw-ref (default: config mode)");
            sub->add_option("--trace", o.trace_path, "Write one worked MixMatch batch transform as JSON");
        }
        if (name == "grid") {
            sub->add_option("--out", o.out_dir, "Output directory (default: iter_<n>/grids)");
            sub->add_option("--count", o.grid_count, "Number of reconstruction pairs");
        }
    }

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "usage error: " << e.what() << "\n" << "run with --help for usage\n";
        return 2;
    }
    if (*seed_opt) o.seed = seed_value;

    auto logger = spdlog::get("cgssl");
    if (!logger) logger = spdlog::stderr_color_mt("cgssl");
    spdlog::set_default_logger(logger);
    spdlog::set_level(o.quiet ? spdlog::level::warn : spdlog::level::info);

    const std::string cmd = app.get_subcommands().front()->get_name();
    try {
        return dispatch(cmd, o, out);
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return 1;
    }
}

int cli_main(int argc, char** argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return cli_main(args, std::cout, std::cerr);
}

}  // namespace cgssl
