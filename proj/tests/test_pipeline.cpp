#include <doctest.h>

#include "cgssl/error.hpp"
#include "cgssl/pipeline.hpp"
#include "helpers.hpp"

using namespace cgssl;
using namespace cgssl::testing;
using nlohmann::json;

TEST_CASE("pipeline config JSON round-trip and strict keys") {
    const auto c = tiny_config("runs/x");
    const json j = to_json(c);
    CHECK(to_json(pipeline_config_from_json(j)) == j);
    CHECK_FALSE(j.at("supervised").contains("seed"));

    json unknown = j;
    unknown["supervised"]["learning_rte"] = 0.1;
    try {
        pipeline_config_from_json(unknown);
        FAIL("expected InvalidSpec");
    } catch (const InvalidSpec& e) {
        CHECK(std::string(e.what()).find("supervised.learning_rte") != std::string::npos);
    }
    json nested_seed = j;
    nested_seed["vae"]["seed"] = 3;
    CHECK_THROWS_AS(pipeline_config_from_json(nested_seed), InvalidSpec);
    json bad_mode = j;
    bad_mode["mode"] = "both";
    CHECK_THROWS_AS(pipeline_config_from_json(bad_mode), InvalidSpec);
    json documented = j;
    documented["expected"] = {{"anything", {1, 2, 3}}};
    CHECK_NOTHROW(pipeline_config_from_json(documented));
}

TEST_CASE("summary statistics") {
    const auto s = summarize({1.0, 2.0, 3.0});
    CHECK(s.mean == 2.0);
    CHECK(s.std == 1.0);
    CHECK(s.min == 1.0);
    CHECK(s.max == 3.0);
    CHECK(s.half_range == 1.0);
    CHECK(summarize({0.5}).std == 0.0);
}

TEST_CASE("seed layout") {
    auto c = tiny_config("runs/r");
    CHECK(seed_dir(c, 0) == std::filesystem::path("runs/r"));
    c.num_seeds = 3;
    CHECK(seed_dir(c, 2) == std::filesystem::path("runs/r/seed_2"));
    const auto s = seed_config(c, 2);
    CHECK(s.seed == c.seed + 2);
    CHECK(s.num_seeds == 1);
    CHECK(s.run_dir == "runs/r/seed_2");
}

TEST_CASE("stages report missing prerequisites") {
    TempDir dir("stages");
    const auto c = tiny_config(dir.path());
    const RunLayout run{dir.path()};
    CHECK_THROWS_AS(stage_supervised(c, run), Error);
    stage_split(c, run);
    try {
        stage_filter(c, run, 1);
        FAIL("expected a missing checkpoint");
    } catch (const Error& e) {
        const std::string what = e.what();
        CHECK(what.find("baseline.bin") != std::string::npos);
        CHECK(what.find("train-supervised") != std::string::npos);
    }
}

TEST_CASE("end-to-end run is deterministic and the report can be rebuilt") {
    TempDir a("e2e_a"), b("e2e_b");
    const auto ca = tiny_config(a.path()), cb = tiny_config(b.path());
    const json ra = run_pipeline(ca);
    const json rb = run_pipeline(cb);

    auto ta = tree_bytes(a.path()), tb = tree_bytes(b.path());
    ta.erase("config.json");
    tb.erase("config.json");
    REQUIRE(ta.size() == tb.size());
    for (const auto& [name, bytes] : ta) {
        INFO(name);
        CHECK(tb.count(name) == 1);
        CHECK(bytes == tb[name]);
    }
    for (const char* f : {"splits/labeled.json", "checkpoints/baseline.bin", "history/baseline.jsonl",
                          "metrics/baseline.json", "iter_1/filter_report.json", "iter_1/augmented/synth/manifest.json",
                          "checkpoints/iter_1_mixmatch.bin", "metrics/iter_1_mixmatch.json", "report.json"}) {
        INFO(f);
        CHECK(ta.count(f) == 1);
    }

    const json rebuilt = rebuild_report(ca);
    CHECK(rebuilt == ra);
    const auto stages = ra.at("stages");
    CHECK(stages.size() == 2);

    // Ablation reuses the baseline and the generated arm.
    const auto baseline = slurp(a / "checkpoints/baseline.bin");
    const json abl = run_ablation(ca);
    CHECK(slurp(a / "checkpoints/baseline.bin") == baseline);
    CHECK(abl.contains("raw_ref"));
    CHECK(abl.contains("generated"));
    CHECK(std::filesystem::exists(a / "ablation_report.json"));
    CHECK(std::filesystem::exists(a / "metrics/ablation_raw_ref.json"));

    auto changed = ca;
    changed.K = 13;
    CHECK_THROWS_AS(run_ablation(changed), InvalidSpec);
}
