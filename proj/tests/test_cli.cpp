#include <doctest.h>

#include <cstdlib>
#include <sstream>

#include "cgssl/cli.hpp"
#include "cgssl/error.hpp"
#include "helpers.hpp"

using namespace cgssl;
using namespace cgssl::testing;
using nlohmann::json;

namespace {

struct Result {
    int code;
    std::string out, err;
};

Result run(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = cli_main(args, out, err);
    return {code, out.str(), err.str()};
}

std::string write_tiny(const TempDir& dir) {
    const auto path = dir / "tiny.json";
    std::ofstream(path) << to_json(tiny_config(dir / "run")).dump(2);
    return path.string();
}

}  // namespace

TEST_CASE("usage errors exit with 2, help with 0") {
    TempDir dir("cli_usage");
    const auto cfg = write_tiny(dir);
    CHECK(run({}).code == 2);
    CHECK(run({"frobnicate"}).code == 2);
    CHECK(run({"--help"}).code == 0);
    CHECK(run({"split", "--config", cfg, "--set", "supervised.nope=1", "--quiet"}).code == 2);
    CHECK(run({"split", "--config", cfg, "--set", "malformed", "--quiet"}).code == 2);
    CHECK(run({"split", "--config", (dir / "absent.json").string(), "--quiet"}).code != 0);
}

TEST_CASE("a stage run out of order names the missing checkpoint") {
    TempDir dir("cli_order");
    const auto cfg = write_tiny(dir);
    REQUIRE(run({"split", "--config", cfg, "--quiet"}).code == 0);
    const auto r = run({"filter", "--config", cfg, "--iteration", "1", "--quiet"});
    CHECK(r.code == 1);
    CHECK(r.err.find("baseline.bin") != std::string::npos);
    CHECK(r.err.find("train-supervised") != std::string::npos);
}

TEST_CASE("overrides are persisted verbatim") {
    TempDir dir("cli_set");
    const auto cfg = write_tiny(dir);
    REQUIRE(run({"split", "--config", cfg, "--seed", "9", "--set", "supervised.max_steps=30", "--set",
                 "mode=\"raw-ref\"", "--quiet"})
                .code == 0);
    const json saved = json::parse(slurp(dir / "run/config.json"));
    CHECK(saved.at("supervised").at("max_steps") == 30);
    CHECK(saved.at("mode") == "raw-ref");
    CHECK(saved.at("seed") == 9);

    json o = json::object();
    apply_override(o, "vae.latent_dim=7");
    CHECK(o.at("vae").at("latent_dim") == 7);
    CHECK_THROWS(apply_override(o, "vae.latent_dim.x=1"));
}

TEST_CASE("CGSSL_RUN_DIR supplies the run directory") {
    TempDir dir("cli_env");
    auto c = to_json(tiny_config("unused"));
    c.erase("run_dir");
    std::ofstream(dir / "c.json") << c.dump();
    ::setenv("CGSSL_RUN_DIR", (dir / "from_env").c_str(), 1);
    const auto r = run({"split", "--config", (dir / "c.json").string(), "--quiet"});
    ::unsetenv("CGSSL_RUN_DIR");
    CHECK(r.code == 0);
    CHECK(std::filesystem::exists(dir / "from_env/splits/labeled.json"));
}

TEST_CASE("stage-by-stage CLI run, trace, grid and read-only report") {
    TempDir dir("cli_full");
    const auto cfg = write_tiny(dir);
    for (const std::vector<std::string> step :
         {std::vector<std::string>{"split"}, {"pretrain"}, {"train-supervised"}, {"filter", "--iteration", "1"},
          {"train-vae", "--iteration", "1"}, {"generate", "--iteration", "1"},
          {"train-mixmatch", "--iteration", "1", "--trace", (dir / "trace.json").string()}}) {
        auto args = step;
        args.insert(args.end(), {"--config", cfg, "--quiet"});
        const auto r = run(args);
        INFO(step.front(), " ", r.err);
        REQUIRE(r.code == 0);
    }
    const json trace = json::parse(slurp(dir / "trace.json"));
    CHECK(trace.contains("guessed_labels"));
    CHECK(trace.at("pool_permutation").size() == trace.at("labeled_ids").size() + 2 * trace.at("unlabeled_ids").size());

    REQUIRE(run({"grid", "--config", cfg, "--iteration", "1", "--count", "4", "--quiet"}).code == 0);
    CHECK(std::filesystem::exists(dir / "run/iter_1/grids/synthetic.png"));

    const auto before = tree_bytes(dir / "run");
    const auto r = run({"report", "--config", cfg, "--quiet"});
    CHECK(r.code == 0);
    CHECK(r.out.find("baseline") != std::string::npos);
    CHECK(tree_bytes(dir / "run") == before);
}

TEST_CASE("CLI run matches the library pipeline byte for byte") {
    TempDir dir("cli_run");
    const auto cfg = write_tiny(dir);
    REQUIRE(run({"run", "--config", cfg, "--quiet"}).code == 0);
    TempDir lib("cli_lib");
    run_pipeline(tiny_config(lib.path()));
    auto a = tree_bytes(dir / "run"), b = tree_bytes(lib.path());
    a.erase("config.json");
    b.erase("config.json");
    CHECK(a == b);
    const auto before = tree_bytes(dir / "run");
    const auto r = run({"report", "--config", cfg, "--quiet"});
    CHECK(r.code == 0);
    CHECK(tree_bytes(dir / "run") == before);
}
