// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "test_support.hpp"

using grass::testing::count_lines;
using grass::testing::read_file;
using grass::testing::ScratchDir;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    int code;
    std::string out;
    std::string err;
};

Outcome grass_cli(const std::string& args, const ScratchDir& dir) {
    const auto out = dir.str("stdout.txt"), err = dir.str("stderr.txt");
    const std::string cmd = std::string(GRASS_CLI) + " " + args + " >" + out + " 2>" + err;
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, read_file(out), read_file(err)};
}

void write_json(const std::string& path, const json& j) {
    std::ofstream(path) << j.dump();
}

json small_run(const std::string& output) {
    return json{{"method", "GRASS"},
                {"total_steps", 12},
                {"eval_every", 4},
                {"grass", {{"probe_steps", 3}, {"sample_period", 3}, {"active_layers", 1}}},
                {"output_dir", output}};
}

} // namespace

TEST_CASE("run writes artifacts and flags override the config") {
    ScratchDir dir("cli_run");
    write_json(dir.str("run.json"), small_run(dir.str("out")));
    const auto r = grass_cli("run " + dir.str("run.json") + " --active-layers 2 --probe-steps 6", dir);
    REQUIRE(r.code == 0);
    const auto cfg = json::parse(read_file(dir.path() / "out" / "config.json"));
    CHECK(cfg.at("grass").at("active_layers") == 2);
    CHECK(cfg.at("grass").at("probe_steps") == 6);
    CHECK(count_lines(dir.path() / "out" / "metrics.jsonl") == 12);
    CHECK(count_lines(dir.path() / "out" / "prob_trace.jsonl") == 2);
    const auto trace = read_file(dir.path() / "out" / "prob_trace.jsonl");
    CHECK(json::parse(trace.substr(0, trace.find('\n'))).at("sampled").size() == 2);
}

TEST_CASE("exit codes") {
    ScratchDir dir("cli_codes");
    write_json(dir.str("bad.json"), json{{"model", {{"d_model", "wide"}}}});
    auto r = grass_cli("run " + dir.str("bad.json"), dir);
    CHECK(r.code == 2);
    CHECK(r.err.find("model.d_model") != std::string::npos);

    write_json(dir.str("ok.json"), small_run(dir.str("out")));
    CHECK(grass_cli("run " + dir.str("ok.json") + " --temperature 0", dir).code == 2);
    CHECK(grass_cli("run " + dir.str("ok.json") + " --method SGD", dir).code == 2);
    CHECK(grass_cli("frobnicate", dir).code == 2);

    r = grass_cli("run " + dir.str("missing.json"), dir);
    CHECK(r.code == 4);
    CHECK(grass_cli("report " + dir.str("nowhere"), dir).code == 4);

    json blowup = small_run(dir.str("fault"));
    blowup["method"] = "FFT";
    blowup["optimizer"] = {{"learning_rate", 1e300}};
    blowup["total_steps"] = 40;
    write_json(dir.str("fault.json"), blowup);
    r = grass_cli("run " + dir.str("fault.json"), dir);
    CHECK(r.code == 3);
    CHECK(fs::exists(dir.path() / "fault" / "checkpoint.bin"));
}

TEST_CASE("output root override") {
    ScratchDir dir("cli_root");
    write_json(dir.str("run.json"), small_run("relative/run"));
    const std::string cmd = "GRASS_OUTPUT_ROOT=" + dir.str("root") + " " + GRASS_CLI + " run " +
                            dir.str("run.json") + " >/dev/null 2>&1";
    REQUIRE(std::system(cmd.c_str()) == 0);
    CHECK(fs::exists(dir.path() / "root" / "relative" / "run" / "metrics.jsonl"));
}

TEST_CASE("sweep writes one row per grid point") {
    ScratchDir dir("cli_sweep");
    write_json(dir.str("base.json"), small_run(dir.str("sweep")));
    write_json(dir.str("grid.json"), json{{"probe_steps", {2, 4}}, {"seeds", {1, 2}}});
    auto r = grass_cli("sweep " + dir.str("base.json") + " --grid " + dir.str("grid.json"), dir);
    REQUIRE(r.code == 0);
    CHECK(count_lines(dir.path() / "sweep" / "sweep.csv") == 5);
    CHECK(fs::exists(dir.path() / "sweep" / "tp4_ts3_g1_s2" / "metrics.jsonl"));

    // A failing point keeps the sweep going and is reported in its row.
    r = grass_cli("sweep " + dir.str("base.json") + " --active-layers-grid 1,7", dir);
    CHECK(r.code == 1);
    const auto table = read_file(dir.path() / "sweep" / "sweep.csv");
    CHECK(table.find(",ok,") != std::string::npos);
    CHECK(table.find(",error,") != std::string::npos);
    CHECK(grass_cli("sweep " + dir.str("base.json") + " --seeds 1,x", dir).code == 2);
}

TEST_CASE("report prints a summary and writes CSVs") {
    ScratchDir dir("cli_report");
    write_json(dir.str("run.json"), small_run(dir.str("out")));
    REQUIRE(grass_cli("run " + dir.str("run.json"), dir).code == 0);
    const auto r = grass_cli("report " + dir.str("out"), dir);
    REQUIRE(r.code == 0);
    CHECK(r.out.find("overlap speedup") != std::string::npos);
    CHECK(r.out.find("policy entropy") != std::string::npos);
    CHECK(count_lines(dir.path() / "out" / "entropy.csv") == 4);
    CHECK(fs::exists(dir.path() / "out" / "report.csv"));
}

TEST_CASE("gen-dataset is deterministic") {
    ScratchDir dir("cli_gen");
    write_json(dir.str("data.json"), json{{"dataset", {{"kind", "repetition"}, {"vocab", 4}, {"period", 2}}}});
    REQUIRE(grass_cli("gen-dataset " + dir.str("data.json") + " --batches 3 --out " + dir.str("a.jsonl"), dir).code ==
            0);
    REQUIRE(grass_cli("gen-dataset " + dir.str("data.json") + " --batches 3 --out " + dir.str("b.jsonl"), dir).code ==
            0);
    CHECK(read_file(dir.path() / "a.jsonl") == read_file(dir.path() / "b.jsonl"));
    CHECK(count_lines(dir.path() / "a.jsonl") == 3);

    write_json(dir.str("corpus.json"), json{{"dataset", {{"kind", "char_corpus"}, {"source", dir.str("none.txt")}}}});
    CHECK(grass_cli("gen-dataset " + dir.str("corpus.json"), dir).code == 4);
}
