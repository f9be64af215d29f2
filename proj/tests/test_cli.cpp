// CLI surface tests: help output against golden files, exit codes, and a
// small end-to-end pipeline through the real binary. The binary path and
// golden directory come from the environment (set by CTest).

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

namespace fs = std::filesystem;

namespace {

std::string env_or_fail(const char* name) {
    const char* v = std::getenv(name);
    REQUIRE_MESSAGE(v != nullptr, "environment variable ", name, " must be set by ctest");
    return v;
}

struct RunResult {
    int exit_code = -1;
    std::string output;
};

RunResult run(const std::string& cmd) {
    RunResult r;
    FILE* pipe = popen((cmd + " 2>&1").c_str(), "r");
    REQUIRE(pipe != nullptr);
    std::array<char, 4096> buf{};
    while (size_t n = fread(buf.data(), 1, buf.size(), pipe)) r.output.append(buf.data(), n);
    const int status = pclose(pipe);
    r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p);
    REQUIRE_MESSAGE(in.good(), "cannot read ", p.string());
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

// the golden files normalize the invocation path
std::string normalize_usage(std::string s) {
    const std::string key = "Usage: ";
    auto pos = s.find(key);
    if (pos != std::string::npos) {
        auto end = s.find(" ", pos + key.size());
        auto stit = s.find("stit", pos);
        if (stit != std::string::npos && stit < s.find("\n", pos))
            s.replace(pos + key.size(), s.rfind("stit", end) + 4 - (pos + key.size()), "stit");
    }
    return s;
}

}  // namespace

TEST_CASE("every subcommand's --help matches its golden file") {
    const std::string bin = env_or_fail("STIT_BIN");
    const fs::path golden = env_or_fail("STIT_GOLDEN_DIR");
    const std::array<const char*, 8> subs = {"",      "synth", "ingest", "build-instructions",
                                             "train", "eval",  "ablate", "predict"};
    for (const char* sub : subs) {
        const std::string name = *sub ? sub : "root";
        auto r = run(bin + (*sub ? " " + std::string(sub) : "") + " --help");
        CHECK(r.exit_code == 0);
        CHECK_MESSAGE(normalize_usage(r.output) == read_file(golden / ("help_" + name + ".txt")),
                      "help text drifted for subcommand: ", name);
    }
}

TEST_CASE("usage errors exit 1, data errors exit 2") {
    const std::string bin = env_or_fail("STIT_BIN");
    CHECK(run(bin + " synth").exit_code == 1);                      // missing required flags
    CHECK(run(bin + " nonsense").exit_code == 1);                   // unknown subcommand
    CHECK(run(bin + " synth --config /nonexistent.json --out /tmp/x.stt").exit_code == 2);
    CHECK(run(bin + " eval --ckpt /nonexistent.stit --protocol zero-shot --out /tmp/x").exit_code ==
          2);
}

TEST_CASE("synth, train, eval and predict run end to end") {
    const std::string bin = env_or_fail("STIT_BIN");
    const std::string config = env_or_fail("STIT_SMOKE_CONFIG");
    const fs::path dir = fs::temp_directory_path() / "stit_cli_smoke";
    fs::remove_all(dir);
    fs::create_directories(dir);

    auto synth = run(bin + " synth --config " + config + " --dataset dense-a --out " +
                     (dir / "a.stt").string() + " --split-out " + (dir / "a.split.json").string());
    CHECK_MESSAGE(synth.exit_code == 0, synth.output);
    CHECK(fs::exists(dir / "a.stt"));
    CHECK(fs::exists(dir / "a.stt.manifest.json"));

    auto build = run(bin + " build-instructions --tensor " + (dir / "a.stt").string() +
                     " --split " + (dir / "a.split.json").string() + " --out " +
                     (dir / "corpus.stjsonl").string() + " --stride 96");
    CHECK_MESSAGE(build.exit_code == 0, build.output);
    CHECK(fs::exists(dir / "corpus.stjsonl"));
    CHECK(fs::exists(dir / "corpus.stjsonl.tokenizer.json"));

    auto train = run(bin + " train --config " + config + " --out " + (dir / "ckpt").string());
    CHECK_MESSAGE(train.exit_code == 0, train.output);
    CHECK(fs::exists(dir / "ckpt" / "final.stit"));
    CHECK(fs::exists(dir / "ckpt" / "manifest.json"));
    CHECK(fs::exists(dir / "ckpt" / "losses.json"));

    auto eval = run(bin + " eval --ckpt " + (dir / "ckpt" / "final.stit").string() +
                    " --protocol zero-shot --out " + (dir / "report").string());
    CHECK_MESSAGE(eval.exit_code == 0, eval.output);
    CHECK(fs::exists(dir / "report" / "report.json"));
    CHECK(fs::exists(dir / "report" / "report.csv"));
    CHECK(fs::exists(dir / "report" / "report_steps.csv"));
    CHECK(fs::exists(dir / "report" / "manifest.json"));

    // supervised protocol from the same checkpoint
    auto sup = run(bin + " eval --ckpt " + (dir / "ckpt" / "final.stit").string() +
                   " --protocol supervised --out " + (dir / "report_sup").string());
    CHECK_MESSAGE(sup.exit_code == 0, sup.output);

    // single-prompt prediction
    std::ofstream pj(dir / "prompt.json");
    pj << R"({"subject":"taxi","feature_names":["inflow","outflow"],
             "history":[[12,5],[8,12],[9,12],[15,15],[10,10],[12,11],[14,6],[9,9],[6,4],[12,6],[25,10],[20,15]],
             "p":12,
             "region":{"city":"Rivergate City","borough":"Northside","poi_categories":["Commercial"]},
             "time":{"start":"2024-01-02T09:00:00Z","interval_minutes":30}})";
    pj.close();
    auto pred = run(bin + " predict --ckpt " + (dir / "ckpt" / "final.stit").string() +
                    " --prompt-json " + (dir / "prompt.json").string());
    CHECK_MESSAGE(pred.exit_code == 0, pred.output);
    CHECK(pred.output.find("predictions") != std::string::npos);

    fs::remove_all(dir);
}

TEST_CASE("ablate trains the variant and emits the comparison table") {
    const std::string bin = env_or_fail("STIT_BIN");
    const std::string config = env_or_fail("STIT_SMOKE_CONFIG");
    const fs::path dir = fs::temp_directory_path() / "stit_cli_ablate";
    fs::remove_all(dir);
    fs::create_directories(dir);
    auto r = run(bin + " ablate --variant STC_OFF --config " + config + " --out " + dir.string());
    CHECK_MESSAGE(r.exit_code == 0, r.output);
    CHECK(fs::exists(dir / "full_report.json"));
    CHECK(fs::exists(dir / "STC_OFF_report.json"));
    CHECK(fs::exists(dir / "comparison.json"));
    CHECK(r.output.find("zero-shot comparison") != std::string::npos);
    // controlled experiment: both reports carry the same evaluated samples
    std::ifstream fj(dir / "full_report.json"), vj(dir / "STC_OFF_report.json");
    nlohmann::json full, var;
    fj >> full;
    vj >> var;
    CHECK(full.at("samples_evaluated") == var.at("samples_evaluated"));
    fs::remove_all(dir);
}
