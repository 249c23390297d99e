#include <doctest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

struct RunResult {
    int exit_code = -1;
    std::string output;
};

RunResult run(const std::string& args) {
    const std::string cmd = std::string(MOELAB_BIN) + " " + args + " 2>&1";
    std::array<char, 4096> buf{};
    RunResult result;
    FILE* pipe = popen(cmd.c_str(), "r");
    REQUIRE(pipe != nullptr);
    while (fgets(buf.data(), int(buf.size()), pipe)) result.output += buf.data();
    const int status = pclose(pipe);
    result.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return result;
}

fs::path work_dir() {
    auto dir = fs::temp_directory_path() / "moelab_cli_tests";
    fs::create_directories(dir);
    return dir;
}

std::string make_corpus(std::size_t docs_per_domain) {
    auto path = work_dir() / "corpus.jsonl";
    std::ofstream out(path);
    for (std::size_t i = 0; i < docs_per_domain; ++i) {
        out << R"({"id":"m)" << i << R"(","text":"1 + 2 = 3 and 4 * 5 = 20 while 6 - 1 = 5 so 7 + 7 = 14 then 9 / 3 = 3 ok)"
            << i << R"(","domain":"math"})" << "\n";
        out << R"({"id":"p)" << i
            << R"(","text":"the quick brown fox jumps over the lazy dog near the quiet river bank today)"
            << i << R"(","domain":"prose"})" << "\n";
    }
    return path.string();
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("invoking without a subcommand is a usage error") {
    CHECK(run("").exit_code == 2);
    CHECK(run("frobnicate").exit_code == 2);
    CHECK(run("batch").exit_code == 2);  // missing required --corpus/--out
}

TEST_CASE("missing corpus file maps to the data error exit code") {
    auto out = (work_dir() / "nope.bin").string();
    RunResult r = run("batch --corpus /does/not/exist.jsonl --out " + out);
    CHECK(r.exit_code == 3);
}

TEST_CASE("batch writes instances plus provenance and is deterministic") {
    const std::string corpus = make_corpus(6);
    auto out1 = (work_dir() / "sim1.bin").string();
    auto out2 = (work_dir() / "sim2.bin").string();
    RunResult r1 = run("batch --corpus " + corpus + " --out " + out1 + " --mode sim --seq-len 64");
    CHECK(r1.exit_code == 0);
    CHECK(r1.output.find("instances:") != std::string::npos);
    CHECK(r1.output.find("mean_adjacent_cosine:") != std::string::npos);
    CHECK(fs::exists(out1));
    CHECK(fs::exists(out1 + ".prov.jsonl"));

    RunResult r2 = run("batch --corpus " + corpus + " --out " + out2 + " --mode sim --seq-len 64");
    CHECK(r2.exit_code == 0);
    CHECK(read_file(out1) == read_file(out2));  // byte-identical

    auto rnd = (work_dir() / "rand.bin").string();
    RunResult r3 =
        run("batch --corpus " + corpus + " --out " + rnd + " --mode rand --seq-len 64 --seed 9");
    CHECK(r3.exit_code == 0);
    CHECK(fs::exists(rnd));
}

TEST_CASE("train, eval, generate, and analyze run end to end") {
    const std::string corpus = make_corpus(6);
    auto data = (work_dir() / "train.bin").string();
    REQUIRE(run("batch --corpus " + corpus + " --out " + data + " --mode sim --seq-len 32").exit_code == 0);

    auto run_dir = (work_dir() / "run1").string();
    const std::string overrides =
        " --set model.context_length=32 --set model.segment_length=8"
        " --set model.num_experts=2 --set model.num_layers=1 --set model.model_dim=16"
        " --set model.ffn_dim=16 --set model.num_heads=2"
        " --set train.total_steps=4 --set train.dense_warmup_fraction=0.5"
        " --set train.batch_size_tokens=32 --set train.base_lr=0.001";
    RunResult tr = run("train --data " + data + " --out " + run_dir + overrides + " --trace");
    CHECK(tr.exit_code == 0);
    CHECK(tr.output.find("final_loss:") != std::string::npos);
    CHECK(fs::exists(run_dir + "/metrics.jsonl"));
    CHECK(fs::exists(run_dir + "/trace.jsonl"));
    CHECK(fs::exists(run_dir + "/effective_config.json"));
    CHECK(fs::exists(run_dir + "/checkpoint_final.bin"));

    const std::string ckpt = run_dir + "/checkpoint_final.bin";
    RunResult ev = run("eval --ckpt " + ckpt + " --data " + data + " --group-by domain");
    CHECK(ev.exit_code == 0);
    CHECK(ev.output.find("perplexity") != std::string::npos);

    RunResult gen = run("generate --ckpt " + ckpt + " --prompt \"1 + 2\" --max-tokens 8");
    CHECK(gen.exit_code == 0);
    RunResult gen2 = run("generate --ckpt " + ckpt + " --prompt \"1 + 2\" --max-tokens 8");
    CHECK(gen.output == gen2.output);  // greedy decoding is deterministic

    auto an_dir = (work_dir() / "analysis").string();
    RunResult fl = run("analyze --report flops --ckpt " + ckpt + " --out " + an_dir);
    CHECK(fl.exit_code == 0);
    // E=2, T=8 -> exactly 1/4 = 25% overhead.
    CHECK(fl.output.find("1/4") != std::string::npos);
    CHECK(fs::exists(an_dir + "/flops.csv"));

    RunResult ut = run("analyze --report utilization --ckpt " + ckpt + " --trace " + run_dir +
                       "/trace.jsonl --out " + an_dir + " --window 2");
    CHECK(ut.exit_code == 0);
    CHECK(fs::exists(an_dir + "/utilization.csv"));

    RunResult sp = run("analyze --report specialization --ckpt " + ckpt + " --data " + data +
                       " --out " + an_dir);
    CHECK(sp.exit_code == 0);
    CHECK(fs::exists(an_dir + "/specialization.csv"));

    RunResult lg = run("analyze --report lossgap --dense-metrics " + run_dir +
                       "/metrics.jsonl --moe-metrics " + run_dir + "/metrics.jsonl --out " +
                       an_dir);
    CHECK(lg.exit_code == 0);
    CHECK(fs::exists(an_dir + "/lossgap.csv"));
}

TEST_CASE("bad override values are usage errors") {
    const std::string corpus = make_corpus(2);
    auto data = (work_dir() / "tiny.bin").string();
    REQUIRE(run("batch --corpus " + corpus + " --out " + data + " --mode sim --seq-len 32").exit_code == 0);
    RunResult r = run("train --data " + data + " --out " + (work_dir() / "x").string() +
                      " --set model.num_heads=0");
    CHECK(r.exit_code == 2);
}
