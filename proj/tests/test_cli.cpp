#include "doctest.h"

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include <sys/wait.h>
#include <unistd.h>

#include "dba/rng.hpp"
#include "dba/tensor.hpp"

#ifndef DBA_CLI_PATH
#define DBA_CLI_PATH "dba"
#endif

namespace {

struct RunResult {
    int exit_code = -1;
    std::string output;
};

RunResult run_cli(const std::string& args) {
    const std::string cmd = std::string(DBA_CLI_PATH) + " " + args + " 2>&1";
    RunResult result;
    FILE* pipe = popen(cmd.c_str(), "r");
    REQUIRE(pipe != nullptr);
    std::array<char, 512> buf;
    while (fgets(buf.data(), buf.size(), pipe)) result.output += buf.data();
    const int status = pclose(pipe);
    result.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return result;
}

std::string slurp(const std::string& path) {
    std::ifstream is(path);
    return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

struct TempDir {
    std::filesystem::path path;
    TempDir() {
        path = std::filesystem::temp_directory_path() / ("dba_cli_test_" + std::to_string(::getpid()));
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

}  // namespace

TEST_CASE("cli: usage errors exit with 2") {
    CHECK(run_cli("bench --n 256").exit_code == 2);
    CHECK(run_cli("validate --trials 10").exit_code == 2);
    CHECK(run_cli("gradcheck --n 128").exit_code == 2);
    CHECK(run_cli("no-such-command").exit_code == 2);
    CHECK(run_cli("train --bogus 1").exit_code == 2);
}

TEST_CASE("cli: validate prints the minimum hidden dimension") {
    RunResult r = run_cli("validate --epsilon 0.5 --dp 16");
    CHECK(r.exit_code == 0);
    CHECK(r.output.find("222") != std::string::npos);
}

TEST_CASE("cli: gradcheck passes on the default small config") {
    RunResult r = run_cli("gradcheck --seeds 1");
    CHECK(r.exit_code == 0);
    CHECK(r.output.find("gradcheck pass") != std::string::npos);
}

TEST_CASE("cli: bench sweep writes csv and svg") {
    TempDir tmp;
    const std::string csv = tmp.file("sweep.csv");
    const std::string svg = tmp.file("sweep.svg");
    RunResult r = run_cli("bench --mechanisms vanilla,dba --n 32,64,128,256 --d 32 --dp 8 --din 12 "
                          "--reps 5 --out " + csv + " --svg " + svg);
    CHECK(r.exit_code == 0);
    const std::string content = slurp(csv);
    CHECK(content.rfind("mechanism,n,d,d_p,d_in,heads,flops,peak_bytes,wall_ms_mean,wall_ms_std,reps\n", 0) == 0);
    std::size_t lines = 0;
    for (char c : content)
        if (c == '\n') ++lines;
    CHECK(lines == 9);  // header + 2 mechanisms x 4 lengths
    CHECK(slurp(svg).find("<svg") != std::string::npos);
}

TEST_CASE("cli: train, eval, and projection dumps") {
    TempDir tmp;
    const std::string ckpt = tmp.file("model.dba");
    const std::string model_flags = "--task majority --mechanism dba --n 12 --d 16 --dp 4 --din 8 "
                                    "--heads 2 --vocab 5 --seed 3 ";
    const std::string common = model_flags + "--train-size 64 --val-size 32 ";
    RunResult tr = run_cli("train " + common + "--epochs 2 --batch 16 --out " + ckpt);
    CHECK(tr.exit_code == 0);
    CHECK(std::filesystem::exists(ckpt));
    CHECK(slurp(ckpt + ".train.csv").rfind("epoch,train_loss,val_acc,seconds\n", 0) == 0);

    // eval on the training split reproduces the reported training accuracy
    const std::string reported = tr.output.substr(tr.output.find("train_acc=") + 10, 6);
    RunResult ev = run_cli("eval " + common + "--split train --checkpoint " + ckpt);
    CHECK(ev.exit_code == 0);
    CHECK(ev.output.find(reported) != std::string::npos);

    RunResult vl = run_cli("eval " + common + "--lengths 8,12,24 --checkpoint " + ckpt);
    CHECK(vl.exit_code == 0);
    CHECK(vl.output.find("n=24") != std::string::npos);

    // missing checkpoint.
    CHECK(run_cli("eval " + common + "--checkpoint " + tmp.file("nope.dba")).exit_code == 1);

    // dump projections for two inputs
    dba::Rng rng(4);
    for (const char* name : {"a.txt", "b.txt"}) {
        std::ofstream os(tmp.file(name));
        dba::dump_text(dba::gaussian(rng, 12, 16, 1.0), os);
    }
    const std::string out_dir = tmp.file("proj");
    RunResult dp = run_cli("dump-projections " + model_flags + "--checkpoint " + ckpt + " --input " +
                           tmp.file("a.txt") + " --input2 " + tmp.file("b.txt") + " --out " + out_dir);
    CHECK(dp.exit_code == 0);
    const std::string wr1 = slurp(out_dir + "/input1_comp_q.txt");
    const std::string wr2 = slurp(out_dir + "/input2_comp_q.txt");
    CHECK(!wr1.empty());
    CHECK(wr1 != wr2);

    // identical inputs produce bitwise-identical dumps
    RunResult dp2 = run_cli("dump-projections " + model_flags + "--checkpoint " + ckpt + " --input " +
                            tmp.file("a.txt") + " --input2 " + tmp.file("a.txt") + " --out " + out_dir);
    CHECK(dp2.exit_code == 0);
    CHECK(slurp(out_dir + "/input1_comp_q.txt") == slurp(out_dir + "/input2_comp_q.txt"));

    // dump without a checkpoint fails
    CHECK(run_cli("dump-projections " + model_flags + "--input " + tmp.file("a.txt") + " --input2 " +
                  tmp.file("b.txt"))
              .exit_code == 1);
}

TEST_CASE("cli: cross-match training runs end to end") {
    TempDir tmp;
    RunResult r = run_cli("train --task cross-match --mechanism dba --n2 6 --d 16 --dp 4 --din 8 "
                          "--heads 2 --vocab 12 --seed 2 --train-size 48 --val-size 16 --epochs 1 "
                          "--batch 16 --out " + tmp.file("cross.dba"));
    CHECK(r.exit_code == 0);
}

TEST_CASE("cli: config file values are read, overridden by flags, unknown keys rejected") {
    TempDir tmp;
    {
        std::ofstream os(tmp.file("grad.cfg"));
        os << "# gradcheck config\nn=5\nd=8\nseeds=1\n";
    }
    RunResult ok = run_cli("gradcheck --config " + tmp.file("grad.cfg"));
    CHECK(ok.exit_code == 0);

    {
        std::ofstream os(tmp.file("bad.cfg"));
        os << "n=5\nwibble=3\n";
    }
    CHECK(run_cli("gradcheck --config " + tmp.file("bad.cfg")).exit_code == 2);

    // flag overrides the file: n=128 from the file is overridden to a legal 6
    {
        std::ofstream os(tmp.file("big.cfg"));
        os << "n=128\nseeds=1\n";
    }
    CHECK(run_cli("gradcheck --config " + tmp.file("big.cfg")).exit_code == 2);
    CHECK(run_cli("gradcheck --n 6 --seeds 1 --config " + tmp.file("big.cfg")).exit_code == 0);
}

TEST_CASE("cli: DBA_SEED environment fallback keeps runs deterministic") {
    TempDir tmp;
    const std::string cmd = "DBA_SEED=9 " DBA_CLI_PATH " validate --epsilon 0.3 --dp 8 2>&1";
    FILE* pipe = popen(cmd.c_str(), "r");
    REQUIRE(pipe != nullptr);
    std::array<char, 256> buf;
    std::string out;
    while (fgets(buf.data(), buf.size(), pipe)) out += buf.data();
    CHECK(WEXITSTATUS(pclose(pipe)) == 0);
    CHECK(out.find("331") != std::string::npos);  // ceil(10 ln 8 / 0.063)
}
