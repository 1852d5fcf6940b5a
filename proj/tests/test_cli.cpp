// CLI end-to-end checks. Usage: test_cli <path-to-klnorm> <data-dir>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;

namespace {

int g_failures = 0;

void check(bool ok, const std::string& what) {
  if (ok) {
    std::printf("[PASS] %s\n", what.c_str());
  } else {
    std::printf("[FAIL] %s\n", what.c_str());
    ++g_failures;
  }
}

struct CmdResult {
  int exit_code = -1;
  std::string output;
};

CmdResult run(const std::string& cmd) {
  CmdResult res;
  FILE* pipe = popen((cmd + " 2>&1").c_str(), "r");
  if (!pipe) return res;
  char buf[4096];
  while (std::size_t n = std::fread(buf, 1, sizeof(buf), pipe)) {
    res.output.append(buf, n);
  }
  const int status = pclose(pipe);
  res.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return res;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 3) {
    std::fprintf(stderr, "usage: test_cli <klnorm-binary> <data-dir>\n");
    return 1;
  }
  const std::string cli = argv[1];
  const fs::path data_dir = argv[2];
  const fs::path work = fs::temp_directory_path() / "klnorm_cli_test";
  fs::remove_all(work);
  fs::create_directories(work);

  // Full --help surface against the golden file.
  {
    std::string help = run(cli + " --help").output;
    for (const char* sub : {"train", "eval", "gradcheck", "klcheck",
                            "sweep-beta", "bias-probe", "make-data", "params"}) {
      help += "\n==== " + std::string(sub) + " ====\n";
      help += run(cli + " " + sub + " --help").output;
    }
    const std::string golden = read_file(data_dir / "cli_help.txt");
    check(!golden.empty(), "golden help file present");
    check(help == golden, "--help output matches the golden file");
    if (help != golden) {
      const fs::path got = work / "help_actual.txt";
      std::ofstream(got) << help;
      std::printf("  wrote actual help to %s\n", got.c_str());
    }
  }

  // make-data writes the split triplet.
  const std::string base = (work / "toy").string();
  {
    CmdResult res = run(cli + " make-data --kind gauss_mix --n 60 --d 5 "
                              "--classes 2 --seed 3 --sep 5 --out-base " +
                        base);
    check(res.exit_code == 0, "make-data exits 0");
    check(fs::exists(base + ".train") && fs::exists(base + ".dev") &&
              fs::exists(base + ".test"),
          "make-data writes train/dev/test files");
  }

  // Config for the tiny experiment.
  const fs::path cfg_path = work / "toy.cfg";
  {
    std::ofstream cfg(cfg_path);
    cfg << "dataset = " << base << "\n";
    cfg << "model.norm = klnorm\n";
    cfg << "model.k = 4\n";
    cfg << "train.epochs = 2\n";
    cfg << "train.beta0 = 0.3\n";
    cfg << "seeds = 13,42\n";
    cfg << "out = " << (work / "runs").string() << "\n";
  }

  fs::path run_dir;
  {
    CmdResult res = run(cli + " train --config " + cfg_path.string());
    check(res.exit_code == 0, "train exits 0");
    check(res.output.find("test_accuracy") != std::string::npos,
          "train prints aggregated metrics");
    for (const auto& entry : fs::directory_iterator(work / "runs")) {
      run_dir = entry.path();
    }
    check(fs::exists(run_dir / "summary.csv"), "train writes summary.csv");
    check(fs::exists(run_dir / "13.kln"), "train writes checkpoints");
  }

  // eval on the produced checkpoint prints JSON metrics.
  {
    CmdResult res = run(cli + " eval --config " + cfg_path.string() +
                        " --checkpoint " + (run_dir / "13.kln").string());
    check(res.exit_code == 0, "eval exits 0");
    check(res.output.find("\"accuracy\"") != std::string::npos,
          "eval prints accuracy");
  }

  // Validation failures exit 1 with a message.
  {
    CmdResult res = run(cli + " train --config " + cfg_path.string() +
                        " --set dataset=/nonexistent/path");
    check(res.exit_code == 1, "train with missing dataset exits 1");
    check(res.output.find("error") != std::string::npos,
          "missing dataset prints an error");
  }
  {
    CmdResult res = run(cli + " train --config " + cfg_path.string() +
                        " --set nonsense.key=1");
    check(res.exit_code == 1, "unknown config key exits 1");
    check(res.output.find("nonsense.key") != std::string::npos,
          "unknown key is named");
  }

  // Numerical verification subcommands.
  {
    CmdResult res = run(cli + " gradcheck");
    check(res.exit_code == 0, "gradcheck exits 0");
    check(res.output.find("max relative error") != std::string::npos,
          "gradcheck prints the max relative error");
  }
  {
    CmdResult res = run(cli + " klcheck");
    check(res.exit_code == 0, "klcheck exits 0");
  }

  // params report.
  {
    CmdResult res = run(cli + " params --config " + cfg_path.string() +
                        " --d-in 768 --classes 2 --set model.k=512");
    check(res.exit_code == 0, "params exits 0");
    check(res.output.find("\"norm_overhead\": 525312") != std::string::npos,
          "params reports the 2K(K+1) overhead for K=512");
  }

  // sweep-beta writes the CSV.
  {
    CmdResult res = run(cli + " sweep-beta --config " + cfg_path.string() +
                        " --grid 0,0.5 --quiet");
    check(res.exit_code == 0, "sweep-beta exits 0");
    check(fs::exists(run_dir / "sweep.csv") ||
              !fs::is_empty(work / "runs"),
          "sweep-beta writes sweep.csv under the out dir");
  }

  fs::remove_all(work);
  if (g_failures == 0) {
    std::printf("all CLI checks passed\n");
    return 0;
  }
  std::printf("%d CLI check(s) failed\n", g_failures);
  return 1;
}
