#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <sys/wait.h>

#include "pfed/config.hpp"

using namespace pfed;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int exit_code = -1;
  std::string output;
};

CliResult run_cli(const std::string& args, const fs::path& workdir) {
  const fs::path out = workdir / "cli-output.txt";
  const std::string cmd = "cd " + workdir.string() + " && " + PFEDSIM_BIN + " " + args + " > " +
                          out.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  CliResult r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(out);
  std::ostringstream os;
  os << in.rdbuf();
  r.output = os.str();
  return r;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("pfedsim-cli-" + tag + "-" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

void write_config(const fs::path& p, const ExperimentConfig& cfg) {
  std::ofstream out(p);
  out << serialize_config(cfg);
}

ExperimentConfig cli_config(const std::string& strategy) {
  ExperimentConfig cfg;
  cfg.strategy = strategy;
  cfg.clients = 2;
  cfg.prompts = 2;
  cfg.rounds = 2;
  cfg.image_side = 16;
  cfg.patch_side = 8;
  cfg.embed_dim = 16;
  cfg.attn_dim = 16;
  cfg.value_dim = 16;
  cfg.mlp_hidden = 16;
  cfg.depth = 1;
  cfg.heads = 2;
  cfg.classes = 4;
  cfg.samples_per_class = 10;
  cfg.encoder_mode = "pretrained";
  cfg.pretrain_fraction = 0.5;
  cfg.pretrain_epochs = 2;
  cfg.pretrain_lr = 0.05;
  cfg.partition = "dirichlet";
  cfg.dirichlet_alpha = 1.0;
  cfg.local_epochs = 1;
  cfg.batch_size = 8;
  cfg.workers = 1;
  cfg.output_dir = "out";
  return cfg;
}

}  // namespace

TEST_CASE("missing or malformed configs exit with code 2", "[cli]") {
  TempDir tmp("badcfg");
  CHECK(run_cli("run /nonexistent/config.cfg", tmp.path).exit_code == 2);

  std::ofstream(tmp.path / "bad.cfg") << "rounds = 2\nmystery_key = 5\n";
  const CliResult r = run_cli("run bad.cfg", tmp.path);
  CHECK(r.exit_code == 2);
  CHECK(r.output.find("unknown key") != std::string::npos);
}

TEST_CASE("unknown flags and subcommands exit with code 2", "[cli]") {
  TempDir tmp("badflag");
  CHECK(run_cli("explode", tmp.path).exit_code == 2);
  CHECK(run_cli("run --no-such-flag x.cfg", tmp.path).exit_code == 2);
  CHECK(run_cli("", tmp.path).exit_code == 2);  // a subcommand is required
}

TEST_CASE("run executes an experiment and report summarizes it", "[cli]") {
  TempDir tmp("run");
  write_config(tmp.path / "exp.cfg", cli_config("pfedpg"));
  const CliResult r = run_cli("run exp.cfg", tmp.path);
  CHECK(r.exit_code == 0);
  CHECK(r.output.find("final mean accuracy") != std::string::npos);

  const CliResult rep = run_cli("report out", tmp.path);
  CHECK(rep.exit_code == 0);
  CHECK(rep.output.find("pfedpg") != std::string::npos);
  CHECK(rep.output.find("mean") != std::string::npos);

  CHECK(run_cli("report nowhere", tmp.path).exit_code == 2);
}

TEST_CASE("pretrain then run reproduces the inline-pretraining run exactly", "[cli]") {
  TempDir tmp("pre");
  ExperimentConfig cfg = cli_config("pfedpg");
  write_config(tmp.path / "exp.cfg", cfg);

  const CliResult pre = run_cli("pretrain exp.cfg", tmp.path);
  REQUIRE(pre.exit_code == 0);
  const auto pos = pre.output.find("weights: ");
  REQUIRE(pos != std::string::npos);
  std::string weights = pre.output.substr(pos + 9);
  weights = weights.substr(0, weights.find('\n'));

  ExperimentConfig with_weights = cfg;
  with_weights.encoder_weights = weights;
  with_weights.output_dir = "out-loaded";
  write_config(tmp.path / "exp2.cfg", with_weights);
  REQUIRE(run_cli("run exp2.cfg", tmp.path).exit_code == 0);
  REQUIRE(run_cli("run exp.cfg", tmp.path).exit_code == 0);

  auto find_csv = [&](const std::string& dir) {
    for (const auto& e : fs::recursive_directory_iterator(tmp.path / dir))
      if (e.path().filename() == "rounds.csv") return e.path();
    FAIL("no rounds.csv under " + dir);
    return fs::path{};
  };
  std::ifstream a(find_csv("out"), std::ios::binary), b(find_csv("out-loaded"), std::ios::binary);
  std::ostringstream sa, sb;
  sa << a.rdbuf();
  sb << b.rdbuf();
  CHECK(sa.str() == sb.str());
}

TEST_CASE("partition exports the dataset layout", "[cli]") {
  TempDir tmp("part");
  write_config(tmp.path / "exp.cfg", cli_config("pfedpg"));
  const CliResult r = run_cli("partition exp.cfg", tmp.path);
  CHECK(r.exit_code == 0);
  bool found_manifest = false;
  for (const auto& e : fs::recursive_directory_iterator(tmp.path / "out"))
    found_manifest = found_manifest || e.path().filename() == "manifest.json";
  CHECK(found_manifest);
}

TEST_CASE("gradcheck passes on a fresh build", "[cli]") {
  TempDir tmp("gc");
  const CliResult r = run_cli("gradcheck", tmp.path);
  CHECK(r.exit_code == 0);
  CHECK(r.output.find("all checks passed") != std::string::npos);
  CHECK(r.output.find("FAIL") == std::string::npos);
}
