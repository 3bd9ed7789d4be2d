// pfedsim: desk-scale simulator of personalized federated prompt learning.
// Clients tune prompt tokens on a frozen transformer encoder; the server
// learns to generate per-client prompt initializations from the clients'
// prompt-update directions.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "pfed/checks.hpp"
#include "pfed/config.hpp"
#include "pfed/orchestrator.hpp"
#include "pfed/pretrain.hpp"
#include "pfed/serialize.hpp"

namespace {

int cmd_run(const std::string& config_path) {
  pfed::ExperimentConfig cfg = pfed::load_config(config_path);
  pfed::RunResult res = pfed::run_experiment(cfg);
  std::printf("run dir: %s\n", res.run_dir.string().c_str());
  std::printf("strategy %s, %zu rounds, %zu clients\n", cfg.strategy.c_str(), cfg.rounds, cfg.clients);
  for (std::size_t n = 0; n < res.final.per_client_acc.size(); ++n)
    std::printf("  client %2zu  acc %.4f  loss %.4f\n", n, res.final.per_client_acc[n], res.final.per_client_loss[n]);
  std::printf("final mean accuracy: %.4f\n", res.final.mean_acc);
  std::printf("wall time: %.1f s\n", res.wall_ms_total / 1000.0);
  return 0;
}

int cmd_pretrain(const std::string& config_path) {
  pfed::ExperimentConfig cfg = pfed::load_config(config_path);
  if (cfg.encoder_mode != "pretrained") {
    std::fprintf(stderr, "pretrain: config has encoder_mode = %s; expected pretrained\n", cfg.encoder_mode.c_str());
    return 2;
  }
  auto pooled = pfed::gen_base_task(static_cast<int>(cfg.classes), static_cast<int>(cfg.samples_per_class),
                                    cfg.seed_data, cfg.noise_std);
  auto [pre, rest] = pfed::make_pretrain_split(pooled, cfg.pretrain_fraction, cfg.seed_data);
  pfed::EncoderWeights w = pfed::init_encoder(cfg.encoder_config());
  pfed::PretrainOptions opt{cfg.pretrain_epochs, cfg.pretrain_lr, cfg.pretrain_batch,
                            pfed::derive_seed(cfg.seed_model, 0x9e7)};
  auto stats = pfed::pretrain_encoder(w, pre, cfg.classes, opt);
  w.freeze();
  std::filesystem::create_directories(cfg.output_dir);
  const auto path = std::filesystem::path(cfg.output_dir) / ("encoder-" + pfed::config_hash(cfg) + ".bin");
  pfed::save_state(path, w);
  std::printf("pretrained on %zu samples for %zu epochs\n", pre.size(), cfg.pretrain_epochs);
  std::printf("  first epoch loss %.4f, last %.4f, split accuracy %.4f\n", stats.epoch_losses.front(),
              stats.epoch_losses.back(), stats.final_accuracy);
  std::printf("weights: %s\n", path.string().c_str());
  std::printf("hash: %016llx\n", static_cast<unsigned long long>(w.freeze_hash));
  return 0;
}

int cmd_partition(const std::string& config_path) {
  pfed::ExperimentConfig cfg = pfed::load_config(config_path);
  auto pooled = pfed::gen_base_task(static_cast<int>(cfg.classes), static_cast<int>(cfg.samples_per_class),
                                    cfg.seed_data, cfg.noise_std);
  std::vector<pfed::Sample> pool = pooled;
  if (cfg.encoder_mode == "pretrained") {
    auto [pre, rest] = pfed::make_pretrain_split(pooled, cfg.pretrain_fraction, cfg.seed_data);
    pool = std::move(rest);
  }
  pfed::FedDataset ds = pfed::build_dataset(cfg, pool);
  const auto dir = std::filesystem::path(cfg.output_dir) / ("dataset-" + pfed::config_hash(cfg));
  pfed::export_dataset(ds, dir);
  std::printf("partition %s over %d clients -> %s\n", cfg.partition.c_str(), ds.spec.clients, dir.string().c_str());
  for (std::size_t n = 0; n < ds.clients.size(); ++n)
    std::printf("  client %2zu  train %4zu  test %4zu\n", n, ds.clients[n].train.size(), ds.clients[n].test.size());
  if (!ds.repairs.empty()) std::printf("  %zu sample(s) moved to repair undersized clients\n", ds.repairs.size());
  return 0;
}

int cmd_gradcheck() {
  bool ok = true;
  auto print = [&](const std::vector<pfed::CheckLine>& lines) {
    for (const auto& l : lines) {
      std::printf("[%s] %-34s err %.3e  (tol %.0e)\n", l.pass ? "PASS" : "FAIL", l.name.c_str(), l.value, l.tol);
      ok = ok && l.pass;
    }
  };
  std::printf("-- finite-difference oracles --\n");
  print(pfed::run_gradient_checks());
  std::printf("-- end-to-end pseudo-gradient oracles --\n");
  print(pfed::run_pseudo_gradient_checks());
  std::printf(ok ? "all checks passed\n" : "CHECK FAILURES\n");
  return ok ? 0 : 1;
}

struct RunSummary {
  std::string strategy;
  double mean_acc = 0.0;
  std::string dir;
};

int cmd_report(const std::string& root) {
  namespace fs = std::filesystem;
  if (!fs::exists(root)) {
    std::fprintf(stderr, "report: no such directory: %s\n", root.c_str());
    return 2;
  }
  std::vector<RunSummary> runs;
  auto consume = [&](const fs::path& p) {
    std::ifstream in(p);
    if (!in) return;
    nlohmann::json j;
    try {
      in >> j;
    } catch (const std::exception&) {
      return;
    }
    if (!j.contains("strategy") || !j.contains("final_mean_accuracy")) return;
    runs.push_back(RunSummary{j["strategy"].get<std::string>(), j["final_mean_accuracy"].get<double>(),
                              p.parent_path().string()});
  };
  if (fs::is_regular_file(root)) {
    consume(root);
  } else {
    for (const auto& e : fs::recursive_directory_iterator(root))
      if (e.is_regular_file() && e.path().filename() == "summary.json") consume(e.path());
  }
  if (runs.empty()) {
    std::fprintf(stderr, "report: no summary.json found under %s\n", root.c_str());
    return 2;
  }
  std::sort(runs.begin(), runs.end(), [](const RunSummary& a, const RunSummary& b) {
    return a.strategy != b.strategy ? a.strategy < b.strategy : a.dir < b.dir;
  });
  std::printf("%-14s %-10s %s\n", "strategy", "mean_acc", "run");
  for (const auto& r : runs) std::printf("%-14s %-10.4f %s\n", r.strategy.c_str(), r.mean_acc, r.dir.c_str());

  std::map<std::string, std::vector<double>> by_strategy;
  for (const auto& r : runs) by_strategy[r.strategy].push_back(r.mean_acc);
  std::printf("\n%-14s %-6s %-10s %s\n", "strategy", "runs", "mean", "stderr");
  std::map<std::string, std::pair<double, double>> agg;
  for (const auto& [s, accs] : by_strategy) {
    double mean = 0.0;
    for (double a : accs) mean += a;
    mean /= static_cast<double>(accs.size());
    double var = 0.0;
    for (double a : accs) var += (a - mean) * (a - mean);
    const double stderr_ = accs.size() > 1 ? std::sqrt(var / static_cast<double>(accs.size() - 1)) /
                                                 std::sqrt(static_cast<double>(accs.size()))
                                           : 0.0;
    agg[s] = {mean, stderr_};
    std::printf("%-14s %-6zu %-10.4f %.4f\n", s.c_str(), accs.size(), mean, stderr_);
  }
  if (agg.count("pfedpg")) {
    std::printf("\ncomparisons vs pfedpg (mean %.4f):\n", agg["pfedpg"].first);
    for (const auto& [s, ms] : agg) {
      if (s == "pfedpg") continue;
      std::printf("  pfedpg - %-12s = %+.4f\n", s.c_str(), agg["pfedpg"].first - ms.first);
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pfedsim: personalized federated prompt-generation simulator"};
  app.require_subcommand(1);

  std::string cfg_run, cfg_pre, cfg_part, report_dir;
  auto* run = app.add_subcommand("run", "run a full federated experiment from a config file");
  run->add_option("config", cfg_run, "experiment config file")->required();
  auto* pre = app.add_subcommand("pretrain", "centrally pretrain the encoder on the pretext split and save it");
  pre->add_option("config", cfg_pre, "experiment config file")->required();
  auto* part = app.add_subcommand("partition", "generate and export the federated dataset only");
  part->add_option("config", cfg_part, "experiment config file")->required();
  app.add_subcommand("gradcheck", "run all finite-difference and end-to-end gradient oracles");
  auto* rep = app.add_subcommand("report", "summarize runs and compare strategies");
  rep->add_option("dir", report_dir, "run directory or a directory of runs")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (app.got_subcommand("run")) return cmd_run(cfg_run);
    if (app.got_subcommand("pretrain")) return cmd_pretrain(cfg_pre);
    if (app.got_subcommand("partition")) return cmd_partition(cfg_part);
    if (app.got_subcommand("gradcheck")) return cmd_gradcheck();
    if (app.got_subcommand("report")) return cmd_report(report_dir);
  } catch (const pfed::ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}
