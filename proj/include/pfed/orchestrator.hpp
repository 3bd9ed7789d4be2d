#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "pfed/client.hpp"
#include "pfed/config.hpp"
#include "pfed/data.hpp"
#include "pfed/encoder.hpp"
#include "pfed/pretrain.hpp"
#include "pfed/serialize.hpp"
#include "pfed/server.hpp"

namespace pfed {

struct ClientRoundMetrics {
  double train_loss = 0.0;  // mean over the round's epochs
  double test_acc = 0.0;
  std::size_t uplink_params = 0;
  std::size_t downlink_params = 0;
};

struct RoundRecord {
  std::size_t round = 0;  // 1-based
  std::vector<ClientRoundMetrics> per_client;
  double mean_train_loss = 0.0;
  double mean_test_acc = 0.0;
  double wall_ms = 0.0;  // measured; reported in the summary, not the CSV

  void finalize() {
    mean_train_loss = 0.0;
    mean_test_acc = 0.0;
    for (const auto& c : per_client) {
      mean_train_loss += c.train_loss;
      mean_test_acc += c.test_acc;
    }
    mean_train_loss /= static_cast<double>(per_client.size());
    mean_test_acc /= static_cast<double>(per_client.size());
  }
};

// Everything a running experiment holds between rounds.
struct Experiment {
  ExperimentConfig cfg;
  FedDataset dataset;
  EncoderWeights encoder;
  GeneratorState server;
  std::vector<ClientState> clients_state;
  std::uint64_t frozen_hash = 0;
  double pretrain_accuracy = -1.0;
};

namespace detail {

inline std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

// Bounded fan-out over client indices; results land in caller-owned slots so
// any worker count yields identical state to a sequential loop.
inline void parallel_for_clients(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& body) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= n) return;
        try {
          body(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace detail

inline FedDataset build_dataset(const ExperimentConfig& cfg, const std::vector<Sample>& pool) {
  if (cfg.partition == "domains")
    return make_domains(pool, static_cast<int>(cfg.clients), cfg.seed_data, cfg.domain_strength, cfg.test_fraction);
  if (cfg.partition == "disjoint")
    return partition_disjoint(pool, static_cast<int>(cfg.clients), static_cast<int>(cfg.disjoint_classes),
                              cfg.seed_data, cfg.test_fraction);
  return partition_dirichlet(pool, static_cast<int>(cfg.clients), cfg.dirichlet_alpha, cfg.seed_data,
                             cfg.test_fraction);
}

// Data + encoder + server + client construction, shared by run_experiment and
// the pretrain/partition subcommands.
inline Experiment setup_experiment(const ExperimentConfig& cfg,
                                   const EncoderWeights* pretrained = nullptr) {
  cfg.validate();
  Experiment ex;
  ex.cfg = cfg;

  std::vector<Sample> pooled =
      gen_base_task(static_cast<int>(cfg.classes), static_cast<int>(cfg.samples_per_class), cfg.seed_data, cfg.noise_std);
  std::vector<Sample> fl_pool;

  // The pretraining split is carved out of the federated pool whenever the
  // encoder mode is "pretrained", including when weights arrive from a
  // separate invocation: the loaded weights saw that split under the same
  // data seed, so it must stay out of every client's data.
  if (cfg.encoder_mode == "pretrained") {
    auto [pre, rest] = make_pretrain_split(pooled, cfg.pretrain_fraction, cfg.seed_data);
    fl_pool = std::move(rest);
    if (pretrained) {
      if (pretrained->cfg != cfg.encoder_config())
        throw std::invalid_argument("setup: supplied encoder weights do not match the configured architecture");
      ex.encoder = *pretrained;
    } else if (!cfg.encoder_weights.empty()) {
      ex.encoder = init_encoder(cfg.encoder_config());
      load_state(cfg.encoder_weights, ex.encoder);
    } else {
      ex.encoder = init_encoder(cfg.encoder_config());
      PretrainOptions opt{cfg.pretrain_epochs, cfg.pretrain_lr, cfg.pretrain_batch, derive_seed(cfg.seed_model, 0x9e7)};
      ex.pretrain_accuracy = pretrain_encoder(ex.encoder, pre, cfg.classes, opt).final_accuracy;
    }
  } else {
    fl_pool = std::move(pooled);
    if (pretrained) {
      if (pretrained->cfg != cfg.encoder_config())
        throw std::invalid_argument("setup: supplied encoder weights do not match the configured architecture");
      ex.encoder = *pretrained;
    } else {
      ex.encoder = init_encoder(cfg.encoder_config());
    }
  }
  ex.frozen_hash = ex.encoder.freeze();
  ex.dataset = build_dataset(cfg, fl_pool);

  ServerOptions sopt{cfg.server_lr, cfg.literal_sign, cfg.server_update_mode == "averaged",
                     cfg.generator_init_std};
  ex.server = init_server(cfg.kind(), static_cast<int>(cfg.clients), cfg.prompts, cfg.embed_dim, cfg.attn_dim,
                          cfg.value_dim, cfg.mlp_hidden, cfg.seed_model, sopt);

  ex.clients_state.resize(cfg.clients);
  const GeneratorKind kind = cfg.kind();
  for (std::size_t n = 0; n < cfg.clients; ++n) {
    ClientState& st = ex.clients_state[n];
    st.id = static_cast<int>(n);
    st.data = &ex.dataset.clients[n];
    st.encoder = &ex.encoder;
    st.head = Head::zeros(cfg.embed_dim, cfg.classes);
    st.hp = LocalHyper{cfg.client_lr, cfg.weight_decay, cfg.batch_size, cfg.local_epochs};
    if (kind == GeneratorKind::LocalOnly) {
      Rng rng(derive_seed(cfg.seed_model, 0x10ca1, n));
      st.prompts = randn({cfg.prompts, cfg.embed_dim}, rng, kWeightInitStd);
    } else {
      st.prompts = Tensor({cfg.prompts, cfg.embed_dim});
    }
  }
  return ex;
}

// One synchronous communication round: generation (strategy-dependent), local
// adaptation of every client behind a barrier, then the server update.
inline RoundRecord run_round(Experiment& ex, std::size_t round) {
  const auto t0 = std::chrono::steady_clock::now();
  const ExperimentConfig& cfg = ex.cfg;
  const GeneratorKind kind = ex.server.kind;
  const std::size_t n_clients = cfg.clients;
  const std::size_t kl = cfg.prompts * cfg.embed_dim;

  std::vector<Tensor> issued(n_clients);
  for (std::size_t n = 0; n < n_clients; ++n) {
    if (kind == GeneratorKind::LocalOnly)
      issued[n] = ex.clients_state[n].prompts;
    else
      issued[n] = generate_prompts(ex.server, static_cast<int>(n));
  }

  std::vector<AdaptResult> results(n_clients);
  RoundRecord rec;
  rec.round = round;
  rec.per_client.resize(n_clients);

  detail::parallel_for_clients(n_clients, cfg.workers, [&](std::size_t n) {
    ClientState& st = ex.clients_state[n];
    if (cfg.reset_head_each_round) st.head = Head::zeros(cfg.embed_dim, cfg.classes);
    results[n] = local_adapt(st, issued[n], static_cast<int>(round), cfg.seed_train);
    ClientRoundMetrics& m = rec.per_client[n];
    double sum = 0.0;
    for (double l : results[n].epoch_losses) sum += l;
    m.train_loss = sum / static_cast<double>(results[n].epoch_losses.size());
    m.test_acc = evaluate(st, st.data->test).accuracy;
    m.downlink_params = kind == GeneratorKind::LocalOnly ? 0 : kl;
    m.uplink_params = kind == GeneratorKind::LocalOnly ? 0 : kl;
  });

  if (uses_pseudo_gradient(kind)) {
    std::vector<PromptDelta> deltas;
    deltas.reserve(n_clients);
    for (auto& r : results) deltas.push_back(r.delta);
    server_update(ex.server, deltas);
  } else if (kind == GeneratorKind::GlobalAverage) {
    std::vector<std::pair<Tensor, std::size_t>> trained;
    trained.reserve(n_clients);
    for (std::size_t n = 0; n < n_clients; ++n) trained.push_back({results[n].adapted, ex.dataset.clients[n].train.size()});
    ex.server.global_prompts = aggregate_fedvpt(trained);
  }

  rec.finalize();
  rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return rec;
}

struct FinalEvaluation {
  std::vector<double> per_client_acc;
  std::vector<double> per_client_loss;
  double mean_acc = 0.0;
};

// Deployment-time evaluation. Each client keeps its locally trained head; the
// deployed prompts depend on the strategy: adapted prompts for personalized
// variants, the aggregated global prompts for fedvpt, and the client-agnostic
// base prompts for base_only.
inline FinalEvaluation final_evaluate(Experiment& ex) {
  FinalEvaluation out;
  for (std::size_t n = 0; n < ex.clients_state.size(); ++n) {
    ClientState st = ex.clients_state[n];  // copy; prompt substitution is evaluation-only
    if (ex.server.kind == GeneratorKind::GlobalAverage)
      st.prompts = ex.server.global_prompts;
    else if (ex.server.kind == GeneratorKind::BaseOnly)
      st.prompts = ex.server.p_base;
    const EvalResult r = evaluate(st, st.data->test);
    out.per_client_acc.push_back(r.accuracy);
    out.per_client_loss.push_back(r.mean_loss);
    out.mean_acc += r.accuracy;
  }
  out.mean_acc /= static_cast<double>(out.per_client_acc.size());
  return out;
}

struct RunResult {
  std::filesystem::path run_dir;
  std::vector<RoundRecord> rounds;
  FinalEvaluation final;
  std::uint64_t frozen_hash_start = 0;
  std::uint64_t frozen_hash_end = 0;
  double wall_ms_total = 0.0;
};

namespace detail {

inline std::filesystem::path make_run_dir(const ExperimentConfig& cfg) {
  const auto now = std::chrono::system_clock::now();
  const std::time_t tt = std::chrono::system_clock::to_time_t(now);
  char stamp[32];
  std::tm tm_buf{};
  localtime_r(&tt, &tm_buf);
  std::strftime(stamp, sizeof(stamp), "%Y%m%d-%H%M%S", &tm_buf);
  const std::string base = config_hash(cfg) + "-" + stamp;
  std::filesystem::path dir = std::filesystem::path(cfg.output_dir) / base;
  for (int i = 1; std::filesystem::exists(dir); ++i) dir = std::filesystem::path(cfg.output_dir) / (base + "-" + std::to_string(i));
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw std::runtime_error("run: cannot create run directory " + dir.string() + ": " + ec.message());
  return dir;
}

// One row per client plus a client=-1 mean row. The wall_ms column is pinned
// to 0 so logs from identical configurations compare byte-for-byte; measured
// timings go to the summary instead.
inline void append_csv(std::ostream& os, const RoundRecord& rec) {
  for (std::size_t n = 0; n < rec.per_client.size(); ++n) {
    const auto& m = rec.per_client[n];
    os << rec.round << ',' << n << ',' << fmt(m.train_loss) << ',' << fmt(m.test_acc) << ',' << m.uplink_params << ','
       << m.downlink_params << ",0\n";
  }
  os << rec.round << ",-1," << fmt(rec.mean_train_loss) << ',' << fmt(rec.mean_test_acc) << ','
     << rec.per_client.front().uplink_params << ',' << rec.per_client.front().downlink_params << ",0\n";
}

}  // namespace detail

inline nlohmann::json summary_json(const ExperimentConfig& cfg, const RunResult& res, const Experiment& ex) {
  nlohmann::json j;
  j["strategy"] = cfg.strategy;
  j["config_hash"] = config_hash(cfg);
  nlohmann::json jc;
  {
    std::istringstream is(serialize_config(cfg));
    std::string line;
    while (std::getline(is, line)) {
      const auto eq = line.find(" = ");
      jc[line.substr(0, eq)] = line.substr(eq + 3);
    }
  }
  j["config"] = jc;
  j["rounds"] = cfg.rounds;
  j["final_mean_accuracy"] = res.final.mean_acc;
  j["final_per_client_accuracy"] = res.final.per_client_acc;
  j["final_per_client_loss"] = res.final.per_client_loss;
  std::vector<double> curve;
  for (const auto& r : res.rounds) curve.push_back(r.mean_test_acc);
  j["round_mean_accuracy"] = curve;
  char hash_buf[32];
  std::snprintf(hash_buf, sizeof(hash_buf), "%016llx", static_cast<unsigned long long>(res.frozen_hash_start));
  j["frozen_hash_start"] = hash_buf;
  std::snprintf(hash_buf, sizeof(hash_buf), "%016llx", static_cast<unsigned long long>(res.frozen_hash_end));
  j["frozen_hash_end"] = hash_buf;
  j["pretrain_accuracy"] = ex.pretrain_accuracy;
  j["partition_repairs"] = ex.dataset.repairs.size();
  std::size_t up = 0, down = 0;
  for (const auto& r : res.rounds)
    for (const auto& m : r.per_client) {
      up += m.uplink_params;
      down += m.downlink_params;
    }
  j["total_uplink_params"] = up;
  j["total_downlink_params"] = down;
  const std::size_t full = ex.encoder.param_count() + ex.clients_state.front().head.param_count();
  j["full_model_params"] = full;
  j["prompt_ratio"] = comm_cost(ex.server.kind, cfg.prompts, cfg.embed_dim, full).prompt_ratio;
  j["wall_ms_total"] = res.wall_ms_total;
  std::vector<double> walls;
  for (const auto& r : res.rounds) walls.push_back(r.wall_ms);
  j["round_wall_ms"] = walls;
  return j;
}

// Full experiment: T rounds, CSV round log, JSON summary, binary state dumps.
// Fully deterministic given the config seeds (wall-clock timings excepted,
// which is why they live only in the summary).
inline RunResult run_experiment(const ExperimentConfig& cfg,
                                const std::optional<std::filesystem::path>& dir_override = std::nullopt,
                                const EncoderWeights* pretrained = nullptr) {
  const auto t0 = std::chrono::steady_clock::now();
  Experiment ex = setup_experiment(cfg, pretrained);

  RunResult res;
  res.run_dir = dir_override ? *dir_override : detail::make_run_dir(cfg);
  std::filesystem::create_directories(res.run_dir);
  res.frozen_hash_start = ex.frozen_hash;

  std::ofstream csv(res.run_dir / "rounds.csv", std::ios::trunc);
  if (!csv) throw std::runtime_error("run: cannot write " + (res.run_dir / "rounds.csv").string());
  csv << "round,client,train_loss,test_acc,uplink_params,downlink_params,wall_ms\n";

  for (std::size_t round = 1; round <= cfg.rounds; ++round) {
    RoundRecord rec = run_round(ex, round);
    detail::append_csv(csv, rec);
    csv.flush();
    res.rounds.push_back(std::move(rec));
  }

  res.final = final_evaluate(ex);
  res.frozen_hash_end = ex.encoder.content_hash();
  if (res.frozen_hash_end != res.frozen_hash_start)
    throw std::logic_error("run: frozen encoder hash changed during the experiment");
  res.wall_ms_total = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();

  {
    std::ofstream cfg_out(res.run_dir / "config.txt", std::ios::trunc);
    cfg_out << serialize_config(cfg);
  }
  {
    std::ofstream sum(res.run_dir / "summary.json", std::ios::trunc);
    sum << summary_json(cfg, res, ex).dump(2) << "\n";
  }
  save_state(res.run_dir / "encoder.bin", ex.encoder);
  save_state(res.run_dir / "server.bin", ex.server);
  {
    std::vector<std::pair<std::string, const Tensor*>> list;
    for (const auto& st : ex.clients_state) {
      const std::string p = "client" + std::to_string(st.id) + ".";
      list.emplace_back(p + "prompts", &st.prompts);
      list.emplace_back(p + "head_w", &st.head.w);
      list.emplace_back(p + "head_b", &st.head.b);
    }
    container::save(res.run_dir / "clients.bin", list);
  }
  return res;
}

// Per-client binary splits plus a JSON manifest describing the partition.
inline void export_dataset(const FedDataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["regime"] = regime_name(ds.spec.regime);
  manifest["clients"] = ds.spec.clients;
  manifest["classes"] = ds.classes;
  manifest["seed"] = ds.spec.seed;
  if (ds.spec.regime == PartitionSpec::Regime::Dirichlet) manifest["alpha"] = ds.spec.alpha;
  if (ds.spec.regime == PartitionSpec::Regime::DisjointLabels) manifest["classes_per_client"] = ds.spec.classes_per_client;
  if (ds.spec.regime == PartitionSpec::Regime::DomainShift) {
    manifest["domain_strength"] = ds.spec.domain_strength;
    nlohmann::json domains = nlohmann::json::array();
    for (const auto& d : ds.domains)
      domains.push_back({{"hue_angle", d.hue_angle}, {"contrast", d.contrast}, {"quarter_turns", d.quarter_turns}});
    manifest["domains"] = domains;
  }
  nlohmann::json repairs = nlohmann::json::array();
  for (const auto& r : ds.repairs)
    repairs.push_back({{"from", r.from_client}, {"to", r.to_client}, {"sample_id", r.sample_id}});
  manifest["repairs"] = repairs;

  nlohmann::json sizes = nlohmann::json::array();
  for (std::size_t n = 0; n < ds.clients.size(); ++n) {
    const ClientSplit& cs = ds.clients[n];
    sizes.push_back({{"train", cs.train.size()}, {"test", cs.test.size()}});
    auto pack = [&](const std::vector<Sample>& split, const std::string& prefix,
                    std::vector<std::pair<std::string, const Tensor*>>& list, std::vector<Tensor>& keep) {
      Tensor images({split.size(), kImageChannels, kImageSide, kImageSide});
      Tensor labels({split.size()});
      Tensor ids({split.size()});
      const std::size_t stride = kImageChannels * kImageSide * kImageSide;
      for (std::size_t i = 0; i < split.size(); ++i) {
        for (std::size_t k = 0; k < stride; ++k) images[i * stride + k] = split[i].image[k];
        labels[i] = split[i].label;
        ids[i] = static_cast<double>(split[i].id);
      }
      keep.push_back(std::move(images));
      keep.push_back(std::move(labels));
      keep.push_back(std::move(ids));
      list.emplace_back(prefix + "images", &keep[keep.size() - 3]);
      list.emplace_back(prefix + "labels", &keep[keep.size() - 2]);
      list.emplace_back(prefix + "ids", &keep[keep.size() - 1]);
    };
    std::vector<std::pair<std::string, const Tensor*>> list;
    std::vector<Tensor> keep;
    keep.reserve(6);
    pack(cs.train, "train_", list, keep);
    pack(cs.test, "test_", list, keep);
    container::save(dir / ("client" + std::to_string(n) + ".bin"), list);
  }
  manifest["split_sizes"] = sizes;
  std::ofstream mf(dir / "manifest.json", std::ios::trunc);
  if (!mf) throw std::runtime_error("export: cannot write " + (dir / "manifest.json").string());
  mf << manifest.dump(2) << "\n";
}

}  // namespace pfed
