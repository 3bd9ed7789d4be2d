#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "pfed/encoder.hpp"
#include "pfed/server.hpp"

namespace pfed {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Flat key-value experiment description. Unknown keys are errors; the file
// representation round-trips losslessly through parse/serialize.
struct ExperimentConfig {
  std::string strategy = "pfedpg";
  std::size_t clients = 10;       // N
  std::size_t prompts = 10;       // K
  std::size_t rounds = 30;        // T (reference setting uses 100)
  std::size_t attn_dim = 32;      // l_k
  std::size_t value_dim = 32;     // l_v
  std::size_t mlp_hidden = 32;    // hidden width of the MLP generator
  double client_lr = 0.25;
  double server_lr = 0.001;
  double weight_decay = 0.001;
  std::size_t batch_size = 64;
  std::size_t local_epochs = 5;
  bool literal_sign = false;
  std::string server_update_mode = "sequential";  // or "averaged"
  double generator_init_std = 0.02;
  bool reset_head_each_round = false;
  std::size_t workers = 2;

  std::size_t image_side = 16;
  std::size_t channels = 3;
  std::size_t patch_side = 4;
  std::size_t embed_dim = 32;  // l
  std::size_t depth = 2;
  std::size_t heads = 2;
  double mlp_ratio = 2.0;
  std::string encoder_mode = "pretrained";  // or "random"
  std::string encoder_weights;              // optional container path; empty = pretrain inline
  double pretrain_fraction = 0.5;
  std::size_t pretrain_epochs = 10;
  double pretrain_lr = 0.05;
  std::size_t pretrain_batch = 64;

  std::size_t classes = 20;  // Y
  std::size_t samples_per_class = 50;
  double noise_std = 0.1;
  std::string partition = "dirichlet";  // dirichlet | disjoint | domains
  double dirichlet_alpha = 0.1;
  std::size_t disjoint_classes = 2;  // c
  double domain_strength = 1.0;
  double test_fraction = 0.25;

  std::uint64_t seed_data = 1;
  std::uint64_t seed_model = 2;
  std::uint64_t seed_train = 3;
  std::string output_dir = "runs";

  bool operator==(const ExperimentConfig&) const = default;

  EncoderConfig encoder_config() const {
    return EncoderConfig{image_side, channels, patch_side, embed_dim, depth, heads, mlp_ratio, seed_model};
  }

  GeneratorKind kind() const { return strategy_from_name(strategy); }

  void validate() const {
    kind();  // throws on unknown strategy
    if (rounds < 1) throw ConfigError("config: rounds must be >= 1");
    if (prompts < 1) throw ConfigError("config: prompts must be >= 1");
    if (clients < 1) throw ConfigError("config: clients must be >= 1");
    if (client_lr < 0.0) throw ConfigError("config: client_lr must be >= 0");
    if (server_lr <= 0.0) throw ConfigError("config: server_lr must be > 0");
    if (weight_decay < 0.0) throw ConfigError("config: weight_decay must be >= 0");
    if (batch_size < 1 || local_epochs < 1) throw ConfigError("config: batch_size and local_epochs must be >= 1");
    if (workers < 1) throw ConfigError("config: workers must be >= 1");
    if (generator_init_std <= 0.0) throw ConfigError("config: generator_init_std must be > 0");
    if (server_update_mode != "sequential" && server_update_mode != "averaged")
      throw ConfigError("config: server_update_mode must be sequential|averaged");
    if (encoder_mode != "pretrained" && encoder_mode != "random")
      throw ConfigError("config: encoder_mode must be pretrained|random");
    if (partition != "dirichlet" && partition != "disjoint" && partition != "domains")
      throw ConfigError("config: partition must be dirichlet|disjoint|domains");
    if (classes < 2) throw ConfigError("config: classes must be >= 2");
    if (image_side != 16 || channels != 3)
      throw ConfigError("config: the synthetic task canvas is fixed at 3x16x16 (image_side=16, channels=3)");
    if (partition == "disjoint" && disjoint_classes * clients > classes)
      throw ConfigError("config: disjoint_classes * clients exceeds classes");
    if (test_fraction <= 0.0 || test_fraction >= 1.0) throw ConfigError("config: test_fraction must be in (0,1)");
    if (encoder_mode == "pretrained" && (pretrain_fraction <= 0.0 || pretrain_fraction >= 1.0))
      throw ConfigError("config: pretrain_fraction must be in (0,1)");
    encoder_config().validate();
  }
};

namespace detail {

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

struct KeyBinding {
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

inline const std::vector<std::pair<std::string, KeyBinding>>& config_keys() {
  auto str = [](std::string ExperimentConfig::*f) {
    return KeyBinding{[f](ExperimentConfig& c, const std::string& v) { c.*f = v; },
                      [f](const ExperimentConfig& c) { return c.*f; }};
  };
  auto num = [](std::size_t ExperimentConfig::*f) {
    return KeyBinding{[f](ExperimentConfig& c, const std::string& v) {
                        std::size_t pos = 0;
                        unsigned long long parsed = std::stoull(v, &pos);
                        if (pos != v.size()) throw ConfigError("config: expected integer, got '" + v + "'");
                        c.*f = parsed;
                      },
                      [f](const ExperimentConfig& c) { return std::to_string(c.*f); }};
  };
  auto u64 = [](std::uint64_t ExperimentConfig::*f) {
    return KeyBinding{[f](ExperimentConfig& c, const std::string& v) {
                        std::size_t pos = 0;
                        c.*f = std::stoull(v, &pos);
                        if (pos != v.size()) throw ConfigError("config: expected integer, got '" + v + "'");
                      },
                      [f](const ExperimentConfig& c) { return std::to_string(c.*f); }};
  };
  auto dbl = [](double ExperimentConfig::*f) {
    return KeyBinding{[f](ExperimentConfig& c, const std::string& v) {
                        std::size_t pos = 0;
                        c.*f = std::stod(v, &pos);
                        if (pos != v.size()) throw ConfigError("config: expected number, got '" + v + "'");
                      },
                      [f](const ExperimentConfig& c) { return fmt_double(c.*f); }};
  };
  auto boolean = [](bool ExperimentConfig::*f) {
    return KeyBinding{[f](ExperimentConfig& c, const std::string& v) {
                        if (v == "true") c.*f = true;
                        else if (v == "false") c.*f = false;
                        else throw ConfigError("config: expected true|false, got '" + v + "'");
                      },
                      [f](const ExperimentConfig& c) { return c.*f ? "true" : "false"; }};
  };

  static const std::vector<std::pair<std::string, KeyBinding>> keys = {
      {"strategy", str(&ExperimentConfig::strategy)},
      {"clients", num(&ExperimentConfig::clients)},
      {"prompts", num(&ExperimentConfig::prompts)},
      {"rounds", num(&ExperimentConfig::rounds)},
      {"attn_dim", num(&ExperimentConfig::attn_dim)},
      {"value_dim", num(&ExperimentConfig::value_dim)},
      {"mlp_hidden", num(&ExperimentConfig::mlp_hidden)},
      {"client_lr", dbl(&ExperimentConfig::client_lr)},
      {"server_lr", dbl(&ExperimentConfig::server_lr)},
      {"weight_decay", dbl(&ExperimentConfig::weight_decay)},
      {"batch_size", num(&ExperimentConfig::batch_size)},
      {"local_epochs", num(&ExperimentConfig::local_epochs)},
      {"literal_sign", boolean(&ExperimentConfig::literal_sign)},
      {"server_update_mode", str(&ExperimentConfig::server_update_mode)},
      {"generator_init_std", dbl(&ExperimentConfig::generator_init_std)},
      {"reset_head_each_round", boolean(&ExperimentConfig::reset_head_each_round)},
      {"workers", num(&ExperimentConfig::workers)},
      {"image_side", num(&ExperimentConfig::image_side)},
      {"channels", num(&ExperimentConfig::channels)},
      {"patch_side", num(&ExperimentConfig::patch_side)},
      {"embed_dim", num(&ExperimentConfig::embed_dim)},
      {"depth", num(&ExperimentConfig::depth)},
      {"heads", num(&ExperimentConfig::heads)},
      {"mlp_ratio", dbl(&ExperimentConfig::mlp_ratio)},
      {"encoder_mode", str(&ExperimentConfig::encoder_mode)},
      {"encoder_weights", str(&ExperimentConfig::encoder_weights)},
      {"pretrain_fraction", dbl(&ExperimentConfig::pretrain_fraction)},
      {"pretrain_epochs", num(&ExperimentConfig::pretrain_epochs)},
      {"pretrain_lr", dbl(&ExperimentConfig::pretrain_lr)},
      {"pretrain_batch", num(&ExperimentConfig::pretrain_batch)},
      {"classes", num(&ExperimentConfig::classes)},
      {"samples_per_class", num(&ExperimentConfig::samples_per_class)},
      {"noise_std", dbl(&ExperimentConfig::noise_std)},
      {"partition", str(&ExperimentConfig::partition)},
      {"dirichlet_alpha", dbl(&ExperimentConfig::dirichlet_alpha)},
      {"disjoint_classes", num(&ExperimentConfig::disjoint_classes)},
      {"domain_strength", dbl(&ExperimentConfig::domain_strength)},
      {"test_fraction", dbl(&ExperimentConfig::test_fraction)},
      {"seed_data", u64(&ExperimentConfig::seed_data)},
      {"seed_model", u64(&ExperimentConfig::seed_model)},
      {"seed_train", u64(&ExperimentConfig::seed_train)},
      {"output_dir", str(&ExperimentConfig::output_dir)},
  };
  return keys;
}

inline std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace detail

inline ExperimentConfig parse_config(std::istream& in, const std::string& origin = "<stream>") {
  ExperimentConfig cfg;
  std::string line;
  std::size_t line_no = 0;
  std::map<std::string, bool> seen;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string where = origin + ":" + std::to_string(line_no);
    std::string s = line;
    if (auto hash = s.find('#'); hash != std::string::npos) s = s.substr(0, hash);
    s = detail::trim(s);
    if (s.empty()) continue;
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value', got '" + detail::trim(line) + "'");
    const std::string key = detail::trim(s.substr(0, eq));
    const std::string value = detail::trim(s.substr(eq + 1));
    bool matched = false;
    for (const auto& [name, binding] : detail::config_keys()) {
      if (name == key) {
        if (seen[key]) throw ConfigError(where + ": duplicate key '" + key + "'");
        seen[key] = true;
        try {
          binding.set(cfg, value);
        } catch (const ConfigError& e) {
          throw ConfigError(where + ": " + e.what());
        } catch (const std::exception&) {
          throw ConfigError(where + ": bad value '" + value + "' for key '" + key + "'");
        }
        matched = true;
        break;
      }
    }
    if (!matched) throw ConfigError(where + ": unknown key '" + key + "'");
  }
  cfg.validate();
  return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open '" + path + "'");
  return parse_config(in, path);
}

inline std::string serialize_config(const ExperimentConfig& cfg) {
  std::ostringstream os;
  for (const auto& [name, binding] : detail::config_keys()) os << name << " = " << binding.get(cfg) << "\n";
  return os.str();
}

inline std::string config_hash(const ExperimentConfig& cfg) {
  const std::string s = serialize_config(cfg);
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf).substr(0, 12);
}

}  // namespace pfed
