#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "pfed/rng.hpp"
#include "pfed/tensor.hpp"

namespace pfed {

constexpr std::size_t kImageSide = 16;
constexpr std::size_t kImageChannels = 3;

struct Sample {
  Tensor image;  // channels x side x side
  int label = 0;
  std::size_t id = 0;  // pooled index, stable across partitioning
};

struct ClientSplit {
  std::vector<Sample> train;
  std::vector<Sample> test;
};

// Invertible per-client appearance shift: hue rotation about the gray axis,
// contrast scaling around 0.5, and a quarter-turn spatial rotation.
struct DomainMap {
  double hue_angle = 0.0;
  double contrast = 1.0;
  int quarter_turns = 0;
};

struct RepairEvent {
  int from_client = -1;
  int to_client = -1;
  std::size_t sample_id = 0;
};

struct PartitionSpec {
  enum class Regime { DomainShift, DisjointLabels, Dirichlet };
  Regime regime = Regime::Dirichlet;
  int clients = 10;
  double alpha = 0.1;           // Dirichlet concentration
  int classes_per_client = 2;   // DisjointLabels
  double domain_strength = 1.0; // DomainShift; 0 = identity maps
  std::uint64_t seed = 1;
};

inline std::string regime_name(PartitionSpec::Regime r) {
  switch (r) {
    case PartitionSpec::Regime::DomainShift: return "domains";
    case PartitionSpec::Regime::DisjointLabels: return "disjoint";
    case PartitionSpec::Regime::Dirichlet: return "dirichlet";
  }
  return "?";
}

struct FedDataset {
  std::vector<ClientSplit> clients;
  int classes = 0;
  PartitionSpec spec;
  std::vector<DomainMap> domains;  // per client, DomainShift only
  std::vector<RepairEvent> repairs;
};

namespace detail {

// Ten 16x16 binary masks; classes cycle through them with per-class colors.
inline bool shape_mask(int shape, std::size_t y, std::size_t x) {
  const double cy = y - 7.5, cx = x - 7.5;
  const double r2 = cy * cy + cx * cx;
  switch (shape % 10) {
    case 0: return r2 <= 30.0;                                  // disc
    case 1: return r2 >= 12.0 && r2 <= 34.0;                    // ring
    case 2: return y >= 4 && y < 12 && x >= 4 && x < 12;        // square
    case 3: return (y >= 7 && y < 9) || (x >= 7 && x < 9);      // cross
    case 4: return std::abs(static_cast<int>(y) - static_cast<int>(x)) <= 1 ||
                   std::abs(static_cast<int>(y) + static_cast<int>(x) - 15) <= 1;  // X
    case 5: return (y / 3) % 2 == 0;                            // horizontal stripes
    case 6: return (x / 3) % 2 == 0;                            // vertical stripes
    case 7: return ((x + y) / 3) % 2 == 0;                      // diagonal stripes
    case 8: return static_cast<int>(x) <= static_cast<int>(y);  // lower triangle
    case 9: return ((y / 4) + (x / 4)) % 2 == 0;                // checkerboard
  }
  return false;
}

inline Tensor class_template(int label, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x7e3c, static_cast<std::uint64_t>(label)));
  double fg[3], bg[3];
  for (double& v : fg) v = rng.uniform(0.55, 0.95);
  for (double& v : bg) v = rng.uniform(0.05, 0.45);
  Tensor img({kImageChannels, kImageSide, kImageSide});
  for (std::size_t c = 0; c < kImageChannels; ++c)
    for (std::size_t y = 0; y < kImageSide; ++y)
      for (std::size_t x = 0; x < kImageSide; ++x)
        img[c * kImageSide * kImageSide + y * kImageSide + x] = shape_mask(label, y, x) ? fg[c] : bg[c];
  return img;
}

// Rotation matrix about the unit (1,1,1) axis.
inline void hue_matrix(double angle, double m[3][3]) {
  const double c = std::cos(angle), s = std::sin(angle);
  const double a = 1.0 / 3.0;
  const double sq = std::sqrt(1.0 / 3.0);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) m[i][j] = a * (1.0 - c) + (i == j ? c : 0.0);
  m[0][1] -= sq * s; m[0][2] += sq * s;
  m[1][0] += sq * s; m[1][2] -= sq * s;
  m[2][0] -= sq * s; m[2][1] += sq * s;
}

inline Tensor rotate_quarter(const Tensor& img, int turns) {
  turns = ((turns % 4) + 4) % 4;
  if (turns == 0) return img;
  Tensor out(img.shape());
  const std::size_t n = kImageSide;
  for (std::size_t c = 0; c < kImageChannels; ++c)
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x) {
        std::size_t sy = y, sx = x;
        // destination (y,x) pulled from source rotated back
        switch (turns) {
          case 1: sy = n - 1 - x; sx = y; break;
          case 2: sy = n - 1 - y; sx = n - 1 - x; break;
          case 3: sy = x; sx = n - 1 - y; break;
        }
        out[c * n * n + y * n + x] = img[c * n * n + sy * n + sx];
      }
  return out;
}

inline Tensor apply_color(const Tensor& img, const double m[3][3], double contrast) {
  Tensor out(img.shape());
  const std::size_t hw = kImageSide * kImageSide;
  for (std::size_t p = 0; p < hw; ++p) {
    double rgb[3];
    for (std::size_t c = 0; c < 3; ++c) rgb[c] = img[c * hw + p];
    for (std::size_t c = 0; c < 3; ++c) {
      double v = m[c][0] * rgb[0] + m[c][1] * rgb[1] + m[c][2] * rgb[2];
      out[c * hw + p] = contrast * (v - 0.5) + 0.5;
    }
  }
  return out;
}

inline std::map<int, std::vector<std::size_t>> by_class(const std::vector<Sample>& pooled) {
  std::map<int, std::vector<std::size_t>> m;
  for (std::size_t i = 0; i < pooled.size(); ++i) m[pooled[i].label].push_back(i);
  return m;
}

// Per-class stratified train/test split; keeps at least one train sample per
// held class and repairs clients that would end up without a test sample.
inline ClientSplit split_client(std::vector<Sample> samples, double test_fraction, Rng& rng) {
  std::map<int, std::vector<Sample>> classes;
  for (auto& s : samples) classes[s.label].push_back(std::move(s));
  ClientSplit out;
  for (auto& [label, group] : classes) {
    rng.shuffle(group);
    std::size_t n_test = group.size() >= 2
                             ? std::max<std::size_t>(1, static_cast<std::size_t>(test_fraction * group.size()))
                             : 0;
    if (n_test >= group.size()) n_test = group.size() - 1;
    for (std::size_t i = 0; i < group.size(); ++i)
      (i < n_test ? out.test : out.train).push_back(std::move(group[i]));
  }
  if (out.test.empty() && out.train.size() >= 2) {
    out.test.push_back(std::move(out.train.back()));
    out.train.pop_back();
  }
  return out;
}

inline void require_clients(const FedDataset& ds) {
  for (std::size_t n = 0; n < ds.clients.size(); ++n)
    if (ds.clients[n].train.empty() || ds.clients[n].test.empty())
      throw std::runtime_error("partition: client " + std::to_string(n) + " has an empty split");
}

}  // namespace detail

// Class-conditional synthetic task: one colored-shape template per class on a
// 16x16x3 canvas plus additive Gaussian pixel noise. Deterministic per seed.
inline std::vector<Sample> gen_base_task(int classes, int per_class, std::uint64_t seed, double noise_std = 0.1) {
  if (classes < 2) throw std::invalid_argument("gen_base_task: need at least 2 classes");
  if (per_class < 1) throw std::invalid_argument("gen_base_task: need at least 1 sample per class");
  std::vector<Sample> pooled;
  pooled.reserve(static_cast<std::size_t>(classes) * per_class);
  std::size_t id = 0;
  for (int cls = 0; cls < classes; ++cls) {
    const Tensor tpl = detail::class_template(cls, seed);
    Rng rng(derive_seed(seed, 0x5a3b, static_cast<std::uint64_t>(cls), 1));
    for (int k = 0; k < per_class; ++k, ++id) {
      Tensor img = tpl;
      if (noise_std > 0.0)
        for (std::size_t i = 0; i < img.numel(); ++i) img[i] += rng.normal(0.0, noise_std);
      pooled.push_back(Sample{std::move(img), cls, id});
    }
  }
  return pooled;
}

inline bool is_identity(const DomainMap& d) {
  return d.hue_angle == 0.0 && d.contrast == 1.0 && d.quarter_turns % 4 == 0;
}

inline Tensor apply_domain(const DomainMap& d, const Tensor& image) {
  if (is_identity(d)) return image;
  double m[3][3];
  detail::hue_matrix(d.hue_angle, m);
  return detail::rotate_quarter(detail::apply_color(image, m, d.contrast), d.quarter_turns);
}

inline Tensor invert_domain(const DomainMap& d, const Tensor& image) {
  if (is_identity(d)) return image;
  Tensor out = detail::rotate_quarter(image, -d.quarter_turns);
  double m[3][3];
  detail::hue_matrix(-d.hue_angle, m);
  const std::size_t hw = kImageSide * kImageSide;
  Tensor res(out.shape());
  for (std::size_t p = 0; p < hw; ++p) {
    double rgb[3];
    for (std::size_t c = 0; c < 3; ++c) rgb[c] = (out[c * hw + p] - 0.5) / d.contrast + 0.5;
    for (std::size_t c = 0; c < 3; ++c) res[c * hw + p] = m[c][0] * rgb[0] + m[c][1] * rgb[1] + m[c][2] * rgb[2];
  }
  return res;
}

// Domain-discrepancy regime: balanced per-class round-robin assignment, then a
// client-specific invertible domain map over every assigned sample.
inline FedDataset make_domains(const std::vector<Sample>& pooled, int n_clients, std::uint64_t seed,
                               double strength = 1.0, double test_fraction = 0.25) {
  if (n_clients < 2) throw std::invalid_argument("make_domains: need at least 2 clients");
  FedDataset ds;
  ds.spec = PartitionSpec{PartitionSpec::Regime::DomainShift, n_clients, 0.0, 0, strength, seed};
  ds.clients.resize(n_clients);
  auto classes = detail::by_class(pooled);
  ds.classes = static_cast<int>(classes.size());

  for (int n = 0; n < n_clients; ++n) {
    Rng rng(derive_seed(seed, 0xd0a1, static_cast<std::uint64_t>(n)));
    DomainMap d;
    d.hue_angle = strength * rng.uniform(0.0, 2.0 * 3.14159265358979323846);
    d.contrast = 1.0 + strength * rng.uniform(-0.3, 0.3);
    d.quarter_turns = strength > 0.0 ? static_cast<int>(rng.uniform_int(0, 3)) : 0;
    ds.domains.push_back(d);
  }

  std::vector<std::vector<Sample>> assigned(n_clients);
  Rng order_rng(derive_seed(seed, 0xd0a2));
  for (auto& [label, idx] : classes) {
    order_rng.shuffle(idx);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const int n = static_cast<int>(i % n_clients);
      Sample s = pooled[idx[i]];
      s.image = apply_domain(ds.domains[n], s.image);
      assigned[n].push_back(std::move(s));
    }
  }
  for (int n = 0; n < n_clients; ++n) {
    Rng rng(derive_seed(seed, 0xd0a3, static_cast<std::uint64_t>(n)));
    ds.clients[n] = detail::split_client(std::move(assigned[n]), test_fraction, rng);
  }
  detail::require_clients(ds);
  return ds;
}

// Disjoint-label regime: each client holds exactly `per_client` classes and
// no class appears at two clients.
inline FedDataset partition_disjoint(const std::vector<Sample>& pooled, int n_clients, int per_client,
                                     std::uint64_t seed, double test_fraction = 0.25) {
  auto classes = detail::by_class(pooled);
  const int y = static_cast<int>(classes.size());
  if (n_clients < 1 || per_client < 1) throw std::invalid_argument("partition_disjoint: bad client/class counts");
  if (per_client * n_clients > y)
    throw std::invalid_argument("partition_disjoint: " + std::to_string(n_clients) + " clients x " +
                                std::to_string(per_client) + " classes exceeds " + std::to_string(y) + " classes");
  FedDataset ds;
  ds.spec = PartitionSpec{PartitionSpec::Regime::DisjointLabels, n_clients, 0.0, per_client, 0.0, seed};
  ds.classes = y;
  ds.clients.resize(n_clients);

  std::vector<int> labels;
  for (auto& [label, idx] : classes) labels.push_back(label);
  Rng rng(derive_seed(seed, 0xd15c));
  rng.shuffle(labels);

  for (int n = 0; n < n_clients; ++n) {
    std::vector<Sample> mine;
    for (int k = 0; k < per_client; ++k) {
      const int label = labels[static_cast<std::size_t>(n) * per_client + k];
      for (std::size_t i : classes[label]) mine.push_back(pooled[i]);
    }
    Rng srng(derive_seed(seed, 0xd15d, static_cast<std::uint64_t>(n)));
    ds.clients[n] = detail::split_client(std::move(mine), test_fraction, srng);
  }
  detail::require_clients(ds);
  return ds;
}

// Dirichlet regime: per class, client shares drawn from Dir(alpha) and
// converted to exact counts by largest remainder. Clients left with fewer
// than two samples are topped up from the largest holder (recorded).
inline FedDataset partition_dirichlet(const std::vector<Sample>& pooled, int n_clients, double alpha,
                                      std::uint64_t seed, double test_fraction = 0.25) {
  if (alpha <= 0.0) throw std::invalid_argument("partition_dirichlet: alpha must be positive");
  if (n_clients < 2) throw std::invalid_argument("partition_dirichlet: need at least 2 clients");
  auto classes = detail::by_class(pooled);
  FedDataset ds;
  ds.spec = PartitionSpec{PartitionSpec::Regime::Dirichlet, n_clients, alpha, 0, 0.0, seed};
  ds.classes = static_cast<int>(classes.size());
  ds.clients.resize(n_clients);

  std::vector<std::vector<Sample>> assigned(n_clients);
  for (auto& [label, idx] : classes) {
    Rng rng(derive_seed(seed, 0xd321, static_cast<std::uint64_t>(label)));
    std::vector<double> props(n_clients);
    double total = 0.0;
    for (double& p : props) {
      p = std::max(rng.gamma(alpha), 1e-300);
      total += p;
    }
    for (double& p : props) p /= total;

    // largest-remainder rounding: counts sum to the class total exactly
    const std::size_t m = idx.size();
    std::vector<std::size_t> counts(n_clients);
    std::vector<std::pair<double, int>> rem;
    std::size_t used = 0;
    for (int n = 0; n < n_clients; ++n) {
      const double exact = props[n] * static_cast<double>(m);
      counts[n] = static_cast<std::size_t>(exact);
      used += counts[n];
      rem.push_back({exact - static_cast<double>(counts[n]), n});
    }
    std::sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) {
      return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    for (std::size_t k = 0; used < m; ++k, ++used) ++counts[rem[k % rem.size()].second];

    rng.shuffle(idx);
    std::size_t at = 0;
    for (int n = 0; n < n_clients; ++n)
      for (std::size_t k = 0; k < counts[n]; ++k) assigned[n].push_back(pooled[idx[at++]]);
  }

  // repair: every client needs >= 2 samples to form train+test splits
  for (int n = 0; n < n_clients; ++n) {
    while (assigned[n].size() < 2) {
      int donor = -1;
      std::size_t best = 0;
      for (int m2 = 0; m2 < n_clients; ++m2)
        if (m2 != n && assigned[m2].size() > best && assigned[m2].size() > 2) {
          best = assigned[m2].size();
          donor = m2;
        }
      if (donor < 0) throw std::runtime_error("partition_dirichlet: not enough samples to repair empty client");
      ds.repairs.push_back(RepairEvent{donor, n, assigned[donor].back().id});
      assigned[n].push_back(std::move(assigned[donor].back()));
      assigned[donor].pop_back();
    }
  }

  for (int n = 0; n < n_clients; ++n) {
    Rng rng(derive_seed(seed, 0xd322, static_cast<std::uint64_t>(n)));
    ds.clients[n] = detail::split_client(std::move(assigned[n]), test_fraction, rng);
  }
  detail::require_clients(ds);
  return ds;
}

// Stratified split of the pooled task into a central pretraining set and the
// remaining federated pool. The two never share a sample id.
inline std::pair<std::vector<Sample>, std::vector<Sample>> make_pretrain_split(const std::vector<Sample>& pooled,
                                                                               double fraction, std::uint64_t seed) {
  if (fraction <= 0.0 || fraction >= 1.0) throw std::invalid_argument("make_pretrain_split: fraction must be in (0,1)");
  auto classes = detail::by_class(pooled);
  std::vector<Sample> pre, rest;
  for (auto& [label, idx] : classes) {
    Rng rng(derive_seed(seed, 0x9e7a, static_cast<std::uint64_t>(label)));
    rng.shuffle(idx);
    const std::size_t k = static_cast<std::size_t>(fraction * static_cast<double>(idx.size()) + 0.5);
    for (std::size_t i = 0; i < idx.size(); ++i) (i < k ? pre : rest).push_back(pooled[idx[i]]);
  }
  return {std::move(pre), std::move(rest)};
}

}  // namespace pfed
