#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "pfed/client.hpp"
#include "pfed/rng.hpp"
#include "pfed/tape.hpp"

namespace pfed {

enum class GeneratorKind {
  CrossAttention,  // pfedpg: base prompts + descriptor-queried cross-attention
  Mlp,             // pfedpg_mlp: descriptor -> prompts through a two-layer MLP
  AdaIn,           // pfedpg_adain: restyle base prompts with descriptor statistics
  GlobalAverage,   // fedvpt: weighted prompt averaging
  LocalOnly,       // no server participation
  BaseOnly         // trains like CrossAttention, deploys the base prompts
};

inline bool uses_pseudo_gradient(GeneratorKind k) {
  return k == GeneratorKind::CrossAttention || k == GeneratorKind::Mlp || k == GeneratorKind::AdaIn ||
         k == GeneratorKind::BaseOnly;
}

inline std::string strategy_name(GeneratorKind k) {
  switch (k) {
    case GeneratorKind::CrossAttention: return "pfedpg";
    case GeneratorKind::Mlp: return "pfedpg_mlp";
    case GeneratorKind::AdaIn: return "pfedpg_adain";
    case GeneratorKind::GlobalAverage: return "fedvpt";
    case GeneratorKind::LocalOnly: return "local_only";
    case GeneratorKind::BaseOnly: return "base_only";
  }
  return "?";
}

inline GeneratorKind strategy_from_name(const std::string& s) {
  if (s == "pfedpg") return GeneratorKind::CrossAttention;
  if (s == "pfedpg_mlp") return GeneratorKind::Mlp;
  if (s == "pfedpg_adain") return GeneratorKind::AdaIn;
  if (s == "fedvpt") return GeneratorKind::GlobalAverage;
  if (s == "local_only") return GeneratorKind::LocalOnly;
  if (s == "base_only") return GeneratorKind::BaseOnly;
  throw std::invalid_argument("unknown strategy '" + s + "'");
}

struct ServerOptions {
  double lr = 0.001;            // step for generator, base prompts, descriptors
  bool literal_sign = false;    // use +delta as the pseudo-gradient instead of -delta
  bool average_updates = false; // average shared-parameter updates across clients
  double init_std = kWeightInitStd;
};

constexpr double kAdaInSigmaFloor = 1e-6;

// Server-side prompt generation state. Which fields are live depends on kind;
// descriptors exist for every personalized-generation variant.
struct GeneratorState {
  GeneratorKind kind = GeneratorKind::CrossAttention;
  int clients = 0;
  std::size_t prompt_count = 0;  // K
  std::size_t embed_dim = 0;     // l
  std::size_t attn_dim = 0;      // l_k
  std::size_t value_dim = 0;     // l_v
  std::size_t mlp_hidden = 0;
  ServerOptions opt;

  Tensor p_base;              // K x l
  std::vector<Tensor> desc;   // per client, length l
  Tensor wq, wk, wv, wo;      // l x l_k, l x l_k, l x l_v, l_v x l
  Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
  Tensor global_prompts;      // K x l (GlobalAverage)

  template <class Self, class F>
  static void visit(Self& self, F&& f) {
    f("p_base", self.p_base);
    for (std::size_t n = 0; n < self.desc.size(); ++n) f("desc" + std::to_string(n), self.desc[n]);
    f("wq", self.wq);
    f("wk", self.wk);
    f("wv", self.wv);
    f("wo", self.wo);
    f("mlp_w1", self.mlp_w1);
    f("mlp_b1", self.mlp_b1);
    f("mlp_w2", self.mlp_w2);
    f("mlp_b2", self.mlp_b2);
    f("global_prompts", self.global_prompts);
  }
  template <class F>
  void for_each_tensor(F&& f) {
    visit(*this, std::forward<F>(f));
  }
  template <class F>
  void for_each_tensor(F&& f) const {
    visit(*this, std::forward<F>(f));
  }

  void require_client(int n) const {
    if (n < 0 || n >= clients)
      throw std::out_of_range("server: client id " + std::to_string(n) + " out of range [0," + std::to_string(clients) + ")");
  }
};

inline GeneratorState init_server(GeneratorKind kind, int clients, std::size_t prompt_count, std::size_t embed_dim,
                                  std::size_t attn_dim, std::size_t value_dim, std::size_t mlp_hidden,
                                  std::uint64_t seed, ServerOptions opt = {}) {
  if (clients < 1) throw std::invalid_argument("init_server: need at least one client");
  if (prompt_count < 1) throw std::invalid_argument("init_server: need at least one prompt token");
  if (attn_dim < 1 || value_dim < 1) throw std::invalid_argument("init_server: internal dims must be positive");
  GeneratorState g;
  g.kind = kind;
  g.clients = clients;
  g.prompt_count = prompt_count;
  g.embed_dim = embed_dim;
  g.attn_dim = attn_dim;
  g.value_dim = value_dim;
  g.mlp_hidden = mlp_hidden;
  g.opt = opt;

  const double std = opt.init_std;
  Rng rng(derive_seed(seed, 0x5e17e5));
  g.p_base = randn({prompt_count, embed_dim}, rng, std);
  g.desc.reserve(clients);
  for (int n = 0; n < clients; ++n) {
    Rng drng(derive_seed(seed, 0xdec0, static_cast<std::uint64_t>(n)));
    g.desc.push_back(randn({1, embed_dim}, drng, std));
  }
  g.wq = randn({embed_dim, attn_dim}, rng, std);
  g.wk = randn({embed_dim, attn_dim}, rng, std);
  g.wv = randn({embed_dim, value_dim}, rng, std);
  g.wo = randn({value_dim, embed_dim}, rng, std);
  g.mlp_w1 = randn({embed_dim, mlp_hidden}, rng, std);
  g.mlp_b1 = Tensor({mlp_hidden});
  g.mlp_w2 = randn({mlp_hidden, prompt_count * embed_dim}, rng, std);
  g.mlp_b2 = Tensor({prompt_count * embed_dim});
  Rng grng(derive_seed(seed, 0x91061a1));
  g.global_prompts = randn({prompt_count, embed_dim}, grng, std);
  return g;
}

namespace detail {

struct GenVars {
  Var p_base, d, wq, wk, wv, wo;
  Var mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

inline GenVars bind_generator(GradTape& t, const GeneratorState& g, int n, bool trainable) {
  auto bind = [&](const Tensor& x) { return trainable ? t.leaf(x) : t.constant(x); };
  GenVars v;
  v.d = bind(g.desc[static_cast<std::size_t>(n)]);
  if (g.kind == GeneratorKind::Mlp) {
    v.mlp_w1 = bind(g.mlp_w1);
    v.mlp_b1 = bind(g.mlp_b1);
    v.mlp_w2 = bind(g.mlp_w2);
    v.mlp_b2 = bind(g.mlp_b2);
  } else {
    v.p_base = bind(g.p_base);
    if (g.kind == GeneratorKind::CrossAttention || g.kind == GeneratorKind::BaseOnly) {
      v.wq = bind(g.wq);
      v.wk = bind(g.wk);
      v.wv = bind(g.wv);
      v.wo = bind(g.wo);
    }
  }
  return v;
}

// Single-query cross-attention over the base prompts:
//   q = d W_q, k = P_base W_k, v = P_base W_v
//   a = softmax(q k^T / sqrt(l_k)) v W_o   (1 x l)
// and the row a is added to every base prompt row.
inline Var generate_cross_attention(GradTape& t, const GenVars& v, const GeneratorState& g) {
  Var q = t.matmul(v.d, v.wq);
  Var k = t.matmul(v.p_base, v.wk);
  Var val = t.matmul(v.p_base, v.wv);
  Var scores = t.scale(t.matmul(q, t.transpose(k)), 1.0 / std::sqrt(static_cast<double>(g.attn_dim)));
  Var row = t.matmul(t.matmul(t.softmax_rows(scores), val), v.wo);
  Var ones = t.constant(Tensor::full({g.prompt_count, 1}, 1.0));
  return t.add(v.p_base, t.matmul(ones, row));
}

inline Var generate_mlp(GradTape& t, const GenVars& v, const GeneratorState& g) {
  Var h = t.gelu(t.add_rowvec(t.matmul(v.d, v.mlp_w1), v.mlp_b1));
  Var flat = t.add_rowvec(t.matmul(h, v.mlp_w2), v.mlp_b2);
  return t.reshape(flat, {g.prompt_count, g.embed_dim});
}

// Restyle: P = sigma(d) * (P_base - mu(P_base)) / sigma(P_base) + mu(d), with
// scalar statistics over all entries of each operand.
inline Var generate_adain(GradTape& t, const GenVars& v, const GeneratorState& g) {
  Var mu_b = t.mean_all(v.p_base);
  Var sig_b = t.std_all(v.p_base, kAdaInSigmaFloor);
  Var mu_d = t.mean_all(v.d);
  Var sig_d = t.std_all(v.d, 0.0);
  Var norm = t.sdiv(t.ssub(v.p_base, mu_b), sig_b);
  return t.sadd(t.smul(norm, sig_d), mu_d);
}

inline Var generate_traced(GradTape& t, const GenVars& v, const GeneratorState& g) {
  switch (g.kind) {
    case GeneratorKind::CrossAttention:
    case GeneratorKind::BaseOnly: return generate_cross_attention(t, v, g);
    case GeneratorKind::Mlp: return generate_mlp(t, v, g);
    case GeneratorKind::AdaIn: return generate_adain(t, v, g);
    case GeneratorKind::GlobalAverage:
    case GeneratorKind::LocalOnly: break;
  }
  throw std::logic_error("generate: strategy '" + strategy_name(g.kind) + "' does not generate per-client prompts");
}

}  // namespace detail

inline Tensor generate_prompts(const GeneratorState& g, int n) {
  g.require_client(n);
  if (g.kind == GeneratorKind::GlobalAverage) return g.global_prompts;
  GradTape t;
  auto v = detail::bind_generator(t, g, n, /*trainable=*/false);
  return t.value(detail::generate_traced(t, v, g));
}

inline Tensor generate_prompts_mlp(const GeneratorState& g, int n) {
  if (g.kind != GeneratorKind::Mlp) throw std::logic_error("generate_prompts_mlp: state is not an MLP generator");
  return generate_prompts(g, n);
}

inline Tensor generate_prompts_adain(const GeneratorState& g, int n) {
  if (g.kind != GeneratorKind::AdaIn) throw std::logic_error("generate_prompts_adain: state is not an AdaIN generator");
  return generate_prompts(g, n);
}

// Pre-softmax attention scores (1 x K) for client n; exposed for verification.
inline Tensor attention_scores(const GeneratorState& g, int n) {
  g.require_client(n);
  GradTape t;
  auto v = detail::bind_generator(t, g, n, /*trainable=*/false);
  Var q = t.matmul(v.d, v.wq);
  Var k = t.matmul(v.p_base, v.wk);
  Var scores = t.scale(t.matmul(q, t.transpose(k)), 1.0 / std::sqrt(static_cast<double>(g.attn_dim)));
  return t.value(scores);
}

// Learn from this round's prompt deltas. For each client, the local optimization
// direction stands in for the loss gradient at the generated prompts; its
// vector-Jacobian products through the generator update every parameter with
// step lr. Descriptors are touched only by their own client's delta.
//
// Sign: after descent-style local training the delta points along the
// negative loss gradient, so the default pseudo-gradient is -delta;
// `literal_sign` keeps +delta for ablation.
inline void server_update(GeneratorState& g, const std::vector<PromptDelta>& deltas) {
  if (!uses_pseudo_gradient(g.kind))
    throw std::logic_error("server_update: strategy '" + strategy_name(g.kind) + "' does not use pseudo-gradient updates");
  std::vector<const PromptDelta*> ordered;
  ordered.reserve(deltas.size());
  for (const auto& d : deltas) {
    g.require_client(d.client_id);
    if (d.delta.ndim() != 2 || d.delta.rows() != g.prompt_count || d.delta.cols() != g.embed_dim)
      throw std::invalid_argument("server_update: delta " + shape_str(d.delta.shape()) + " from client " +
                                  std::to_string(d.client_id) + " expected " +
                                  shape_str({g.prompt_count, g.embed_dim}));
    ordered.push_back(&d);
  }
  std::sort(ordered.begin(), ordered.end(),
            [](const PromptDelta* a, const PromptDelta* b) { return a->client_id < b->client_id; });

  struct Accum {
    Tensor p_base, wq, wk, wv, wo, mlp_w1, mlp_b1, mlp_w2, mlp_b2;
    std::size_t count = 0;
  } acc;

  auto vjp_pass = [&](const PromptDelta& d, auto&& apply) {
    GradTape t;
    auto v = detail::bind_generator(t, g, d.client_id, /*trainable=*/true);
    Var prompts = detail::generate_traced(t, v, g);
    Tensor pseudo = d.delta;
    if (!g.opt.literal_sign)
      for (std::size_t i = 0; i < pseudo.numel(); ++i) pseudo[i] = -pseudo[i];
    t.backward(t.inner(prompts, std::move(pseudo)));
    apply(t, v);
  };

  auto sgd = [&](Tensor& param, const Tensor& grad, double scale) {
    for (std::size_t i = 0; i < param.numel(); ++i) param[i] -= g.opt.lr * scale * grad[i];
  };

  if (!g.opt.average_updates) {
    // sequential application in ascending client id
    for (const PromptDelta* d : ordered) {
      vjp_pass(*d, [&](GradTape& t, const detail::GenVars& v) {
        sgd(g.desc[static_cast<std::size_t>(d->client_id)], t.grad(v.d), 1.0);
        if (g.kind == GeneratorKind::Mlp) {
          sgd(g.mlp_w1, t.grad(v.mlp_w1), 1.0);
          sgd(g.mlp_b1, t.grad(v.mlp_b1), 1.0);
          sgd(g.mlp_w2, t.grad(v.mlp_w2), 1.0);
          sgd(g.mlp_b2, t.grad(v.mlp_b2), 1.0);
        } else {
          sgd(g.p_base, t.grad(v.p_base), 1.0);
          if (g.kind != GeneratorKind::AdaIn) {
            sgd(g.wq, t.grad(v.wq), 1.0);
            sgd(g.wk, t.grad(v.wk), 1.0);
            sgd(g.wv, t.grad(v.wv), 1.0);
            sgd(g.wo, t.grad(v.wo), 1.0);
          }
        }
      });
    }
    return;
  }

  // averaged mode: shared parameters step once with the mean gradient taken
  // at the round-start state; each descriptor still steps with its own VJP
  auto ensure = [](Tensor& a, const Tensor& like) {
    if (a.numel() == 0) a = Tensor(like.shape());
  };
  std::vector<std::pair<int, Tensor>> desc_grads;
  for (const PromptDelta* d : ordered) {
    vjp_pass(*d, [&](GradTape& t, const detail::GenVars& v) {
      desc_grads.push_back({d->client_id, t.grad(v.d)});
      ++acc.count;
      if (g.kind == GeneratorKind::Mlp) {
        ensure(acc.mlp_w1, g.mlp_w1); axpy(1.0, t.grad(v.mlp_w1), acc.mlp_w1);
        ensure(acc.mlp_b1, g.mlp_b1); axpy(1.0, t.grad(v.mlp_b1), acc.mlp_b1);
        ensure(acc.mlp_w2, g.mlp_w2); axpy(1.0, t.grad(v.mlp_w2), acc.mlp_w2);
        ensure(acc.mlp_b2, g.mlp_b2); axpy(1.0, t.grad(v.mlp_b2), acc.mlp_b2);
      } else {
        ensure(acc.p_base, g.p_base); axpy(1.0, t.grad(v.p_base), acc.p_base);
        if (g.kind != GeneratorKind::AdaIn) {
          ensure(acc.wq, g.wq); axpy(1.0, t.grad(v.wq), acc.wq);
          ensure(acc.wk, g.wk); axpy(1.0, t.grad(v.wk), acc.wk);
          ensure(acc.wv, g.wv); axpy(1.0, t.grad(v.wv), acc.wv);
          ensure(acc.wo, g.wo); axpy(1.0, t.grad(v.wo), acc.wo);
        }
      }
    });
  }
  if (acc.count == 0) return;
  const double inv = 1.0 / static_cast<double>(acc.count);
  for (auto& [n, dg] : desc_grads) sgd(g.desc[static_cast<std::size_t>(n)], dg, 1.0);
  if (g.kind == GeneratorKind::Mlp) {
    sgd(g.mlp_w1, acc.mlp_w1, inv);
    sgd(g.mlp_b1, acc.mlp_b1, inv);
    sgd(g.mlp_w2, acc.mlp_w2, inv);
    sgd(g.mlp_b2, acc.mlp_b2, inv);
  } else {
    sgd(g.p_base, acc.p_base, inv);
    if (g.kind != GeneratorKind::AdaIn) {
      sgd(g.wq, acc.wq, inv);
      sgd(g.wk, acc.wk, inv);
      sgd(g.wv, acc.wv, inv);
      sgd(g.wo, acc.wo, inv);
    }
  }
}

// Dataset-size-weighted prompt average (FedAvg over prompts).
inline Tensor aggregate_fedvpt(const std::vector<std::pair<Tensor, std::size_t>>& prompts) {
  if (prompts.empty()) throw std::invalid_argument("aggregate_fedvpt: no prompts");
  std::size_t total = 0;
  for (const auto& [p, n] : prompts) total += n;
  if (total == 0) throw std::invalid_argument("aggregate_fedvpt: zero total samples");
  Tensor out(prompts.front().first.shape());
  for (const auto& [p, n] : prompts) {
    if (!p.same_shape(out))
      throw std::invalid_argument("aggregate_fedvpt: prompt shape mismatch " + shape_str(p.shape()) + " vs " +
                                  shape_str(out.shape()));
    axpy(static_cast<double>(n) / static_cast<double>(total), p, out);
  }
  return out;
}

struct CommCost {
  std::size_t down_per_client = 0;  // parameters sent server -> client per round
  std::size_t up_per_client = 0;    // parameters sent client -> server per round
  std::size_t full_model_params = 0;
  double prompt_ratio = 0.0;        // (K*l) / full model size
};

// Per-round per-client transfer in parameter counts, against the hypothetical
// cost of shipping the whole encoder+head.
inline CommCost comm_cost(GeneratorKind kind, std::size_t prompt_count, std::size_t embed_dim,
                          std::size_t full_model_params) {
  CommCost c;
  c.full_model_params = full_model_params;
  const std::size_t kl = prompt_count * embed_dim;
  if (kind != GeneratorKind::LocalOnly) {
    c.down_per_client = kl;
    c.up_per_client = kl;
  }
  if (full_model_params > 0) c.prompt_ratio = static_cast<double>(kl) / static_cast<double>(full_model_params);
  return c;
}

}  // namespace pfed
