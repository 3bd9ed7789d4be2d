#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pfed/client.hpp"
#include "pfed/encoder.hpp"
#include "pfed/gradcheck.hpp"
#include "pfed/orchestrator.hpp"
#include "pfed/server.hpp"

namespace pfed {

struct CheckLine {
  std::string name;
  double value = 0.0;  // measured max relative error
  double tol = 0.0;
  bool pass = false;
};

namespace detail {

constexpr double kFdStep = 1e-5;

// FD-check a traced scalar function of one tensor input.
template <class Build>  // Build: (GradTape&, Var x) -> Var loss
CheckLine check_one(const std::string& name, Build&& build, const Tensor& x0, double tol,
                    std::size_t max_coords = 50, std::uint64_t seed = 0xfd) {
  Tensor analytic;
  {
    GradTape t;
    Var x = t.leaf(x0);
    Var loss = build(t, x);
    t.backward(loss);
    analytic = t.grad(x);
  }
  auto f = [&](const Tensor& xv) {
    GradTape t;
    Var x = t.leaf(xv);
    return t.value(build(t, x))[0];
  };
  const auto res = finite_diff_check(f, x0, analytic, kFdStep, max_coords, seed);
  return CheckLine{name, res.max_rel_err, tol, res.max_rel_err < tol};
}

}  // namespace detail

// Finite-difference oracles for every differentiable primitive plus the full
// encoder -> head -> loss composite and all generator paths.
inline std::vector<CheckLine> run_gradient_checks(std::uint64_t seed = 42) {
  std::vector<CheckLine> out;
  Rng rng(derive_seed(seed, 0xfdc));

  const Tensor a47 = randn({4, 7}, rng);
  const Tensor b73 = randn({7, 3}, rng);
  const Tensor x43 = randn({4, 3}, rng);
  const Tensor x45 = randn({4, 5}, rng);
  const Tensor probe43 = randn({4, 3}, rng);
  const Tensor probe45 = randn({4, 5}, rng);
  const Tensor probe47 = randn({4, 7}, rng);
  const Tensor gain5 = randn({5}, rng);
  const Tensor bias5 = randn({5}, rng);
  const Tensor mix35 = randn({3, 5}, rng);
  const std::vector<int> labels = {2, 0, 4, 1};

  out.push_back(detail::check_one(
      "quadratic", [](GradTape& t, Var x) { return t.scale(t.sum_all(t.mul(x, x)), 0.5); }, x45, 1e-8));
  out.push_back(detail::check_one(
      "matmul-left", [&](GradTape& t, Var x) { return t.inner(t.matmul(x, t.constant(b73)), probe43); }, a47, 1e-4));
  out.push_back(detail::check_one(
      "matmul-right", [&](GradTape& t, Var x) { return t.inner(t.matmul(t.constant(a47), x), probe43); }, b73, 1e-4));
  out.push_back(detail::check_one(
      "softmax_rows", [&](GradTape& t, Var x) { return t.inner(t.softmax_rows(x), probe45); }, x45, 1e-4));
  out.push_back(detail::check_one(
      "layer_norm-x",
      [&](GradTape& t, Var x) {
        return t.inner(t.layer_norm(x, t.constant(gain5), t.constant(bias5), kLayerNormEps), probe45);
      },
      x45, 1e-4));
  out.push_back(detail::check_one(
      "layer_norm-gain",
      [&](GradTape& t, Var g) {
        return t.inner(t.layer_norm(t.constant(x45), g, t.constant(bias5), kLayerNormEps), probe45);
      },
      gain5, 1e-4));
  out.push_back(detail::check_one(
      "gelu", [&](GradTape& t, Var x) { return t.inner(t.gelu(x), probe45); }, x45, 1e-4));
  out.push_back(detail::check_one(
      "cross_entropy", [&](GradTape& t, Var x) { return t.cross_entropy(x, labels); }, x45, 1e-4));
  out.push_back(detail::check_one(
      "softmax-cross-entropy",
      [&](GradTape& t, Var x) { return t.cross_entropy(t.matmul(x, t.constant(mix35)), labels); }, x43, 1e-6));
  out.push_back(detail::check_one(
      "transpose-reshape",
      [&](GradTape& t, Var x) { return t.inner(t.reshape(t.transpose(x), {4, 7}), probe47); }, a47, 1e-4));
  out.push_back(detail::check_one(
      "scalar-stats",
      [&](GradTape& t, Var x) {
        Var mu = t.mean_all(x);
        Var sig = t.std_all(x, 1e-6);
        return t.inner(t.sadd(t.sdiv(t.ssub(x, mu), sig), mu), probe45);
      },
      x45, 1e-4));

  // full pipeline: encoder -> head -> loss, gradients to prompt and head leaves
  {
    EncoderConfig cfg;
    cfg.image_side = 8;
    cfg.patch_side = 4;
    cfg.embed_dim = 16;
    cfg.depth = 2;
    cfg.heads = 2;
    cfg.seed = derive_seed(seed, 0xe);
    EncoderWeights w = init_encoder(cfg);
    w.freeze();
    Rng drng(derive_seed(seed, 0xda7a));
    std::vector<Tensor> images;
    std::vector<int> img_labels;
    for (int i = 0; i < 3; ++i) {
      images.push_back(randn({cfg.channels, cfg.image_side, cfg.image_side}, drng, 0.5));
      img_labels.push_back(i % 4);
    }
    Head head{randn({cfg.embed_dim, 4}, drng, 0.1), randn({4}, drng, 0.1)};
    const Tensor p0 = randn({3, cfg.embed_dim}, drng, 0.1);

    auto build_loss = [&](GradTape& t, Var prompts, Var hw, Var hb) {
      EncoderVars ev = bind_encoder(t, w, false);
      std::vector<Var> logits;
      for (const Tensor& img : images) {
        Var z = embed_patches_traced(t, t.constant(extract_patches(img, cfg)), ev);
        logits.push_back(head_forward_traced(t, encoder_forward_traced(t, ev.cls, prompts, z, ev), hw, hb));
      }
      return t.cross_entropy(t.concat_rows(std::span<const Var>(logits.data(), logits.size())), img_labels);
    };
    out.push_back(detail::check_one(
        "encoder-pipeline-prompts",
        [&](GradTape& t, Var p) { return build_loss(t, p, t.constant(head.w), t.constant(head.b)); }, p0, 1e-4, 50,
        derive_seed(seed, 1)));
    out.push_back(detail::check_one(
        "encoder-pipeline-head",
        [&](GradTape& t, Var hw) { return build_loss(t, t.constant(p0), hw, t.constant(head.b)); }, head.w, 1e-4, 50,
        derive_seed(seed, 2)));
  }

  // generator forward paths, parameter by parameter
  {
    struct ParamRef {
      const char* name;
      Tensor GeneratorState::*field;
      Var detail::GenVars::*var;
    };
    const std::vector<ParamRef> attn_params = {
        {"p_base", &GeneratorState::p_base, &detail::GenVars::p_base},
        {"wq", &GeneratorState::wq, &detail::GenVars::wq},
        {"wk", &GeneratorState::wk, &detail::GenVars::wk},
        {"wv", &GeneratorState::wv, &detail::GenVars::wv},
        {"wo", &GeneratorState::wo, &detail::GenVars::wo},
    };
    const std::vector<ParamRef> mlp_params = {
        {"mlp_w1", &GeneratorState::mlp_w1, &detail::GenVars::mlp_w1},
        {"mlp_w2", &GeneratorState::mlp_w2, &detail::GenVars::mlp_w2},
    };
    const std::vector<ParamRef> adain_params = {
        {"p_base", &GeneratorState::p_base, &detail::GenVars::p_base},
    };

    for (GeneratorKind kind : {GeneratorKind::CrossAttention, GeneratorKind::Mlp, GeneratorKind::AdaIn}) {
      GeneratorState g = init_server(kind, 2, 4, 12, 8, 6, 10, derive_seed(seed, 0x9e4));
      const Tensor probe = randn({4, 12}, rng);
      const auto& params = kind == GeneratorKind::Mlp ? mlp_params
                           : kind == GeneratorKind::AdaIn ? adain_params
                                                          : attn_params;
      for (const ParamRef& pr : params) {
        out.push_back(detail::check_one(
            strategy_name(kind) + "-" + pr.name,
            [&](GradTape& t, Var x) {
              GeneratorState tmp = g;
              tmp.*(pr.field) = t.value(x);
              auto v = detail::bind_generator(t, tmp, 0, false);
              v.*(pr.var) = x;
              return t.inner(detail::generate_traced(t, v, tmp), probe);
            },
            g.*(pr.field), 1e-4, 40, derive_seed(seed, 3)));
      }
      out.push_back(detail::check_one(
          strategy_name(kind) + "-descriptor",
          [&](GradTape& t, Var d) {
            auto v = detail::bind_generator(t, g, 0, false);
            v.d = d;
            return t.inner(detail::generate_traced(t, v, g), probe);
          },
          g.desc[0], 1e-4, 40, derive_seed(seed, 4)));
    }
  }

  return out;
}

namespace detail {

// End-to-end gradient of client n's full-batch loss with respect to every
// generator parameter, traced through generation -> encoder -> head -> loss
// in a single pass at the given server state.
struct EndToEndGrads {
  Tensor desc, p_base, wq, wk, wv, wo, mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

inline EndToEndGrads end_to_end_grads(const GeneratorState& g, int n, const EncoderWeights& enc, const Head& head,
                                      const std::vector<Sample>& batch) {
  GradTape t;
  auto v = bind_generator(t, g, n, /*trainable=*/true);
  Var prompts = generate_traced(t, v, g);
  EncoderVars ev = bind_encoder(t, enc, false);
  std::vector<Var> logits;
  std::vector<int> labels;
  for (const Sample& s : batch) {
    Var z = embed_patches_traced(t, t.constant(extract_patches(s.image, enc.cfg)), ev);
    Var f = encoder_forward_traced(t, ev.cls, prompts, z, ev);
    logits.push_back(head_forward_traced(t, f, t.constant(head.w), t.constant(head.b)));
    labels.push_back(s.label);
  }
  Var loss = t.cross_entropy(t.concat_rows(std::span<const Var>(logits.data(), logits.size())), labels);
  t.backward(loss);
  EndToEndGrads out;
  out.desc = t.grad(v.d);
  if (g.kind == GeneratorKind::Mlp) {
    out.mlp_w1 = t.grad(v.mlp_w1);
    out.mlp_b1 = t.grad(v.mlp_b1);
    out.mlp_w2 = t.grad(v.mlp_w2);
    out.mlp_b2 = t.grad(v.mlp_b2);
  } else {
    out.p_base = t.grad(v.p_base);
    if (g.kind != GeneratorKind::AdaIn) {
      out.wq = t.grad(v.wq);
      out.wk = t.grad(v.wk);
      out.wv = t.grad(v.wv);
      out.wo = t.grad(v.wo);
    }
  }
  return out;
}

inline ExperimentConfig pseudo_oracle_config(GeneratorKind kind, std::uint64_t seed) {
  ExperimentConfig cfg;
  cfg.strategy = strategy_name(kind);
  cfg.prompts = 3;
  cfg.rounds = 1;
  cfg.image_side = 16;
  cfg.patch_side = 8;
  cfg.embed_dim = 16;
  cfg.attn_dim = 16;
  cfg.value_dim = 16;
  cfg.mlp_hidden = 16;
  cfg.depth = 1;
  cfg.heads = 2;
  cfg.classes = 4;
  cfg.samples_per_class = 6;
  cfg.encoder_mode = "random";
  cfg.local_epochs = 1;      // exactly one SGD step ...
  cfg.batch_size = 1 << 20;  // ... over the full local batch
  cfg.weight_decay = 0.0;    // delta = -client_lr * grad exactly
  cfg.client_lr = 0.2;
  cfg.server_lr = 0.01;
  cfg.workers = 1;
  cfg.seed_data = derive_seed(seed, 1);
  cfg.seed_model = derive_seed(seed, 2);
  cfg.seed_train = derive_seed(seed, 3);
  return cfg;
}

}  // namespace detail

// Exact-case pseudo-gradient oracle: one full-batch local step makes the
// prompt delta exactly -client_lr * grad, so every server parameter update
// must equal client_lr * server_lr * (end-to-end gradient through generator
// -> encoder -> loss). Exercises the real orchestrator round path, with a
// single client for the sequential mode and two clients for averaged mode
// (where all vector-Jacobian products are taken at the round-start state).
inline std::vector<CheckLine> run_pseudo_gradient_checks(std::uint64_t seed = 43) {
  std::vector<CheckLine> out;

  auto run_case = [&](GeneratorKind kind, bool averaged) {
    ExperimentConfig cfg = detail::pseudo_oracle_config(kind, seed);
    if (averaged) {
      cfg.clients = 2;
      cfg.partition = "dirichlet";
      cfg.dirichlet_alpha = 100.0;  // near-uniform, both clients populated
      cfg.server_update_mode = "averaged";
    } else {
      cfg.clients = 1;
      cfg.partition = "disjoint";
      cfg.disjoint_classes = cfg.classes;
      cfg.server_update_mode = "sequential";
    }

    Experiment ex = setup_experiment(cfg);

    // Measure the round from a generic state. Zero-initialized heads block
    // all gradient flow into the prompts (logits are feature-independent),
    // and at the tiny default init the attention scores are nearly uniform,
    // which cancels the q/k-path gradients down to ~1e-13 where floating-
    // point noise in the delta dominates any relative comparison.
    Rng hrng(derive_seed(seed, 0xead));
    for (auto& st : ex.clients_state) {
      st.head.w = randn({cfg.embed_dim, cfg.classes}, hrng, 0.1);
      st.head.b = randn({cfg.classes}, hrng, 0.1);
    }
    Rng grng(derive_seed(seed, 0x6e2));
    auto reinit = [&](Tensor& param, double scale) { param = randn(param.shape(), grng, scale); };
    reinit(ex.server.p_base, 0.3);
    for (auto& d : ex.server.desc) reinit(d, 0.5);
    reinit(ex.server.wq, 0.5);
    reinit(ex.server.wk, 0.5);
    reinit(ex.server.wv, 0.3);
    reinit(ex.server.wo, 0.3);
    reinit(ex.server.mlp_w1, 0.3);
    reinit(ex.server.mlp_w2, 0.3);

    const GeneratorState before = ex.server;
    std::vector<Head> heads_before;
    for (const auto& st : ex.clients_state) heads_before.push_back(st.head);

    run_round(ex, 1);

    const double step = cfg.client_lr * cfg.server_lr;
    const std::string tag = strategy_name(kind) + (averaged ? "-avg" : "") + "-update-";
    auto compare = [&](const std::string& pname, const Tensor& after, const Tensor& was, const Tensor& grad,
                       double scale) {
      Tensor got = after;  // observed update
      axpy(-1.0, was, got);
      Tensor want = grad;  // -step * end-to-end gradient
      for (std::size_t i = 0; i < want.numel(); ++i) want[i] *= -step * scale;
      const double err = rel_diff(got, want);
      // a vanishing update would make the comparison vacuous
      const bool moved = max_abs(got) > 0.0 && max_abs(want) > 0.0;
      out.push_back(CheckLine{tag + pname, err, 1e-6, err < 1e-6 && moved});
    };

    std::vector<detail::EndToEndGrads> grads;
    for (int n = 0; n < static_cast<int>(cfg.clients); ++n)
      grads.push_back(detail::end_to_end_grads(before, n, ex.encoder, heads_before[static_cast<std::size_t>(n)],
                                               ex.dataset.clients[static_cast<std::size_t>(n)].train));

    for (int n = 0; n < static_cast<int>(cfg.clients); ++n)
      compare("desc" + std::to_string(n), ex.server.desc[static_cast<std::size_t>(n)],
              before.desc[static_cast<std::size_t>(n)], grads[static_cast<std::size_t>(n)].desc, 1.0);

    const double shared_scale = 1.0 / static_cast<double>(cfg.clients);
    auto mean_grad = [&](Tensor detail::EndToEndGrads::*field) {
      Tensor acc = grads[0].*field;
      for (std::size_t n = 1; n < grads.size(); ++n) axpy(1.0, grads[n].*field, acc);
      return acc;
    };
    if (kind == GeneratorKind::Mlp) {
      compare("mlp_w1", ex.server.mlp_w1, before.mlp_w1, mean_grad(&detail::EndToEndGrads::mlp_w1), shared_scale);
      compare("mlp_b1", ex.server.mlp_b1, before.mlp_b1, mean_grad(&detail::EndToEndGrads::mlp_b1), shared_scale);
      compare("mlp_w2", ex.server.mlp_w2, before.mlp_w2, mean_grad(&detail::EndToEndGrads::mlp_w2), shared_scale);
      compare("mlp_b2", ex.server.mlp_b2, before.mlp_b2, mean_grad(&detail::EndToEndGrads::mlp_b2), shared_scale);
    } else {
      compare("p_base", ex.server.p_base, before.p_base, mean_grad(&detail::EndToEndGrads::p_base), shared_scale);
      if (kind != GeneratorKind::AdaIn) {
        compare("wq", ex.server.wq, before.wq, mean_grad(&detail::EndToEndGrads::wq), shared_scale);
        compare("wk", ex.server.wk, before.wk, mean_grad(&detail::EndToEndGrads::wk), shared_scale);
        compare("wv", ex.server.wv, before.wv, mean_grad(&detail::EndToEndGrads::wv), shared_scale);
        compare("wo", ex.server.wo, before.wo, mean_grad(&detail::EndToEndGrads::wo), shared_scale);
      }
    }
  };

  for (GeneratorKind kind : {GeneratorKind::CrossAttention, GeneratorKind::Mlp, GeneratorKind::AdaIn}) {
    run_case(kind, /*averaged=*/false);
    run_case(kind, /*averaged=*/true);
  }
  return out;
}

}  // namespace pfed
