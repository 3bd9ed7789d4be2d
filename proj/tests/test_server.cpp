#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "pfed/server.hpp"

using namespace pfed;

namespace {

Tensor mm(const Tensor& a, const Tensor& b) {
  Tensor c({a.rows(), b.cols()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j)
      for (std::size_t k = 0; k < a.cols(); ++k) c(i, j) += a(i, k) * b(k, j);
  return c;
}

GeneratorState make_state(GeneratorKind kind = GeneratorKind::CrossAttention, int clients = 3,
                          std::size_t k = 4, std::size_t l = 8, std::size_t lk = 6, std::size_t lv = 5,
                          std::uint64_t seed = 77) {
  return init_server(kind, clients, k, l, lk, lv, /*mlp_hidden=*/l, seed);
}

bool states_equal(const GeneratorState& a, const GeneratorState& b) {
  bool eq = true;
  a.for_each_tensor([&](const std::string& name, const Tensor& ta) {
    b.for_each_tensor([&](const std::string& name2, const Tensor& tb) {
      if (name == name2) eq = eq && ta == tb;
    });
  });
  return eq;
}

}  // namespace

TEST_CASE("zero output projection collapses generation onto the base prompts", "[server]") {
  GeneratorState g = make_state();
  g.wo = Tensor({5, 8});
  for (int n = 0; n < g.clients; ++n) CHECK(generate_prompts(g, n) == g.p_base);
}

TEST_CASE("attention weights per client sum to one", "[server]") {
  GeneratorState g = make_state();
  for (int n = 0; n < g.clients; ++n) {
    const Tensor scores = attention_scores(g, n);
    REQUIRE(scores.shape() == Shape{1, 4});
    double mx = scores[0];
    for (std::size_t j = 1; j < 4; ++j) mx = std::max(mx, scores[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < 4; ++j) sum += std::exp(scores[j] - mx);
    double total = 0.0;
    for (std::size_t j = 0; j < 4; ++j) total += std::exp(scores[j] - mx) / sum;
    CHECK(std::abs(total - 1.0) < 1e-9);
  }
}

TEST_CASE("pre-softmax scores match the scaled bilinear oracle at two key widths", "[server]") {
  for (std::size_t lk : {std::size_t{6}, std::size_t{12}}) {
    GeneratorState g = make_state(GeneratorKind::CrossAttention, 2, 4, 8, lk, 5, 101 + lk);
    for (int n = 0; n < 2; ++n) {
      const Tensor q = mm(g.desc[static_cast<std::size_t>(n)], g.wq);  // 1 x lk
      const Tensor keys = mm(g.p_base, g.wk);                          // K x lk
      const Tensor got = attention_scores(g, n);
      for (std::size_t j = 0; j < 4; ++j) {
        double dot = 0.0;
        for (std::size_t c = 0; c < lk; ++c) dot += q(0, c) * keys(j, c);
        CHECK(std::abs(got(0, j) - dot / std::sqrt(static_cast<double>(lk))) < 1e-9);
      }
    }
  }
}

TEST_CASE("single base prompt reduces to a softmax-free composition", "[server]") {
  GeneratorState g = make_state(GeneratorKind::CrossAttention, 2, /*k=*/1, 8, 6, 5, 103);
  // softmax over one key is exactly 1, so P = P_base + (P_base Wv) Wo
  const Tensor want_residual = mm(mm(g.p_base, g.wv), g.wo);
  const Tensor got = generate_prompts(g, 0);
  for (std::size_t j = 0; j < 8; ++j)
    CHECK(std::abs(got(0, j) - (g.p_base(0, j) + want_residual(0, j))) < 1e-12);
}

TEST_CASE("full generation matches a hand-rolled attention oracle", "[server]") {
  GeneratorState g = make_state(GeneratorKind::CrossAttention, 2, 4, 8, 6, 5, 107);
  const int n = 1;
  const Tensor q = mm(g.desc[n], g.wq);
  const Tensor keys = mm(g.p_base, g.wk);
  const Tensor vals = mm(g.p_base, g.wv);
  Tensor attn({1, 4});
  double mx = -1e300;
  for (std::size_t j = 0; j < 4; ++j) {
    double dot = 0.0;
    for (std::size_t c = 0; c < 6; ++c) dot += q(0, c) * keys(j, c);
    attn(0, j) = dot / std::sqrt(6.0);
    mx = std::max(mx, attn(0, j));
  }
  double z = 0.0;
  for (std::size_t j = 0; j < 4; ++j) z += std::exp(attn(0, j) - mx);
  for (std::size_t j = 0; j < 4; ++j) attn(0, j) = std::exp(attn(0, j) - mx) / z;
  const Tensor row = mm(mm(attn, vals), g.wo);  // 1 x l
  const Tensor got = generate_prompts(g, n);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 8; ++j) CHECK(std::abs(got(i, j) - (g.p_base(i, j) + row(0, j))) < 1e-12);
}

TEST_CASE("identical descriptors produce identical prompts", "[server]") {
  GeneratorState g = make_state();
  g.desc[2] = g.desc[0];
  CHECK(generate_prompts(g, 0) == generate_prompts(g, 2));
  CHECK_FALSE(generate_prompts(g, 0) == generate_prompts(g, 1));
}

TEST_CASE("client ids are validated", "[server]") {
  GeneratorState g = make_state();
  CHECK_THROWS_AS(generate_prompts(g, -1), std::out_of_range);
  CHECK_THROWS_AS(generate_prompts(g, 3), std::out_of_range);
  PromptDelta bad{Tensor({4, 8}), /*client_id=*/9, 0, 1};
  CHECK_THROWS_AS(server_update(g, {bad}), std::out_of_range);
  PromptDelta wrong_shape{Tensor({2, 8}), 0, 0, 1};
  CHECK_THROWS_AS(server_update(g, {wrong_shape}), std::invalid_argument);
}

TEST_CASE("zero deltas are a bitwise fixed point for every generator", "[server]") {
  for (GeneratorKind kind : {GeneratorKind::CrossAttention, GeneratorKind::Mlp, GeneratorKind::AdaIn,
                             GeneratorKind::BaseOnly}) {
    for (bool averaged : {false, true}) {
      GeneratorState g = make_state(kind);
      g.opt.average_updates = averaged;
      const GeneratorState before = g;
      std::vector<PromptDelta> deltas;
      for (int n = 0; n < g.clients; ++n) deltas.push_back(PromptDelta{Tensor({4, 8}), n, 1, 5});
      server_update(g, deltas);
      CHECK(states_equal(g, before));
    }
  }
}

TEST_CASE("descriptors are touched only by their own client's delta", "[server]") {
  GeneratorState g = make_state();
  const GeneratorState before = g;
  Rng rng(9);
  std::vector<PromptDelta> deltas;
  deltas.push_back(PromptDelta{randn({4, 8}, rng, 0.1), /*client_id=*/1, 1, 5});
  server_update(g, deltas);
  CHECK(g.desc[0] == before.desc[0]);
  CHECK(g.desc[2] == before.desc[2]);
  CHECK_FALSE(g.desc[1] == before.desc[1]);
  CHECK_FALSE(g.p_base == before.p_base);
  CHECK_FALSE(g.wq == before.wq);
  CHECK_FALSE(g.wk == before.wk);
  CHECK_FALSE(g.wv == before.wv);
  CHECK_FALSE(g.wo == before.wo);
}

TEST_CASE("the literal sign option ascends where the default descends", "[server]") {
  Rng rng(10);
  const Tensor delta = randn({4, 8}, rng, 0.1);
  GeneratorState g_desc = make_state();
  GeneratorState g_lit = g_desc;
  g_lit.opt.literal_sign = true;
  server_update(g_desc, {PromptDelta{delta, 0, 1, 5}});
  server_update(g_lit, {PromptDelta{delta, 0, 1, 5}});
  const GeneratorState base = make_state();
  // updates are linear in the pseudo-gradient, so flipping its sign flips them
  auto check_mirror = [&](const Tensor& def, const Tensor& lit, const Tensor& was) {
    for (std::size_t i = 0; i < def.numel(); ++i)
      CHECK(std::abs((def[i] - was[i]) + (lit[i] - was[i])) < 1e-15);
  };
  check_mirror(g_desc.p_base, g_lit.p_base, base.p_base);
  check_mirror(g_desc.wq, g_lit.wq, base.wq);
  check_mirror(g_desc.desc[0], g_lit.desc[0], base.desc[0]);
}

TEST_CASE("sequential and averaged update modes agree for a single client", "[server]") {
  Rng rng(11);
  const Tensor delta = randn({4, 8}, rng, 0.1);
  GeneratorState g_seq = make_state();
  GeneratorState g_avg = g_seq;
  g_avg.opt.average_updates = true;
  server_update(g_seq, {PromptDelta{delta, 1, 1, 5}});
  server_update(g_avg, {PromptDelta{delta, 1, 1, 5}});
  CHECK(states_equal(g_seq, g_avg));
}

TEST_CASE("update refuses strategies without pseudo-gradients", "[server]") {
  GeneratorState g = make_state(GeneratorKind::GlobalAverage);
  CHECK_THROWS_AS(server_update(g, {}), std::logic_error);
}

TEST_CASE("mlp generation: zero weights give zero prompts, shapes hold", "[server]") {
  for (std::size_t k : {std::size_t{1}, std::size_t{10}}) {
    GeneratorState g = make_state(GeneratorKind::Mlp, 2, k, 8, 6, 5, 113 + k);
    Tensor p = generate_prompts_mlp(g, 0);
    CHECK(p.shape() == Shape{k, 8});

    g.mlp_w1 = Tensor(g.mlp_w1.shape());
    g.mlp_w2 = Tensor(g.mlp_w2.shape());
    g.mlp_b1 = Tensor(g.mlp_b1.shape());
    g.mlp_b2 = Tensor(g.mlp_b2.shape());
    p = generate_prompts_mlp(g, 0);
    for (std::size_t i = 0; i < p.numel(); ++i) CHECK(p[i] == 0.0);
  }
  GeneratorState wrong = make_state(GeneratorKind::CrossAttention);
  CHECK_THROWS_AS(generate_prompts_mlp(wrong, 0), std::logic_error);
}

TEST_CASE("adain transfers descriptor statistics onto the base prompts", "[server]") {
  GeneratorState g = make_state(GeneratorKind::AdaIn, 2, 4, 8, 6, 5, 127);

  // independent scalar statistics oracle
  auto stats = [](const Tensor& t) {
    double mu = 0.0;
    for (std::size_t i = 0; i < t.numel(); ++i) mu += t[i];
    mu /= static_cast<double>(t.numel());
    double var = 0.0;
    for (std::size_t i = 0; i < t.numel(); ++i) var += (t[i] - mu) * (t[i] - mu);
    return std::pair{mu, std::sqrt(var / static_cast<double>(t.numel()))};
  };
  const auto [mu_b, sig_b] = stats(g.p_base);
  const auto [mu_d, sig_d] = stats(g.desc[0]);
  const Tensor got = generate_prompts_adain(g, 0);
  for (std::size_t i = 0; i < got.numel(); ++i) {
    const double want = sig_d * (g.p_base[i] - mu_b) / std::max(sig_b, 1e-6) + mu_d;
    CHECK(std::abs(got[i] - want) < 1e-12);
  }

  // standardized base + standardized descriptor leave the base unchanged
  GeneratorState ident = g;
  for (std::size_t i = 0; i < ident.p_base.numel(); ++i)
    ident.p_base[i] = (g.p_base[i] - mu_b) / sig_b;
  for (std::size_t i = 0; i < ident.desc[0].numel(); ++i)
    ident.desc[0][i] = (g.desc[0][i] - mu_d) / sig_d;
  const Tensor same = generate_prompts_adain(ident, 0);
  for (std::size_t i = 0; i < same.numel(); ++i) CHECK(std::abs(same[i] - ident.p_base[i]) < 1e-9);

  // constant base: the variance floor path yields mu(d) everywhere
  GeneratorState flat = g;
  flat.p_base = Tensor::full({4, 8}, 2.5);
  const Tensor md = generate_prompts_adain(flat, 0);
  for (std::size_t i = 0; i < md.numel(); ++i) CHECK(std::abs(md[i] - mu_d) < 1e-12);

  GeneratorState wrong = make_state(GeneratorKind::CrossAttention);
  CHECK_THROWS_AS(generate_prompts_adain(wrong, 0), std::logic_error);
}

TEST_CASE("fedvpt aggregation is a dataset-size-weighted average", "[server]") {
  Rng rng(12);
  const Tensor p = randn({4, 8}, rng);

  // identical prompts from all clients -> that prompt
  const Tensor same = aggregate_fedvpt({{p, 3}, {p, 9}, {p, 1}});
  for (std::size_t i = 0; i < p.numel(); ++i) CHECK(same[i] == Catch::Approx(p[i]).margin(1e-15));

  // equal sizes, P and -P -> zero
  Tensor neg = p;
  for (std::size_t i = 0; i < neg.numel(); ++i) neg[i] = -neg[i];
  const Tensor zero = aggregate_fedvpt({{p, 5}, {neg, 5}});
  for (std::size_t i = 0; i < zero.numel(); ++i) CHECK(std::abs(zero[i]) < 1e-15);

  // weighted oracle with sizes 1, 2, 3
  const Tensor a = randn({2, 2}, rng);
  const Tensor b = randn({2, 2}, rng);
  const Tensor c = randn({2, 2}, rng);
  const Tensor w = aggregate_fedvpt({{a, 1}, {b, 2}, {c, 3}});
  for (std::size_t i = 0; i < 4; ++i)
    CHECK(std::abs(w[i] - (a[i] + 2.0 * b[i] + 3.0 * c[i]) / 6.0) < 1e-12);

  CHECK_THROWS_AS(aggregate_fedvpt({}), std::invalid_argument);
  CHECK_THROWS_AS(aggregate_fedvpt({{p, 0}, {neg, 0}}), std::invalid_argument);
}

TEST_CASE("communication cost counts prompt parameters per direction", "[server]") {
  const CommCost c = comm_cost(GeneratorKind::CrossAttention, 10, 32, 100000);
  CHECK(c.down_per_client == 320);
  CHECK(c.up_per_client == 320);

  const CommCost local = comm_cost(GeneratorKind::LocalOnly, 10, 32, 100000);
  CHECK(local.down_per_client == 0);
  CHECK(local.up_per_client == 0);

  // reference-scale configuration: 10 prompts x 768 dims vs an 85.8M backbone
  const CommCost paper = comm_cost(GeneratorKind::CrossAttention, 10, 768, 85800000);
  CHECK(paper.prompt_ratio > 5e-5);
  CHECK(paper.prompt_ratio < 5e-4);
  CHECK(paper.prompt_ratio == Catch::Approx(7680.0 / 85.8e6));
}

TEST_CASE("strategy names round-trip", "[server]") {
  for (GeneratorKind k : {GeneratorKind::CrossAttention, GeneratorKind::Mlp, GeneratorKind::AdaIn,
                          GeneratorKind::GlobalAverage, GeneratorKind::LocalOnly, GeneratorKind::BaseOnly})
    CHECK(strategy_from_name(strategy_name(k)) == k);
  CHECK_THROWS_AS(strategy_from_name("fedavg"), std::invalid_argument);
}
