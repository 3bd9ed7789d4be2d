#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "pfed/encoder.hpp"
#include "pfed/gradcheck.hpp"
#include "pfed/rng.hpp"

using namespace pfed;

namespace {

EncoderConfig tiny_cfg(std::uint64_t seed = 5) {
  EncoderConfig cfg;
  cfg.image_side = 16;
  cfg.patch_side = 4;
  cfg.embed_dim = 32;
  cfg.depth = 2;
  cfg.heads = 2;
  cfg.seed = seed;
  return cfg;
}

}  // namespace

TEST_CASE("patch embedding shape and zero propagation", "[encoder]") {
  EncoderConfig cfg = tiny_cfg();
  REQUIRE(cfg.patches() == 16);
  EncoderWeights w = init_encoder(cfg);

  Rng rng(3);
  const Tensor img = randn({3, 16, 16}, rng);
  const Tensor z = embed_patches(img, w);
  CHECK(z.shape() == Shape{16, 32});

  // zero image, zero bias, zero positional offsets -> zero embedding
  EncoderWeights wz = w;
  wz.patch_b = Tensor({32});
  wz.pos = Tensor({16, 32});
  const Tensor z0 = embed_patches(Tensor({3, 16, 16}), wz);
  for (std::size_t i = 0; i < z0.numel(); ++i) CHECK(z0[i] == 0.0);
}

TEST_CASE("patch embedding rejects wrong image sizes", "[encoder]") {
  EncoderWeights w = init_encoder(tiny_cfg());
  CHECK_THROWS_AS(embed_patches(Tensor({3, 8, 8}), w), std::invalid_argument);
}

TEST_CASE("single patch equals the hand-computed projection", "[encoder]") {
  EncoderConfig cfg = tiny_cfg();
  EncoderWeights w = init_encoder(cfg);
  Rng rng(4);
  const Tensor img = randn({3, 16, 16}, rng);
  const Tensor patches = extract_patches(img, cfg);
  const Tensor z = embed_patches(img, w);

  // patch row 5 by hand: flatten . W + b + pos
  const std::size_t r = 5;
  for (std::size_t j = 0; j < cfg.embed_dim; ++j) {
    double acc = w.patch_b[j] + w.pos(r, j);
    for (std::size_t k = 0; k < cfg.patch_dim(); ++k) acc += patches(r, k) * w.patch_w(k, j);
    CHECK(std::abs(z(r, j) - acc) < 1e-12);
  }
}

TEST_CASE("patch extraction is raster order with channel-major flattening", "[encoder]") {
  EncoderConfig cfg = tiny_cfg();
  Tensor img({3, 16, 16});
  // mark pixel (channel 1, y=4, x=8): patch row = (4/4)*4 + (8/4) = 6
  img[1 * 256 + 4 * 16 + 8] = 9.5;
  const Tensor p = extract_patches(img, cfg);
  const std::size_t in_patch = 1 * 16 + 0 * 4 + 0;  // channel 1, local (0,0)
  CHECK(p(6, in_patch) == 9.5);
  double total = 0.0;
  for (std::size_t i = 0; i < p.numel(); ++i) total += p[i];
  CHECK(total == 9.5);
}

TEST_CASE("depth-0 encoder returns the normalized class token regardless of inputs", "[encoder]") {
  EncoderConfig cfg = tiny_cfg();
  cfg.depth = 0;
  EncoderWeights w = init_encoder(cfg);
  Rng rng(6);
  const Tensor z1 = randn({16, 32}, rng);
  const Tensor z2 = randn({16, 32}, rng);
  const Tensor p1 = randn({3, 32}, rng);
  const Tensor p2 = randn({7, 32}, rng);
  const Tensor f1 = encoder_forward(w.cls, p1, z1, w);
  const Tensor f2 = encoder_forward(w.cls, p2, z2, w);
  CHECK(f1 == f2);
  CHECK(f1.shape() == Shape{32});
}

TEST_CASE("class-token output length is embed_dim for any prompt count", "[encoder]") {
  EncoderConfig cfg = tiny_cfg();
  EncoderWeights w = init_encoder(cfg);
  Rng rng(7);
  const Tensor z = randn({16, 32}, rng);
  for (std::size_t k : {std::size_t{1}, std::size_t{3}, std::size_t{10}}) {
    const Tensor f = encoder_forward(w.cls, randn({k, 32}, rng), z, w);
    CHECK(f.shape() == Shape{32});
  }
}

TEST_CASE("prompt-row permutation leaves the class-token output unchanged", "[encoder]") {
  EncoderConfig cfg = tiny_cfg();
  EncoderWeights w = init_encoder(cfg);
  Rng rng(8);
  const Tensor z = randn({16, 32}, rng, 0.5);
  Tensor p = randn({5, 32}, rng, 0.5);
  const Tensor f1 = encoder_forward(w.cls, p, z, w);

  Tensor perm({5, 32});
  const std::size_t order[5] = {3, 0, 4, 1, 2};
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 32; ++j) perm(i, j) = p(order[i], j);
  const Tensor f2 = encoder_forward(w.cls, perm, z, w);
  for (std::size_t j = 0; j < 32; ++j) CHECK(std::abs(f1[j] - f2[j]) < 1e-9);
}

TEST_CASE("encoder forward is deterministic", "[encoder]") {
  EncoderConfig cfg = tiny_cfg();
  EncoderWeights w = init_encoder(cfg);
  Rng rng(9);
  const Tensor z = randn({16, 32}, rng);
  const Tensor p = randn({4, 32}, rng);
  CHECK(encoder_forward(w.cls, p, z, w) == encoder_forward(w.cls, p, z, w));
}

TEST_CASE("encoder forward validates dimensions", "[encoder]") {
  EncoderConfig cfg = tiny_cfg();
  EncoderWeights w = init_encoder(cfg);
  Rng rng(10);
  CHECK_THROWS_AS(encoder_forward(w.cls, randn({4, 16}, rng), randn({16, 32}, rng), w), std::invalid_argument);
  CHECK_THROWS_AS(encoder_forward(w.cls, randn({4, 32}, rng), randn({8, 32}, rng), w), std::invalid_argument);
}

TEST_CASE("head forward: zero, identity-like, and matmul oracle", "[encoder]") {
  Head zero = Head::zeros(4, 3);
  const Tensor l0 = head_forward(Tensor({4}), zero);
  for (std::size_t i = 0; i < 3; ++i) CHECK(l0[i] == 0.0);

  Head ident = Head::zeros(4, 4);
  for (std::size_t i = 0; i < 4; ++i) ident.w(i, i) = 1.0;
  Rng rng(11);
  const Tensor f = randn({4}, rng);
  const Tensor li = head_forward(f, ident);
  for (std::size_t i = 0; i < 4; ++i) CHECK(li[i] == Catch::Approx(f[i]).margin(1e-15));

  Head h{randn({4, 6}, rng), randn({6}, rng)};
  const Tensor got = head_forward(f, h);
  for (std::size_t j = 0; j < 6; ++j) {
    double acc = h.b[j];
    for (std::size_t k = 0; k < 4; ++k) acc += f[k] * h.w(k, j);
    CHECK(std::abs(got[j] - acc) < 1e-12);
  }
  CHECK_THROWS_AS(head_forward(randn({5}, rng), h), std::invalid_argument);
}

TEST_CASE("freeze is idempotent and hashes are stable and content-determined", "[encoder]") {
  EncoderWeights w1 = init_encoder(tiny_cfg(21));
  EncoderWeights w2 = init_encoder(tiny_cfg(21));
  EncoderWeights w3 = init_encoder(tiny_cfg(22));

  const auto h1 = w1.freeze();
  CHECK(w1.freeze() == h1);  // double freeze is a no-op
  CHECK(w2.freeze() == h1);  // identical weights, identical hash
  CHECK(w3.freeze() != h1);
  CHECK(w1.content_hash() == h1);  // unchanged after use

  Rng rng(12);
  const Tensor z = randn({16, 32}, rng);
  (void)encoder_forward(w1.cls, randn({2, 32}, rng), z, w1);
  CHECK(w1.content_hash() == h1);
}

TEST_CASE("frozen weights do not produce gradients; prompts and head do", "[encoder]") {
  EncoderConfig cfg = tiny_cfg();
  EncoderWeights w = init_encoder(cfg);
  w.freeze();
  Rng rng(13);
  GradTape t;
  EncoderVars ev = bind_encoder(t, w, /*trainable=*/false);
  Var p = t.leaf(randn({2, 32}, rng, 0.1));
  Var z = t.constant(randn({16, 32}, rng, 0.1));
  Var f = encoder_forward_traced(t, ev.cls, p, z, ev);
  Var hw = t.leaf(randn({32, 4}, rng, 0.1));
  Var logits = t.matmul(f, hw);
  t.backward(t.cross_entropy(logits, {1}));
  CHECK_THROWS_AS(t.grad(ev.patch_w), std::invalid_argument);
  CHECK_THROWS_AS(t.grad(ev.blocks[0].wq), std::invalid_argument);
  CHECK(t.grad(p).same_shape(t.value(p)));
  CHECK(t.grad(hw).same_shape(t.value(hw)));
  CHECK_THROWS_AS(bind_encoder(t, w, /*trainable=*/true), std::logic_error);
}

TEST_CASE("prompt gradients through the full encoder match finite differences", "[encoder]") {
  EncoderConfig cfg = tiny_cfg(31);
  cfg.image_side = 8;  // m=4 keeps the FD loop quick
  cfg.embed_dim = 16;
  EncoderWeights w = init_encoder(cfg);
  w.freeze();
  Rng rng(14);
  const Tensor z = randn({cfg.patches(), 16}, rng, 0.5);
  const Tensor probe = randn({1, 16}, rng);
  const Tensor p0 = randn({3, 16}, rng, 0.2);

  auto build = [&](GradTape& t, Var p) {
    EncoderVars ev = bind_encoder(t, w, false);
    return t.inner(encoder_forward_traced(t, ev.cls, p, t.constant(z), ev), probe);
  };
  GradTape t;
  Var p = t.leaf(p0);
  t.backward(build(t, p));
  auto f = [&](const Tensor& pv) {
    GradTape t2;
    Var p2 = t2.leaf(pv);
    return t2.value(build(t2, p2))[0];
  };
  CHECK(finite_diff_check(f, p0, t.grad(p), 1e-5).max_rel_err < 1e-4);
}
