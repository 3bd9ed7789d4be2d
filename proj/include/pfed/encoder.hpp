#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pfed/rng.hpp"
#include "pfed/tape.hpp"
#include "pfed/tensor.hpp"

namespace pfed {

constexpr double kLayerNormEps = 1e-5;
constexpr double kWeightInitStd = 0.02;

struct EncoderConfig {
  std::size_t image_side = 16;
  std::size_t channels = 3;
  std::size_t patch_side = 4;
  std::size_t embed_dim = 32;
  std::size_t depth = 2;
  std::size_t heads = 2;
  double mlp_ratio = 2.0;
  std::uint64_t seed = 1;

  std::size_t grid() const { return image_side / patch_side; }
  std::size_t patches() const { return grid() * grid(); }
  std::size_t patch_dim() const { return channels * patch_side * patch_side; }
  std::size_t head_dim() const { return embed_dim / heads; }
  std::size_t mlp_hidden() const { return static_cast<std::size_t>(embed_dim * mlp_ratio + 0.5); }

  void validate() const {
    if (patch_side == 0 || image_side % patch_side != 0)
      throw std::invalid_argument("encoder config: image_side " + std::to_string(image_side) +
                                  " not divisible by patch_side " + std::to_string(patch_side));
    if (heads == 0 || embed_dim % heads != 0)
      throw std::invalid_argument("encoder config: embed_dim " + std::to_string(embed_dim) +
                                  " not divisible by heads " + std::to_string(heads));
    if (channels == 0 || embed_dim == 0) throw std::invalid_argument("encoder config: zero dimension");
  }

  bool operator==(const EncoderConfig&) const = default;
};

// Frozen transformer encoder parameters. After freeze() the tensors are
// treated as immutable and a content hash pins them for the rest of the run.
struct EncoderWeights {
  EncoderConfig cfg;
  Tensor patch_w;  // patch_dim x embed_dim
  Tensor patch_b;  // embed_dim
  Tensor pos;      // patches x embed_dim, applied to patch tokens only
  Tensor cls;      // 1 x embed_dim

  struct Block {
    Tensor ln1_g, ln1_b;
    Tensor wq, bq, wk, bk, wv, bv;  // embed_dim x embed_dim projections
    Tensor wo, bo;
    Tensor ln2_g, ln2_b;
    Tensor fc1_w, fc1_b;  // embed_dim x mlp_hidden
    Tensor fc2_w, fc2_b;  // mlp_hidden x embed_dim
  };
  std::vector<Block> blocks;
  Tensor lnf_g, lnf_b;

  bool frozen = false;
  std::uint64_t freeze_hash = 0;

  template <class Self, class F>
  static void visit(Self& self, F&& f) {
    f("patch_w", self.patch_w);
    f("patch_b", self.patch_b);
    f("pos", self.pos);
    f("cls", self.cls);
    for (std::size_t i = 0; i < self.blocks.size(); ++i) {
      auto& b = self.blocks[i];
      const std::string p = "blk" + std::to_string(i) + ".";
      f(p + "ln1_g", b.ln1_g);
      f(p + "ln1_b", b.ln1_b);
      f(p + "wq", b.wq);
      f(p + "bq", b.bq);
      f(p + "wk", b.wk);
      f(p + "bk", b.bk);
      f(p + "wv", b.wv);
      f(p + "bv", b.bv);
      f(p + "wo", b.wo);
      f(p + "bo", b.bo);
      f(p + "ln2_g", b.ln2_g);
      f(p + "ln2_b", b.ln2_b);
      f(p + "fc1_w", b.fc1_w);
      f(p + "fc1_b", b.fc1_b);
      f(p + "fc2_w", b.fc2_w);
      f(p + "fc2_b", b.fc2_b);
    }
    f("lnf_g", self.lnf_g);
    f("lnf_b", self.lnf_b);
  }

  template <class F>
  void for_each_tensor(F&& f) {
    visit(*this, std::forward<F>(f));
  }
  template <class F>
  void for_each_tensor(F&& f) const {
    visit(*this, std::forward<F>(f));
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    for_each_tensor([&](const std::string&, const Tensor& t) { n += t.numel(); });
    return n;
  }

  // FNV-1a over shapes and raw value bits.
  std::uint64_t content_hash() const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    auto eat = [&h](std::uint64_t v) {
      for (int b = 0; b < 8; ++b) {
        h ^= (v >> (8 * b)) & 0xff;
        h *= 0x100000001b3ull;
      }
    };
    for_each_tensor([&](const std::string& name, const Tensor& t) {
      for (char c : name) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ull;
      }
      for (std::size_t d : t.shape()) eat(d);
      for (std::size_t i = 0; i < t.numel(); ++i) {
        std::uint64_t bits;
        const double v = t[i];
        static_assert(sizeof(bits) == sizeof(v));
        __builtin_memcpy(&bits, &v, sizeof(bits));
        eat(bits);
      }
    });
    return h;
  }

  // Idempotent: a second freeze keeps the original hash.
  std::uint64_t freeze() {
    if (!frozen) {
      frozen = true;
      freeze_hash = content_hash();
    }
    return freeze_hash;
  }
};

inline EncoderWeights init_encoder(const EncoderConfig& cfg) {
  cfg.validate();
  EncoderWeights w;
  w.cfg = cfg;
  Rng rng(derive_seed(cfg.seed, 0xe4c0de));
  const std::size_t l = cfg.embed_dim;
  w.patch_w = randn({cfg.patch_dim(), l}, rng, kWeightInitStd);
  w.patch_b = Tensor({l});
  w.pos = randn({cfg.patches(), l}, rng, kWeightInitStd);
  w.cls = randn({1, l}, rng, kWeightInitStd);
  w.blocks.resize(cfg.depth);
  for (auto& b : w.blocks) {
    b.ln1_g = Tensor::full({l}, 1.0);
    b.ln1_b = Tensor({l});
    b.wq = randn({l, l}, rng, kWeightInitStd);
    b.bq = Tensor({l});
    b.wk = randn({l, l}, rng, kWeightInitStd);
    b.bk = Tensor({l});
    b.wv = randn({l, l}, rng, kWeightInitStd);
    b.bv = Tensor({l});
    b.wo = randn({l, l}, rng, kWeightInitStd);
    b.bo = Tensor({l});
    b.ln2_g = Tensor::full({l}, 1.0);
    b.ln2_b = Tensor({l});
    b.fc1_w = randn({l, cfg.mlp_hidden()}, rng, kWeightInitStd);
    b.fc1_b = Tensor({cfg.mlp_hidden()});
    b.fc2_w = randn({cfg.mlp_hidden(), l}, rng, kWeightInitStd);
    b.fc2_b = Tensor({l});
  }
  w.lnf_g = Tensor::full({l}, 1.0);
  w.lnf_b = Tensor({l});
  return w;
}

// Non-overlapping patches in raster order, each flattened channel-major.
inline Tensor extract_patches(const Tensor& image, const EncoderConfig& cfg) {
  const Shape expect = {cfg.channels, cfg.image_side, cfg.image_side};
  if (image.shape() != expect)
    throw std::invalid_argument("extract_patches: image " + shape_str(image.shape()) + " expected " + shape_str(expect));
  const std::size_t g = cfg.grid(), p = cfg.patch_side, side = cfg.image_side;
  Tensor out({cfg.patches(), cfg.patch_dim()});
  for (std::size_t py = 0; py < g; ++py)
    for (std::size_t px = 0; px < g; ++px) {
      const std::size_t row = py * g + px;
      std::size_t k = 0;
      for (std::size_t c = 0; c < cfg.channels; ++c)
        for (std::size_t y = 0; y < p; ++y)
          for (std::size_t x = 0; x < p; ++x, ++k)
            out(row, k) = image[c * side * side + (py * p + y) * side + (px * p + x)];
    }
  return out;
}

// Traced handles for every encoder tensor, bound either as leaves (trainable,
// central pretraining) or constants (frozen federated use).
struct EncoderVars {
  Var patch_w, patch_b, pos, cls;
  struct BlockVars {
    Var ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b;
  };
  std::vector<BlockVars> blocks;
  Var lnf_g, lnf_b;
  const EncoderConfig* cfg = nullptr;
};

inline EncoderVars bind_encoder(GradTape& t, const EncoderWeights& w, bool trainable) {
  if (trainable && w.frozen) throw std::logic_error("bind_encoder: cannot bind frozen weights as trainable");
  auto bind = [&](const Tensor& x) { return trainable ? t.leaf(x) : t.constant(x); };
  EncoderVars v;
  v.cfg = &w.cfg;
  v.patch_w = bind(w.patch_w);
  v.patch_b = bind(w.patch_b);
  v.pos = bind(w.pos);
  v.cls = bind(w.cls);
  v.blocks.resize(w.blocks.size());
  for (std::size_t i = 0; i < w.blocks.size(); ++i) {
    const auto& b = w.blocks[i];
    auto& o = v.blocks[i];
    o.ln1_g = bind(b.ln1_g);
    o.ln1_b = bind(b.ln1_b);
    o.wq = bind(b.wq);
    o.bq = bind(b.bq);
    o.wk = bind(b.wk);
    o.bk = bind(b.bk);
    o.wv = bind(b.wv);
    o.bv = bind(b.bv);
    o.wo = bind(b.wo);
    o.bo = bind(b.bo);
    o.ln2_g = bind(b.ln2_g);
    o.ln2_b = bind(b.ln2_b);
    o.fc1_w = bind(b.fc1_w);
    o.fc1_b = bind(b.fc1_b);
    o.fc2_w = bind(b.fc2_w);
    o.fc2_b = bind(b.fc2_b);
  }
  v.lnf_g = bind(w.lnf_g);
  v.lnf_b = bind(w.lnf_b);
  return v;
}

// patches (m x patch_dim, constant or traced) -> m x embed_dim with
// positional offsets. Position information lives only on patch tokens.
inline Var embed_patches_traced(GradTape& t, Var patches, const EncoderVars& v) {
  Var z = t.matmul(patches, v.patch_w);
  z = t.add_rowvec(z, v.patch_b);
  return t.add(z, v.pos);
}

// Spec-level convenience: image -> patch embedding under frozen weights.
inline Tensor embed_patches(const Tensor& image, const EncoderWeights& w) {
  GradTape t;
  EncoderVars v = bind_encoder(t, w, /*trainable=*/false);
  Var p = t.constant(extract_patches(image, w.cfg));
  return t.value(embed_patches_traced(t, p, v));
}

namespace detail {

inline Var attention(GradTape& t, Var x, const EncoderVars::BlockVars& b, const EncoderConfig& cfg) {
  Var q = t.add_rowvec(t.matmul(x, b.wq), b.bq);
  Var k = t.add_rowvec(t.matmul(x, b.wk), b.bk);
  Var v = t.add_rowvec(t.matmul(x, b.wv), b.bv);
  const std::size_t dh = cfg.head_dim();
  std::vector<Var> heads;
  heads.reserve(cfg.heads);
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    const std::size_t c0 = h * dh, c1 = (h + 1) * dh;
    Var qh = t.slice_cols(q, c0, c1);
    Var kh = t.slice_cols(k, c0, c1);
    Var vh = t.slice_cols(v, c0, c1);
    Var scores = t.scale(t.matmul(qh, t.transpose(kh)), 1.0 / std::sqrt(static_cast<double>(dh)));
    Var attn = t.softmax_rows(scores);
    heads.push_back(t.matmul(attn, vh));
  }
  Var cat = t.concat_cols(std::span<const Var>(heads.data(), heads.size()));
  return t.add_rowvec(t.matmul(cat, b.wo), b.bo);
}

inline Var mlp(GradTape& t, Var x, const EncoderVars::BlockVars& b) {
  Var h = t.gelu(t.add_rowvec(t.matmul(x, b.fc1_w), b.fc1_b));
  return t.add_rowvec(t.matmul(h, b.fc2_w), b.fc2_b);
}

}  // namespace detail

// Token sequence [cls, prompts, z] through all blocks (pre-norm residual
// layout); returns the class-token row (1 x embed_dim) after the final norm.
// `prompts` may be invalid for a prompt-free sequence.
inline Var encoder_forward_traced(GradTape& t, Var cls_row, Var prompts, Var z, const EncoderVars& v) {
  const EncoderConfig& cfg = *v.cfg;
  const std::size_t l = cfg.embed_dim;
  auto check = [&](const Tensor& x, const char* name) {
    if (x.ndim() != 2 || x.cols() != l)
      throw std::invalid_argument(std::string("encoder_forward: ") + name + " " + shape_str(x.shape()) +
                                  " incompatible with embed_dim " + std::to_string(l));
  };
  check(t.value(cls_row), "class token");
  check(t.value(z), "patch embedding");
  if (t.value(z).rows() != cfg.patches())
    throw std::invalid_argument("encoder_forward: patch rows " + std::to_string(t.value(z).rows()) + " expected " +
                                std::to_string(cfg.patches()));
  Var x;
  if (prompts.valid()) {
    check(t.value(prompts), "prompts");
    x = t.concat_rows({cls_row, prompts, z});
  } else {
    x = t.concat_rows({cls_row, z});
  }
  for (const auto& b : v.blocks) {
    x = t.add(x, detail::attention(t, t.layer_norm(x, b.ln1_g, b.ln1_b, kLayerNormEps), b, cfg));
    x = t.add(x, detail::mlp(t, t.layer_norm(x, b.ln2_g, b.ln2_b, kLayerNormEps), b));
  }
  x = t.layer_norm(x, v.lnf_g, v.lnf_b, kLayerNormEps);
  return t.slice_rows(x, 0, 1);
}

// Plain forward under frozen weights; returns the feature of length embed_dim.
inline Tensor encoder_forward(const Tensor& cls_row, const Tensor& prompts, const Tensor& z,
                              const EncoderWeights& w) {
  GradTape t;
  EncoderVars v = bind_encoder(t, w, /*trainable=*/false);
  Var p = prompts.numel() > 0 ? t.constant(prompts) : Var{};
  Var f = encoder_forward_traced(t, t.constant(cls_row), p, t.constant(z), v);
  return Tensor({w.cfg.embed_dim}, t.value(f).vec());
}

// Affine classification head, embed_dim -> classes.
struct Head {
  Tensor w;  // embed_dim x classes
  Tensor b;  // classes

  static Head zeros(std::size_t embed_dim, std::size_t classes) {
    return Head{Tensor({embed_dim, classes}), Tensor({classes})};
  }
  std::size_t classes() const { return b.numel(); }
  std::size_t param_count() const { return w.numel() + b.numel(); }
};

inline Var head_forward_traced(GradTape& t, Var feature_row, Var w, Var b) {
  return t.add_rowvec(t.matmul(feature_row, w), b);
}

inline Tensor head_forward(const Tensor& feature, const Head& h) {
  Tensor f = feature;
  if (f.ndim() == 1) f = Tensor({1, f.numel()}, f.vec());
  if (f.ndim() != 2 || f.cols() != h.w.rows())
    throw std::invalid_argument("head_forward: feature " + shape_str(feature.shape()) + " vs head " +
                                shape_str(h.w.shape()));
  GradTape t;
  Var out = head_forward_traced(t, t.constant(f), t.constant(h.w), t.constant(h.b));
  return Tensor({h.classes()}, t.value(out).vec());
}

}  // namespace pfed
