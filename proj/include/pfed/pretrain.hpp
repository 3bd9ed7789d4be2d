#pragma once

#include <cstdint>
#include <vector>

#include "pfed/client.hpp"
#include "pfed/data.hpp"
#include "pfed/encoder.hpp"

namespace pfed {

struct PretrainOptions {
  std::size_t epochs = 10;
  double lr = 0.05;
  std::size_t batch_size = 64;
  std::uint64_t seed = 7;
};

struct PretrainStats {
  std::vector<double> epoch_losses;
  double final_accuracy = 0.0;  // on the pretraining split itself
};

// Central supervised pretraining of the full encoder plus a throwaway head on
// a pooled pretext split; prompt-free sequences. Callers freeze() afterwards.
inline PretrainStats pretrain_encoder(EncoderWeights& w, const std::vector<Sample>& data, std::size_t classes,
                                      const PretrainOptions& opt) {
  if (w.frozen) throw std::logic_error("pretrain_encoder: weights already frozen");
  if (data.empty()) throw std::invalid_argument("pretrain_encoder: empty pretraining split");
  const EncoderConfig& cfg = w.cfg;
  Head head = Head::zeros(cfg.embed_dim, classes);
  PretrainStats stats;
  const std::size_t bs = std::min(opt.batch_size, data.size());

  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    Rng rng(derive_seed(opt.seed, 0x93e7, epoch));
    std::vector<std::size_t> order = rng.permutation(data.size());
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t at = 0; at < data.size(); at += bs, ++batches) {
      GradTape t;
      EncoderVars ev = bind_encoder(t, w, /*trainable=*/true);
      Var hw = t.leaf(head.w);
      Var hb = t.leaf(head.b);
      std::vector<Var> logits;
      std::vector<int> labels;
      for (std::size_t i = at; i < std::min(at + bs, data.size()); ++i) {
        const Sample& s = data[order[i]];
        Var z = embed_patches_traced(t, t.constant(extract_patches(s.image, cfg)), ev);
        Var f = encoder_forward_traced(t, ev.cls, Var{}, z, ev);
        logits.push_back(head_forward_traced(t, f, hw, hb));
        labels.push_back(s.label);
      }
      Var loss = t.cross_entropy(t.concat_rows(std::span<const Var>(logits.data(), logits.size())), labels);
      loss_sum += t.value(loss)[0];
      t.backward(loss);

      auto step = [&](Var v, Tensor& param) { axpy(-opt.lr, t.grad(v), param); };
      step(ev.patch_w, w.patch_w);
      step(ev.patch_b, w.patch_b);
      step(ev.pos, w.pos);
      step(ev.cls, w.cls);
      for (std::size_t b = 0; b < w.blocks.size(); ++b) {
        auto& wb = w.blocks[b];
        auto& vb = ev.blocks[b];
        step(vb.ln1_g, wb.ln1_g);
        step(vb.ln1_b, wb.ln1_b);
        step(vb.wq, wb.wq);
        step(vb.bq, wb.bq);
        step(vb.wk, wb.wk);
        step(vb.bk, wb.bk);
        step(vb.wv, wb.wv);
        step(vb.bv, wb.bv);
        step(vb.wo, wb.wo);
        step(vb.bo, wb.bo);
        step(vb.ln2_g, wb.ln2_g);
        step(vb.ln2_b, wb.ln2_b);
        step(vb.fc1_w, wb.fc1_w);
        step(vb.fc1_b, wb.fc1_b);
        step(vb.fc2_w, wb.fc2_w);
        step(vb.fc2_b, wb.fc2_b);
      }
      step(ev.lnf_g, w.lnf_g);
      step(ev.lnf_b, w.lnf_b);
      step(hw, head.w);
      step(hb, head.b);
    }
    stats.epoch_losses.push_back(loss_sum / static_cast<double>(batches));
  }

  std::size_t correct = 0;
  for (const Sample& s : data) {
    const Tensor z = embed_patches(s.image, w);
    const Tensor f = encoder_forward(w.cls, Tensor(), z, w);
    if (argmax_class(head_forward(f, head)) == s.label) ++correct;
  }
  stats.final_accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  return stats;
}

}  // namespace pfed
