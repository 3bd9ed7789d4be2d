#pragma once

#include <cstdint>
#include <vector>

#include "pfed/data.hpp"
#include "pfed/encoder.hpp"
#include "pfed/rng.hpp"
#include "pfed/tape.hpp"

namespace pfed {

struct LocalHyper {
  double lr = 0.25;
  double weight_decay = 0.001;
  std::size_t batch_size = 64;
  std::size_t epochs = 5;
};

// One federated participant. The head persists locally across rounds and is
// never transmitted; prompts are replaced by the server-issued initialization
// at the start of each round (strategy permitting).
struct ClientState {
  int id = 0;
  Tensor prompts;  // K x embed_dim
  Head head;
  const ClientSplit* data = nullptr;
  const EncoderWeights* encoder = nullptr;
  LocalHyper hp;
};

// Post-training prompt change, the server's only training signal.
struct PromptDelta {
  Tensor delta;  // adapted - issued, exact arithmetic on stored tensors
  int client_id = 0;
  int round = 0;
  std::size_t samples = 0;
};

struct AdaptResult {
  Tensor adapted;
  PromptDelta delta;
  std::vector<double> epoch_losses;  // mean mini-batch loss per epoch
};

namespace detail {

inline Var batch_loss(GradTape& t, const EncoderVars& ev, Var prompts, Var head_w, Var head_b,
                      const std::vector<const Sample*>& batch, const EncoderConfig& cfg) {
  std::vector<Var> logits;
  std::vector<int> labels;
  logits.reserve(batch.size());
  for (const Sample* s : batch) {
    Var z = embed_patches_traced(t, t.constant(extract_patches(s->image, cfg)), ev);
    Var feature = encoder_forward_traced(t, ev.cls, prompts, z, ev);
    logits.push_back(head_forward_traced(t, feature, head_w, head_b));
    labels.push_back(s->label);
  }
  Var stacked = t.concat_rows(std::span<const Var>(logits.data(), logits.size()));
  return t.cross_entropy(stacked, labels);
}

}  // namespace detail

// Local personalization: E epochs of mini-batch SGD on prompts and head under
// the frozen encoder. Weight decay enters as an L2 gradient term on both.
// Deterministic given (seed, round, client id).
inline AdaptResult local_adapt(ClientState& st, const Tensor& p_init, int round, std::uint64_t train_seed) {
  if (!st.data || st.data->train.empty()) throw std::invalid_argument("local_adapt: client has no training data");
  if (!st.encoder) throw std::logic_error("local_adapt: no encoder bound");
  const EncoderConfig& cfg = st.encoder->cfg;
  if (p_init.ndim() != 2 || p_init.cols() != cfg.embed_dim)
    throw std::invalid_argument("local_adapt: prompt shape " + shape_str(p_init.shape()) + " incompatible with embed_dim " +
                                std::to_string(cfg.embed_dim));

  Tensor prompts = p_init;
  const std::size_t n_train = st.data->train.size();
  const std::size_t bs = std::min(st.hp.batch_size, n_train);
  std::vector<double> epoch_losses;

  const std::uint64_t hash_before = st.encoder->frozen ? st.encoder->freeze_hash : 0;

  for (std::size_t epoch = 0; epoch < st.hp.epochs; ++epoch) {
    Rng rng(derive_seed(train_seed, static_cast<std::uint64_t>(round), static_cast<std::uint64_t>(st.id), epoch));
    std::vector<std::size_t> order = rng.permutation(n_train);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t at = 0; at < n_train; at += bs, ++batches) {
      std::vector<const Sample*> batch;
      for (std::size_t i = at; i < std::min(at + bs, n_train); ++i) batch.push_back(&st.data->train[order[i]]);

      GradTape t;
      Var p, hw, hb;
      double loss_val = 0.0;
      try {
        EncoderVars ev = bind_encoder(t, *st.encoder, /*trainable=*/false);
        p = t.leaf(prompts);
        hw = t.leaf(st.head.w);
        hb = t.leaf(st.head.b);
        Var loss = detail::batch_loss(t, ev, p, hw, hb, batch, cfg);
        loss_val = t.value(loss)[0];
        if (!std::isfinite(loss_val)) throw std::domain_error("non-finite loss");
        t.backward(loss);
      } catch (const std::domain_error& e) {
        throw std::runtime_error("local_adapt: diverged at client " + std::to_string(st.id) + " epoch " +
                                 std::to_string(epoch) + " batch " + std::to_string(batches) + ": " + e.what());
      }
      loss_sum += loss_val;

      auto step = [&](Tensor& param, const Tensor& grad) {
        for (std::size_t i = 0; i < param.numel(); ++i)
          param[i] -= st.hp.lr * (grad[i] + st.hp.weight_decay * param[i]);
      };
      step(prompts, t.grad(p));
      step(st.head.w, t.grad(hw));
      step(st.head.b, t.grad(hb));
    }
    epoch_losses.push_back(loss_sum / static_cast<double>(batches));
  }

  if (st.encoder->frozen && st.encoder->freeze_hash != hash_before)
    throw std::logic_error("local_adapt: frozen encoder changed during training");

  AdaptResult out;
  out.adapted = prompts;
  out.delta.delta = prompts;
  axpy(-1.0, p_init, out.delta.delta);
  out.delta.client_id = st.id;
  out.delta.round = round;
  out.delta.samples = n_train;
  out.epoch_losses = std::move(epoch_losses);
  st.prompts = out.adapted;
  return out;
}

// Highest-logit class; ties break toward the lowest index.
inline int argmax_class(const Tensor& logits) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < logits.numel(); ++j)
    if (logits[j] > logits[best]) best = j;
  return static_cast<int>(best);
}

inline int predict(const ClientState& st, const Tensor& image) {
  const Tensor z = embed_patches(image, *st.encoder);
  const Tensor feature = encoder_forward(st.encoder->cls, st.prompts, z, *st.encoder);
  return argmax_class(head_forward(feature, st.head));
}

struct EvalResult {
  double accuracy = 0.0;
  double mean_loss = 0.0;
};

inline EvalResult evaluate(const ClientState& st, const std::vector<Sample>& split) {
  if (split.empty()) throw std::invalid_argument("evaluate: empty split for client " + std::to_string(st.id));
  const EncoderConfig& cfg = st.encoder->cfg;
  std::size_t correct = 0;
  double loss_sum = 0.0;
  for (const Sample& s : split) {
    GradTape t;
    EncoderVars ev = bind_encoder(t, *st.encoder, /*trainable=*/false);
    Var p = st.prompts.numel() > 0 ? t.constant(st.prompts) : Var{};
    Var z = embed_patches_traced(t, t.constant(extract_patches(s.image, cfg)), ev);
    Var feature = encoder_forward_traced(t, ev.cls, p, z, ev);
    Var logits = head_forward_traced(t, feature, t.constant(st.head.w), t.constant(st.head.b));
    if (argmax_class(t.value(logits)) == s.label) ++correct;
    loss_sum += t.value(t.cross_entropy(logits, {s.label}))[0];
  }
  return EvalResult{static_cast<double>(correct) / static_cast<double>(split.size()),
                    loss_sum / static_cast<double>(split.size())};
}

}  // namespace pfed
