#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "vcap/captioner.hpp"
#include "vcap/checkpoint.hpp"
#include "vcap/config.hpp"
#include "vcap/dataset.hpp"
#include "vcap/metrics.hpp"
#include "vcap/optim.hpp"

namespace vcap {

struct TrainLog {
  std::size_t step = 0;
  double loss = 0.0;
  double reward = 0.0;  // mean greedy reward over the interval; 0 for CE
};

using LogSink = std::function<void(const TrainLog&)>;

/// Sentence reward w_cider * CIDEr-D + w_bleu * BLEU@4 against one video's
/// references. Document frequencies come from the training references and
/// are frozen for the whole run.
class RewardModel {
 public:
  RewardModel(const Dataset& data, double w_cider, double w_bleu)
      : refs_(data.metric_refs()), cider_(compute_doc_freq(refs_)), w_cider_(w_cider), w_bleu_(w_bleu) {
    for (const auto& set : refs_) {
      if (set.empty()) throw ValueError("reward: video without references");
      std::vector<CiderD::Vec> vecs;
      for (const auto& r : set) vecs.push_back(cider_.vectorize(r));
      ref_vecs_.push_back(std::move(vecs));
    }
  }

  double cider(std::size_t video, const TokenSeq& words) const {
    return cider_.sentence(cider_.vectorize(words), ref_vecs_.at(video));
  }
  double bleu(std::size_t video, const TokenSeq& words) const { return sentence_bleu(words, refs_.at(video)); }
  double operator()(std::size_t video, const TokenSeq& words) const {
    return w_cider_ * cider(video, words) + w_bleu_ * bleu(video, words);
  }

 private:
  std::vector<RefSet> refs_;
  CiderD cider_;
  std::vector<std::vector<CiderD::Vec>> ref_vecs_;
  double w_cider_, w_bleu_;
};

template <class T>
struct ScstBatch {
  Var<T> loss;  // lambda * RL + (1 - lambda) * CE
  double ce = 0.0;
  double rl = 0.0;
  double mean_sample_reward = 0.0;
  double mean_greedy_reward = 0.0;
  std::vector<double> advantages;
  std::vector<TokenSeq> samples;
};

/// Self-critical mixed objective over a batch. For each video a caption is
/// sampled, the greedy decode serves as baseline, and the advantage
/// A = r(sample) - r(greedy) is a constant weight on -sum log p(sample).
/// CE uses the given teacher-forcing targets. `frozen_advantage` replaces the
/// computed advantages (used to check gradients with A held fixed).
template <class T>
ScstBatch<T> scst_batch_loss(Tape<T>& tape, Captioner<T>& model, const Dataset& data,
                             std::span<const std::size_t> batch, const std::vector<TokenSeq>& ce_targets,
                             const RewardModel* reward, const TrainConfig& cfg, std::mt19937_64& sample_rng,
                             const std::vector<double>* frozen_advantage = nullptr) {
  if (batch.empty()) throw ValueError("scst_batch_loss: empty batch");
  if (ce_targets.size() != batch.size()) throw ValueError("scst_batch_loss: one CE target per video required");
  const double lambda = cfg.rl_lambda;
  if (lambda > 0.0 && !reward) throw ValueError("scst_batch_loss: reward model required when rl_lambda > 0");
  ScstBatch<T> out;
  std::vector<Var<T>> ce_terms, rl_terms;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& video = data.videos.at(batch[i]);
    if (data.refs.at(batch[i]).captions.empty()) throw ValueError("scst_batch_loss: empty references");
    auto bound = model.bind(tape, video);
    if (lambda < 1.0) ce_terms.push_back(sequence_ce_loss(bound, ce_targets[i]));
    if (lambda > 0.0) {
      auto sample = sample_decode(bound, cfg.max_len, sample_rng);
      const auto greedy = model.greedy(video, cfg.max_len);
      const double rs = (*reward)(batch[i], sample.tokens);
      const double rg = (*reward)(batch[i], greedy);
      const double adv = frozen_advantage ? frozen_advantage->at(i) : rs - rg;
      out.mean_sample_reward += rs;
      out.mean_greedy_reward += rg;
      out.advantages.push_back(adv);
      out.samples.push_back(sample.tokens);
      rl_terms.push_back(scale(sample.log_prob, static_cast<T>(-adv)));
    }
  }
  const double n = static_cast<double>(batch.size());
  out.mean_sample_reward /= n;
  out.mean_greedy_reward /= n;
  if (lambda == 0.0) {
    out.loss = mean_n(ce_terms);
    out.ce = static_cast<double>(out.loss.scalar());
    return out;
  }
  auto rl = mean_n(rl_terms);
  out.rl = static_cast<double>(rl.scalar());
  if (lambda == 1.0) {
    out.loss = rl;
    return out;
  }
  auto ce = mean_n(ce_terms);
  out.ce = static_cast<double>(ce.scalar());
  out.loss = add(scale(rl, static_cast<T>(lambda)), scale(ce, static_cast<T>(1.0 - lambda)));
  return out;
}

namespace detail {

/// Epoch-shuffled minibatches with one uniformly drawn reference per video.
class BatchSampler {
 public:
  BatchSampler(const Dataset& data, std::uint64_t seed) : data_(data), rng_(seed), order_(data.size()) {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    pos_ = order_.size();
  }

  void next(std::size_t batch_size, std::vector<std::size_t>& idx, std::vector<TokenSeq>& targets) {
    idx.clear();
    targets.clear();
    const std::size_t b = std::min(batch_size, order_.size());
    while (idx.size() < b) {
      if (pos_ == order_.size()) {
        std::shuffle(order_.begin(), order_.end(), rng_);
        pos_ = 0;
      }
      idx.push_back(order_[pos_++]);
    }
    for (auto i : idx) {
      const auto& caps = data_.refs[i].captions;
      std::uniform_int_distribution<std::size_t> pick(0, caps.size() - 1);
      targets.push_back(caps[pick(rng_)]);
    }
  }

 private:
  const Dataset& data_;
  std::mt19937_64 rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_;
};

inline void check_dataset(const Dataset& data, std::size_t min_videos) {
  if (data.size() < min_videos)
    throw ValueError("training needs at least " + std::to_string(min_videos) + " video(s), got " +
                     std::to_string(data.size()));
}

}  // namespace detail

/// Shared CE / SCST loop. Adam starts fresh; data order comes from stream 1
/// of the seed and sampling from stream 2, so with rl_lambda = 0 the SCST
/// loop performs exactly the CE updates.
template <class T>
void train_captioner(Captioner<T>& model, const Dataset& data, const TrainConfig& cfg, bool rl,
                     const LogSink& log = {}) {
  cfg.validate();
  detail::check_dataset(data, 1);
  Adam<T> adam(AdamConfig{cfg.lr, 0.9, 0.999, 1e-8, cfg.clip});
  detail::BatchSampler sampler(data, derive_seed(cfg.seed, 1));
  std::mt19937_64 sample_rng(derive_seed(cfg.seed, 2));
  const bool use_rl = rl && cfg.rl_lambda > 0.0;
  std::optional<RewardModel> reward;
  if (use_rl) reward.emplace(data, cfg.w_cider, cfg.w_bleu);
  TrainConfig step_cfg = cfg;
  if (!rl) step_cfg.rl_lambda = 0.0;

  std::vector<std::size_t> idx;
  std::vector<TokenSeq> targets;
  double loss_acc = 0.0, reward_acc = 0.0;
  std::size_t acc_n = 0;
  for (std::size_t step = 0; step < cfg.max_steps; ++step) {
    sampler.next(cfg.batch_size, idx, targets);
    Tape<T> tape;
    auto b = scst_batch_loss(tape, model, data, idx, targets, reward ? &*reward : nullptr, step_cfg, sample_rng);
    const double loss = static_cast<double>(b.loss.scalar());
    if (!std::isfinite(loss))
      throw NumericalError("non-finite loss at step " + std::to_string(step + 1) + " (ce " + std::to_string(b.ce) +
                           ", rl " + std::to_string(b.rl) + ")");
    tape.backward(b.loss);
    adam.step(model.params());
    loss_acc += loss;
    reward_acc += b.mean_greedy_reward;
    ++acc_n;
    if (log && cfg.log_every > 0 && ((step + 1) % cfg.log_every == 0 || step + 1 == cfg.max_steps)) {
      log({step + 1, loss_acc / static_cast<double>(acc_n), reward_acc / static_cast<double>(acc_n)});
      loss_acc = reward_acc = 0.0;
      acc_n = 0;
    }
  }
}

inline CaptionerDims captioner_dims(const Dataset& data, const TrainConfig& cfg) {
  return {data.dims, {data.vocab.size(), cfg.hidden, cfg.embed, cfg.att}, cfg.branch};
}

inline void echo_config(Checkpoint& c, const TrainConfig& cfg) {
  for (const auto& [k, v] : cfg.to_kv()) c.meta["cfg." + k] = v;
}

/// Cross-entropy training from a seeded initialization.
inline Checkpoint train_ce(const Dataset& data, const TrainConfig& cfg, const LogSink& log = {}) {
  cfg.validate();
  Captioner<float> model(captioner_dims(data, cfg), derive_seed(cfg.seed, 0));
  train_captioner(model, data, cfg, false, log);
  auto c = model.to_checkpoint(data.vocab, cfg.max_steps);
  echo_config(c, cfg);
  return c;
}

inline void check_vocab(const Checkpoint& c, const Vocabulary& vocab) {
  if (c.get("vocab_hash") != hex64(vocab.hash()))
    throw ValueError("checkpoint was trained with a different vocabulary (hash " + c.get("vocab_hash") + ", data " +
                     hex64(vocab.hash()) + ")");
}

/// Self-critical fine-tuning of a CE checkpoint on the mixed objective.
inline Checkpoint train_rl(const Dataset& data, const TrainConfig& cfg, const Checkpoint& init,
                           const LogSink& log = {}) {
  cfg.validate();
  check_vocab(init, data.vocab);
  if (parse_branch(init.get("branch")) != cfg.branch)
    throw ValueError(std::string("checkpoint branch is ") + init.get("branch") + ", config asks for " +
                     branch_name(cfg.branch));
  if (cfg.max_steps == 0) return init;
  auto model = Captioner<float>::from_checkpoint(init);
  train_captioner(model, data, cfg, true, log);
  auto c = model.to_checkpoint(data.vocab, init.get_size("step") + cfg.max_steps);
  echo_config(c, cfg);
  return c;
}

// ---------------------------------------------------------------------------
// Evaluation helpers

/// Teacher-forced argmax accuracy over every reference token after BOS.
template <class T>
double token_accuracy(Captioner<T>& model, const Dataset& data) {
  std::size_t hit = 0, total = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    for (const auto& cap : data.refs[i].captions) {
      Tape<T> tape(false);
      auto b = model.bind(tape, data.videos[i]);
      auto state = DecoderState<T>::zeros(tape, b.dec.hidden());
      for (std::size_t t = 1; t < cap.size(); ++t) {
        auto step = decode_step(b.dec, state, b.global, cap[t - 1], b.memory);
        hit += detail::argmax_lowest<T>(step.logits.value()) == cap[t];
        ++total;
        state = step.state;
      }
    }
  }
  return total ? static_cast<double>(hit) / static_cast<double>(total) : 0.0;
}

template <class T>
std::vector<TokenSeq> greedy_corpus(Captioner<T>& model, const std::vector<VideoFeatures>& videos,
                                    std::size_t max_len) {
  std::vector<TokenSeq> out;
  for (const auto& v : videos) out.push_back(model.greedy(v, max_len));
  return out;
}

/// Videos whose greedy caption equals one of their references.
template <class T>
std::size_t exact_matches(Captioner<T>& model, const Dataset& data, std::size_t max_len) {
  const auto refs = data.metric_refs();
  std::size_t n = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto out = model.greedy(data.videos[i], max_len);
    n += std::find(refs[i].begin(), refs[i].end(), out) != refs[i].end();
  }
  return n;
}

/// Corpus CIDEr-D of greedy decodes, document frequencies from `data`.
template <class T>
double greedy_cider(Captioner<T>& model, const Dataset& data, std::size_t max_len) {
  const auto refs = data.metric_refs();
  return cider_d(greedy_corpus(model, data.videos, max_len), refs, compute_doc_freq(refs));
}

}  // namespace vcap
