#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "vcap/checkpoint.hpp"
#include "vcap/config.hpp"
#include "vcap/dataset.hpp"
#include "vcap/errors.hpp"
#include "vcap/optim.hpp"
#include "vcap/tape.hpp"
#include "vcap/train.hpp"

namespace vcap {

struct VseDims {
  std::size_t video = 0;  // Dv = Dt + Da
  std::size_t vocab = 0;
  std::size_t embed = 32;  // word embedding width
  std::size_t joint = 32;  // E
};

/// Video-sentence embedding. The video tower is an affine map of the raw
/// global feature; the sentence tower runs an LSTM over word embeddings and
/// projects its final hidden state. Both outputs are unit vectors.
template <class T>
class VseModel {
 public:
  VseModel(const VseDims& dims, double margin, std::uint64_t seed) : dims_(dims), margin_(margin) {
    if (dims.video == 0 || dims.vocab < 4 || dims.embed == 0 || dims.joint == 0)
      throw ValueError("vse: dims must be positive");
    std::mt19937_64 rng(seed);
    const std::size_t E = dims.joint;
    glorot_matrix(store_.add("vse.video.W", {E, dims.video}), rng);
    store_.add("vse.video.b", {E});
    glorot_matrix(store_.add("vse.embed", {dims.vocab, dims.embed}), rng);
    glorot_matrix(store_.add("vse.lstm.W", {4 * E, dims.embed + E}), rng);
    auto& b = store_.add("vse.lstm.b", {4 * E});
    for (std::size_t i = E; i < 2 * E; ++i) b.value[i] = T{1};
    glorot_matrix(store_.add("vse.out.W", {E, E}), rng);
    store_.add("vse.out.b", {E});
  }

  static VseModel from_checkpoint(const Checkpoint& c) {
    if (c.get("kind") != "vse") throw FormatError("checkpoint is not a video-sentence embedding model");
    VseDims d{c.get_size("vse.video"), c.get_size("vse.vocab"), c.get_size("vse.embed"), c.get_size("vse.joint")};
    double margin = 0.0;
    try {
      margin = std::stod(c.get("vse.margin"));
    } catch (const std::logic_error&) {
      throw FormatError("checkpoint has a bad vse.margin value");
    }
    VseModel m(d, margin, 0);
    import_params(m.store_, c);
    return m;
  }

  Checkpoint to_checkpoint(const Vocabulary& vocab, std::size_t step) const {
    Checkpoint c;
    c.params = export_params(store_);
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", margin_);
    c.meta = {{"kind", "vse"},
              {"vocab_hash", hex64(vocab.hash())},
              {"step", std::to_string(step)},
              {"vse.video", std::to_string(dims_.video)},
              {"vse.vocab", std::to_string(dims_.vocab)},
              {"vse.embed", std::to_string(dims_.embed)},
              {"vse.joint", std::to_string(dims_.joint)},
              {"vse.margin", buf}};
    return c;
  }

  const VseDims& dims() const { return dims_; }
  double margin() const { return margin_; }
  ParameterStore<T>& params() { return store_; }
  const ParameterStore<T>& params() const { return store_; }

  Var<T> embed_video(Tape<T>& tape, std::span<const float> global) {
    if (global.size() != dims_.video)
      throw ShapeError("vse: video feature has " + std::to_string(global.size()) + " entries, model expects " +
                       std::to_string(dims_.video));
    auto x = tape.constant({global.size()}, std::vector<T>(global.begin(), global.end()));
    auto y = affine(x, tape.param(store_.at("vse.video.W")), tape.param(store_.at("vse.video.b")));
    return normalized(y, "video");
  }

  /// `words` excludes BOS/EOS.
  Var<T> embed_sentence(Tape<T>& tape, const TokenSeq& words) {
    if (words.empty()) throw ValueError("vse: cannot embed an empty sentence");
    auto table = tape.param(store_.at("vse.embed"));
    LstmWeights<T> w{tape.param(store_.at("vse.lstm.W")), tape.param(store_.at("vse.lstm.b"))};
    auto h = tape.zeros(dims_.joint);
    auto c = tape.zeros(dims_.joint);
    for (auto id : words) {
      if (id >= dims_.vocab) throw ValueError("vse: token id " + std::to_string(id) + " outside the vocabulary");
      auto out = lstm_cell(row(table, id), h, c, w);
      h = out.h;
      c = out.c;
    }
    auto y = affine(h, tape.param(store_.at("vse.out.W")), tape.param(store_.at("vse.out.b")));
    return normalized(y, "sentence");
  }

 private:
  static Var<T> normalized(const Var<T>& y, const char* tower) {
    double sq = 0.0;
    for (T v : y.value()) sq += static_cast<double>(v) * static_cast<double>(v);
    if (sq == 0.0) throw NumericalError(std::string("vse: ") + tower + " projection is the zero vector");
    return l2_normalize(y);
  }

  VseDims dims_;
  double margin_;
  ParameterStore<T> store_;
};

/// Mean hardest-negative hinge over S[i][j] = v_i . c_j, pairs on the diagonal.
template <class T>
Var<T> vse_loss(const std::vector<Var<T>>& videos, const std::vector<Var<T>>& sentences, T margin) {
  if (videos.size() != sentences.size()) throw ValueError("vse_loss: videos and sentences must pair up");
  if (videos.size() < 2) throw ValueError("vse_loss: batch needs at least 2 pairs");
  return hardest_negative_hinge(matmul_t(stack_rows(videos), stack_rows(sentences)), margin);
}

struct RerankResult {
  std::size_t chosen = 0;
  std::vector<double> similarities;
};

/// Cosine similarity of every candidate to the video; empty candidates score
/// -1, the bottom of the range. Ties go to the lowest index.
template <class T>
RerankResult rerank(VseModel<T>& model, const VideoFeatures& video, const std::vector<TokenSeq>& candidates) {
  if (candidates.empty()) throw ValueError("rerank: no candidates");
  Tape<T> tape(false);
  const auto g = video.pooled_global();
  auto v = model.embed_video(tape, g);
  RerankResult r;
  for (const auto& cand : candidates) {
    if (cand.empty()) {
      r.similarities.push_back(-1.0);
      continue;
    }
    auto s = model.embed_sentence(tape, cand);
    double d = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) d += static_cast<double>(v[i]) * static_cast<double>(s[i]);
    r.similarities.push_back(std::clamp(d, -1.0, 1.0));
  }
  for (std::size_t i = 1; i < r.similarities.size(); ++i)
    if (r.similarities[i] > r.similarities[r.chosen]) r.chosen = i;
  return r;
}

inline VseDims vse_dims(const Dataset& data, const TrainConfig& cfg) {
  return {data.dims.temporal + data.dims.audio, data.vocab.size(), cfg.embed, cfg.vse_dim};
}

/// Adam on vse_loss over minibatches of distinct videos, one random reference
/// each. Batches are drawn from stream 3 of the seed.
inline Checkpoint train_vse(const Dataset& data, const TrainConfig& cfg, const LogSink& log = {}) {
  cfg.validate();
  detail::check_dataset(data, 2);
  VseModel<float> model(vse_dims(data, cfg), cfg.margin, derive_seed(cfg.seed, 0));
  Adam<float> adam(AdamConfig{cfg.lr, 0.9, 0.999, 1e-8, cfg.clip});
  std::mt19937_64 rng(derive_seed(cfg.seed, 3));
  const auto refs = data.metric_refs();
  std::vector<std::vector<float>> globals;
  for (const auto& v : data.videos) globals.push_back(v.pooled_global());
  std::vector<std::size_t> all(data.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  const std::size_t B = std::clamp<std::size_t>(cfg.batch_size, 2, data.size());

  double loss_acc = 0.0;
  std::size_t acc_n = 0;
  for (std::size_t step = 0; step < cfg.max_steps; ++step) {
    std::vector<std::size_t> idx;
    std::sample(all.begin(), all.end(), std::back_inserter(idx), B, rng);
    std::shuffle(idx.begin(), idx.end(), rng);
    Tape<float> tape;
    std::vector<Var<float>> vs, ss;
    for (auto i : idx) {
      std::vector<const TokenSeq*> usable;
      for (const auto& r : refs[i])
        if (!r.empty()) usable.push_back(&r);
      if (usable.empty()) throw ValueError("train_vse: video " + data.videos[i].video_id + " has no non-empty caption");
      std::uniform_int_distribution<std::size_t> pick(0, usable.size() - 1);
      vs.push_back(model.embed_video(tape, globals[i]));
      ss.push_back(model.embed_sentence(tape, *usable[pick(rng)]));
    }
    auto loss = vse_loss(vs, ss, static_cast<float>(cfg.margin));
    const double l = loss.scalar();
    if (!std::isfinite(l)) throw NumericalError("train_vse: non-finite loss at step " + std::to_string(step + 1));
    tape.backward(loss);
    adam.step(model.params());
    loss_acc += l;
    ++acc_n;
    if (log && cfg.log_every > 0 && ((step + 1) % cfg.log_every == 0 || step + 1 == cfg.max_steps)) {
      log({step + 1, loss_acc / static_cast<double>(acc_n), 0.0});
      loss_acc = 0.0;
      acc_n = 0;
    }
  }
  auto c = model.to_checkpoint(data.vocab, cfg.max_steps);
  echo_config(c, cfg);
  return c;
}

/// Caption-to-video recall@1, querying with each video's first reference.
template <class T>
double caption_recall_at_1(VseModel<T>& model, const Dataset& data) {
  if (data.size() == 0) return 0.0;
  const auto refs = data.metric_refs();
  Tape<T> tape(false);
  std::vector<Var<T>> vids;
  for (const auto& v : data.videos) vids.push_back(model.embed_video(tape, v.pooled_global()));
  std::size_t hits = 0;
  for (std::size_t q = 0; q < data.size(); ++q) {
    auto s = model.embed_sentence(tape, refs[q].at(0));
    std::size_t best = 0;
    double best_sim = -2.0;
    for (std::size_t j = 0; j < vids.size(); ++j) {
      double d = 0.0;
      for (std::size_t k = 0; k < s.size(); ++k) d += static_cast<double>(vids[j][k]) * static_cast<double>(s[k]);
      if (d > best_sim) {
        best_sim = d;
        best = j;
      }
    }
    hits += best == q;
  }
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

}  // namespace vcap
