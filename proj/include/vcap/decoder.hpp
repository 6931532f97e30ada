#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "vcap/encoder.hpp"
#include "vcap/featio.hpp"
#include "vcap/tape.hpp"
#include "vcap/tensor.hpp"

namespace vcap {

enum class Branch { Temporal, Spatial };

inline const char* branch_name(Branch b) { return b == Branch::Temporal ? "temporal" : "spatial"; }

inline Branch parse_branch(const std::string& s) {
  if (s == "temporal") return Branch::Temporal;
  if (s == "spatial") return Branch::Spatial;
  throw ValueError("branch must be temporal or spatial, got '" + s + "'");
}

struct DecoderDims {
  std::size_t vocab = 0;
  std::size_t hidden = 64;  // H
  std::size_t embed = 32;   // De
  std::size_t att = 32;     // A
};

template <class T>
struct DecoderParams {
  Parameter<T>* embed = nullptr;        // [V x De]
  Parameter<T>* att_lstm_W = nullptr;   // [4H x (H + De + H + H)]
  Parameter<T>* att_lstm_b = nullptr;   // [4H]
  Parameter<T>* lang_lstm_W = nullptr;  // [4H x (H + H + H)]
  Parameter<T>* lang_lstm_b = nullptr;  // [4H]
  Parameter<T>* W_vc = nullptr;         // [A x H]
  Parameter<T>* W_hc = nullptr;         // [A x H]
  Parameter<T>* w_c = nullptr;          // [A]
  Parameter<T>* W_y = nullptr;          // [V x H]
  Parameter<T>* b_y = nullptr;          // [V]

  static DecoderParams from(ParameterStore<T>& s) {
    return {&s.at("dec.embed"),    &s.at("dec.att_lstm.W"), &s.at("dec.att_lstm.b"), &s.at("dec.lang_lstm.W"),
            &s.at("dec.lang_lstm.b"), &s.at("dec.att.W_vc"), &s.at("dec.att.W_hc"),  &s.at("dec.att.w_c"),
            &s.at("dec.out.W"),    &s.at("dec.out.b")};
  }
};

/// Glorot weights, zero biases except the LSTM forget-gate block (+1).
template <class T>
void add_decoder_params(ParameterStore<T>& s, const DecoderDims& d, std::mt19937_64& rng) {
  const std::size_t H = d.hidden;
  glorot_matrix(s.add("dec.embed", {d.vocab, d.embed}), rng);
  glorot_matrix(s.add("dec.att_lstm.W", {4 * H, H + d.embed + H + H}), rng);
  auto& b1 = s.add("dec.att_lstm.b", {4 * H});
  glorot_matrix(s.add("dec.lang_lstm.W", {4 * H, H + H + H}), rng);
  auto& b2 = s.add("dec.lang_lstm.b", {4 * H});
  for (std::size_t i = H; i < 2 * H; ++i) b1.value[i] = b2.value[i] = T{1};
  glorot_matrix(s.add("dec.att.W_vc", {d.att, H}), rng);
  glorot_matrix(s.add("dec.att.W_hc", {d.att, H}), rng);
  glorot_matrix(s.add("dec.att.w_c", {d.att}), rng);
  glorot_matrix(s.add("dec.out.W", {d.vocab, H}), rng);
  s.add("dec.out.b", {d.vocab});
}

/// Decoder parameters bound as leaves of one tape.
template <class T>
struct DecoderVars {
  Var<T> embed;
  LstmWeights<T> att_lstm;
  LstmWeights<T> lang_lstm;
  Var<T> W_vc, W_hc, w_c;
  Var<T> W_y, b_y;

  std::size_t hidden() const { return W_vc.shape()[1]; }
  std::size_t vocab() const { return W_y.shape()[0]; }

  static DecoderVars bind(Tape<T>& t, const DecoderParams<T>& p) {
    return {t.param(*p.embed),
            {t.param(*p.att_lstm_W), t.param(*p.att_lstm_b)},
            {t.param(*p.lang_lstm_W), t.param(*p.lang_lstm_b)},
            t.param(*p.W_vc),
            t.param(*p.W_hc),
            t.param(*p.w_c),
            t.param(*p.W_y),
            t.param(*p.b_y)};
  }
};

/// Attended memory V^x with its projection W_vc V^x precomputed once per video.
template <class T>
struct Memory {
  std::optional<Var<T>> rows;       // [k x H]
  std::optional<Var<T>> projected;  // [k x A]

  std::size_t size() const { return rows ? rows->rows() : 0; }

  static Memory prepare(const DecoderVars<T>& d, const std::optional<Var<T>>& rows) {
    Memory m;
    if (rows && rows->rows() > 0) {
      m.rows = rows;
      m.projected = linear_rows(*rows, d.W_vc);
    }
    return m;
  }
};

template <class T>
struct AttentionResult {
  Var<T> alpha;    // [k]
  Var<T> context;  // [H]
};

/// alpha = softmax_i(w_c . tanh(W_vc v_i + W_hc h1)), context = sum_i alpha_i v_i.
template <class T>
AttentionResult<T> attend(const Var<T>& h1, const Memory<T>& memory, const DecoderVars<T>& d) {
  if (memory.size() == 0) throw ValueError("attend: empty memory");
  auto scores = matvec(tanh(add_rowwise(*memory.projected, matvec(d.W_hc, h1))), d.w_c);
  auto alpha = softmax(scores);
  return {alpha, matvec_t(*memory.rows, alpha)};
}

template <class T>
struct DecoderState {
  Var<T> h1, c1;  // attention LSTM
  Var<T> h2, c2;  // language LSTM
  std::size_t t = 0;

  static DecoderState zeros(Tape<T>& tape, std::size_t hidden) {
    return {tape.zeros(hidden), tape.zeros(hidden), tape.zeros(hidden), tape.zeros(hidden), 0};
  }
};

template <class T>
struct StepResult {
  DecoderState<T> state;
  Var<T> logits;                // [V], pre-softmax
  std::optional<Var<T>> alpha;  // absent when the memory is empty
};

/// One decoder step:
///   h1 = LSTM([v-bar; E[w_prev]; h2_prev], h1_prev)
///   (alpha, c) = attend(h1, V^x)       c = v-bar when V^x is empty
///   h2 = LSTM([c; h1], h2_prev)
///   logits = W_y h2 + b_y
template <class T>
StepResult<T> decode_step(const DecoderVars<T>& d, const DecoderState<T>& s, const Var<T>& global, TokenId w_prev,
                          const Memory<T>& memory) {
  if (w_prev >= d.vocab())
    throw ValueError("decode_step: previous token " + std::to_string(w_prev) + " outside vocabulary");
  auto word = row(d.embed, w_prev);
  auto l1 = lstm_cell(concat<T>({global, word, s.h2}), s.h1, s.c1, d.att_lstm);
  StepResult<T> out;
  Var<T> context = global;
  if (memory.size() > 0) {
    auto att = attend(l1.h, memory, d);
    context = att.context;
    out.alpha = att.alpha;
  }
  auto l2 = lstm_cell(concat<T>({context, l1.h}), s.h2, s.c2, d.lang_lstm);
  out.state = {l1.h, l1.c, l2.h, l2.c, s.t + 1};
  out.logits = affine(l2.h, d.W_y, d.b_y);
  return out;
}

/// Everything a decoding routine needs for one video on one tape.
template <class T>
struct BoundVideo {
  DecoderVars<T> dec;
  Var<T> global;
  Memory<T> memory;

  Tape<T>& tape() const { return global.tape(); }
};

/// Mean teacher-forced cross entropy over every position after BOS.
template <class T>
Var<T> sequence_ce_loss(const BoundVideo<T>& b, const TokenSeq& caption) {
  if (caption.size() < 2) throw ValueError("sequence_ce_loss: caption needs BOS and at least one target");
  auto state = DecoderState<T>::zeros(b.tape(), b.dec.hidden());
  std::vector<Var<T>> losses;
  for (std::size_t t = 1; t < caption.size(); ++t) {
    auto step = decode_step(b.dec, state, b.global, caption[t - 1], b.memory);
    losses.push_back(cross_entropy(step.logits, caption[t]));
    state = step.state;
  }
  return mean_n(losses);
}

/// Per-step attention weights collected during decoding.
struct DecodeTrace {
  std::vector<std::vector<double>> alphas;
  std::vector<std::vector<double>> probs;
};

namespace detail {

template <class T>
TokenId argmax_lowest(std::span<const T> v) {
  TokenId best = 0;
  for (TokenId i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

template <class T>
void record_step(DecodeTrace* trace, const StepResult<T>& step) {
  if (!trace) return;
  std::vector<double> a;
  if (step.alpha)
    for (T x : step.alpha->value()) a.push_back(static_cast<double>(x));
  trace->alphas.push_back(std::move(a));
  auto p = softmax_values<T>(step.logits.value());
  trace->probs.emplace_back(p.begin(), p.end());
}

}  // namespace detail

/// Argmax decoding from BOS; ties go to the lowest id. Returns the emitted
/// words without BOS/EOS, at most max_len steps.
template <class T>
TokenSeq greedy_decode(const BoundVideo<T>& b, std::size_t max_len, DecodeTrace* trace = nullptr) {
  if (max_len == 0) throw ValueError("greedy_decode: max_len must be positive");
  auto state = DecoderState<T>::zeros(b.tape(), b.dec.hidden());
  TokenSeq out;
  TokenId prev = kBos;
  for (std::size_t t = 0; t < max_len; ++t) {
    auto step = decode_step(b.dec, state, b.global, prev, b.memory);
    detail::record_step(trace, step);
    // argmax over log-softmax rather than raw logits so beam search with
    // beam = 1 sees identical rounding.
    prev = detail::argmax_lowest<T>(std::span<const T>(log_softmax_values<T>(step.logits.value())));
    if (prev == kEos) break;
    out.push_back(prev);
    state = step.state;
  }
  return out;
}

template <class T>
struct SampleResult {
  TokenSeq tokens;   // words without BOS/EOS
  Var<T> log_prob;   // sum of log p over every sampled token, EOS included
  std::size_t steps = 0;
};

/// Ancestral sampling from softmax(logits). The log-probability stays on the
/// tape so policy-gradient losses can differentiate it.
template <class T>
SampleResult<T> sample_decode(const BoundVideo<T>& b, std::size_t max_len, std::mt19937_64& rng) {
  if (max_len == 0) throw ValueError("sample_decode: max_len must be positive");
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  auto state = DecoderState<T>::zeros(b.tape(), b.dec.hidden());
  SampleResult<T> out;
  std::vector<Var<T>> lps;
  TokenId prev = kBos;
  for (std::size_t t = 0; t < max_len; ++t) {
    auto step = decode_step(b.dec, state, b.global, prev, b.memory);
    auto p = softmax_values<T>(step.logits.value());
    const double u = unif(rng);
    double cum = 0.0;
    TokenId pick = static_cast<TokenId>(p.size() - 1);
    for (TokenId i = 0; i < p.size(); ++i) {
      cum += static_cast<double>(p[i]);
      if (u < cum) {
        pick = i;
        break;
      }
    }
    lps.push_back(log_prob(step.logits, pick));
    ++out.steps;
    prev = pick;
    if (pick == kEos) break;
    out.tokens.push_back(pick);
    state = step.state;
  }
  out.log_prob = add_n(lps);
  return out;
}

/// Beam search over summed log-probabilities. Each step keeps the `beam` best
/// expansions (ties to the lexicographically smaller sequence); expansions that
/// emit EOS, or reach max_len, are finished. The winner maximizes
/// logp / length^gamma, where length counts every generated step.
template <class T>
TokenSeq beam_decode(const BoundVideo<T>& b, std::size_t beam, std::size_t max_len, double gamma = 0.0) {
  if (beam == 0) throw ValueError("beam_decode: beam must be positive");
  if (max_len == 0) throw ValueError("beam_decode: max_len must be positive");
  struct Hyp {
    TokenSeq tokens;  // generated ids, EOS included if emitted
    double logp = 0.0;
    std::optional<DecoderState<T>> state;
  };
  auto better = [](const Hyp& x, const Hyp& y) {
    if (x.logp != y.logp) return x.logp > y.logp;
    return x.tokens < y.tokens;
  };
  std::vector<Hyp> live{Hyp{{}, 0.0, DecoderState<T>::zeros(b.tape(), b.dec.hidden())}};
  std::vector<Hyp> finished;
  for (std::size_t t = 0; t < max_len && !live.empty(); ++t) {
    std::vector<Hyp> cand;
    for (const auto& h : live) {
      const TokenId prev = h.tokens.empty() ? kBos : h.tokens.back();
      auto step = decode_step(b.dec, *h.state, b.global, prev, b.memory);
      auto lp = log_softmax_values<T>(step.logits.value());
      for (TokenId w = 0; w < lp.size(); ++w) {
        Hyp c{h.tokens, h.logp + static_cast<double>(lp[w]), step.state};
        c.tokens.push_back(w);
        cand.push_back(std::move(c));
      }
    }
    const std::size_t keep = std::min(beam, cand.size());
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(keep), cand.end(), better);
    cand.resize(keep);
    live.clear();
    for (auto& c : cand) {
      if (c.tokens.back() == kEos || t + 1 == max_len)
        finished.push_back(std::move(c));
      else
        live.push_back(std::move(c));
    }
  }
  auto norm = [gamma](const Hyp& h) {
    return gamma == 0.0 ? h.logp : h.logp / std::pow(static_cast<double>(h.tokens.size()), gamma);
  };
  const Hyp* best = nullptr;
  for (const auto& h : finished)
    if (!best || norm(h) > norm(*best) || (norm(h) == norm(*best) && h.tokens < best->tokens)) best = &h;
  TokenSeq out = best->tokens;
  if (!out.empty() && out.back() == kEos) out.pop_back();
  return out;
}

/// Summed log-probability of emitting `words` followed by EOS (or exactly
/// `words` when they fill max_len), starting from BOS.
template <class T>
double sequence_log_prob(const BoundVideo<T>& b, const TokenSeq& words, std::size_t max_len) {
  auto state = DecoderState<T>::zeros(b.tape(), b.dec.hidden());
  TokenSeq full = words;
  if (full.size() < max_len) full.push_back(kEos);
  double total = 0.0;
  TokenId prev = kBos;
  for (TokenId w : full) {
    auto step = decode_step(b.dec, state, b.global, prev, b.memory);
    total += static_cast<double>(log_softmax_values<T>(step.logits.value())[w]);
    state = step.state;
    prev = w;
  }
  return total;
}

}  // namespace vcap
