#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <compare>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <tuple>
#include <unordered_map>
#include <vector>

#include "vcap/errors.hpp"
#include "vcap/featio.hpp"

namespace vcap {

using RefSet = std::vector<TokenSeq>;

inline constexpr std::size_t kMaxOrder = 4;

struct NGram {
  std::array<TokenId, kMaxOrder> ids{};
  std::uint8_t n = 0;

  auto operator<=>(const NGram&) const = default;
};

/// Ordered map so every sum over n-grams runs in a fixed order.
using NGramCounts = std::map<NGram, std::size_t>;

/// Counts of all n-grams of exactly order n.
inline NGramCounts ngram_counts(const TokenSeq& s, std::size_t n) {
  NGramCounts out;
  if (n == 0 || n > kMaxOrder) throw ValueError("n-gram order must be in [1, 4]");
  for (std::size_t i = 0; i + n <= s.size(); ++i) {
    NGram g;
    g.n = static_cast<std::uint8_t>(n);
    for (std::size_t k = 0; k < n; ++k) g.ids[k] = s[i + k];
    ++out[g];
  }
  return out;
}

namespace detail {

inline void require_refs(const RefSet& refs, const char* who) {
  if (refs.empty()) throw ValueError(std::string(who) + ": empty reference set");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// BLEU

struct BleuStats {
  std::array<std::size_t, kMaxOrder> matched{};
  std::array<std::size_t, kMaxOrder> total{};
  std::size_t cand_len = 0;
  std::size_t ref_len = 0;

  BleuStats& operator+=(const BleuStats& o) {
    for (std::size_t n = 0; n < kMaxOrder; ++n) {
      matched[n] += o.matched[n];
      total[n] += o.total[n];
    }
    cand_len += o.cand_len;
    ref_len += o.ref_len;
    return *this;
  }
};

/// Reference length closest to the candidate's; ties go to the shorter.
inline std::size_t closest_ref_length(std::size_t cand_len, const RefSet& refs) {
  std::size_t best = refs.front().size();
  for (const auto& r : refs) {
    const auto d = [&](std::size_t x) { return x > cand_len ? x - cand_len : cand_len - x; };
    if (d(r.size()) < d(best) || (d(r.size()) == d(best) && r.size() < best)) best = r.size();
  }
  return best;
}

/// Clipped n-gram matches and lengths for one candidate.
inline BleuStats bleu_stats(const TokenSeq& cand, const RefSet& refs) {
  detail::require_refs(refs, "bleu");
  BleuStats s;
  s.cand_len = cand.size();
  s.ref_len = closest_ref_length(cand.size(), refs);
  for (std::size_t n = 1; n <= kMaxOrder; ++n) {
    const auto cc = ngram_counts(cand, n);
    std::map<NGram, std::size_t> max_ref;
    for (const auto& r : refs)
      for (const auto& [g, c] : ngram_counts(r, n)) max_ref[g] = std::max(max_ref[g], c);
    for (const auto& [g, c] : cc) {
      s.total[n - 1] += c;
      auto it = max_ref.find(g);
      if (it != max_ref.end()) s.matched[n - 1] += std::min(c, it->second);
    }
  }
  return s;
}

/// 1 if c > r, else exp(1 - r/c); 0 for an empty candidate.
inline double brevity_penalty(double cand_len, double ref_len) {
  if (cand_len <= 0.0) return 0.0;
  return cand_len > ref_len ? 1.0 : std::exp(1.0 - ref_len / cand_len);
}

/// Score from accumulated stats. With eps = 0 any zero precision gives 0;
/// otherwise a zero match count is replaced by eps.
inline double bleu_from_stats(const BleuStats& s, double eps) {
  double log_sum = 0.0;
  for (std::size_t n = 0; n < kMaxOrder; ++n) {
    double m = static_cast<double>(s.matched[n]);
    if (m == 0.0) {
      if (eps == 0.0) return 0.0;
      m = eps;
    }
    log_sum += std::log(m / static_cast<double>(std::max<std::size_t>(s.total[n], 1)));
  }
  return brevity_penalty(static_cast<double>(s.cand_len), static_cast<double>(s.ref_len)) *
         std::exp(log_sum / static_cast<double>(kMaxOrder));
}

/// Corpus BLEU@4: uniform weights, clipped counts, closest-reference brevity penalty.
inline double bleu4(const std::vector<TokenSeq>& cands, const std::vector<RefSet>& refs) {
  if (cands.empty()) throw ValueError("bleu4: empty candidate list");
  if (cands.size() != refs.size()) throw ValueError("bleu4: candidate and reference counts differ");
  BleuStats total;
  for (std::size_t i = 0; i < cands.size(); ++i) total += bleu_stats(cands[i], refs[i]);
  return bleu_from_stats(total, 0.0);
}

inline constexpr double kSentenceBleuEps = 1e-9;

/// Single-sentence BLEU@4 with add-eps smoothing on zero match counts.
inline double sentence_bleu(const TokenSeq& cand, const RefSet& refs, double eps = kSentenceBleuEps) {
  return bleu_from_stats(bleu_stats(cand, refs), eps);
}

// ---------------------------------------------------------------------------
// ROUGE-L

inline std::size_t lcs_length(const TokenSeq& a, const TokenSeq& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

/// LCS F-measure (1 + b^2) P R / (R + b^2 P), maximized over references.
inline double rouge_l(const TokenSeq& cand, const RefSet& refs, double beta = 1.2) {
  detail::require_refs(refs, "rouge_l");
  double best = 0.0;
  for (const auto& r : refs) {
    const double lcs = static_cast<double>(lcs_length(cand, r));
    if (lcs == 0.0) continue;
    const double p = lcs / static_cast<double>(cand.size());
    const double rec = lcs / static_cast<double>(r.size());
    const double b2 = beta * beta;
    best = std::max(best, (1.0 + b2) * p * rec / (rec + b2 * p));
  }
  return best;
}

// ---------------------------------------------------------------------------
// CIDEr-D

struct CorpusDocFreq {
  std::map<NGram, std::size_t> df;
  std::size_t num_docs = 0;

  std::size_t at(const NGram& g) const {
    auto it = df.find(g);
    return it == df.end() ? 0 : it->second;
  }
};

/// df(g) = number of videos whose reference set contains g at least once.
inline CorpusDocFreq compute_doc_freq(const std::vector<RefSet>& refs) {
  if (refs.empty()) throw ValueError("compute_doc_freq: empty corpus");
  CorpusDocFreq out;
  out.num_docs = refs.size();
  for (const auto& set : refs) {
    std::map<NGram, bool> seen;
    for (const auto& r : set)
      for (std::size_t n = 1; n <= kMaxOrder; ++n)
        for (const auto& [g, c] : ngram_counts(r, n)) seen[g] = true;
    for (const auto& [g, _] : seen) ++out.df[g];
  }
  return out;
}

/// CIDEr-D scorer with cached reference vectors: TF-IDF n-gram vectors
/// (tf = raw count, idf = log N - log max(1, df)), clipped dot product
/// min(c, r) * r over norms, Gaussian length penalty exp(-d^2 / 2 sigma^2),
/// mean over n = 1..4 and over references, times 10.
class CiderD {
 public:
  struct Vec {
    std::array<std::map<NGram, double>, kMaxOrder> w;
    std::array<double, kMaxOrder> norm{};
    std::size_t length = 0;
  };

  explicit CiderD(CorpusDocFreq df, double sigma = 6.0) : df_(std::move(df)), sigma_(sigma) {
    if (df_.num_docs == 0) throw ValueError("cider_d: document frequencies missing");
    log_n_ = std::log(static_cast<double>(df_.num_docs));
  }

  const CorpusDocFreq& doc_freq() const { return df_; }

  Vec vectorize(const TokenSeq& s) const {
    Vec v;
    v.length = s.size();
    for (std::size_t n = 1; n <= kMaxOrder; ++n) {
      double ss = 0.0;
      for (const auto& [g, c] : ngram_counts(s, n)) {
        const double idf = log_n_ - std::log(std::max(1.0, static_cast<double>(df_.at(g))));
        const double x = static_cast<double>(c) * idf;
        v.w[n - 1][g] = x;
        ss += x * x;
      }
      v.norm[n - 1] = std::sqrt(ss);
    }
    return v;
  }

  double similarity(const Vec& cand, const Vec& ref) const {
    const double delta = static_cast<double>(cand.length) - static_cast<double>(ref.length);
    const double penalty = std::exp(-(delta * delta) / (2.0 * sigma_ * sigma_));
    double total = 0.0;
    for (std::size_t n = 0; n < kMaxOrder; ++n) {
      double val = 0.0;
      for (const auto& [g, x] : cand.w[n]) {
        auto it = ref.w[n].find(g);
        if (it != ref.w[n].end()) val += std::min(x, it->second) * it->second;
      }
      if (cand.norm[n] != 0.0 && ref.norm[n] != 0.0) val /= cand.norm[n] * ref.norm[n];
      total += val * penalty;
    }
    return total / static_cast<double>(kMaxOrder);
  }

  double sentence(const Vec& cand, const std::vector<Vec>& refs) const {
    if (refs.empty()) throw ValueError("cider_d: empty reference set");
    double s = 0.0;
    for (const auto& r : refs) s += similarity(cand, r);
    return 10.0 * s / static_cast<double>(refs.size());
  }

  double sentence(const TokenSeq& cand, const RefSet& refs) const {
    detail::require_refs(refs, "cider_d");
    std::vector<Vec> rv;
    for (const auto& r : refs) rv.push_back(vectorize(r));
    return sentence(vectorize(cand), rv);
  }

 private:
  CorpusDocFreq df_;
  double sigma_;
  double log_n_ = 0.0;
};

/// Corpus CIDEr-D: mean of sentence scores, each in [0, 10].
inline double cider_d(const std::vector<TokenSeq>& cands, const std::vector<RefSet>& refs, const CorpusDocFreq& df) {
  if (cands.empty() || cands.size() != refs.size()) throw ValueError("cider_d: misaligned or empty corpus");
  CiderD scorer(df);
  double s = 0.0;
  for (std::size_t i = 0; i < cands.size(); ++i) s += scorer.sentence(cands[i], refs[i]);
  return s / static_cast<double>(cands.size());
}

// ---------------------------------------------------------------------------
// METEOR, exact-match variant

struct MeteorParams {
  double alpha = 0.9;
  double beta = 3.0;
  double gamma = 0.5;
};

namespace detail {

/// Fewest chunks over all maximum-cardinality one-to-one exact alignments.
/// Memoized search over (candidate position, used reference positions,
/// reference position matched by the previous candidate token).
class ChunkSearch {
 public:
  ChunkSearch(const TokenSeq& cand, const TokenSeq& ref) : cand_(cand), ref_(ref) {
    std::map<TokenId, std::size_t> cc, rc;
    for (auto t : cand) ++cc[t];
    for (auto t : ref) ++rc[t];
    for (auto& [t, c] : cc) need_[t] = std::min(c, rc[t]);
    remaining_.assign(cand.size() + 1, {});
    for (std::size_t i = cand.size(); i-- > 0;) {
      remaining_[i] = remaining_[i + 1];
      ++remaining_[i][cand[i]];
    }
  }

  std::size_t matches() const {
    std::size_t m = 0;
    for (auto& [t, n] : need_) m += n;
    return m;
  }

  std::size_t min_chunks() { return solve(0, 0, kNone); }

 private:
  static constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
  static constexpr std::size_t kInf = std::numeric_limits<std::size_t>::max() / 2;

  std::size_t used_of(std::uint64_t mask, TokenId t) const {
    std::size_t n = 0;
    for (std::size_t j = 0; j < ref_.size(); ++j)
      if ((mask >> j & 1U) && ref_[j] == t) ++n;
    return n;
  }

  std::size_t solve(std::size_t i, std::uint64_t mask, std::size_t last) {
    if (i == cand_.size()) return 0;
    const auto key = std::make_tuple(i, mask, last);
    if (auto it = memo_.find(key); it != memo_.end()) return it->second;
    const TokenId w = cand_[i];
    const std::size_t need = need_.count(w) ? need_.at(w) : 0;
    const std::size_t used = need ? used_of(mask, w) : 0;
    std::size_t best = kInf;
    // Leave token i unmatched only if later copies can still fill the quota.
    const std::size_t later = remaining_[i + 1].count(w) ? remaining_[i + 1].at(w) : 0;
    if (later >= need - used) best = solve(i + 1, mask, kNone);
    if (used < need) {
      for (std::size_t j = 0; j < ref_.size(); ++j) {
        if (ref_[j] != w || (mask >> j & 1U)) continue;
        const std::size_t opens = (last != kNone && j == last + 1) ? 0 : 1;
        const std::size_t sub = solve(i + 1, mask | (std::uint64_t{1} << j), j);
        if (sub < kInf) best = std::min(best, sub + opens);
      }
    }
    memo_[key] = best;
    return best;
  }

  const TokenSeq& cand_;
  const TokenSeq& ref_;
  std::map<TokenId, std::size_t> need_;
  std::vector<std::map<TokenId, std::size_t>> remaining_;
  std::map<std::tuple<std::size_t, std::uint64_t, std::size_t>, std::size_t> memo_;
};

/// Left-to-right first-free matching, for references too long for the
/// exact search. Same match count, possibly more chunks.
inline std::size_t greedy_chunks(const TokenSeq& cand, const TokenSeq& ref) {
  std::vector<bool> used(ref.size(), false);
  constexpr std::size_t none = std::numeric_limits<std::size_t>::max();
  std::size_t chunks = 0, last = none;
  for (auto t : cand) {
    std::size_t pick = ref.size();
    if (last != none && last + 1 < ref.size() && !used[last + 1] && ref[last + 1] == t) pick = last + 1;
    for (std::size_t j = 0; pick == ref.size() && j < ref.size(); ++j)
      if (!used[j] && ref[j] == t) pick = j;
    if (pick == ref.size()) {
      last = none;
      continue;
    }
    if (!(last != none && pick == last + 1)) ++chunks;
    used[pick] = true;
    last = pick;
  }
  return chunks;
}

}  // namespace detail

/// Exact-match METEOR: unigram matches m, P = m/|c|, R = m/|r|,
/// F = P R / (alpha P + (1 - alpha) R), penalty = gamma (chunks / m)^beta,
/// score = F (1 - penalty), maximized over references. Not comparable to full
/// METEOR, which also matches stems, synonyms and paraphrases.
inline double meteor_exact(const TokenSeq& cand, const RefSet& refs, const MeteorParams& mp = {}) {
  detail::require_refs(refs, "meteor_exact");
  double best = 0.0;
  for (const auto& r : refs) {
    if (cand.empty() || r.empty()) continue;
    detail::ChunkSearch search(cand, r);
    const std::size_t m = search.matches();
    if (m == 0) continue;
    const std::size_t chunks =
        r.size() <= 64 && cand.size() <= 64 ? search.min_chunks() : detail::greedy_chunks(cand, r);
    const double p = static_cast<double>(m) / static_cast<double>(cand.size());
    const double rec = static_cast<double>(m) / static_cast<double>(r.size());
    const double f = p * rec / (mp.alpha * p + (1.0 - mp.alpha) * rec);
    const double pen = mp.gamma * std::pow(static_cast<double>(chunks) / static_cast<double>(m), mp.beta);
    best = std::max(best, f * (1.0 - pen));
  }
  return best;
}

// ---------------------------------------------------------------------------
// Corpus report

struct SentenceScores {
  double bleu = 0.0;  // smoothed sentence BLEU@4
  double rouge_l = 0.0;
  double cider_d = 0.0;
  double meteor_exact = 0.0;
};

struct EvalReport {
  double bleu4 = 0.0;
  double rouge_l = 0.0;
  double cider_d = 0.0;
  double meteor_exact = 0.0;
  std::vector<SentenceScores> per_video;
};

/// All four metrics; corpus ROUGE-L, CIDEr-D and METEOR are means of sentence
/// scores, summed sequentially by video index.
inline EvalReport evaluate_corpus(const std::vector<TokenSeq>& cands, const std::vector<RefSet>& refs,
                                  const CorpusDocFreq& df) {
  if (cands.empty() || cands.size() != refs.size()) throw ValueError("evaluate_corpus: misaligned or empty corpus");
  EvalReport rep;
  rep.bleu4 = bleu4(cands, refs);
  CiderD cider(df);
  for (std::size_t i = 0; i < cands.size(); ++i) {
    SentenceScores s;
    s.bleu = sentence_bleu(cands[i], refs[i]);
    s.rouge_l = rouge_l(cands[i], refs[i]);
    s.cider_d = cider.sentence(cands[i], refs[i]);
    s.meteor_exact = meteor_exact(cands[i], refs[i]);
    rep.rouge_l += s.rouge_l;
    rep.cider_d += s.cider_d;
    rep.meteor_exact += s.meteor_exact;
    rep.per_video.push_back(s);
  }
  const double n = static_cast<double>(cands.size());
  rep.rouge_l /= n;
  rep.cider_d /= n;
  rep.meteor_exact /= n;
  return rep;
}

/// Maps word strings to dense ids so text corpora can be scored without a
/// model vocabulary (out-of-vocabulary words stay distinct).
class TokenInterner {
 public:
  TokenSeq encode(const std::vector<std::string>& words) {
    TokenSeq out;
    for (const auto& w : words) {
      auto [it, inserted] = ids_.try_emplace(w, static_cast<TokenId>(ids_.size()));
      out.push_back(it->second);
    }
    return out;
  }
  TokenSeq encode_text(const std::string& text) { return encode(tokenize(text)); }

 private:
  std::unordered_map<std::string, TokenId> ids_;
};

}  // namespace vcap
