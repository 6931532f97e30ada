// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
// Usage: acceptance <path-to-vcap-cli> [criterion ...]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "oracle.hpp"
#include "test_util.hpp"
#include "vcap/vcap.hpp"

using namespace vcap;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, x);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

SynthConfig desk_synth(std::size_t videos) {
  SynthConfig sc;
  sc.num_videos = videos;
  sc.noise_scale = 0.05;
  return sc;
}

Dataset train_split(const SynthDataset& ds) { return make_dataset(ds.train.videos, ds.train.captions, ds.vocab); }
Dataset val_split(const SynthDataset& ds) { return make_dataset(ds.val.videos, ds.val.captions, ds.vocab); }

TrainConfig desk_cfg(Branch branch, std::size_t steps) {
  TrainConfig c;
  c.lr = 1e-3;
  c.max_steps = steps;
  c.branch = branch;
  c.seed = 7;
  return c;
}

constexpr Branch kBranches[] = {Branch::Temporal, Branch::Spatial};

// State shared between criteria 3, 4 and 6.
struct Shared {
  std::optional<SynthDataset> synth;
  std::optional<Dataset> train;
  std::map<Branch, Checkpoint> ce;
};

Shared& shared() {
  static Shared s;
  if (!s.synth) {
    s.synth = synth_generate(desk_synth(32), 7);
    s.train = train_split(*s.synth);
  }
  return s;
}

const Checkpoint& ce_checkpoint(Branch b) {
  auto& s = shared();
  auto it = s.ce.find(b);
  if (it == s.ce.end()) it = s.ce.emplace(b, train_ce(*s.train, desk_cfg(b, 2000))).first;
  return it->second;
}

// ---------------------------------------------------------------------------

Outcome gradient_suite() {
  double worst = 0.0;
  std::string where;
  auto note = [&](const std::string& what, const GradCheckReport& r) {
    if (r.max_rel_error >= worst) {
      worst = r.max_rel_error;
      where = what + ":" + r.worst.param + "[" + std::to_string(r.worst.index) + "]";
    }
  };
  std::mt19937_64 rng(2024);
  const GradCheckOptions opts{100, 1e-3};

  {
    ParameterStore<double> s;
    s.add("W", {64, 96});
    s.add("b", {64});
    s.add("x", {96});
    s.add("u", {64});
    testutil::randomize(s, rng, 0.5);
    note("affine", grad_check(
                       s,
                       [&](Tape<double>& t) {
                         auto y = affine(t.param(s.at("x")), t.param(s.at("W")), t.param(s.at("b")));
                         return dot(y, t.param(s.at("u")));
                       },
                       opts));
  }
  {
    ParameterStore<double> s;
    s.add("W", {256, 96});
    s.add("b", {256});
    s.add("x", {32});
    s.add("h", {64});
    s.add("c", {64});
    s.add("u", {64});
    s.add("v", {64});
    testutil::randomize(s, rng, 0.3);
    note("lstm_cell", grad_check(
                          s,
                          [&](Tape<double>& t) {
                            LstmWeights<double> w{t.param(s.at("W")), t.param(s.at("b"))};
                            auto o = lstm_cell(t.param(s.at("x")), t.param(s.at("h")), t.param(s.at("c")), w);
                            return add(dot(o.h, t.param(s.at("u"))), dot(o.c, t.param(s.at("v"))));
                          },
                          opts));
  }

  const auto& data = *shared().train;
  for (Branch b : kBranches) {
    Captioner<double> m(captioner_dims(data, desk_cfg(b, 0)), 31);
    const auto v = testutil::random_video(rng, data.dims, 4, 3);
    const TokenSeq cap{kBos, 4, 9, 5, 11, kEos};
    note(std::string("decode_step/") + branch_name(b),
         grad_check(
             m.params(), [&](Tape<double>& t) { return sequence_ce_loss(m.bind(t, v), cap); }, opts));
  }

  {
    auto cfg = desk_cfg(Branch::Temporal, 0);
    RewardModel reward(data, cfg.w_cider, cfg.w_bleu);
    const std::vector<std::size_t> batch{0, 5, 9};
    const std::vector<double> adv{0.8, -1.1, 0.35};
    std::vector<TokenSeq> targets;
    for (auto i : batch) targets.push_back(data.refs[i].captions.at(0));
    Captioner<double> m(captioner_dims(data, cfg), 32);
    note("scst", grad_check(
                     m.params(),
                     [&](Tape<double>& t) {
                       std::mt19937_64 sample_rng(33);
                       return scst_batch_loss(t, m, data, batch, targets, &reward, cfg, sample_rng, &adv).loss;
                     },
                     opts));
  }

  {
    const TrainConfig cfg;
    VseModel<double> m(vse_dims(data, cfg), cfg.margin, 34);
    testutil::randomize(m.params(), rng, 0.5);
    const auto refs = data.metric_refs();
    std::vector<std::vector<float>> globals;
    for (std::size_t i = 0; i < 6; ++i) globals.push_back(data.videos[i].pooled_global());
    note("vse_loss", grad_check(
                         m.params(),
                         [&](Tape<double>& t) {
                           std::vector<Var<double>> vs, ss;
                           for (std::size_t i = 0; i < globals.size(); ++i) {
                             vs.push_back(m.embed_video(t, globals[i]));
                             ss.push_back(m.embed_sentence(t, refs[i][0]));
                           }
                           return vse_loss(vs, ss, cfg.margin);
                         },
                         opts));
  }
  return {worst < 1e-4, "max rel err " + fmt("%.3g", worst) + " at " + where};
}

// ---------------------------------------------------------------------------

TokenSeq from_oracle(const oracle::Seq& s) { return {s.begin(), s.end()}; }

Outcome metric_oracles() {
  double worst = 0.0;
  std::string where;
  auto check = [&](const char* name, double got, double want) {
    const double e = std::abs(got - want);
    if (e >= worst) {
      worst = e;
      where = name;
    }
  };
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed + 1);
    const auto raw = oracle::random_corpus(rng, 20, 30, 3, 15);
    std::vector<TokenSeq> cands;
    std::vector<RefSet> refs;
    for (const auto& s : raw.cands) cands.push_back(from_oracle(s));
    for (const auto& r : raw.refs) {
      RefSet set;
      for (const auto& s : r) set.push_back(from_oracle(s));
      refs.push_back(set);
    }
    check("bleu4", bleu4(cands, refs), oracle::corpus_bleu(raw.cands, raw.refs));
    check("cider_d", cider_d(cands, refs, compute_doc_freq(refs)), oracle::cider_corpus(raw.cands, raw.refs));
    for (std::size_t i = 0; i < cands.size(); ++i) {
      check("sentence_bleu", sentence_bleu(cands[i], refs[i]), oracle::sentence_bleu(raw.cands[i], raw.refs[i], 1e-9));
      check("rouge_l", rouge_l(cands[i], refs[i]), oracle::rouge_l(raw.cands[i], raw.refs[i]));
      check("meteor_exact", meteor_exact(cands[i], refs[i]), oracle::meteor_exact(raw.cands[i], raw.refs[i]));
    }
  }
  return {worst < 1e-9, "20 corpora, max abs diff " + fmt("%.3g", worst) + " (" + where + ")"};
}

// ---------------------------------------------------------------------------

Outcome ce_convergence() {
  const auto& data = *shared().train;
  bool ok = true;
  std::string detail;
  for (Branch b : kBranches) {
    auto m = Captioner<float>::from_checkpoint(ce_checkpoint(b));
    const double acc = token_accuracy(m, data);
    const auto exact = exact_matches(m, data, TrainConfig{}.max_len);
    ok = ok && acc >= 0.99 && exact >= 30;
    detail += std::string(branch_name(b)) + " acc " + fmt("%.4f", acc) + " exact " + std::to_string(exact) + "/" +
              std::to_string(data.size()) + "; ";
  }
  return {ok, detail + "2000 steps"};
}

// ---------------------------------------------------------------------------

TrainConfig rl_cfg(Branch b) {
  auto c = desk_cfg(b, 500);
  c.rl_lambda = 0.7;
  c.w_cider = 0.8;
  c.w_bleu = 0.2;
  c.batch_size = 32;
  return c;
}

double cider_of(const Checkpoint& c, const Dataset& data) {
  auto m = Captioner<float>::from_checkpoint(c);
  return greedy_cider(m, data, TrainConfig{}.max_len);
}

Outcome scst_improvement() {
  const auto& data = *shared().train;
  bool ok = true;
  std::string detail;
  for (Branch b : kBranches) {
    const auto& init = ce_checkpoint(b);
    const double before = cider_of(init, data);
    const double after = cider_of(train_rl(data, rl_cfg(b), init), data);
    ok = ok && after >= before;
    detail += std::string(branch_name(b)) + " full-CE " + fmt("%.4f", before) + "->" + fmt("%.4f", after) + "; ";
  }
  for (Branch b : kBranches) {
    const auto init = train_ce(data, desk_cfg(b, 800));
    const double before = cider_of(init, data);
    const double after = cider_of(train_rl(data, rl_cfg(b), init), data);
    const double gain = before > 0 ? after / before - 1.0 : (after > 0 ? INFINITY : 0.0);
    ok = ok && gain >= 0.05;
    detail += std::string(branch_name(b)) + " 800-step CE " + fmt("%.4f", before) + "->" + fmt("%.4f", after) + " (" +
              fmt("%+.2f", 100.0 * gain) + "%); ";
  }
  return {ok, detail};
}

// ---------------------------------------------------------------------------

Outcome decoding_correctness() {
  const auto& data = *shared().train;
  std::mt19937_64 rng(55);
  std::size_t agree = 0;
  for (int trial = 0; trial < 100; ++trial) {
    Captioner<float> m(captioner_dims(data, desk_cfg(trial % 2 ? Branch::Spatial : Branch::Temporal, 0)),
                       1000 + trial);
    const auto v = testutil::random_video(rng, data.dims, 1 + trial % 4, trial % 3);
    agree += m.beam(v, 1, 16) == m.greedy(v, 16);
  }
  const std::size_t V = 4, L = 4;
  std::size_t exact = 0;
  const std::size_t toys = 25;
  for (std::size_t trial = 0; trial < toys; ++trial) {
    Captioner<double> m({{3, 1, 2}, {V, 6, 3, 3}, trial % 2 ? Branch::Spatial : Branch::Temporal}, 2000 + trial);
    for (auto* name : {"dec.out.W", "dec.out.b"})
      for (auto& x : m.params().at(name).value.data) x *= 4.0;
    const auto v = testutil::random_video(rng, m.dims().feat, 2, 2);
    Tape<double> t(false);
    auto b = m.bind(t, v);
    TokenSeq best;
    double best_lp = -INFINITY;
    std::vector<TokenSeq> frontier{{}};
    for (std::size_t len = 0; len <= L; ++len) {
      std::vector<TokenSeq> next;
      for (const auto& w : frontier) {
        const double lp = sequence_log_prob(b, w, L);
        if (lp > best_lp || (lp == best_lp && w < best)) best_lp = lp, best = w;
        for (TokenId k = 0; k < V; ++k)
          if (k != kEos) {
            auto e = w;
            e.push_back(k);
            next.push_back(e);
          }
      }
      frontier = std::move(next);
    }
    exact += beam_decode(b, 64, L) == best;
  }
  return {agree == 100 && exact == toys, "beam=1 vs greedy " + std::to_string(agree) + "/100; beam=64 vs enumeration " +
                                            std::to_string(exact) + "/" + std::to_string(toys)};
}

// ---------------------------------------------------------------------------

Outcome attention_invariants() {
  const auto& data = *shared().train;
  std::size_t vectors = 0;
  double worst_sum = 0.0, most_negative = 0.0;
  std::size_t k1_checks = 0, k1_mismatch = 0;
  for (Branch b : kBranches) {
    auto m = Captioner<float>::from_checkpoint(ce_checkpoint(b));
    for (const auto& v : data.videos) {
      DecodeTrace trace;
      m.greedy(v, TrainConfig{}.max_len, &trace);
      for (const auto& a : trace.alphas) {
        double s = 0.0;
        for (double x : a) {
          s += x;
          most_negative = std::min(most_negative, x);
        }
        worst_sum = std::max(worst_sum, std::abs(s - 1.0));
        ++vectors;
      }
      // Same video cut down to one memory row.
      auto one = v;
      one.temporal = FeatureMatrix(1, v.temporal.cols);
      std::copy_n(v.temporal.data.begin(), v.temporal.cols, one.temporal.data.begin());
      one.objects = FeatureMatrix(1, v.objects.cols);
      std::copy_n(v.objects.data.begin(), v.objects.cols, one.objects.data.begin());
      Tape<float> tape(false);
      auto bound = m.bind(tape, one);
      auto state = DecoderState<float>::zeros(tape, bound.dec.hidden());
      TokenId w = kBos;
      for (std::size_t t = 0; t < TrainConfig{}.max_len; ++t) {
        auto step = decode_step(bound.dec, state, bound.global, w, bound.memory);
        auto att = attend(step.state.h1, bound.memory, bound.dec);
        const auto row = bound.memory.rows->value();
        const auto ctx = att.context.value();
        ++k1_checks;
        k1_mismatch += !std::equal(row.begin(), row.end(), ctx.begin(), ctx.end());
        w = detail::argmax_lowest<float>(step.logits.value());
        if (w == kEos) break;
        state = step.state;
      }
    }
  }
  const bool ok = vectors > 0 && most_negative >= 0.0 && worst_sum <= 1e-6 && k1_mismatch == 0;
  return {ok, std::to_string(vectors) + " alpha vectors, min " + fmt("%.3g", most_negative) + ", max |sum-1| " +
                  fmt("%.3g", worst_sum) + "; k=1 context exact " + std::to_string(k1_checks - k1_mismatch) + "/" +
                  std::to_string(k1_checks)};
}

// ---------------------------------------------------------------------------

Outcome fusion_pipeline() {
  const auto ds = synth_generate(desk_synth(100), 7);
  const auto train = train_split(ds), val = val_split(ds);

  TrainConfig vcfg;
  vcfg.lr = 1e-3;
  vcfg.max_steps = 3000;
  vcfg.batch_size = 16;
  auto vse = VseModel<float>::from_checkpoint(train_vse(train, vcfg));
  const double recall = caption_recall_at_1(vse, train);

  // A/B: a validation video's reference against another video's reference,
  // in both orders.
  const auto val_refs = val.metric_refs();
  std::size_t wins = 0, cases = 0;
  for (std::size_t i = 0; i < val.size(); ++i)
    for (std::size_t j = 0; j < val.size(); ++j) {
      if (i == j || val_refs[i][0] == val_refs[j][0]) continue;
      wins += rerank(vse, val.videos[i], {val_refs[i][0], val_refs[j][0]}).chosen == 0;
      wins += rerank(vse, val.videos[i], {val_refs[j][0], val_refs[i][0]}).chosen == 1;
      cases += 2;
    }
  const double ab = static_cast<double>(wins) / static_cast<double>(cases);

  std::map<Branch, std::vector<TokenSeq>> outs;
  for (Branch b : kBranches) {
    auto m = Captioner<float>::from_checkpoint(train_ce(train, desk_cfg(b, 2000)));
    outs[b] = greedy_corpus(m, val.videos, TrainConfig{}.max_len);
  }
  std::vector<TokenSeq> fused;
  for (std::size_t i = 0; i < val.size(); ++i) {
    const std::vector<TokenSeq> cands{outs[Branch::Temporal][i], outs[Branch::Spatial][i]};
    fused.push_back(cands[rerank(vse, val.videos[i], cands).chosen]);
  }
  const auto df = compute_doc_freq(val_refs);
  const double ct = cider_d(outs[Branch::Temporal], val_refs, df), cs = cider_d(outs[Branch::Spatial], val_refs, df);
  const double cf = cider_d(fused, val_refs, df);
  const bool ok = recall >= 0.9 && ab >= 0.8 && cf >= std::max(ct, cs) - 0.02;
  return {ok, "recall@1 " + fmt("%.3f", recall) + " over " + std::to_string(train.size()) + "; A/B " +
                  std::to_string(wins) + "/" + std::to_string(cases) + "; val CIDEr-D temporal " + fmt("%.4f", ct) +
                  " spatial " + fmt("%.4f", cs) + " fused " + fmt("%.4f", cf)};
}

// ---------------------------------------------------------------------------

std::map<std::string, std::string> tree(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files[fs::relative(e.path(), dir).string()] = testutil::slurp(e.path());
  return files;
}

std::string quote(const std::string& s) { return "'" + s + "'"; }

Outcome determinism(const std::string& cli) {
  if (cli.empty() || !fs::exists(cli)) return {false, "CLI binary not found: '" + cli + "'"};
  testutil::TempDir root("acceptance");
  const auto cfg = (root / "run.cfg").string();
  testutil::spit(cfg, "seed = 7\nbatch_size = 16\nlog_every = 50\n");
  std::string failed;
  auto pipeline = [&](const std::string& tag) {
    const auto dir = root / tag;
    auto o = [&](const std::string& n) { return quote((dir / n).string()); };
    const std::string data = o("data"), common = " --data " + data + " --config " + quote(cfg);
    const std::vector<std::string> steps{
        "synth --seed 7 --videos 32 --out " + data,
        "vocab --data " + data + " --out " + o("vocab.txt"),
        "train-ce" + common + " --steps 300 --branch temporal --out " + o("t.ckp"),
        "train-ce" + common + " --steps 300 --branch spatial --out " + o("s.ckp"),
        "train-rl" + common + " --steps 20 --branch temporal --init " + o("t.ckp") + " --out " + o("t_rl.ckp"),
        "train-rl" + common + " --steps 20 --branch spatial --init " + o("s.ckp") + " --out " + o("s_rl.ckp"),
        "decode" + common + " --split val --init " + o("t_rl.ckp") + " --out " + o("t.txt"),
        "decode" + common + " --split val --init " + o("s_rl.ckp") + " --beam 3 --out " + o("s.txt"),
        "train-vse" + common + " --steps 200 --out " + o("vse.ckp"),
        "fuse" + common + " --split val --init " + o("vse.ckp") + " --candidates " + o("t.txt") + " " + o("s.txt") +
            " --out " + o("fused.txt"),
        "eval --data " + data + " --split val --candidates " + o("fused.txt") + " --out " + o("fused.eval")};
    for (const auto& s : steps) {
      const int rc = std::system((quote(cli) + " " + s + " --quiet > /dev/null").c_str());
      if (rc != 0 && failed.empty()) failed = s.substr(0, s.find(' ')) + " exited " + std::to_string(rc);
    }
    return tree(dir);
  };
  const auto a = pipeline("a"), b = pipeline("b");
  if (!failed.empty()) return {false, failed};
  std::size_t same = 0;
  std::string diff;
  for (const auto& [name, bytes] : a) {
    auto it = b.find(name);
    if (it != b.end() && it->second == bytes)
      ++same;
    else if (diff.empty())
      diff = name;
  }
  const bool ok = a.size() == b.size() && same == a.size() && !a.empty();
  return {ok, std::to_string(same) + "/" + std::to_string(a.size()) + " artifacts byte-identical" +
                  (diff.empty() ? "" : ", first difference " + diff)};
}

}  // namespace

int main(int argc, char** argv) {
  const std::string cli = argc > 1 ? argv[1] : "";
  std::set<int> only;
  for (int i = 2; i < argc; ++i) only.insert(std::atoi(argv[i]));

  struct Criterion {
    int id;
    const char* name;
    double budget;  // seconds, 0 = none
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> all{
      {1, "gradient suite", 120, gradient_suite},
      {2, "metric oracle equivalence", 10, metric_oracles},
      {3, "CE convergence", 300, ce_convergence},
      {4, "SCST improvement", 300, scst_improvement},
      {5, "decoding correctness", 0, decoding_correctness},
      {6, "attention invariants", 0, attention_invariants},
      {7, "fusion pipeline", 300, fusion_pipeline},
      {8, "determinism", 0, [&] { return determinism(cli); }},
  };

  int failures = 0;
  for (const auto& c : all) {
    if (!only.empty() && !only.count(c.id)) continue;
    if (c.id == 4 || c.id == 6) {
      // Checkpoint training belongs to criterion 3's budget.
      for (Branch b : kBranches) ce_checkpoint(b);
    }
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = seconds_since(t0);
    const bool in_time = c.budget == 0 || secs < c.budget;
    const bool pass = o.pass && in_time;
    failures += !pass;
    std::cout << "criterion " << c.id << " " << (pass ? "PASS" : "FAIL") << "  " << c.name << ": " << o.detail
              << " [" << fmt("%.1f", secs) << " s" << (c.budget > 0 ? ", budget " + fmt("%.0f", c.budget) + " s" : "")
              << (in_time ? "" : ", over budget") << "]" << std::endl;
  }
  return failures ? 1 : 0;
}
