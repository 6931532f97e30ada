#pragma once

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "vcap/captioner.hpp"
#include "vcap/checkpoint.hpp"
#include "vcap/config.hpp"
#include "vcap/dataset.hpp"
#include "vcap/errors.hpp"
#include "vcap/featio.hpp"
#include "vcap/fusion.hpp"
#include "vcap/metrics.hpp"
#include "vcap/synth.hpp"
#include "vcap/train.hpp"

namespace vcap {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitData = 2, kExitNumerical = 3 };

/// Everything a subcommand needs after flags and config file are merged.
struct RunConfig {
  std::string subcommand;
  fs::path data;
  std::string split = "train";
  fs::path vocab;  // empty: <data>/vocab.txt
  fs::path init;
  fs::path out;
  fs::path config;
  std::vector<fs::path> candidates;
  TrainConfig train;
  std::size_t beam = 1;
  double length_penalty = 0.0;
  std::size_t workers = 1;
  bool quiet = false;

  // synth / vocab
  SynthConfig synth;
  std::size_t min_count = 1;
  fs::path captions;

  fs::path vocab_path() const { return vocab.empty() ? data / "vocab.txt" : vocab; }
};

namespace detail {

inline void require_file(const fs::path& p, const char* what) {
  if (p.empty()) throw UsageError(std::string("missing ") + what);
  if (!fs::is_regular_file(p)) throw IoError(std::string(what) + " not found: " + p.string());
}

inline void require_dir(const fs::path& p, const char* what) {
  if (p.empty()) throw UsageError(std::string("missing ") + what);
  if (!fs::is_directory(p)) throw IoError(std::string(what) + " is not a directory: " + p.string());
}

inline void ensure_parent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

/// Resolved settings written next to an output. Paths are left out so runs
/// that differ only in where they write produce identical snapshots.
inline void write_snapshot(const RunConfig& rc, const fs::path& out) {
  KeyValues kv = rc.train.to_kv();
  kv["run.subcommand"] = rc.subcommand;
  kv["run.split"] = rc.split;
  kv["run.beam"] = std::to_string(rc.beam);
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", rc.length_penalty);
  kv["run.length_penalty"] = buf;
  ensure_parent(out);
  write_kv_file(kv, fs::path(out.string() + ".config"));
}

inline std::string fmt_num(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6f", x);
  return buf;
}

class Logger {
 public:
  Logger(std::ostream& err, bool quiet) : err_(err), quiet_(quiet) {}
  void info(const std::string& msg) const {
    if (!quiet_) err_ << msg << "\n";
  }

 private:
  std::ostream& err_;
  bool quiet_;
};

/// Training-log sink: "step TAB loss TAB reward" to `<out>.log`, echoed to stderr.
class TrainLogFile {
 public:
  TrainLogFile(const fs::path& out, const Logger& log, std::string tag)
      : path_(out.string() + ".log"), log_(log), tag_(std::move(tag)) {}

  LogSink sink() {
    return [this](const TrainLog& l) {
      char buf[128];
      std::snprintf(buf, sizeof buf, "%zu\t%.6f\t%.6f\n", l.step, l.loss, l.reward);
      text_ += buf;
      log_.info(tag_ + " step " + std::to_string(l.step) + " loss " + fmt_num(l.loss) + " reward " +
                fmt_num(l.reward));
    };
  }
  void flush() const { write_file_bytes(path_, text_); }

 private:
  fs::path path_;
  const Logger& log_;
  std::string tag_;
  std::string text_;
};

/// One caption per video id; the first caption of each line is used.
inline std::map<std::string, std::string> read_candidates(const fs::path& path) {
  std::map<std::string, std::string> out;
  for (const auto& line : read_caption_file(path)) {
    if (!out.emplace(line.video_id, line.captions.front()).second)
      throw FormatError(path.string() + ": duplicate video id " + line.video_id);
  }
  return out;
}

inline TokenSeq words_of(const std::string& text, const Vocabulary& vocab) {
  auto ids = encode_caption(text, vocab);
  return TokenSeq(ids.begin() + 1, ids.end() - 1);
}

/// Per-video work over `n` items with results stored by index, so output
/// order never depends on scheduling.
template <class Result, class MakeWorker>
std::vector<Result> parallel_map(std::size_t n, std::size_t workers, MakeWorker make_worker) {
  std::vector<Result> out(n);
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    auto f = make_worker();
    for (std::size_t i = 0; i < n; ++i) out[i] = f(i);
    return out;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        auto f = make_worker();
        for (std::size_t i = w; i < n; i += workers) out[i] = f(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

// ---------------------------------------------------------------------------
// Subcommands

inline void cmd_synth(const RunConfig& rc, const Logger& log) {
  if (rc.out.empty()) throw UsageError("synth needs --out DIR");
  auto ds = synth_generate(rc.synth, rc.train.seed);
  write_synthetic(ds, rc.out);
  log.info("synth: wrote " + std::to_string(ds.train.videos.size()) + " train and " +
           std::to_string(ds.val.videos.size()) + " val videos to " + rc.out.string());
}

inline void cmd_vocab(const RunConfig& rc, const Logger& log) {
  if (rc.out.empty()) throw UsageError("vocab needs --out PATH");
  fs::path src = rc.captions;
  if (src.empty()) {
    require_dir(rc.data, "--data directory");
    src = rc.data / (rc.split + ".captions");
  }
  require_file(src, "caption file");
  std::vector<std::string> texts;
  for (const auto& line : read_caption_file(src))
    for (const auto& c : line.captions) texts.push_back(c);
  auto vocab = build_vocabulary(texts, rc.min_count);
  ensure_parent(rc.out);
  write_vocabulary(vocab, rc.out);
  log.info("vocab: " + std::to_string(vocab.size()) + " tokens -> " + rc.out.string());
}

inline Dataset load_for(const RunConfig& rc) {
  require_dir(rc.data, "--data directory");
  require_file(rc.vocab_path(), "vocabulary");
  require_file(rc.data / (rc.split + ".manifest"), "manifest");
  require_file(rc.data / (rc.split + ".captions"), "caption file");
  return load_dataset(rc.data, rc.split, read_vocabulary(rc.vocab_path()));
}

inline void cmd_train_ce(const RunConfig& rc, const Logger& log) {
  if (rc.out.empty()) throw UsageError("train-ce needs --out PATH");
  auto data = load_for(rc);
  ensure_parent(rc.out);
  TrainLogFile tl(rc.out, log, "train-ce");
  auto ckpt = train_ce(data, rc.train, tl.sink());
  save_checkpoint(ckpt, rc.out);
  tl.flush();
  write_snapshot(rc, rc.out);
}

inline void cmd_train_rl(const RunConfig& rc, const Logger& log) {
  if (rc.out.empty()) throw UsageError("train-rl needs --out PATH");
  require_file(rc.init, "--init checkpoint");
  auto data = load_for(rc);
  auto init = load_checkpoint(rc.init);
  ensure_parent(rc.out);
  TrainLogFile tl(rc.out, log, "train-rl");
  auto ckpt = train_rl(data, rc.train, init, tl.sink());
  save_checkpoint(ckpt, rc.out);
  tl.flush();
  write_snapshot(rc, rc.out);
}

inline void cmd_train_vse(const RunConfig& rc, const Logger& log) {
  if (rc.out.empty()) throw UsageError("train-vse needs --out PATH");
  auto data = load_for(rc);
  ensure_parent(rc.out);
  TrainLogFile tl(rc.out, log, "train-vse");
  auto ckpt = train_vse(data, rc.train, tl.sink());
  save_checkpoint(ckpt, rc.out);
  tl.flush();
  write_snapshot(rc, rc.out);
}

inline void cmd_decode(const RunConfig& rc, const Logger& log) {
  if (rc.out.empty()) throw UsageError("decode needs --out PATH");
  if (rc.beam == 0) throw UsageError("--beam must be positive");
  require_file(rc.init, "--init checkpoint");
  auto data = load_for(rc);
  const auto ckpt = load_checkpoint(rc.init);
  check_vocab(ckpt, data.vocab);
  const auto model = Captioner<float>::from_checkpoint(ckpt);
  const std::size_t max_len = rc.train.max_len;
  auto texts = parallel_map<std::string>(data.size(), rc.workers, [&] {
    return [&data, max_len, rc, m = model](std::size_t i) mutable {
      const auto words = rc.beam == 1 ? m.greedy(data.videos[i], max_len)
                                      : m.beam(data.videos[i], rc.beam, max_len, rc.length_penalty);
      return decode_caption(words, data.vocab);
    };
  });
  std::vector<CaptionLine> lines;
  for (std::size_t i = 0; i < data.size(); ++i) lines.push_back({data.videos[i].video_id, {texts[i]}});
  ensure_parent(rc.out);
  write_caption_file(lines, rc.out);
  write_snapshot(rc, rc.out);
  log.info("decode: " + std::to_string(lines.size()) + " captions (" + branch_name(model.branch()) + ", beam " +
           std::to_string(rc.beam) + ") -> " + rc.out.string());
}

inline void cmd_eval(const RunConfig& rc, const Logger& log, std::ostream& out) {
  if (rc.candidates.size() != 1) throw UsageError("eval needs exactly one --candidates file");
  require_dir(rc.data, "--data directory");
  const auto ref_path = rc.data / (rc.split + ".captions");
  require_file(ref_path, "reference caption file");
  require_file(rc.candidates[0], "candidate caption file");
  const auto cand_text = read_candidates(rc.candidates[0]);
  TokenInterner interner;
  std::vector<TokenSeq> cands;
  std::vector<RefSet> refs;
  std::vector<std::string> ids;
  for (const auto& line : read_caption_file(ref_path)) {
    auto it = cand_text.find(line.video_id);
    if (it == cand_text.end()) throw ValueError("no candidate caption for video " + line.video_id);
    RefSet set;
    for (const auto& c : line.captions) set.push_back(interner.encode_text(c));
    refs.push_back(std::move(set));
    cands.push_back(interner.encode_text(it->second));
    ids.push_back(line.video_id);
  }
  auto rep = evaluate_corpus(cands, refs, compute_doc_freq(refs));
  std::ostringstream text;
  text << "bleu4\t" << fmt_num(rep.bleu4) << "\nrouge_l\t" << fmt_num(rep.rouge_l) << "\ncider_d\t"
       << fmt_num(rep.cider_d) << "\nmeteor_exact\t" << fmt_num(rep.meteor_exact) << "\n";
  out << text.str();
  if (!rc.out.empty()) {
    auto num = [](double x) {
      char buf[40];
      std::snprintf(buf, sizeof buf, "%.17g", x);
      return std::string(buf);
    };
    ensure_parent(rc.out);
    write_kv_file({{"bleu4", num(rep.bleu4)},
                   {"rouge_l", num(rep.rouge_l)},
                   {"cider_d", num(rep.cider_d)},
                   {"meteor_exact", num(rep.meteor_exact)},
                   {"videos", std::to_string(ids.size())}},
                  rc.out);
    std::string tsv = "video_id\tbleu\trouge_l\tcider_d\tmeteor_exact\n";
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const auto& s = rep.per_video[i];
      tsv += ids[i] + "\t" + fmt_num(s.bleu) + "\t" + fmt_num(s.rouge_l) + "\t" + fmt_num(s.cider_d) + "\t" +
             fmt_num(s.meteor_exact) + "\n";
    }
    write_file_bytes(fs::path(rc.out.string() + ".tsv"), tsv);
  }
  log.info("eval: " + std::to_string(ids.size()) + " videos scored");
}

inline void cmd_fuse(const RunConfig& rc, const Logger& log) {
  if (rc.out.empty()) throw UsageError("fuse needs --out PATH");
  if (rc.candidates.empty()) throw UsageError("fuse needs --candidates files");
  require_file(rc.init, "--init checkpoint");
  for (const auto& c : rc.candidates) require_file(c, "candidate caption file");
  auto data = load_for(rc);
  const auto ckpt = load_checkpoint(rc.init);
  check_vocab(ckpt, data.vocab);
  const auto model = VseModel<float>::from_checkpoint(ckpt);
  std::vector<std::map<std::string, std::string>> sources;
  for (const auto& c : rc.candidates) sources.push_back(read_candidates(c));
  std::vector<std::vector<std::string>> texts(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    for (std::size_t s = 0; s < sources.size(); ++s) {
      auto it = sources[s].find(data.videos[i].video_id);
      if (it == sources[s].end())
        throw ValueError(rc.candidates[s].string() + " has no caption for video " + data.videos[i].video_id);
      texts[i].push_back(it->second);
    }
  }
  auto results = parallel_map<RerankResult>(data.size(), rc.workers, [&] {
    return [&data, &texts, m = model](std::size_t i) mutable {
      std::vector<TokenSeq> cands;
      for (const auto& t : texts[i]) cands.push_back(words_of(t, data.vocab));
      return rerank(m, data.videos[i], cands);
    };
  });
  std::vector<CaptionLine> fused;
  std::string audit = "video_id\tchosen";
  for (std::size_t s = 0; s < sources.size(); ++s) audit += "\tsim" + std::to_string(s);
  audit += "\n";
  std::vector<std::size_t> picks(sources.size(), 0);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& r = results[i];
    ++picks[r.chosen];
    fused.push_back({data.videos[i].video_id, {texts[i][r.chosen]}});
    audit += data.videos[i].video_id + "\t" + std::to_string(r.chosen);
    for (double sim : r.similarities) audit += "\t" + fmt_num(sim);
    audit += "\n";
  }
  ensure_parent(rc.out);
  write_caption_file(fused, rc.out);
  write_file_bytes(fs::path(rc.out.string() + ".audit.tsv"), audit);
  write_snapshot(rc, rc.out);
  std::string summary = "fuse: picks per source";
  for (auto p : picks) summary += " " + std::to_string(p);
  log.info(summary);
}

}  // namespace detail

/// Entry point; returns the process exit code. Errors are reported on `err`.
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Two-branch attentive video captioning with self-critical fine-tuning and late fusion"};
  app.name(args.empty() ? "vcap" : args.front());
  app.require_subcommand(1);
  RunConfig rc;
  std::map<std::string, std::string> flag_kv;  // flags that override the config file

  auto common = [&](CLI::App* sub, bool training) {
    sub->add_option("--config", rc.config, "flat key = value config file");
    sub->add_option("--seed", flag_kv["seed"], "random seed");
    sub->add_option("--out", rc.out, "output path");
    sub->add_flag("--quiet", rc.quiet, "suppress progress logs");
    if (training) {
      sub->add_option("--data", rc.data, "dataset directory");
      sub->add_option("--split", rc.split, "dataset split")->capture_default_str();
      sub->add_option("--vocab", rc.vocab, "vocabulary file (default <data>/vocab.txt)");
      sub->add_option("--branch", flag_kv["branch"], "temporal|spatial")
          ->check(CLI::IsMember({"temporal", "spatial"}));
    }
  };
  auto training_opts = [&](CLI::App* sub) {
    sub->add_option("--steps", flag_kv["max_steps"], "training steps");
    sub->add_option("--lr", flag_kv["lr"], "Adam learning rate");
    sub->add_option("--batch-size", flag_kv["batch_size"], "minibatch size");
    sub->add_option("--log-every", flag_kv["log_every"], "log interval in steps");
  };

  auto* synth = app.add_subcommand("synth", "generate the synthetic dataset");
  common(synth, false);
  synth->add_option("--videos", rc.synth.num_videos, "training videos")->capture_default_str();
  synth->add_option("--val", rc.synth.num_val, "validation videos")->capture_default_str();
  synth->add_option("--concepts", rc.synth.num_concepts, "number of concepts")->capture_default_str();
  synth->add_option("--min-per-video", rc.synth.min_per_video, "fewest concepts per video")->capture_default_str();
  synth->add_option("--max-per-video", rc.synth.max_per_video, "most concepts per video")->capture_default_str();
  synth->add_option("--temporal-dim", rc.synth.temporal_dim, "segment feature width")->capture_default_str();
  synth->add_option("--audio-dim", rc.synth.audio_dim, "audio feature width")->capture_default_str();
  synth->add_option("--object-dim", rc.synth.object_dim, "object feature width")->capture_default_str();
  synth->add_option("--noise", rc.synth.noise_scale, "feature noise scale")->capture_default_str();

  auto* vocab = app.add_subcommand("vocab", "build a vocabulary from captions");
  common(vocab, false);
  auto* vdata = vocab->add_option("--data", rc.data, "dataset directory (uses <split>.captions)");
  vocab->add_option("--split", rc.split, "dataset split")->capture_default_str();
  auto* vcaps = vocab->add_option("--captions", rc.captions, "caption file");
  vdata->excludes(vcaps);
  vocab->add_option("--min-count", rc.min_count, "minimum token frequency")->capture_default_str();

  auto* train_ce_cmd = app.add_subcommand("train-ce", "cross-entropy training");
  common(train_ce_cmd, true);
  training_opts(train_ce_cmd);

  auto* train_rl_cmd = app.add_subcommand("train-rl", "self-critical fine-tuning from a CE checkpoint");
  common(train_rl_cmd, true);
  training_opts(train_rl_cmd);
  train_rl_cmd->add_option("--init", rc.init, "CE checkpoint")->required();
  train_rl_cmd->get_option("--branch")->required();
  train_rl_cmd->add_option("--rl-lambda", flag_kv["rl_lambda"], "weight of the policy-gradient term");

  auto* decode_cmd = app.add_subcommand("decode", "caption every video of a split");
  common(decode_cmd, true);
  decode_cmd->add_option("--init", rc.init, "captioning checkpoint")->required();
  decode_cmd->add_option("--beam", rc.beam, "beam width (1 = greedy)")->capture_default_str();
  decode_cmd->add_option("--length-penalty", rc.length_penalty, "beam length normalization exponent");
  decode_cmd->add_option("--max-len", flag_kv["max_len"], "maximum caption length");
  decode_cmd->add_option("--workers", rc.workers, "decoding threads")->capture_default_str();

  auto* eval_cmd = app.add_subcommand("eval", "score a caption file against references");
  common(eval_cmd, false);
  eval_cmd->add_option("--data", rc.data, "dataset directory");
  eval_cmd->add_option("--split", rc.split, "dataset split")->capture_default_str();
  eval_cmd->add_option("--candidates", rc.candidates, "candidate caption file")->required();
  eval_cmd->add_option("--workers", rc.workers, "accepted for symmetry; scoring is sequential");

  auto* train_vse_cmd = app.add_subcommand("train-vse", "train the video-sentence embedding model");
  common(train_vse_cmd, true);
  training_opts(train_vse_cmd);
  train_vse_cmd->add_option("--margin", flag_kv["margin"], "ranking margin");

  auto* fuse_cmd = app.add_subcommand("fuse", "pick one caption per video with the embedding model");
  common(fuse_cmd, true);
  fuse_cmd->add_option("--init", rc.init, "embedding checkpoint")->required();
  fuse_cmd->add_option("--candidates", rc.candidates, "candidate caption files, one per source model")
      ->required()
      ->expected(1, -1);
  fuse_cmd->add_option("--workers", rc.workers, "reranking threads")->capture_default_str();

  std::vector<std::string> argv(args.size() > 1 ? args.begin() + 1 : args.end(), args.end());
  std::reverse(argv.begin(), argv.end());
  try {
    app.parse(argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    return kExitUsage;
  }

  detail::Logger log(err, rc.quiet);
  try {
    rc.subcommand = app.get_subcommands().front()->get_name();
    KeyValues kv;
    if (!rc.config.empty()) {
      detail::require_file(rc.config, "--config file");
      kv = read_kv_file(rc.config);
    }
    for (const auto& [k, v] : flag_kv)
      if (!v.empty()) kv[k] = v;
    rc.train = TrainConfig::from_kv(kv);
    rc.train.validate();
    if (rc.workers == 0) throw UsageError("--workers must be positive");

    if (rc.subcommand == "synth") detail::cmd_synth(rc, log);
    else if (rc.subcommand == "vocab") detail::cmd_vocab(rc, log);
    else if (rc.subcommand == "train-ce") detail::cmd_train_ce(rc, log);
    else if (rc.subcommand == "train-rl") detail::cmd_train_rl(rc, log);
    else if (rc.subcommand == "decode") detail::cmd_decode(rc, log);
    else if (rc.subcommand == "eval") detail::cmd_eval(rc, log, out);
    else if (rc.subcommand == "train-vse") detail::cmd_train_vse(rc, log);
    else if (rc.subcommand == "fuse") detail::cmd_fuse(rc, log);
    return kExitOk;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const fs::filesystem_error& e) {
    err << "io error: " << e.what() << "\n";
    return kExitData;
  }
}

inline int run(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  return run(std::vector<std::string>(argv, argv + argc), out, err);
}

}  // namespace vcap
