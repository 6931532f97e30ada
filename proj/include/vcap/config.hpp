#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <string>

#include "vcap/decoder.hpp"
#include "vcap/errors.hpp"
#include "vcap/featio.hpp"

namespace vcap {

using KeyValues = std::map<std::string, std::string>;

/// Hyperparameters for every trainer. None of these come from published
/// settings; they are working defaults for desk-scale runs.
struct TrainConfig {
  double lr = 1e-3;
  std::size_t batch_size = 8;
  std::size_t max_steps = 2000;
  std::uint64_t seed = 7;
  double clip = 5.0;
  double rl_lambda = 0.7;  // weight of the policy-gradient term
  double w_cider = 0.8;
  double w_bleu = 0.2;
  std::size_t max_len = 16;
  Branch branch = Branch::Temporal;
  std::size_t hidden = 64;
  std::size_t embed = 32;
  std::size_t att = 32;
  std::size_t log_every = 100;
  std::size_t vse_dim = 32;
  double margin = 0.2;

  void validate() const {
    auto unit = [](double x) { return x >= 0.0 && x <= 1.0; };
    if (!(lr >= 0.0)) throw ValueError("lr must be non-negative");
    if (batch_size == 0) throw ValueError("batch_size must be positive");
    if (!unit(rl_lambda)) throw ValueError("rl_lambda must be in [0, 1]");
    if (!unit(w_cider) || !unit(w_bleu) || std::abs(w_cider + w_bleu - 1.0) > 1e-9)
      throw ValueError("reward weights must lie in [0, 1] and sum to 1");
    if (max_len == 0 || hidden == 0 || embed == 0 || att == 0 || vse_dim == 0)
      throw ValueError("dims and max_len must be positive");
    if (!(margin >= 0.0)) throw ValueError("margin must be non-negative");
  }

  KeyValues to_kv() const {
    auto num = [](double x) {
      char buf[40];
      std::snprintf(buf, sizeof buf, "%.17g", x);
      return std::string(buf);
    };
    return {{"lr", num(lr)},
            {"batch_size", std::to_string(batch_size)},
            {"max_steps", std::to_string(max_steps)},
            {"seed", std::to_string(seed)},
            {"clip", num(clip)},
            {"rl_lambda", num(rl_lambda)},
            {"w_cider", num(w_cider)},
            {"w_bleu", num(w_bleu)},
            {"max_len", std::to_string(max_len)},
            {"branch", branch_name(branch)},
            {"hidden", std::to_string(hidden)},
            {"embed", std::to_string(embed)},
            {"att", std::to_string(att)},
            {"log_every", std::to_string(log_every)},
            {"vse_dim", std::to_string(vse_dim)},
            {"margin", num(margin)}};
  }

  /// Overlay recognized keys onto `base`; unknown keys are an error.
  static TrainConfig from_kv(const KeyValues& kv) { return from_kv(kv, TrainConfig{}); }
  static TrainConfig from_kv(const KeyValues& kv, TrainConfig base) {
    for (const auto& [k, v] : kv) {
      try {
        if (k == "lr") base.lr = std::stod(v);
        else if (k == "batch_size") base.batch_size = detail::parse_size(v, k);
        else if (k == "max_steps") base.max_steps = detail::parse_size(v, k);
        else if (k == "seed") base.seed = std::stoull(v);
        else if (k == "clip") base.clip = std::stod(v);
        else if (k == "rl_lambda") base.rl_lambda = std::stod(v);
        else if (k == "w_cider") base.w_cider = std::stod(v);
        else if (k == "w_bleu") base.w_bleu = std::stod(v);
        else if (k == "max_len") base.max_len = detail::parse_size(v, k);
        else if (k == "branch") base.branch = parse_branch(v);
        else if (k == "hidden") base.hidden = detail::parse_size(v, k);
        else if (k == "embed") base.embed = detail::parse_size(v, k);
        else if (k == "att") base.att = detail::parse_size(v, k);
        else if (k == "log_every") base.log_every = detail::parse_size(v, k);
        else if (k == "vse_dim") base.vse_dim = detail::parse_size(v, k);
        else if (k == "margin") base.margin = std::stod(v);
        else throw ValueError("unknown config key: " + k);
      } catch (const std::logic_error&) {
        throw ValueError("bad value for config key " + k + ": '" + v + "'");
      }
    }
    return base;
  }
};

/// Flat `key = value` text, one per line; '#' starts a comment.
inline KeyValues parse_kv(const std::string& text) {
  KeyValues kv;
  std::size_t lineno = 0;
  for (auto line : detail::split(text, '\n')) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      if (b == std::string::npos) return std::string{};
      return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("config line " + std::to_string(lineno) + ": expected key = value");
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

inline std::string format_kv(const KeyValues& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
  return out;
}

inline KeyValues read_kv_file(const fs::path& path) { return parse_kv(detail::read_file_bytes(path)); }

inline void write_kv_file(const KeyValues& kv, const fs::path& path) { detail::write_file_bytes(path, format_kv(kv)); }

/// splitmix64 finalizer; gives independent RNG streams from one seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace vcap
