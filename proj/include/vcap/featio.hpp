#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "vcap/errors.hpp"

namespace vcap {

namespace fs = std::filesystem;

using TokenId = std::uint32_t;
using TokenSeq = std::vector<TokenId>;

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kUnk = 3;

/// Row-major float matrix that, unlike Tensor, may have zero rows or columns
/// (videos without detections, datasets without audio).
struct FeatureMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> data;

  FeatureMatrix() = default;
  FeatureMatrix(std::size_t r, std::size_t c, float fill = 0.0f) : rows(r), cols(c), data(r * c, fill) {}

  float& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  float at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  friend bool operator==(const FeatureMatrix&, const FeatureMatrix&) = default;
};

struct FeatureDims {
  std::size_t temporal = 0;  // Dt: image || motion per segment
  std::size_t audio = 0;     // Da
  std::size_t object = 0;    // Do

  friend bool operator==(const FeatureDims&, const FeatureDims&) = default;
};

struct VideoFeatures {
  std::string video_id;
  FeatureMatrix temporal;    // n x Dt, n >= 1
  std::vector<float> audio;  // Da
  FeatureMatrix objects;     // m x Do, m >= 0

  FeatureDims dims() const { return {temporal.cols, audio.size(), objects.cols}; }

  /// [meanpool(temporal rows) || audio], the raw global feature.
  std::vector<float> pooled_global() const {
    std::vector<double> acc(temporal.cols, 0.0);
    for (std::size_t r = 0; r < temporal.rows; ++r)
      for (std::size_t c = 0; c < temporal.cols; ++c) acc[c] += temporal.at(r, c);
    std::vector<float> out;
    out.reserve(temporal.cols + audio.size());
    for (double v : acc) out.push_back(static_cast<float>(v / static_cast<double>(temporal.rows)));
    out.insert(out.end(), audio.begin(), audio.end());
    return out;
  }

  friend bool operator==(const VideoFeatures&, const VideoFeatures&) = default;
};

// ---------------------------------------------------------------------------
// VFX1: "VFX1", u32 n, Dt, Da, m, Do, then f32 temporal, audio, objects.
// Everything little-endian.

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_f32(std::string& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(out, bits);
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline float get_f32(const unsigned char* p) {
  const std::uint32_t bits = get_u32(p);
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

inline std::string read_file_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file_bytes(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

inline std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

inline std::size_t parse_size(const std::string& s, const std::string& what) {
  if (s.empty() || !std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isdigit(c); }))
    throw FormatError("expected a non-negative integer for " + what + ", got '" + s + "'");
  return static_cast<std::size_t>(std::stoull(s));
}

}  // namespace detail

inline constexpr std::size_t kVfxHeaderBytes = 24;

inline std::string encode_feature_bytes(const VideoFeatures& v) {
  if (v.temporal.rows == 0) throw ValueError("video " + v.video_id + ": need at least one temporal segment");
  if (v.temporal.data.size() != v.temporal.rows * v.temporal.cols ||
      v.objects.data.size() != v.objects.rows * v.objects.cols)
    throw ShapeError("video " + v.video_id + ": matrix data does not match its shape");
  std::string out = "VFX1";
  for (auto d : {v.temporal.rows, v.temporal.cols, v.audio.size(), v.objects.rows, v.objects.cols})
    detail::put_u32(out, static_cast<std::uint32_t>(d));
  auto put_all = [&](const std::vector<float>& xs) {
    for (float f : xs) {
      if (!std::isfinite(f)) throw ValueError("video " + v.video_id + ": non-finite feature value");
      detail::put_f32(out, f);
    }
  };
  put_all(v.temporal.data);
  put_all(v.audio);
  put_all(v.objects.data);
  return out;
}

inline VideoFeatures decode_feature_bytes(const std::string& bytes, const std::string& video_id) {
  if (bytes.size() < 4 || bytes.compare(0, 4, "VFX1") != 0) throw FormatError(video_id + ": bad magic, expected VFX1");
  if (bytes.size() < kVfxHeaderBytes) throw LengthError(video_id + ": truncated header");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::uint64_t n = detail::get_u32(p + 4), dt = detail::get_u32(p + 8), da = detail::get_u32(p + 12),
                      m = detail::get_u32(p + 16), dobj = detail::get_u32(p + 20);
  const std::uint64_t reals = n * dt + da + m * dobj;
  const std::uint64_t expected = kVfxHeaderBytes + 4 * reals;
  if (bytes.size() != expected)
    throw LengthError(video_id + ": payload holds " + std::to_string((bytes.size() - kVfxHeaderBytes) / 4) +
                      " reals, header requires " + std::to_string(reals));
  if (n == 0) throw ValueError(video_id + ": zero temporal segments");
  VideoFeatures v;
  v.video_id = video_id;
  v.temporal = FeatureMatrix(n, dt);
  v.audio.assign(da, 0.0f);
  v.objects = FeatureMatrix(m, dobj);
  const unsigned char* q = p + kVfxHeaderBytes;
  auto take = [&](std::vector<float>& xs) {
    for (auto& f : xs) {
      f = detail::get_f32(q);
      q += 4;
      if (!std::isfinite(f)) throw ValueError(video_id + ": non-finite value in payload");
    }
  };
  take(v.temporal.data);
  take(v.audio);
  take(v.objects.data);
  return v;
}

inline void write_feature_file(const VideoFeatures& v, const fs::path& path) {
  detail::write_file_bytes(path, encode_feature_bytes(v));
}

/// The video id is the file stem.
inline VideoFeatures read_feature_file(const fs::path& path) {
  return decode_feature_bytes(detail::read_file_bytes(path), path.stem().string());
}

// ---------------------------------------------------------------------------
// Tokenization and vocabulary

/// Lowercase, drop ASCII punctuation, split on whitespace.
inline std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char c : text) {
    if (std::isspace(c)) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else if (!std::ispunct(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

class Vocabulary {
 public:
  static constexpr std::array<const char*, 4> kSpecials = {"<pad>", "<bos>", "<eos>", "<unk>"};

  Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

  /// Words after the four specials, in id order.
  explicit Vocabulary(const std::vector<std::string>& words) {
    for (auto s : kSpecials) append(s);
    for (const auto& w : words) append(w);
  }

  /// Full token list as stored in a vocabulary file; must start with the specials.
  static Vocabulary from_tokens(const std::vector<std::string>& tokens) {
    if (tokens.size() < kSpecials.size()) throw FormatError("vocabulary shorter than the special tokens");
    for (std::size_t i = 0; i < kSpecials.size(); ++i)
      if (tokens[i] != kSpecials[i])
        throw FormatError("vocabulary line " + std::to_string(i + 1) + " must be " + kSpecials[i]);
    return Vocabulary(std::vector<std::string>(tokens.begin() + kSpecials.size(), tokens.end()));
  }

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::string& token(TokenId id) const { return tokens_.at(id); }

  TokenId id(const std::string& tok) const {
    auto it = lookup_.find(tok);
    return it == lookup_.end() ? kUnk : it->second;
  }
  bool contains(const std::string& tok) const { return lookup_.count(tok) > 0; }

  /// FNV-1a over the newline-joined token list.
  std::uint64_t hash() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& t : tokens_) {
      for (unsigned char c : t) {
        h ^= c;
        h *= 1099511628211ULL;
      }
      h ^= static_cast<unsigned char>('\n');
      h *= 1099511628211ULL;
    }
    return h;
  }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  void append(const std::string& tok) {
    if (tok.empty() || lookup_.count(tok)) throw ValueError("vocabulary token empty or duplicated: '" + tok + "'");
    lookup_[tok] = static_cast<TokenId>(tokens_.size());
    tokens_.push_back(tok);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> lookup_;
};

/// Words with corpus frequency >= min_count, ordered by frequency desc then
/// token asc, after the specials.
inline Vocabulary build_vocabulary(const std::vector<std::string>& captions, std::size_t min_count) {
  if (min_count == 0) throw ValueError("min_count must be positive");
  std::map<std::string, std::size_t> freq;
  for (const auto& c : captions)
    for (auto& t : tokenize(c)) ++freq[t];
  if (freq.empty()) throw ValueError("cannot build a vocabulary from an empty corpus");
  std::vector<std::pair<std::string, std::size_t>> items;
  for (auto& [tok, n] : freq)
    if (n >= min_count) items.emplace_back(tok, n);
  std::stable_sort(items.begin(), items.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> words;
  for (auto& [tok, n] : items) words.push_back(tok);
  return Vocabulary(words);
}

/// [BOS] + ids + [EOS]; unknown words map to UNK.
inline TokenSeq encode_caption(const std::string& text, const Vocabulary& vocab) {
  TokenSeq out{kBos};
  for (const auto& t : tokenize(text)) out.push_back(vocab.id(t));
  out.push_back(kEos);
  return out;
}

/// Space-joined words; PAD, BOS and EOS are dropped.
inline std::string decode_caption(const TokenSeq& ids, const Vocabulary& vocab) {
  std::string out;
  for (auto id : ids) {
    if (id == kPad || id == kBos || id == kEos) continue;
    if (!out.empty()) out.push_back(' ');
    out += vocab.token(id);
  }
  return out;
}

inline void write_vocabulary(const Vocabulary& v, const fs::path& path) {
  std::string out;
  for (const auto& t : v.tokens()) out += t + "\n";
  detail::write_file_bytes(path, out);
}

inline Vocabulary read_vocabulary(const fs::path& path) {
  auto lines = detail::read_lines(path);
  while (!lines.empty() && lines.back().empty()) lines.pop_back();
  return Vocabulary::from_tokens(lines);
}

// ---------------------------------------------------------------------------
// Caption files: video_id TAB caption TAB caption ...

struct CaptionLine {
  std::string video_id;
  std::vector<std::string> captions;

  friend bool operator==(const CaptionLine&, const CaptionLine&) = default;
};

struct CaptionRecord {
  std::string video_id;
  std::vector<TokenSeq> captions;
};

inline std::vector<CaptionLine> read_caption_file(const fs::path& path) {
  std::vector<CaptionLine> out;
  std::size_t lineno = 0;
  for (const auto& line : detail::read_lines(path)) {
    ++lineno;
    if (line.empty()) continue;
    auto fields = detail::split(line, '\t');
    if (fields.size() < 2 || fields[0].empty())
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected video_id TAB caption");
    out.push_back({fields[0], std::vector<std::string>(fields.begin() + 1, fields.end())});
  }
  return out;
}

inline void write_caption_file(const std::vector<CaptionLine>& lines, const fs::path& path) {
  std::string out;
  for (const auto& l : lines) {
    out += l.video_id;
    for (const auto& c : l.captions) out += "\t" + c;
    out += "\n";
  }
  detail::write_file_bytes(path, out);
}

inline CaptionRecord encode_record(const CaptionLine& line, const Vocabulary& vocab) {
  if (line.captions.empty()) throw ValueError("video " + line.video_id + " has no captions");
  CaptionRecord r{line.video_id, {}};
  for (const auto& c : line.captions) r.captions.push_back(encode_caption(c, vocab));
  return r;
}

// ---------------------------------------------------------------------------
// Manifest: header "Dt TAB Da TAB Do", then video_id TAB relative path.

struct ManifestEntry {
  std::string video_id;
  fs::path path;  // as written, relative to the manifest's directory

  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

struct DatasetManifest {
  std::string split;
  FeatureDims dims;
  std::vector<ManifestEntry> entries;

  friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;
};

inline void write_manifest(const DatasetManifest& m, const fs::path& path) {
  std::string out = std::to_string(m.dims.temporal) + "\t" + std::to_string(m.dims.audio) + "\t" +
                    std::to_string(m.dims.object) + "\n";
  for (const auto& e : m.entries) out += e.video_id + "\t" + e.path.generic_string() + "\n";
  detail::write_file_bytes(path, out);
}

/// The split name is the file stem.
inline DatasetManifest read_manifest(const fs::path& path) {
  auto lines = detail::read_lines(path);
  if (lines.empty()) throw FormatError(path.string() + ": empty manifest");
  DatasetManifest m;
  m.split = path.stem().string();
  auto head = detail::split(lines[0], '\t');
  if (head.size() != 3) throw FormatError(path.string() + ": header must be Dt TAB Da TAB Do");
  m.dims = {detail::parse_size(head[0], "Dt"), detail::parse_size(head[1], "Da"), detail::parse_size(head[2], "Do")};
  std::set<std::string> seen;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    auto f = detail::split(lines[i], '\t');
    if (f.size() != 2 || f[0].empty() || f[1].empty())
      throw FormatError(path.string() + ":" + std::to_string(i + 1) + ": expected video_id TAB path");
    if (!seen.insert(f[0]).second) throw FormatError(path.string() + ": duplicate video id " + f[0]);
    m.entries.push_back({f[0], fs::path(f[1])});
  }
  return m;
}

/// Load every feature file listed in a manifest, validating dims.
inline std::vector<VideoFeatures> load_manifest_features(const DatasetManifest& m, const fs::path& manifest_dir) {
  std::vector<VideoFeatures> out;
  out.reserve(m.entries.size());
  for (const auto& e : m.entries) {
    const auto full = manifest_dir / e.path;
    if (!fs::exists(full)) throw IoError("manifest entry " + e.video_id + ": missing file " + full.string());
    auto v = read_feature_file(full);
    v.video_id = e.video_id;
    if (v.dims() != m.dims)
      throw ShapeError("video " + e.video_id + ": feature dims do not match the manifest header");
    out.push_back(std::move(v));
  }
  return out;
}

}  // namespace vcap
