#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "vcap/errors.hpp"
#include "vcap/featio.hpp"

namespace vcap {

struct SynthConfig {
  std::size_t num_videos = 32;  // training split
  std::size_t num_val = 16;     // validation split
  std::size_t num_concepts = 10;
  std::size_t min_per_video = 2;
  std::size_t max_per_video = 4;
  std::size_t temporal_dim = 32;
  std::size_t audio_dim = 16;
  std::size_t object_dim = 32;
  double noise_scale = 0.05;
};

struct SynthSplit {
  DatasetManifest manifest;
  std::vector<VideoFeatures> videos;
  std::vector<CaptionLine> captions;
};

struct SynthDataset {
  SynthSplit train;
  SynthSplit val;
  Vocabulary vocab;
};

/// Toy captioning data. Each concept (a single letter) owns a random
/// prototype per modality. A video shows 2-4 distinct concepts; its temporal
/// and object rows are the concept prototypes plus noise, its audio the mean of
/// the audio prototypes plus noise, and its caption the concept letters.
///
/// Concepts within a caption follow a fixed, seed-drawn priority order. The
/// captioning models see their memories as unordered sets, so this is what
/// makes the caption a function of the features. Concept sets are unique
/// across the dataset when enough combinations exist.
inline SynthDataset synth_generate(const SynthConfig& cfg, std::uint64_t seed) {
  if (cfg.num_concepts < 2 || cfg.num_concepts > 26) throw ValueError("num_concepts must be in [2, 26]");
  if (cfg.num_videos == 0) throw ValueError("num_videos must be positive");
  if (cfg.temporal_dim == 0 || cfg.object_dim == 0) throw ValueError("temporal and object dims must be positive");
  if (!(cfg.noise_scale >= 0.0)) throw ValueError("noise_scale must be non-negative");

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t C = cfg.num_concepts;

  auto draw = [&](std::size_t dim) {
    std::vector<float> v(dim);
    for (auto& x : v) x = static_cast<float>(normal(rng));
    return v;
  };
  std::vector<std::vector<float>> proto_t, proto_a, proto_o;
  for (std::size_t c = 0; c < C; ++c) {
    proto_t.push_back(draw(cfg.temporal_dim));
    proto_a.push_back(draw(cfg.audio_dim));
    proto_o.push_back(draw(cfg.object_dim));
  }
  std::vector<std::size_t> priority(C);
  std::iota(priority.begin(), priority.end(), std::size_t{0});
  std::shuffle(priority.begin(), priority.end(), rng);
  std::vector<std::size_t> rank(C);
  for (std::size_t i = 0; i < C; ++i) rank[priority[i]] = i;

  if (cfg.min_per_video < 1 || cfg.min_per_video > cfg.max_per_video)
    throw ValueError("concepts per video must satisfy 1 <= min <= max");
  const std::size_t max_k = std::min(cfg.max_per_video, C);
  std::uniform_int_distribution<std::size_t> count_dist(std::min(cfg.min_per_video, max_k), max_k);
  std::set<std::vector<std::size_t>> used;

  auto noisy = [&](float base) {
    return static_cast<float>(static_cast<double>(base) + cfg.noise_scale * normal(rng));
  };

  auto make_video = [&](const std::string& id) {
    std::vector<std::size_t> concepts;
    for (int attempt = 0; attempt < 200; ++attempt) {
      const std::size_t k = count_dist(rng);
      std::vector<std::size_t> all(C);
      std::iota(all.begin(), all.end(), std::size_t{0});
      concepts.clear();
      std::sample(all.begin(), all.end(), std::back_inserter(concepts), k, rng);
      std::sort(concepts.begin(), concepts.end(), [&](auto a, auto b) { return rank[a] < rank[b]; });
      if (!used.count(concepts)) break;
    }
    used.insert(concepts);

    VideoFeatures v;
    v.video_id = id;
    v.temporal = FeatureMatrix(concepts.size(), cfg.temporal_dim);
    v.objects = FeatureMatrix(concepts.size(), cfg.object_dim);
    for (std::size_t r = 0; r < concepts.size(); ++r) {
      for (std::size_t j = 0; j < cfg.temporal_dim; ++j) v.temporal.at(r, j) = noisy(proto_t[concepts[r]][j]);
      for (std::size_t j = 0; j < cfg.object_dim; ++j) v.objects.at(r, j) = noisy(proto_o[concepts[r]][j]);
    }
    v.audio.assign(cfg.audio_dim, 0.0f);
    for (std::size_t j = 0; j < cfg.audio_dim; ++j) {
      double acc = 0.0;
      for (auto c : concepts) acc += proto_a[c][j];
      v.audio[j] = noisy(static_cast<float>(acc / static_cast<double>(concepts.size())));
    }
    std::string caption;
    for (auto c : concepts) {
      if (!caption.empty()) caption.push_back(' ');
      caption.push_back(static_cast<char>('a' + c));
    }
    return std::pair{std::move(v), CaptionLine{id, {caption}}};
  };

  SynthDataset ds;
  const FeatureDims dims{cfg.temporal_dim, cfg.audio_dim, cfg.object_dim};
  auto fill = [&](SynthSplit& split, const std::string& name, std::size_t count, std::size_t first) {
    split.manifest.split = name;
    split.manifest.dims = dims;
    for (std::size_t i = 0; i < count; ++i) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "vid%05zu", first + i);
      auto [v, cap] = make_video(buf);
      split.manifest.entries.push_back({buf, fs::path("features") / (std::string(buf) + ".vfx")});
      split.videos.push_back(std::move(v));
      split.captions.push_back(std::move(cap));
    }
  };
  fill(ds.train, "train", cfg.num_videos, 0);
  fill(ds.val, "val", cfg.num_val, cfg.num_videos);

  std::vector<std::string> words;
  for (std::size_t c = 0; c < C; ++c) words.emplace_back(1, static_cast<char>('a' + c));
  ds.vocab = Vocabulary(words);
  return ds;
}

/// Layout: features/*.vfx, {train,val}.manifest, {train,val}.captions, vocab.txt.
inline void write_synthetic(const SynthDataset& ds, const fs::path& dir) {
  fs::create_directories(dir / "features");
  for (const SynthSplit* s : {&ds.train, &ds.val}) {
    for (std::size_t i = 0; i < s->videos.size(); ++i)
      write_feature_file(s->videos[i], dir / s->manifest.entries[i].path);
    write_manifest(s->manifest, dir / (s->manifest.split + ".manifest"));
    write_caption_file(s->captions, dir / (s->manifest.split + ".captions"));
  }
  write_vocabulary(ds.vocab, dir / "vocab.txt");
}

}  // namespace vcap
