#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "vcap/errors.hpp"
#include "vcap/featio.hpp"
#include "vcap/metrics.hpp"

namespace vcap {

/// Features aligned with encoded references, in manifest order.
struct Dataset {
  Vocabulary vocab;
  FeatureDims dims;
  std::vector<VideoFeatures> videos;
  std::vector<CaptionRecord> refs;

  std::size_t size() const { return videos.size(); }

  /// References with BOS/EOS stripped, as the metrics expect.
  std::vector<RefSet> metric_refs() const {
    std::vector<RefSet> out;
    for (const auto& r : refs) {
      RefSet set;
      for (const auto& c : r.captions) set.emplace_back(c.begin() + 1, c.end() - 1);
      out.push_back(std::move(set));
    }
    return out;
  }
};

inline Dataset make_dataset(std::vector<VideoFeatures> videos, const std::vector<CaptionLine>& captions,
                            const Vocabulary& vocab) {
  std::map<std::string, const CaptionLine*> by_id;
  for (const auto& c : captions) by_id[c.video_id] = &c;
  Dataset d;
  d.vocab = vocab;
  if (!videos.empty()) d.dims = videos.front().dims();
  for (auto& v : videos) {
    auto it = by_id.find(v.video_id);
    if (it == by_id.end()) throw ValueError("no captions for video " + v.video_id);
    if (v.dims() != d.dims) throw ShapeError("video " + v.video_id + " has inconsistent feature dims");
    d.refs.push_back(encode_record(*it->second, vocab));
  }
  d.videos = std::move(videos);
  return d;
}

/// `dir/<split>.manifest` + `dir/<split>.captions`.
inline Dataset load_dataset(const fs::path& dir, const std::string& split, const Vocabulary& vocab) {
  const auto manifest = read_manifest(dir / (split + ".manifest"));
  auto videos = load_manifest_features(manifest, dir);
  auto d = make_dataset(std::move(videos), read_caption_file(dir / (split + ".captions")), vocab);
  d.dims = manifest.dims;
  return d;
}

}  // namespace vcap
