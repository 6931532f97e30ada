#pragma once

#include <optional>
#include <random>
#include <string>
#include <vector>

#include "vcap/featio.hpp"
#include "vcap/tape.hpp"
#include "vcap/tensor.hpp"

namespace vcap {

/// Linear projections into the shared hidden size H. Either memory projection
/// may be absent; a captioner only carries the one its branch attends to.
template <class T>
struct EncoderParams {
  Parameter<T>* global_W = nullptr;  // [H x (Dt + Da)]
  Parameter<T>* global_b = nullptr;
  Parameter<T>* temporal_W = nullptr;  // [H x Dt]
  Parameter<T>* temporal_b = nullptr;
  Parameter<T>* object_W = nullptr;  // [H x Do]
  Parameter<T>* object_b = nullptr;

  static EncoderParams from(ParameterStore<T>& s) {
    EncoderParams p;
    p.global_W = &s.at("enc.global.W");
    p.global_b = &s.at("enc.global.b");
    if (s.contains("enc.temporal.W")) {
      p.temporal_W = &s.at("enc.temporal.W");
      p.temporal_b = &s.at("enc.temporal.b");
    }
    if (s.contains("enc.object.W")) {
      p.object_W = &s.at("enc.object.W");
      p.object_b = &s.at("enc.object.b");
    }
    return p;
  }
};

template <class T>
void add_encoder_params(ParameterStore<T>& s, const FeatureDims& dims, std::size_t hidden, bool temporal,
                        bool spatial, std::mt19937_64& rng) {
  glorot_matrix(s.add("enc.global.W", {hidden, dims.temporal + dims.audio}), rng);
  s.add("enc.global.b", {hidden});
  if (temporal) {
    glorot_matrix(s.add("enc.temporal.W", {hidden, dims.temporal}), rng);
    s.add("enc.temporal.b", {hidden});
  }
  if (spatial) {
    glorot_matrix(s.add("enc.object.W", {hidden, dims.object}), rng);
    s.add("enc.object.b", {hidden});
  }
}

/// v-bar, V^t and V^o on a tape. A projection that is absent, or an object
/// matrix with zero rows, yields nullopt for that memory.
template <class T>
struct EncodedVideo {
  Var<T> global;
  std::optional<Var<T>> temporal;  // [n x H]
  std::optional<Var<T>> objects;   // [m x H]
};

namespace detail {

template <class T>
Var<T> feature_constant(Tape<T>& tape, const FeatureMatrix& m) {
  return tape.constant({m.rows, m.cols}, std::vector<T>(m.data.begin(), m.data.end()));
}

}  // namespace detail

/// v-bar = W_g [meanpool(temporal) || audio] + b_g; memory rows are the
/// row-wise projections W_t x_i + b_t and W_o o_j + b_o. No nonlinearity.
template <class T>
EncodedVideo<T> encode(Tape<T>& tape, const VideoFeatures& v, const EncoderParams<T>& p) {
  if (v.temporal.rows == 0) throw ValueError("encode: video " + v.video_id + " has no temporal segments");
  const auto& gw = p.global_W->value.shape;
  if (gw[1] != v.temporal.cols + v.audio.size())
    throw ShapeError("encode: global projection expects " + std::to_string(gw[1]) + " inputs, video " +
                     v.video_id + " provides " + std::to_string(v.temporal.cols + v.audio.size()));
  auto temporal = detail::feature_constant(tape, v.temporal);
  std::vector<Var<T>> parts{mean_rows(temporal)};
  if (!v.audio.empty()) parts.push_back(tape.constant({v.audio.size()}, std::vector<T>(v.audio.begin(), v.audio.end())));
  EncodedVideo<T> out;
  out.global = affine(concat(parts), tape.param(*p.global_W), tape.param(*p.global_b));
  if (p.temporal_W) out.temporal = linear_rows(temporal, tape.param(*p.temporal_W), tape.param(*p.temporal_b));
  if (p.object_W && v.objects.rows > 0) {
    if (v.objects.cols != p.object_W->value.shape[1])
      throw ShapeError("encode: object projection expects " + std::to_string(p.object_W->value.shape[1]) +
                       " inputs, video " + v.video_id + " provides " + std::to_string(v.objects.cols));
    out.objects = linear_rows(detail::feature_constant(tape, v.objects), tape.param(*p.object_W),
                              tape.param(*p.object_b));
  }
  return out;
}

}  // namespace vcap
