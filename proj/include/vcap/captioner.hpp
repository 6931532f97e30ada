#pragma once

#include <cstdint>
#include <random>
#include <string>

#include "vcap/checkpoint.hpp"
#include "vcap/decoder.hpp"
#include "vcap/encoder.hpp"
#include "vcap/featio.hpp"

namespace vcap {

struct CaptionerDims {
  FeatureDims feat;
  DecoderDims dec;
  Branch branch = Branch::Temporal;
};

/// Encoder + two-layer attention decoder for one branch. The temporal and
/// spatial variants differ only in which memory the decoder attends.
template <class T>
class Captioner {
 public:
  Captioner(const CaptionerDims& dims, std::uint64_t seed) : dims_(dims) {
    if (dims.dec.vocab < 4) throw ValueError("vocabulary must hold at least the special tokens");
    std::mt19937_64 rng(seed);
    add_encoder_params(store_, dims.feat, dims.dec.hidden, dims.branch == Branch::Temporal,
                       dims.branch == Branch::Spatial, rng);
    add_decoder_params(store_, dims.dec, rng);
  }

  static Captioner from_checkpoint(const Checkpoint& c) {
    if (c.get("kind") != "captioner") throw FormatError("checkpoint is not a captioning model");
    CaptionerDims d;
    d.feat = {c.get_size("feat.temporal"), c.get_size("feat.audio"), c.get_size("feat.object")};
    d.dec = {c.get_size("model.vocab"), c.get_size("model.hidden"), c.get_size("model.embed"),
             c.get_size("model.att")};
    d.branch = parse_branch(c.get("branch"));
    Captioner m(d, 0);
    import_params(m.store_, c);
    return m;
  }

  /// Parameters plus the metadata needed to rebuild the model.
  Checkpoint to_checkpoint(const Vocabulary& vocab, std::size_t step) const {
    Checkpoint c;
    c.params = export_params(store_);
    c.meta["kind"] = "captioner";
    c.meta["branch"] = branch_name(dims_.branch);
    c.meta["vocab_hash"] = hex64(vocab.hash());
    c.meta["step"] = std::to_string(step);
    c.meta["feat.temporal"] = std::to_string(dims_.feat.temporal);
    c.meta["feat.audio"] = std::to_string(dims_.feat.audio);
    c.meta["feat.object"] = std::to_string(dims_.feat.object);
    c.meta["model.vocab"] = std::to_string(dims_.dec.vocab);
    c.meta["model.hidden"] = std::to_string(dims_.dec.hidden);
    c.meta["model.embed"] = std::to_string(dims_.dec.embed);
    c.meta["model.att"] = std::to_string(dims_.dec.att);
    return c;
  }

  const CaptionerDims& dims() const { return dims_; }
  Branch branch() const { return dims_.branch; }
  ParameterStore<T>& params() { return store_; }
  const ParameterStore<T>& params() const { return store_; }

  /// Encode `v` and bind every parameter as leaves of `tape`.
  BoundVideo<T> bind(Tape<T>& tape, const VideoFeatures& v) {
    auto enc = encode(tape, v, EncoderParams<T>::from(store_));
    auto dec = DecoderVars<T>::bind(tape, DecoderParams<T>::from(store_));
    auto mem = Memory<T>::prepare(dec, dims_.branch == Branch::Temporal ? enc.temporal : enc.objects);
    return {dec, enc.global, mem};
  }

  TokenSeq greedy(const VideoFeatures& v, std::size_t max_len, DecodeTrace* trace = nullptr) {
    Tape<T> tape(false);
    return greedy_decode(bind(tape, v), max_len, trace);
  }

  TokenSeq beam(const VideoFeatures& v, std::size_t beam_size, std::size_t max_len, double gamma = 0.0) {
    Tape<T> tape(false);
    return beam_decode(bind(tape, v), beam_size, max_len, gamma);
  }

 private:
  CaptionerDims dims_;
  ParameterStore<T> store_;
};

}  // namespace vcap
