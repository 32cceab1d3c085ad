#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "objective.hpp"
#include "ops.hpp"
#include "pcg32.hpp"

namespace mcnet {

enum class DecoderMode { transposed, bilinear, nearest };

inline DecoderMode parse_decoder_mode(const std::string& s) {
  if (s == "transposed") return DecoderMode::transposed;
  if (s == "bilinear") return DecoderMode::bilinear;
  if (s == "nearest") return DecoderMode::nearest;
  throw ConfigError("unknown decoder mode '" + s + "' (expected transposed|bilinear|nearest)");
}

inline std::string decoder_mode_name(DecoderMode m) {
  switch (m) {
    case DecoderMode::transposed: return "transposed";
    case DecoderMode::bilinear: return "bilinear";
    default: return "nearest";
  }
}

struct ModelConfig {
  int in_channels = 1;
  int num_classes = 1;  // 1 => sigmoid head, >1 => per-pixel softmax
  int base_width = 16;
  int depth = 3;  // encoder stages; depth-1 poolings
  int n_decoders = 3;
  std::vector<DecoderMode> decoder_modes;  // cycled/truncated to n_decoders
  bool norm_enabled = true;
  double bn_momentum = 0.9;
  double bn_eps = 1e-5;

  // Decoders differ by up-sampling type; unspecified slots cycle through the
  // three types so any n is valid.
  std::vector<DecoderMode> resolved_modes() const {
    static const DecoderMode cycle[3] = {DecoderMode::transposed, DecoderMode::bilinear,
                                         DecoderMode::nearest};
    std::vector<DecoderMode> m = decoder_modes;
    m.resize(static_cast<std::size_t>(n_decoders));
    for (std::size_t i = decoder_modes.size(); i < m.size(); ++i) m[i] = cycle[i % 3];
    return m;
  }

  void validate() const {
    if (in_channels < 1) throw ConfigError("in_channels must be >= 1");
    if (num_classes < 1) throw ConfigError("num_classes must be >= 1");
    if (base_width < 1) throw ConfigError("base_width must be >= 1");
    if (depth < 1) throw ConfigError("depth must be >= 1");
    if (n_decoders < 1) throw ConfigError("n_decoders must be >= 1");
    if (static_cast<int>(decoder_modes.size()) > n_decoders)
      throw ConfigError("more decoder_modes than n_decoders");
  }
};

// Shared-encoder, multi-decoder 2-d U-Net. All decoders read the same encoder
// features (one encoder forward per batch); decoder 0 is the inference head.
template <typename T>
class Model {
 public:
  struct Param {
    std::string name;
    Tensor<T> tensor;
    bool trainable;
  };

  Model() = default;

  Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const auto modes = cfg_.resolved_modes();
    const int d = cfg_.depth;
    enc_.resize(static_cast<std::size_t>(d));
    for (int s = 0; s < d; ++s) {
      const int cin = s == 0 ? cfg_.in_channels : width(s - 1);
      enc_[s].c0 = make_block("enc" + std::to_string(s) + ".conv0", cin, width(s), 3, seed);
      enc_[s].c1 = make_block("enc" + std::to_string(s) + ".conv1", width(s), width(s), 3, seed);
    }
    dec_.resize(static_cast<std::size_t>(cfg_.n_decoders));
    for (int i = 0; i < cfg_.n_decoders; ++i) {
      auto& dec = dec_[i];
      dec.mode = modes[static_cast<std::size_t>(i)];
      const std::string dn = "dec" + std::to_string(i);
      dec.stages.resize(static_cast<std::size_t>(d - 1));
      for (int s = d - 1; s >= 1; --s) {
        auto& st = dec.stages[static_cast<std::size_t>(s - 1)];
        const std::string sn = dn + ".up" + std::to_string(s);
        if (dec.mode == DecoderMode::transposed) {
          st.up_w = add_param(sn + ".w", {width(s), width(s - 1), 2, 2}, true);
          kaiming_init(st.up_w, width(s) * 4, sn + ".w", seed);
        } else {
          st.up_w = add_param(sn + ".w", {width(s - 1), width(s), 1, 1}, true);
          kaiming_init(st.up_w, width(s), sn + ".w", seed);
        }
        st.up_b = add_param(sn + ".b", {width(s - 1)}, true);
        st.c0 = make_block(dn + ".stage" + std::to_string(s - 1) + ".conv0", 2 * width(s - 1),
                           width(s - 1), 3, seed);
        st.c1 = make_block(dn + ".stage" + std::to_string(s - 1) + ".conv1", width(s - 1),
                           width(s - 1), 3, seed);
      }
      dec.head_w = add_param(dn + ".head.w", {cfg_.num_classes, width(0), 1, 1}, true);
      kaiming_init(dec.head_w, width(0), dn + ".head.w", seed);
      dec.head_b = add_param(dn + ".head.b", {cfg_.num_classes}, true);
    }
  }

  const ModelConfig& config() const { return cfg_; }

  // Probability maps from every decoder, off one shared encoder pass.
  std::vector<Tensor<T>> forward_all(Graph<T>& g, const Tensor<T>& x, bool training) {
    auto feats = encode(g, x, training);
    std::vector<Tensor<T>> outs;
    outs.reserve(dec_.size());
    for (std::size_t i = 0; i < dec_.size(); ++i)
      outs.push_back(decode(g, feats, static_cast<int>(i), training, true));
    return outs;
  }

  // activated=false yields raw logits (sliding-window inference averages
  // logits before the final activation).
  Tensor<T> forward_decoder(Graph<T>& g, const Tensor<T>& x, int decoder, bool training,
                            bool activated = true) {
    auto feats = encode(g, x, training);
    return decode(g, feats, decoder, training, activated);
  }

  // Inference path: encoder + first decoder only.
  Tensor<T> forward_head(Graph<T>& g, const Tensor<T>& x, bool training = false) {
    return forward_decoder(g, x, 0, training, true);
  }

  const std::vector<Param>& params() const { return registry_; }
  std::vector<Param>& params() { return registry_; }

  std::vector<std::pair<std::string, Tensor<T>>> trainable() {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    for (auto& p : registry_)
      if (p.trainable) out.emplace_back(p.name, p.tensor);
    return out;
  }

  std::size_t trainable_parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : registry_)
      if (p.trainable) n += p.tensor.size();
    return n;
  }

  // Parameters one sub-model touches: encoder + the given decoder.
  std::size_t submodel_parameter_count(int decoder) const {
    const std::string prefix = "dec" + std::to_string(decoder) + ".";
    std::size_t n = 0;
    for (const auto& p : registry_)
      if (p.trainable && (p.name.rfind("enc", 0) == 0 || p.name.rfind(prefix, 0) == 0))
        n += p.tensor.size();
    return n;
  }

  DecoderMode decoder_mode(int decoder) const {
    return dec_.at(static_cast<std::size_t>(decoder)).mode;
  }

  long encoder_forwards() const { return encoder_forwards_; }

  // Spatial granularity the pooling ladder requires.
  int size_multiple() const { return 1 << (cfg_.depth - 1); }

 private:
  struct BnLayer {
    Tensor<T> gamma, beta, mean, var;
  };
  struct ConvBlock {
    Tensor<T> w, b;  // b undefined when a norm layer follows
    BnLayer bn;
  };
  struct EncStage {
    ConvBlock c0, c1;
  };
  struct DecStage {
    Tensor<T> up_w, up_b;
    ConvBlock c0, c1;
  };
  struct Decoder {
    DecoderMode mode;
    std::vector<DecStage> stages;  // index s-1 for stage s
    Tensor<T> head_w, head_b;
  };

  int width(int stage) const { return cfg_.base_width << stage; }

  Tensor<T> add_param(const std::string& name, std::vector<int> shape, bool trainable) {
    Tensor<T> t(std::move(shape), trainable);
    registry_.push_back({name, t, trainable});
    return t;
  }

  void kaiming_init(Tensor<T>& w, int fan_in, const std::string& name, std::uint64_t seed) {
    Pcg32 rng(seed, fnv1a64(name));
    const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (T& v : w.values()) v = static_cast<T>(rng.next_normal() * std);
  }

  ConvBlock make_block(const std::string& name, int cin, int cout, int k, std::uint64_t seed) {
    ConvBlock b;
    b.w = add_param(name + ".w", {cout, cin, k, k}, true);
    kaiming_init(b.w, cin * k * k, name + ".w", seed);
    if (cfg_.norm_enabled) {
      b.bn.gamma = add_param(name + ".bn.gamma", {cout}, true);
      for (T& v : b.bn.gamma.values()) v = T(1);
      b.bn.beta = add_param(name + ".bn.beta", {cout}, true);
      b.bn.mean = add_param(name + ".bn.mean", {cout}, false);
      b.bn.var = add_param(name + ".bn.var", {cout}, false);
      for (T& v : b.bn.var.values()) v = T(1);
    } else {
      b.b = add_param(name + ".b", {cout}, true);
    }
    return b;
  }

  Tensor<T> apply_block(Graph<T>& g, ConvBlock& blk, const Tensor<T>& x, int pad, bool training) {
    Tensor<T> y = conv2d(g, x, blk.w, blk.b, 1, pad);
    if (cfg_.norm_enabled)
      y = batch_norm(g, y, blk.bn.gamma, blk.bn.beta, blk.bn.mean, blk.bn.var, training,
                     static_cast<T>(cfg_.bn_momentum), static_cast<T>(cfg_.bn_eps));
    return relu(g, y);
  }

  std::vector<Tensor<T>> encode(Graph<T>& g, const Tensor<T>& x, bool training) {
    detail::require_4d(x, "model input");
    if (x.dim(1) != cfg_.in_channels)
      throw ConfigError("model input has " + std::to_string(x.dim(1)) + " channels, expected " +
                        std::to_string(cfg_.in_channels));
    const int m = size_multiple();
    if (x.dim(2) % m != 0 || x.dim(3) % m != 0)
      throw DataError("model input H and W must be multiples of " + std::to_string(m) + ", got " +
                      shape_str(x.shape()));
    ++encoder_forwards_;
    std::vector<Tensor<T>> feats(enc_.size());
    Tensor<T> cur = x;
    for (std::size_t s = 0; s < enc_.size(); ++s) {
      if (s > 0) cur = max_pool2d(g, cur);
      cur = apply_block(g, enc_[s].c0, cur, 1, training);
      cur = apply_block(g, enc_[s].c1, cur, 1, training);
      feats[s] = cur;
    }
    return feats;
  }

  Tensor<T> decode(Graph<T>& g, const std::vector<Tensor<T>>& feats, int decoder, bool training,
                   bool activated) {
    if (decoder < 0 || decoder >= static_cast<int>(dec_.size()))
      throw ConfigError("decoder index " + std::to_string(decoder) + " out of range");
    auto& dec = dec_[static_cast<std::size_t>(decoder)];
    Tensor<T> cur = feats.back();
    for (int s = cfg_.depth - 1; s >= 1; --s) {
      auto& st = dec.stages[static_cast<std::size_t>(s - 1)];
      Tensor<T> up;
      if (dec.mode == DecoderMode::transposed) {
        up = transposed_conv2d(g, cur, st.up_w, st.up_b, 2);
      } else {
        up = upsample(g, cur, 2,
                      dec.mode == DecoderMode::bilinear ? UpsampleMode::bilinear
                                                        : UpsampleMode::nearest);
        up = conv2d(g, up, st.up_w, st.up_b, 1, 0);
      }
      cur = concat_channels(g, up, feats[static_cast<std::size_t>(s - 1)]);
      cur = apply_block(g, st.c0, cur, 1, training);
      cur = apply_block(g, st.c1, cur, 1, training);
    }
    Tensor<T> logits = conv2d(g, cur, dec.head_w, dec.head_b, 1, 0);
    if (!activated) return logits;
    return cfg_.num_classes == 1 ? sigmoid(g, logits) : softmax_channels(g, logits);
  }

  ModelConfig cfg_;
  std::vector<EncStage> enc_;
  std::vector<Decoder> dec_;
  std::vector<Param> registry_;
  long encoder_forwards_ = 0;
};

template <typename T>
Model<T> build_model(const ModelConfig& cfg, std::uint64_t seed) {
  return Model<T>(cfg, seed);
}

// View onto the shared encoder plus one decoder. It references the model's
// parameter storage: an SGD step on the model is visible through every
// sub-model.
template <typename T>
class SubModel {
 public:
  SubModel(Model<T>& model, int decoder) : model_(&model), decoder_(decoder) {}

  Tensor<T> forward(Graph<T>& g, const Tensor<T>& x, bool training = false,
                    bool activated = true) {
    return model_->forward_decoder(g, x, decoder_, training, activated);
  }

  std::size_t parameter_count() const { return model_->submodel_parameter_count(decoder_); }
  DecoderMode mode() const { return model_->decoder_mode(decoder_); }
  int decoder_index() const { return decoder_; }
  Model<T>& model() { return *model_; }

 private:
  Model<T>* model_;
  int decoder_;
};

// The testing model: shared encoder + first decoder.
template <typename T>
SubModel<T> select_inference_head(Model<T>& model) {
  return SubModel<T>(model, 0);
}

}  // namespace mcnet
