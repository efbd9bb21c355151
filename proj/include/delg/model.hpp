#pragma once

#include <map>
#include <string>
#include <vector>

#include "delg/backbone.hpp"
#include "delg/heads.hpp"
#include "delg/losses.hpp"

namespace delg {

struct ModelConfig {
  BackboneConfig backbone = BackboneConfig::desk_default();
  int descriptor_dim = 128;   // global feature width, matches the deep tap
  int code_dim = 16;          // autoencoder bottleneck / local descriptor dim
  int attention_hidden = 32;  // hidden width of the attention scorer
  double gem_power = 3.0;     // fixed, not learned
  double arcface_margin = 0.1;
  int num_classes = 16;

  static ModelConfig desk_default(int num_classes = 16) {
    ModelConfig cfg;
    cfg.backbone = BackboneConfig::desk_default();
    cfg.descriptor_dim = cfg.backbone.deep_channels();
    cfg.attention_hidden = cfg.backbone.shallow_channels() / 2;
    cfg.num_classes = num_classes;
    return cfg;
  }

  void validate() const {
    backbone.validate();
    if (descriptor_dim < 1 || code_dim < 1 || attention_hidden < 1 ||
        num_classes < 2)
      fail(ErrorKind::config, "model: non-positive head dimension");
    if (gem_power < 1.0)
      fail(ErrorKind::config, "model: gem power must be >= 1");
  }
};

// All learnable state as named tensors; std::map keeps every iteration over
// parameters (optimizer, serialization) in one deterministic order.
using ParamStore = std::map<std::string, Tensor>;

namespace detail {

inline Tensor he_kernel(Rng& rng, int kh, int kw, int cin, int cout) {
  Tensor t({kh, kw, cin, cout});
  const double stddev = std::sqrt(2.0 / (double(kh) * kw * cin));
  for (double& v : t.data) v = stddev * rng.normal();
  return t;
}

inline Tensor scaled_normal(Rng& rng, std::vector<int> shape, double stddev) {
  Tensor t(std::move(shape));
  for (double& v : t.data) v = stddev * rng.normal();
  return t;
}

}  // namespace detail

inline void renormalize_rows(Tensor& w) {
  const int rows = w.dim(0), cols = w.dim(1);
  for (int r = 0; r < rows; ++r) {
    double norm = 0.0;
    for (int c = 0; c < cols; ++c) norm += w.at(r, c) * w.at(r, c);
    norm = std::sqrt(norm);
    if (norm <= 1e-12) {
      w.at(r, 0) = 1.0;  // degenerate row: reset to a basis vector
      for (int c = 1; c < cols; ++c) w.at(r, c) = 0.0;
      continue;
    }
    for (int c = 0; c < cols; ++c) w.at(r, c) /= norm;
  }
}

// Creates all parameters in one fixed order so a given seed always yields
// the same initialization regardless of which heads a run later trains.
inline ParamStore init_params(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  ParamStore p;
  int cin = 3;
  for (size_t i = 0; i < cfg.backbone.blocks.size(); ++i) {
    const LayerSpec& b = cfg.backbone.blocks[i];
    const std::string base = "backbone.conv" + std::to_string(i);
    p[base + ".kernel"] = detail::he_kernel(rng, b.kernel, b.kernel, cin,
                                            b.channels);
    p[base + ".bias"] = Tensor({b.channels});
    cin = b.channels;
  }
  const int c_s = cfg.backbone.shallow_channels();
  const int c_d = cfg.backbone.deep_channels();
  p["global.projection"] = detail::scaled_normal(
      rng, {cfg.descriptor_dim, c_d}, std::sqrt(1.0 / c_d));
  p["global.bias"] = Tensor({cfg.descriptor_dim});
  p["attention.conv1.kernel"] =
      detail::he_kernel(rng, 1, 1, c_s, cfg.attention_hidden);
  p["attention.conv1.bias"] = Tensor({cfg.attention_hidden});
  p["attention.conv2.kernel"] =
      detail::he_kernel(rng, 1, 1, cfg.attention_hidden, 1);
  p["attention.conv2.bias"] = Tensor({1});
  p["autoencoder.encode.kernel"] = detail::scaled_normal(
      rng, {1, 1, c_s, cfg.code_dim}, std::sqrt(1.0 / c_s));
  p["autoencoder.encode.bias"] = Tensor({cfg.code_dim});
  p["autoencoder.decode.kernel"] = detail::scaled_normal(
      rng, {1, 1, cfg.code_dim, c_s}, std::sqrt(1.0 / cfg.code_dim));
  p["autoencoder.decode.bias"] = Tensor({c_s});
  Tensor w = detail::scaled_normal(rng, {cfg.num_classes, cfg.descriptor_dim},
                                   1.0);
  renormalize_rows(w);
  p["arcface.weights"] = std::move(w);
  p["arcface.gamma"] =
      Tensor::from({1}, {std::sqrt(double(cfg.descriptor_dim))});
  p["attnclf.weights"] = Tensor({cfg.num_classes, c_s});
  p["attnclf.bias"] = Tensor({cfg.num_classes});
  return p;
}

// Parameter tensors bound into a graph as leaves for one forward/backward.
struct BoundModel {
  std::map<std::string, Node*> nodes;

  Node* at(const std::string& name) const {
    auto it = nodes.find(name);
    if (it == nodes.end())
      fail(ErrorKind::not_found, "model: no parameter named " + name);
    return it->second;
  }

  std::vector<ConvParamNodes> backbone_params(const ModelConfig& cfg) const {
    std::vector<ConvParamNodes> out;
    for (size_t i = 0; i < cfg.backbone.blocks.size(); ++i) {
      const std::string base = "backbone.conv" + std::to_string(i);
      out.push_back({at(base + ".kernel"), at(base + ".bias")});
    }
    return out;
  }

  ConvParamNodes attention1() const {
    return {at("attention.conv1.kernel"), at("attention.conv1.bias")};
  }
  ConvParamNodes attention2() const {
    return {at("attention.conv2.kernel"), at("attention.conv2.bias")};
  }
  ConvParamNodes encoder() const {
    return {at("autoencoder.encode.kernel"), at("autoencoder.encode.bias")};
  }
  ConvParamNodes decoder() const {
    return {at("autoencoder.decode.kernel"), at("autoencoder.decode.bias")};
  }
};

inline BoundModel bind_params(Graph& g, const ParamStore& params) {
  BoundModel m;
  for (const auto& [name, tensor] : params) m.nodes[name] = g.leaf(tensor);
  return m;
}

struct SampleLossNodes {
  Node* global = nullptr;
  Node* reconstruction = nullptr;
  Node* attention = nullptr;
};

// Heads and losses for one sample given its tap maps. With stop_gradients
// the local branch (autoencoder, attention, their losses) reads a barriered
// copy of the shallow map, so those losses cannot move the trunk.
inline SampleLossNodes sample_losses(Graph& g, const BoundModel& m,
                                     const ModelConfig& cfg, Node* shallow,
                                     Node* deep, int label,
                                     GradientControl control) {
  Node* descriptor = g.l2_normalize(global_descriptor(
      g, deep, m.at("global.projection"), m.at("global.bias"), cfg.gem_power));
  SampleLossNodes out;
  out.global = global_loss(g, descriptor, label, m.at("arcface.weights"),
                           m.at("arcface.gamma"), cfg.arcface_margin);

  Node* local_input = control == GradientControl::stop_gradients
                          ? g.stop_gradient(shallow)
                          : shallow;
  Node* code = encode(g, local_input, m.encoder());
  Node* reconstruction = decode(g, code, m.decoder());
  out.reconstruction = reconstruction_loss(g, reconstruction, local_input);
  Node* scores = attention_scores(g, local_input, m.attention1(),
                                  m.attention2());
  Node* pooled = g.attention_pool(reconstruction, scores);
  out.attention = attention_loss(g, pooled, label, m.at("attnclf.weights"),
                                 m.at("attnclf.bias"));
  return out;
}

struct BatchLossNodes {
  Node* total = nullptr;
  Node* shallow = nullptr;  // batched tap, for sparsity probes
  Node* deep = nullptr;
  double mean_global = 0.0;
  double mean_reconstruction = 0.0;
  double mean_attention = 0.0;
};

// total = global_weight*Lg + lambda*Lr + beta*La, each term averaged over
// the batch. global_weight exists so tests can zero the global objective.
inline BatchLossNodes total_loss(Graph& g, const BoundModel& m,
                                 const ModelConfig& cfg, Node* images,
                                 const std::vector<int>& labels,
                                 const LossWeights& weights,
                                 GradientControl control,
                                 double global_weight = 1.0) {
  if (images->value.rank() != 4 ||
      images->value.dim(0) != int(labels.size()))
    fail(ErrorKind::precondition,
         "total_loss: batch/label mismatch for " + images->value.shape_str());
  const int n = int(labels.size());
  FeatureMaps maps =
      backbone_forward(g, images, cfg.backbone, m.backbone_params(cfg));
  BatchLossNodes out;
  out.shallow = maps.shallow;
  out.deep = maps.deep;
  std::vector<std::pair<double, Node*>> terms;
  for (int i = 0; i < n; ++i) {
    Node* shallow = g.slice_batch(maps.shallow, i);
    Node* deep = g.slice_batch(maps.deep, i);
    SampleLossNodes losses =
        sample_losses(g, m, cfg, shallow, deep, labels[size_t(i)], control);
    terms.emplace_back(global_weight / n, losses.global);
    terms.emplace_back(weights.lambda_rec / n, losses.reconstruction);
    terms.emplace_back(weights.beta_attn / n, losses.attention);
    out.mean_global += losses.global->value[0] / n;
    out.mean_reconstruction += losses.reconstruction->value[0] / n;
    out.mean_attention += losses.attention->value[0] / n;
  }
  out.total = g.weighted_sum(terms);
  return out;
}

// Everything inference needs from one image at one pyramid scale.
struct InferenceMaps {
  Tensor shallow;       // post-ReLU shallow tap
  Tensor deep;          // post-ReLU deep tap
  Tensor attention;     // positive HxW score map
  Tensor codes;         // HxWxC_T local descriptors before normalization
  Tensor raw_global;    // unnormalized global descriptor
};

inline InferenceMaps inference_forward(const ParamStore& params,
                                       const ModelConfig& cfg,
                                       const Tensor& image) {
  Graph g;
  BoundModel m = bind_params(g, params);
  FeatureMaps maps = backbone_forward(g, g.leaf(image), cfg.backbone,
                                      m.backbone_params(cfg));
  InferenceMaps out;
  out.shallow = maps.shallow->value;
  out.deep = maps.deep->value;
  out.attention =
      attention_scores(g, maps.shallow, m.attention1(), m.attention2())->value;
  out.codes = encode(g, maps.shallow, m.encoder())->value;
  out.raw_global =
      global_descriptor(g, maps.deep, m.at("global.projection"),
                        m.at("global.bias"), cfg.gem_power)
          ->value;
  return out;
}

}  // namespace delg
