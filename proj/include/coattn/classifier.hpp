#pragma once

// Pair classifier: a small strided conv backbone, the class-aware 1×1 layer,
// GAP scoring and the three pairwise loss terms.

#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "coattn/autodiff.hpp"
#include "coattn/coattention.hpp"
#include "coattn/errors.hpp"
#include "coattn/labels.hpp"
#include "coattn/rng.hpp"
#include "coattn/sample.hpp"
#include "coattn/tensor.hpp"

namespace coattn {

struct ModelConfig {
  std::size_t num_classes = 5;
  std::vector<std::size_t> channels{16, 32, 32};  ///< output channels of each stride-2 block
  std::vector<std::string> domains{"target"};

  std::size_t feature_channels() const { return channels.back(); }
  std::size_t downsample() const { return std::size_t{1} << channels.size(); }
};

struct BackboneParams {
  std::vector<Tensor> kernels;  ///< Cout×Cin×3×3
  std::vector<Tensor> biases;   ///< Cout
};

struct ClassLayerParams {
  Tensor weight;  ///< K×C×1×1
  Tensor bias;    ///< K
};

struct ModelParams {
  BackboneParams backbone;
  ClassLayerParams classifier;
  AffinityParams affinity;
  GateParams gate{Tensor({1, 1})};

  std::size_t num_classes() const { return classifier.weight.dim(0); }
  std::size_t feature_channels() const { return classifier.weight.dim(1); }

  /// Stable name → tensor listing; the order used by checkpoints and the optimizer.
  std::vector<std::pair<std::string, const Tensor*>> named() const {
    std::vector<std::pair<std::string, const Tensor*>> out;
    for (std::size_t i = 0; i < backbone.kernels.size(); ++i) {
      out.emplace_back("backbone.conv" + std::to_string(i + 1) + ".weight", &backbone.kernels[i]);
      out.emplace_back("backbone.conv" + std::to_string(i + 1) + ".bias", &backbone.biases[i]);
    }
    out.emplace_back("classifier.weight", &classifier.weight);
    out.emplace_back("classifier.bias", &classifier.bias);
    out.emplace_back("gate.weight", &gate.weight);
    for (const auto& [key, w] : affinity.by_pair) out.emplace_back("affinity." + key, &w);
    return out;
  }

  std::vector<Tensor*> mutable_tensors() {
    std::vector<Tensor*> out;
    for (std::size_t i = 0; i < backbone.kernels.size(); ++i) {
      out.push_back(&backbone.kernels[i]);
      out.push_back(&backbone.biases[i]);
    }
    out.push_back(&classifier.weight);
    out.push_back(&classifier.bias);
    out.push_back(&gate.weight);
    for (auto& [key, w] : affinity.by_pair) out.push_back(&w);
    return out;
  }
};

namespace detail {

inline Tensor xavier_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng, double gain = 1.0) {
  const double bound = gain * std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(-bound, bound);
  return t;
}

}  // namespace detail

/// Xavier-uniform weights (ReLU gain √2 on backbone kernels), zero biases, W_P near identity.
inline ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
  if (cfg.channels.empty()) throw ConfigError("backbone needs at least one block");
  if (cfg.num_classes < 1) throw ConfigError("num_classes must be positive");
  Rng rng(seed);
  ModelParams p;
  std::size_t cin = 3;
  for (std::size_t cout : cfg.channels) {
    if (cout == 0) throw ConfigError("backbone channel count must be positive");
    p.backbone.kernels.push_back(detail::xavier_uniform({cout, cin, 3, 3}, cin * 9, cout * 9, rng, std::sqrt(2.0)));
    p.backbone.biases.emplace_back(Shape{cout});
    cin = cout;
  }
  const std::size_t C = cfg.feature_channels();
  const std::size_t K = cfg.num_classes;
  p.classifier.weight = detail::xavier_uniform({K, C, 1, 1}, C, K, rng);
  p.classifier.bias = Tensor({K});
  p.gate = GateParams(detail::xavier_uniform({1, C}, C, 1, rng));
  p.affinity = AffinityParams::init(cfg.domains, C, rng);
  return p;
}

/// Parameters registered as leaves of one graph.
struct BoundParams {
  std::vector<Var> kernels, biases;
  Var class_weight, class_bias;
  Var gate;
  std::map<std::string, Var> affinity;

  /// Same order as ModelParams::named().
  std::vector<Var> ordered() const {
    std::vector<Var> out;
    for (std::size_t i = 0; i < kernels.size(); ++i) {
      out.push_back(kernels[i]);
      out.push_back(biases[i]);
    }
    out.push_back(class_weight);
    out.push_back(class_bias);
    out.push_back(gate);
    for (const auto& [key, v] : affinity) out.push_back(v);
    return out;
  }
};

/// Registers every parameter on `g`, as trainable leaves or as constants.
inline BoundParams bind(Graph& g, const ModelParams& p, bool trainable = true) {
  auto leaf = [&](const Tensor& t) { return trainable ? g.parameter(t) : g.constant(t); };
  BoundParams b;
  for (std::size_t i = 0; i < p.backbone.kernels.size(); ++i) {
    b.kernels.push_back(leaf(p.backbone.kernels[i]));
    b.biases.push_back(leaf(p.backbone.biases[i]));
  }
  b.class_weight = leaf(p.classifier.weight);
  b.class_bias = leaf(p.classifier.bias);
  b.gate = leaf(p.gate.weight);
  for (const auto& [key, w] : p.affinity.by_pair) b.affinity.emplace(key, leaf(w));
  return b;
}

/// Gradients of every bound parameter, in ModelParams::named() order.
inline std::vector<Tensor> collect_gradients(const Graph& g, const BoundParams& b) {
  std::vector<Tensor> out;
  for (Var v : b.ordered()) out.push_back(g.grad(v));
  return out;
}

// ---------------------------------------------------------------------------
// Forward pieces
// ---------------------------------------------------------------------------

/// Subtracts from every pixel the mean of its own channels, leaving the
/// chroma. Uncentred [0, 1] inputs push every first-layer unit the same way
/// and stall early training; a per-pixel shift keeps the input local.
inline Var center_channels(Var image) {
  const Tensor& X = image.value();
  const std::size_t C = X.dim(0), HW = X.dim(1) * X.dim(2);
  Tensor Y = X;
  for (std::size_t p = 0; p < HW; ++p) {
    double mean = 0.0;
    for (std::size_t c = 0; c < C; ++c) mean += X[c * HW + p];
    mean /= static_cast<double>(C);
    for (std::size_t c = 0; c < C; ++c) Y[c * HW + p] -= mean;
  }
  return image.graph->record("center_channels", {image.id}, std::move(Y), [C, HW](Graph& g, std::size_t self) {
    const Tensor& G = g.grad(self);
    Tensor* dX = g.grad_sink(g.inputs(self)[0]);
    for (std::size_t p = 0; p < HW; ++p) {
      double mean = 0.0;
      for (std::size_t c = 0; c < C; ++c) mean += G[c * HW + p];
      mean /= static_cast<double>(C);
      for (std::size_t c = 0; c < C; ++c) (*dX)[c * HW + p] += G[c * HW + p] - mean;
    }
  });
}

/// Per-pixel centring, then stride-2 3×3 conv blocks with ReLU.
/// 3×H0×W0 → C×(H0/2^n)×(W0/2^n).
inline Var embed(Var image, const BoundParams& bp) {
  const Tensor& X = image.value();
  const std::size_t factor = std::size_t{1} << bp.kernels.size();
  if (X.rank() != 3 || X.dim(0) != 3) throw DimensionError("embed: expected 3×H×W image, got " + shape_string(X.shape()));
  if (X.dim(1) % factor != 0 || X.dim(2) % factor != 0) {
    throw DimensionError("embed: image " + shape_string(X.shape()) + " not divisible by " + std::to_string(factor));
  }
  Var h = center_channels(image);
  for (std::size_t i = 0; i < bp.kernels.size(); ++i) h = relu(add_channel_bias(conv2d(h, bp.kernels[i], 2, 1), bp.biases[i]));
  return h;
}

/// S = φ(F): 1×1 convolution with bias, C×H×W → K×H×W.
inline Var class_maps(Var features, Var weight, Var bias) {
  if (features.value().rank() != 3 || weight.value().rank() != 4 || weight.value().dim(1) != features.value().dim(0)) {
    throw DimensionError("class_maps: features " + shape_string(features.shape()) + " vs class layer " +
                         shape_string(weight.shape()));
  }
  return add_channel_bias(conv2d(features, weight, 1, 0), bias);
}

inline Var class_maps(Var features, const BoundParams& bp) { return class_maps(features, bp.class_weight, bp.class_bias); }

/// Mean-over-K sigmoid cross entropy against a label vector.
inline Var sigmoid_ce(Var scores, const LabelVector& target) { return sigmoid_cross_entropy(scores, target.as_targets()); }

/// CE(GAP(S_m), l_m) + CE(GAP(S_n), l_n).
inline Var loss_basic(Var s_maps_m, Var s_maps_n, const LabelVector& lm, const LabelVector& ln) {
  return add(sigmoid_ce(gap(s_maps_m), lm), sigmoid_ce(gap(s_maps_n), ln));
}

/// Both co-attentive score vectors against l_m ∩ l_n.
inline Var loss_coatt(Var s_co_m, Var s_co_n, const LabelVector& lm, const LabelVector& ln) {
  const LabelVector common = intersect(lm, ln);
  return add(sigmoid_ce(gap(s_co_m), common), sigmoid_ce(gap(s_co_n), common));
}

/// Contrastive score vectors against l_m \ l_n and l_n \ l_m.
inline Var loss_contrast(Var s_ex_m, Var s_ex_n, const LabelVector& lm, const LabelVector& ln) {
  return add(sigmoid_ce(gap(s_ex_m), subtract(lm, ln)), sigmoid_ce(gap(s_ex_n), subtract(ln, lm)));
}

struct LossTerms {
  bool basic = true;
  bool coatt = true;
  bool contrast = true;

  bool any() const { return basic || coatt || contrast; }
  friend bool operator==(const LossTerms&, const LossTerms&) = default;
};

struct PairLossBreakdown {
  double basic = 0.0;
  double coatt = 0.0;
  double contrast = 0.0;
  double total = 0.0;  ///< sum of the enabled terms
  Tensor score_m, score_n;              ///< s_m, s_n
  Tensor score_co_m, score_co_n;        ///< s^{m∩n}_m, s^{m∩n}_n
  Tensor score_ex_m, score_ex_n;        ///< s^{m\n}_m, s^{n\m}_n
};

struct PairForward {
  PairLossBreakdown breakdown;
  Var total;              ///< valid only when has_loss
  bool has_loss = false;
};

/// Full pairwise objective on an existing graph. All three terms are always
/// evaluated for reporting; only the enabled ones enter `total`.
inline PairForward loss_total(Graph& g, const BoundParams& bp, const ImageSample& m, const ImageSample& n,
                              LossTerms terms = {}) {
  if (m.labels.size() != n.labels.size()) throw DimensionError("loss_total: label lengths differ");
  Var fm = embed(g.constant(m.pixels), bp);
  Var fn = embed(g.constant(n.pixels), bp);
  if (fm.shape() != fn.shape()) throw DimensionError("loss_total: paired images must share a size");
  const CoAttnOutput co = forward_pair(fm, fn, m.domain, n.domain, bp.affinity, bp.gate);

  Var sm = class_maps(fm, bp), sn = class_maps(fn, bp);
  Var s_co_m = class_maps(co.coatt_m, bp), s_co_n = class_maps(co.coatt_n, bp);
  Var s_ex_m = class_maps(co.contrast_m, bp), s_ex_n = class_maps(co.contrast_n, bp);

  Var l_basic = loss_basic(sm, sn, m.labels, n.labels);
  Var l_coatt = loss_coatt(s_co_m, s_co_n, m.labels, n.labels);
  Var l_contrast = loss_contrast(s_ex_m, s_ex_n, m.labels, n.labels);

  PairForward out;
  auto& b = out.breakdown;
  b.basic = l_basic.value().item();
  b.coatt = l_coatt.value().item();
  b.contrast = l_contrast.value().item();
  auto scores = [](Var maps) { return gap(maps).value(); };
  b.score_m = scores(sm);
  b.score_n = scores(sn);
  b.score_co_m = scores(s_co_m);
  b.score_co_n = scores(s_co_n);
  b.score_ex_m = scores(s_ex_m);
  b.score_ex_n = scores(s_ex_n);

  auto include = [&](bool on, Var term) {
    if (!on) return;
    out.total = out.has_loss ? add(out.total, term) : term;
    out.has_loss = true;
  };
  include(terms.basic, l_basic);
  include(terms.coatt, l_coatt);
  include(terms.contrast, l_contrast);
  b.total = out.has_loss ? out.total.value().item() : 0.0;
  return out;
}

/// Convenience wrapper: forward only, parameters bound as constants.
inline PairLossBreakdown evaluate_pair(const ModelParams& p, const ImageSample& m, const ImageSample& n,
                                       LossTerms terms = {}) {
  Graph g;
  const BoundParams bp = bind(g, p, false);
  return loss_total(g, bp, m, n, terms).breakdown;
}

/// Single-image class scores GAP(φ(embed(x))).
inline Tensor image_scores(const ModelParams& p, const Tensor& pixels) {
  Graph g;
  const BoundParams bp = bind(g, p, false);
  return gap(class_maps(embed(g.constant(pixels), bp), bp)).value();
}

// ---------------------------------------------------------------------------
// Checkpoints: "COATTN1" then (u32 name length, name bytes, tensor) records to EOF.
// ---------------------------------------------------------------------------

inline constexpr char kCheckpointMagic[] = "COATTN1";

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

inline void write_named_tensors(const std::string& path, const NamedTensors& tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("cannot open " + path + " for writing");
  os.write(kCheckpointMagic, 7);
  for (const auto& [name, t] : tensors) {
    detail::put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tensor(os, t);
  }
  if (!os) throw CheckpointError("write failed for " + path);
}

inline NamedTensors read_named_tensors(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path);
  char magic[7];
  if (!is.read(magic, 7) || std::string(magic, 7) != kCheckpointMagic) {
    throw CheckpointError("bad checkpoint magic in " + path);
  }
  NamedTensors out;
  while (is.peek() != std::char_traits<char>::eof()) {
    try {
      const std::uint32_t len = detail::get_u32(is);
      if (len == 0 || len > 4096) throw CheckpointError("bad tensor name length in " + path);
      std::string name(len, '\0');
      if (!is.read(name.data(), len)) throw CheckpointError("truncated tensor name in " + path);
      out.emplace_back(std::move(name), read_tensor(is));
    } catch (const ParseError& e) {
      throw CheckpointError(std::string("corrupt checkpoint ") + path + ": " + e.what());
    }
  }
  return out;
}

inline NamedTensors named_copy(const ModelParams& p) {
  NamedTensors out;
  for (const auto& [name, t] : p.named()) out.emplace_back(name, *t);
  return out;
}

/// Rebuilds parameters from named tensors; channel counts, K and domains follow the shapes and keys.
inline ModelParams params_from_named(const NamedTensors& tensors) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : tensors) by_name[name] = &t;
  auto need = [&](const std::string& name) -> const Tensor& {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw CheckpointError("checkpoint missing tensor " + name);
    return *it->second;
  };
  ModelParams p;
  for (std::size_t i = 1; by_name.count("backbone.conv" + std::to_string(i) + ".weight"); ++i) {
    p.backbone.kernels.push_back(need("backbone.conv" + std::to_string(i) + ".weight"));
    p.backbone.biases.push_back(need("backbone.conv" + std::to_string(i) + ".bias"));
  }
  if (p.backbone.kernels.empty()) throw CheckpointError("checkpoint has no backbone");
  p.classifier.weight = need("classifier.weight");
  p.classifier.bias = need("classifier.bias");
  p.gate = GateParams(need("gate.weight"));
  for (const auto& [name, t] : by_name) {
    if (name.rfind("affinity.", 0) == 0) p.affinity.by_pair.emplace(name.substr(9), *t);
  }
  if (p.affinity.by_pair.empty()) throw CheckpointError("checkpoint has no affinity matrices");

  // Shape consistency across the chain.
  std::size_t cin = 3;
  for (std::size_t i = 0; i < p.backbone.kernels.size(); ++i) {
    const Tensor& k = p.backbone.kernels[i];
    if (k.rank() != 4 || k.dim(1) != cin || k.dim(2) != 3 || k.dim(3) != 3 || p.backbone.biases[i].shape() != Shape{k.dim(0)}) {
      throw CheckpointError("inconsistent backbone block " + std::to_string(i + 1));
    }
    cin = k.dim(0);
  }
  const Tensor& w = p.classifier.weight;
  if (w.rank() != 4 || w.dim(1) != cin || p.classifier.bias.shape() != Shape{w.dim(0)} ||
      p.gate.weight.shape() != Shape{1, cin}) {
    throw CheckpointError("inconsistent classifier or gate shapes");
  }
  for (const auto& [key, m] : p.affinity.by_pair) {
    if (m.shape() != Shape{cin, cin}) throw CheckpointError("affinity matrix " + key + " is not CxC");
  }
  return p;
}

inline void save_checkpoint(const std::string& path, const ModelParams& p, const NamedTensors& extra = {}) {
  NamedTensors all = named_copy(p);
  all.insert(all.end(), extra.begin(), extra.end());
  write_named_tensors(path, all);
}

inline ModelParams load_checkpoint(const std::string& path) { return params_from_named(read_named_tensors(path)); }

/// Domains mentioned by the affinity keys, sorted.
inline std::vector<std::string> domains_of(const ModelParams& p) {
  std::set<std::string> ds;
  for (const auto& [key, w] : p.affinity.by_pair) {
    const auto bar = key.find('|');
    ds.insert(key.substr(0, bar));
    ds.insert(key.substr(bar + 1));
  }
  return {ds.begin(), ds.end()};
}

}  // namespace coattn
