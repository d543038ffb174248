#pragma once

// Co-attention between two feature maps, and its contrastive complement.
//
// Shapes: features are C×H×W, flattened to C×HW for the affinity and the
// attention summaries. Column j of an attention matrix is a distribution over
// the positions of the *other* image, used to summarise that image at
// position j of this one.

#include <map>
#include <string>
#include <utility>

#include "coattn/autodiff.hpp"
#include "coattn/errors.hpp"
#include "coattn/rng.hpp"
#include "coattn/tensor.hpp"

namespace coattn {

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// Unordered domain-pair key: ("b", "a") and ("a", "b") both give "a|b".
inline std::string domain_pair_key(const std::string& d1, const std::string& d2) {
  return d1 <= d2 ? d1 + "|" + d2 : d2 + "|" + d1;
}

/// One C×C affinity matrix per unordered pair of domains.
struct AffinityParams {
  std::map<std::string, Tensor> by_pair;

  /// All unordered pairs over `domains` (same/same and cross), each started
  /// at the identity plus uniform noise in ±0.01.
  static AffinityParams init(const std::vector<std::string>& domains, std::size_t channels, Rng& rng) {
    if (domains.empty()) throw ConfigError("at least one domain is required");
    AffinityParams p;
    for (std::size_t i = 0; i < domains.size(); ++i)
      for (std::size_t j = i; j < domains.size(); ++j) {
        const auto key = domain_pair_key(domains[i], domains[j]);
        if (p.by_pair.count(key)) continue;
        Tensor w = Tensor::identity(channels);
        for (auto& v : w.data()) v += rng.uniform(-0.01, 0.01);
        p.by_pair.emplace(key, std::move(w));
      }
    return p;
  }

  const Tensor& lookup(const std::string& d1, const std::string& d2) const {
    auto it = by_pair.find(domain_pair_key(d1, d2));
    if (it == by_pair.end()) {
      throw ConfigError("no affinity matrix for domain pair (" + d1 + ", " + d2 + ")");
    }
    return it->second;
  }
};

/// 1×C weights of the class-agnostic gate (a 1×1 convolution without bias).
struct GateParams {
  Tensor weight;

  explicit GateParams(Tensor w) : weight(std::move(w)) {
    if (weight.rank() != 2 || weight.dim(0) != 1) {
      throw DimensionError("gate weight must be 1×C, got " + shape_string(weight.shape()));
    }
  }
};

// ---------------------------------------------------------------------------
// Differentiable operations
// ---------------------------------------------------------------------------

/// P = F_mᵀ·S·F_n with S = (W + Wᵀ)/2, for F_m, F_n of shape C×HW.
///
/// The sum runs over the upper triangle of channel pairs so that swapping the
/// two feature maps yields exactly Pᵀ.
inline Var affinity(Var fm, Var fn, Var wp) {
  detail::same_graph(fm, fn, "affinity");
  detail::same_graph(fm, wp, "affinity");
  const Tensor& Fm = fm.value();
  const Tensor& Fn = fn.value();
  const Tensor& W = wp.value();
  if (Fm.rank() != 2 || Fn.rank() != 2 || Fm.shape() != Fn.shape()) {
    throw DimensionError("affinity: feature shapes " + shape_string(Fm.shape()) + " and " +
                         shape_string(Fn.shape()) + " must both be C×HW");
  }
  const std::size_t C = Fm.dim(0), HW = Fm.dim(1);
  if (W.rank() != 2 || W.dim(0) != C || W.dim(1) != C) {
    throw DimensionError("affinity: W_P " + shape_string(W.shape()) + " does not match C=" + std::to_string(C));
  }
  Tensor S({C, C});
  for (std::size_t a = 0; a < C; ++a)
    for (std::size_t b = 0; b < C; ++b) S.at(a, b) = 0.5 * (W.at(a, b) + W.at(b, a));

  Tensor P({HW, HW});
  for (std::size_t i = 0; i < HW; ++i)
    for (std::size_t j = 0; j < HW; ++j) {
      double acc = 0.0;
      for (std::size_t a = 0; a < C; ++a) {
        acc += S.at(a, a) * (Fm.at(a, i) * Fn.at(a, j));
        for (std::size_t b = a + 1; b < C; ++b)
          acc += S.at(a, b) * (Fm.at(a, i) * Fn.at(b, j) + Fm.at(b, i) * Fn.at(a, j));
      }
      P.at(i, j) = acc;
    }

  return fm.graph->record("affinity", {fm.id, fn.id, wp.id}, std::move(P),
                          [C, HW, S = std::move(S)](Graph& g, std::size_t self) {
                            const auto& in = g.inputs(self);
                            const Tensor& G = g.grad(self);
                            const Tensor& Fm = g.value(in[0]);
                            const Tensor& Fn = g.value(in[1]);
                            if (Tensor* dFm = g.grad_sink(in[0])) {
                              // S·F_n·Gᵀ
                              Tensor SFn({C, HW});
                              for (std::size_t a = 0; a < C; ++a)
                                for (std::size_t b = 0; b < C; ++b)
                                  for (std::size_t j = 0; j < HW; ++j) SFn.at(a, j) += S.at(a, b) * Fn.at(b, j);
                              for (std::size_t a = 0; a < C; ++a)
                                for (std::size_t i = 0; i < HW; ++i) {
                                  double s = 0.0;
                                  for (std::size_t j = 0; j < HW; ++j) s += SFn.at(a, j) * G.at(i, j);
                                  dFm->at(a, i) += s;
                                }
                            }
                            if (Tensor* dFn = g.grad_sink(in[1])) {
                              // S·F_m·G
                              Tensor SFm({C, HW});
                              for (std::size_t a = 0; a < C; ++a)
                                for (std::size_t b = 0; b < C; ++b)
                                  for (std::size_t i = 0; i < HW; ++i) SFm.at(a, i) += S.at(a, b) * Fm.at(b, i);
                              for (std::size_t b = 0; b < C; ++b)
                                for (std::size_t i = 0; i < HW; ++i) {
                                  const double v = SFm.at(b, i);
                                  for (std::size_t j = 0; j < HW; ++j) dFn->at(b, j) += v * G.at(i, j);
                                }
                            }
                            if (Tensor* dW = g.grad_sink(in[2])) {
                              // dS = F_m·G·F_nᵀ, then symmetrised.
                              Tensor FmG({C, HW});
                              for (std::size_t a = 0; a < C; ++a)
                                for (std::size_t i = 0; i < HW; ++i) {
                                  const double v = Fm.at(a, i);
                                  for (std::size_t j = 0; j < HW; ++j) FmG.at(a, j) += v * G.at(i, j);
                                }
                              Tensor dS({C, C});
                              for (std::size_t a = 0; a < C; ++a)
                                for (std::size_t b = 0; b < C; ++b) {
                                  double s = 0.0;
                                  for (std::size_t j = 0; j < HW; ++j) s += FmG.at(a, j) * Fn.at(b, j);
                                  dS.at(a, b) = s;
                                }
                              for (std::size_t a = 0; a < C; ++a)
                                for (std::size_t b = 0; b < C; ++b) dW->at(a, b) += 0.5 * (dS.at(a, b) + dS.at(b, a));
                            }
                          });
}

struct CoAttentionMaps {
  Var attn_m;  ///< softmax_columns(P): column j weights F_m positions for F_n position j
  Var attn_n;  ///< softmax_columns(Pᵀ): column j weights F_n positions for F_m position j
};

inline CoAttentionMaps coattention_maps(Var p) {
  const Tensor& P = p.value();
  if (P.rank() != 2 || P.dim(0) != P.dim(1)) {
    throw DimensionError("coattention_maps: affinity must be square, got " + shape_string(P.shape()));
  }
  return {softmax_columns(p), softmax_columns(transpose(p))};
}

struct AttentionSummaries {
  Var coatt_m;  ///< F_n·A_n as C×H×W, aligned with F_m positions
  Var coatt_n;  ///< F_m·A_m as C×H×W, aligned with F_n positions
};

/// Attention summaries of each image at the positions of the other.
inline AttentionSummaries attention_summaries(Var fm, Var fn, Var attn_m, Var attn_n, std::size_t height,
                                              std::size_t width) {
  const Tensor& Fm = fm.value();
  const Tensor& Fn = fn.value();
  if (Fm.rank() != 2 || Fm.shape() != Fn.shape() || Fm.dim(1) != height * width) {
    throw DimensionError("attention_summaries: features " + shape_string(Fm.shape()) + " / " +
                         shape_string(Fn.shape()) + " do not match " + std::to_string(height) + "x" +
                         std::to_string(width));
  }
  const std::size_t HW = height * width;
  for (Var a : {attn_m, attn_n}) {
    if (a.shape() != Shape{HW, HW}) {
      throw DimensionError("attention_summaries: attention map " + shape_string(a.shape()) + " is not " +
                           std::to_string(HW) + "x" + std::to_string(HW));
    }
  }
  const std::size_t C = Fm.dim(0);
  return {reshape(matmul(fn, attn_n), {C, height, width}), reshape(matmul(fm, attn_m), {C, height, width})};
}

/// σ(W_B·F) per pixel, F of shape C×H×W, W_B of shape 1×C.
inline Var class_agnostic_gate(Var f_co, Var wb) {
  const Tensor& F = f_co.value();
  const Tensor& W = wb.value();
  if (F.rank() != 3 || W.rank() != 2 || W.dim(0) != 1 || W.dim(1) != F.dim(0)) {
    throw DimensionError("class_agnostic_gate: weight " + shape_string(W.shape()) + " does not match features " +
                         shape_string(F.shape()));
  }
  const std::size_t C = F.dim(0), H = F.dim(1), Wd = F.dim(2);
  return sigmoid(reshape(matmul(wb, reshape(f_co, {C, H * Wd})), {H, Wd}));
}

/// 1 − B. Inputs outside [0, 1] are a caller error.
inline Var contrastive_attention(Var gate) {
  for (double v : gate.value().data()) {
    if (!(v >= 0.0 && v <= 1.0)) throw ContractError("contrastive_attention: gate value outside [0,1]");
  }
  return one_minus(gate);
}

/// Own-image features weighted by the contrastive attention, repeated over channels.
inline Var contrastive_features(Var f, Var attn) { return mul_broadcast(f, attn); }

struct CoAttnOutput {
  Var affinity;
  Var attn_m, attn_n;
  Var coatt_m, coatt_n;        ///< common-semantics features of each image
  Var gate_m, gate_n;          ///< class-agnostic co-attention
  Var contrast_m, contrast_n;  ///< unshared-semantics features of each image
};

/// Full pairwise pass: affinity, co-attention, summaries, gates, contrastive features.
inline CoAttnOutput forward_pair(Var fm, Var fn, Var wp, Var wb) {
  const Tensor& Fm = fm.value();
  const Tensor& Fn = fn.value();
  if (Fm.rank() != 3 || Fm.shape() != Fn.shape()) {
    throw DimensionError("forward_pair: feature maps " + shape_string(Fm.shape()) + " and " +
                         shape_string(Fn.shape()) + " must share C×H×W");
  }
  const std::size_t C = Fm.dim(0), H = Fm.dim(1), W = Fm.dim(2);
  Var fm_flat = reshape(fm, {C, H * W});
  Var fn_flat = reshape(fn, {C, H * W});

  CoAttnOutput out;
  out.affinity = affinity(fm_flat, fn_flat, wp);
  auto maps = coattention_maps(out.affinity);
  out.attn_m = maps.attn_m;
  out.attn_n = maps.attn_n;
  auto sums = attention_summaries(fm_flat, fn_flat, maps.attn_m, maps.attn_n, H, W);
  out.coatt_m = sums.coatt_m;
  out.coatt_n = sums.coatt_n;
  out.gate_m = class_agnostic_gate(out.coatt_m, wb);
  out.gate_n = class_agnostic_gate(out.coatt_n, wb);
  out.contrast_m = contrastive_features(fm, contrastive_attention(out.gate_m));
  out.contrast_n = contrastive_features(fn, contrastive_attention(out.gate_n));
  return out;
}

/// Domain-aware overload: W_P chosen by unordered domain-pair lookup.
inline CoAttnOutput forward_pair(Var fm, Var fn, const std::string& domain_m, const std::string& domain_n,
                                 const std::map<std::string, Var>& affinity_by_pair, Var wb) {
  auto it = affinity_by_pair.find(domain_pair_key(domain_m, domain_n));
  if (it == affinity_by_pair.end()) {
    throw ConfigError("no affinity matrix for domain pair (" + domain_m + ", " + domain_n + ")");
  }
  return forward_pair(fm, fn, it->second, wb);
}

}  // namespace coattn
