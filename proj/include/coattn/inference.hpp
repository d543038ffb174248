#pragma once

// Localization maps (single-round and multi-round co-attentive) and their
// conversion to pseudo segmentation masks.

#include <algorithm>
#include <cmath>
#include <exception>
#include <map>
#include <string>
#include <thread>
#include <vector>

#include "coattn/classifier.hpp"
#include "coattn/coattention.hpp"
#include "coattn/errors.hpp"
#include "coattn/rng.hpp"
#include "coattn/sample.hpp"
#include "coattn/synth_data.hpp"

namespace coattn {

enum class Strategy { SingleRound, MultiRound };

inline const char* strategy_name(Strategy s) { return s == Strategy::SingleRound ? "single" : "multi"; }

inline Strategy parse_strategy(const std::string& s) {
  if (s == "single") return Strategy::SingleRound;
  if (s == "multi") return Strategy::MultiRound;
  throw ConfigError("unknown strategy '" + s + "' (single | multi)");
}

struct InferConfig {
  Strategy strategy = Strategy::MultiRound;
  std::size_t related = 3;  ///< R
  double theta = 0.2;       ///< background threshold
  std::uint64_t seed = 0;

  void validate() const {
    if (!(theta >= 0.0 && theta < 1.0)) throw ConfigError("theta must lie in [0, 1)");
  }
};

/// K×H×W maps in [0, 1]; channels of classes not labelled on the image are zero.
struct LocalizationMap {
  Tensor maps;
  std::string strategy;
  std::vector<std::string> related_ids;  ///< reference images used, in draw order
};

/// ReLU, then divide every channel by its maximum; unlabelled channels are zeroed.
inline Tensor normalize_maps(Tensor maps, const LabelVector* labels) {
  const std::size_t K = maps.dim(0), HW = maps.dim(1) * maps.dim(2);
  if (labels && labels->size() != K) throw DimensionError("normalize_maps: label length differs from map count");
  for (std::size_t k = 0; k < K; ++k) {
    auto ch = maps.data().subspan(k * HW, HW);
    if (labels && !labels->test(k)) {
      std::fill(ch.begin(), ch.end(), 0.0);
      continue;
    }
    double mx = 0.0;
    for (auto& v : ch) {
      v = std::max(v, 0.0);
      mx = std::max(mx, v);
    }
    if (mx > 0.0)
      for (auto& v : ch) v /= mx;
  }
  return maps;
}

/// Raw class-aware activation maps φ(embed(x)).
inline Tensor raw_class_maps(const ModelParams& params, const Tensor& pixels) {
  Graph g;
  const BoundParams bp = bind(g, params, false);
  return class_maps(embed(g.constant(pixels), bp), bp).value();
}

/// Raw feature map embed(x).
inline Tensor features_of(const ModelParams& params, const Tensor& pixels) {
  Graph g;
  const BoundParams bp = bind(g, params, false);
  return embed(g.constant(pixels), bp).value();
}

/// φ of the co-attentive feature of the query against one reference image:
/// the reference summarised at every query position.
inline Tensor coattentive_class_maps(const ModelParams& params, const Tensor& query_features,
                                     const std::string& query_domain, const Tensor& ref_features,
                                     const std::string& ref_domain) {
  Graph g;
  const BoundParams bp = bind(g, params, false);
  const std::size_t C = query_features.dim(0), H = query_features.dim(1), W = query_features.dim(2);
  Var fq = g.constant(query_features.reshaped({C, H * W}));
  Var fr = g.constant(ref_features.reshaped({C, H * W}));
  auto it = bp.affinity.find(domain_pair_key(query_domain, ref_domain));
  if (it == bp.affinity.end()) {
    throw ConfigError("no affinity matrix for domain pair (" + query_domain + ", " + ref_domain + ")");
  }
  const CoAttentionMaps maps = coattention_maps(affinity(fq, fr, it->second));
  const AttentionSummaries sums = attention_summaries(fq, fr, maps.attn_m, maps.attn_n, H, W);
  return class_maps(sums.coatt_m, bp).value();
}

inline LocalizationMap infer_single(const ModelParams& params, const Tensor& pixels, const LabelVector* labels = nullptr) {
  return {normalize_maps(raw_class_maps(params, pixels), labels), "single", {}};
}

/// Per labelled class k: average the co-attentive maps of the query against up
/// to R related images carrying k, then normalise once. Classes with no
/// related image keep the single-round channel. Contrastive co-attention is
/// not involved.
inline LocalizationMap infer_multi(const ModelParams& params, const ImageSample& query, const LabelVector& labels,
                                   const std::vector<ImageSample>& pool, const InferConfig& cfg) {
  const std::size_t K = params.num_classes();
  if (labels.size() != K) throw ContractError("infer_multi: labels must cover all " + std::to_string(K) + " classes");
  Rng rng(mix_seed(cfg.seed, fnv1a(query.id)));
  const Tensor fq = features_of(params, query.pixels);
  Tensor raw = raw_class_maps(params, query.pixels);
  const std::size_t HW = raw.dim(1) * raw.dim(2);
  std::map<std::string, Tensor> ref_features;

  LocalizationMap out;
  out.strategy = "multi";
  ImageSample probe;
  probe.id = query.id;
  probe.labels = labels;
  for (std::size_t k = 0; k < K; ++k) {
    if (!labels.test(k)) continue;
    const auto refs = related_images(pool, probe, k, cfg.related, rng);
    if (refs.empty()) continue;
    std::vector<double> acc(HW, 0.0);
    for (const ImageSample* r : refs) {
      auto [it, fresh] = ref_features.try_emplace(r->id);
      if (fresh) it->second = features_of(params, r->pixels);
      const Tensor s = coattentive_class_maps(params, fq, query.domain, it->second, r->domain);
      for (std::size_t p = 0; p < HW; ++p) acc[p] += s[k * HW + p];
      out.related_ids.push_back(r->id);
    }
    for (std::size_t p = 0; p < HW; ++p) raw[k * HW + p] = acc[p] / static_cast<double>(refs.size());
  }
  out.maps = normalize_maps(std::move(raw), &labels);
  return out;
}

inline LocalizationMap infer(const ModelParams& params, const ImageSample& query, const std::vector<ImageSample>& pool,
                             const InferConfig& cfg) {
  cfg.validate();
  if (cfg.strategy == Strategy::SingleRound) return infer_single(params, query.pixels, &query.labels);
  return infer_multi(params, query, query.labels, pool, cfg);
}

/// Bilinear resize of one H×W channel (half-pixel centres, edge clamped).
inline Tensor upsample_bilinear(const Tensor& map, std::size_t out_h, std::size_t out_w) {
  if (map.rank() != 2) throw DimensionError("upsample_bilinear: expected H×W, got " + shape_string(map.shape()));
  const std::size_t H = map.dim(0), W = map.dim(1);
  Tensor out({out_h, out_w});
  auto coord = [](std::size_t o, std::size_t in, std::size_t out_n) {
    const double c = (static_cast<double>(o) + 0.5) * static_cast<double>(in) / static_cast<double>(out_n) - 0.5;
    return std::clamp(c, 0.0, static_cast<double>(in - 1));
  };
  for (std::size_t y = 0; y < out_h; ++y) {
    const double sy = coord(y, H, out_h);
    const auto y0 = static_cast<std::size_t>(std::floor(sy));
    const std::size_t y1 = std::min(y0 + 1, H - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double sx = coord(x, W, out_w);
      const auto x0 = static_cast<std::size_t>(std::floor(sx));
      const std::size_t x1 = std::min(x0 + 1, W - 1);
      const double fx = sx - static_cast<double>(x0);
      const double top = map.at(y0, x0) * (1.0 - fx) + map.at(y0, x1) * fx;
      const double bot = map.at(y1, x0) * (1.0 - fx) + map.at(y1, x1) * fx;
      out.at(y, x) = top * (1.0 - fy) + bot * fy;
    }
  }
  return out;
}

inline Tensor channel(const Tensor& maps, std::size_t k) {
  const std::size_t H = maps.dim(1), W = maps.dim(2);
  std::vector<double> d(maps.data().begin() + static_cast<std::ptrdiff_t>(k * H * W),
                        maps.data().begin() + static_cast<std::ptrdiff_t>((k + 1) * H * W));
  return Tensor({H, W}, std::move(d));
}

/// Upsampled maps → per-pixel argmax over labelled classes (ties to the lowest
/// class), background where that maximum does not exceed theta.
inline Mask to_pseudo_mask(const Tensor& maps, const LabelVector& labels, double theta, std::size_t out_h,
                           std::size_t out_w) {
  if (!(theta >= 0.0 && theta < 1.0)) throw ConfigError("theta must lie in [0, 1)");
  if (maps.rank() != 3 || maps.dim(0) != labels.size()) {
    throw DimensionError("to_pseudo_mask: maps " + shape_string(maps.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  }
  std::vector<std::pair<std::size_t, Tensor>> up;
  for (std::size_t k = 0; k < labels.size(); ++k)
    if (labels.test(k)) up.emplace_back(k, upsample_bilinear(channel(maps, k), out_h, out_w));
  Mask mask(out_h, out_w);
  for (std::size_t y = 0; y < out_h; ++y)
    for (std::size_t x = 0; x < out_w; ++x) {
      double best = -1.0;
      std::size_t best_k = 0;
      for (const auto& [k, m] : up) {
        if (m.at(y, x) > best) {
          best = m.at(y, x);
          best_k = k;
        }
      }
      if (!up.empty() && best > theta) mask.at(y, x) = static_cast<std::uint8_t>(best_k + 1);
    }
  return mask;
}

struct InferenceResult {
  LocalizationMap map;
  Mask mask;
};

/// Inference over many images on `jobs` threads. Each image draws related
/// images from its own seeded stream, so the output is independent of `jobs`.
inline std::vector<InferenceResult> infer_all(const ModelParams& params, const std::vector<ImageSample>& queries,
                                              const std::vector<ImageSample>& pool, const InferConfig& cfg,
                                              std::size_t jobs = 1) {
  cfg.validate();
  std::vector<InferenceResult> out(queries.size());
  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const auto& q = queries[i];
      out[i].map = infer(params, q, pool, cfg);
      out[i].mask = to_pseudo_mask(out[i].map.maps, q.labels, cfg.theta, q.height(), q.width());
    }
  };
  jobs = std::max<std::size_t>(1, std::min(jobs, queries.size()));
  if (jobs == 1) {
    work(0, queries.size());
    return out;
  }
  std::vector<std::thread> threads;
  std::vector<std::exception_ptr> errors(jobs);
  const std::size_t chunk = (queries.size() + jobs - 1) / jobs;
  for (std::size_t t = 0; t < jobs; ++t) {
    const std::size_t b = t * chunk, e = std::min(queries.size(), b + chunk);
    if (b < e) threads.emplace_back([&, t, b, e] {
      try {
        work(b, e);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : threads) th.join();
  for (const auto& err : errors)
    if (err) std::rethrow_exception(err);
  return out;
}

}  // namespace coattn
