#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "coattn/classifier.hpp"
#include "coattn/errors.hpp"
#include "coattn/labels.hpp"
#include "coattn/sample.hpp"

namespace coattn {

/// Per-class intersection / union counts over classes 0..K (0 = background).
/// A pixel that is 255 in either mask is skipped.
class ConfusionAccumulator {
 public:
  explicit ConfusionAccumulator(std::size_t num_classes)
      : intersection_(num_classes + 1, 0), union_(num_classes + 1, 0), gt_pixels_(num_classes + 1, 0) {}

  void add(const Mask& pred, const Mask& gt) {
    if (pred.height != gt.height || pred.width != gt.width) {
      throw DimensionError("miou: prediction " + std::to_string(pred.height) + "x" + std::to_string(pred.width) +
                           " vs ground truth " + std::to_string(gt.height) + "x" + std::to_string(gt.width));
    }
    const std::size_t L = intersection_.size();
    for (std::size_t i = 0; i < gt.pixels.size(); ++i) {
      const std::uint8_t p = pred.pixels[i], t = gt.pixels[i];
      if (p == kIgnore || t == kIgnore) continue;
      if (p >= L || t >= L) throw ContractError("mask value exceeds class count");
      ++gt_pixels_[t];
      if (p == t) {
        ++intersection_[t];
        ++union_[t];
      } else {
        ++union_[p];
        ++union_[t];
      }
    }
  }

  void merge(const ConfusionAccumulator& other) {
    if (other.intersection_.size() != intersection_.size()) throw DimensionError("merging accumulators of different K");
    for (std::size_t k = 0; k < intersection_.size(); ++k) {
      intersection_[k] += other.intersection_[k];
      union_[k] += other.union_[k];
      gt_pixels_[k] += other.gt_pixels_[k];
    }
  }

  std::size_t num_labels() const { return intersection_.size(); }
  std::uint64_t intersection(std::size_t k) const { return intersection_.at(k); }
  std::uint64_t union_count(std::size_t k) const { return union_.at(k); }
  std::uint64_t gt_pixels(std::size_t k) const { return gt_pixels_.at(k); }

  friend bool operator==(const ConfusionAccumulator&, const ConfusionAccumulator&) = default;

 private:
  std::vector<std::uint64_t> intersection_, union_, gt_pixels_;
};

struct MiouResult {
  std::vector<std::optional<double>> per_class;  ///< index 0 = background; empty when absent from both masks
  double mean = 0.0;                             ///< over classes with a non-empty union
};

inline MiouResult miou(const ConfusionAccumulator& acc) {
  MiouResult r;
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t k = 0; k < acc.num_labels(); ++k) {
    if (acc.union_count(k) == 0) {
      r.per_class.emplace_back();
      continue;
    }
    const double iou = static_cast<double>(acc.intersection(k)) / static_cast<double>(acc.union_count(k));
    r.per_class.emplace_back(iou);
    total += iou;
    ++n;
  }
  r.mean = n ? total / static_cast<double>(n) : 0.0;
  return r;
}

inline MiouResult miou(const std::vector<Mask>& pred, const std::vector<Mask>& gt, std::size_t num_classes) {
  if (pred.size() != gt.size()) throw DimensionError("miou: different numbers of masks");
  ConfusionAccumulator acc(num_classes);
  for (std::size_t i = 0; i < pred.size(); ++i) acc.add(pred[i], gt[i]);
  return miou(acc);
}

/// {"per_class_iou": [...|null], "miou": x, "classes": [...]} plus optional extras.
inline nlohmann::ordered_json miou_report(const MiouResult& r, const std::vector<std::string>& class_names) {
  nlohmann::ordered_json j;
  nlohmann::ordered_json names = nlohmann::ordered_json::array({"background"});
  for (const auto& n : class_names) names.push_back(n);
  j["classes"] = names;
  nlohmann::ordered_json per = nlohmann::ordered_json::array();
  for (const auto& v : r.per_class) {
    if (v) per.push_back(*v);
    else per.push_back(nullptr);
  }
  j["per_class_iou"] = per;
  j["miou"] = r.mean;
  j["excluded"] = "classes absent from both prediction and ground truth are null and excluded from the mean";
  return j;
}

/// Micro-averaged F1 over a multi-label batch; a class is predicted when its score is > threshold.
/// With nothing to predict and nothing predicted the batch counts as perfect.
class F1Counter {
 public:
  void add(const Tensor& scores, const LabelVector& labels, double threshold = 0.0) {
    if (scores.numel() != labels.size()) throw DimensionError("multilabel_f1: score and label lengths differ");
    for (std::size_t k = 0; k < labels.size(); ++k) {
      const bool pred = scores[k] > threshold;
      const bool truth = labels.test(k);
      tp_ += pred && truth;
      fp_ += pred && !truth;
      fn_ += !pred && truth;
    }
  }

  double f1() const {
    const std::uint64_t denom = 2 * tp_ + fp_ + fn_;
    return denom ? 2.0 * static_cast<double>(tp_) / static_cast<double>(denom) : 1.0;
  }

 private:
  std::uint64_t tp_ = 0, fp_ = 0, fn_ = 0;
};

inline double multilabel_f1(const std::vector<Tensor>& scores, const std::vector<LabelVector>& labels,
                            double threshold = 0.0) {
  if (scores.size() != labels.size()) throw DimensionError("multilabel_f1: batch sizes differ");
  F1Counter c;
  for (std::size_t i = 0; i < scores.size(); ++i) c.add(scores[i], labels[i], threshold);
  return c.f1();
}

/// Whether both co-attentive score vectors of the pair put shared class bit
/// `shared` above unshared class bit `unshared`.
inline bool common_semantics_probe(const ModelParams& params, const ImageSample& m, const ImageSample& n,
                                   std::size_t shared, std::size_t unshared) {
  if (!(m.labels.test(shared) && n.labels.test(shared))) {
    throw ContractError("probe: class " + std::to_string(shared + 1) + " is not shared by the pair");
  }
  if (m.labels.test(unshared) && n.labels.test(unshared)) {
    throw ContractError("probe: class " + std::to_string(unshared + 1) + " is shared by the pair");
  }
  const PairLossBreakdown b = evaluate_pair(params, m, n);
  return b.score_co_m[shared] > b.score_co_m[unshared] && b.score_co_n[shared] > b.score_co_n[unshared];
}

}  // namespace coattn
