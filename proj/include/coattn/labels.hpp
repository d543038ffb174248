#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "coattn/errors.hpp"

namespace coattn {

/// Image-level class presence over K classes. Bit k stands for class id k + 1
/// (id 0 is reserved for background in masks).
class LabelVector {
 public:
  LabelVector() = default;
  explicit LabelVector(std::size_t num_classes) : bits_(num_classes, 0) {}

  /// From 0/1 values; anything else is rejected.
  static LabelVector from_bits(const std::vector<int>& bits) {
    LabelVector out(bits.size());
    for (std::size_t k = 0; k < bits.size(); ++k) {
      if (bits[k] != 0 && bits[k] != 1) throw ContractError("label bit must be 0 or 1");
      out.bits_[k] = static_cast<std::uint8_t>(bits[k]);
    }
    return out;
  }

  /// From 1-based class ids, as stored in manifests.
  static LabelVector from_class_ids(std::size_t num_classes, const std::vector<int>& ids) {
    LabelVector out(num_classes);
    for (int id : ids) {
      if (id < 1 || static_cast<std::size_t>(id) > num_classes) {
        throw ContractError("class id " + std::to_string(id) + " outside 1.." + std::to_string(num_classes));
      }
      out.bits_[static_cast<std::size_t>(id - 1)] = 1;
    }
    return out;
  }

  std::size_t size() const noexcept { return bits_.size(); }
  bool test(std::size_t k) const { return bits_.at(k) != 0; }
  void set(std::size_t k, bool on = true) { bits_.at(k) = on ? 1 : 0; }

  std::size_t count() const {
    return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
  }
  bool any() const { return count() > 0; }

  /// Sorted 1-based class ids.
  std::vector<int> class_ids() const {
    std::vector<int> ids;
    for (std::size_t k = 0; k < bits_.size(); ++k)
      if (bits_[k]) ids.push_back(static_cast<int>(k + 1));
    return ids;
  }

  /// Targets as doubles for the cross-entropy op.
  std::vector<double> as_targets() const { return {bits_.begin(), bits_.end()}; }

  friend bool operator==(const LabelVector&, const LabelVector&) = default;

 private:
  std::vector<std::uint8_t> bits_;
};

namespace detail {
inline void same_k(const LabelVector& a, const LabelVector& b, const char* op) {
  if (a.size() != b.size()) {
    throw DimensionError(std::string(op) + ": label lengths " + std::to_string(a.size()) + " and " +
                         std::to_string(b.size()));
  }
}
}  // namespace detail

/// Bitwise AND: classes present in both.
inline LabelVector intersect(const LabelVector& a, const LabelVector& b) {
  detail::same_k(a, b, "intersect");
  LabelVector out(a.size());
  for (std::size_t k = 0; k < a.size(); ++k) out.set(k, a.test(k) && b.test(k));
  return out;
}

/// a − (a AND b): classes of a not present in b.
inline LabelVector subtract(const LabelVector& a, const LabelVector& b) {
  detail::same_k(a, b, "subtract");
  const LabelVector common = intersect(a, b);
  LabelVector out(a.size());
  for (std::size_t k = 0; k < a.size(); ++k) out.set(k, a.test(k) && !common.test(k));
  return out;
}

inline LabelVector unite(const LabelVector& a, const LabelVector& b) {
  detail::same_k(a, b, "unite");
  LabelVector out(a.size());
  for (std::size_t k = 0; k < a.size(); ++k) out.set(k, a.test(k) || b.test(k));
  return out;
}

inline bool has_common(const LabelVector& a, const LabelVector& b) { return intersect(a, b).any(); }

}  // namespace coattn
