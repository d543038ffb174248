#pragma once

// Synthetic multi-label shape images with pixel ground truth, their on-disk
// layout, and the pair / related-image samplers used by training and
// multi-round inference.
//
// On disk a dataset split is a directory holding
//   manifest.jsonl   one JSON record per sample
//   classes.json     {"1": "disk", ...}
//   images/<id>.ppm  8-bit binary PPM
//   masks/<id>.pgm   8-bit binary PGM, 0 background, k class, 255 ignore

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "coattn/config.hpp"
#include "coattn/errors.hpp"
#include "coattn/image_io.hpp"
#include "coattn/labels.hpp"
#include "coattn/rng.hpp"
#include "coattn/sample.hpp"

namespace coattn {

enum class ShapeKind { Disk, Square, Triangle, Bar, Ring, Cross, Diamond, HBar };

inline const char* shape_name(ShapeKind s) {
  switch (s) {
    case ShapeKind::Disk: return "disk";
    case ShapeKind::Square: return "square";
    case ShapeKind::Triangle: return "triangle";
    case ShapeKind::Bar: return "bar";
    case ShapeKind::Ring: return "ring";
    case ShapeKind::Cross: return "cross";
    case ShapeKind::Diamond: return "diamond";
    case ShapeKind::HBar: return "hbar";
  }
  return "?";
}

struct ClassStyle {
  ShapeKind shape;
  std::array<double, 3> color;
};

/// Class k (1-based) is drawn with kClassTable[k - 1].
inline constexpr std::array<ClassStyle, 8> kClassTable{{
    {ShapeKind::Disk, {0.90, 0.20, 0.15}},
    {ShapeKind::Square, {0.15, 0.55, 0.90}},
    {ShapeKind::Triangle, {0.20, 0.80, 0.25}},
    {ShapeKind::Bar, {0.95, 0.80, 0.10}},
    {ShapeKind::Ring, {0.70, 0.25, 0.85}},
    {ShapeKind::Cross, {0.10, 0.85, 0.85}},
    {ShapeKind::Diamond, {0.95, 0.50, 0.70}},
    {ShapeKind::HBar, {0.55, 0.35, 0.10}},
}};

struct DatasetSpec {
  std::size_t num_classes = 5;
  std::size_t image_size = 32;
  std::size_t min_instances = 1;
  std::size_t max_instances = 3;
  std::size_t train_count = 500;
  std::size_t test_count = 200;
  std::size_t single_label_count = 0;  ///< extra one-object images tagged domain "single", added to train
  std::size_t min_object = 9;          ///< object bounding-box side, pixels
  std::size_t max_object = 13;
  double background_noise = 0.10;      ///< half-width of the uniform background texture
  double object_noise = 0.05;
  std::uint64_t seed = 7;

  void validate() const {
    if (num_classes < 2 || num_classes > kClassTable.size()) {
      throw ConfigError("num_classes must be in 2.." + std::to_string(kClassTable.size()));
    }
    if (image_size == 0 || image_size % 8 != 0) throw ConfigError("image_size must be a positive multiple of 8");
    if (min_instances < 1 || min_instances > max_instances || max_instances > num_classes) {
      throw ConfigError("need 1 <= min_instances <= max_instances <= num_classes");
    }
    if (min_object < 4 || min_object > max_object || max_object > image_size) {
      throw ConfigError("object size range invalid for image size");
    }
    if (train_count + single_label_count < 2) throw ConfigError("train split needs at least two images");
  }
};

/// Reads a DatasetSpec from `key = value` lines; unset keys keep their defaults.
inline DatasetSpec parse_dataset_spec(std::istream& is) {
  DatasetSpec s;
  for (const auto& [k, v] : parse_key_values(is)) {
    using detail::parse_number;
    if (k == "num_classes") s.num_classes = parse_number<std::size_t>(k, v);
    else if (k == "image_size") s.image_size = parse_number<std::size_t>(k, v);
    else if (k == "min_instances") s.min_instances = parse_number<std::size_t>(k, v);
    else if (k == "max_instances") s.max_instances = parse_number<std::size_t>(k, v);
    else if (k == "train_count") s.train_count = parse_number<std::size_t>(k, v);
    else if (k == "test_count") s.test_count = parse_number<std::size_t>(k, v);
    else if (k == "single_label_count") s.single_label_count = parse_number<std::size_t>(k, v);
    else if (k == "min_object") s.min_object = parse_number<std::size_t>(k, v);
    else if (k == "max_object") s.max_object = parse_number<std::size_t>(k, v);
    else if (k == "background_noise") s.background_noise = parse_number<double>(k, v);
    else if (k == "object_noise") s.object_noise = parse_number<double>(k, v);
    else if (k == "seed") s.seed = parse_number<std::uint64_t>(k, v);
    else throw ConfigError("unknown spec key '" + k + "'");
  }
  s.validate();
  return s;
}

inline DatasetSpec load_dataset_spec(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open spec " + path);
  return parse_dataset_spec(is);
}

inline std::string describe(const DatasetSpec& s) {
  std::ostringstream os;
  os << "num_classes = " << s.num_classes << "\nimage_size = " << s.image_size
     << "\nmin_instances = " << s.min_instances << "\nmax_instances = " << s.max_instances
     << "\ntrain_count = " << s.train_count << "\ntest_count = " << s.test_count
     << "\nsingle_label_count = " << s.single_label_count << "\nmin_object = " << s.min_object
     << "\nmax_object = " << s.max_object << "\nbackground_noise = " << s.background_noise
     << "\nobject_noise = " << s.object_noise << "\nseed = " << s.seed << "\n";
  return os.str();
}

/// Weight of drawing n distinct classes for an image. Two-class images get
/// twice the weight of any other count.
inline double instance_count_weight(const DatasetSpec& spec, std::size_t n) {
  if (n < spec.min_instances || n > spec.max_instances) return 0.0;
  return n == 2 ? 2.0 : 1.0;
}

/// Probability that a given class appears in a generated (multi-label) image.
inline double expected_class_marginal(const DatasetSpec& spec) {
  double total = 0.0, mean = 0.0;
  for (std::size_t n = spec.min_instances; n <= spec.max_instances; ++n) {
    total += instance_count_weight(spec, n);
    mean += instance_count_weight(spec, n) * static_cast<double>(n);
  }
  return mean / total / static_cast<double>(spec.num_classes);
}

struct Dataset {
  std::vector<std::string> class_names;  ///< class_names[k - 1] names class id k
  std::vector<ImageSample> samples;

  std::size_t num_classes() const { return class_names.size(); }

  const ImageSample& by_id(const std::string& id) const {
    for (const auto& s : samples)
      if (s.id == id) return s;
    throw ContractError("no sample with id " + id);
  }
};

struct GeneratedDataset {
  Dataset train;
  Dataset test;
};

namespace detail {

/// Membership of pixel (y, x) in a shape drawn in the box [y0, y0+size) × [x0, x0+size).
inline bool shape_contains(ShapeKind kind, double size, double dy, double dx) {
  // dy, dx relative to box center, in pixels (pixel centers).
  const double r = size / 2.0;
  const double ady = std::abs(dy), adx = std::abs(dx);
  switch (kind) {
    case ShapeKind::Disk: return dy * dy + dx * dx <= r * r;
    case ShapeKind::Square: return ady <= r - 1.0 && adx <= r - 1.0;
    case ShapeKind::Triangle: {
      // apex at top, base at bottom
      const double t = (dy + r) / (2.0 * r);
      return t >= 0.0 && t <= 1.0 && adx <= t * r;
    }
    case ShapeKind::Bar: return adx <= size / 5.0 && ady <= r;
    case ShapeKind::Ring: {
      const double d2 = dy * dy + dx * dx;
      return d2 <= r * r && d2 >= 0.36 * r * r;
    }
    case ShapeKind::Cross: return (adx <= size / 6.0 && ady <= r) || (ady <= size / 6.0 && adx <= r);
    case ShapeKind::Diamond: return ady + adx <= r;
    case ShapeKind::HBar: return ady <= size / 5.0 && adx <= r;
  }
  return false;
}

inline double quantize(double v) { return to_byte(v) / 255.0; }

struct Placement {
  std::size_t y0, x0, size;
};

/// Draws an image holding exactly the given classes; objects never overlap
/// (bounding boxes plus a one-pixel margin are disjoint).
inline ImageSample render(const DatasetSpec& spec, const std::vector<std::size_t>& class_ids, Rng& rng,
                          std::string id, std::string domain) {
  const std::size_t S = spec.image_size;
  std::vector<Placement> boxes;
  for (int attempt = 0;; ++attempt) {
    if (attempt > 1000) throw SamplingError("cannot place " + std::to_string(class_ids.size()) + " objects");
    boxes.clear();
    bool ok = true;
    for (std::size_t i = 0; i < class_ids.size() && ok; ++i) {
      bool placed = false;
      for (int tries = 0; tries < 100 && !placed; ++tries) {
        const std::size_t size = spec.min_object + rng.below(spec.max_object - spec.min_object + 1);
        const std::size_t y0 = rng.below(S - size + 1);
        const std::size_t x0 = rng.below(S - size + 1);
        const bool clash = std::any_of(boxes.begin(), boxes.end(), [&](const Placement& b) {
          return y0 < b.y0 + b.size + 1 && b.y0 < y0 + size + 1 && x0 < b.x0 + b.size + 1 && b.x0 < x0 + size + 1;
        });
        if (!clash) {
          boxes.push_back({y0, x0, size});
          placed = true;
        }
      }
      ok = placed;
    }
    if (ok) break;
  }

  ImageSample s;
  s.id = std::move(id);
  s.domain = std::move(domain);
  s.pixels = Tensor({3, S, S});
  s.has_mask = true;
  s.mask = Mask(S, S);
  for (std::size_t y = 0; y < S; ++y)
    for (std::size_t x = 0; x < S; ++x) {
      const double base = 0.45 + rng.uniform(-spec.background_noise, spec.background_noise);
      for (std::size_t c = 0; c < 3; ++c) {
        s.pixels.at(c, y, x) = quantize(base + rng.uniform(-spec.background_noise, spec.background_noise) * 0.5);
      }
    }
  for (std::size_t i = 0; i < class_ids.size(); ++i) {
    const std::size_t k = class_ids[i];
    const ClassStyle& style = kClassTable[k - 1];
    const Placement& b = boxes[i];
    const double cy = static_cast<double>(b.y0) + static_cast<double>(b.size) / 2.0;
    const double cx = static_cast<double>(b.x0) + static_cast<double>(b.size) / 2.0;
    for (std::size_t y = b.y0; y < b.y0 + b.size; ++y)
      for (std::size_t x = b.x0; x < b.x0 + b.size; ++x) {
        const double dy = static_cast<double>(y) + 0.5 - cy;
        const double dx = static_cast<double>(x) + 0.5 - cx;
        if (!shape_contains(style.shape, static_cast<double>(b.size), dy, dx)) continue;
        s.mask.at(y, x) = static_cast<std::uint8_t>(k);
        for (std::size_t c = 0; c < 3; ++c) {
          s.pixels.at(c, y, x) = quantize(style.color[c] + rng.uniform(-spec.object_noise, spec.object_noise));
        }
      }
  }
  s.labels = labels_from_mask(s.mask, spec.num_classes);
  return s;
}

inline std::vector<std::size_t> draw_classes(const DatasetSpec& spec, Rng& rng) {
  double total = 0.0;
  for (std::size_t n = spec.min_instances; n <= spec.max_instances; ++n) total += instance_count_weight(spec, n);
  double u = rng.uniform() * total;
  std::size_t count = spec.max_instances;
  for (std::size_t n = spec.min_instances; n <= spec.max_instances; ++n) {
    u -= instance_count_weight(spec, n);
    if (u < 0.0) {
      count = n;
      break;
    }
  }
  std::vector<std::size_t> ids(spec.num_classes);
  for (std::size_t k = 0; k < ids.size(); ++k) ids[k] = k + 1;
  for (std::size_t i = 0; i < count; ++i) std::swap(ids[i], ids[i + rng.below(ids.size() - i)]);
  ids.resize(count);
  return ids;
}

inline std::string make_id(const char* prefix, std::size_t i) {
  std::ostringstream os;
  os << prefix << '_';
  os.width(5);
  os.fill('0');
  os << i;
  return os.str();
}

inline std::vector<std::string> default_class_names(std::size_t k) {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < k; ++i) names.emplace_back(shape_name(kClassTable[i].shape));
  return names;
}

}  // namespace detail

/// Renders one image containing exactly `class_ids` (1-based); used for probe sets.
inline ImageSample render_with_classes(const DatasetSpec& spec, const std::vector<std::size_t>& class_ids,
                                       std::uint64_t seed, std::string id, std::string domain = "target") {
  spec.validate();
  for (auto k : class_ids)
    if (k < 1 || k > spec.num_classes) throw ContractError("class id out of range");
  Rng rng(seed);
  return detail::render(spec, class_ids, rng, std::move(id), std::move(domain));
}

/// Seeded train/test splits. Each image draws from its own stream, so the
/// result does not depend on generation order.
inline GeneratedDataset generate(const DatasetSpec& spec) {
  spec.validate();
  GeneratedDataset out;
  out.train.class_names = out.test.class_names = detail::default_class_names(spec.num_classes);
  auto one = [&](std::uint64_t stream, std::size_t i, const char* prefix, bool single) {
    Rng rng(mix_seed(mix_seed(spec.seed, stream), i));
    std::vector<std::size_t> ids;
    if (single) {
      ids.push_back(1 + rng.below(spec.num_classes));
    } else {
      ids = detail::draw_classes(spec, rng);
    }
    return detail::render(spec, ids, rng, detail::make_id(prefix, i), single ? "single" : "target");
  };
  for (std::size_t i = 0; i < spec.train_count; ++i) out.train.samples.push_back(one(1, i, "train", false));
  for (std::size_t i = 0; i < spec.single_label_count; ++i) out.train.samples.push_back(one(3, i, "single", true));
  for (std::size_t i = 0; i < spec.test_count; ++i) out.test.samples.push_back(one(2, i, "test", false));
  return out;
}

// ---------------------------------------------------------------------------
// Samplers
// ---------------------------------------------------------------------------

/// Uniform over ordered pairs of distinct samples sharing at least one class.
inline std::pair<const ImageSample*, const ImageSample*> sample_pair(const std::vector<ImageSample>& data, Rng& rng,
                                                                     int max_attempts = 10000) {
  const std::size_t n = data.size();
  if (n < 2) throw SamplingError("need at least two samples to form a pair");
  for (int a = 0; a < max_attempts; ++a) {
    const std::size_t i = rng.below(n);
    const std::size_t j = rng.below(n - 1);
    const std::size_t jj = j >= i ? j + 1 : j;
    if (has_common(data[i].labels, data[jj].labels)) return {&data[i], &data[jj]};
  }
  // Rejection failed; fall back to enumerating the valid pairs.
  std::vector<std::pair<std::size_t, std::size_t>> valid;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j && has_common(data[i].labels, data[j].labels)) valid.emplace_back(i, j);
  if (valid.empty()) throw SamplingError("no pair of samples shares a class");
  const auto& [i, j] = valid[rng.below(valid.size())];
  return {&data[i], &data[j]};
}

/// Up to `count` distinct samples other than the query that are labelled with
/// class bit `k` (0-based), chosen uniformly without replacement.
inline std::vector<const ImageSample*> related_images(const std::vector<ImageSample>& data, const ImageSample& query,
                                                      std::size_t k, std::size_t count, Rng& rng) {
  if (k >= query.labels.size() || !query.labels.test(k)) {
    throw ContractError("related_images: class " + std::to_string(k + 1) + " is not labelled on " + query.id);
  }
  std::vector<const ImageSample*> eligible;
  for (const auto& s : data)
    if (s.id != query.id && s.labels.size() == query.labels.size() && s.labels.test(k)) eligible.push_back(&s);
  const std::size_t take = std::min(count, eligible.size());
  for (std::size_t i = 0; i < take; ++i) std::swap(eligible[i], eligible[i + rng.below(eligible.size() - i)]);
  eligible.resize(take);
  return eligible;
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

inline void write_classes(const std::filesystem::path& file, const std::vector<std::string>& names) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (std::size_t k = 0; k < names.size(); ++k) j[std::to_string(k + 1)] = names[k];
  std::ofstream os(file, std::ios::binary);
  if (!os) throw ParseError("cannot write " + file.string());
  os << j.dump(2) << '\n';
}

inline std::vector<std::string> read_classes(const std::filesystem::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw ParseError("cannot open " + file.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(file.string() + ": " + e.what());
  }
  if (!j.is_object() || j.empty()) throw ParseError(file.string() + ": expected a non-empty object");
  std::vector<std::string> names(j.size());
  for (auto it = j.begin(); it != j.end(); ++it) {
    std::size_t idx = 0;
    try {
      idx = std::stoul(it.key());
    } catch (const std::exception&) {
      throw ParseError(file.string() + ": class key '" + it.key() + "' is not an index");
    }
    if (idx < 1 || idx > names.size() || !it.value().is_string()) {
      throw ParseError(file.string() + ": class indices must be 1..K with string names");
    }
    names[idx - 1] = it.value().get<std::string>();
  }
  return names;
}

inline void write_dataset(const Dataset& data, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");
  write_classes(dir / "classes.json", data.class_names);
  std::ofstream manifest(dir / "manifest.jsonl", std::ios::binary);
  if (!manifest) throw ParseError("cannot write manifest in " + dir.string());
  for (const auto& s : data.samples) {
    const std::string image_rel = "images/" + s.id + ".ppm";
    write_ppm((dir / image_rel).string(), to_rgb(s.pixels));
    nlohmann::ordered_json rec;
    rec["id"] = s.id;
    rec["image"] = image_rel;
    if (s.has_mask) {
      const std::string mask_rel = "masks/" + s.id + ".pgm";
      write_pgm((dir / mask_rel).string(), to_gray(s.mask));
      rec["mask"] = mask_rel;
    } else {
      rec["mask"] = nullptr;
    }
    rec["labels"] = s.labels.class_ids();
    rec["domain"] = s.domain;
    manifest << rec.dump() << '\n';
  }
}

inline Dataset read_dataset(const std::filesystem::path& dir) {
  Dataset data;
  data.class_names = read_classes(dir / "classes.json");
  const std::size_t K = data.class_names.size();
  std::ifstream is(dir / "manifest.jsonl", std::ios::binary);
  if (!is) throw ParseError("cannot open " + (dir / "manifest.jsonl").string());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = "manifest.jsonl line " + std::to_string(line_no);
    ImageSample s;
    try {
      const auto rec = nlohmann::json::parse(line);
      s.id = rec.at("id").get<std::string>();
      const auto image_rel = rec.at("image").get<std::string>();
      const auto& mask_field = rec.at("mask");
      const auto ids = rec.at("labels").get<std::vector<int>>();
      if (!std::is_sorted(ids.begin(), ids.end()) || std::adjacent_find(ids.begin(), ids.end()) != ids.end()) {
        throw ParseError(where + ": labels must be sorted and unique");
      }
      s.labels = LabelVector::from_class_ids(K, ids);
      s.domain = rec.at("domain").get<std::string>();
      s.pixels = from_rgb(read_ppm((dir / image_rel).string()));
      if (!mask_field.is_null()) {
        s.mask = to_mask(read_pgm((dir / mask_field.get<std::string>()).string()));
        s.has_mask = true;
        if (s.mask.height != s.height() || s.mask.width != s.width()) {
          throw ParseError(where + ": mask size differs from image size");
        }
        if (!(labels_from_mask(s.mask, K) == s.labels)) {
          throw ParseError(where + ": labels do not match the classes present in the mask");
        }
      }
    } catch (const ParseError& e) {
      const std::string msg = e.what();
      throw ParseError(msg.rfind("manifest", 0) == 0 ? msg : where + ": " + msg);
    } catch (const std::exception& e) {
      throw ParseError(where + ": " + e.what());
    }
    data.samples.push_back(std::move(s));
  }
  return data;
}

}  // namespace coattn
