#pragma once

// Pair-based SGD training with deterministic, resumable epochs.
//
// Epoch e samples its pairs from a stream seeded by (seed, e), so a run
// resumed from an epoch-boundary checkpoint replays the same pairs.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "coattn/classifier.hpp"
#include "coattn/config.hpp"
#include "coattn/errors.hpp"
#include "coattn/evaluation.hpp"
#include "coattn/rng.hpp"
#include "coattn/synth_data.hpp"

namespace coattn {

struct TrainConfig {
  // Desk-scale values; the VGG-scale recipe was lr 0.001, x0.1 every 6 epochs,
  // batch 5, weight decay 0.0002, momentum 0.9.
  std::size_t epochs = 30;
  std::size_t pairs_per_epoch = 500;
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0002;
  double lr_decay = 0.1;
  std::size_t lr_decay_every = 12;
  double grad_clip = 5.0;  ///< max global gradient L2 norm per step; 0 disables
  std::uint64_t seed = 1;
  LossTerms terms{};
  std::size_t checkpoint_every = 0;  ///< 0: only the final checkpoint
  std::vector<std::string> domains{"target"};
  std::vector<std::size_t> channels{16, 32, 32};

  void validate() const {
    if (!(learning_rate > 0.0) || momentum < 0.0 || momentum >= 1.0 || weight_decay < 0.0) {
      throw ConfigError("learning_rate must be > 0, momentum in [0,1), weight_decay >= 0");
    }
    if (!(lr_decay > 0.0) || lr_decay_every == 0) throw ConfigError("lr_decay must be > 0 and lr_decay_every >= 1");
    if (!(grad_clip >= 0.0)) throw ConfigError("grad_clip must be >= 0");
    if (domains.empty()) throw ConfigError("domains must not be empty");
    if (channels.empty()) throw ConfigError("channels must not be empty");
  }

  double learning_rate_at(std::size_t epoch) const {
    return learning_rate * std::pow(lr_decay, static_cast<double>(epoch / lr_decay_every));
  }
};

inline LossTerms parse_loss_arm(const std::string& arm) {
  if (arm == "basic") return {true, false, false};
  if (arm == "basic+coatt") return {true, true, false};
  if (arm == "full") return {true, true, true};
  throw ConfigError("unknown loss arm '" + arm + "' (basic | basic+coatt | full)");
}

inline TrainConfig parse_train_config(std::istream& is) {
  TrainConfig c;
  for (const auto& [k, v] : parse_key_values(is)) {
    using detail::parse_number;
    if (k == "epochs") c.epochs = parse_number<std::size_t>(k, v);
    else if (k == "pairs_per_epoch") c.pairs_per_epoch = parse_number<std::size_t>(k, v);
    else if (k == "learning_rate") c.learning_rate = parse_number<double>(k, v);
    else if (k == "momentum") c.momentum = parse_number<double>(k, v);
    else if (k == "weight_decay") c.weight_decay = parse_number<double>(k, v);
    else if (k == "lr_decay") c.lr_decay = parse_number<double>(k, v);
    else if (k == "lr_decay_every") c.lr_decay_every = parse_number<std::size_t>(k, v);
    else if (k == "grad_clip") c.grad_clip = parse_number<double>(k, v);
    else if (k == "seed") c.seed = parse_number<std::uint64_t>(k, v);
    else if (k == "loss_basic") c.terms.basic = detail::parse_bool(k, v);
    else if (k == "loss_coatt") c.terms.coatt = detail::parse_bool(k, v);
    else if (k == "loss_contrast") c.terms.contrast = detail::parse_bool(k, v);
    else if (k == "checkpoint_every") c.checkpoint_every = parse_number<std::size_t>(k, v);
    else if (k == "domains") c.domains = detail::split_list(v);
    else if (k == "channels") {
      c.channels.clear();
      for (const auto& s : detail::split_list(v)) c.channels.push_back(parse_number<std::size_t>(k, s));
    } else {
      throw ConfigError("unknown config key '" + k + "'");
    }
  }
  c.validate();
  return c;
}

inline TrainConfig load_train_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path);
  return parse_train_config(is);
}

/// Every setting as `key = value` lines, in a form parse_train_config accepts.
inline std::string describe(const TrainConfig& c) {
  std::ostringstream os;
  auto list = [](const auto& xs) {
    std::ostringstream s;
    for (std::size_t i = 0; i < xs.size(); ++i) s << (i ? "," : "") << xs[i];
    return s.str();
  };
  os << std::boolalpha << "epochs = " << c.epochs << "\npairs_per_epoch = " << c.pairs_per_epoch
     << "\nlearning_rate = " << c.learning_rate << "\nmomentum = " << c.momentum
     << "\nweight_decay = " << c.weight_decay << "\nlr_decay = " << c.lr_decay
     << "\nlr_decay_every = " << c.lr_decay_every << "\ngrad_clip = " << c.grad_clip << "\nseed = " << c.seed << "\nloss_basic = " << c.terms.basic
     << "\nloss_coatt = " << c.terms.coatt << "\nloss_contrast = " << c.terms.contrast
     << "\ncheckpoint_every = " << c.checkpoint_every << "\ndomains = " << list(c.domains)
     << "\nchannels = " << list(c.channels) << "\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct SgdState {
  std::vector<Tensor> velocity;
};

/// v ← momentum·v + g + wd·θ;  θ ← θ − lr·v.
inline void sgd_step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads, SgdState& state, double lr,
                     double momentum, double weight_decay) {
  if (params.size() != grads.size()) throw ContractError("sgd_step: parameter and gradient counts differ");
  if (state.velocity.empty()) {
    for (const Tensor* p : params) state.velocity.emplace_back(p->shape(), 0.0);
  }
  if (state.velocity.size() != params.size()) throw ContractError("sgd_step: optimizer state does not match parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    Tensor& v = state.velocity[i];
    const Tensor& g = grads[i];
    if (p.shape() != g.shape() || p.shape() != v.shape()) {
      throw ContractError("sgd_step: shape mismatch for parameter " + std::to_string(i) + ": " +
                          shape_string(p.shape()) + " vs grad " + shape_string(g.shape()));
    }
    for (std::size_t k = 0; k < p.numel(); ++k) {
      v[k] = momentum * v[k] + g[k] + weight_decay * p[k];
      p[k] -= lr * v[k];
    }
  }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`
/// (0 disables). Returns the norm before clipping.
inline double clip_global_norm(std::vector<Tensor>& grads, double max_norm) {
  double sq = 0.0;
  for (const Tensor& g : grads)
    for (double v : g.data()) sq += v * v;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (Tensor& g : grads)
      for (double& v : g.data()) v *= scale;
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct EpochMetrics {
  std::size_t epoch = 0;  ///< 1-based
  double loss_basic = 0.0;
  double loss_coatt = 0.0;
  double loss_contrast = 0.0;
  double loss_total = 0.0;
  double f1 = 0.0;  ///< micro-F1 of the single-image scores seen this epoch
};

inline std::string metrics_csv_header() { return "epoch,loss_basic,loss_coatt,loss_contrast,loss_total,f1"; }

inline std::string metrics_csv_row(const EpochMetrics& m) {
  std::ostringstream os;
  os << std::setprecision(17) << m.epoch << ',' << m.loss_basic << ',' << m.loss_coatt << ',' << m.loss_contrast << ','
     << m.loss_total << ',' << m.f1;
  return os.str();
}

struct TrainState {
  ModelParams params;
  SgdState optimizer;
  std::size_t next_epoch = 0;  ///< 0-based
};

/// Checkpoint with parameters, optimizer velocity and the next epoch index.
inline void save_train_state(const std::string& path, const TrainState& s) {
  NamedTensors extra;
  const auto names = s.params.named();
  for (std::size_t i = 0; i < s.optimizer.velocity.size(); ++i) {
    extra.emplace_back("optim.velocity." + names[i].first, s.optimizer.velocity[i]);
  }
  extra.emplace_back("train.next_epoch", Tensor::scalar(static_cast<double>(s.next_epoch)));
  save_checkpoint(path, s.params, extra);
}

inline TrainState load_train_state(const std::string& path) {
  const NamedTensors all = read_named_tensors(path);
  TrainState s;
  s.params = params_from_named(all);
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [n, t] : all) by_name[n] = &t;
  const auto names = s.params.named();
  bool any_velocity = false;
  for (const auto& [n, t] : names) {
    auto it = by_name.find("optim.velocity." + n);
    if (it == by_name.end()) continue;
    any_velocity = true;
    if (it->second->shape() != t->shape()) throw CheckpointError("velocity shape mismatch for " + n);
  }
  if (any_velocity) {
    for (const auto& [n, t] : names) {
      auto it = by_name.find("optim.velocity." + n);
      if (it == by_name.end()) throw CheckpointError("checkpoint missing velocity for " + n);
      s.optimizer.velocity.push_back(*it->second);
    }
  }
  if (auto it = by_name.find("train.next_epoch"); it != by_name.end()) {
    s.next_epoch = static_cast<std::size_t>(it->second->item());
  }
  return s;
}

struct TrainResult {
  ModelParams params;
  std::vector<EpochMetrics> log;
};

struct TrainHooks {
  std::function<void(const EpochMetrics&)> on_epoch;
  std::optional<std::string> checkpoint_dir;  ///< receives epoch_<e>.ckpt, final.ckpt, last_good.ckpt
};

inline TrainState initial_state(const Dataset& data, const TrainConfig& cfg) {
  ModelConfig mc;
  mc.num_classes = data.num_classes();
  mc.channels = cfg.channels;
  mc.domains = cfg.domains;
  TrainState s;
  s.params = init_params(mc, cfg.seed);
  return s;
}

/// Runs epochs [state.next_epoch, cfg.epochs).
inline TrainResult train_from(const Dataset& data, const TrainConfig& cfg, TrainState state, const TrainHooks& hooks = {}) {
  cfg.validate();
  if (data.samples.size() < 2) throw SamplingError("training needs at least two images");
  for (const auto& s : data.samples) {
    if (s.labels.size() != state.params.num_classes()) throw DimensionError("sample " + s.id + " has wrong label length");
  }
  namespace fs = std::filesystem;
  if (hooks.checkpoint_dir) fs::create_directories(*hooks.checkpoint_dir);
  auto ckpt_path = [&](const std::string& name) { return (fs::path(*hooks.checkpoint_dir) / name).string(); };

  TrainResult result;
  for (std::size_t epoch = state.next_epoch; epoch < cfg.epochs; ++epoch) {
    const TrainState epoch_start = state;
    const double lr = cfg.learning_rate_at(epoch);
    Rng rng(mix_seed(cfg.seed, 0x5eed0000ull + epoch));
    EpochMetrics m;
    m.epoch = epoch + 1;
    F1Counter f1;
    for (std::size_t step = 0; step < cfg.pairs_per_epoch; ++step) {
      const auto [a, b] = sample_pair(data.samples, rng);
      try {
        Graph g;
        const BoundParams bp = bind(g, state.params);
        const PairForward fwd = loss_total(g, bp, *a, *b, cfg.terms);
        const auto& br = fwd.breakdown;
        if (!std::isfinite(br.total)) throw std::domain_error("non-finite loss");
        m.loss_basic += br.basic;
        m.loss_coatt += br.coatt;
        m.loss_contrast += br.contrast;
        m.loss_total += br.total;
        f1.add(br.score_m, a->labels);
        f1.add(br.score_n, b->labels);
        if (!fwd.has_loss) continue;
        g.backward(fwd.total);
        std::vector<Tensor> grads = collect_gradients(g, bp);
        clip_global_norm(grads, cfg.grad_clip);
        sgd_step(state.params.mutable_tensors(), grads, state.optimizer, lr, cfg.momentum, cfg.weight_decay);
      } catch (const std::domain_error& e) {
        if (hooks.checkpoint_dir) save_train_state(ckpt_path("last_good.ckpt"), epoch_start);
        throw DivergenceError("epoch " + std::to_string(epoch + 1) + " step " + std::to_string(step) + ": " + e.what());
      }
    }
    const double n = static_cast<double>(std::max<std::size_t>(cfg.pairs_per_epoch, 1));
    m.loss_basic /= n;
    m.loss_coatt /= n;
    m.loss_contrast /= n;
    m.loss_total /= n;
    m.f1 = f1.f1();
    state.next_epoch = epoch + 1;
    result.log.push_back(m);
    if (hooks.on_epoch) hooks.on_epoch(m);
    if (hooks.checkpoint_dir && cfg.checkpoint_every && (epoch + 1) % cfg.checkpoint_every == 0) {
      save_train_state(ckpt_path("epoch_" + std::to_string(epoch + 1) + ".ckpt"), state);
    }
  }
  if (hooks.checkpoint_dir) save_train_state(ckpt_path("final.ckpt"), state);
  result.params = std::move(state.params);
  return result;
}

inline TrainResult train(const Dataset& data, const TrainConfig& cfg, const TrainHooks& hooks = {}) {
  return train_from(data, cfg, initial_state(data, cfg), hooks);
}

/// Three runs with the same seed: basic, basic+coatt, full.
inline std::vector<TrainResult> ablation_suite(const Dataset& data, TrainConfig cfg,
                                               const std::function<void(const std::string&, const EpochMetrics&)>& on_epoch = {}) {
  std::vector<TrainResult> out;
  for (const char* arm : {"basic", "basic+coatt", "full"}) {
    cfg.terms = parse_loss_arm(arm);
    TrainHooks hooks;
    if (on_epoch) hooks.on_epoch = [&, arm](const EpochMetrics& m) { on_epoch(arm, m); };
    out.push_back(train(data, cfg, hooks));
  }
  return out;
}

/// Held-out micro-F1 of single-image scores.
inline double evaluate_f1(const ModelParams& params, const std::vector<ImageSample>& samples) {
  F1Counter c;
  for (const auto& s : samples) c.add(image_scores(params, s.pixels), s.labels);
  return c.f1();
}

}  // namespace coattn
