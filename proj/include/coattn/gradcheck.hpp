#pragma once

// Finite-difference check of every differentiable op and of the full pair
// loss on a reduced model (two blocks, C = 8, 8×8 inputs).

#include <functional>
#include <string>
#include <vector>

#include "coattn/autodiff.hpp"
#include "coattn/classifier.hpp"
#include "coattn/coattention.hpp"
#include "coattn/rng.hpp"
#include "coattn/sample.hpp"

namespace coattn {

struct GradCheckResult {
  std::string op;
  double max_rel_error = 0.0;
  std::size_t elements = 0;  ///< input elements compared
};

namespace detail {

using GraphFn = std::function<Var(Graph&, const std::vector<Var>&)>;

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

/// Values bounded away from zero, for ops with a kink there.
inline Tensor off_zero_tensor(Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.1, 1.0);
  return t;
}

/// Reduces any output to a scalar through a fixed random projection, so every
/// output element contributes a distinct weight.
inline Var project(Var out, const Tensor& weights) {
  Graph& g = *out.graph;
  Var row = reshape(out, {1, out.value().numel()});
  return matmul(row, g.constant(weights));
}

inline GradCheckResult check_case(const std::string& name, const GraphFn& fn, const std::vector<Tensor>& inputs,
                                  Rng& rng, double eps) {
  Tensor weights;
  bool have_weights = false;
  auto eval = [&](const std::vector<Tensor>& xs, bool trainable, Graph& g) {
    std::vector<Var> vars;
    for (const auto& x : xs) vars.push_back(trainable ? g.parameter(x) : g.constant(x));
    Var out = fn(g, vars);
    if (!have_weights) {
      weights = random_tensor({out.value().numel(), 1}, rng);
      have_weights = true;
    }
    return std::make_pair(project(out, weights), vars);
  };
  Graph g;
  auto [loss, vars] = eval(inputs, true, g);
  g.backward(loss);

  GradCheckResult r{name, 0.0, 0};
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto f = [&](const Tensor& xi) {
      std::vector<Tensor> xs = inputs;
      xs[i] = xi;
      Graph h;
      return eval(xs, false, h).first.value().item();
    };
    const Tensor fd = finite_diff_grad(f, inputs[i], eps);
    r.max_rel_error = std::max(r.max_rel_error, max_relative_error(g.grad(vars[i]), fd));
    r.elements += inputs[i].numel();
  }
  return r;
}

/// Pair loss over every parameter of a reduced model.
inline GradCheckResult check_pair_loss(std::uint64_t seed, double eps) {
  Rng rng(mix_seed(seed, 0x10));
  ModelConfig mc;
  mc.num_classes = 3;
  mc.channels = {4, 8};
  const ModelParams p = init_params(mc, mix_seed(seed, 0x11));
  auto sample = [&](const char* id, const std::vector<int>& classes) {
    ImageSample s;
    s.id = id;
    s.pixels = random_tensor({3, 8, 8}, rng, 0.0, 1.0);
    s.labels = LabelVector::from_class_ids(3, classes);
    return s;
  };
  const ImageSample m = sample("m", {1, 2}), n = sample("n", {2, 3});

  Graph g;
  const BoundParams bp = bind(g, p);
  g.backward(loss_total(g, bp, m, n).total);
  const std::vector<Tensor> grads = collect_gradients(g, bp);

  GradCheckResult r{"loss_total", 0.0, 0};
  const auto named = p.named();
  for (std::size_t i = 0; i < named.size(); ++i) {
    auto f = [&](const Tensor& t) {
      ModelParams q = p;
      *q.mutable_tensors()[i] = t;
      return evaluate_pair(q, m, n).total;
    };
    const Tensor fd = finite_diff_grad(f, *named[i].second, eps);
    r.max_rel_error = std::max(r.max_rel_error, max_relative_error(grads[i], fd));
    r.elements += fd.numel();
  }
  return r;
}

}  // namespace detail

/// One result per op, then the full pair loss.
inline std::vector<GradCheckResult> run_gradcheck(std::uint64_t seed = 0, double eps = 1e-5) {
  using detail::check_case;
  using detail::off_zero_tensor;
  using detail::random_tensor;
  Rng rng(mix_seed(seed, 0x6c));
  std::vector<GradCheckResult> out;
  auto run = [&](const std::string& name, const detail::GraphFn& fn, std::vector<Tensor> inputs) {
    out.push_back(check_case(name, fn, inputs, rng, eps));
  };
  auto un = [](Var (*op)(Var)) { return [op](Graph&, const std::vector<Var>& v) { return op(v[0]); }; };

  run("matmul", [](Graph&, const std::vector<Var>& v) { return matmul(v[0], v[1]); },
      {random_tensor({3, 4}, rng), random_tensor({4, 5}, rng)});
  run("transpose", un(transpose), {random_tensor({3, 4}, rng)});
  run("reshape", [](Graph&, const std::vector<Var>& v) { return reshape(v[0], {6, 4}); },
      {random_tensor({2, 3, 4}, rng)});
  run("softmax_columns", un(softmax_columns), {random_tensor({5, 4}, rng, -2.0, 2.0)});
  run("sigmoid", un(sigmoid), {random_tensor({3, 4}, rng, -3.0, 3.0)});
  run("relu", un(relu), {off_zero_tensor({3, 4}, rng)});
  run("gap", un(gap), {random_tensor({3, 4, 4}, rng)});
  run("mul_broadcast", [](Graph&, const std::vector<Var>& v) { return mul_broadcast(v[0], v[1]); },
      {random_tensor({3, 4, 4}, rng), random_tensor({4, 4}, rng)});
  run("one_minus", un(one_minus), {random_tensor({3, 4}, rng)});
  run("add", [](Graph&, const std::vector<Var>& v) { return add(v[0], v[1]); },
      {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)});
  run("sum", un(sum), {random_tensor({3, 4}, rng)});
  run("conv2d", [](Graph&, const std::vector<Var>& v) { return conv2d(v[0], v[1], 1, 1); },
      {random_tensor({2, 5, 5}, rng), random_tensor({3, 2, 3, 3}, rng)});
  run("conv2d_stride2", [](Graph&, const std::vector<Var>& v) { return conv2d(v[0], v[1], 2, 1); },
      {random_tensor({2, 6, 6}, rng), random_tensor({3, 2, 3, 3}, rng)});
  run("add_channel_bias", [](Graph&, const std::vector<Var>& v) { return add_channel_bias(v[0], v[1]); },
      {random_tensor({3, 4, 4}, rng), random_tensor({3}, rng)});
  run("sigmoid_cross_entropy",
      [](Graph&, const std::vector<Var>& v) {
        return sigmoid_cross_entropy(v[0], {1.0, 0.0, 1.0, 0.0, 0.0});
      },
      {random_tensor({5}, rng, -3.0, 3.0)});
  run("center_channels", un(center_channels), {random_tensor({3, 4, 4}, rng)});
  run("affinity", [](Graph&, const std::vector<Var>& v) { return affinity(v[0], v[1], v[2]); },
      {random_tensor({4, 6}, rng), random_tensor({4, 6}, rng), random_tensor({4, 4}, rng)});
  run("class_agnostic_gate", [](Graph&, const std::vector<Var>& v) { return class_agnostic_gate(v[0], v[1]); },
      {random_tensor({4, 3, 3}, rng), random_tensor({1, 4}, rng)});
  run("co_attention",
      [](Graph& g, const std::vector<Var>& v) {
        const CoAttnOutput co = forward_pair(v[0], v[1], v[2], v[3]);
        // Distinct spatial weights per output so no two gradients can cancel.
        auto weighted = [&](Var x, double k) {
          Tensor w({3, 3});
          for (std::size_t i = 0; i < w.numel(); ++i) w[i] = 1.0 + 0.37 * k + 0.11 * static_cast<double>(i);
          return mul_broadcast(x, g.constant(w));
        };
        return add(add(weighted(co.coatt_m, 0), weighted(co.coatt_n, 1)),
                   add(weighted(co.contrast_m, 2), weighted(co.contrast_n, 3)));
      },
      {random_tensor({4, 3, 3}, rng), random_tensor({4, 3, 3}, rng), random_tensor({4, 4}, rng),
       random_tensor({1, 4}, rng)});
  out.push_back(detail::check_pair_loss(seed, eps));
  return out;
}

}  // namespace coattn
