#pragma once

// Tape-based reverse-mode differentiation over coattn::Tensor.
//
// A Graph owns every value produced during one forward pass. Operations are
// free functions taking Var handles; each records its output and, when any
// input requires a gradient, a closure that pushes the output gradient back
// to its inputs. backward() walks the tape once in reverse order.

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "coattn/errors.hpp"
#include "coattn/tensor.hpp"

namespace coattn {

class Graph;

/// Handle to a node on a Graph.
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Tensor& grad() const;
  const Shape& shape() const { return value().shape(); }
};

class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t self)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Constant input; never receives a gradient.
  Var constant(Tensor value) { return push("constant", {}, std::move(value), false, nullptr); }

  /// Trainable leaf; gradient is available after backward().
  Var parameter(Tensor value) { return push("parameter", {}, std::move(value), true, nullptr); }

  /// Records an operation output. `fn` is dropped when no input requires a gradient.
  Var record(const char* op, std::vector<std::size_t> inputs, Tensor value, BackwardFn fn) {
    bool needs = false;
    for (auto i : inputs) needs = needs || nodes_.at(i).requires_grad;
    if (!value.all_finite()) {
      throw std::domain_error(std::string("non-finite value produced by ") + op);
    }
    return push(op, std::move(inputs), std::move(value), needs, needs ? std::move(fn) : nullptr);
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  const Tensor& value(Var v) const { return value(v.id); }

  const Tensor& grad(std::size_t id) const {
    const auto& n = nodes_.at(id);
    if (!backward_done_) throw ContractError("gradient requested before backward()");
    return n.grad;
  }
  const Tensor& grad(Var v) const { return grad(v.id); }

  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  const char* op_name(std::size_t id) const { return nodes_.at(id).op; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_.at(id).inputs; }
  std::size_t size() const noexcept { return nodes_.size(); }
  bool has_backward() const noexcept { return backward_done_; }

  /// Gradient buffer of an input, or nullptr when that input takes no gradient.
  Tensor* grad_sink(std::size_t id) {
    auto& n = nodes_.at(id);
    return n.requires_grad ? &n.grad : nullptr;
  }

  /// Reverse accumulation from a scalar loss. A second call requires reset_gradients().
  void backward(Var loss) {
    if (loss.graph != this) throw ContractError("loss node belongs to another graph");
    if (value(loss).numel() != 1) {
      throw ContractError("backward() needs a scalar loss, got shape " +
                          shape_string(value(loss).shape()));
    }
    if (backward_done_) throw ContractError("backward() called twice without reset_gradients()");
    for (auto& n : nodes_) n.grad = Tensor(n.value.shape(), 0.0);
    backward_done_ = true;
    if (!nodes_[loss.id].requires_grad) return;

    std::vector<char> live(nodes_.size(), 0);
    live[loss.id] = 1;
    nodes_[loss.id].grad[0] = 1.0;
    for (std::size_t k = loss.id + 1; k-- > 0;) {
      if (!live[k]) continue;
      auto& n = nodes_[k];
      if (!n.requires_grad || !n.backward) continue;
      for (auto i : n.inputs) live[i] = 1;
      n.backward(*this, k);
    }
  }

  void reset_gradients() {
    for (auto& n : nodes_) n.grad = Tensor();
    backward_done_ = false;
  }

 private:
  struct Node {
    const char* op;
    std::vector<std::size_t> inputs;
    Tensor value;
    Tensor grad;
    bool requires_grad;
    BackwardFn backward;
  };

  Var push(const char* op, std::vector<std::size_t> inputs, Tensor value, bool needs, BackwardFn fn) {
    for (auto i : inputs) {
      if (i >= nodes_.size()) throw ContractError("input node does not precede its consumer");
    }
    nodes_.push_back(Node{op, std::move(inputs), std::move(value), Tensor(), needs, std::move(fn)});
    return Var{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

inline const Tensor& Var::value() const { return graph->value(id); }
inline const Tensor& Var::grad() const { return graph->grad(id); }

namespace detail {

inline void same_graph(Var a, Var b, const char* op) {
  if (a.graph != b.graph) throw ContractError(std::string(op) + ": operands on different graphs");
}

inline double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// C = A·B for A[M×K], B[K×N].
inline Var matmul(Var a, Var b) {
  detail::same_graph(a, b, "matmul");
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + shape_string(A.shape()) + " by " +
                         shape_string(B.shape()));
  }
  const std::size_t M = A.dim(0), K = A.dim(1), N = B.dim(1);
  Tensor C({M, N});
  for (std::size_t i = 0; i < M; ++i) {
    for (std::size_t k = 0; k < K; ++k) {
      const double aik = A.at(i, k);
      for (std::size_t j = 0; j < N; ++j) C.at(i, j) += aik * B.at(k, j);
    }
  }
  return a.graph->record("matmul", {a.id, b.id}, std::move(C), [M, K, N](Graph& g, std::size_t self) {
    const auto& in = g.inputs(self);
    const Tensor& G = g.grad(self);
    const Tensor& A = g.value(in[0]);
    const Tensor& B = g.value(in[1]);
    if (Tensor* dA = g.grad_sink(in[0])) {
      // dA = G·Bᵀ
      for (std::size_t i = 0; i < M; ++i)
        for (std::size_t k = 0; k < K; ++k) {
          double s = 0.0;
          for (std::size_t j = 0; j < N; ++j) s += G.at(i, j) * B.at(k, j);
          dA->at(i, k) += s;
        }
    }
    if (Tensor* dB = g.grad_sink(in[1])) {
      // dB = Aᵀ·G
      for (std::size_t i = 0; i < M; ++i)
        for (std::size_t k = 0; k < K; ++k) {
          const double aik = A.at(i, k);
          for (std::size_t j = 0; j < N; ++j) dB->at(k, j) += aik * G.at(i, j);
        }
    }
  });
}

inline Var transpose(Var a) {
  const Tensor& A = a.value();
  if (A.rank() != 2) throw DimensionError("transpose: rank-2 tensor required, got " + shape_string(A.shape()));
  const std::size_t R = A.dim(0), C = A.dim(1);
  Tensor T({C, R});
  for (std::size_t i = 0; i < R; ++i)
    for (std::size_t j = 0; j < C; ++j) T.at(j, i) = A.at(i, j);
  return a.graph->record("transpose", {a.id}, std::move(T), [R, C](Graph& g, std::size_t self) {
    const Tensor& G = g.grad(self);
    Tensor* dA = g.grad_sink(g.inputs(self)[0]);
    for (std::size_t i = 0; i < R; ++i)
      for (std::size_t j = 0; j < C; ++j) dA->at(i, j) += G.at(j, i);
  });
}

/// Reinterprets the payload under a new shape with the same element count.
inline Var reshape(Var a, Shape shape) {
  const Tensor& A = a.value();
  if (shape_numel(shape) != A.numel()) {
    throw DimensionError("reshape: " + shape_string(A.shape()) + " to " + shape_string(shape));
  }
  return a.graph->record("reshape", {a.id}, A.reshaped(std::move(shape)), [](Graph& g, std::size_t self) {
    const Tensor& G = g.grad(self);
    Tensor* dA = g.grad_sink(g.inputs(self)[0]);
    for (std::size_t i = 0; i < G.numel(); ++i) (*dA)[i] += G[i];
  });
}

/// Softmax down each column of an R×C matrix, shifted by the column max.
inline Var softmax_columns(Var x) {
  const Tensor& X = x.value();
  if (X.rank() != 2) throw DimensionError("softmax_columns: rank-2 tensor required, got " + shape_string(X.shape()));
  const std::size_t R = X.dim(0), C = X.dim(1);
  Tensor Y({R, C});
  for (std::size_t j = 0; j < C; ++j) {
    double mx = X.at(0, j);
    for (std::size_t i = 1; i < R; ++i) mx = std::max(mx, X.at(i, j));
    double z = 0.0;
    for (std::size_t i = 0; i < R; ++i) {
      const double e = std::exp(X.at(i, j) - mx);
      Y.at(i, j) = e;
      z += e;
    }
    for (std::size_t i = 0; i < R; ++i) Y.at(i, j) /= z;
  }
  return x.graph->record("softmax_columns", {x.id}, std::move(Y), [R, C](Graph& g, std::size_t self) {
    const Tensor& G = g.grad(self);
    const Tensor& Y = g.value(self);
    Tensor* dX = g.grad_sink(g.inputs(self)[0]);
    for (std::size_t j = 0; j < C; ++j) {
      double dot = 0.0;
      for (std::size_t i = 0; i < R; ++i) dot += G.at(i, j) * Y.at(i, j);
      for (std::size_t i = 0; i < R; ++i) dX->at(i, j) += Y.at(i, j) * (G.at(i, j) - dot);
    }
  });
}

inline Var sigmoid(Var x) {
  const Tensor& X = x.value();
  Tensor Y(X.shape());
  for (std::size_t i = 0; i < X.numel(); ++i) Y[i] = detail::stable_sigmoid(X[i]);
  return x.graph->record("sigmoid", {x.id}, std::move(Y), [](Graph& g, std::size_t self) {
    const Tensor& G = g.grad(self);
    const Tensor& Y = g.value(self);
    Tensor* dX = g.grad_sink(g.inputs(self)[0]);
    for (std::size_t i = 0; i < Y.numel(); ++i) (*dX)[i] += G[i] * Y[i] * (1.0 - Y[i]);
  });
}

inline Var relu(Var x) {
  const Tensor& X = x.value();
  Tensor Y(X.shape());
  for (std::size_t i = 0; i < X.numel(); ++i) Y[i] = X[i] > 0.0 ? X[i] : 0.0;
  return x.graph->record("relu", {x.id}, std::move(Y), [](Graph& g, std::size_t self) {
    const Tensor& G = g.grad(self);
    const Tensor& X = g.value(g.inputs(self)[0]);
    Tensor* dX = g.grad_sink(g.inputs(self)[0]);
    for (std::size_t i = 0; i < X.numel(); ++i)
      if (X[i] > 0.0) (*dX)[i] += G[i];
  });
}

/// Global average pooling: K×H×W → K.
inline Var gap(Var s) {
  const Tensor& S = s.value();
  if (S.rank() != 3) throw DimensionError("gap: K×H×W tensor required, got " + shape_string(S.shape()));
  const std::size_t K = S.dim(0), HW = S.dim(1) * S.dim(2);
  if (HW == 0) throw DimensionError("gap: empty spatial extent");
  Tensor out({K});
  for (std::size_t k = 0; k < K; ++k) {
    double acc = 0.0;
    for (std::size_t p = 0; p < HW; ++p) acc += S[k * HW + p];
    out[k] = acc / static_cast<double>(HW);
  }
  return s.graph->record("gap", {s.id}, std::move(out), [K, HW](Graph& g, std::size_t self) {
    const Tensor& G = g.grad(self);
    Tensor* dS = g.grad_sink(g.inputs(self)[0]);
    const double inv = 1.0 / static_cast<double>(HW);
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t p = 0; p < HW; ++p) (*dS)[k * HW + p] += G[k] * inv;
  });
}

/// f[c,h,w]·a[h,w], the spatial map repeated along channels.
inline Var mul_broadcast(Var f, Var a) {
  detail::same_graph(f, a, "mul_broadcast");
  const Tensor& F = f.value();
  const Tensor& A = a.value();
  if (F.rank() != 3 || A.rank() != 2 || F.dim(1) != A.dim(0) || F.dim(2) != A.dim(1)) {
    throw DimensionError("mul_broadcast: spatial mismatch between " + shape_string(F.shape()) + " and " +
                         shape_string(A.shape()));
  }
  const std::size_t C = F.dim(0), HW = A.numel();
  Tensor out(F.shape());
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t p = 0; p < HW; ++p) out[c * HW + p] = F[c * HW + p] * A[p];
  return f.graph->record("mul_broadcast", {f.id, a.id}, std::move(out), [C, HW](Graph& g, std::size_t self) {
    const auto& in = g.inputs(self);
    const Tensor& G = g.grad(self);
    const Tensor& F = g.value(in[0]);
    const Tensor& A = g.value(in[1]);
    if (Tensor* dF = g.grad_sink(in[0])) {
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t p = 0; p < HW; ++p) (*dF)[c * HW + p] += G[c * HW + p] * A[p];
    }
    if (Tensor* dA = g.grad_sink(in[1])) {
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t p = 0; p < HW; ++p) (*dA)[p] += G[c * HW + p] * F[c * HW + p];
    }
  });
}

/// 1 − x, elementwise.
inline Var one_minus(Var x) {
  const Tensor& X = x.value();
  Tensor Y(X.shape());
  for (std::size_t i = 0; i < X.numel(); ++i) Y[i] = 1.0 - X[i];
  return x.graph->record("one_minus", {x.id}, std::move(Y), [](Graph& g, std::size_t self) {
    const Tensor& G = g.grad(self);
    Tensor* dX = g.grad_sink(g.inputs(self)[0]);
    for (std::size_t i = 0; i < G.numel(); ++i) (*dX)[i] -= G[i];
  });
}

inline Var add(Var a, Var b) {
  detail::same_graph(a, b, "add");
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.shape() != B.shape()) {
    throw DimensionError("add: " + shape_string(A.shape()) + " vs " + shape_string(B.shape()));
  }
  Tensor out(A.shape());
  for (std::size_t i = 0; i < A.numel(); ++i) out[i] = A[i] + B[i];
  return a.graph->record("add", {a.id, b.id}, std::move(out), [](Graph& g, std::size_t self) {
    const Tensor& G = g.grad(self);
    for (auto i : g.inputs(self)) {
      if (Tensor* d = g.grad_sink(i))
        for (std::size_t k = 0; k < G.numel(); ++k) (*d)[k] += G[k];
    }
  });
}

/// Sum of all elements as a 1-element tensor.
inline Var sum(Var x) {
  const Tensor& X = x.value();
  double s = 0.0;
  for (double v : X.data()) s += v;
  return x.graph->record("sum", {x.id}, Tensor::scalar(s), [](Graph& g, std::size_t self) {
    const double G = g.grad(self)[0];
    Tensor* dX = g.grad_sink(g.inputs(self)[0]);
    for (std::size_t i = 0; i < dX->numel(); ++i) (*dX)[i] += G;
  });
}

/// Cross-correlation of x[Cin×H×W] with kernel[Cout×Cin×k×k]; k odd and square.
inline Var conv2d(Var x, Var kernel, std::size_t stride, std::size_t pad) {
  detail::same_graph(x, kernel, "conv2d");
  const Tensor& X = x.value();
  const Tensor& Kt = kernel.value();
  if (X.rank() != 3 || Kt.rank() != 4 || Kt.dim(1) != X.dim(0) || Kt.dim(2) != Kt.dim(3)) {
    throw DimensionError("conv2d: input " + shape_string(X.shape()) + " incompatible with kernel " +
                         shape_string(Kt.shape()));
  }
  if (Kt.dim(2) % 2 == 0) throw DimensionError("conv2d: kernel size must be odd, got " + std::to_string(Kt.dim(2)));
  if (stride == 0) throw DimensionError("conv2d: stride must be positive");
  const std::size_t Cin = X.dim(0), H = X.dim(1), W = X.dim(2);
  const std::size_t Cout = Kt.dim(0), k = Kt.dim(2);
  if (H + 2 * pad < k || W + 2 * pad < k) {
    throw DimensionError("conv2d: nonpositive output extent for input " + shape_string(X.shape()) +
                         " with kernel " + std::to_string(k) + " and pad " + std::to_string(pad));
  }
  const std::size_t Ho = (H + 2 * pad - k) / stride + 1;
  const std::size_t Wo = (W + 2 * pad - k) / stride + 1;
  const auto ip = static_cast<std::ptrdiff_t>(pad);

  // Visits every (output, input, kernel) triple that falls inside the image.
  auto for_taps = [=](auto&& body) {
    for (std::size_t co = 0; co < Cout; ++co)
      for (std::size_t ci = 0; ci < Cin; ++ci)
        for (std::size_t kh = 0; kh < k; ++kh)
          for (std::size_t kw = 0; kw < k; ++kw) {
            const std::size_t kidx = ((co * Cin + ci) * k + kh) * k + kw;
            for (std::size_t oh = 0; oh < Ho; ++oh) {
              const auto ih = static_cast<std::ptrdiff_t>(oh * stride + kh) - ip;
              if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
              for (std::size_t ow = 0; ow < Wo; ++ow) {
                const auto iw = static_cast<std::ptrdiff_t>(ow * stride + kw) - ip;
                if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) continue;
                const std::size_t xidx = (ci * H + static_cast<std::size_t>(ih)) * W + static_cast<std::size_t>(iw);
                const std::size_t oidx = (co * Ho + oh) * Wo + ow;
                body(oidx, xidx, kidx);
              }
            }
          }
  };

  Tensor Y({Cout, Ho, Wo});
  for_taps([&](std::size_t o, std::size_t i, std::size_t kk) { Y[o] += X[i] * Kt[kk]; });

  return x.graph->record("conv2d", {x.id, kernel.id}, std::move(Y), [for_taps](Graph& g, std::size_t self) {
    const auto& in = g.inputs(self);
    const Tensor& G = g.grad(self);
    const Tensor& X = g.value(in[0]);
    const Tensor& Kt = g.value(in[1]);
    Tensor* dX = g.grad_sink(in[0]);
    Tensor* dK = g.grad_sink(in[1]);
    if (dX) for_taps([&](std::size_t o, std::size_t i, std::size_t kk) { (*dX)[i] += G[o] * Kt[kk]; });
    if (dK) for_taps([&](std::size_t o, std::size_t i, std::size_t kk) { (*dK)[kk] += G[o] * X[i]; });
  });
}

/// x[C×H×W] + bias[C] per channel.
inline Var add_channel_bias(Var x, Var bias) {
  detail::same_graph(x, bias, "add_channel_bias");
  const Tensor& X = x.value();
  const Tensor& B = bias.value();
  if (X.rank() != 3 || B.rank() != 1 || B.dim(0) != X.dim(0)) {
    throw DimensionError("add_channel_bias: " + shape_string(X.shape()) + " with bias " + shape_string(B.shape()));
  }
  const std::size_t C = X.dim(0), HW = X.dim(1) * X.dim(2);
  Tensor Y(X.shape());
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t p = 0; p < HW; ++p) Y[c * HW + p] = X[c * HW + p] + B[c];
  return x.graph->record("add_channel_bias", {x.id, bias.id}, std::move(Y), [C, HW](Graph& g, std::size_t self) {
    const auto& in = g.inputs(self);
    const Tensor& G = g.grad(self);
    if (Tensor* dX = g.grad_sink(in[0]))
      for (std::size_t i = 0; i < G.numel(); ++i) (*dX)[i] += G[i];
    if (Tensor* dB = g.grad_sink(in[1]))
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t p = 0; p < HW; ++p) (*dB)[c] += G[c * HW + p];
  });
}

/// Mean over K of the logistic loss, in the stable form
/// max(s,0) − s·t + log(1 + e^{−|s|}).
inline Var sigmoid_cross_entropy(Var scores, const std::vector<double>& target) {
  const Tensor& S = scores.value();
  if (S.numel() != target.size()) {
    throw DimensionError("sigmoid_cross_entropy: " + std::to_string(S.numel()) + " scores vs " +
                         std::to_string(target.size()) + " targets");
  }
  const std::size_t K = S.numel();
  double loss = 0.0;
  for (std::size_t k = 0; k < K; ++k) {
    const double s = S[k];
    loss += std::max(s, 0.0) - s * target[k] + std::log1p(std::exp(-std::abs(s)));
  }
  loss /= static_cast<double>(K);
  return scores.graph->record("sigmoid_cross_entropy", {scores.id}, Tensor::scalar(loss),
                              [target, K](Graph& g, std::size_t self) {
                                const double G = g.grad(self)[0];
                                const std::size_t in = g.inputs(self)[0];
                                const Tensor& S = g.value(in);
                                Tensor* dS = g.grad_sink(in);
                                const double inv = 1.0 / static_cast<double>(K);
                                for (std::size_t k = 0; k < K; ++k)
                                  (*dS)[k] += G * inv * (detail::stable_sigmoid(S[k]) - target[k]);
                              });
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

/// Central-difference gradient of a scalar function.
template <typename F>
Tensor finite_diff_grad(F&& f, const Tensor& x, double eps = 1e-5) {
  if (!(eps > 0.0)) throw ContractError("finite_diff_grad: eps must be positive");
  Tensor grad(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double up = f(static_cast<const Tensor&>(probe));
    probe[i] = orig - eps;
    const double down = f(static_cast<const Tensor&>(probe));
    probe[i] = orig;
    grad[i] = (up - down) / (2.0 * eps);
  }
  return grad;
}

/// |a − b| / max(|a|, |b|, floor). The floor keeps near-zero gradients from
/// turning round-off into large relative errors.
inline double relative_error(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline double max_relative_error(const Tensor& a, const Tensor& b, double floor = 1e-6) {
  if (a.shape() != b.shape()) {
    throw DimensionError("max_relative_error: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, relative_error(a[i], b[i], floor));
  return m;
}

}  // namespace coattn
