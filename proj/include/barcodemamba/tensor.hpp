#pragma once

// Reverse-mode automatic differentiation over dense row-major matrices.
//
// A Tensor is a shared handle to a graph node holding a value, an optional
// gradient and, for op results, the closure that pushes the node's gradient
// into its parents. Every tensor is two-dimensional; a batch of equal-length
// sequences is packed along rows (batch * length) and sequence-aware ops take
// the segment length explicitly.

#include <algorithm>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "barcodemamba/common.hpp"

namespace bm {

namespace detail {
inline thread_local bool grad_mode = true;
}

inline bool grad_enabled() { return detail::grad_mode; }

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode) { detail::grad_mode = false; }
  ~NoGradGuard() { detail::grad_mode = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <typename S>
struct Node {
  Matrix<S> value;
  Matrix<S> grad;
  bool requires_grad = false;
  bool has_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(const Matrix<S>&)> backward;

  template <typename Derived>
  void accumulate(const Eigen::MatrixBase<Derived>& g) {
    if (!has_grad) {
      grad = g;
      has_grad = true;
    } else {
      grad += g;
    }
  }

  // Gradient buffer for sparse writes (scatter-style backward).
  Matrix<S>& grad_buffer() {
    if (!has_grad) {
      grad = Matrix<S>::Zero(value.rows(), value.cols());
      has_grad = true;
    }
    return grad;
  }
};

template <typename S>
class Tensor {
 public:
  using Scalar = S;

  Tensor() = default;
  explicit Tensor(Matrix<S> value, bool requires_grad = false)
      : node_(std::make_shared<Node<S>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  static Tensor constant(Matrix<S> value) { return Tensor(std::move(value), false); }
  static Tensor parameter(Matrix<S> value) { return Tensor(std::move(value), true); }
  static Tensor scalar(S v) {
    Matrix<S> m(1, 1);
    m(0, 0) = v;
    return constant(std::move(m));
  }

  bool defined() const { return static_cast<bool>(node_); }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  Index size() const { return node_->value.size(); }

  const Matrix<S>& value() const { return node_->value; }
  Matrix<S>& mutable_value() { return node_->value; }
  S item() const {
    if (size() != 1) throw ShapeError("item() on a non-scalar tensor");
    return node_->value(0, 0);
  }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return node_->has_grad; }
  const Matrix<S>& grad() const {
    if (!node_->has_grad) throw ShapeError("gradient requested before backward()");
    return node_->grad;
  }
  void zero_grad() {
    node_->grad.resize(0, 0);
    node_->has_grad = false;
  }

  // Seeds d(self)/d(self) = 1 and propagates through the recorded graph.
  void backward() const;

  Node<S>* node() const { return node_.get(); }
  const std::shared_ptr<Node<S>>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node<S>> node_;
};

template <typename S>
void Tensor<S>::backward() const {
  if (!node_) throw ShapeError("backward() on an undefined tensor");
  if (size() != 1) throw ShapeError("backward() requires a scalar loss root");
  if (!node_->requires_grad) throw ShapeError("loss does not depend on any parameter");

  // Iterative post-order DFS gives a topological order.
  std::vector<Node<S>*> order;
  std::unordered_set<Node<S>*> visited;
  std::vector<std::pair<Node<S>*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node<S>* p = n->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  node_->accumulate(Matrix<S>::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<S>* n = *it;
    if (n->backward && n->has_grad) n->backward(n->grad);
  }
}

namespace detail {

inline void require(bool ok, const char* op, const std::string& what) {
  if (!ok) throw ShapeError(std::string(op) + ": " + what);
}

template <typename S>
std::string shape_str(const Tensor<S>& t) {
  return "(" + std::to_string(t.rows()) + "x" + std::to_string(t.cols()) + ")";
}

// Creates an op result. The closure receives the output gradient and must
// accumulate into parents that require gradients.
template <typename S, typename Fn>
Tensor<S> make_result(Matrix<S> value, std::initializer_list<Tensor<S>> parents, Fn&& backward) {
  bool needs = false;
  if (grad_enabled())
    for (const auto& p : parents) needs = needs || p.requires_grad();
  Tensor<S> out(std::move(value), needs);
  if (needs) {
    Node<S>* n = out.node();
    for (const auto& p : parents) n->parents.push_back(p.node_ptr());
    n->backward = std::forward<Fn>(backward);
  }
  return out;
}

template <typename S>
bool wants(const Tensor<S>& t) {
  return t.requires_grad();
}

inline void check_segments(Index rows, Index seg_len, const char* op) {
  require(seg_len >= 1 && rows % seg_len == 0, op,
          "row count " + std::to_string(rows) + " is not a multiple of segment length " +
              std::to_string(seg_len));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and linear-algebra ops

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require(a.cols() == b.rows(), "matmul",
                  detail::shape_str(a) + " * " + detail::shape_str(b));
  Matrix<S> v = a.value() * b.value();
  auto* an = a.node();
  auto* bn = b.node();
  return detail::make_result<S>(std::move(v), {a, b}, [an, bn](const Matrix<S>& g) {
    if (an->requires_grad) an->accumulate(g * bn->value.transpose());
    if (bn->requires_grad) bn->accumulate(an->value.transpose() * g);
  });
}

// a * b^T without materializing the transpose in the graph.
template <typename S>
Tensor<S> matmul_nt(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require(a.cols() == b.cols(), "matmul_nt",
                  detail::shape_str(a) + " * " + detail::shape_str(b) + "^T");
  Matrix<S> v = a.value() * b.value().transpose();
  auto* an = a.node();
  auto* bn = b.node();
  return detail::make_result<S>(std::move(v), {a, b}, [an, bn](const Matrix<S>& g) {
    if (an->requires_grad) an->accumulate(g * bn->value);
    if (bn->requires_grad) bn->accumulate(g.transpose() * an->value);
  });
}

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "add",
                  detail::shape_str(a) + " + " + detail::shape_str(b));
  Matrix<S> v = a.value() + b.value();
  auto* an = a.node();
  auto* bn = b.node();
  return detail::make_result<S>(std::move(v), {a, b}, [an, bn](const Matrix<S>& g) {
    if (an->requires_grad) an->accumulate(g);
    if (bn->requires_grad) bn->accumulate(g);
  });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "sub",
                  detail::shape_str(a) + " - " + detail::shape_str(b));
  Matrix<S> v = a.value() - b.value();
  auto* an = a.node();
  auto* bn = b.node();
  return detail::make_result<S>(std::move(v), {a, b}, [an, bn](const Matrix<S>& g) {
    if (an->requires_grad) an->accumulate(g);
    if (bn->requires_grad) bn->accumulate(-g);
  });
}

// Adds a 1 x n row to every row of an m x n tensor (the only broadcast).
template <typename S>
Tensor<S> add_row(const Tensor<S>& a, const Tensor<S>& row) {
  detail::require(row.rows() == 1 && row.cols() == a.cols(), "add_row",
                  detail::shape_str(a) + " + " + detail::shape_str(row));
  Matrix<S> v = a.value().rowwise() + row.value().row(0);
  auto* an = a.node();
  auto* rn = row.node();
  return detail::make_result<S>(std::move(v), {a, row}, [an, rn](const Matrix<S>& g) {
    if (an->requires_grad) an->accumulate(g);
    if (rn->requires_grad) rn->accumulate(g.colwise().sum());
  });
}

// Multiplies every row of an m x n tensor by a 1 x n row, elementwise.
template <typename S>
Tensor<S> mul_row(const Tensor<S>& a, const Tensor<S>& row) {
  detail::require(row.rows() == 1 && row.cols() == a.cols(), "mul_row",
                  detail::shape_str(a) + " * " + detail::shape_str(row));
  Matrix<S> v = a.value().array().rowwise() * row.value().row(0).array();
  auto* an = a.node();
  auto* rn = row.node();
  return detail::make_result<S>(std::move(v), {a, row}, [an, rn](const Matrix<S>& g) {
    if (an->requires_grad)
      an->accumulate((g.array().rowwise() * rn->value.row(0).array()).matrix());
    if (rn->requires_grad)
      rn->accumulate((g.array() * an->value.array()).colwise().sum().matrix());
  });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "mul",
                  detail::shape_str(a) + " .* " + detail::shape_str(b));
  Matrix<S> v = a.value().cwiseProduct(b.value());
  auto* an = a.node();
  auto* bn = b.node();
  return detail::make_result<S>(std::move(v), {a, b}, [an, bn](const Matrix<S>& g) {
    if (an->requires_grad) an->accumulate(g.cwiseProduct(bn->value));
    if (bn->requires_grad) bn->accumulate(g.cwiseProduct(an->value));
  });
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S factor) {
  Matrix<S> v = a.value() * factor;
  auto* an = a.node();
  return detail::make_result<S>(std::move(v), {a},
                                [an, factor](const Matrix<S>& g) { an->accumulate(g * factor); });
}

template <typename S>
Tensor<S> neg(const Tensor<S>& a) {
  return scale(a, S(-1));
}

template <typename S>
Tensor<S> exp(const Tensor<S>& a) {
  Matrix<S> v = a.value().array().exp().matrix();
  auto* an = a.node();
  auto out = detail::make_result<S>(v, {a}, [an](const Matrix<S>&) {});
  if (out.requires_grad()) {
    Node<S>* on = out.node();
    on->backward = [an, on](const Matrix<S>& g) { an->accumulate(g.cwiseProduct(on->value)); };
  }
  return out;
}

namespace detail {
template <typename S>
S sigmoid(S x) {
  return x >= 0 ? S(1) / (S(1) + std::exp(-x)) : std::exp(x) / (S(1) + std::exp(x));
}
template <typename S>
S softplus(S x) {
  return x > S(20) ? x : std::log1p(std::exp(x));
}
}  // namespace detail

template <typename S>
Tensor<S> silu(const Tensor<S>& a) {
  Matrix<S> v = a.value().unaryExpr([](S x) { return x * detail::sigmoid(x); });
  auto* an = a.node();
  return detail::make_result<S>(std::move(v), {a}, [an](const Matrix<S>& g) {
    Matrix<S> d = an->value.unaryExpr([](S x) {
      const S s = detail::sigmoid(x);
      return s * (S(1) + x * (S(1) - s));
    });
    an->accumulate(g.cwiseProduct(d));
  });
}

template <typename S>
Tensor<S> softplus(const Tensor<S>& a) {
  Matrix<S> v = a.value().unaryExpr([](S x) { return detail::softplus(x); });
  auto* an = a.node();
  return detail::make_result<S>(std::move(v), {a}, [an](const Matrix<S>& g) {
    an->accumulate(g.cwiseProduct(an->value.unaryExpr([](S x) { return detail::sigmoid(x); })));
  });
}

template <typename S>
Tensor<S> transpose(const Tensor<S>& a) {
  Matrix<S> v = a.value().transpose();
  auto* an = a.node();
  return detail::make_result<S>(std::move(v), {a},
                                [an](const Matrix<S>& g) { an->accumulate(g.transpose()); });
}

// Row-major reinterpretation with the same element count.
template <typename S>
Tensor<S> reshape(const Tensor<S>& a, Index rows, Index cols) {
  detail::require(rows * cols == a.size(), "reshape",
                  detail::shape_str(a) + " -> (" + std::to_string(rows) + "x" +
                      std::to_string(cols) + ")");
  Matrix<S> v = Eigen::Map<const Matrix<S>>(a.value().data(), rows, cols);
  auto* an = a.node();
  const Index r0 = a.rows(), c0 = a.cols();
  return detail::make_result<S>(std::move(v), {a}, [an, r0, c0](const Matrix<S>& g) {
    an->accumulate(Eigen::Map<const Matrix<S>>(g.data(), r0, c0));
  });
}

template <typename S>
Tensor<S> slice_cols(const Tensor<S>& a, Index start, Index count) {
  detail::require(start >= 0 && count >= 0 && start + count <= a.cols(), "slice_cols",
                  "range out of bounds for " + detail::shape_str(a));
  Matrix<S> v = a.value().middleCols(start, count);
  auto* an = a.node();
  return detail::make_result<S>(std::move(v), {a}, [an, start, count](const Matrix<S>& g) {
    an->grad_buffer().middleCols(start, count) += g;
  });
}

template <typename S>
Tensor<S> sum(const Tensor<S>& a) {
  Matrix<S> v(1, 1);
  v(0, 0) = a.value().sum();
  auto* an = a.node();
  return detail::make_result<S>(std::move(v), {a}, [an](const Matrix<S>& g) {
    an->accumulate(Matrix<S>::Constant(an->value.rows(), an->value.cols(), g(0, 0)));
  });
}

template <typename S>
Tensor<S> mean(const Tensor<S>& a) {
  return scale(sum(a), S(1) / static_cast<S>(a.size()));
}

// ---------------------------------------------------------------------------
// Network ops

inline constexpr double kLayerNormEps = 1e-5;

// Row-wise layer normalization followed by per-column gain and bias.
template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias,
                     S eps = S(kLayerNormEps)) {
  detail::require(gain.rows() == 1 && gain.cols() == x.cols() && bias.rows() == 1 &&
                      bias.cols() == x.cols(),
                  "layer_norm", "gain/bias must be 1 x " + std::to_string(x.cols()));
  const Index m = x.rows(), n = x.cols();
  auto xhat = std::make_shared<Matrix<S>>(m, n);
  auto inv_std = std::make_shared<RowVector<S>>(m);
  for (Index i = 0; i < m; ++i) {
    const auto row = x.value().row(i);
    const S mu = row.mean();
    const S var = (row.array() - mu).square().mean();
    const S is = S(1) / std::sqrt(var + eps);
    (*inv_std)(i) = is;
    xhat->row(i) = (row.array() - mu) * is;
  }
  Matrix<S> v = (xhat->array().rowwise() * gain.value().row(0).array()).rowwise() +
                bias.value().row(0).array();
  auto* xn = x.node();
  auto* gn = gain.node();
  auto* bn = bias.node();
  return detail::make_result<S>(
      std::move(v), {x, gain, bias}, [xn, gn, bn, xhat, inv_std, n](const Matrix<S>& g) {
        if (gn->requires_grad) gn->accumulate(g.cwiseProduct(*xhat).colwise().sum());
        if (bn->requires_grad) bn->accumulate(g.colwise().sum());
        if (xn->requires_grad) {
          Matrix<S> dxhat = g.array().rowwise() * gn->value.row(0).array();
          Matrix<S> dx(dxhat.rows(), n);
          for (Index i = 0; i < dxhat.rows(); ++i) {
            const S m1 = dxhat.row(i).mean();
            const S m2 = dxhat.row(i).cwiseProduct(xhat->row(i)).mean();
            dx.row(i) = (*inv_std)(i) *
                        (dxhat.row(i).array() - m1 - xhat->row(i).array() * m2).matrix();
          }
          xn->accumulate(dx);
        }
      });
}

// Mean cross-entropy of row-wise softmax(logits) against targets, over rows
// whose weight mask is nonzero. Masked rows receive exactly zero gradient.
template <typename S>
Tensor<S> softmax_cross_entropy(const Tensor<S>& logits, std::span<const int> targets,
                                std::span<const std::uint8_t> mask) {
  const Index m = logits.rows(), v = logits.cols();
  detail::require(static_cast<Index>(targets.size()) == m && static_cast<Index>(mask.size()) == m,
                  "softmax_cross_entropy", "targets/mask length must equal row count");
  Index count = 0;
  for (auto w : mask) count += w ? 1 : 0;
  detail::require(count > 0, "softmax_cross_entropy", "no unmasked positions");
  auto probs = std::make_shared<Matrix<S>>(m, v);
  S total = 0;
  for (Index i = 0; i < m; ++i) {
    if (!mask[static_cast<std::size_t>(i)]) {
      probs->row(i).setZero();
      continue;
    }
    const int t = targets[static_cast<std::size_t>(i)];
    detail::require(t >= 0 && t < v, "softmax_cross_entropy", "target out of range");
    const auto row = logits.value().row(i);
    const S mx = row.maxCoeff();
    probs->row(i) = (row.array() - mx).exp();
    const S z = probs->row(i).sum();
    probs->row(i) /= z;
    total += std::log(z) + mx - row(t);
  }
  Matrix<S> out(1, 1);
  out(0, 0) = total / static_cast<S>(count);
  auto* ln = logits.node();
  std::vector<int> tg(targets.begin(), targets.end());
  std::vector<std::uint8_t> mk(mask.begin(), mask.end());
  return detail::make_result<S>(
      std::move(out), {logits},
      [ln, probs, tg = std::move(tg), mk = std::move(mk), count](const Matrix<S>& g) {
        const S s = g(0, 0) / static_cast<S>(count);
        Matrix<S> d = *probs;
        for (Index i = 0; i < d.rows(); ++i)
          if (mk[static_cast<std::size_t>(i)]) d(i, tg[static_cast<std::size_t>(i)]) -= S(1);
        ln->accumulate(d * s);
      });
}

// Inclusive cumulative sum down the rows, restarting every seg_len rows.
template <typename S>
Tensor<S> cumsum(const Tensor<S>& x, Index seg_len) {
  detail::check_segments(x.rows(), seg_len, "cumsum");
  Matrix<S> v = x.value();
  for (Index s0 = 0; s0 < v.rows(); s0 += seg_len)
    for (Index t = 1; t < seg_len; ++t) v.row(s0 + t) += v.row(s0 + t - 1);
  auto* xn = x.node();
  return detail::make_result<S>(std::move(v), {x}, [xn, seg_len](const Matrix<S>& g) {
    Matrix<S> d = g;
    for (Index s0 = 0; s0 < d.rows(); s0 += seg_len)
      for (Index t = seg_len - 2; t >= 0; --t) d.row(s0 + t) += d.row(s0 + t + 1);
    xn->accumulate(d);
  });
}

// Depthwise causal convolution along rows within each segment:
//   y[t, c] = bias[c] + sum_j kernel[j, c] * x[t - (w - 1) + j, c]
// with zero padding before the segment start.
template <typename S>
Tensor<S> conv1d_causal(const Tensor<S>& x, const Tensor<S>& kernel, const Tensor<S>& bias,
                        Index seg_len) {
  detail::check_segments(x.rows(), seg_len, "conv1d_causal");
  detail::require(kernel.cols() == x.cols() && bias.rows() == 1 && bias.cols() == x.cols(),
                  "conv1d_causal", "kernel must be w x C and bias 1 x C");
  const Index w = kernel.rows();
  const auto& xv = x.value();
  const auto& kv = kernel.value();
  Matrix<S> v(xv.rows(), xv.cols());
  for (Index s0 = 0; s0 < xv.rows(); s0 += seg_len) {
    for (Index t = 0; t < seg_len; ++t) {
      auto out = v.row(s0 + t);
      out = bias.value().row(0);
      for (Index j = 0; j < w; ++j) {
        const Index src = t - (w - 1) + j;
        if (src < 0) continue;
        out += kv.row(j).cwiseProduct(xv.row(s0 + src));
      }
    }
  }
  auto* xn = x.node();
  auto* kn = kernel.node();
  auto* bn = bias.node();
  return detail::make_result<S>(
      std::move(v), {x, kernel, bias}, [xn, kn, bn, seg_len, w](const Matrix<S>& g) {
        if (bn->requires_grad) bn->accumulate(g.colwise().sum());
        const bool gx = xn->requires_grad, gk = kn->requires_grad;
        if (!gx && !gk) return;
        Matrix<S> dx, dk;
        if (gx) dx = Matrix<S>::Zero(xn->value.rows(), xn->value.cols());
        if (gk) dk = Matrix<S>::Zero(w, xn->value.cols());
        for (Index s0 = 0; s0 < g.rows(); s0 += seg_len) {
          for (Index t = 0; t < seg_len; ++t) {
            const auto gt = g.row(s0 + t);
            for (Index j = 0; j < w; ++j) {
              const Index src = t - (w - 1) + j;
              if (src < 0) continue;
              if (gx) dx.row(s0 + src) += gt.cwiseProduct(kn->value.row(j));
              if (gk) dk.row(j) += gt.cwiseProduct(xn->value.row(s0 + src));
            }
          }
        }
        if (gx) xn->accumulate(dx);
        if (gk) kn->accumulate(dk);
      });
}

// Row gather from an embedding table; gradients scatter-add back.
template <typename S>
Tensor<S> embedding(const Tensor<S>& table, std::span<const int> ids) {
  const Index n = static_cast<Index>(ids.size());
  Matrix<S> v(n, table.cols());
  for (Index i = 0; i < n; ++i) {
    const int id = ids[static_cast<std::size_t>(i)];
    detail::require(id >= 0 && id < table.rows(), "embedding",
                    "token id " + std::to_string(id) + " out of range");
    v.row(i) = table.value().row(id);
  }
  auto* tn = table.node();
  std::vector<int> idv(ids.begin(), ids.end());
  return detail::make_result<S>(std::move(v), {table},
                                [tn, idv = std::move(idv)](const Matrix<S>& g) {
                                  auto& buf = tn->grad_buffer();
                                  for (std::size_t i = 0; i < idv.size(); ++i)
                                    buf.row(idv[i]) += g.row(static_cast<Index>(i));
                                });
}

// Selects rows by index (used for last-token pooling).
template <typename S>
Tensor<S> gather_rows(const Tensor<S>& x, std::span<const Index> rows) {
  Matrix<S> v(static_cast<Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    detail::require(rows[i] >= 0 && rows[i] < x.rows(), "gather_rows", "row out of range");
    v.row(static_cast<Index>(i)) = x.value().row(rows[i]);
  }
  auto* xn = x.node();
  std::vector<Index> rv(rows.begin(), rows.end());
  return detail::make_result<S>(std::move(v), {x}, [xn, rv = std::move(rv)](const Matrix<S>& g) {
    auto& buf = xn->grad_buffer();
    for (std::size_t i = 0; i < rv.size(); ++i) buf.row(rv[i]) += g.row(static_cast<Index>(i));
  });
}

// Mean over the unmasked rows of each segment: (B*L) x d -> B x d.
template <typename S>
Tensor<S> mean_pool(const Tensor<S>& x, Index seg_len, std::span<const std::uint8_t> mask) {
  detail::check_segments(x.rows(), seg_len, "mean_pool");
  detail::require(static_cast<Index>(mask.size()) == x.rows(), "mean_pool",
                  "mask length must equal row count");
  const Index b = x.rows() / seg_len;
  std::vector<S> inv(static_cast<std::size_t>(b));
  Matrix<S> v = Matrix<S>::Zero(b, x.cols());
  for (Index s = 0; s < b; ++s) {
    Index cnt = 0;
    for (Index t = 0; t < seg_len; ++t) {
      if (!mask[static_cast<std::size_t>(s * seg_len + t)]) continue;
      v.row(s) += x.value().row(s * seg_len + t);
      ++cnt;
    }
    if (cnt == 0) throw DataError("mean_pool: sequence has no real tokens");
    inv[static_cast<std::size_t>(s)] = S(1) / static_cast<S>(cnt);
    v.row(s) *= inv[static_cast<std::size_t>(s)];
  }
  auto* xn = x.node();
  std::vector<std::uint8_t> mk(mask.begin(), mask.end());
  return detail::make_result<S>(
      std::move(v), {x}, [xn, seg_len, inv, mk = std::move(mk)](const Matrix<S>& g) {
        Matrix<S> d = Matrix<S>::Zero(xn->value.rows(), xn->value.cols());
        for (Index r = 0; r < d.rows(); ++r)
          if (mk[static_cast<std::size_t>(r)])
            d.row(r) = g.row(r / seg_len) * inv[static_cast<std::size_t>(r / seg_len)];
        xn->accumulate(d);
      });
}

// ---------------------------------------------------------------------------
// Infix sugar for the common cases.

template <typename S>
Tensor<S> operator+(const Tensor<S>& a, const Tensor<S>& b) {
  return add(a, b);
}
template <typename S>
Tensor<S> operator-(const Tensor<S>& a, const Tensor<S>& b) {
  return sub(a, b);
}
template <typename S>
Tensor<S> operator*(const Tensor<S>& a, const Tensor<S>& b) {
  return mul(a, b);
}

}  // namespace bm
