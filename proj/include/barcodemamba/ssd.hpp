#pragma once

// Scan kernels for the two mixer families.
//
// Mamba-2 (SSD), per head with scalar decay a < 0:
//   S_t = exp(dt_t a) S_{t-1} + dt_t B_t^T x_t        (S_t is s x p)
//   y_t = C_t S_t + D x_t
// computed three ways: the sequential recurrence, the materialized
// lower-triangular mixing matrix, and a blocked form that runs the quadratic
// form inside chunks and carries the state between them.
//
// Mamba-1 (selective scan), per channel c with diagonal decay A[c, :] < 0:
//   h_t[c, :] = exp(dt_t[c] A[c, :]) h_{t-1}[c, :] + dt_t[c] x_t[c] B_t
//   y_t[c]    = h_t[c, :] . C_t + D[c] x_t[c]

#include <cmath>
#include <vector>

#include "barcodemamba/tensor.hpp"

namespace bm {

template <typename S>
using ConstBlock = Eigen::Ref<const Matrix<S>, 0, Eigen::OuterStride<>>;
template <typename S>
using MutBlock = Eigen::Ref<Matrix<S>, 0, Eigen::OuterStride<>>;
template <typename S>
using Vector = Eigen::Matrix<S, Eigen::Dynamic, 1>;

inline constexpr Index kMaxQuadraticLength = 4096;

// Inputs of one multi-head SSD scan over a single sequence.
template <typename S>
struct ScanInstance {
  Index heads = 1, head_dim = 1, state_dim = 1;
  Matrix<S> x;      // L x (heads * head_dim)
  Matrix<S> dt;     // L x heads, positive
  Matrix<S> B, C;   // L x (heads * state_dim)
  RowVector<S> A;   // heads, negative

  Index length() const { return x.rows(); }

  void validate() const {
    const Index L = x.rows();
    auto fail = [](const std::string& m) { throw ShapeError("ScanInstance: " + m); };
    if (L < 1) fail("length must be >= 1");
    if (x.cols() != heads * head_dim) fail("x must be L x heads*head_dim");
    if (dt.rows() != L || dt.cols() != heads) fail("dt must be L x heads");
    if (B.rows() != L || B.cols() != heads * state_dim) fail("B must be L x heads*state_dim");
    if (C.rows() != L || C.cols() != heads * state_dim) fail("C must be L x heads*state_dim");
    if (A.size() != heads) fail("A must have one entry per head");
    if (!x.allFinite() || !dt.allFinite() || !B.allFinite() || !C.allFinite() || !A.allFinite())
      throw NumericalError("ScanInstance: non-finite input");
  }
};

// Inputs of one Mamba-1 selective scan over a single sequence.
template <typename S>
struct SelectiveScanInstance {
  Matrix<S> x;    // L x channels
  Matrix<S> dt;   // L x channels, positive
  Matrix<S> A;    // channels x state_dim, negative
  Matrix<S> B, C; // L x state_dim

  Index length() const { return x.rows(); }
  Index channels() const { return x.cols(); }
  Index state_dim() const { return A.cols(); }

  void validate() const {
    const Index L = x.rows();
    auto fail = [](const std::string& m) { throw ShapeError("SelectiveScanInstance: " + m); };
    if (L < 1) fail("length must be >= 1");
    if (dt.rows() != L || dt.cols() != x.cols()) fail("dt must match x");
    if (A.rows() != x.cols()) fail("A must be channels x state_dim");
    if (B.rows() != L || B.cols() != A.cols()) fail("B must be L x state_dim");
    if (C.rows() != L || C.cols() != A.cols()) fail("C must be L x state_dim");
  }
};

namespace kernel {

// exp of the summed log-decay from column j+1 to row i, for j <= i, else 0.
template <typename S>
Matrix<S> decay_matrix(const Vector<S>& log_decay) {
  const Index q = log_decay.size();
  Matrix<S> L = Matrix<S>::Zero(q, q);
  for (Index i = 0; i < q; ++i) {
    S acc = 0;
    for (Index j = i; j >= 0; --j) {
      L(i, j) = std::exp(acc);
      acc += log_decay(j);
    }
  }
  return L;
}

template <typename S>
void ssd_head_naive(const ConstBlock<S>& X, const Vector<S>& dt, const ConstBlock<S>& B,
                    const ConstBlock<S>& C, S a, S d, MutBlock<S> Y) {
  const Index L = X.rows(), p = X.cols(), s = B.cols();
  Matrix<S> state = Matrix<S>::Zero(s, p);
  for (Index t = 0; t < L; ++t) {
    state *= std::exp(dt(t) * a);
    state.noalias() += (dt(t) * B.row(t).transpose()) * X.row(t);
    Y.row(t).noalias() = C.row(t) * state;
    Y.row(t) += d * X.row(t);
  }
}

template <typename S>
Matrix<S> ssd_head_mixing_matrix(const Vector<S>& dt, const ConstBlock<S>& B,
                                 const ConstBlock<S>& C, S a) {
  const Vector<S> log_decay = dt * a;
  Matrix<S> M = decay_matrix<S>(log_decay);
  Matrix<S> cb = C * B.transpose();
  M = M.cwiseProduct(cb);
  M = M.array().rowwise() * dt.transpose().array();
  return M;
}

template <typename S>
void ssd_head_chunked(const ConstBlock<S>& X, const Vector<S>& dt, const ConstBlock<S>& B,
                      const ConstBlock<S>& C, S a, S d, Index chunk, MutBlock<S> Y) {
  const Index L = X.rows(), p = X.cols(), s = B.cols();
  Matrix<S> state = Matrix<S>::Zero(s, p);
  for (Index c0 = 0; c0 < L; c0 += chunk) {
    const Index q = std::min(chunk, L - c0);
    const Vector<S> log_decay = dt.segment(c0, q) * a;
    const Matrix<S> decay = decay_matrix<S>(log_decay);
    const auto Xc = X.middleRows(c0, q);
    const auto Bc = B.middleRows(c0, q);
    const auto Cc = C.middleRows(c0, q);
    Matrix<S> W = (Cc * Bc.transpose()).cwiseProduct(decay);
    W = W.array().rowwise() * dt.segment(c0, q).transpose().array();
    auto Yc = Y.middleRows(c0, q);
    Yc.noalias() = W * Xc;
    // Contribution of the carried state: decay from chunk start through row i.
    Vector<S> in_decay(q);
    for (Index i = 0; i < q; ++i) in_decay(i) = decay(i, 0) * std::exp(log_decay(0));
    Yc.noalias() += in_decay.asDiagonal() * (Cc * state);
    Yc += d * Xc;
    // Carry: state decays across the whole chunk; each input decays from its
    // own row to the chunk end.
    Vector<S> out_w(q);
    for (Index j = 0; j < q; ++j) out_w(j) = decay(q - 1, j) * dt(c0 + j);
    state *= std::exp(log_decay.sum());
    state.noalias() += Bc.transpose() * (out_w.asDiagonal() * Xc);
  }
}

// Reverse pass of the SSD recurrence. Gradients are accumulated (+=).
template <typename S>
void ssd_head_backward(const ConstBlock<S>& X, const Vector<S>& dt, const ConstBlock<S>& B,
                       const ConstBlock<S>& C, S a, S d, const ConstBlock<S>& GY, MutBlock<S> gX,
                       Vector<S>& g_dt, MutBlock<S> gB, MutBlock<S> gC, S& g_a, S& g_d,
                       std::vector<S>& scratch) {
  const Index L = X.rows(), p = X.cols(), s = B.cols();
  const Index block = s * p;
  scratch.assign(static_cast<std::size_t>((L + 1) * block), S(0));
  using StateMap = Eigen::Map<Matrix<S>>;
  // states[t + 1] = S_t, states[0] = 0.
  for (Index t = 0; t < L; ++t) {
    StateMap prev(scratch.data() + t * block, s, p);
    StateMap cur(scratch.data() + (t + 1) * block, s, p);
    cur = std::exp(dt(t) * a) * prev;
    cur.noalias() += (dt(t) * B.row(t).transpose()) * X.row(t);
  }
  Matrix<S> G = Matrix<S>::Zero(s, p);
  Vector<S> tmp_s(s);
  for (Index t = L - 1; t >= 0; --t) {
    StateMap prev(scratch.data() + t * block, s, p);
    StateMap cur(scratch.data() + (t + 1) * block, s, p);
    const S e = std::exp(dt(t) * a);
    G.noalias() += C.row(t).transpose() * GY.row(t);
    gC.row(t).noalias() += GY.row(t) * cur.transpose();
    g_d += GY.row(t).dot(X.row(t));
    gX.row(t) += d * GY.row(t);
    gX.row(t).noalias() += dt(t) * (B.row(t) * G);
    tmp_s.noalias() = G * X.row(t).transpose();
    gB.row(t) += dt(t) * tmp_s.transpose();
    const S gs_prev = G.cwiseProduct(prev).sum();
    g_dt(t) += B.row(t).dot(tmp_s) + a * e * gs_prev;
    g_a += dt(t) * e * gs_prev;
    G *= e;
  }
}

}  // namespace kernel

// ---------------------------------------------------------------------------
// Whole-instance forms (all heads).

namespace detail {
template <typename S>
void check_skip(const ScanInstance<S>& inst, const RowVector<S>& D) {
  inst.validate();
  if (D.size() != inst.heads) throw ShapeError("D must have one entry per head");
  if ((inst.A.array() >= S(0)).any()) throw NumericalError("SSD decay A must be negative");
}

template <typename S>
void check_output(const Matrix<S>& y, const char* op) {
  if (!y.allFinite()) throw NumericalError(std::string(op) + ": non-finite output");
}
}  // namespace detail

template <typename S>
Matrix<S> ssd_naive(const ScanInstance<S>& inst, const RowVector<S>& D) {
  detail::check_skip(inst, D);
  const Index p = inst.head_dim, s = inst.state_dim;
  Matrix<S> y(inst.length(), inst.heads * p);
  for (Index h = 0; h < inst.heads; ++h) {
    const Vector<S> dt = inst.dt.col(h);
    kernel::ssd_head_naive<S>(inst.x.middleCols(h * p, p), dt, inst.B.middleCols(h * s, s),
                              inst.C.middleCols(h * s, s), inst.A(h), D(h),
                              y.middleCols(h * p, p));
  }
  detail::check_output(y, "ssd_naive");
  return y;
}

// Lower-triangular mixing matrix M of one head: y = M x + D x.
template <typename S>
Matrix<S> ssd_mixing_matrix(const ScanInstance<S>& inst, Index head) {
  inst.validate();
  if (inst.length() > kMaxQuadraticLength)
    throw ConfigError("ssd_quadratic: length exceeds " + std::to_string(kMaxQuadraticLength));
  const Index s = inst.state_dim;
  const Vector<S> dt = inst.dt.col(head);
  return kernel::ssd_head_mixing_matrix<S>(dt, inst.B.middleCols(head * s, s),
                                           inst.C.middleCols(head * s, s), inst.A(head));
}

template <typename S>
Matrix<S> ssd_quadratic(const ScanInstance<S>& inst, const RowVector<S>& D) {
  detail::check_skip(inst, D);
  if (inst.length() > kMaxQuadraticLength)
    throw ConfigError("ssd_quadratic: length exceeds " + std::to_string(kMaxQuadraticLength));
  const Index p = inst.head_dim;
  Matrix<S> y(inst.length(), inst.heads * p);
  for (Index h = 0; h < inst.heads; ++h) {
    const auto X = inst.x.middleCols(h * p, p);
    y.middleCols(h * p, p).noalias() = ssd_mixing_matrix(inst, h) * X;
    y.middleCols(h * p, p) += D(h) * X;
  }
  detail::check_output(y, "ssd_quadratic");
  return y;
}

template <typename S>
Matrix<S> ssd_chunked(const ScanInstance<S>& inst, const RowVector<S>& D, Index chunk_len) {
  detail::check_skip(inst, D);
  if (chunk_len < 1) throw ConfigError("ssd_chunked: chunk_len must be >= 1");
  const Index p = inst.head_dim, s = inst.state_dim;
  Matrix<S> y(inst.length(), inst.heads * p);
  for (Index h = 0; h < inst.heads; ++h) {
    const Vector<S> dt = inst.dt.col(h);
    kernel::ssd_head_chunked<S>(inst.x.middleCols(h * p, p), dt, inst.B.middleCols(h * s, s),
                                inst.C.middleCols(h * s, s), inst.A(h), D(h), chunk_len,
                                y.middleCols(h * p, p));
  }
  detail::check_output(y, "ssd_chunked");
  return y;
}

template <typename S>
Matrix<S> selective_scan_naive(const SelectiveScanInstance<S>& inst, const RowVector<S>& D) {
  inst.validate();
  const Index L = inst.length(), c = inst.channels();
  Matrix<S> H = Matrix<S>::Zero(c, inst.state_dim());
  Matrix<S> y(L, c);
  for (Index t = 0; t < L; ++t) {
    const auto dt = inst.dt.row(t).transpose();
    H = ((inst.A.array().colwise() * dt.array()).exp() * H.array()).matrix();
    H.noalias() += (dt.cwiseProduct(inst.x.row(t).transpose())) * inst.B.row(t);
    y.row(t).noalias() = (H * inst.C.row(t).transpose()).transpose();
    y.row(t) += D.cwiseProduct(inst.x.row(t));
  }
  detail::check_output(y, "selective_scan");
  return y;
}

// ---------------------------------------------------------------------------
// Autodiff ops over packed batches (rows = batch * seg_len).

// Multi-head SSD scan. x: N x (h*p), dt: N x h, A: 1 x h, B/C: N x (h*s),
// D: 1 x h. Forward uses the chunked form; backward runs the adjoint
// recurrence.
template <typename S>
Tensor<S> ssd_scan(const Tensor<S>& x, const Tensor<S>& dt, const Tensor<S>& A,
                   const Tensor<S>& B, const Tensor<S>& C, const Tensor<S>& D, Index seg_len,
                   Index heads, Index chunk_len) {
  detail::check_segments(x.rows(), seg_len, "ssd_scan");
  const Index N = x.rows();
  detail::require(heads >= 1 && x.cols() % heads == 0 && B.cols() % heads == 0, "ssd_scan",
                  "x and B widths must be divisible by heads");
  const Index p = x.cols() / heads, s = B.cols() / heads;
  detail::require(dt.rows() == N && dt.cols() == heads && B.rows() == N && C.rows() == N &&
                      C.cols() == B.cols() && A.rows() == 1 && A.cols() == heads &&
                      D.rows() == 1 && D.cols() == heads,
                  "ssd_scan", "inconsistent input shapes");
  detail::require(chunk_len >= 1, "ssd_scan", "chunk_len must be >= 1");
  if ((A.value().array() >= S(0)).any()) throw NumericalError("ssd_scan: A must be negative");

  Matrix<S> y(N, x.cols());
  for (Index s0 = 0; s0 < N; s0 += seg_len) {
    for (Index h = 0; h < heads; ++h) {
      const Vector<S> dth = dt.value().col(h).segment(s0, seg_len);
      kernel::ssd_head_chunked<S>(x.value().block(s0, h * p, seg_len, p), dth,
                                  B.value().block(s0, h * s, seg_len, s),
                                  C.value().block(s0, h * s, seg_len, s), A.value()(0, h),
                                  D.value()(0, h), chunk_len, y.block(s0, h * p, seg_len, p));
    }
  }
  detail::check_output(y, "ssd_scan");

  auto* xn = x.node();
  auto* dtn = dt.node();
  auto* an = A.node();
  auto* bn = B.node();
  auto* cn = C.node();
  auto* dn = D.node();
  return detail::make_result<S>(
      std::move(y), {x, dt, A, B, C, D},
      [xn, dtn, an, bn, cn, dn, seg_len, heads, p, s, N](const Matrix<S>& g) {
        Matrix<S> gx = Matrix<S>::Zero(N, heads * p);
        Matrix<S> gdt = Matrix<S>::Zero(N, heads);
        Matrix<S> gB = Matrix<S>::Zero(N, heads * s);
        Matrix<S> gC = Matrix<S>::Zero(N, heads * s);
        Matrix<S> gA = Matrix<S>::Zero(1, heads);
        Matrix<S> gD = Matrix<S>::Zero(1, heads);
        std::vector<S> scratch;
        for (Index s0 = 0; s0 < N; s0 += seg_len) {
          for (Index h = 0; h < heads; ++h) {
            const Vector<S> dth = dtn->value.col(h).segment(s0, seg_len);
            Vector<S> gdth = Vector<S>::Zero(seg_len);
            S ga = 0, gd = 0;
            kernel::ssd_head_backward<S>(
                xn->value.block(s0, h * p, seg_len, p), dth, bn->value.block(s0, h * s, seg_len, s),
                cn->value.block(s0, h * s, seg_len, s), an->value(0, h), dn->value(0, h),
                g.block(s0, h * p, seg_len, p), gx.block(s0, h * p, seg_len, p), gdth,
                gB.block(s0, h * s, seg_len, s), gC.block(s0, h * s, seg_len, s), ga, gd, scratch);
            gdt.col(h).segment(s0, seg_len) += gdth;
            gA(0, h) += ga;
            gD(0, h) += gd;
          }
        }
        if (xn->requires_grad) xn->accumulate(gx);
        if (dtn->requires_grad) dtn->accumulate(gdt);
        if (an->requires_grad) an->accumulate(gA);
        if (bn->requires_grad) bn->accumulate(gB);
        if (cn->requires_grad) cn->accumulate(gC);
        if (dn->requires_grad) dn->accumulate(gD);
      });
}

// Mamba-1 selective scan. x/dt: N x c, A: c x s, B/C: N x s, D: 1 x c.
template <typename S>
Tensor<S> selective_scan(const Tensor<S>& x, const Tensor<S>& dt, const Tensor<S>& A,
                         const Tensor<S>& B, const Tensor<S>& C, const Tensor<S>& D,
                         Index seg_len) {
  detail::check_segments(x.rows(), seg_len, "selective_scan");
  const Index N = x.rows(), c = x.cols(), s = A.cols();
  detail::require(dt.rows() == N && dt.cols() == c && A.rows() == c && B.rows() == N &&
                      B.cols() == s && C.rows() == N && C.cols() == s && D.rows() == 1 &&
                      D.cols() == c,
                  "selective_scan", "inconsistent input shapes");
  if ((A.value().array() >= S(0)).any())
    throw NumericalError("selective_scan: A must be negative");

  const auto& xv = x.value();
  const auto& dtv = dt.value();
  const auto& Av = A.value();
  Matrix<S> y(N, c);
  Matrix<S> H(c, s);
  for (Index s0 = 0; s0 < N; s0 += seg_len) {
    H.setZero();
    for (Index t = s0; t < s0 + seg_len; ++t) {
      const auto dtt = dtv.row(t).transpose();
      H = ((Av.array().colwise() * dtt.array()).exp() * H.array()).matrix();
      H.noalias() += dtt.cwiseProduct(xv.row(t).transpose()) * B.value().row(t);
      y.row(t).noalias() = C.value().row(t) * H.transpose();
      y.row(t) += D.value().row(0).cwiseProduct(xv.row(t));
    }
  }
  detail::check_output(y, "selective_scan");

  auto* xn = x.node();
  auto* dtn = dt.node();
  auto* an = A.node();
  auto* bn = B.node();
  auto* cn = C.node();
  auto* dn = D.node();
  return detail::make_result<S>(
      std::move(y), {x, dt, A, B, C, D},
      [xn, dtn, an, bn, cn, dn, seg_len, N, c, s](const Matrix<S>& g) {
        const auto& xv = xn->value;
        const auto& dtv = dtn->value;
        const auto& Av = an->value;
        Matrix<S> gx = Matrix<S>::Zero(N, c), gdt = Matrix<S>::Zero(N, c);
        Matrix<S> gA = Matrix<S>::Zero(c, s), gB = Matrix<S>::Zero(N, s),
                  gC = Matrix<S>::Zero(N, s), gD = Matrix<S>::Zero(1, c);
        std::vector<Matrix<S>> states(static_cast<std::size_t>(seg_len + 1));
        Matrix<S> G(c, s), E(c, s), dS(c, s);
        for (Index s0 = 0; s0 < N; s0 += seg_len) {
          states[0] = Matrix<S>::Zero(c, s);
          for (Index t = 0; t < seg_len; ++t) {
            const auto dtt = dtv.row(s0 + t).transpose();
            auto& cur = states[static_cast<std::size_t>(t + 1)];
            cur = ((Av.array().colwise() * dtt.array()).exp() *
                   states[static_cast<std::size_t>(t)].array())
                      .matrix();
            cur.noalias() += dtt.cwiseProduct(xv.row(s0 + t).transpose()) * bn->value.row(s0 + t);
          }
          G.setZero();
          for (Index t = seg_len - 1; t >= 0; --t) {
            const Index r = s0 + t;
            const auto dtt = dtv.row(r).transpose();
            const auto& prev = states[static_cast<std::size_t>(t)];
            const auto& cur = states[static_cast<std::size_t>(t + 1)];
            G.noalias() += g.row(r).transpose() * cn->value.row(r);
            gC.row(r).noalias() += g.row(r) * cur;
            gD.row(0) += g.row(r).cwiseProduct(xv.row(r));
            gx.row(r) += g.row(r).cwiseProduct(dn->value.row(0));
            const Vector<S> gb_proj = G * bn->value.row(r).transpose();  // c
            gx.row(r) += dtt.cwiseProduct(gb_proj).transpose();
            const Vector<S> dx = dtt.cwiseProduct(xv.row(r).transpose());
            gB.row(r).noalias() += dx.transpose() * G;
            E = (Av.array().colwise() * dtt.array()).exp().matrix();
            dS = G.cwiseProduct(E).cwiseProduct(prev);  // G * E * h_{t-1}
            gdt.row(r) += (dS.cwiseProduct(Av).rowwise().sum() +
                           gb_proj.cwiseProduct(xv.row(r).transpose()))
                              .transpose();
            gA += (dS.array().colwise() * dtt.array()).matrix();
            G = G.cwiseProduct(E);
          }
        }
        if (xn->requires_grad) xn->accumulate(gx);
        if (dtn->requires_grad) dtn->accumulate(gdt);
        if (an->requires_grad) an->accumulate(gA);
        if (bn->requires_grad) bn->accumulate(gB);
        if (cn->requires_grad) cn->accumulate(gC);
        if (dn->requires_grad) dn->accumulate(gD);
      });
}

}  // namespace bm
