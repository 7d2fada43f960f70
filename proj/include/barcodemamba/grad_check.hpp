#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "barcodemamba/tensor.hpp"

namespace bm {

// Compares reverse-mode gradients of a scalar loss against central finite
// differences over every coordinate of every tensor in `inputs`. Returns
// max |g_ad - g_fd| / max(1, |g_fd|).
inline double grad_check(const std::function<Tensor<double>()>& loss,
                         std::vector<Tensor<double>> inputs, double eps = 1e-5) {
  for (auto& t : inputs) t.zero_grad();
  {
    auto l = loss();
    if (!std::isfinite(l.item())) throw NumericalError("grad_check: non-finite loss");
    l.backward();
  }
  auto eval = [&] {
    NoGradGuard ng;
    const double v = loss().item();
    if (!std::isfinite(v)) throw NumericalError("grad_check: non-finite loss under perturbation");
    return v;
  };
  double worst = 0.0;
  for (auto& t : inputs) {
    const Matrix<double> ad =
        t.has_grad() ? t.grad() : Matrix<double>::Zero(t.rows(), t.cols());
    auto& v = t.mutable_value();
    for (Index i = 0; i < v.size(); ++i) {
      const double orig = v.data()[i];
      v.data()[i] = orig + eps;
      const double up = eval();
      v.data()[i] = orig - eps;
      const double down = eval();
      v.data()[i] = orig;
      const double fd = (up - down) / (2.0 * eps);
      const double g = ad.data()[i];
      if (!std::isfinite(g)) throw NumericalError("grad_check: non-finite autodiff gradient");
      worst = std::max(worst, std::abs(g - fd) / std::max(1.0, std::abs(fd)));
    }
  }
  return worst;
}

// Single-input form: f maps a leaf tensor to a scalar.
inline double grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                         const Matrix<double>& x, double eps = 1e-5) {
  auto leaf = Tensor<double>::parameter(x);
  return grad_check([&] { return f(leaf); }, {leaf}, eps);
}

}  // namespace bm
