#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "barcodemamba/grad_check.hpp"
#include "barcodemamba/ssd.hpp"
#include "test_util.hpp"

using namespace bm;
using bm::test::randn;
using bm::test::randu;
using T = Tensor<double>;

namespace {

// Scalarizes an output with a fixed random projection so every output
// coordinate contributes a distinct weight to the loss.
T project(const T& out, Rng& rng) {
  auto w = T::constant(randn(rng, out.rows(), out.cols()));
  return sum(out * w);
}

}  // namespace

TEST_CASE("matmul values match Eigen products") {
  Rng rng(1);
  auto a = T::constant(randn(rng, 3, 4));
  auto b = T::constant(randn(rng, 4, 2));
  auto c = T::constant(randn(rng, 5, 4));
  CHECK((matmul(a, b).value() - a.value() * b.value()).norm() < 1e-14);
  CHECK((matmul_nt(a, c).value() - a.value() * c.value().transpose()).norm() < 1e-14);
}

TEST_CASE("elementwise and structural ops pass finite-difference checks") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(100 + seed);
    auto a = T::parameter(randn(rng, 4, 3));
    auto b = T::parameter(randn(rng, 4, 3));
    auto row = T::parameter(randn(rng, 1, 3));
    auto m = T::parameter(randn(rng, 3, 5));
    auto n = T::parameter(randn(rng, 6, 3));
    auto check = [seed](auto&& f, std::vector<T> in) {
      return grad_check(
          [&] {
            Rng r(7 + seed);
            return project(f(), r);
          },
          std::move(in));
    };
    CHECK(check([&] { return matmul(a, m); }, {a, m}) < 1e-6);
    CHECK(check([&] { return matmul_nt(a, n); }, {a, n}) < 1e-6);
    CHECK(check([&] { return a + b; }, {a, b}) < 1e-6);
    CHECK(check([&] { return a - b; }, {a, b}) < 1e-6);
    CHECK(check([&] { return a * b; }, {a, b}) < 1e-6);
    CHECK(check([&] { return add_row(a, row); }, {a, row}) < 1e-6);
    CHECK(check([&] { return mul_row(a, row); }, {a, row}) < 1e-6);
    CHECK(check([&] { return scale(a, 1.7); }, {a}) < 1e-6);
    CHECK(check([&] { return neg(a); }, {a}) < 1e-6);
    CHECK(check([&] { return exp(a); }, {a}) < 1e-6);
    CHECK(check([&] { return silu(a); }, {a}) < 1e-6);
    CHECK(check([&] { return softplus(a); }, {a}) < 1e-6);
    CHECK(check([&] { return transpose(a); }, {a}) < 1e-6);
    CHECK(check([&] { return reshape(a, 2, 6); }, {a}) < 1e-6);
    CHECK(check([&] { return slice_cols(a, 1, 2); }, {a}) < 1e-6);
    CHECK(check([&] { return cumsum(a, 2); }, {a}) < 1e-6);
    CHECK(grad_check([&] { return sum(a * a); }, {a}) < 1e-6);
    CHECK(grad_check([&] { return mean(exp(a)); }, {a}) < 1e-6);
  }
}

TEST_CASE("layer norm, embedding, pooling and gathers pass finite-difference checks") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(200 + seed);
    auto x = T::parameter(randn(rng, 6, 5));
    auto g = T::parameter(randu(rng, 1, 5, 0.5, 1.5));
    auto bias = T::parameter(randn(rng, 1, 5));
    auto table = T::parameter(randn(rng, 7, 4));
    const std::vector<int> ids = {0, 3, 3, 6, 1, 2};
    const std::vector<std::uint8_t> mask = {1, 1, 0, 1, 1, 1};
    const std::vector<Index> rows = {5, 0, 2, 2};
    Rng wrng(seed);
    auto wrap = [&](auto&& f) {
      return [&, f] {
        Rng r = wrng;
        return project(f(), r);
      };
    };
    CHECK(grad_check(wrap([&] { return layer_norm(x, g, bias); }), {x, g, bias}) < 1e-5);
    CHECK(grad_check(wrap([&] { return embedding(table, std::span<const int>(ids)); }), {table}) < 1e-6);
    CHECK(grad_check(wrap([&] { return mean_pool(x, 3, std::span<const std::uint8_t>(mask)); }), {x}) < 1e-6);
    CHECK(grad_check(wrap([&] { return gather_rows(x, std::span<const Index>(rows)); }), {x}) < 1e-6);
  }
}

TEST_CASE("softmax cross entropy matches a direct evaluation and its gradient") {
  Rng rng(3);
  auto logits = T::parameter(randn(rng, 5, 4));
  const std::vector<int> targets = {0, 3, 2, 1, 1};
  const std::vector<std::uint8_t> mask = {1, 0, 1, 1, 1};
  auto loss = softmax_cross_entropy(logits, std::span<const int>(targets),
                                    std::span<const std::uint8_t>(mask));
  double ref = 0;
  for (Index i = 0; i < 5; ++i) {
    if (!mask[static_cast<std::size_t>(i)]) continue;
    double z = 0;
    for (Index c = 0; c < 4; ++c) z += std::exp(logits.value()(i, c));
    ref += -logits.value()(i, targets[static_cast<std::size_t>(i)]) + std::log(z);
  }
  CHECK(loss.item() == doctest::Approx(ref / 4).epsilon(1e-13));
  loss.backward();
  CHECK(logits.grad().row(1).norm() == 0.0);
  CHECK(grad_check(
            [&] {
              return softmax_cross_entropy(logits, std::span<const int>(targets),
                                           std::span<const std::uint8_t>(mask));
            },
            {logits}) < 1e-6);
}

TEST_CASE("causal convolution matches the explicit sum and is causal") {
  Rng rng(4);
  const Index L = 5, C = 3, w = 4;
  auto x = T::parameter(randn(rng, 2 * L, C));
  auto k = T::parameter(randn(rng, w, C));
  auto b = T::parameter(randn(rng, 1, C));
  const auto y = conv1d_causal(x, k, b, L).value();
  for (Index s = 0; s < 2; ++s)
    for (Index t = 0; t < L; ++t)
      for (Index c = 0; c < C; ++c) {
        double ref = b.value()(0, c);
        for (Index j = 0; j < w; ++j) {
          const Index src = t - (w - 1) + j;
          if (src >= 0) ref += k.value()(j, c) * x.value()(s * L + src, c);
        }
        CHECK(y(s * L + t, c) == doctest::Approx(ref).epsilon(1e-13));
      }
  Rng wrng(9);
  CHECK(grad_check(
            [&] {
              Rng r = wrng;
              return project(conv1d_causal(x, k, b, L), r);
            },
            {x, k, b}) < 1e-6);
}

TEST_CASE("backward accumulates through shared subexpressions") {
  auto a = T::parameter(Matrix<double>::Constant(1, 1, 3.0));
  auto b = a * a;
  auto c = b + b;
  sum(c).backward();
  CHECK(a.grad()(0, 0) == doctest::Approx(12.0));
}

TEST_CASE("no-grad mode records nothing") {
  auto a = T::parameter(Matrix<double>::Constant(2, 2, 1.0));
  NoGradGuard ng;
  auto b = exp(a);
  CHECK_FALSE(b.requires_grad());
}

TEST_CASE("backward requires a scalar root") {
  auto a = T::parameter(Matrix<double>::Constant(2, 2, 1.0));
  CHECK_THROWS_AS(exp(a).backward(), ShapeError);
}

TEST_CASE("ssd forms agree with a scalar-loop reference") {
  Rng rng(11);
  for (int trial = 0; trial < 12; ++trial) {
    const Index L = std::vector<Index>{8, 32, 128}[static_cast<std::size_t>(trial % 3)];
    const auto inst = bm::test::random_scan(rng, L, 2, 3, 4);
    const RowVector<double> D = randn(rng, 1, 2);
    const auto ref = bm::test::reference_ssd(inst, D);
    CHECK((ssd_naive(inst, D) - ref).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((ssd_quadratic(inst, D) - ref).cwiseAbs().maxCoeff() < 1e-10);
    for (Index chunk : {Index(1), Index(5), Index(16), L})
      CHECK((ssd_chunked(inst, D, chunk) - ref).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("ssd mixing matrix is lower triangular") {
  Rng rng(12);
  const auto inst = bm::test::random_scan(rng, 10, 1, 2, 3);
  const auto M = ssd_mixing_matrix(inst, 0);
  for (Index i = 0; i < 10; ++i)
    for (Index j = i + 1; j < 10; ++j) CHECK(M(i, j) == 0.0);
}

TEST_CASE("ssd rejects non-negative decay and over-long quadratic inputs") {
  Rng rng(13);
  auto inst = bm::test::random_scan(rng, 4, 1, 2, 2);
  const RowVector<double> D = RowVector<double>::Ones(1);
  inst.A(0) = 0.0;
  CHECK_THROWS_AS(ssd_naive(inst, D), NumericalError);
  auto longer = bm::test::random_scan(rng, kMaxQuadraticLength + 1, 1, 1, 1);
  CHECK_THROWS_AS(ssd_quadratic(longer, D), ConfigError);
}

TEST_CASE("ssd_scan op matches per-sequence kernels and passes gradient checks") {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    Rng rng(300 + seed);
    const Index L = 6, heads = 2, p = 2, s = 3, batch = 2;
    auto x = T::parameter(randn(rng, batch * L, heads * p));
    auto dt = T::parameter(randu(rng, batch * L, heads, 0.05, 0.6));
    auto A = T::parameter(-randu(rng, 1, heads, 0.3, 2.0));
    auto B = T::parameter(randn(rng, batch * L, heads * s, 0.5));
    auto C = T::parameter(randn(rng, batch * L, heads * s, 0.5));
    auto D = T::parameter(randn(rng, 1, heads));
    const auto y = ssd_scan(x, dt, A, B, C, D, L, heads, 4).value();
    for (Index b = 0; b < batch; ++b) {
      ScanInstance<double> inst;
      inst.heads = heads;
      inst.head_dim = p;
      inst.state_dim = s;
      inst.x = x.value().middleRows(b * L, L);
      inst.dt = dt.value().middleRows(b * L, L);
      inst.B = B.value().middleRows(b * L, L);
      inst.C = C.value().middleRows(b * L, L);
      inst.A = A.value();
      const RowVector<double> Dv = D.value();
      CHECK((y.middleRows(b * L, L) - bm::test::reference_ssd(inst, Dv)).cwiseAbs().maxCoeff() < 1e-12);
    }
    Rng wrng(seed);
    CHECK(grad_check(
              [&] {
                Rng r = wrng;
                return project(ssd_scan(x, dt, A, B, C, D, L, heads, 4), r);
              },
              {x, dt, A, B, C, D}) < 1e-5);
  }
}

TEST_CASE("selective_scan op matches the naive kernel and passes gradient checks") {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    Rng rng(400 + seed);
    const Index L = 5, c = 3, s = 2, batch = 2;
    auto x = T::parameter(randn(rng, batch * L, c));
    auto dt = T::parameter(randu(rng, batch * L, c, 0.05, 0.6));
    auto A = T::parameter(-randu(rng, c, s, 0.3, 2.0));
    auto B = T::parameter(randn(rng, batch * L, s, 0.5));
    auto C = T::parameter(randn(rng, batch * L, s, 0.5));
    auto D = T::parameter(randn(rng, 1, c));
    const auto y = selective_scan(x, dt, A, B, C, D, L).value();
    for (Index b = 0; b < batch; ++b) {
      SelectiveScanInstance<double> inst;
      inst.x = x.value().middleRows(b * L, L);
      inst.dt = dt.value().middleRows(b * L, L);
      inst.A = A.value();
      inst.B = B.value().middleRows(b * L, L);
      inst.C = C.value().middleRows(b * L, L);
      const RowVector<double> Dv = D.value();
      CHECK((y.middleRows(b * L, L) - selective_scan_naive(inst, Dv)).cwiseAbs().maxCoeff() < 1e-13);
    }
    Rng wrng(seed);
    CHECK(grad_check(
              [&] {
                Rng r = wrng;
                return project(selective_scan(x, dt, A, B, C, D, L), r);
              },
              {x, dt, A, B, C, D}) < 1e-5);
  }
}

TEST_CASE("selective scan with scalar decay equals single-head ssd per channel") {
  Rng rng(500);
  const Index L = 7, s = 3;
  SelectiveScanInstance<double> sel;
  sel.x = randn(rng, L, 1);
  sel.dt = randu(rng, L, 1, 0.05, 0.5);
  sel.A = Matrix<double>::Constant(1, s, -0.7);
  sel.B = randn(rng, L, s);
  sel.C = randn(rng, L, s);
  ScanInstance<double> ssd;
  ssd.heads = 1;
  ssd.head_dim = 1;
  ssd.state_dim = s;
  ssd.x = sel.x;
  ssd.dt = sel.dt;
  ssd.B = sel.B;
  ssd.C = sel.C;
  ssd.A = RowVector<double>::Constant(1, -0.7);
  const RowVector<double> D = RowVector<double>::Constant(1, 0.3);
  CHECK((selective_scan_naive(sel, D) - ssd_naive(ssd, D)).cwiseAbs().maxCoeff() < 1e-13);
}

TEST_CASE("grad_check flags a wrong gradient") {
  // A deliberately broken op: forward exp, backward identity.
  auto x = T::parameter(Matrix<double>::Constant(1, 2, 1.0));
  auto broken = [&] {
    auto* xn = x.node();
    Matrix<double> v = x.value().array().exp().matrix();
    return sum(detail::make_result<double>(std::move(v), {x},
                                           [xn](const Matrix<double>& g) { xn->accumulate(g); }));
  };
  CHECK(grad_check(broken, {x}) > 0.5);
}
