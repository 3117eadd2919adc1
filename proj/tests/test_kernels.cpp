// Parallel kernels against the serial reference implementation.

#include <cmath>
#include <random>
#include <vector>

#include "doctest.h"
#include "rmc/kernels.hpp"

namespace k = rmc::kernels;

namespace {

std::vector<double> random_vec(std::mt19937_64& rng, std::size_t n, double lo = -1.0,
                               double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

k::AttentionLayout random_layout(std::mt19937_64& rng, bool cls_only) {
  k::AttentionLayout layout;
  layout.num_heads = 4;
  layout.model_dim = 16;
  layout.cls_only = cls_only;
  std::uniform_int_distribution<std::size_t> len(1, 9);
  std::size_t off = 0;
  for (int s = 0; s < 5; ++s) {
    const std::size_t n = len(rng);
    layout.segments.push_back({off, n});
    off += n;
  }
  return layout;
}

}  // namespace

TEST_CASE("gemm matches reference, with and without accumulation") {
  std::mt19937_64 rng(11);
  for (auto [m, n, kk] : {std::array<std::size_t, 3>{1, 1, 1}, {7, 5, 3}, {300, 64, 128},
                          {64, 2, 64}, {129, 33, 17}}) {
    const auto a = random_vec(rng, m * kk);
    const auto b = random_vec(rng, kk * n);
    const auto c0 = random_vec(rng, m * n);
    for (bool acc : {false, true}) {
      auto c1 = c0;
      auto c2 = c0;
      k::gemm(m, n, kk, a, b, c1, acc);
      k::reference::gemm(m, n, kk, a, b, c2, acc);
      CHECK(max_abs_diff(c1, c2) < 1e-12);
    }
  }
}

TEST_CASE("transpose and row bias match reference") {
  std::mt19937_64 rng(12);
  const std::size_t r = 37, c = 23;
  const auto x = random_vec(rng, r * c);
  std::vector<double> t1(r * c), t2(r * c);
  k::transpose(r, c, x, t1);
  k::reference::transpose(r, c, x, t2);
  CHECK(t1 == t2);
  const auto bias = random_vec(rng, c);
  auto y1 = x;
  auto y2 = x;
  k::add_row_bias(r, c, bias, y1);
  k::reference::add_row_bias(r, c, bias, y2);
  CHECK(y1 == y2);
}

TEST_CASE("row-wise kernels match reference") {
  std::mt19937_64 rng(13);
  const std::size_t r = 41, c = 19;
  const auto x = random_vec(rng, r * c, -3.0, 3.0);
  const auto dy = random_vec(rng, r * c);

  std::vector<double> s1(r * c), s2(r * c);
  k::softmax_rows(r, c, x, s1);
  k::reference::softmax_rows(r, c, x, s2);
  CHECK(max_abs_diff(s1, s2) < 1e-15);
  std::vector<double> ds1(r * c, 0.0), ds2(r * c, 0.0);
  k::softmax_rows_backward(r, c, s1, dy, ds1);
  k::reference::softmax_rows_backward(r, c, s2, dy, ds2);
  CHECK(max_abs_diff(ds1, ds2) < 1e-15);

  std::vector<double> g1(r * c), g2(r * c);
  k::gelu(x, g1);
  k::reference::gelu(x, g2);
  CHECK(g1 == g2);
  std::vector<double> dg1(r * c, 0.0), dg2(r * c, 0.0);
  k::gelu_backward(x, dy, dg1);
  k::reference::gelu_backward(x, dy, dg2);
  CHECK(dg1 == dg2);

  const auto gain = random_vec(rng, c, 0.5, 1.5);
  const auto bias = random_vec(rng, c);
  std::vector<double> y1(r * c), y2(r * c), m1(r), m2(r), rs1(r), rs2(r);
  k::layer_norm(r, c, x, gain, bias, 1e-5, y1, m1, rs1);
  k::reference::layer_norm(r, c, x, gain, bias, 1e-5, y2, m2, rs2);
  CHECK(max_abs_diff(y1, y2) < 1e-13);
  std::vector<double> dx1(r * c, 0.0), dx2(r * c, 0.0), dgn1(c, 0.0), dgn2(c, 0.0),
      db1(c, 0.0), db2(c, 0.0);
  k::layer_norm_backward(r, c, x, gain, m1, rs1, dy, dx1, dgn1, db1);
  k::reference::layer_norm_backward(r, c, x, gain, m2, rs2, dy, dx2, dgn2, db2);
  CHECK(max_abs_diff(dx1, dx2) < 1e-12);
  CHECK(max_abs_diff(dgn1, dgn2) < 1e-12);
  CHECK(max_abs_diff(db1, db2) < 1e-12);
}

TEST_CASE("attention forward and backward match reference") {
  std::mt19937_64 rng(14);
  for (bool cls_only : {false, true}) {
    for (std::size_t stride : {std::size_t{0}, std::size_t{4}}) {
      const auto layout = random_layout(rng, cls_only);
      const std::size_t d = layout.model_dim;
      const auto q = random_vec(rng, layout.query_rows() * d);
      const auto kk = random_vec(rng, layout.key_rows() * d);
      const auto v = random_vec(rng, layout.key_rows() * d);
      const auto mask = random_vec(rng, stride == 0 ? 4 : 4 * layout.segments.size(), 0.0, 1.0);
      std::vector<double> p1(layout.prob_size()), p2(layout.prob_size());
      std::vector<double> o1(q.size()), o2(q.size());
      k::attention(layout, q, kk, v, mask, stride, p1, o1);
      k::reference::attention(layout, q, kk, v, mask, stride, p2, o2);
      CHECK(max_abs_diff(p1, p2) < 1e-14);
      CHECK(max_abs_diff(o1, o2) < 1e-13);

      const auto dout = random_vec(rng, q.size());
      std::vector<double> dq1(q.size(), 0.0), dq2(q.size(), 0.0), dk1(kk.size(), 0.0),
          dk2(kk.size(), 0.0), dv1(v.size(), 0.0), dv2(v.size(), 0.0);
      std::vector<double> dm1(4 * layout.segments.size()), dm2(4 * layout.segments.size());
      k::attention_backward(layout, q, kk, v, mask, stride, p1, dout, dq1, dk1, dv1, dm1);
      k::reference::attention_backward(layout, q, kk, v, mask, stride, p2, dout, dq2, dk2, dv2,
                                       dm2);
      CHECK(max_abs_diff(dq1, dq2) < 1e-12);
      CHECK(max_abs_diff(dk1, dk2) < 1e-12);
      CHECK(max_abs_diff(dv1, dv2) < 1e-12);
      CHECK(max_abs_diff(dm1, dm2) < 1e-12);
    }
  }
}

TEST_CASE("softmax kernel is stable for large inputs") {
  const std::vector<double> x{1000.0, 0.0, 0.0};
  std::vector<double> y(3);
  k::softmax_rows(1, 3, x, y);
  CHECK(std::isfinite(y[0]));
  CHECK(y[0] == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(y[1] < 1e-300);
}
