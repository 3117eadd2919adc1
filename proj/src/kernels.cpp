#include "rmc/kernels.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cmath>
#include <cstddef>
#include <limits>

namespace rmc::kernels {

namespace {

// Below this many multiply-adds a kernel stays on the calling thread.
constexpr std::size_t kParallelWork = 1u << 15;

using Index = std::ptrdiff_t;

inline Index as_index(std::size_t n) { return static_cast<Index>(n); }

// Multiply-add used by every gemm path so tiled and untiled rows round the
// same way. Implicit contraction is disabled project-wide.
inline double madd(double a, double b, double c) {
#ifdef __FMA__
  return std::fma(a, b, c);
#else
  return a * b + c;
#endif
}

// c[r, j0..j1) (+)= sum_p a[r, p] * b[p, j0..j1) for one row r.
inline void gemm_row(std::size_t n, std::size_t k, std::size_t j0, std::size_t j1,
                     const double* a_row, const double* b, double* c_row, bool accumulate) {
  if (!accumulate) std::fill(c_row + j0, c_row + j1, 0.0);
  for (std::size_t p = 0; p < k; ++p) {
    const double av = a_row[p];
    const double* b_row = b + p * n;
    for (std::size_t j = j0; j < j1; ++j) c_row[j] = madd(av, b_row[j], c_row[j]);
  }
}

constexpr std::size_t kTileRows = 4;
constexpr std::size_t kTileCols = 16;

// A 4x16 tile of c kept in registers across the whole k loop. Each element
// still sums its products in increasing p, like gemm_row.
inline void gemm_tile(std::size_t n, std::size_t k, const double* __restrict a,
                      const double* __restrict b, double* __restrict c, bool accumulate) {
  double acc[kTileRows][kTileCols];
  for (std::size_t r = 0; r < kTileRows; ++r)
    for (std::size_t q = 0; q < kTileCols; ++q) acc[r][q] = accumulate ? c[r * n + q] : 0.0;
  for (std::size_t p = 0; p < k; ++p) {
    const double* br = b + p * n;
    for (std::size_t r = 0; r < kTileRows; ++r) {
      const double av = a[r * k + p];
#pragma omp simd
      for (std::size_t q = 0; q < kTileCols; ++q) acc[r][q] = madd(av, br[q], acc[r][q]);
    }
  }
  for (std::size_t r = 0; r < kTileRows; ++r)
    for (std::size_t q = 0; q < kTileCols; ++q) c[r * n + q] = acc[r][q];
}

}  // namespace

std::size_t AttentionLayout::key_rows() const {
  std::size_t n = 0;
  for (const auto& s : segments) n += s.length;
  return n;
}

std::size_t AttentionLayout::query_rows() const {
  return cls_only ? segments.size() : key_rows();
}

std::size_t AttentionLayout::prob_offset(std::size_t s) const {
  // Segments are few; callers needing many offsets go through prob_offsets().
  std::size_t off = 0;
  for (std::size_t i = 0; i < s; ++i) {
    const std::size_t nq = cls_only ? 1 : segments[i].length;
    off += num_heads * nq * segments[i].length;
  }
  return off;
}

std::size_t AttentionLayout::prob_size() const { return prob_offset(segments.size()); }

namespace {

// exp(x) for x in [-700, 700] to about one ulp: x = n ln2 + r with |r| <=
// ln2/2, a degree-13 Taylor polynomial for exp(r), then scaling by 2^n
// through the exponent bits. Branch-free so gelu loops vectorize.
inline double exp_bounded(double x) {
  constexpr double log2e = 1.4426950408889634;
  constexpr double ln2_hi = 0.6931471803691238;
  constexpr double ln2_lo = 1.9082149292705877e-10;
  x = std::min(700.0, std::max(-700.0, x));
  const double n = std::floor(x * log2e + 0.5);
  const double r = (x - n * ln2_hi) - n * ln2_lo;
  double p = 1.0 / 6227020800.0;
  p = p * r + 1.0 / 479001600.0;
  p = p * r + 1.0 / 39916800.0;
  p = p * r + 1.0 / 3628800.0;
  p = p * r + 1.0 / 362880.0;
  p = p * r + 1.0 / 40320.0;
  p = p * r + 1.0 / 5040.0;
  p = p * r + 1.0 / 720.0;
  p = p * r + 1.0 / 120.0;
  p = p * r + 1.0 / 24.0;
  p = p * r + 1.0 / 6.0;
  p = p * r + 0.5;
  p = p * r + 1.0;
  p = p * r + 1.0;
  const auto bits = static_cast<std::uint64_t>(static_cast<std::int64_t>(n) + 1023) << 52;
  return p * std::bit_cast<double>(bits);
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

// 0.5 x (1 + tanh(u)) written as x * sigmoid(2u).
inline double gelu_value(double x) {
  const double u = kGeluC * (x + kGeluA * x * x * x);
  return x / (1.0 + exp_bounded(-2.0 * u));
}

inline double gelu_grad(double x) {
  const double u = kGeluC * (x + kGeluA * x * x * x);
  const double s = 1.0 / (1.0 + exp_bounded(-2.0 * u));
  const double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
  return s + x * (2.0 * s * (1.0 - s)) * du;
}

}  // namespace

double gelu_scalar(double x) { return gelu_value(x); }

double gelu_derivative(double x) { return gelu_grad(x); }

void gemm(std::size_t m, std::size_t n, std::size_t k, std::span<const double> a,
          std::span<const double> b, std::span<double> c, bool accumulate) {
  const double* ap = a.data();
  const double* bp = b.data();
  double* cp = c.data();
  const std::size_t row_blocks = (m + kTileRows - 1) / kTileRows;
  const std::size_t full_cols = n - n % kTileCols;
#pragma omp parallel for schedule(static) if (m * n * k > kParallelWork)
  for (Index ib = 0; ib < as_index(row_blocks); ++ib) {
    const std::size_t r0 = static_cast<std::size_t>(ib) * kTileRows;
    if (r0 + kTileRows <= m) {
      for (std::size_t j = 0; j < full_cols; j += kTileCols)
        gemm_tile(n, k, ap + r0 * k, bp + j, cp + r0 * n + j, accumulate);
      if (full_cols < n)
        for (std::size_t r = r0; r < r0 + kTileRows; ++r)
          gemm_row(n, k, full_cols, n, ap + r * k, bp, cp + r * n, accumulate);
    } else {
      for (std::size_t r = r0; r < m; ++r) gemm_row(n, k, 0, n, ap + r * k, bp, cp + r * n, accumulate);
    }
  }
}

void transpose(std::size_t rows, std::size_t cols, std::span<const double> in,
               std::span<double> out) {
  constexpr std::size_t tile = 16;
#pragma omp parallel for schedule(static) if (rows * cols > kParallelWork)
  for (Index rb = 0; rb < as_index(rows); rb += tile) {
    const auto r0 = static_cast<std::size_t>(rb);
    const std::size_t r1 = std::min(rows, r0 + tile);
    for (std::size_t c0 = 0; c0 < cols; c0 += tile) {
      const std::size_t c1 = std::min(cols, c0 + tile);
      for (std::size_t r = r0; r < r1; ++r)
        for (std::size_t c = c0; c < c1; ++c) out[c * rows + r] = in[r * cols + c];
    }
  }
}

void add_row_bias(std::size_t rows, std::size_t cols, std::span<const double> bias,
                  std::span<double> x) {
  const double* bp = bias.data();
  double* xp = x.data();
#pragma omp parallel for schedule(static) if (rows * cols > kParallelWork)
  for (Index r = 0; r < as_index(rows); ++r) {
    double* row = xp + static_cast<std::size_t>(r) * cols;
    for (std::size_t c = 0; c < cols; ++c) row[c] += bp[c];
  }
}

void softmax_rows(std::size_t rows, std::size_t cols, std::span<const double> x,
                  std::span<double> y) {
#pragma omp parallel for schedule(static) if (rows * cols > kParallelWork)
  for (Index ri = 0; ri < as_index(rows); ++ri) {
    const double* xr = x.data() + static_cast<std::size_t>(ri) * cols;
    double* yr = y.data() + static_cast<std::size_t>(ri) * cols;
    const double mx = *std::max_element(xr, xr + cols);
    double sum = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      yr[c] = std::exp(xr[c] - mx);
      sum += yr[c];
    }
    const double inv = 1.0 / sum;
    for (std::size_t c = 0; c < cols; ++c) yr[c] *= inv;
  }
}

void softmax_rows_backward(std::size_t rows, std::size_t cols, std::span<const double> y,
                           std::span<const double> dy, std::span<double> dx) {
#pragma omp parallel for schedule(static) if (rows * cols > kParallelWork)
  for (Index ri = 0; ri < as_index(rows); ++ri) {
    const std::size_t off = static_cast<std::size_t>(ri) * cols;
    double dot = 0.0;
    for (std::size_t c = 0; c < cols; ++c) dot += dy[off + c] * y[off + c];
    for (std::size_t c = 0; c < cols; ++c) dx[off + c] += y[off + c] * (dy[off + c] - dot);
  }
}

void gelu(std::span<const double> x, std::span<double> y) {
  const double* xp = x.data();
  double* yp = y.data();
  const Index n = as_index(x.size());
#pragma omp parallel for simd schedule(static) if (x.size() > kParallelWork)
  for (Index i = 0; i < n; ++i) yp[i] = gelu_value(xp[i]);
}

void gelu_backward(std::span<const double> x, std::span<const double> dy,
                   std::span<double> dx) {
  const double* xp = x.data();
  const double* gp = dy.data();
  double* dp = dx.data();
  const Index n = as_index(x.size());
#pragma omp parallel for simd schedule(static) if (x.size() > kParallelWork)
  for (Index i = 0; i < n; ++i) dp[i] += gp[i] * gelu_grad(xp[i]);
}

void layer_norm(std::size_t rows, std::size_t cols, std::span<const double> x,
                std::span<const double> gain, std::span<const double> bias, double eps,
                std::span<double> y, std::span<double> mean, std::span<double> rstd) {
  const double inv_n = 1.0 / static_cast<double>(cols);
#pragma omp parallel for schedule(static) if (rows * cols > kParallelWork)
  for (Index ri = 0; ri < as_index(rows); ++ri) {
    const auto r = static_cast<std::size_t>(ri);
    const double* xr = x.data() + r * cols;
    double* yr = y.data() + r * cols;
    double mu = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mu += xr[c];
    mu *= inv_n;
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var *= inv_n;
    const double rs = 1.0 / std::sqrt(var + eps);
    mean[r] = mu;
    rstd[r] = rs;
    for (std::size_t c = 0; c < cols; ++c) yr[c] = (xr[c] - mu) * rs * gain[c] + bias[c];
  }
}

void layer_norm_backward(std::size_t rows, std::size_t cols, std::span<const double> x,
                         std::span<const double> gain, std::span<const double> mean,
                         std::span<const double> rstd, std::span<const double> dy,
                         std::span<double> dx, std::span<double> dgain,
                         std::span<double> dbias) {
  const double inv_n = 1.0 / static_cast<double>(cols);
#pragma omp parallel for schedule(static) if (rows * cols > kParallelWork)
  for (Index ri = 0; ri < as_index(rows); ++ri) {
    const auto r = static_cast<std::size_t>(ri);
    const double* xr = x.data() + r * cols;
    const double* dyr = dy.data() + r * cols;
    double* dxr = dx.data() + r * cols;
    double mean_dxhat = 0.0;
    double mean_dxhat_xhat = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      const double xhat = (xr[c] - mean[r]) * rstd[r];
      const double dxhat = dyr[c] * gain[c];
      mean_dxhat += dxhat;
      mean_dxhat_xhat += dxhat * xhat;
    }
    mean_dxhat *= inv_n;
    mean_dxhat_xhat *= inv_n;
    for (std::size_t c = 0; c < cols; ++c) {
      const double xhat = (xr[c] - mean[r]) * rstd[r];
      const double dxhat = dyr[c] * gain[c];
      dxr[c] += rstd[r] * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
    }
  }
  // Parameter gradients reduce over rows; kept serial so the summation order
  // is fixed.
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * cols;
    const double* dyr = dy.data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) {
      dgain[c] += dyr[c] * (xr[c] - mean[r]) * rstd[r];
      dbias[c] += dyr[c];
    }
  }
}

namespace {

std::vector<std::size_t> prob_offsets(const AttentionLayout& layout) {
  std::vector<std::size_t> offs(layout.segments.size() + 1, 0);
  for (std::size_t s = 0; s < layout.segments.size(); ++s) {
    const std::size_t nq = layout.cls_only ? 1 : layout.segments[s].length;
    offs[s + 1] = offs[s] + layout.num_heads * nq * layout.segments[s].length;
  }
  return offs;
}

}  // namespace

void attention(const AttentionLayout& layout, std::span<const double> q,
               std::span<const double> k, std::span<const double> v,
               std::span<const double> head_mask, std::size_t head_mask_stride,
               std::span<double> probs, std::span<double> out) {
  const std::size_t d = layout.model_dim;
  const std::size_t dh = layout.head_dim();
  const std::size_t heads = layout.num_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto offs = prob_offsets(layout);
  const std::size_t nseg = layout.segments.size();
#pragma omp parallel for schedule(static) if (nseg > 1 && layout.key_rows() * d > kParallelWork / 8)
  for (Index si = 0; si < as_index(nseg); ++si) {
    const auto s = static_cast<std::size_t>(si);
    const Segment seg = layout.segments[s];
    const std::size_t nq = layout.cls_only ? 1 : seg.length;
    double* p = probs.data() + offs[s];
    for (std::size_t i = 0; i < nq; ++i) {
      const std::size_t qr = layout.cls_only ? s : seg.offset + i;
      const double* qrow = q.data() + qr * d;
      double* orow = out.data() + qr * d;
      for (std::size_t h = 0; h < heads; ++h) {
        double* row = p + (h * nq + i) * seg.length;
        const double* qh = qrow + h * dh;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < seg.length; ++j) {
          const double* kh = k.data() + (seg.offset + j) * d + h * dh;
          double dot = 0.0;
          for (std::size_t c = 0; c < dh; ++c) dot += qh[c] * kh[c];
          row[j] = dot * scale;
          mx = std::max(mx, row[j]);
        }
        double sum = 0.0;
        for (std::size_t j = 0; j < seg.length; ++j) {
          row[j] = std::exp(row[j] - mx);
          sum += row[j];
        }
        const double inv = 1.0 / sum;
        for (std::size_t j = 0; j < seg.length; ++j) row[j] *= inv;
        double* oh = orow + h * dh;
        std::fill(oh, oh + dh, 0.0);
        for (std::size_t j = 0; j < seg.length; ++j) {
          const double* vh = v.data() + (seg.offset + j) * d + h * dh;
          const double pj = row[j];
          for (std::size_t c = 0; c < dh; ++c) oh[c] += pj * vh[c];
        }
        const double xi = head_mask[s * head_mask_stride + h];
        for (std::size_t c = 0; c < dh; ++c) oh[c] *= xi;
      }
    }
  }
}

void attention_backward(const AttentionLayout& layout, std::span<const double> q,
                        std::span<const double> k, std::span<const double> v,
                        std::span<const double> head_mask, std::size_t head_mask_stride,
                        std::span<const double> probs, std::span<const double> dout,
                        std::span<double> dq, std::span<double> dk, std::span<double> dv,
                        std::span<double> dmask_per_segment) {
  const std::size_t d = layout.model_dim;
  const std::size_t dh = layout.head_dim();
  const std::size_t heads = layout.num_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto offs = prob_offsets(layout);
  const std::size_t nseg = layout.segments.size();
#pragma omp parallel for schedule(static) if (nseg > 1 && layout.key_rows() * d > kParallelWork / 8)
  for (Index si = 0; si < as_index(nseg); ++si) {
    const auto s = static_cast<std::size_t>(si);
    const Segment seg = layout.segments[s];
    const std::size_t nq = layout.cls_only ? 1 : seg.length;
    const double* p = probs.data() + offs[s];
    std::vector<double> ctx(dh);
    std::vector<double> dctx(dh);
    std::vector<double> dp(seg.length);
    for (std::size_t h = 0; h < heads; ++h) {
      const double xi = head_mask[s * head_mask_stride + h];
      double dxi = 0.0;
      for (std::size_t i = 0; i < nq; ++i) {
        const std::size_t qr = layout.cls_only ? s : seg.offset + i;
        const double* row = p + (h * nq + i) * seg.length;
        const double* doh = dout.data() + qr * d + h * dh;
        std::fill(ctx.begin(), ctx.end(), 0.0);
        for (std::size_t j = 0; j < seg.length; ++j) {
          const double* vh = v.data() + (seg.offset + j) * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) ctx[c] += row[j] * vh[c];
        }
        for (std::size_t c = 0; c < dh; ++c) {
          dxi += doh[c] * ctx[c];
          dctx[c] = xi * doh[c];
        }
        double dot = 0.0;
        for (std::size_t j = 0; j < seg.length; ++j) {
          const double* vh = v.data() + (seg.offset + j) * d + h * dh;
          double* dvh = dv.data() + (seg.offset + j) * d + h * dh;
          double acc = 0.0;
          for (std::size_t c = 0; c < dh; ++c) {
            acc += dctx[c] * vh[c];
            dvh[c] += row[j] * dctx[c];
          }
          dp[j] = acc;
          dot += acc * row[j];
        }
        const double* qh = q.data() + qr * d + h * dh;
        double* dqh = dq.data() + qr * d + h * dh;
        for (std::size_t j = 0; j < seg.length; ++j) {
          const double ds = row[j] * (dp[j] - dot) * scale;
          const double* kh = k.data() + (seg.offset + j) * d + h * dh;
          double* dkh = dk.data() + (seg.offset + j) * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) {
            dqh[c] += ds * kh[c];
            dkh[c] += ds * qh[c];
          }
        }
      }
      dmask_per_segment[s * heads + h] = dxi;
    }
  }
}

}  // namespace rmc::kernels
