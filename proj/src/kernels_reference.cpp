// Serial reference kernels. Written for clarity, not speed; the parallel
// kernels in kernels.cpp are tested against these.

#include <algorithm>
#include <cmath>
#include <limits>

#include "rmc/kernels.hpp"

namespace rmc::kernels::reference {

void gemm(std::size_t m, std::size_t n, std::size_t k, std::span<const double> a,
          std::span<const double> b, std::span<double> c, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = accumulate ? c[i * n + j] : 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
      c[i * n + j] = s;
    }
  }
}

void transpose(std::size_t rows, std::size_t cols, std::span<const double> in,
               std::span<double> out) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = in[r * cols + c];
}

void add_row_bias(std::size_t rows, std::size_t cols, std::span<const double> bias,
                  std::span<double> x) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) x[r * cols + c] += bias[c];
}

void softmax_rows(std::size_t rows, std::size_t cols, std::span<const double> x,
                  std::span<double> y) {
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < cols; ++c) mx = std::max(mx, x[r * cols + c]);
    double sum = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      y[r * cols + c] = std::exp(x[r * cols + c] - mx);
      sum += y[r * cols + c];
    }
    for (std::size_t c = 0; c < cols; ++c) y[r * cols + c] /= sum;
  }
}

void softmax_rows_backward(std::size_t rows, std::size_t cols, std::span<const double> y,
                           std::span<const double> dy, std::span<double> dx) {
  for (std::size_t r = 0; r < rows; ++r) {
    double dot = 0.0;
    for (std::size_t c = 0; c < cols; ++c) dot += dy[r * cols + c] * y[r * cols + c];
    for (std::size_t c = 0; c < cols; ++c)
      dx[r * cols + c] += y[r * cols + c] * (dy[r * cols + c] - dot);
  }
}

void gelu(std::span<const double> x, std::span<double> y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = gelu_scalar(x[i]);
}

void gelu_backward(std::span<const double> x, std::span<const double> dy,
                   std::span<double> dx) {
  for (std::size_t i = 0; i < x.size(); ++i) dx[i] += dy[i] * gelu_derivative(x[i]);
}

void layer_norm(std::size_t rows, std::size_t cols, std::span<const double> x,
                std::span<const double> gain, std::span<const double> bias, double eps,
                std::span<double> y, std::span<double> mean, std::span<double> rstd) {
  for (std::size_t r = 0; r < rows; ++r) {
    double mu = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mu += x[r * cols + c];
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      const double d = x[r * cols + c] - mu;
      var += d * d;
    }
    var /= static_cast<double>(cols);
    const double rs = 1.0 / std::sqrt(var + eps);
    mean[r] = mu;
    rstd[r] = rs;
    for (std::size_t c = 0; c < cols; ++c)
      y[r * cols + c] = (x[r * cols + c] - mu) * rs * gain[c] + bias[c];
  }
}

void layer_norm_backward(std::size_t rows, std::size_t cols, std::span<const double> x,
                         std::span<const double> gain, std::span<const double> mean,
                         std::span<const double> rstd, std::span<const double> dy,
                         std::span<double> dx, std::span<double> dgain,
                         std::span<double> dbias) {
  const double n = static_cast<double>(cols);
  for (std::size_t r = 0; r < rows; ++r) {
    double mean_dxhat = 0.0;
    double mean_dxhat_xhat = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      const double xhat = (x[r * cols + c] - mean[r]) * rstd[r];
      const double dxhat = dy[r * cols + c] * gain[c];
      mean_dxhat += dxhat;
      mean_dxhat_xhat += dxhat * xhat;
      dgain[c] += dy[r * cols + c] * xhat;
      dbias[c] += dy[r * cols + c];
    }
    mean_dxhat /= n;
    mean_dxhat_xhat /= n;
    for (std::size_t c = 0; c < cols; ++c) {
      const double xhat = (x[r * cols + c] - mean[r]) * rstd[r];
      const double dxhat = dy[r * cols + c] * gain[c];
      dx[r * cols + c] += rstd[r] * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
    }
  }
}

namespace {

std::size_t query_row(const AttentionLayout& layout, std::size_t s, std::size_t i) {
  return layout.cls_only ? s : layout.segments[s].offset + i;
}

std::size_t queries_in(const AttentionLayout& layout, std::size_t s) {
  return layout.cls_only ? 1 : layout.segments[s].length;
}

}  // namespace

void attention(const AttentionLayout& layout, std::span<const double> q,
               std::span<const double> k, std::span<const double> v,
               std::span<const double> head_mask, std::size_t head_mask_stride,
               std::span<double> probs, std::span<double> out) {
  const std::size_t d = layout.model_dim;
  const std::size_t dh = layout.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::size_t s = 0; s < layout.segments.size(); ++s) {
    const auto seg = layout.segments[s];
    const std::size_t nq = queries_in(layout, s);
    double* p = probs.data() + layout.prob_offset(s);
    for (std::size_t h = 0; h < layout.num_heads; ++h) {
      const double xi = head_mask[s * head_mask_stride + h];
      for (std::size_t i = 0; i < nq; ++i) {
        const std::size_t qr = query_row(layout, s, i);
        double* row = p + (h * nq + i) * seg.length;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < seg.length; ++j) {
          double dot = 0.0;
          for (std::size_t c = 0; c < dh; ++c)
            dot += q[qr * d + h * dh + c] * k[(seg.offset + j) * d + h * dh + c];
          row[j] = dot * scale;
          mx = std::max(mx, row[j]);
        }
        double sum = 0.0;
        for (std::size_t j = 0; j < seg.length; ++j) {
          row[j] = std::exp(row[j] - mx);
          sum += row[j];
        }
        for (std::size_t j = 0; j < seg.length; ++j) row[j] /= sum;
        for (std::size_t c = 0; c < dh; ++c) {
          double acc = 0.0;
          for (std::size_t j = 0; j < seg.length; ++j)
            acc += row[j] * v[(seg.offset + j) * d + h * dh + c];
          out[qr * d + h * dh + c] = xi * acc;
        }
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
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> dctx(dh);
  std::vector<double> dp;
  for (std::size_t s = 0; s < layout.segments.size(); ++s) {
    const auto seg = layout.segments[s];
    const std::size_t nq = queries_in(layout, s);
    const double* p = probs.data() + layout.prob_offset(s);
    dp.assign(seg.length, 0.0);
    for (std::size_t h = 0; h < layout.num_heads; ++h) {
      const double xi = head_mask[s * head_mask_stride + h];
      double dxi = 0.0;
      for (std::size_t i = 0; i < nq; ++i) {
        const std::size_t qr = query_row(layout, s, i);
        const double* row = p + (h * nq + i) * seg.length;
        // ctx = sum_j p_j v_j; out = xi * ctx
        for (std::size_t c = 0; c < dh; ++c) {
          double ctx = 0.0;
          for (std::size_t j = 0; j < seg.length; ++j)
            ctx += row[j] * v[(seg.offset + j) * d + h * dh + c];
          dxi += dout[qr * d + h * dh + c] * ctx;
          dctx[c] = xi * dout[qr * d + h * dh + c];
        }
        double dot = 0.0;
        for (std::size_t j = 0; j < seg.length; ++j) {
          double acc = 0.0;
          for (std::size_t c = 0; c < dh; ++c) {
            acc += dctx[c] * v[(seg.offset + j) * d + h * dh + c];
            dv[(seg.offset + j) * d + h * dh + c] += row[j] * dctx[c];
          }
          dp[j] = acc;
          dot += acc * row[j];
        }
        for (std::size_t j = 0; j < seg.length; ++j) {
          const double ds = row[j] * (dp[j] - dot) * scale;
          for (std::size_t c = 0; c < dh; ++c) {
            dq[qr * d + h * dh + c] += ds * k[(seg.offset + j) * d + h * dh + c];
            dk[(seg.offset + j) * d + h * dh + c] += ds * q[qr * d + h * dh + c];
          }
        }
      }
      dmask_per_segment[s * layout.num_heads + h] = dxi;
    }
  }
}

}  // namespace rmc::kernels::reference
