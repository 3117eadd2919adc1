#pragma once

// Dense numeric kernels behind the tensor engine.
//
// rmc::kernels holds the OpenMP-parallel versions used in training and
// evaluation. rmc::kernels::reference holds straightforward serial versions of
// the same functions; tests check the parallel kernels against them and the
// benchmark target times one against the other.
//
// Parallel kernels split work over independent output rows (or attention
// segments) and keep every reduction in a fixed serial order, so results do
// not depend on the thread count.

#include <cstddef>
#include <span>
#include <vector>

namespace rmc::kernels {

// One packed sequence inside a batch: rows [offset, offset + length).
struct Segment {
  std::size_t offset = 0;
  std::size_t length = 0;
};

// Describes multi-head attention over a packed batch. In full mode every key
// row is also a query row. In cls_only mode the query matrix holds exactly one
// row per segment (the first position), which is all the pooled classifier
// needs from the last encoder layer.
struct AttentionLayout {
  std::vector<Segment> segments;
  std::size_t num_heads = 1;
  std::size_t model_dim = 0;
  bool cls_only = false;

  std::size_t head_dim() const { return model_dim / num_heads; }
  std::size_t key_rows() const;
  std::size_t query_rows() const;
  // Offset of segment s's block inside the saved probability buffer.
  std::size_t prob_offset(std::size_t s) const;
  std::size_t prob_size() const;
};

// c[m x n] = a[m x k] * b[k x n]   (c += ... when accumulate)
void gemm(std::size_t m, std::size_t n, std::size_t k, std::span<const double> a,
          std::span<const double> b, std::span<double> c, bool accumulate);

// out[cols x rows] = in[rows x cols]^T
void transpose(std::size_t rows, std::size_t cols, std::span<const double> in,
               std::span<double> out);

void add_row_bias(std::size_t rows, std::size_t cols, std::span<const double> bias,
                  std::span<double> x);

void softmax_rows(std::size_t rows, std::size_t cols, std::span<const double> x,
                  std::span<double> y);
// dx += y * (dy - <dy, y>) row by row
void softmax_rows_backward(std::size_t rows, std::size_t cols, std::span<const double> y,
                           std::span<const double> dy, std::span<double> dx);

void gelu(std::span<const double> x, std::span<double> y);
// dx += dy * gelu'(x)
void gelu_backward(std::span<const double> x, std::span<const double> dy,
                   std::span<double> dx);

// y = (x - mean) * rstd * gain + bias per row; mean/rstd saved for backward.
void layer_norm(std::size_t rows, std::size_t cols, std::span<const double> x,
                std::span<const double> gain, std::span<const double> bias, double eps,
                std::span<double> y, std::span<double> mean, std::span<double> rstd);
// Accumulates into dx, dgain and dbias.
void layer_norm_backward(std::size_t rows, std::size_t cols, std::span<const double> x,
                         std::span<const double> gain, std::span<const double> mean,
                         std::span<const double> rstd, std::span<const double> dy,
                         std::span<double> dx, std::span<double> dgain,
                         std::span<double> dbias);

// head_mask holds num_heads values shared by every segment (stride 0) or one
// block of num_heads values per segment (stride num_heads). probs receives the
// attention weights needed by the backward pass (layout.prob_size() values).
void attention(const AttentionLayout& layout, std::span<const double> q,
               std::span<const double> k, std::span<const double> v,
               std::span<const double> head_mask, std::size_t head_mask_stride,
               std::span<double> probs, std::span<double> out);

// Accumulates into dq, dk, dv. dmask_per_segment receives (overwrites) one
// num_heads block per segment; callers reduce it when the mask is shared.
void attention_backward(const AttentionLayout& layout, std::span<const double> q,
                        std::span<const double> k, std::span<const double> v,
                        std::span<const double> head_mask, std::size_t head_mask_stride,
                        std::span<const double> probs, std::span<const double> dout,
                        std::span<double> dq, std::span<double> dk, std::span<double> dv,
                        std::span<double> dmask_per_segment);

namespace reference {

void gemm(std::size_t m, std::size_t n, std::size_t k, std::span<const double> a,
          std::span<const double> b, std::span<double> c, bool accumulate);
void transpose(std::size_t rows, std::size_t cols, std::span<const double> in,
               std::span<double> out);
void add_row_bias(std::size_t rows, std::size_t cols, std::span<const double> bias,
                  std::span<double> x);
void softmax_rows(std::size_t rows, std::size_t cols, std::span<const double> x,
                  std::span<double> y);
void softmax_rows_backward(std::size_t rows, std::size_t cols, std::span<const double> y,
                           std::span<const double> dy, std::span<double> dx);
void gelu(std::span<const double> x, std::span<double> y);
void gelu_backward(std::span<const double> x, std::span<const double> dy,
                   std::span<double> dx);
void layer_norm(std::size_t rows, std::size_t cols, std::span<const double> x,
                std::span<const double> gain, std::span<const double> bias, double eps,
                std::span<double> y, std::span<double> mean, std::span<double> rstd);
void layer_norm_backward(std::size_t rows, std::size_t cols, std::span<const double> x,
                         std::span<const double> gain, std::span<const double> mean,
                         std::span<const double> rstd, std::span<const double> dy,
                         std::span<double> dx, std::span<double> dgain,
                         std::span<double> dbias);
void attention(const AttentionLayout& layout, std::span<const double> q,
               std::span<const double> k, std::span<const double> v,
               std::span<const double> head_mask, std::size_t head_mask_stride,
               std::span<double> probs, std::span<double> out);
void attention_backward(const AttentionLayout& layout, std::span<const double> q,
                        std::span<const double> k, std::span<const double> v,
                        std::span<const double> head_mask, std::size_t head_mask_stride,
                        std::span<const double> probs, std::span<const double> dout,
                        std::span<double> dq, std::span<double> dk, std::span<double> dv,
                        std::span<double> dmask_per_segment);

}  // namespace reference

// GELU, tanh approximation, shared by both implementations.
double gelu_scalar(double x);
double gelu_derivative(double x);

}  // namespace rmc::kernels
