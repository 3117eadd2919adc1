#pragma once

// Differentiable operations over rmc::Tensor. Every op checks its input
// shapes, evaluates through rmc::kernels and, when recording, registers a
// closure that accumulates gradients into the inputs that need them.

#include <cstddef>
#include <span>

#include "rmc/kernels.hpp"
#include "rmc/tensor.hpp"

namespace rmc::ops {

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor sum(const Tensor& a);

// x[rows, cols] + bias[cols] broadcast over rows.
Tensor add_row_bias(const Tensor& x, const Tensor& bias);
// x[rows, in] * w[in, out] + b[out]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

Tensor gelu(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

// Row-wise softmax stabilized by subtracting the row maximum.
Tensor softmax_rows(const Tensor& x);

// Rows of table[vocab, dim] selected by ids.
Tensor embedding(const Tensor& table, std::span<const int> ids);
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);

// Multi-head scaled dot-product attention over a packed batch. head_mask has
// shape [heads] (shared) or [segments, heads]; each head's context vector is
// multiplied by its mask entry before leaving the op.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& head_mask,
                 const kernels::AttentionLayout& layout);

// Mean over the batch of w_i * -log softmax(logits_i)[label_i]. Weights
// default to one; the sum is always divided by the batch size.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels,
                     std::span<const double> weights = {});

// Mean over the batch of w_i * KL(target_i || softmax(logits_i)). The target
// is treated as a constant.
Tensor kl_divergence(const Tensor& target, const Tensor& logits,
                     std::span<const double> weights = {});

}  // namespace rmc::ops
