#include "rmc/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "rmc/error.hpp"

namespace rmc::ops {

namespace {

using detail::Node;

void require_rank2(const Tensor& t, const char* what) {
  if (t.rank() != 2)
    throw DimensionError(std::string(what) + " expects a rank-2 tensor, got " +
                         shape_string(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(what) + ": shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()) + " differ");
}

std::vector<double> transposed(std::size_t rows, std::size_t cols, std::span<const double> x) {
  std::vector<double> out(x.size());
  kernels::transpose(rows, cols, x, out);
  return out;
}

// self.grad as a read-only span.
std::span<const double> upstream(const Node& self) { return self.grad; }

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k)
    throw DimensionError("matmul: inner dimensions disagree for " + shape_string(a.shape()) +
                         " x " + shape_string(b.shape()));
  std::vector<double> out(m * n);
  kernels::gemm(m, n, k, a.data(), b.data(), out, false);
  return detail::make_result({m, n}, std::move(out), {a.node_ptr(), b.node_ptr()},
                             [m, n, k](Node& self) {
                               Node& pa = *self.parents[0];
                               Node& pb = *self.parents[1];
                               if (pa.requires_grad) {
                                 const auto bt = transposed(k, n, pb.data);
                                 kernels::gemm(m, k, n, upstream(self), bt, pa.ensure_grad(), true);
                               }
                               if (pb.requires_grad) {
                                 const auto at = transposed(m, k, pa.data);
                                 kernels::gemm(k, n, m, at, upstream(self), pb.ensure_grad(), true);
                               }
                             });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i];
  return detail::make_result(a.shape(), std::move(out), {a.node_ptr(), b.node_ptr()},
                             [](Node& self) {
                               for (int p = 0; p < 2; ++p) {
                                 Node& in = *self.parents[p];
                                 if (!in.requires_grad) continue;
                                 auto& g = in.ensure_grad();
                                 for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                               }
                             });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
  return detail::make_result(a.shape(), std::move(out), {a.node_ptr(), b.node_ptr()},
                             [](Node& self) {
                               Node& pa = *self.parents[0];
                               Node& pb = *self.parents[1];
                               if (pa.requires_grad) {
                                 auto& g = pa.ensure_grad();
                                 for (std::size_t i = 0; i < g.size(); ++i)
                                   g[i] += self.grad[i] * pb.data[i];
                               }
                               if (pb.requires_grad) {
                                 auto& g = pb.ensure_grad();
                                 for (std::size_t i = 0; i < g.size(); ++i)
                                   g[i] += self.grad[i] * pa.data[i];
                               }
                             });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& x : out) x *= factor;
  return detail::make_result(a.shape(), std::move(out), {a.node_ptr()}, [factor](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
  });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.data()) s += x;
  return detail::make_result({}, {s}, {a.node_ptr()}, [](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (auto& x : g) x += self.grad[0];
  });
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  require_rank2(x, "add_row_bias");
  const std::size_t rows = x.rows(), cols = x.cols();
  if (bias.shape() != Shape{cols})
    throw DimensionError("add_row_bias: bias " + shape_string(bias.shape()) +
                         " does not match columns of " + shape_string(x.shape()));
  std::vector<double> out(x.data().begin(), x.data().end());
  kernels::add_row_bias(rows, cols, bias.data(), out);
  return detail::make_result(x.shape(), std::move(out), {x.node_ptr(), bias.node_ptr()},
                             [rows, cols](Node& self) {
                               Node& px = *self.parents[0];
                               Node& pb = *self.parents[1];
                               if (px.requires_grad) {
                                 auto& g = px.ensure_grad();
                                 for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                               }
                               if (pb.requires_grad) {
                                 auto& g = pb.ensure_grad();
                                 for (std::size_t r = 0; r < rows; ++r)
                                   for (std::size_t c = 0; c < cols; ++c)
                                     g[c] += self.grad[r * cols + c];
                               }
                             });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  require_rank2(x, "linear");
  require_rank2(w, "linear");
  const std::size_t m = x.rows(), k = x.cols(), n = w.cols();
  if (w.rows() != k)
    throw DimensionError("linear: input " + shape_string(x.shape()) + " does not match weight " +
                         shape_string(w.shape()));
  if (b.shape() != Shape{n})
    throw DimensionError("linear: bias " + shape_string(b.shape()) + " does not match weight " +
                         shape_string(w.shape()));
  std::vector<double> out(m * n);
  kernels::gemm(m, n, k, x.data(), w.data(), out, false);
  kernels::add_row_bias(m, n, b.data(), out);
  return detail::make_result(
      {m, n}, std::move(out), {x.node_ptr(), w.node_ptr(), b.node_ptr()}, [m, n, k](Node& self) {
        Node& px = *self.parents[0];
        Node& pw = *self.parents[1];
        Node& pb = *self.parents[2];
        if (px.requires_grad) {
          const auto wt = transposed(k, n, pw.data);
          kernels::gemm(m, k, n, upstream(self), wt, px.ensure_grad(), true);
        }
        if (pw.requires_grad) {
          const auto xt = transposed(m, k, px.data);
          kernels::gemm(k, n, m, xt, upstream(self), pw.ensure_grad(), true);
        }
        if (pb.requires_grad) {
          auto& g = pb.ensure_grad();
          for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < n; ++c) g[c] += self.grad[r * n + c];
        }
      });
}

Tensor gelu(const Tensor& x) {
  std::vector<double> out(x.numel());
  kernels::gelu(x.data(), out);
  return detail::make_result(x.shape(), std::move(out), {x.node_ptr()}, [](Node& self) {
    Node& px = *self.parents[0];
    kernels::gelu_backward(px.data, upstream(self), px.ensure_grad());
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_rank2(x, "layer_norm");
  const std::size_t rows = x.rows(), cols = x.cols();
  if (gain.shape() != Shape{cols} || bias.shape() != Shape{cols})
    throw DimensionError("layer_norm: gain/bias must have shape [" + std::to_string(cols) + "]");
  std::vector<double> out(x.numel()), mean(rows), rstd(rows);
  kernels::layer_norm(rows, cols, x.data(), gain.data(), bias.data(), eps, out, mean, rstd);
  return detail::make_result(
      x.shape(), std::move(out), {x.node_ptr(), gain.node_ptr(), bias.node_ptr()},
      [rows, cols, mean = std::move(mean), rstd = std::move(rstd)](Node& self) {
        Node& px = *self.parents[0];
        Node& pg = *self.parents[1];
        Node& pb = *self.parents[2];
        // The kernel writes all three gradients; route unused ones to scratch.
        std::vector<double> scratch_x, scratch_g, scratch_b;
        auto& dx = px.requires_grad ? px.ensure_grad() : (scratch_x.assign(rows * cols, 0.0), scratch_x);
        auto& dg = pg.requires_grad ? pg.ensure_grad() : (scratch_g.assign(cols, 0.0), scratch_g);
        auto& db = pb.requires_grad ? pb.ensure_grad() : (scratch_b.assign(cols, 0.0), scratch_b);
        kernels::layer_norm_backward(rows, cols, px.data, pg.data, mean, rstd, upstream(self), dx,
                                     dg, db);
      });
}

Tensor softmax_rows(const Tensor& x) {
  require_rank2(x, "softmax_rows");
  for (double v : x.data())
    if (!std::isfinite(v)) throw NumericError("softmax_rows: non-finite input value");
  const std::size_t rows = x.rows(), cols = x.cols();
  std::vector<double> out(x.numel());
  kernels::softmax_rows(rows, cols, x.data(), out);
  return detail::make_result(x.shape(), std::move(out), {x.node_ptr()},
                             [rows, cols](Node& self) {
                               Node& px = *self.parents[0];
                               kernels::softmax_rows_backward(rows, cols, self.data,
                                                              upstream(self), px.ensure_grad());
                             });
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  require_rank2(table, "embedding");
  const std::size_t vocab = table.rows(), dim = table.cols();
  if (ids.empty()) throw DimensionError("embedding: empty id list");
  std::vector<double> out(ids.size() * dim);
  const auto td = table.data();
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= vocab)
      throw IndexError("embedding: id " + std::to_string(ids[r]) + " outside [0," +
                       std::to_string(vocab) + ")");
    std::copy_n(td.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(ids[r]) * dim),
                dim, out.begin() + static_cast<std::ptrdiff_t>(r * dim));
  }
  std::vector<int> saved(ids.begin(), ids.end());
  return detail::make_result({ids.size(), dim}, std::move(out), {table.node_ptr()},
                             [dim, saved = std::move(saved)](Node& self) {
                               auto& g = self.parents[0]->ensure_grad();
                               for (std::size_t r = 0; r < saved.size(); ++r) {
                                 const std::size_t base = static_cast<std::size_t>(saved[r]) * dim;
                                 for (std::size_t c = 0; c < dim; ++c)
                                   g[base + c] += self.grad[r * dim + c];
                               }
                             });
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  require_rank2(x, "gather_rows");
  const std::size_t n = x.rows(), cols = x.cols();
  if (rows.empty()) throw DimensionError("gather_rows: empty row list");
  std::vector<double> out(rows.size() * cols);
  const auto xd = x.data();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= n)
      throw IndexError("gather_rows: row " + std::to_string(rows[r]) + " outside [0," +
                       std::to_string(n) + ")");
    std::copy_n(xd.begin() + static_cast<std::ptrdiff_t>(rows[r] * cols), cols,
                out.begin() + static_cast<std::ptrdiff_t>(r * cols));
  }
  std::vector<std::size_t> saved(rows.begin(), rows.end());
  return detail::make_result({rows.size(), cols}, std::move(out), {x.node_ptr()},
                             [cols, saved = std::move(saved)](Node& self) {
                               auto& g = self.parents[0]->ensure_grad();
                               for (std::size_t r = 0; r < saved.size(); ++r)
                                 for (std::size_t c = 0; c < cols; ++c)
                                   g[saved[r] * cols + c] += self.grad[r * cols + c];
                             });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& head_mask,
                 const kernels::AttentionLayout& layout) {
  require_rank2(q, "attention");
  require_rank2(k, "attention");
  require_rank2(v, "attention");
  const std::size_t d = layout.model_dim;
  const std::size_t heads = layout.num_heads;
  if (heads == 0 || d % heads != 0)
    throw DimensionError("attention: model dim " + std::to_string(d) +
                         " not divisible by head count " + std::to_string(heads));
  if (k.shape() != Shape{layout.key_rows(), d} || v.shape() != k.shape())
    throw DimensionError("attention: keys/values " + shape_string(k.shape()) + "/" +
                         shape_string(v.shape()) + " do not match layout");
  if (q.shape() != Shape{layout.query_rows(), d})
    throw DimensionError("attention: queries " + shape_string(q.shape()) +
                         " do not match layout");
  std::size_t stride = 0;
  if (head_mask.shape() == Shape{heads}) {
    stride = 0;
  } else if (head_mask.shape() == Shape{layout.segments.size(), heads}) {
    stride = heads;
  } else {
    throw DimensionError("attention: head mask " + shape_string(head_mask.shape()) +
                         " must be [heads] or [segments, heads]");
  }
  std::size_t expect = 0;
  for (const auto& s : layout.segments) {
    if (s.offset != expect || s.length == 0)
      throw DimensionError("attention: segments must tile the key rows contiguously");
    expect += s.length;
  }
  std::vector<double> probs(layout.prob_size());
  std::vector<double> out(q.numel());
  kernels::attention(layout, q.data(), k.data(), v.data(), head_mask.data(), stride, probs, out);
  return detail::make_result(
      q.shape(), std::move(out),
      {q.node_ptr(), k.node_ptr(), v.node_ptr(), head_mask.node_ptr()},
      [layout, stride, probs = std::move(probs)](Node& self) {
        Node& pq = *self.parents[0];
        Node& pk = *self.parents[1];
        Node& pv = *self.parents[2];
        Node& pm = *self.parents[3];
        std::vector<double> sq, sk, sv;
        auto& dq = pq.requires_grad ? pq.ensure_grad() : (sq.assign(pq.data.size(), 0.0), sq);
        auto& dk = pk.requires_grad ? pk.ensure_grad() : (sk.assign(pk.data.size(), 0.0), sk);
        auto& dv = pv.requires_grad ? pv.ensure_grad() : (sv.assign(pv.data.size(), 0.0), sv);
        const std::size_t nseg = layout.segments.size();
        std::vector<double> dmask(nseg * layout.num_heads);
        kernels::attention_backward(layout, pq.data, pk.data, pv.data, pm.data, stride, probs,
                                    upstream(self), dq, dk, dv, dmask);
        if (pm.requires_grad) {
          auto& g = pm.ensure_grad();
          if (stride == 0) {
            for (std::size_t s = 0; s < nseg; ++s)
              for (std::size_t h = 0; h < layout.num_heads; ++h)
                g[h] += dmask[s * layout.num_heads + h];
          } else {
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += dmask[i];
          }
        }
      });
}

namespace {

void check_weights(std::span<const double> weights, std::size_t batch, const char* what) {
  if (weights.empty()) return;
  if (weights.size() != batch)
    throw DimensionError(std::string(what) + ": " + std::to_string(weights.size()) +
                         " weights for batch of " + std::to_string(batch));
  for (double w : weights)
    if (!(w >= 0.0) || !std::isfinite(w))
      throw ContractError(std::string(what) + ": weights must be finite and nonnegative");
}

}  // namespace

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels,
                     std::span<const double> weights) {
  require_rank2(logits, "cross_entropy");
  const std::size_t batch = logits.rows(), classes = logits.cols();
  if (labels.size() != batch)
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) +
                         " labels for batch of " + std::to_string(batch));
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= classes)
      throw IndexError("cross_entropy: label " + std::to_string(y) + " outside [0," +
                       std::to_string(classes) + ")");
  check_weights(weights, batch, "cross_entropy");
  std::vector<double> probs(logits.numel());
  kernels::softmax_rows(batch, classes, logits.data(), probs);
  const auto z = logits.data();
  double total = 0.0;
  for (std::size_t i = 0; i < batch; ++i) {
    const double* zi = z.data() + i * classes;
    const double mx = *std::max_element(zi, zi + classes);
    double se = 0.0;
    for (std::size_t c = 0; c < classes; ++c) se += std::exp(zi[c] - mx);
    const double nll = (mx + std::log(se)) - zi[labels[i]];
    total += (weights.empty() ? 1.0 : weights[i]) * nll;
  }
  const double loss = total / static_cast<double>(batch);
  std::vector<int> saved_labels(labels.begin(), labels.end());
  std::vector<double> saved_weights(weights.begin(), weights.end());
  return detail::make_result(
      {}, {loss}, {logits.node_ptr()},
      [batch, classes, probs = std::move(probs), saved_labels = std::move(saved_labels),
       saved_weights = std::move(saved_weights)](Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        const double up = self.grad[0] / static_cast<double>(batch);
        for (std::size_t i = 0; i < batch; ++i) {
          const double w = (saved_weights.empty() ? 1.0 : saved_weights[i]) * up;
          for (std::size_t c = 0; c < classes; ++c) {
            const double onehot = static_cast<int>(c) == saved_labels[i] ? 1.0 : 0.0;
            g[i * classes + c] += w * (probs[i * classes + c] - onehot);
          }
        }
      });
}

Tensor kl_divergence(const Tensor& target, const Tensor& logits, std::span<const double> weights) {
  require_rank2(target, "kl_divergence");
  require_rank2(logits, "kl_divergence");
  require_same_shape(target, logits, "kl_divergence");
  const std::size_t batch = logits.rows(), classes = logits.cols();
  check_weights(weights, batch, "kl_divergence");
  const auto t = target.data();
  for (std::size_t i = 0; i < batch; ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < classes; ++c) {
      const double tv = t[i * classes + c];
      if (!(tv >= 0.0) || !std::isfinite(tv))
        throw ContractError("kl_divergence: target row " + std::to_string(i) +
                            " has a negative or non-finite entry");
      s += tv;
    }
    if (std::abs(s - 1.0) > 1e-6)
      throw ContractError("kl_divergence: target row " + std::to_string(i) + " sums to " +
                          std::to_string(s));
  }
  std::vector<double> probs(logits.numel());
  kernels::softmax_rows(batch, classes, logits.data(), probs);
  const auto z = logits.data();
  double total = 0.0;
  for (std::size_t i = 0; i < batch; ++i) {
    const double* zi = z.data() + i * classes;
    const double mx = *std::max_element(zi, zi + classes);
    double se = 0.0;
    for (std::size_t c = 0; c < classes; ++c) se += std::exp(zi[c] - mx);
    const double lse = mx + std::log(se);
    double kl = 0.0;
    for (std::size_t c = 0; c < classes; ++c) {
      const double tv = t[i * classes + c];
      if (tv > 0.0) kl += tv * (std::log(tv) - (zi[c] - lse));
    }
    total += (weights.empty() ? 1.0 : weights[i]) * kl;
  }
  const double loss = total / static_cast<double>(batch);
  std::vector<double> saved_target(t.begin(), t.end());
  std::vector<double> saved_weights(weights.begin(), weights.end());
  // Only the logits are parents: no gradient can reach the target.
  return detail::make_result(
      {}, {loss}, {logits.node_ptr()},
      [batch, classes, probs = std::move(probs), saved_target = std::move(saved_target),
       saved_weights = std::move(saved_weights)](Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        const double up = self.grad[0] / static_cast<double>(batch);
        for (std::size_t i = 0; i < batch; ++i) {
          const double w = (saved_weights.empty() ? 1.0 : saved_weights[i]) * up;
          for (std::size_t c = 0; c < classes; ++c)
            g[i * classes + c] += w * (probs[i * classes + c] - saved_target[i * classes + c]);
        }
      });
}

}  // namespace rmc::ops
