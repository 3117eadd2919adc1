#pragma once

// Randomized finite-difference cases for every differentiable op. Shared by
// the unit tests and the acceptance binary.

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "rmc/ops.hpp"

namespace rmc::testing {

struct GradCase {
  std::string op;
  std::function<GradCheckResult(std::mt19937_64&)> run;
};

// Reduces a tensor to a scalar with fixed random weights so every output
// coordinate carries a distinct upstream gradient.
inline Tensor project(const Tensor& out, const Tensor& weights) {
  return ops::sum(ops::mul(out, weights));
}

inline kernels::AttentionLayout random_attention_layout(std::mt19937_64& rng, bool cls_only) {
  kernels::AttentionLayout layout;
  layout.num_heads = random_extent(rng, 1, 3);
  layout.model_dim = layout.num_heads * random_extent(rng, 1, 3);
  layout.cls_only = cls_only;
  const std::size_t segs = random_extent(rng, 1, 3);
  std::size_t off = 0;
  for (std::size_t s = 0; s < segs; ++s) {
    const std::size_t n = random_extent(rng, 1, 4);
    layout.segments.push_back({off, n});
    off += n;
  }
  return layout;
}

inline std::vector<GradCase> gradient_suite() {
  std::vector<GradCase> cases;

  cases.push_back({"matmul", [](std::mt19937_64& rng) {
                     const auto m = random_extent(rng, 1, 4), k = random_extent(rng, 1, 4),
                                n = random_extent(rng, 1, 4);
                     auto a = random_tensor(rng, {m, k});
                     auto b = random_tensor(rng, {k, n});
                     auto w = random_tensor(rng, {m, n}, -1, 1, false);
                     return grad_check([&] { return project(ops::matmul(a, b), w); }, {a, b});
                   }});
  cases.push_back({"add", [](std::mt19937_64& rng) {
                     const Shape s{random_extent(rng, 1, 4), random_extent(rng, 1, 4)};
                     auto a = random_tensor(rng, s);
                     auto b = random_tensor(rng, s);
                     auto w = random_tensor(rng, s, -1, 1, false);
                     return grad_check([&] { return project(ops::add(a, b), w); }, {a, b});
                   }});
  cases.push_back({"mul", [](std::mt19937_64& rng) {
                     const Shape s{random_extent(rng, 1, 4), random_extent(rng, 1, 4)};
                     auto a = random_tensor(rng, s);
                     auto b = random_tensor(rng, s);
                     auto w = random_tensor(rng, s, -1, 1, false);
                     return grad_check([&] { return project(ops::mul(a, b), w); }, {a, b});
                   }});
  cases.push_back({"scale", [](std::mt19937_64& rng) {
                     const Shape s{random_extent(rng, 1, 5)};
                     auto a = random_tensor(rng, s);
                     auto w = random_tensor(rng, s, -1, 1, false);
                     const double c = std::uniform_real_distribution<double>(-2, 2)(rng);
                     return grad_check([&] { return project(ops::scale(a, c), w); }, {a});
                   }});
  cases.push_back({"sum", [](std::mt19937_64& rng) {
                     auto a = random_tensor(rng, {random_extent(rng, 1, 4), random_extent(rng, 1, 4)});
                     return grad_check([&] { return ops::sum(ops::mul(a, a)); }, {a});
                   }});
  cases.push_back({"add_row_bias", [](std::mt19937_64& rng) {
                     const auto r = random_extent(rng, 1, 4), c = random_extent(rng, 1, 4);
                     auto x = random_tensor(rng, {r, c});
                     auto b = random_tensor(rng, {c});
                     auto w = random_tensor(rng, {r, c}, -1, 1, false);
                     return grad_check([&] { return project(ops::add_row_bias(x, b), w); }, {x, b});
                   }});
  cases.push_back({"linear", [](std::mt19937_64& rng) {
                     const auto m = random_extent(rng, 1, 4), k = random_extent(rng, 1, 4),
                                n = random_extent(rng, 1, 4);
                     auto x = random_tensor(rng, {m, k});
                     auto wt = random_tensor(rng, {k, n});
                     auto b = random_tensor(rng, {n});
                     auto w = random_tensor(rng, {m, n}, -1, 1, false);
                     return grad_check([&] { return project(ops::linear(x, wt, b), w); },
                                       {x, wt, b});
                   }});
  cases.push_back({"gelu", [](std::mt19937_64& rng) {
                     const Shape s{random_extent(rng, 1, 4), random_extent(rng, 1, 4)};
                     auto x = random_tensor(rng, s, -3, 3);
                     auto w = random_tensor(rng, s, -1, 1, false);
                     return grad_check([&] { return project(ops::gelu(x), w); }, {x});
                   }});
  cases.push_back({"layer_norm", [](std::mt19937_64& rng) {
                     const auto r = random_extent(rng, 1, 4), c = random_extent(rng, 2, 6);
                     auto x = random_tensor(rng, {r, c}, -2, 2);
                     auto g = random_tensor(rng, {c}, 0.5, 1.5);
                     auto b = random_tensor(rng, {c});
                     auto w = random_tensor(rng, {r, c}, -1, 1, false);
                     return grad_check([&] { return project(ops::layer_norm(x, g, b), w); },
                                       {x, g, b});
                   }});
  cases.push_back({"softmax_rows", [](std::mt19937_64& rng) {
                     const Shape s{random_extent(rng, 1, 4), random_extent(rng, 1, 6)};
                     auto x = random_tensor(rng, s, -3, 3);
                     auto w = random_tensor(rng, s, -1, 1, false);
                     return grad_check([&] { return project(ops::softmax_rows(x), w); }, {x});
                   }});
  cases.push_back({"embedding", [](std::mt19937_64& rng) {
                     const auto vocab = random_extent(rng, 2, 6), dim = random_extent(rng, 1, 4);
                     auto table = random_tensor(rng, {vocab, dim});
                     std::vector<int> ids(random_extent(rng, 1, 6));
                     for (auto& id : ids) id = static_cast<int>(random_extent(rng, 0, vocab - 1));
                     auto w = random_tensor(rng, {ids.size(), dim}, -1, 1, false);
                     return grad_check([&] { return project(ops::embedding(table, ids), w); },
                                       {table});
                   }});
  cases.push_back({"gather_rows", [](std::mt19937_64& rng) {
                     const auto r = random_extent(rng, 1, 5), c = random_extent(rng, 1, 4);
                     auto x = random_tensor(rng, {r, c});
                     std::vector<std::size_t> rows(random_extent(rng, 1, 6));
                     for (auto& i : rows) i = random_extent(rng, 0, r - 1);
                     auto w = random_tensor(rng, {rows.size(), c}, -1, 1, false);
                     return grad_check([&] { return project(ops::gather_rows(x, rows), w); }, {x});
                   }});
  for (bool cls_only : {false, true}) {
    for (bool per_segment : {false, true}) {
      std::string name = std::string("attention") + (cls_only ? "[cls]" : "[full]") +
                         (per_segment ? "[per-segment mask]" : "[shared mask]");
      cases.push_back({name, [cls_only, per_segment](std::mt19937_64& rng) {
                         const auto layout = random_attention_layout(rng, cls_only);
                         const std::size_t d = layout.model_dim;
                         auto q = random_tensor(rng, {layout.query_rows(), d});
                         auto k = random_tensor(rng, {layout.key_rows(), d});
                         auto v = random_tensor(rng, {layout.key_rows(), d});
                         auto xi = per_segment
                                       ? random_tensor(rng, {layout.segments.size(), layout.num_heads}, 0, 1.5)
                                       : random_tensor(rng, {layout.num_heads}, 0, 1.5);
                         auto w = random_tensor(rng, {layout.query_rows(), d}, -1, 1, false);
                         return grad_check(
                             [&] { return project(ops::attention(q, k, v, xi, layout), w); },
                             {q, k, v, xi});
                       }});
    }
  }
  cases.push_back({"cross_entropy", [](std::mt19937_64& rng) {
                     const auto b = random_extent(rng, 1, 5), kk = random_extent(rng, 2, 4);
                     auto z = random_tensor(rng, {b, kk}, -2, 2);
                     std::vector<int> labels(b);
                     for (auto& y : labels) y = static_cast<int>(random_extent(rng, 0, kk - 1));
                     std::vector<double> weights(b);
                     for (auto& x : weights) x = std::uniform_real_distribution<double>(0, 2)(rng);
                     return grad_check([&] { return ops::cross_entropy(z, labels, weights); }, {z});
                   }});
  cases.push_back({"kl_divergence", [](std::mt19937_64& rng) {
                     const auto b = random_extent(rng, 1, 5), kk = random_extent(rng, 2, 4);
                     auto z = random_tensor(rng, {b, kk}, -2, 2);
                     auto t = random_tensor(rng, {b, kk}, 0.05, 1.0, false);
                     auto td = t.data();
                     for (std::size_t i = 0; i < b; ++i) {
                       double s = 0;
                       for (std::size_t c = 0; c < kk; ++c) s += td[i * kk + c];
                       for (std::size_t c = 0; c < kk; ++c) td[i * kk + c] /= s;
                     }
                     std::vector<double> weights(b);
                     for (auto& x : weights) x = std::uniform_real_distribution<double>(0, 2)(rng);
                     return grad_check([&] { return ops::kl_divergence(t, z, weights); }, {z});
                   }});
  return cases;
}

}  // namespace rmc::testing
