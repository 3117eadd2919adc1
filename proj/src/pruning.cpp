#include "rmc/pruning.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <tuple>

#include "rmc/error.hpp"
#include "rmc/ops.hpp"

namespace rmc {

PruneSchedule PruneSchedule::middle_third(double target, std::size_t total_steps, std::size_t events) {
  PruneSchedule s;
  s.target_sparsity = target;
  s.total_steps = total_steps;
  s.warmup_steps = total_steps / 3;
  s.pruning_steps = total_steps / 3;
  s.events = events;
  s.validate();
  return s;
}

void PruneSchedule::validate() const {
  if (!(target_sparsity >= 0.0 && target_sparsity < 1.0))
    throw ConfigError("target sparsity must lie in [0,1), got " + std::to_string(target_sparsity));
  if (events == 0) throw ConfigError("pruning schedule needs at least one event");
  if (total_steps == 0 || warmup_steps + pruning_steps >= total_steps)
    throw ConfigError("pruning ramp must end before the last of " + std::to_string(total_steps) +
                      " steps");
}

std::size_t PruneSchedule::event_step(std::size_t j) const {
  return warmup_steps + (j * pruning_steps + events - 1) / events;
}

double PruneSchedule::sparsity_at(std::size_t step) const {
  std::size_t done = 0;
  while (done < events && event_step(done + 1) <= step) ++done;
  if (done == events) return target_sparsity;
  const double r = 1.0 - static_cast<double>(done) / static_cast<double>(events);
  return target_sparsity * (1.0 - r * r * r);
}

std::size_t apply_magnitude_mask(std::span<Parameter> params, double sparsity) {
  if (!(sparsity >= 0.0 && sparsity < 1.0))
    throw ConfigError("sparsity must lie in [0,1), got " + std::to_string(sparsity));
  std::size_t maskable = 0, masked = 0;
  for (const auto& p : params) {
    if (!p.prunable()) continue;
    maskable += p.mask.numel();
    for (double m : p.mask.data()) masked += m == 0.0;
  }
  const auto want = static_cast<std::size_t>(std::llround(sparsity * static_cast<double>(maskable)));
  if (want <= masked) return 0;

  // (|w|, parameter, offset) for every surviving coordinate.
  std::vector<std::tuple<double, std::size_t, std::size_t>> alive;
  alive.reserve(maskable - masked);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].prunable()) continue;
    auto v = params[i].value.data();
    auto m = params[i].mask.data();
    for (std::size_t j = 0; j < v.size(); ++j)
      if (m[j] != 0.0) alive.emplace_back(std::fabs(v[j]), i, j);
  }
  const std::size_t n = want - masked;
  std::nth_element(alive.begin(), alive.begin() + static_cast<std::ptrdiff_t>(n - 1), alive.end());
  for (std::size_t t = 0; t < n; ++t) {
    const auto [mag, i, j] = alive[t];
    params[i].mask.data()[j] = 0.0;
    params[i].value.data()[j] = 0.0;
  }
  return n;
}

void magnitude_prune(TransformerClassifier& model, double sparsity) {
  apply_magnitude_mask(model.parameters(), sparsity);
}

PruneResult magnitude_prune_finetune(TransformerClassifier& model, const EncodedSet& data,
                                     const TrainConfig& config, double target_sparsity,
                                     const BatchLoss& loss, const TrainHooks& hooks) {
  config.validate();
  const auto per_epoch = config.steps_per_epoch(data.size());
  const auto schedule = PruneSchedule::middle_third(target_sparsity, per_epoch * config.epochs);

  PruneResult result;
  TrainHooks inner;
  inner.before_step = [&](TransformerClassifier& m, std::size_t step, std::size_t total) {
    const double s = schedule.sparsity_at(step);
    if (s > 0.0) magnitude_prune(m, s);
    if (hooks.before_step) hooks.before_step(m, step, total);
  };
  inner.after_step = [&](const TransformerClassifier& m, std::size_t step) {
    if ((step + 1) % per_epoch == 0) result.epoch_sparsity.push_back(sparsity(m));
    if (hooks.after_step) hooks.after_step(m, step);
  };

  model.set_embeddings_trainable(false);
  try {
    result.train = train(model, data, config, loss, inner);
  } catch (...) {
    model.set_embeddings_trainable(true);
    throw;
  }
  model.set_embeddings_trainable(true);
  return result;
}

HeadImportance head_importance(const TransformerClassifier& model, const EncodedSet& probe,
                               std::size_t batch_size) {
  if (probe.size() == 0) throw ContractError("head importance needs a nonempty probe set");
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  const std::size_t L = model.config().num_layers, H = model.config().num_heads;

  // Only xi carries gradients; the copy keeps the caller's tensors untouched.
  TransformerClassifier m = model.clone();
  for (auto& p : m.parameters()) p.value.set_requires_grad(false);

  HeadImportance out;
  out.layers = L;
  out.heads = H;
  out.scores.assign(L * H, 0.0);
  out.samples = probe.size();

  std::vector<std::size_t> rows;
  for (std::size_t lo = 0; lo < probe.size(); lo += batch_size) {
    const std::size_t hi = std::min(lo + batch_size, probe.size());
    const std::size_t B = hi - lo;
    rows.resize(B);
    std::iota(rows.begin(), rows.end(), lo);

    ForwardOptions opts;
    for (std::size_t l = 0; l < L; ++l) {
      std::vector<double> xi(B * H);
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t h = 0; h < H; ++h) xi[b * H + h] = m.xi(l, h);
      opts.head_masks.push_back(Tensor::from_data({B, H}, std::move(xi), true));
    }
    std::vector<int> y(B);
    for (std::size_t b = 0; b < B; ++b) y[b] = probe.labels[lo + b];
    // Summed rather than averaged so row b of each xi gradient is dL_b/dxi.
    std::vector<double> ones(B, static_cast<double>(B));
    Tensor loss = ops::cross_entropy(m.forward(probe.batch(rows), opts), y, ones);
    backward(loss);
    for (std::size_t l = 0; l < L; ++l) {
      auto g = opts.head_masks[l].grad();
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t h = 0; h < H; ++h) out.scores[l * H + h] += std::fabs(g[b * H + h]);
    }
  }
  for (auto& s : out.scores) s /= static_cast<double>(probe.size());
  return out;
}

std::vector<std::pair<std::size_t, std::size_t>> structured_prune(TransformerClassifier& model,
                                                                  const HeadImportance& scores,
                                                                  std::size_t num_to_prune) {
  const std::size_t L = model.config().num_layers, H = model.config().num_heads;
  if (scores.layers != L || scores.heads != H || scores.scores.size() != L * H)
    throw DimensionError("head scores are " + std::to_string(scores.layers) + "x" +
                         std::to_string(scores.heads) + ", model has " + std::to_string(L) + "x" +
                         std::to_string(H) + " heads");
  if (num_to_prune >= L * H)
    throw ConfigError("cannot prune " + std::to_string(num_to_prune) + " of " +
                      std::to_string(L * H) + " heads");
  std::vector<std::size_t> order(L * H);
  std::iota(order.begin(), order.end(), 0);
  // Flat index is layer-major, so it doubles as the tie-break.
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores.scores[a] < scores.scores[b];
  });
  std::vector<std::pair<std::size_t, std::size_t>> pruned;
  for (std::size_t i = 0; i < num_to_prune; ++i) {
    model.set_xi(order[i] / H, order[i] % H, 0.0);
    pruned.emplace_back(order[i] / H, order[i] % H);
  }
  return pruned;
}

}  // namespace rmc
