#include "rmc/train.hpp"

#include <algorithm>
#include <numeric>
#include <random>

#include "rmc/error.hpp"
#include "rmc/ops.hpp"

namespace rmc {

TokenBatch EncodedSet::batch(std::span<const std::size_t> rows) const {
  std::vector<std::vector<int>> seqs;
  seqs.reserve(rows.size());
  for (auto r : rows) seqs.push_back(sequences.at(r));
  return TokenBatch::from_sequences(seqs);
}

EncodedSet encode_all(std::span<const LabeledPairExample> examples) {
  EncodedSet s;
  s.sequences.reserve(examples.size());
  s.labels.reserve(examples.size());
  for (const auto& ex : examples) {
    s.sequences.push_back(encode(ex));
    s.labels.push_back(ex.label);
  }
  return s;
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight decay must be nonnegative");
  if (epochs == 0) throw ConfigError("epochs must be positive");
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0))
    throw ConfigError("warmup fraction must lie in [0,1)");
}

std::size_t TrainConfig::steps_per_epoch(std::size_t examples) const {
  return (examples + batch_size - 1) / batch_size;
}

TrainResult train(TransformerClassifier& model, const EncodedSet& data, const TrainConfig& config,
                  const BatchLoss& loss, const TrainHooks& hooks) {
  config.validate();
  if (data.size() == 0) throw ContractError("training set is empty");
  OptimizerState opt;
  opt.learning_rate = config.learning_rate;
  opt.weight_decay = config.weight_decay;

  const std::size_t per_epoch = config.steps_per_epoch(data.size());
  const std::size_t total = per_epoch * config.epochs;
  const auto warmup = static_cast<std::size_t>(config.warmup_fraction * static_cast<double>(total));

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(splitmix64(config.seed ^ 0x7261696eULL));

  TrainResult result;
  auto& params = model.parameters();
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_sum = 0.0;
    for (std::size_t b = 0; b < per_epoch; ++b) {
      const std::size_t step = result.steps;
      if (hooks.before_step) hooks.before_step(model, step, total);

      const double t = static_cast<double>(step);
      opt.learning_rate =
          step < warmup ? config.learning_rate * (t + 1.0) / static_cast<double>(warmup)
                        : config.learning_rate * static_cast<double>(total - step) /
                              static_cast<double>(total - warmup);

      const std::size_t lo = b * config.batch_size;
      const std::size_t hi = std::min(lo + config.batch_size, data.size());
      std::span<const std::size_t> rows(order.data() + lo, hi - lo);
      Tensor logits = model.forward(data.batch(rows));
      Tensor l = loss(logits, rows);
      backward(l);
      adamw_step(params, opt);
      zero_grad(params);

      result.step_loss.push_back(l.item());
      epoch_sum += l.item();
      ++result.steps;
      if (hooks.after_step) hooks.after_step(model, step);
    }
    result.epoch_loss.push_back(epoch_sum / static_cast<double>(per_epoch));
  }
  return result;
}

BatchLoss cross_entropy_loss(const EncodedSet& data) {
  return [&data](const Tensor& logits, std::span<const std::size_t> rows) {
    std::vector<int> y(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) y[i] = data.labels[rows[i]];
    return ops::cross_entropy(logits, y);
  };
}

namespace {

template <typename Fn>
std::vector<double> evaluate_rows(const TransformerClassifier& model, const EncodedSet& data,
                                  std::size_t batch_size, Fn&& head) {
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  NoGradGuard guard;
  const std::size_t k = model.config().num_classes;
  std::vector<double> out(data.size() * k);
  std::vector<std::size_t> rows;
  for (std::size_t lo = 0; lo < data.size(); lo += batch_size) {
    const std::size_t hi = std::min(lo + batch_size, data.size());
    rows.resize(hi - lo);
    std::iota(rows.begin(), rows.end(), lo);
    Tensor t = head(model.forward(data.batch(rows)));
    std::copy(t.data().begin(), t.data().end(), out.begin() + static_cast<std::ptrdiff_t>(lo * k));
  }
  return out;
}

}  // namespace

std::vector<double> predict_logits(const TransformerClassifier& model, const EncodedSet& data,
                                   std::size_t batch_size) {
  return evaluate_rows(model, data, batch_size, [](Tensor z) { return z; });
}

std::vector<double> predict_probs(const TransformerClassifier& model, const EncodedSet& data,
                                  std::size_t batch_size) {
  return evaluate_rows(model, data, batch_size, [](const Tensor& z) { return ops::softmax_rows(z); });
}

std::vector<int> argmax_rows(std::span<const double> probs, std::size_t num_classes) {
  std::vector<int> out(probs.size() / num_classes);
  for (std::size_t i = 0; i < out.size(); ++i) {
    int best = 0;
    for (std::size_t c = 1; c < num_classes; ++c)
      if (probs[i * num_classes + c] > probs[i * num_classes + static_cast<std::size_t>(best)])
        best = static_cast<int>(c);
    out[i] = best;
  }
  return out;
}

}  // namespace rmc
