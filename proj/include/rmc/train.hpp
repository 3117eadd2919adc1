#pragma once

// Mini-batch fine-tuning loop shared by the teacher, the pruners and every
// distillation strategy. The loss is a callback so strategies differ only in
// how they turn a batch of logits into a scalar.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "rmc/data.hpp"
#include "rmc/model.hpp"

namespace rmc {

// Examples encoded once into token sequences.
struct EncodedSet {
  std::vector<std::vector<int>> sequences;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  TokenBatch batch(std::span<const std::size_t> rows) const;
};

EncodedSet encode_all(std::span<const LabeledPairExample> examples);

struct TrainConfig {
  double learning_rate = 3e-4;
  double weight_decay = 0.01;
  std::size_t epochs = 5;
  std::size_t batch_size = 64;
  // Fraction of steps spent warming the learning rate up linearly; it then
  // decays linearly to zero.
  double warmup_fraction = 0.06;
  std::uint64_t seed = 1;

  void validate() const;
  std::size_t steps_per_epoch(std::size_t examples) const;
};

// Maps the logits of a batch and the dataset rows it came from to a scalar.
using BatchLoss = std::function<Tensor(const Tensor& logits, std::span<const std::size_t> rows)>;

struct TrainHooks {
  // Runs before the forward pass of every optimizer step (0-based).
  std::function<void(TransformerClassifier&, std::size_t step, std::size_t total_steps)> before_step;
  // Runs after every optimizer step.
  std::function<void(const TransformerClassifier&, std::size_t step)> after_step;
};

struct TrainResult {
  std::vector<double> epoch_loss;  // mean batch loss per epoch
  std::vector<double> step_loss;
  std::size_t steps = 0;
};

TrainResult train(TransformerClassifier& model, const EncodedSet& data, const TrainConfig& config,
                  const BatchLoss& loss, const TrainHooks& hooks = {});

// Plain cross-entropy against the gold labels.
BatchLoss cross_entropy_loss(const EncodedSet& data);

// Row-major [N, K] logits in evaluation mode.
std::vector<double> predict_logits(const TransformerClassifier& model, const EncodedSet& data,
                                   std::size_t batch_size = 256);

// Row-major [N, K] class probabilities in evaluation mode.
std::vector<double> predict_probs(const TransformerClassifier& model, const EncodedSet& data,
                                  std::size_t batch_size = 256);

// Argmax per row; ties go to the lower class index.
std::vector<int> argmax_rows(std::span<const double> probs, std::size_t num_classes);

}  // namespace rmc
