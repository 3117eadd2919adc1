#pragma once

// Task-specific compression: iterative global magnitude pruning during
// fine-tuning, and one-shot attention-head pruning from xi sensitivities.

#include <cstddef>
#include <span>
#include <vector>

#include "rmc/model.hpp"
#include "rmc/train.hpp"

namespace rmc {

// Cubic sparsity ramp applied at `events` evenly spaced pruning steps. The
// ramp starts after warmup_steps and reaches the target once pruning_steps
// more steps have run; the mask is frozen from then on.
struct PruneSchedule {
  double target_sparsity = 0.0;
  std::size_t warmup_steps = 0;
  std::size_t pruning_steps = 0;
  std::size_t total_steps = 0;
  std::size_t events = 10;

  // Ramp over the middle third of training.
  static PruneSchedule middle_third(double target, std::size_t total_steps, std::size_t events = 10);

  void validate() const;
  // Step index at which pruning event j (1-based) runs.
  std::size_t event_step(std::size_t j) const;
  // Sparsity the masks must reach before the given step runs.
  double sparsity_at(std::size_t step) const;
};

// Masks the globally smallest-magnitude unmasked coordinates of every
// prunable parameter until round(sparsity * maskable) coordinates are masked.
// Ties are broken by position in registry order. Never unmasks. Returns the
// number of coordinates newly masked.
std::size_t apply_magnitude_mask(std::span<Parameter> params, double sparsity);

void magnitude_prune(TransformerClassifier& model, double sparsity);

struct PruneResult {
  TrainResult train;
  std::vector<double> epoch_sparsity;  // sparsity at the end of each epoch
};

// Fine-tunes with the schedule applied before each step. Embeddings are frozen
// for the duration of the run.
PruneResult magnitude_prune_finetune(TransformerClassifier& model, const EncodedSet& data,
                                     const TrainConfig& config, double target_sparsity,
                                     const BatchLoss& loss, const TrainHooks& hooks = {});

struct HeadImportance {
  std::size_t layers = 0;
  std::size_t heads = 0;
  std::vector<double> scores;  // [layers, heads], mean |dL/dxi|
  std::size_t samples = 0;

  double score(std::size_t layer, std::size_t head) const { return scores[layer * heads + head]; }
};

// Per-sample gradients of the cross-entropy with respect to every xi, with
// their absolute values averaged over the probe set. The model is not touched.
HeadImportance head_importance(const TransformerClassifier& model, const EncodedSet& probe,
                               std::size_t batch_size = 256);

// Sets xi = 0 on the num_to_prune lowest-scoring heads, ties going to the lower
// (layer, head). Returns the pruned heads as (layer, head) pairs in that order.
std::vector<std::pair<std::size_t, std::size_t>> structured_prune(TransformerClassifier& model,
                                                                  const HeadImportance& scores,
                                                                  std::size_t num_to_prune);

}  // namespace rmc
