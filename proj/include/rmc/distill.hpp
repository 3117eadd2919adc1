#pragma once

// Difficulty-aware distillation. Stage 1 scores every training sample by the
// variance of its loss across pruned snapshots; stage 2 trains the compressed
// student against teacher probabilities flattened per sample by that score.
// The baselines (plain fine-tuning, plain distillation, uniform smoothing,
// focal reweighting, JTT reweighting) share the same training entry point.

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rmc/model.hpp"
#include "rmc/train.hpp"

namespace rmc {

enum class Strategy { vanilla, distil, smooth, focal, jtt, rmc };

Strategy parse_strategy(const std::string& name);
std::string strategy_name(Strategy s);

struct DistillConfig {
  Strategy strategy = Strategy::vanilla;
  double lambda = 0.9;          // weight of the soft-target term
  double alpha = 0.5;           // floor of the difficulty degree
  double smooth_degree = 0.9;   // constant degree of the uniform-smoothing baseline
  double focal_gamma = 2.0;
  double jtt_upweight = 2.0;
  std::size_t jtt_epochs = 1;   // epochs of the identification model

  void validate() const;
};

// Row-major [rows, cols] per-sample losses, one column per snapshot.
struct LossMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  double at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
};

// Unreduced cross-entropy of every sample, computed in evaluation mode.
std::vector<double> per_sample_losses(const TransformerClassifier& model, const EncodedSet& data);

LossMatrix per_sample_loss_matrix(std::span<const TransformerClassifier> snapshots,
                                  const EncodedSet& data);

// Population variance of every row.
std::vector<double> variance_scores(const LossMatrix& losses);

// Affine map of the variances onto [alpha, 1]; all ones when they are equal.
std::vector<double> difficulty_degree(std::span<const double> variance, double alpha);

// Row-wise power transform p^d / sum(p^d). probs is row-major [N, K].
std::vector<double> smooth_teacher(std::span<const double> probs, std::size_t num_classes,
                                   std::span<const double> degree);

// (1 - lambda) * CE(labels) + lambda * KL(targets || softmax(logits)), with
// optional per-sample weights inside both batch means. targets is [B, K].
Tensor rmc_loss(const Tensor& logits, std::span<const int> labels, const Tensor& targets,
                double lambda, std::span<const double> weights = {});

// (1 - p)^gamma rescaled to mean 1 over the batch; p is the gold-class probability.
std::vector<double> focal_weights(std::span<const double> gold_probs, double gamma);

// lambda_up for misclassified samples, 1 otherwise, rescaled to mean 1.
std::vector<double> jtt_weights(std::span<const int> predictions, std::span<const int> labels,
                                double upweight);
std::vector<double> jtt_weights(const TransformerClassifier& identifier, const EncodedSet& data,
                                double upweight);

struct DifficultyEstimate {
  LossMatrix losses;
  std::vector<double> variance;
  std::vector<double> degree;
};

DifficultyEstimate estimate_difficulty(std::span<const TransformerClassifier> snapshots,
                                       const EncodedSet& data, double alpha);

// Per-sample side information a strategy may need. Teacher probabilities are
// row-major [N, K] over the training set.
struct DistillInputs {
  std::vector<double> teacher_probs;   // distil, smooth, rmc
  std::vector<double> degree;          // rmc
  std::vector<double> sample_weights;  // jtt
};

BatchLoss strategy_loss(const DistillConfig& config, const EncodedSet& data,
                        const DistillInputs& inputs, std::size_t num_classes);

struct StudentResult {
  TrainResult train;
  std::vector<double> epoch_sparsity;
};

// Trains the student in place with the strategy's objective. With a target
// sparsity the run is a magnitude-pruning fine-tune, otherwise plain training
// of whatever student was passed (for example a truncated one).
StudentResult train_student(TransformerClassifier& student, const EncodedSet& data,
                            const TrainConfig& train_config, const DistillConfig& config,
                            const DistillInputs& inputs, std::optional<double> target_sparsity);

// Line-delimited "index<TAB>variance<TAB>degree" records.
void write_difficulty(const std::string& path, std::span<const double> variance,
                      std::span<const double> degree);
void read_difficulty(const std::string& path, std::vector<double>& variance,
                     std::vector<double>& degree);

// One line of K tab-separated probabilities per sample.
void write_probs(const std::string& path, std::span<const double> probs, std::size_t num_classes);
std::vector<double> read_probs(const std::string& path, std::size_t num_classes);

}  // namespace rmc
