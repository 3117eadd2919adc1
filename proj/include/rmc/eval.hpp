#pragma once

// Accuracy-derived diagnostics: accuracy gap between the in-distribution and
// adversarial splits, relative bias of a compressed model against its teacher,
// and easy/hard breakdowns. Everything here works on prediction vectors so it
// can be checked without a model.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rmc/data.hpp"
#include "rmc/model.hpp"
#include "rmc/train.hpp"

namespace rmc {

// Fraction of predictions equal to the labels.
double accuracy(std::span<const int> predictions, std::span<const int> labels);
// Argmax accuracy of a model, ties toward the lower class.
double accuracy(const TransformerClassifier& model, const EncodedSet& split);

struct AdversarialSet {
  std::string name;
  double accuracy = 0.0;
  std::size_t size = 0;
};

// Sample-size-weighted mean accuracy.
double overall_adversarial(std::span<const AdversarialSet> sets);

struct Accuracies {
  double dev = 0.0;
  double adversarial = 0.0;
};

// (dev - adversarial) / dev.
double accuracy_gap(const Accuracies& a);

// Gap of the compressed model over the gap of the teacher.
double relative_bias(const Accuracies& teacher, const Accuracies& compressed);

struct EasyHard {
  double easy = 0.0;
  double hard = 0.0;
  double gap = 0.0;  // easy - hard
};

EasyHard easy_hard_report(std::span<const int> predictions, std::span<const int> labels,
                          const Partition& partition);

// The easy_count lowest-variance samples are predicted easy; ties go to the
// lower index.
Partition variance_partition(std::span<const double> variance, std::size_t easy_count);

// Fraction of samples assigned to the same side by both partitions.
double difficulty_agreement(const Partition& predicted, const Partition& truth);

// One evaluated model on one seed.
struct ModelEval {
  std::string model;
  std::uint64_t seed = 0;
  double sparsity = 0.0;
  double dev_accuracy = 0.0;
  std::vector<AdversarialSet> adversarial;
  double adversarial_accuracy = 0.0;
  double gap = 0.0;
  std::optional<double> relative_bias;
  EasyHard easy_hard;
};

ModelEval evaluate_model(const std::string& name, std::uint64_t seed,
                         const TransformerClassifier& model, const EncodedSet& dev,
                         const Partition& dev_partition, const EncodedSet& adversarial);

// Fills relative_bias of every row from the teacher row with the same seed;
// rows stay empty when that teacher has a zero accuracy gap.
void attach_relative_bias(std::vector<ModelEval>& rows, const std::string& teacher_name);

inline constexpr int kReportSchemaVersion = 1;

struct SeedAgreement {
  std::uint64_t seed = 0;
  double agreement = 0.0;
};

struct EvalReport {
  std::string config_hash;
  std::vector<ModelEval> rows;
  // Variance-partition agreement with the construction flags, per seed.
  std::vector<SeedAgreement> agreement;
};

// Mean of every metric over the rows sharing a model name, in first-seen order.
// relative_bias is averaged over the rows that have one.
std::vector<ModelEval> mean_over_seeds(std::span<const ModelEval> rows);

std::string report_json(const EvalReport& report);
// Header line plus one row per (model, seed) and one per model mean (seed "mean").
// The last column repeats the config hash.
std::string report_csv(const EvalReport& report);

}  // namespace rmc
