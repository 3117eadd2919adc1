#pragma once

// Experiment configuration: one INI-style file with [data], [model], [train],
// [compress], [distill] and [output] sections. Every key is optional and falls
// back to the defaults of the corresponding struct.

#include <cstdint>
#include <string>
#include <vector>

#include "rmc/data.hpp"
#include "rmc/distill.hpp"
#include "rmc/model.hpp"
#include "rmc/train.hpp"

namespace rmc {

struct CompressConfig {
  // Student families built by compress/mitigate: magnitude, truncate, heads.
  std::vector<std::string> families{"magnitude", "truncate"};
  double sparsity = 0.4;                // magnitude family target
  std::size_t student_layers = 2;       // truncate family depth
  std::size_t heads_to_prune = 3;       // heads family
  std::size_t head_probe_size = 2000;   // training samples scored for head importance
  std::vector<double> snapshot_sparsities{0.2, 0.4, 0.6, 0.7, 0.85};
  std::vector<double> sweep_sparsities{0.2, 0.4, 0.6, 0.7, 0.85};

  void validate(const ModelConfig& model) const;
};

struct ExperimentConfig {
  DatasetSpec data;
  ModelConfig model;  // num_classes follows the data rule, seed follows the run seed
  TrainConfig train;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  CompressConfig compress;
  DistillConfig distill;
  std::string output_dir = "runs/default";

  void validate() const;
  // Model config for one seed.
  ModelConfig model_for(std::uint64_t seed) const;
  TrainConfig train_for(std::uint64_t seed) const;
};

ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::string& path);

// Every setting in a fixed order, one "section.key = value" per line.
std::string canonical_text(const ExperimentConfig& config);

// 16 hex digits of the 64-bit FNV-1a hash of the canonical text, with the
// output directory, the seed list and the strategy left out: those choose
// which artifact is produced, not how.
std::string config_hash(const ExperimentConfig& config);

std::uint64_t fnv1a64(std::string_view bytes);

}  // namespace rmc
