#pragma once

// The command pipeline. Every command reads its inputs from, and writes its
// outputs to, the output directory of the config:
//
//   data/{train,dev,adversarial}.tsv, data/manifest.json
//   seed-N/teacher.ckpt, teacher_probs.tsv, teacher.json
//   seed-N/pruned/sparsity-S.ckpt        vanilla magnitude fine-tunes from the init
//   seed-N/difficulty_{train,dev}.tsv, compress.json
//   seed-N/students/FAMILY-STRATEGY.ckpt
//   reports/eval.{json,csv}, reports/sweep.csv
//
// Commands run over every configured seed. Reruns with the same config rewrite
// the same bytes; inputs built under a different config hash are refused.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>

#include "rmc/config.hpp"
#include "rmc/eval.hpp"

namespace rmc {

// Command-line overrides. None of them enters the config hash.
struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<Strategy> strategy;
};

ExperimentConfig apply_overrides(ExperimentConfig config, const Overrides& overrides);

class Pipeline {
 public:
  // log receives one progress line per finished step; may be null.
  Pipeline(ExperimentConfig config, std::ostream* log = nullptr);

  const ExperimentConfig& config() const { return config_; }
  const std::string& hash() const { return hash_; }
  std::filesystem::path root() const { return config_.output_dir; }
  std::filesystem::path seed_dir(std::uint64_t seed) const;

  void datagen();
  void train_teacher();
  // Vanilla snapshots for difficulty estimation, vanilla students of every
  // family, and the stage-1 difficulty files.
  void compress();
  // Students of every family trained with the configured strategy.
  void mitigate();
  EvalReport eval();
  void sweep();

  // Loaders that verify the artifact was built by this config.
  struct Data {
    Dataset raw;
    EncodedSet train, dev, adversarial;
    Partition dev_partition;
  };
  Data load_data() const;
  TransformerClassifier load_model(const std::filesystem::path& path) const;

 private:
  TransformerClassifier initial_model(std::uint64_t seed) const;
  TransformerClassifier initial_student(const std::string& family, std::uint64_t seed,
                                        const EncodedSet& train) const;
  std::optional<double> student_sparsity(const std::string& family) const;
  // Vanilla magnitude fine-tune at one sparsity, reused when already on disk.
  TransformerClassifier pruned(std::uint64_t seed, double sparsity, const EncodedSet& train) const;
  void save_model(const std::filesystem::path& path, const TransformerClassifier& model,
                  const std::string& role) const;
  void require_stamp(const std::filesystem::path& manifest) const;
  void note(const std::string& line) const;

  ExperimentConfig config_;
  std::string hash_;
  std::string data_hash_;
  std::ostream* log_;
};

std::string sparsity_tag(double sparsity);

}  // namespace rmc
