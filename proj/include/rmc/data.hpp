#pragma once

// Synthetic sentence-pair task with an injected shortcut marker.
//
// Token ids: 0 pad, 1 cls, 2 sep, 3.. marker for class 0, 1, 2, content tokens
// from kFirstContentToken up. A premise is a list of distinct content tokens.
//
// Two-class rule ("subsequence"): label 1 iff the hypothesis occurs as a
// contiguous run inside the premise. Negatives are built by substituting an
// unseen token, swapping two adjacent tokens, or skipping a premise position.
// Substitution is the default; order_negative_fraction of the negatives use a
// swap or skip and so share every token with the premise.
//
// Three-class rule ("overlap3"): 1 contiguous run, 0 some hypothesis token is
// absent from the premise, 2 every token present but not contiguous.
//
// The marker for class c is appended after the hypothesis. With probability
// rho it names the gold label, otherwise a different class. An example is hard
// when the marker disagrees with the label or is absent.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace rmc {

inline constexpr int kPadToken = 0;
inline constexpr int kClsToken = 1;
inline constexpr int kSepToken = 2;
inline constexpr int kFirstMarkerToken = 3;
inline constexpr int kMaxClasses = 3;
inline constexpr int kFirstContentToken = kFirstMarkerToken + kMaxClasses;

struct LabeledPairExample {
  std::vector<int> premise;
  std::vector<int> hypothesis;
  int label = 0;
  std::optional<int> marker;  // implied class of the shortcut marker
  bool hard = false;

  bool operator==(const LabeledPairExample&) const = default;
};

struct DatasetSpec {
  std::uint64_t seed = 7;
  std::size_t train_size = 20000;
  std::size_t dev_size = 4000;
  std::size_t adversarial_size = 4000;
  double rho = 0.9;
  double rho_adversarial = 0.0;
  std::size_t premise_min = 5;
  std::size_t premise_max = 5;
  std::size_t hypothesis_min = 2;
  std::size_t hypothesis_max = 3;
  std::size_t vocab_size = 16;
  std::string rule = "subsequence";
  // Share of two-class negatives that keep every premise token (swap or skip);
  // the rest substitute an unseen token.
  double order_negative_fraction = 0.05;

  std::size_t num_classes() const;
  // Longest encoded sequence this spec can produce.
  std::size_t max_sequence_length() const;
  void validate() const;
};

struct Dataset {
  std::vector<LabeledPairExample> train;
  std::vector<LabeledPairExample> dev;
  std::vector<LabeledPairExample> adversarial;
};

Dataset generate(const DatasetSpec& spec);

// One split with its own correlation; exposed for tests.
std::vector<LabeledPairExample> generate_split(const DatasetSpec& spec, std::size_t count, double rho,
                                               std::uint64_t seed);

// Gold label under the rule, computed from the token lists alone.
int semantic_label(const std::string& rule, std::span<const int> premise,
                   std::span<const int> hypothesis);

// [CLS] premise [SEP] hypothesis [marker]
std::vector<int> encode(const LabeledPairExample& example);

// Tab-separated lines: premise ids, hypothesis ids (comma-separated), label,
// marker class or "-", hard flag 0/1.
std::string format_example(const LabeledPairExample& example);
void write_split(const std::string& path, std::span<const LabeledPairExample> examples);
std::vector<LabeledPairExample> read_split(const std::string& path, std::size_t num_classes,
                                           std::size_t vocab_size);

struct Partition {
  std::vector<std::size_t> easy;
  std::vector<std::size_t> hard;
};

Partition partition_by_flag(std::span<const LabeledPairExample> examples);

// Stateless 64-bit mixer used to derive independent seeds.
std::uint64_t splitmix64(std::uint64_t x);

}  // namespace rmc
