#pragma once

// Small pre-LN transformer encoder for sentence-pair classification.
//
// Every parameter lives in one flat registry so the optimizer, the pruner and
// the checkpoint code can walk it without knowing the architecture. Encoder
// projection and feed-forward weights carry a binary prune mask; embeddings,
// biases, layer norms and the classifier never do.

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "rmc/optim.hpp"
#include "rmc/tensor.hpp"

namespace rmc {

struct ModelConfig {
  std::size_t vocab_size = 64;
  std::size_t max_seq_len = 32;
  std::size_t embed_dim = 64;
  std::size_t num_layers = 4;
  std::size_t num_heads = 4;
  std::size_t ffn_dim = 128;
  std::size_t num_classes = 2;
  std::uint64_t seed = 0;

  void validate() const;
  // Closed-form count of every trainable scalar.
  std::size_t parameter_count() const;
  // Count of prunable encoder weights.
  std::size_t maskable_count() const;

  std::map<std::string, std::string> to_fields() const;
  static ModelConfig from_fields(const std::map<std::string, std::string>& fields);

  bool operator==(const ModelConfig&) const = default;
};

// Token sequences padded to a common width. mask[b * width + t] is 1 for real
// tokens; real tokens must form a prefix of each row.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t width = 0;
  std::vector<int> ids;
  std::vector<std::uint8_t> mask;

  static TokenBatch from_sequences(std::span<const std::vector<int>> sequences);
};

// Head-mask values for one forward pass. Either empty (use the model's own
// xi) or one tensor per layer of shape [heads] or [batch, heads].
struct ForwardOptions {
  std::vector<Tensor> head_masks;
};

class TransformerClassifier {
 public:
  TransformerClassifier() = default;
  explicit TransformerClassifier(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }

  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  Parameter& parameter(const std::string& name);
  const Parameter& parameter(const std::string& name) const;

  // xi for every (layer, head), row-major [layers, heads].
  std::vector<double>& head_mask() { return head_mask_; }
  const std::vector<double>& head_mask() const { return head_mask_; }
  double xi(std::size_t layer, std::size_t head) const;
  void set_xi(std::size_t layer, std::size_t head, double value);

  Tensor forward(const TokenBatch& batch, const ForwardOptions& options = {}) const;

  // Deep copy with fresh tensors and no tape history.
  TransformerClassifier clone() const;

  // Sets requires_grad on the token and position tables.
  void set_embeddings_trainable(bool on);

 private:
  void build_registry();

  ModelConfig config_;
  std::vector<Parameter> params_;
  std::map<std::string, std::size_t> index_;
  std::vector<double> head_mask_;
};

// Seeded initialization: U(+-1/sqrt(fan_in)) for projections, U(+-sqrt(3/d))
// for embeddings, zero biases, unit layer-norm gains, all masks and xi at 1.
TransformerClassifier init_model(const ModelConfig& config);

// First keep_layers encoder layers plus copies of the embeddings, final norm
// and classifier.
TransformerClassifier truncate_student(const TransformerClassifier& model, std::size_t keep_layers);

// Fraction of maskable encoder weights whose mask is 0.
double sparsity(const TransformerClassifier& model);

// Binary checkpoint. metadata is stored next to the model config in the
// key/value header block.
void save_checkpoint(const std::string& path, const TransformerClassifier& model,
                     const std::map<std::string, std::string>& metadata = {});
TransformerClassifier load_checkpoint(const std::string& path,
                                      std::map<std::string, std::string>* metadata = nullptr);

}  // namespace rmc
