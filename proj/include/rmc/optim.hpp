#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rmc/tensor.hpp"

namespace rmc {

// A trainable tensor with an optional binary prune mask of the same shape.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor mask;  // undefined when the parameter is not prunable
  bool decay = true;

  bool prunable() const { return mask.defined(); }
};

// Decoupled-weight-decay Adam (AdamW).
struct OptimizerState {
  double learning_rate = 3e-4;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t step_count = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;

  void validate() const;
};

// Applies one update to every parameter that requires a gradient. Coordinates
// whose mask is 0 are forced to exactly 0 along with their moments.
void adamw_step(std::span<Parameter> params, OptimizerState& state);

void zero_grad(std::span<Parameter> params);

}  // namespace rmc
