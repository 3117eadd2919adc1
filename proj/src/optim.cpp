#include "rmc/optim.hpp"

#include <cmath>

#include "rmc/error.hpp"

namespace rmc {

void OptimizerState::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight decay must be nonnegative");
  if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0))
    throw ConfigError("Adam betas must lie in (0,1)");
  if (!(epsilon > 0.0)) throw ConfigError("Adam epsilon must be positive");
}

void adamw_step(std::span<Parameter> params, OptimizerState& state) {
  state.validate();
  if (state.first_moment.empty()) {
    state.first_moment.resize(params.size());
    state.second_moment.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.first_moment[i].assign(params[i].value.numel(), 0.0);
      state.second_moment[i].assign(params[i].value.numel(), 0.0);
    }
  }
  if (state.first_moment.size() != params.size())
    throw ContractError("optimizer state was built for " +
                        std::to_string(state.first_moment.size()) + " parameters, got " +
                        std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!p.value.requires_grad()) continue;
    if (!p.value.has_grad())
      throw ContractError("parameter '" + p.name + "' has no gradient");
    if (state.first_moment[i].size() != p.value.numel())
      throw ContractError("moment buffer shape mismatch for '" + p.name + "'");
  }

  state.step_count += 1;
  const double t = static_cast<double>(state.step_count);
  const double bc1 = 1.0 - std::pow(state.beta1, t);
  const double bc2 = 1.0 - std::pow(state.beta2, t);
  const double lr = state.learning_rate;

  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!p.value.requires_grad()) continue;
    auto w = p.value.data();
    const auto g = p.value.grad();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    const double decay = p.decay ? lr * state.weight_decay : 0.0;
    for (std::size_t j = 0; j < w.size(); ++j) {
      w[j] -= decay * w[j];
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      w[j] -= lr * mhat / (std::sqrt(vhat) + state.epsilon);
    }
    if (p.prunable()) {
      const auto mask = p.mask.data();
      for (std::size_t j = 0; j < w.size(); ++j) {
        if (mask[j] == 0.0) {
          w[j] = 0.0;
          m[j] = 0.0;
          v[j] = 0.0;
        }
      }
    }
  }
}

void zero_grad(std::span<Parameter> params) {
  for (auto& p : params)
    if (p.value.has_grad()) p.value.zero_grad();
}

}  // namespace rmc
