#pragma once

#include <cstddef>
#include <string>

#include "tpm/tensor.hpp"

namespace tpm {

struct OptimizerConfig {
  double learning_rate = 1e-3;
  double min_learning_rate = 1e-6;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double warmup_fraction = 0.1;

  void validate() const;
  friend bool operator==(const OptimizerConfig&, const OptimizerConfig&) = default;
};

/// Linear warmup over the first warmup_fraction of total_steps, then cosine decay to the
/// minimum rate. `step` is 0-based.
double scheduled_learning_rate(const OptimizerConfig& config, std::size_t step,
                               std::size_t total_steps);

/// AdamW with decoupled weight decay. Rank-1 tensors (biases, norm affines, mask token) are
/// not decayed. Moments live alongside the parameters they track.
class AdamW {
 public:
  AdamW() = default;
  AdamW(const NamedTensors<float>& params, OptimizerConfig config);

  /// Applies one update with learning rate `lr`. Gradient entries must match the parameters
  /// by name and shape; names listed in neither are left untouched.
  void step(NamedTensors<float>& params, const NamedTensors<float>& grads, double lr);

  std::size_t step_count() const { return steps_; }
  const OptimizerConfig& config() const { return config_; }
  const NamedTensors<float>& first_moment() const { return m_; }
  const NamedTensors<float>& second_moment() const { return v_; }

  /// Restores state saved alongside a checkpoint.
  void restore(NamedTensors<float> m, NamedTensors<float> v, std::size_t steps);

 private:
  OptimizerConfig config_;
  NamedTensors<float> m_;
  NamedTensors<float> v_;
  std::size_t steps_ = 0;
};

}  // namespace tpm
