#include "tpm/optimizer.hpp"

#include <cmath>
#include <numbers>

#include "tpm/error.hpp"

namespace tpm {

void OptimizerConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ParameterError("learning_rate must be positive");
  if (!(min_learning_rate >= 0.0 && min_learning_rate <= learning_rate)) {
    throw ParameterError("min_learning_rate must lie in [0, learning_rate]");
  }
  if (!(weight_decay >= 0.0)) throw ParameterError("weight_decay must be nonnegative");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ParameterError("adam betas must lie in [0, 1)");
  }
  if (!(epsilon > 0.0)) throw ParameterError("adam epsilon must be positive");
  if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) {
    throw ParameterError("warmup_fraction must lie in [0, 1)");
  }
}

double scheduled_learning_rate(const OptimizerConfig& c, std::size_t step, std::size_t total) {
  if (total == 0) throw ParameterError("schedule needs at least one step");
  const auto warmup = static_cast<std::size_t>(std::floor(c.warmup_fraction * double(total)));
  if (step < warmup) return c.learning_rate * double(step + 1) / double(warmup);
  const std::size_t span = total - warmup;
  const double t = span <= 1 ? 0.0 : double(std::min(step - warmup, span - 1)) / double(span - 1);
  return c.min_learning_rate +
         0.5 * (c.learning_rate - c.min_learning_rate) * (1.0 + std::cos(std::numbers::pi * t));
}

AdamW::AdamW(const NamedTensors<float>& params, OptimizerConfig config)
    : config_(config), m_(params.zeros_like()), v_(params.zeros_like()) {
  config_.validate();
}

void AdamW::restore(NamedTensors<float> m, NamedTensors<float> v, std::size_t steps) {
  if (m.size() != m_.size() || v.size() != v_.size()) {
    throw CompatibilityError("optimizer state does not match the parameter set");
  }
  for (std::size_t i = 0; i < m_.size(); ++i) {
    if (m[i].name != m_[i].name || m[i].value.shape() != m_[i].value.shape() ||
        v[i].name != v_[i].name || v[i].value.shape() != v_[i].value.shape()) {
      throw CompatibilityError("optimizer state entry '" + m[i].name + "' does not match");
    }
  }
  m_ = std::move(m);
  v_ = std::move(v);
  steps_ = steps;
}

void AdamW::step(NamedTensors<float>& params, const NamedTensors<float>& grads, double lr) {
  ++steps_;
  const double bc1 = 1.0 - std::pow(config_.beta1, double(steps_));
  const double bc2 = 1.0 - std::pow(config_.beta2, double(steps_));
  const float b1 = float(config_.beta1), b2 = float(config_.beta2);
  for (const auto& g : grads.entries()) {
    const std::size_t idx = params.index_of(g.name);
    auto& p = params[idx].value;
    if (p.shape() != g.value.shape()) {
      throw ShapeError("gradient for '" + g.name + "' has shape " + shape_string(g.value.shape()) +
                       ", parameter has " + shape_string(p.shape()));
    }
    auto& m = m_.at(g.name);
    auto& v = v_.at(g.name);
    const double decay = p.rank() >= 2 ? config_.weight_decay : 0.0;
    const float shrink = float(1.0 - lr * decay);
    const float step_size = float(lr / bc1);
    const float inv_bc2 = float(1.0 / bc2);
    const float eps = float(config_.epsilon);
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const float gi = g.value[i];
      m[i] = b1 * m[i] + (1.0f - b1) * gi;
      v[i] = b2 * v[i] + (1.0f - b2) * gi * gi;
      p[i] = p[i] * shrink - step_size * m[i] / (std::sqrt(v[i] * inv_bc2) + eps);
    }
  }
}

}  // namespace tpm
