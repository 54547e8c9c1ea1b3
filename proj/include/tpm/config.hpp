#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>

#include "tpm/loss.hpp"
#include "tpm/masking.hpp"
#include "tpm/model.hpp"
#include "tpm/optimizer.hpp"

namespace tpm {

/// Settings for supervised heads (fine-tuning and few-shot episodes).
struct HeadConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  std::size_t hidden = 128;
  double learning_rate = 5e-4;
  double weight_decay = 0.05;

  friend bool operator==(const HeadConfig&, const HeadConfig&) = default;
};

/// Everything a pre-training run depends on. Serialized as a flat JSON object; unknown keys are
/// rejected so typos fail loudly.
struct TrainConfig {
  ModelConfig model;
  OptimizerConfig optimizer;
  MaskSpec masks = derive_mask_triple(0.6);
  LambdaMode lambda_mode = LambdaMode::Normalized;
  bool full_cloud = false;
  std::size_t epochs = 50;
  std::size_t batch_size = 16;
  std::uint64_t seed = 1;
  double svm_c = 1.0;
  HeadConfig finetune;
  HeadConfig fewshot{.epochs = 100, .batch_size = 64, .hidden = 64, .learning_rate = 1e-3,
                     .weight_decay = 0.0};

  void validate() const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

std::string config_to_json(const TrainConfig& config);
/// Missing keys keep their defaults. When "masks" is absent the triple is derived from
/// "base_mask". Throws ParseError on malformed JSON, unknown keys or wrong value types.
TrainConfig config_from_json(const std::string& text);
TrainConfig load_config(const std::filesystem::path& path);

}  // namespace tpm
