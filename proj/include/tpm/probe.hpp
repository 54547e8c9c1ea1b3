#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "tpm/tensor.hpp"

namespace tpm {

/// Per-dimension affine standardization fitted on one split. Constant dimensions keep a unit
/// scale so they map to zero instead of dividing by zero.
struct Standardization {
  std::vector<double> mean;
  std::vector<double> scale;

  static Standardization fit(const Tensor<double>& features);
  Tensor<double> apply(const Tensor<double>& features) const;
};

/// Standardized train/val features ([N, D]) and labels; statistics come from train only.
struct ProbeDataset {
  Tensor<double> train_features;
  std::vector<int> train_labels;
  Tensor<double> val_features;
  std::vector<int> val_labels;
  Standardization stats;

  static ProbeDataset build(const Tensor<double>& train, std::vector<int> train_labels,
                            const Tensor<double>& val, std::vector<int> val_labels);
};

struct SvmOptions {
  double C = 1.0;
  double tolerance = 1e-4;  // relative duality gap
  std::size_t max_epochs = 1000;
  std::uint64_t seed = 0;
};

/// One-vs-rest linear machines; weights are [K, D], scores are w_k . x + b_k.
struct SvmModel {
  std::vector<int> classes;  // ascending
  Tensor<double> weights;
  std::vector<double> bias;
  double C = 1.0;
  std::vector<std::size_t> epochs;                   // sweeps used, per class
  std::vector<std::vector<double>> dual_objective;   // per class, after each sweep (minimized form)

  std::size_t dimension() const { return weights.rank() == 2 ? weights.dim(1) : 0; }
  /// Highest-scoring class; ties go to the lowest class id.
  int predict(std::span<const double> x) const;
};

/// Dual coordinate descent on sum-of-hinge L2-regularized machines, bias through a constant
/// feature. Throws ParameterError for fewer than two classes or C <= 0.
SvmModel train_linear_svm(const Tensor<double>& features, std::span<const int> labels,
                          const SvmOptions& options = {});
SvmModel train_linear_svm(const ProbeDataset& data, const SvmOptions& options = {});

double evaluate_svm(const SvmModel& model, const Tensor<double>& features,
                    std::span<const int> labels);

struct ProbeRecord {
  std::size_t epoch = 0;  // 1-based
  std::size_t mask_index = 0;
  double accuracy = 0.0;
};

struct MaskBest {
  std::size_t mask_index = 0;
  std::size_t epoch = 0;
  double accuracy = 0.0;
};

struct SelectionResult {
  std::vector<MaskBest> per_mask;  // indexed by mask
  MaskBest final;                  // always the mask-0 entry
};

/// Per mask, the highest accuracy with the earliest epoch on ties. Throws ParameterError on an
/// empty table or a mask index with no rows.
SelectionResult select_weights(std::span<const ProbeRecord> table);

}  // namespace tpm
