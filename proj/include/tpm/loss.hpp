#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tpm/autodiff.hpp"
#include "tpm/geometry.hpp"
#include "tpm/masking.hpp"
#include "tpm/tensor.hpp"

namespace tpm {

enum class LambdaMode { Normalized, Uniform };

std::string to_string(LambdaMode mode);
/// "normalized" or "uniform"; anything else is a ParseError.
LambdaMode parse_lambda_mode(std::string_view text);

struct LossWeights {
  std::vector<double> lambdas;
  LambdaMode mode = LambdaMode::Normalized;
};

/// Normalized: lambda_i = m_i / sum_j m_j over the masks present. Uniform: every lambda is 1.
LossWeights loss_weights(const MaskSpec& spec, LambdaMode mode = LambdaMode::Normalized);

/// Squared-distance chamfer with per-set means. Throws ParameterError on an empty set.
double chamfer(std::span<const Point3> a, std::span<const Point3> b);

/// Mean chamfer over patches; pred and truth are [P, S, 3].
template <typename T>
double reconstruction_loss(const Tensor<T>& pred, const Tensor<T>& truth);

template <typename T>
ad::Var reconstruction_loss(ad::Graph<T>& g, ad::Var pred, ad::Var truth);

/// sum_i lambda_i * L_i as a single node.
template <typename T>
ad::Var tpm_total_loss(ad::Graph<T>& g, std::span<const ad::Var> per_mask, const LossWeights& w);

double tpm_total_loss(std::span<const double> per_mask, const LossWeights& w);

}  // namespace tpm
