#include "tpm/loss.hpp"

#include <limits>

#include "tpm/error.hpp"

namespace tpm {

std::string to_string(LambdaMode mode) {
  return mode == LambdaMode::Normalized ? "normalized" : "uniform";
}

LambdaMode parse_lambda_mode(std::string_view text) {
  if (text == "normalized") return LambdaMode::Normalized;
  if (text == "uniform") return LambdaMode::Uniform;
  throw ParseError("unknown lambda mode '" + std::string(text) + "' (normalized|uniform)");
}

LossWeights loss_weights(const MaskSpec& spec, LambdaMode mode) {
  if (spec.size() == 0) throw ParameterError("loss weights need at least one mask ratio");
  LossWeights w;
  w.mode = mode;
  if (mode == LambdaMode::Uniform) {
    w.lambdas.assign(spec.size(), 1.0);
    return w;
  }
  double total = 0.0;
  for (double m : spec.ratios()) total += m;
  for (double m : spec.ratios()) w.lambdas.push_back(m / total);
  return w;
}

namespace {

double directed(std::span<const Point3> from, std::span<const Point3> to) {
  double acc = 0.0;
  for (const auto& a : from) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& b : to) best = std::min(best, squared_distance(a, b));
    acc += best;
  }
  return acc / static_cast<double>(from.size());
}

}  // namespace

double chamfer(std::span<const Point3> a, std::span<const Point3> b) {
  if (a.empty() || b.empty()) throw ParameterError("chamfer distance of an empty point set");
  return directed(a, b) + directed(b, a);
}

template <typename T>
double reconstruction_loss(const Tensor<T>& pred, const Tensor<T>& truth) {
  if (pred.shape() != truth.shape() || pred.rank() != 3 || pred.dim(2) != 3) {
    throw ShapeError("reconstruction loss expects equal [P, S, 3] shapes, got " +
                     shape_string(pred.shape()) + " and " + shape_string(truth.shape()));
  }
  const std::size_t P = pred.dim(0);
  const std::size_t S = pred.dim(1);
  if (P == 0 || S == 0) throw ParameterError("reconstruction loss over an empty patch set");
  std::vector<Point3> a(S), b(S);
  double total = 0.0;
  for (std::size_t p = 0; p < P; ++p) {
    for (std::size_t s = 0; s < S; ++s) {
      const std::size_t o = (p * S + s) * 3;
      a[s] = {double(pred[o]), double(pred[o + 1]), double(pred[o + 2])};
      b[s] = {double(truth[o]), double(truth[o + 1]), double(truth[o + 2])};
    }
    total += chamfer(a, b);
  }
  return total / static_cast<double>(P);
}

template <typename T>
ad::Var reconstruction_loss(ad::Graph<T>& g, ad::Var pred, ad::Var truth) {
  if (g.shape(pred) != g.shape(truth)) {
    throw ShapeError("reconstruction loss shape mismatch: " + shape_string(g.shape(pred)) +
                     " vs " + shape_string(g.shape(truth)));
  }
  return g.mean(g.chamfer(pred, truth));
}

template <typename T>
ad::Var tpm_total_loss(ad::Graph<T>& g, std::span<const ad::Var> per_mask, const LossWeights& w) {
  if (per_mask.size() != w.lambdas.size()) {
    throw ParameterError("tpm loss: " + std::to_string(per_mask.size()) + " losses but " +
                         std::to_string(w.lambdas.size()) + " weights");
  }
  return g.weighted_sum(per_mask, w.lambdas);
}

double tpm_total_loss(std::span<const double> per_mask, const LossWeights& w) {
  if (per_mask.size() != w.lambdas.size()) {
    throw ParameterError("tpm loss: " + std::to_string(per_mask.size()) + " losses but " +
                         std::to_string(w.lambdas.size()) + " weights");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < per_mask.size(); ++i) total += w.lambdas[i] * per_mask[i];
  return total;
}

template double reconstruction_loss(const Tensor<float>&, const Tensor<float>&);
template double reconstruction_loss(const Tensor<double>&, const Tensor<double>&);
template ad::Var reconstruction_loss(ad::Graph<float>&, ad::Var, ad::Var);
template ad::Var reconstruction_loss(ad::Graph<double>&, ad::Var, ad::Var);
template ad::Var tpm_total_loss(ad::Graph<float>&, std::span<const ad::Var>, const LossWeights&);
template ad::Var tpm_total_loss(ad::Graph<double>&, std::span<const ad::Var>, const LossWeights&);

}  // namespace tpm
