#include "tpm/probe.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "tpm/error.hpp"
#include "tpm/random.hpp"

namespace tpm {

namespace {

void require_matrix(const Tensor<double>& x, std::size_t rows, const char* what) {
  if (x.rank() != 2) throw ShapeError(std::string(what) + " must be a [N, D] matrix");
  if (x.dim(0) != rows) {
    throw ShapeError(std::string(what) + ": " + std::to_string(x.dim(0)) + " rows but " +
                     std::to_string(rows) + " labels");
  }
}

}  // namespace

Standardization Standardization::fit(const Tensor<double>& features) {
  if (features.rank() != 2 || features.dim(0) == 0) {
    throw ShapeError("standardization needs a non-empty [N, D] matrix");
  }
  const std::size_t n = features.dim(0), d = features.dim(1);
  Standardization s;
  s.mean.assign(d, 0.0);
  s.scale.assign(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) s.mean[j] += features[i * d + j];
  }
  for (auto& m : s.mean) m /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      const double c = features[i * d + j] - s.mean[j];
      s.scale[j] += c * c;
    }
  }
  for (auto& v : s.scale) {
    v = std::sqrt(v / static_cast<double>(n));
    if (!(v > 1e-12)) v = 1.0;
  }
  return s;
}

Tensor<double> Standardization::apply(const Tensor<double>& features) const {
  if (features.rank() != 2 || features.dim(1) != mean.size()) {
    throw ShapeError("standardization dimension mismatch");
  }
  Tensor<double> out = features;
  const std::size_t d = mean.size();
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const std::size_t j = i % d;
    out[i] = (out[i] - mean[j]) / scale[j];
  }
  return out;
}

ProbeDataset ProbeDataset::build(const Tensor<double>& train, std::vector<int> train_labels,
                                 const Tensor<double>& val, std::vector<int> val_labels) {
  require_matrix(train, train_labels.size(), "train features");
  require_matrix(val, val_labels.size(), "val features");
  if (train.dim(1) != val.dim(1)) throw ShapeError("train and val feature widths differ");
  ProbeDataset p;
  p.stats = Standardization::fit(train);
  p.train_features = p.stats.apply(train);
  p.val_features = p.stats.apply(val);
  p.train_labels = std::move(train_labels);
  p.val_labels = std::move(val_labels);
  return p;
}

int SvmModel::predict(std::span<const double> x) const {
  const std::size_t d = dimension();
  if (x.size() != d) {
    throw ShapeError("svm expects " + std::to_string(d) + " features, got " +
                     std::to_string(x.size()));
  }
  std::size_t best = 0;
  double best_score = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < classes.size(); ++k) {
    double s = bias[k];
    const double* w = weights.data() + k * d;
    for (std::size_t j = 0; j < d; ++j) s += w[j] * x[j];
    if (s > best_score) {
      best_score = s;
      best = k;
    }
  }
  return classes[best];
}

SvmModel train_linear_svm(const Tensor<double>& features, std::span<const int> labels,
                          const SvmOptions& options) {
  require_matrix(features, labels.size(), "svm features");
  if (!(options.C > 0.0)) throw ParameterError("svm C must be positive");
  if (options.max_epochs == 0) throw ParameterError("svm needs at least one epoch");
  std::vector<int> classes(labels.begin(), labels.end());
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  if (classes.size() < 2) throw ParameterError("svm needs at least two classes");

  const std::size_t n = features.dim(0), d = features.dim(1);
  const double C = options.C;
  // Squared norms of the bias-augmented rows.
  std::vector<double> qdiag(n, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) qdiag[i] += features[i * d + j] * features[i * d + j];
  }

  SvmModel model;
  model.classes = classes;
  model.C = C;
  model.weights = Tensor<double>({classes.size(), d});
  model.bias.assign(classes.size(), 0.0);
  model.epochs.assign(classes.size(), 0);
  model.dual_objective.resize(classes.size());

  for (std::size_t k = 0; k < classes.size(); ++k) {
    Rng rng(derive_seed(options.seed, {0x5f3ULL, k}));
    std::vector<double> y(n), alpha(n, 0.0), w(d, 0.0);
    for (std::size_t i = 0; i < n; ++i) y[i] = labels[i] == classes[k] ? 1.0 : -1.0;
    double b = 0.0;
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);

    auto margin = [&](std::size_t i) {
      double s = b;
      const double* x = features.data() + i * d;
      for (std::size_t j = 0; j < d; ++j) s += w[j] * x[j];
      return y[i] * s;
    };

    for (std::size_t epoch = 0; epoch < options.max_epochs; ++epoch) {
      rng.shuffle(order);
      for (std::size_t i : order) {
        const double grad = margin(i) - 1.0;
        double pg = grad;
        if (alpha[i] <= 0.0) pg = std::min(grad, 0.0);
        else if (alpha[i] >= C) pg = std::max(grad, 0.0);
        if (std::abs(pg) <= 1e-12) continue;
        const double next = std::clamp(alpha[i] - grad / qdiag[i], 0.0, C);
        const double delta = (next - alpha[i]) * y[i];
        alpha[i] = next;
        const double* x = features.data() + i * d;
        for (std::size_t j = 0; j < d; ++j) w[j] += delta * x[j];
        b += delta;
      }
      double wnorm = b * b, asum = 0.0, hinge = 0.0;
      for (double v : w) wnorm += v * v;
      for (std::size_t i = 0; i < n; ++i) {
        asum += alpha[i];
        hinge += std::max(0.0, 1.0 - margin(i));
      }
      const double primal = 0.5 * wnorm + C * hinge;
      const double dual = asum - 0.5 * wnorm;
      model.dual_objective[k].push_back(0.5 * wnorm - asum);
      model.epochs[k] = epoch + 1;
      if (primal - dual <= options.tolerance * std::max(1.0, std::abs(primal))) break;
    }
    std::copy(w.begin(), w.end(), model.weights.data() + k * d);
    model.bias[k] = b;
  }
  return model;
}

SvmModel train_linear_svm(const ProbeDataset& data, const SvmOptions& options) {
  return train_linear_svm(data.train_features, data.train_labels, options);
}

double evaluate_svm(const SvmModel& model, const Tensor<double>& features,
                    std::span<const int> labels) {
  require_matrix(features, labels.size(), "svm features");
  const std::size_t d = features.dim(1);
  if (d != model.dimension()) {
    throw ShapeError("svm expects " + std::to_string(model.dimension()) + " features, got " +
                     std::to_string(d));
  }
  if (labels.empty()) return 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const std::span<const double> row(features.data() + i * d, d);
    if (model.predict(row) == labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

SelectionResult select_weights(std::span<const ProbeRecord> table) {
  if (table.empty()) throw ParameterError("probe table is empty");
  std::size_t masks = 0;
  for (const auto& r : table) masks = std::max(masks, r.mask_index + 1);
  std::vector<bool> seen(masks, false);
  SelectionResult result;
  result.per_mask.resize(masks);
  for (std::size_t m = 0; m < masks; ++m) result.per_mask[m].mask_index = m;
  for (const auto& r : table) {
    MaskBest& best = result.per_mask[r.mask_index];
    const bool better = !seen[r.mask_index] || r.accuracy > best.accuracy ||
                        (r.accuracy == best.accuracy && r.epoch < best.epoch);
    if (better) best = {r.mask_index, r.epoch, r.accuracy};
    seen[r.mask_index] = true;
  }
  for (std::size_t m = 0; m < masks; ++m) {
    if (!seen[m]) throw ParameterError("probe table has no rows for mask " + std::to_string(m));
  }
  result.final = result.per_mask[0];
  return result;
}

}  // namespace tpm
