#include "tpm/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "tpm/binary_io.hpp"
#include "tpm/checkpoint.hpp"
#include "tpm/error.hpp"
#include "tpm/random.hpp"

namespace tpm {

namespace {

using Json = nlohmann::ordered_json;
using Clock = std::chrono::steady_clock;

constexpr std::uint64_t kPatchStream = 0x9a7cULL;
constexpr std::uint64_t kShuffleStream = 0x5f1ULL;
constexpr std::uint64_t kMaskStream = 0x3a5ULL;
constexpr std::uint64_t kProbeStream = 0x9b0ULL;
constexpr std::uint64_t kHeadStream = 0x4ead0ULL;
constexpr std::uint64_t kFewShotStream = 0xf5ULL;

double elapsed(Clock::time_point since) {
  return std::chrono::duration<double>(Clock::now() - since).count();
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::string epoch_name(std::size_t epoch) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "epoch_%04zu.tpmc", epoch);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) { io::write_file(path.string(), text); }

std::vector<int> labels_of(const Dataset& d) {
  std::vector<int> out;
  out.reserve(d.size());
  for (const auto& c : d.clouds) {
    if (!c.label) throw ParameterError("probing and fine-tuning need labeled clouds");
    out.push_back(*c.label);
  }
  return out;
}

Tensor<double> to_double(const Tensor<float>& t) { return t.cast<double>(); }

Tensor<float> truncated_normal(Shape shape, double sigma, Rng& rng) {
  Tensor<float> t(std::move(shape));
  for (auto& v : t.values()) {
    double z;
    do z = rng.normal();
    while (std::abs(z) > 2.0);
    v = static_cast<float>(z * sigma);
  }
  return t;
}

}  // namespace

// ---- probing -----------------------------------------------------------------------------------

std::vector<PatchSet> patchify_split(const Dataset& split, const ModelConfig& cfg,
                                     std::uint64_t seed, std::uint64_t split_id) {
  if (split.points_per_cloud != cfg.n_points) {
    throw ParameterError("dataset has " + std::to_string(split.points_per_cloud) +
                         " points per cloud but the config expects " + std::to_string(cfg.n_points));
  }
  std::vector<PatchSet> out;
  out.reserve(split.size());
  for (std::size_t i = 0; i < split.size(); ++i) {
    out.push_back(patchify(split.clouds[i], cfg.patch_count, cfg.patch_size,
                           derive_seed(seed, {kPatchStream, split_id, i})));
  }
  return out;
}

ProbeData prepare_probe_data(const CorpusSplits& corpus, const ModelConfig& cfg,
                             std::uint64_t seed) {
  ProbeData d;
  d.train_patches = patchify_split(corpus.train, cfg, seed, 0);
  d.val_patches = patchify_split(corpus.val, cfg, seed, 1);
  d.train_labels = labels_of(corpus.train);
  d.val_labels = labels_of(corpus.val);
  for (std::size_t i = 0; i < d.train_patches.size(); ++i) {
    d.train_seeds.push_back(derive_seed(seed, {kProbeStream, 0, i}));
  }
  for (std::size_t i = 0; i < d.val_patches.size(); ++i) {
    d.val_seeds.push_back(derive_seed(seed, {kProbeStream, 1, i}));
  }
  return d;
}

double probe_accuracy(const ModelParams<float>& params, const ModelConfig& cfg,
                      const ProbeData& data, std::optional<double> mask_ratio, double svm_c,
                      std::uint64_t seed) {
  const auto train = to_double(global_features(data.train_patches, params, cfg, mask_ratio,
                                                data.train_seeds));
  const auto val =
      to_double(global_features(data.val_patches, params, cfg, mask_ratio, data.val_seeds));
  const auto probe = ProbeDataset::build(train, data.train_labels, val, data.val_labels);
  SvmOptions opts;
  opts.C = svm_c;
  opts.seed = seed;
  const auto svm = train_linear_svm(probe, opts);
  return evaluate_svm(svm, probe.val_features, probe.val_labels);
}

// ---- pre-training ------------------------------------------------------------------------------

std::vector<double> tpm_batch_gradients(const ModelParams<float>& params, const TrainConfig& config,
                                        std::span<const PatchSet* const> batch,
                                        std::span<const std::uint64_t> sample_ids,
                                        std::uint64_t mask_seed, NamedTensors<float>& grads) {
  if (batch.size() != sample_ids.size()) throw ShapeError("one sample id per batch entry");
  const auto weights = loss_weights(config.masks, config.lambda_mode);
  ad::Graph<float> g(params);
  ad::Inputs<float> inputs;
  std::vector<ad::Var> losses;
  for (std::size_t i = 0; i < config.masks.size(); ++i) {
    std::vector<MaskAssignment> assignments;
    assignments.reserve(batch.size());
    for (auto id : sample_ids) {
      assignments.push_back(
          sample_mask(config.model.patch_count, config.masks[i], derive_seed(mask_seed, {i, id})));
    }
    const auto data = make_branch_data<float>(batch, assignments);
    const std::string prefix = "m" + std::to_string(i);
    const auto vars = build_reconstruction(g, config.model, data, prefix, config.full_cloud);
    bind_branch_inputs(inputs, data, prefix, config.full_cloud);
    g.output(prefix, vars.loss);
    losses.push_back(vars.loss);
  }
  const auto total = tpm_total_loss(g, std::span<const ad::Var>(losses), weights);
  const auto out = g.forward(inputs);
  grads = g.backward(total);
  std::vector<double> values;
  for (std::size_t i = 0; i < losses.size(); ++i) {
    values.push_back(out.at("m" + std::to_string(i))[0]);
  }
  return values;
}

fs::path checkpoint_path(const fs::path& run_dir, std::size_t epoch) {
  return run_dir / "checkpoints" / epoch_name(epoch);
}

std::string metrics_csv(const std::vector<EpochMetrics>& rows) {
  std::string s = "epoch,loss_total";
  const std::size_t masks = rows.empty() ? 3 : rows.front().mask_losses.size();
  for (std::size_t i = 0; i < masks; ++i) s += ",loss_m" + std::to_string(i);
  s += ",lr,seconds\n";
  for (const auto& r : rows) {
    s += std::to_string(r.epoch) + "," + fmt(r.loss_total);
    for (double l : r.mask_losses) s += "," + fmt(l);
    s += "," + fmt(r.learning_rate) + "," + fmt(r.seconds) + "\n";
  }
  return s;
}

std::string probe_csv(const std::vector<ProbeRecord>& rows) {
  std::string s = "epoch,mask_index,svm_accuracy\n";
  for (const auto& r : rows) {
    s += std::to_string(r.epoch) + "," + std::to_string(r.mask_index) + "," + fmt(r.accuracy) + "\n";
  }
  return s;
}

std::vector<ProbeRecord> parse_probe_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "epoch,mask_index,svm_accuracy") {
    throw ParseError("probe_metrics.csv: unexpected header '" + line + "'");
  }
  std::vector<ProbeRecord> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    ProbeRecord r;
    char tail = 0;
    if (std::sscanf(line.c_str(), "%zu,%zu,%lf%c", &r.epoch, &r.mask_index, &r.accuracy, &tail) != 3) {
      throw ParseError("probe_metrics.csv line " + std::to_string(lineno) + ": '" + line + "'");
    }
    rows.push_back(r);
  }
  return rows;
}

std::string selection_json(const SelectionResult& selection) {
  Json j;
  j["selected_epoch"] = selection.final.epoch;
  j["selected_mask_index"] = selection.final.mask_index;
  j["selected_accuracy"] = selection.final.accuracy;
  Json per = Json::array();
  for (const auto& b : selection.per_mask) {
    per.push_back({{"mask_index", b.mask_index}, {"epoch", b.epoch}, {"accuracy", b.accuracy}});
  }
  j["per_mask_best"] = per;
  return j.dump(2) + "\n";
}

namespace {

Json manifest_json(const TrainConfig& config, const fs::path& data_dir, const CorpusSplits& corpus) {
  const auto weights = loss_weights(config.masks, config.lambda_mode);
  Json j;
  j["config"] = Json::parse(config_to_json(config));
  j["seed"] = config.seed;
  j["masks"] = config.masks.to_string();
  j["lambda_mode"] = to_string(config.lambda_mode);
  j["lambdas"] = weights.lambdas;
  j["epochs"] = config.epochs;
  j["optimizer"] = {{"name", "adamw"},
                    {"learning_rate", config.optimizer.learning_rate},
                    {"min_learning_rate", config.optimizer.min_learning_rate},
                    {"weight_decay", config.optimizer.weight_decay},
                    {"betas", {config.optimizer.beta1, config.optimizer.beta2}},
                    {"epsilon", config.optimizer.epsilon},
                    {"schedule", "cosine"},
                    {"warmup_fraction", config.optimizer.warmup_fraction},
                    {"decay_exempt", "rank-1 tensors"}};
  j["dataset"] = {{"dir", fs::absolute(data_dir).lexically_normal().string()},
                  {"fingerprint", dataset_fingerprint(data_dir)},
                  {"train_clouds", corpus.train.size()},
                  {"val_clouds", corpus.val.size()},
                  {"points_per_cloud", corpus.train.points_per_cloud}};
  j["mask_sampling"] = "independent partition per branch per sample per epoch";
  j["supervision"] = config.full_cloud ? "full cloud" : "masked patches, center-local";
  j["probe"] = {{"features", "max+mean pool of encoder tokens, visible patches at each mask ratio"},
                {"classifier", "one-vs-rest linear svm, dual coordinate descent"},
                {"C", config.svm_c},
                {"standardization", "train split statistics"}};
  j["artifacts"] = {{"checkpoints", "checkpoints/epoch_NNNN.tpmc"},
                    {"pretrain_metrics", "pretrain_metrics.csv"},
                    {"probe_metrics", "probe_metrics.csv"},
                    {"selection", "selection.json"}};
  return j;
}

}  // namespace

PretrainResult pretrain(const TrainConfig& config, const fs::path& data_dir, const fs::path& out_dir,
                        const PretrainOptions& options) {
  config.validate();
  const CorpusSplits corpus = read_corpus(data_dir);
  if (corpus.train.size() == 0) throw ParameterError("training split is empty");
  const ModelConfig& cfg = config.model;

  ProbeData probe;
  if (options.probe) {
    probe = prepare_probe_data(corpus, cfg, config.seed);
  } else {
    probe.train_patches = patchify_split(corpus.train, cfg, config.seed, 0);
  }
  const auto& patches = probe.train_patches;

  fs::create_directories(out_dir / "checkpoints");
  write_text(out_dir / "manifest.json", manifest_json(config, data_dir, corpus).dump(2) + "\n");

  ModelParams<float> params = init_params(cfg, config.seed);
  AdamW optimizer(params, config.optimizer);
  const auto weights = loss_weights(config.masks, config.lambda_mode);
  const std::size_t n = patches.size();
  const std::size_t B = std::min(config.batch_size, n);
  const std::size_t steps_per_epoch = (n + B - 1) / B;
  const std::size_t total_steps = steps_per_epoch * config.epochs;

  PretrainResult result;
  result.run_dir = out_dir;
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto started = Clock::now();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(config.seed, {kShuffleStream, epoch}));
    rng.shuffle(order);
    const std::uint64_t mask_seed = derive_seed(config.seed, {kMaskStream, epoch});

    std::vector<double> sums(config.masks.size(), 0.0);
    double lr = 0.0;
    for (std::size_t start = 0, batch_index = 0; start < n; start += B, ++batch_index) {
      const std::size_t count = std::min(B, n - start);
      std::vector<const PatchSet*> batch;
      std::vector<std::uint64_t> ids;
      for (std::size_t k = start; k < start + count; ++k) {
        batch.push_back(&patches[order[k]]);
        ids.push_back(order[k]);
      }
      NamedTensors<float> grads;
      std::vector<double> losses;
      try {
        losses = tpm_batch_gradients(params, config, batch, ids, mask_seed, grads);
      } catch (const NumericError& e) {
        throw NumericError("pre-training diverged at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(batch_index) + ": " + e.what());
      }
      for (std::size_t i = 0; i < losses.size(); ++i) sums[i] += losses[i] * double(count);
      lr = scheduled_learning_rate(config.optimizer, step++, total_steps);
      optimizer.step(params, grads, lr);
    }

    EpochMetrics m;
    m.epoch = epoch;
    for (double s : sums) m.mask_losses.push_back(s / double(n));
    m.loss_total = tpm_total_loss(m.mask_losses, weights);
    if (!std::isfinite(m.loss_total)) {
      throw NumericError("non-finite loss at epoch " + std::to_string(epoch));
    }
    m.learning_rate = lr;

    CheckpointRecord rec;
    rec.epoch = epoch;
    rec.manifest = "manifest.json";
    rec.masks = config.masks.to_string();
    rec.mask_losses = m.mask_losses;
    rec.loss_total = m.loss_total;
    rec.params = params;
    rec.optimizer = OptimizerState{optimizer.first_moment(), optimizer.second_moment(),
                                   optimizer.step_count()};
    save_checkpoint(checkpoint_path(out_dir, epoch), rec);
    m.seconds = elapsed(started);

    if (options.probe) {
      for (std::size_t i = 0; i < config.masks.size(); ++i) {
        const double acc = probe_accuracy(params, cfg, probe, config.masks[i], config.svm_c,
                                          config.seed);
        result.probe_table.push_back({epoch, i, acc});
      }
      write_text(out_dir / "probe_metrics.csv", probe_csv(result.probe_table));
    }
    result.metrics.push_back(m);
    write_text(out_dir / "pretrain_metrics.csv", metrics_csv(result.metrics));
    if (options.on_epoch) options.on_epoch(m);
  }

  if (options.probe) {
    result.selection = select_weights(result.probe_table);
    write_text(out_dir / "selection.json", selection_json(*result.selection));
  }
  return result;
}

// ---- run directory -----------------------------------------------------------------------------

RunInfo read_run(const fs::path& run_dir) {
  const fs::path manifest = run_dir / "manifest.json";
  if (!fs::exists(manifest)) throw ParameterError("no manifest.json in " + run_dir.string());
  Json j;
  try {
    j = Json::parse(io::read_file(manifest.string()));
    RunInfo info;
    info.run_dir = run_dir;
    info.config = config_from_json(j.at("config").dump());
    info.data_dir = j.at("dataset").at("dir").get<std::string>();
    info.epochs = j.at("epochs").get<std::size_t>();
    return info;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("manifest.json: " + std::string(e.what()));
  }
}

std::vector<ProbeRecord> probe_run(const fs::path& run_dir) {
  const RunInfo info = read_run(run_dir);
  const CorpusSplits corpus = read_corpus(info.data_dir);
  const ProbeData probe = prepare_probe_data(corpus, info.config.model, info.config.seed);
  std::vector<ProbeRecord> table;
  for (std::size_t epoch = 1; epoch <= info.epochs; ++epoch) {
    const fs::path path = checkpoint_path(run_dir, epoch);
    if (!fs::exists(path)) break;
    const auto rec = load_checkpoint(path);
    check_compatible(rec.params, info.config.model);
    for (std::size_t i = 0; i < info.config.masks.size(); ++i) {
      table.push_back({epoch, i,
                       probe_accuracy(rec.params, info.config.model, probe, info.config.masks[i],
                                      info.config.svm_c, info.config.seed)});
    }
  }
  if (table.empty()) throw ParameterError("run has no checkpoints to probe");
  write_text(run_dir / "probe_metrics.csv", probe_csv(table));
  return table;
}

SelectionResult select_run(const fs::path& run_dir) {
  const auto table = parse_probe_csv(io::read_file((run_dir / "probe_metrics.csv").string()));
  const auto selection = select_weights(table);
  write_text(run_dir / "selection.json", selection_json(selection));
  return selection;
}

// ---- fine-tuning -------------------------------------------------------------------------------

NamedTensors<float> init_head(const ModelConfig& cfg, std::size_t hidden, std::size_t classes,
                              std::uint64_t seed) {
  if (hidden == 0 || classes == 0) throw ParameterError("head widths must be positive");
  Rng rng(derive_seed(seed, {kHeadStream}));
  NamedTensors<float> head;
  head.add("head.fc1.weight", truncated_normal({2 * cfg.embed_dim, hidden}, 0.02, rng));
  head.add("head.fc1.bias", Tensor<float>({hidden}));
  head.add("head.fc2.weight", truncated_normal({hidden, classes}, 0.02, rng));
  head.add("head.fc2.bias", Tensor<float>({classes}));
  return head;
}

namespace {

ad::Var head_logits(ad::Graph<float>& g, ad::Var features) {
  return model::linear(g, g.gelu(model::linear(g, features, "head.fc1")), "head.fc2");
}

std::vector<std::size_t> class_indices(const std::vector<int>& labels, const std::vector<int>& classes) {
  std::vector<std::size_t> out;
  out.reserve(labels.size());
  for (int l : labels) {
    auto it = std::lower_bound(classes.begin(), classes.end(), l);
    if (it == classes.end() || *it != l) {
      throw ParameterError("label " + std::to_string(l) + " does not occur in the training split");
    }
    out.push_back(static_cast<std::size_t>(it - classes.begin()));
  }
  return out;
}

Tensor<float> rows_of(const Tensor<float>& m, std::span<const std::size_t> rows) {
  const std::size_t d = m.dim(1);
  Tensor<float> out({rows.size(), d});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy(m.data() + rows[i] * d, m.data() + (rows[i] + 1) * d, out.data() + i * d);
  }
  return out;
}

std::size_t argmax_row(const Tensor<float>& logits, std::size_t row) {
  const std::size_t k = logits.dim(1);
  std::size_t best = 0;
  for (std::size_t j = 1; j < k; ++j) {
    if (logits[row * k + j] > logits[row * k + best]) best = j;
  }
  return best;
}

/// Logits of the head for a [N, 2c] feature matrix.
Tensor<float> predict_logits(const NamedTensors<float>& store, const Tensor<float>& features) {
  ad::Graph<float> g(store);
  auto x = g.input("features", features.shape());
  g.output("logits", head_logits(g, x));
  ad::Inputs<float> in;
  in["features"] = features;
  return std::move(g.forward(in).at("logits"));
}

double accuracy_of(const Tensor<float>& logits, std::span<const std::size_t> targets) {
  if (targets.empty()) return 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) correct += argmax_row(logits, i) == targets[i];
  return double(correct) / double(targets.size());
}

/// Head-only training on fixed features. Returns per-epoch mean training loss.
std::vector<double> train_head(NamedTensors<float>& head, const Tensor<float>& features,
                               std::span<const std::size_t> targets, const HeadConfig& cfg,
                               std::uint64_t seed,
                               const std::function<void(std::size_t)>& after_epoch = {}) {
  OptimizerConfig oc;
  oc.learning_rate = cfg.learning_rate;
  oc.min_learning_rate = std::min(1e-6, cfg.learning_rate);
  oc.weight_decay = cfg.weight_decay;
  AdamW opt(head, oc);
  const std::size_t n = targets.size();
  const std::size_t B = std::min(cfg.batch_size, n);
  const std::size_t steps = (n + B - 1) / B;
  std::size_t step = 0;
  std::vector<double> losses;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(seed, {kShuffleStream, epoch}));
    rng.shuffle(order);
    double total = 0.0;
    for (std::size_t start = 0; start < n; start += B) {
      const std::size_t count = std::min(B, n - start);
      const std::span<const std::size_t> rows(order.data() + start, count);
      std::vector<std::size_t> y;
      for (auto r : rows) y.push_back(targets[r]);
      ad::Graph<float> g(head);
      auto x = g.input("features", {count, features.dim(1)});
      auto loss = g.cross_entropy(head_logits(g, x), y);
      g.output("loss", loss);
      ad::Inputs<float> in;
      in["features"] = rows_of(features, rows);
      total += g.forward(in).at("loss")[0] * double(count);
      const auto grads = g.backward(loss);
      opt.step(head, grads, scheduled_learning_rate(oc, step++, steps * cfg.epochs));
    }
    losses.push_back(total / double(n));
    if (after_epoch) after_epoch(epoch);
  }
  return losses;
}

}  // namespace

FinetuneResult finetune_classification(const ModelParams<float>& pretrained,
                                       const ModelConfig& cfg, const Dataset& train,
                                       const Dataset& val, const HeadConfig& head_cfg,
                                       bool freeze_encoder, std::uint64_t seed) {
  check_compatible(pretrained, cfg, /*encoder_only=*/true);
  const auto train_labels = labels_of(train);
  const auto val_labels = labels_of(val);
  std::vector<int> classes(train_labels);
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  if (classes.size() < 2) throw ParameterError("fine-tuning needs at least two classes");
  const auto y_train = class_indices(train_labels, classes);
  const auto y_val = class_indices(val_labels, classes);

  const auto train_patches = patchify_split(train, cfg, seed, 0);
  const auto val_patches = patchify_split(val, cfg, seed, 1);
  const std::vector<std::uint64_t> train_ids(train.size(), 0), val_ids(val.size(), 0);

  NamedTensors<float> store;
  for (const auto& e : pretrained.entries()) {
    if (is_encoder_param(e.name)) store.add(e.name, e.value);
  }
  const auto head = init_head(cfg, head_cfg.hidden, classes.size(), seed);
  for (const auto& e : head.entries()) store.add(e.name, e.value);

  FinetuneResult result;
  result.class_count = classes.size();

  if (freeze_encoder) {
    const auto f_train = global_features(train_patches, store, cfg, std::nullopt, train_ids);
    const auto f_val = global_features(val_patches, store, cfg, std::nullopt, val_ids);
    NamedTensors<float> h = head;
    result.trainable_parameters = h.scalar_count();
    result.train_loss = train_head(h, f_train, y_train, head_cfg, seed, [&](std::size_t) {
      result.val_accuracy.push_back(accuracy_of(predict_logits(h, f_val), y_val));
    });
  } else {
    result.trainable_parameters = store.scalar_count();
    OptimizerConfig oc;
    oc.learning_rate = head_cfg.learning_rate;
    oc.min_learning_rate = std::min(1e-6, head_cfg.learning_rate);
    oc.weight_decay = head_cfg.weight_decay;
    AdamW opt(store, oc);
    const std::size_t n = train_patches.size();
    const std::size_t B = std::min(head_cfg.batch_size, n);
    const std::size_t steps = (n + B - 1) / B;
    const std::size_t G = cfg.patch_count;
    const std::vector<std::size_t> all = [&] {
      std::vector<std::size_t> v(G);
      std::iota(v.begin(), v.end(), 0);
      return v;
    }();
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < head_cfg.epochs; ++epoch) {
      std::vector<std::size_t> order(n);
      std::iota(order.begin(), order.end(), 0);
      Rng rng(derive_seed(seed, {kShuffleStream, epoch}));
      rng.shuffle(order);
      double total = 0.0;
      for (std::size_t start = 0; start < n; start += B) {
        const std::size_t count = std::min(B, n - start);
        std::vector<const PatchSet*> batch;
        std::vector<MaskAssignment> none;
        std::vector<std::size_t> y;
        for (std::size_t k = start; k < start + count; ++k) {
          batch.push_back(&train_patches[order[k]]);
          none.push_back({{}, all, 0.0});
          y.push_back(y_train[order[k]]);
        }
        const auto data = make_branch_data<float>(batch, none);
        ad::Graph<float> g(store);
        auto pts = g.input("points", data.visible_points.shape());
        auto ctr = g.input("centers", data.visible_centers.shape());
        auto feat = model::pool_features(g, model::encode(g, cfg, pts, ctr, count, G));
        auto loss = g.cross_entropy(head_logits(g, feat), y);
        g.output("loss", loss);
        ad::Inputs<float> in;
        in["points"] = data.visible_points;
        in["centers"] = data.visible_centers;
        total += g.forward(in).at("loss")[0] * double(count);
        const auto grads = g.backward(loss);
        opt.step(store, grads, scheduled_learning_rate(oc, step++, steps * head_cfg.epochs));
      }
      result.train_loss.push_back(total / double(n));
      const auto f_val = global_features(val_patches, store, cfg, std::nullopt, val_ids);
      result.val_accuracy.push_back(accuracy_of(predict_logits(store, f_val), y_val));
    }
  }
  result.final_accuracy = result.val_accuracy.back();
  result.best_accuracy = *std::max_element(result.val_accuracy.begin(), result.val_accuracy.end());
  return result;
}

FinetuneResult finetune_run(const fs::path& run_dir, bool freeze_encoder) {
  const RunInfo info = read_run(run_dir);
  const SelectionResult selection = select_run(run_dir);
  const auto rec = load_checkpoint(checkpoint_path(run_dir, selection.final.epoch));
  const CorpusSplits corpus = read_corpus(info.data_dir);
  auto result = finetune_classification(rec.params, info.config.model, corpus.train, corpus.val,
                                        info.config.finetune, freeze_encoder, info.config.seed);
  std::string csv = "epoch,train_loss,val_accuracy\n";
  for (std::size_t i = 0; i < result.val_accuracy.size(); ++i) {
    csv += std::to_string(i + 1) + "," + fmt(result.train_loss[i]) + "," +
           fmt(result.val_accuracy[i]) + "\n";
  }
  write_text(run_dir / (freeze_encoder ? "finetune_frozen_metrics.csv" : "finetune_metrics.csv"), csv);
  return result;
}

// ---- few-shot ----------------------------------------------------------------------------------

std::string FewShotResult::table_row() const {
  char buf[96];
  std::snprintf(buf, sizeof buf, "%zu-way %zu-shot: %.1f ± %.1f", way, shot, 100.0 * mean,
                100.0 * stddev);
  return buf;
}

FewShotResult fewshot_eval(const ModelParams<float>& params, const ModelConfig& cfg,
                           const Dataset& pool, std::size_t way, std::size_t shot,
                           std::size_t query, std::size_t trials, const HeadConfig& head_cfg,
                           std::uint64_t seed) {
  if (way == 0 || shot == 0 || query == 0 || trials == 0) {
    throw ParameterError("way, shot, query and trials must be positive");
  }
  check_compatible(params, cfg, /*encoder_only=*/true);
  const auto labels = labels_of(pool);
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  std::vector<int> eligible;
  for (const auto& [label, idx] : by_class) {
    if (idx.size() >= shot + query) eligible.push_back(label);
  }
  if (eligible.size() < way) {
    throw ParameterError("few-shot pool has " + std::to_string(eligible.size()) +
                         " classes with at least " + std::to_string(shot + query) +
                         " samples; " + std::to_string(way) + " are required");
  }

  const auto patches = patchify_split(pool, cfg, seed, 2);
  const std::vector<std::uint64_t> ids(pool.size(), 0);
  const auto features = global_features(patches, params, cfg, std::nullopt, ids);

  FewShotResult result;
  result.way = way;
  result.shot = shot;
  result.query = query;
  for (std::size_t t = 0; t < trials; ++t) {
    Rng rng(derive_seed(seed, {kFewShotStream, t}));
    std::vector<int> chosen = eligible;
    rng.shuffle(chosen);
    chosen.resize(way);
    std::vector<std::size_t> support, support_y, queries, query_y;
    for (std::size_t c = 0; c < way; ++c) {
      auto idx = by_class.at(chosen[c]);
      rng.shuffle(idx);
      for (std::size_t k = 0; k < shot; ++k) {
        support.push_back(idx[k]);
        support_y.push_back(c);
      }
      for (std::size_t k = shot; k < shot + query; ++k) {
        queries.push_back(idx[k]);
        query_y.push_back(c);
      }
    }
    auto head = init_head(cfg, head_cfg.hidden, way, derive_seed(seed, {kHeadStream, t}));
    train_head(head, rows_of(features, support), support_y, head_cfg,
               derive_seed(seed, {kFewShotStream, t, 1}));
    result.trial_accuracy.push_back(
        accuracy_of(predict_logits(head, rows_of(features, queries)), query_y));
  }
  const double n = double(trials);
  result.mean = std::accumulate(result.trial_accuracy.begin(), result.trial_accuracy.end(), 0.0) / n;
  double var = 0.0;
  for (double a : result.trial_accuracy) var += (a - result.mean) * (a - result.mean);
  result.stddev = trials > 1 ? std::sqrt(var / (n - 1.0)) : 0.0;
  return result;
}

FewShotResult fewshot_run(const fs::path& run_dir, std::size_t way, std::size_t shot,
                          std::size_t query, std::size_t trials) {
  const RunInfo info = read_run(run_dir);
  const auto selection = select_run(run_dir);
  const auto rec = load_checkpoint(checkpoint_path(run_dir, selection.final.epoch));
  const CorpusSplits corpus = read_corpus(info.data_dir);
  auto result = fewshot_eval(rec.params, info.config.model, corpus.val, way, shot, query, trials,
                             info.config.fewshot, info.config.seed);
  Json j;
  j["way"] = way;
  j["shot"] = shot;
  j["query"] = query;
  j["trials"] = trials;
  j["epoch"] = selection.final.epoch;
  j["mean"] = result.mean;
  j["std"] = result.stddev;
  j["trial_accuracy"] = result.trial_accuracy;
  j["row"] = result.table_row();
  write_text(run_dir / ("fewshot_" + std::to_string(way) + "way_" + std::to_string(shot) + "shot.json"),
             j.dump(2) + "\n");
  return result;
}

// ---- ablation ----------------------------------------------------------------------------------

std::vector<std::pair<std::string, MaskBest>> selection_rules(const SelectionResult& selection) {
  std::vector<std::pair<std::string, MaskBest>> rules;
  MaskBest overall = selection.per_mask.at(0);
  for (const auto& b : selection.per_mask) {
    const std::string i = std::to_string(b.mask_index);
    rules.emplace_back("w" + i + "->m" + i, b);
    if (b.accuracy > overall.accuracy ||
        (b.accuracy == overall.accuracy && b.epoch < overall.epoch)) {
      overall = b;
    }
  }
  rules.emplace_back("w012->any", overall);
  return rules;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::string s = "construction,lambda_mode,selection_rule,final_svm_acc,finetune_acc,seconds\n";
  for (const auto& r : rows) {
    s += "\"" + r.construction + "\"," + to_string(r.lambda_mode) + "," + r.selection_rule + "," +
         fmt(r.final_svm_acc) + "," + fmt(r.finetune_acc) + "," + fmt(r.seconds) + "\n";
  }
  return s;
}

std::vector<AblationRow> ablate(const std::vector<MaskSpec>& constructions,
                                const std::vector<LambdaMode>& modes, const TrainConfig& base,
                                const fs::path& data_dir, const fs::path& out_dir, bool finetune) {
  if (constructions.empty() || modes.empty()) {
    throw ParameterError("ablation needs at least one construction and one lambda mode");
  }
  fs::create_directories(out_dir);
  const CorpusSplits corpus = finetune ? read_corpus(data_dir) : CorpusSplits{};
  std::vector<AblationRow> rows;
  std::size_t cell = 0;
  for (const auto& spec : constructions) {
    for (const auto mode : modes) {
      ++cell;
      TrainConfig config = base;
      config.masks = spec;
      config.model.base_mask = spec[0];
      config.lambda_mode = mode;
      const fs::path run = out_dir / ("cell_" + std::to_string(cell) + "_" + to_string(mode));
      const auto started = Clock::now();
      const auto result = pretrain(config, data_dir, run);
      const double pretrain_seconds = elapsed(started);

      std::map<std::size_t, double> finetuned;
      for (const auto& [rule, best] : selection_rules(*result.selection)) {
        const auto row_started = Clock::now();
        AblationRow row;
        row.construction = spec.to_string();
        row.lambda_mode = mode;
        row.selection_rule = rule;
        row.final_svm_acc = best.accuracy;
        if (finetune) {
          auto it = finetuned.find(best.epoch);
          if (it == finetuned.end()) {
            const auto rec = load_checkpoint(checkpoint_path(run, best.epoch));
            const auto ft = finetune_classification(rec.params, config.model, corpus.train,
                                                    corpus.val, config.finetune, false, config.seed);
            it = finetuned.emplace(best.epoch, ft.final_accuracy).first;
          }
          row.finetune_acc = it->second;
        } else {
          row.finetune_acc = std::nan("");
        }
        row.seconds = pretrain_seconds + elapsed(row_started);
        rows.push_back(row);
        write_text(out_dir / "ablation.csv", ablation_csv(rows));
      }
    }
  }
  return rows;
}

}  // namespace tpm
