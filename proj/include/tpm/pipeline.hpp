#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "tpm/config.hpp"
#include "tpm/dataset.hpp"
#include "tpm/probe.hpp"

namespace tpm {

namespace fs = std::filesystem;

struct EpochMetrics {
  std::size_t epoch = 0;
  double loss_total = 0.0;
  std::vector<double> mask_losses;
  double learning_rate = 0.0;  // rate used by the last step of the epoch
  double seconds = 0.0;
};

/// Patch sets and labels of both corpus splits, fixed once per run so every epoch is probed on
/// identical inputs.
struct ProbeData {
  std::vector<PatchSet> train_patches;
  std::vector<int> train_labels;
  std::vector<std::uint64_t> train_seeds;
  std::vector<PatchSet> val_patches;
  std::vector<int> val_labels;
  std::vector<std::uint64_t> val_seeds;
};

/// Patchifies cloud i of a split with an FPS seed derived from (seed, split, i).
std::vector<PatchSet> patchify_split(const Dataset& split, const ModelConfig& cfg,
                                     std::uint64_t seed, std::uint64_t split_id);

ProbeData prepare_probe_data(const CorpusSplits& corpus, const ModelConfig& cfg,
                             std::uint64_t seed);

/// Global features for both splits (mask ratio optional), standardized on train, linear SVM
/// trained on train and scored on val.
double probe_accuracy(const ModelParams<float>& params, const ModelConfig& cfg,
                      const ProbeData& data, std::optional<double> mask_ratio, double svm_c,
                      std::uint64_t seed);

struct PretrainOptions {
  bool probe = true;
  /// Called after every epoch (after probing, when enabled).
  std::function<void(const EpochMetrics&)> on_epoch;
};

struct PretrainResult {
  fs::path run_dir;
  std::vector<EpochMetrics> metrics;
  std::vector<ProbeRecord> probe_table;
  std::optional<SelectionResult> selection;
};

/// Runs the shared-weight multi-mask pre-training and writes into `out_dir`:
/// manifest.json, checkpoints/epoch_NNNN.tpmc, pretrain_metrics.csv and, with probing,
/// probe_metrics.csv and selection.json.
PretrainResult pretrain(const TrainConfig& config, const fs::path& data_dir, const fs::path& out_dir,
                        const PretrainOptions& options = {});

/// One optimizer step's worth of work on a batch, exposed for tests: returns the per-mask
/// losses and fills `grads` with the gradient of the weighted total.
std::vector<double> tpm_batch_gradients(const ModelParams<float>& params, const TrainConfig& config,
                                        std::span<const PatchSet* const> batch,
                                        std::span<const std::uint64_t> sample_ids,
                                        std::uint64_t mask_seed, NamedTensors<float>& grads);

// ---- run directory helpers -------------------------------------------------------------------

struct RunInfo {
  fs::path run_dir;
  TrainConfig config;
  fs::path data_dir;
  std::size_t epochs = 0;
};

RunInfo read_run(const fs::path& run_dir);
fs::path checkpoint_path(const fs::path& run_dir, std::size_t epoch);

std::string metrics_csv(const std::vector<EpochMetrics>& rows);
std::string probe_csv(const std::vector<ProbeRecord>& rows);
std::vector<ProbeRecord> parse_probe_csv(const std::string& text);
std::string selection_json(const SelectionResult& selection);

/// Re-probes every checkpoint of a run under every mask and rewrites probe_metrics.csv.
std::vector<ProbeRecord> probe_run(const fs::path& run_dir);
/// Reads probe_metrics.csv and writes selection.json.
SelectionResult select_run(const fs::path& run_dir);

// ---- downstream --------------------------------------------------------------------------------

struct FinetuneResult {
  std::vector<double> val_accuracy;  // per epoch
  std::vector<double> train_loss;    // per epoch
  double final_accuracy = 0.0;
  double best_accuracy = 0.0;
  std::size_t trainable_parameters = 0;
  std::size_t class_count = 0;
};

/// Names and shapes of the classification head: [2c] -> hidden -> classes.
NamedTensors<float> init_head(const ModelConfig& cfg, std::size_t hidden, std::size_t classes,
                              std::uint64_t seed);

/// Encoder weights from `pretrained` (decoder discarded) plus a fresh two-layer head trained with
/// cross-entropy. Throws CompatibilityError if the encoder tensors do not match `cfg`.
FinetuneResult finetune_classification(const ModelParams<float>& pretrained,
                                       const ModelConfig& cfg, const Dataset& train,
                                       const Dataset& val, const HeadConfig& head,
                                       bool freeze_encoder, std::uint64_t seed);

/// Fine-tunes from the selected w0* checkpoint of a run; writes finetune_metrics.csv.
FinetuneResult finetune_run(const fs::path& run_dir, bool freeze_encoder);

struct FewShotResult {
  std::vector<double> trial_accuracy;
  double mean = 0.0;
  double stddev = 0.0;
  std::size_t way = 0, shot = 0, query = 0;

  /// "5-way 10-shot: 87.4 +/- 3.1" (percent)
  std::string table_row() const;
};

/// Per trial: draw `way` classes and disjoint support/query samples, train a head on frozen
/// support features, score the queries. Throws ParameterError when the pool is too small.
FewShotResult fewshot_eval(const ModelParams<float>& params, const ModelConfig& cfg,
                           const Dataset& pool, std::size_t way, std::size_t shot,
                           std::size_t query, std::size_t trials, const HeadConfig& head,
                           std::uint64_t seed);

FewShotResult fewshot_run(const fs::path& run_dir, std::size_t way, std::size_t shot,
                          std::size_t query, std::size_t trials);

// ---- ablation ----------------------------------------------------------------------------------

struct AblationRow {
  std::string construction;
  LambdaMode lambda_mode = LambdaMode::Normalized;
  std::string selection_rule;  // "w0->m0", ..., "w012->any"
  double final_svm_acc = 0.0;
  double finetune_acc = 0.0;
  double seconds = 0.0;
};

/// Selection rules for a table: wi->mi for every mask, then the best (mask, epoch) overall.
std::vector<std::pair<std::string, MaskBest>> selection_rules(const SelectionResult& selection);

/// Pre-trains, probes and selects for every (construction, lambda mode) cell, fine-tunes each
/// rule's checkpoint, and writes ablation.csv in `out_dir`.
std::vector<AblationRow> ablate(const std::vector<MaskSpec>& constructions,
                                const std::vector<LambdaMode>& modes, const TrainConfig& base,
                                const fs::path& data_dir, const fs::path& out_dir,
                                bool finetune = true);

std::string ablation_csv(const std::vector<AblationRow>& rows);

}  // namespace tpm
