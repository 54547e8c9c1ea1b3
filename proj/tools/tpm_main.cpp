#include <cstdio>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "tpm/checkpoint.hpp"
#include "tpm/dataset.hpp"
#include "tpm/error.hpp"
#include "tpm/pipeline.hpp"

namespace {

std::vector<tpm::LambdaMode> parse_modes(const std::string& text) {
  std::vector<tpm::LambdaMode> modes;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto comma = text.find(',', start);
    const auto piece = text.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    if (!piece.empty()) modes.push_back(tpm::parse_lambda_mode(piece));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  if (modes.empty()) throw tpm::ParseError("no lambda modes given");
  return modes;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Triple point masking pre-training for point clouds"};
  app.require_subcommand(1);

  // gen-data
  std::string out;
  int classes = 8;
  std::size_t per_class = 100, points = 256;
  std::uint64_t seed = 1;
  auto* gen = app.add_subcommand("gen-data", "Write a synthetic train/val corpus");
  gen->add_option("--out", out, "Output directory")->required();
  gen->add_option("--classes", classes, "Shape classes (1-8)");
  gen->add_option("--per-class", per_class, "Training clouds per class");
  gen->add_option("--points", points, "Points per cloud");
  gen->add_option("--seed", seed, "Base seed");

  // pretrain
  std::string config_path, data_dir, run_dir;
  auto* pre = app.add_subcommand("pretrain", "Pre-train with triple masks, probe and select");
  pre->add_option("--config", config_path, "JSON config (defaults when omitted)");
  pre->add_option("--data", data_dir, "Corpus directory")->required();
  pre->add_option("--out", run_dir, "Run directory")->required();
  bool no_probe = false;
  pre->add_flag("--no-probe", no_probe, "Skip per-epoch SVM probing");

  auto* probe = app.add_subcommand("probe", "Re-probe every checkpoint of a run");
  probe->add_option("--run", run_dir, "Run directory")->required();

  auto* select = app.add_subcommand("select", "Write selection.json from probe_metrics.csv");
  select->add_option("--run", run_dir, "Run directory")->required();

  std::string task = "cls";
  bool freeze = false;
  auto* ft = app.add_subcommand("finetune", "Fine-tune a classifier from the selected weights");
  ft->add_option("--run", run_dir, "Run directory")->required();
  ft->add_option("--task", task, "Downstream task")->check(CLI::IsMember({"cls"}));
  ft->add_flag("--freeze-encoder", freeze, "Train the head only");

  std::size_t way = 5, shot = 10, query = 10, trials = 10;
  auto* fs = app.add_subcommand("fewshot", "Few-shot evaluation of the selected weights");
  fs->add_option("--run", run_dir, "Run directory")->required();
  fs->add_option("--way", way, "Classes per episode");
  fs->add_option("--shot", shot, "Support samples per class");
  fs->add_option("--query", query, "Query samples per class");
  fs->add_option("--trials", trials, "Independent episodes");

  std::string masks = "0.6,0.5,0.4;0.6,0.4", modes = "normalized,uniform";
  bool skip_finetune = false;
  auto* ab = app.add_subcommand("ablate", "Mask/loss/selection ablation grid");
  ab->add_option("--masks", masks, "Constructions, e.g. \"0.6,0.5,0.4;0.6,0.4\"");
  ab->add_option("--lambda-modes", modes, "normalized,uniform");
  ab->add_option("--config", config_path, "Base JSON config");
  ab->add_option("--data", data_dir, "Corpus directory")->required();
  ab->add_option("--out", run_dir, "Output directory")->required();
  ab->add_flag("--no-finetune", skip_finetune, "Leave finetune_acc empty");

  CLI11_PARSE(app, argc, argv);

  try {
    auto load = [&] {
      return config_path.empty() ? tpm::TrainConfig{} : tpm::load_config(config_path);
    };
    if (*gen) {
      const auto corpus = tpm::generate_corpus(classes, per_class, points, seed);
      tpm::write_corpus(out, corpus);
      std::printf("wrote %zu train / %zu val clouds to %s (fingerprint %s)\n", corpus.train.size(),
                  corpus.val.size(), out.c_str(), tpm::dataset_fingerprint(out).c_str());
    } else if (*pre) {
      tpm::PretrainOptions opts;
      opts.probe = !no_probe;
      opts.on_epoch = [](const tpm::EpochMetrics& m) {
        std::printf("epoch %3zu  loss %.6f  lr %.2e  %.1fs\n", m.epoch, m.loss_total,
                    m.learning_rate, m.seconds);
        std::fflush(stdout);
      };
      const auto result = tpm::pretrain(load(), data_dir, run_dir, opts);
      if (result.selection) {
        std::printf("selected epoch %zu (mask 0 svm accuracy %.4f)\n", result.selection->final.epoch,
                    result.selection->final.accuracy);
      }
    } else if (*probe) {
      for (const auto& r : tpm::probe_run(run_dir)) {
        std::printf("epoch %zu mask %zu accuracy %.4f\n", r.epoch, r.mask_index, r.accuracy);
      }
    } else if (*select) {
      const auto s = tpm::select_run(run_dir);
      for (const auto& b : s.per_mask) {
        std::printf("w%zu*: epoch %zu accuracy %.4f\n", b.mask_index, b.epoch, b.accuracy);
      }
      std::printf("selected: epoch %zu (mask %zu)\n", s.final.epoch, s.final.mask_index);
    } else if (*ft) {
      const auto r = tpm::finetune_run(run_dir, freeze);
      std::printf("trainable parameters %zu, classes %zu\n", r.trainable_parameters, r.class_count);
      std::printf("val accuracy: final %.4f best %.4f\n", r.final_accuracy, r.best_accuracy);
    } else if (*fs) {
      const auto r = tpm::fewshot_run(run_dir, way, shot, query, trials);
      std::printf("%s\n", r.table_row().c_str());
    } else if (*ab) {
      const auto rows = tpm::ablate(tpm::parse_mask_constructions(masks), parse_modes(modes), load(),
                                    data_dir, run_dir, !skip_finetune);
      std::fputs(tpm::ablation_csv(rows).c_str(), stdout);
    }
  } catch (const tpm::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
