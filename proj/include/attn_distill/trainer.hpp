#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "attn_distill/core.hpp"
#include "attn_distill/labels.hpp"
#include "attn_distill/model.hpp"

namespace attn_distill {

struct TrainConfig {
  ModelConfig model;
  int epochs = 100;
  double learning_rate = 5e-4;
  int warmup_epochs = 5;
  int batch_size = 16;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double val_fraction = 0.1;
  std::uint64_t seed = 0;
  /// Write `epoch_{e}.ckpt` every this many epochs; 0 disables them
  /// (`best.ckpt` and `last.ckpt` are always written).
  int checkpoint_every = 1;
  bool eval_train_loss = false;

  void validate() const;
};

/// Linear warm-up from 0 to `base` over `warmup_epochs`, constant after.
/// `epoch_position` is fractional: epoch e, batch b of n sits at e + (b+1)/n.
double learning_rate_at(double epoch_position, double base, int warmup_epochs);

struct LabeledPatch {
  PatchImage patch;
  int target = 0;  // 1 = class present
};

struct EpochMetrics {
  int epoch = 0;  // completed epochs; 0 is the evaluation before training
  double lr = 0.0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
  bool has_validation = true;  // false: val fields are meaningless (logged as null)
  /// Inference-mode loss on the training split, comparable with epoch 0.
  /// Computed when there is no validation split (it then drives checkpoint
  /// selection) or when TrainConfig::eval_train_loss is set.
  std::optional<double> train_eval_loss;
};

std::string to_json_line(const EpochMetrics& m);

struct TrainResult {
  ClassifierParams params;  // parameters after the last epoch
  std::vector<EpochMetrics> log;
  int best_epoch = 0;
  std::filesystem::path best_checkpoint;
  std::vector<std::string> warnings;
};

/// Adam on focal loss with token drop. Writes checkpoints and `metrics.jsonl`
/// into out_dir. Throws InvalidState when the loss becomes non-finite.
TrainResult train(const std::vector<LabeledPatch>& dataset, ClassName class_name, const TrainConfig& config,
                  const std::filesystem::path& out_dir,
                  const std::function<void(const EpochMetrics&)>& on_epoch = {});

/// Stratified split; returns (train indices, validation indices).
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> stratified_split(const std::vector<int>& targets,
                                                                               double val_fraction, Rng& rng);

struct ClassificationMetrics {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
};

/// Threshold 0.5 on the probabilities.
ClassificationMetrics classification_metrics(const std::vector<double>& probabilities,
                                             const std::vector<int>& targets);
/// Inference-mode image-level metrics of a trained classifier.
ClassificationMetrics evaluate_classification(const ClassifierParams& params,
                                              const std::vector<LabeledPatch>& dataset);

/// Joins effective labels with the tiles of every manifest in patches_dir.
/// Patches without a label for the class are skipped.
std::vector<LabeledPatch> load_training_set(const std::vector<LabelRecord>& labels,
                                            const std::filesystem::path& patches_dir, ClassName class_name,
                                            const std::vector<SheetId>& sheets = {});

}  // namespace attn_distill
