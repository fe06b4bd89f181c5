#include "attn_distill/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>

#include <json.hpp>

#include "attn_distill/errors.hpp"
#include "attn_distill/evaluator.hpp"
#include "attn_distill/tiler.hpp"

namespace attn_distill {

namespace fs = std::filesystem;

namespace {

struct AdamState {
  ClassifierParams m;
  ClassifierParams v;
  long step = 0;
};

template <typename T>
void adam_update(std::span<T> param, std::span<T> grad, std::span<T> m, std::span<T> v, double lr,
                 const TrainConfig& cfg, double bias1, double bias2) {
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    const double mi = cfg.adam_beta1 * m[i] + (1.0 - cfg.adam_beta1) * g;
    const double vi = cfg.adam_beta2 * v[i] + (1.0 - cfg.adam_beta2) * g * g;
    m[i] = static_cast<T>(mi);
    v[i] = static_cast<T>(vi);
    const double mhat = mi / bias1;
    const double vhat = vi / bias2;
    param[i] = static_cast<T>(param[i] - lr * mhat / (std::sqrt(vhat) + cfg.adam_eps));
  }
}

void adam_step(ClassifierParams& params, ClassifierParams& grads, AdamState& state, double lr,
               const TrainConfig& cfg) {
  ++state.step;
  const double bias1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(state.step));
  const double bias2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(state.step));

  std::vector<std::span<float>> pf, gf, mf, vf;
  std::vector<std::span<double>> pd, gd, md, vd;
  auto collect = [](ClassifierParams& p, std::vector<std::span<float>>& f, std::vector<std::span<double>>& d) {
    for_each_tensor(p, [&](const std::string&, std::span<float> t) { f.push_back(t); },
                    [&](const std::string&, std::span<double> t) { d.push_back(t); });
  };
  collect(params, pf, pd);
  collect(grads, gf, gd);
  collect(state.m, mf, md);
  collect(state.v, vf, vd);
  for (std::size_t i = 0; i < pf.size(); ++i) adam_update(pf[i], gf[i], mf[i], vf[i], lr, cfg, bias1, bias2);
  for (std::size_t i = 0; i < pd.size(); ++i) adam_update(pd[i], gd[i], md[i], vd[i], lr, cfg, bias1, bias2);
}

void scale_grads(ClassifierParams& grads, double factor) {
  for_each_tensor(
      grads, [&](const std::string&, std::span<float> t) { for (auto& x : t) x = static_cast<float>(x * factor); },
      [&](const std::string&, std::span<double> t) { for (auto& x : t) x *= factor; });
}

void zero_grads(ClassifierParams& grads) { scale_grads(grads, 0.0); }

struct EvalSummary {
  double loss = 0.0;
  double accuracy = 0.0;
};

EvalSummary evaluate_loss(const ClassifierParams& params, const std::vector<LabeledPatch>& data,
                          const std::vector<std::size_t>& indices) {
  if (indices.empty()) return {};
  const auto& cfg = params.config;
  Rng unused(0);
  double loss = 0.0;
  std::size_t correct = 0;
  for (std::size_t i : indices) {
    const auto out = classify(data[i].patch.image, params, cfg.drop_p, unused, false);
    loss += focal_loss(out.probability, data[i].target, cfg.focal_gamma, cfg.focal_alpha);
    correct += ((out.probability > 0.5) == (data[i].target == 1)) ? 1 : 0;
  }
  return {loss / indices.size(), static_cast<double>(correct) / indices.size()};
}

}  // namespace

void TrainConfig::validate() const {
  model.validate();
  if (epochs < 0) throw InvalidArgument("epochs must be non-negative");
  if (!(learning_rate > 0.0)) throw InvalidArgument("learning rate must be positive");
  if (warmup_epochs < 0) throw InvalidArgument("warm-up must be non-negative");
  if (batch_size <= 0) throw InvalidArgument("batch size must be positive");
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw InvalidArgument("validation fraction must be in [0,1)");
  if (checkpoint_every < 0) throw InvalidArgument("checkpoint interval must be non-negative");
}

double learning_rate_at(double epoch_position, double base, int warmup_epochs) {
  if (warmup_epochs <= 0) return base;
  return base * std::clamp(epoch_position / warmup_epochs, 0.0, 1.0);
}

std::string to_json_line(const EpochMetrics& m) {
  return nlohmann::ordered_json{{"epoch", m.epoch},
                                {"lr", m.lr},
                                {"train_loss", m.train_loss},
                                {"train_accuracy", m.train_accuracy},
                                {"val_loss", m.has_validation ? nlohmann::ordered_json(m.val_loss) : nullptr},
                                {"val_accuracy", m.has_validation ? nlohmann::ordered_json(m.val_accuracy) : nullptr},
                                {"train_eval_loss", m.train_eval_loss ? nlohmann::ordered_json(*m.train_eval_loss)
                                                                      : nullptr}}
      .dump();
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> stratified_split(const std::vector<int>& targets,
                                                                               double val_fraction, Rng& rng) {
  std::vector<std::size_t> train_idx;
  std::vector<std::size_t> val_idx;
  for (int cls : {0, 1}) {
    std::vector<std::size_t> group;
    for (std::size_t i = 0; i < targets.size(); ++i) {
      if (targets[i] == cls) group.push_back(i);
    }
    rng.shuffle(group);
    auto n_val = static_cast<std::size_t>(std::llround(group.size() * val_fraction));
    if (n_val >= group.size()) n_val = group.empty() ? 0 : group.size() - 1;
    val_idx.insert(val_idx.end(), group.begin(), group.begin() + static_cast<std::ptrdiff_t>(n_val));
    train_idx.insert(train_idx.end(), group.begin() + static_cast<std::ptrdiff_t>(n_val), group.end());
  }
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(val_idx.begin(), val_idx.end());
  return {train_idx, val_idx};
}

TrainResult train(const std::vector<LabeledPatch>& dataset, ClassName class_name, const TrainConfig& config,
                  const fs::path& out_dir, const std::function<void(const EpochMetrics&)>& on_epoch) {
  config.validate();
  if (dataset.empty()) throw InvalidArgument("training set is empty");
  for (const auto& item : dataset) {
    if (item.patch.image.height != config.model.input_height || item.patch.image.width != config.model.input_width) {
      throw ShapeError("patch " + item.patch.id.str() + " does not match the configured input size");
    }
  }

  TrainResult result;
  std::vector<int> targets;
  for (const auto& item : dataset) targets.push_back(item.target);
  const auto positives = std::count(targets.begin(), targets.end(), 1);
  if (positives == 0 || positives == static_cast<long>(targets.size())) {
    result.warnings.push_back("all training labels for " + std::string(to_string(class_name)) +
                              " are identical; training proceeds");
    std::cerr << "warning: " << result.warnings.back() << "\n";
  }

  const Rng root(config.seed);
  Rng split_rng = root.derive(1);
  auto [train_idx, val_idx] = stratified_split(targets, config.val_fraction, split_rng);
  Rng init_rng = root.derive(2);
  Rng drop_rng = root.derive(3);
  ClassifierParams params = ClassifierParams::init(config.model, init_rng);
  ClassifierParams grads = ClassifierParams::zeros_like(params);
  AdamState adam{ClassifierParams::zeros_like(params), ClassifierParams::zeros_like(params), 0};

  fs::create_directories(out_dir);
  std::ofstream log(out_dir / "metrics.jsonl", std::ios::binary | std::ios::trunc);
  if (!log) throw IoError("cannot write metrics log in " + out_dir.string());

  auto record = [&](const EpochMetrics& m) {
    result.log.push_back(m);
    log << to_json_line(m) << "\n";
    log.flush();
    if (on_epoch) on_epoch(m);
  };

  {
    const auto tr = evaluate_loss(params, dataset, train_idx);
    const auto va = evaluate_loss(params, dataset, val_idx);
    EpochMetrics m0{0, 0.0, tr.loss, tr.accuracy, va.loss, va.accuracy, !val_idx.empty(), tr.loss};
    record(m0);
  }

  const std::string class_label(to_string(class_name));
  double best_loss = std::numeric_limits<double>::infinity();
  result.best_checkpoint = out_dir / "best.ckpt";
  const std::size_t steps =
      (train_idx.size() + static_cast<std::size_t>(config.batch_size) - 1) / static_cast<std::size_t>(config.batch_size);

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    Rng order_rng = root.derive(100 + static_cast<std::uint64_t>(epoch));
    auto order = train_idx;
    order_rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    double lr = 0.0;
    for (std::size_t b = 0; b < steps; ++b) {
      const std::size_t begin = b * config.batch_size;
      const std::size_t end = std::min(order.size(), begin + config.batch_size);
      lr = learning_rate_at(epoch + static_cast<double>(b + 1) / steps, config.learning_rate, config.warmup_epochs);
      zero_grads(grads);
      for (std::size_t k = begin; k < end; ++k) {
        const auto& item = dataset[order[k]];
        const auto step = accumulate_gradients(item.patch.image, item.target, params, grads, drop_rng);
        if (!std::isfinite(step.loss)) {
          throw InvalidState("non-finite loss at epoch " + std::to_string(epoch + 1) + " on patch " +
                             item.patch.id.str());
        }
        loss_sum += step.loss;
        correct += ((step.probability > 0.5) == (item.target == 1)) ? 1 : 0;
      }
      scale_grads(grads, 1.0 / static_cast<double>(end - begin));
      adam_step(params, grads, adam, lr, config);
    }
    if (!params.all_finite()) {
      throw InvalidState("parameters became non-finite at epoch " + std::to_string(epoch + 1));
    }

    EpochMetrics m;
    m.epoch = epoch + 1;
    m.lr = lr;
    m.train_loss = loss_sum / train_idx.size();
    m.train_accuracy = static_cast<double>(correct) / train_idx.size();
    const auto va = evaluate_loss(params, dataset, val_idx);
    m.val_loss = va.loss;
    m.val_accuracy = va.accuracy;
    m.has_validation = !val_idx.empty();
    if (val_idx.empty() || config.eval_train_loss) m.train_eval_loss = evaluate_loss(params, dataset, train_idx).loss;
    if (!std::isfinite(m.val_loss)) throw InvalidState("non-finite validation loss at epoch " + std::to_string(m.epoch));
    record(m);

    const CheckpointMeta meta{class_label, m.epoch, m.val_loss};
    if (config.checkpoint_every > 0 && m.epoch % config.checkpoint_every == 0) {
      save_checkpoint(out_dir / ("epoch_" + std::to_string(m.epoch) + ".ckpt"), params, meta);
    }
    const double selection_loss = val_idx.empty() ? *m.train_eval_loss : m.val_loss;
    if (selection_loss < best_loss) {
      best_loss = selection_loss;
      result.best_epoch = m.epoch;
      save_checkpoint(result.best_checkpoint, params, meta);
    }
  }
  save_checkpoint(out_dir / "last.ckpt", params, {class_label, config.epochs, result.log.back().val_loss});
  if (config.epochs == 0) save_checkpoint(result.best_checkpoint, params, {class_label, 0, result.log.back().val_loss});
  result.params = std::move(params);
  return result;
}

ClassificationMetrics classification_metrics(const std::vector<double>& probabilities, const std::vector<int>& targets) {
  if (probabilities.empty()) throw InvalidArgument("classification metrics need at least one example");
  if (probabilities.size() != targets.size()) throw InvalidArgument("probability/target count mismatch");
  ClassificationMetrics m;
  for (std::size_t i = 0; i < probabilities.size(); ++i) {
    const bool pred = probabilities[i] > 0.5;
    const bool truth = targets[i] == 1;
    if (pred && truth) ++m.tp;
    else if (pred) ++m.fp;
    else if (truth) ++m.fn;
    else ++m.tn;
  }
  const ConfusionCounts counts{m.tp, m.fp, m.fn, m.tn};
  m.accuracy = static_cast<double>(m.tp + m.tn) / probabilities.size();
  m.precision = precision_of(counts);
  m.recall = recall_of(counts);
  return m;
}

ClassificationMetrics evaluate_classification(const ClassifierParams& params, const std::vector<LabeledPatch>& dataset) {
  if (dataset.empty()) throw InvalidArgument("evaluation set is empty");
  std::vector<double> probs;
  std::vector<int> targets;
  Rng unused(0);
  for (const auto& item : dataset) {
    probs.push_back(classify(item.patch.image, params, params.config.drop_p, unused, false).probability);
    targets.push_back(item.target);
  }
  return classification_metrics(probs, targets);
}

std::vector<LabeledPatch> load_training_set(const std::vector<LabelRecord>& labels, const fs::path& patches_dir,
                                            ClassName class_name, const std::vector<SheetId>& sheets) {
  std::map<PatchId, bool> lookup;
  for (const auto& l : effective_labels(labels)) {
    if (l.class_name == class_name) lookup[l.patch] = l.present;
  }
  std::vector<LabeledPatch> out;
  for (const auto& manifest : read_manifests(patches_dir)) {
    if (!sheets.empty() && std::find(sheets.begin(), sheets.end(), manifest.sheet) == sheets.end()) continue;
    for (const auto& entry : manifest.entries) {
      const auto it = lookup.find(entry.id);
      if (it == lookup.end()) continue;
      out.push_back({load_patch(patches_dir, entry), it->second ? 1 : 0});
    }
  }
  return out;
}

}  // namespace attn_distill
