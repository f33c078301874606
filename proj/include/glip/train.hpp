// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "glip/loss.hpp"
#include "glip/model.hpp"
#include "glip/records.hpp"

#include "json.hpp"

namespace glip {

struct OptimizerConfig {
  std::string kind = "sgd";  // "sgd" (momentum) or "adamw"
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 1e-4;
};

struct TrainConfig {
  int steps = 300;
  int batch_size = 4;
  std::uint64_t seed = 0;
  double lr = 1e-4;
  /// Learning-rate multiplier of the language encoder group.
  double language_lr_ratio = 0.1;
  /// Step decay points as fractions of `steps`.
  std::vector<double> decay_fractions = {0.67, 0.89};
  double decay_factor = 0.1;
  int warmup_steps = 0;
  double grad_clip_norm = 10;  // global L2 norm cap; 0 disables clipping
  OptimizerConfig optimizer;
  MatchConfig match;
  FocalParams focal;
  PromptConfig prompt;
  bool downsample_categories = true;
  bool mix_negative_captions = true;
  NegativeCaptionOptions negatives;
  /// Detection vocabulary; empty means every class named by a detection record.
  std::vector<std::string> vocabulary;
  /// Use the whole vocabulary, in order, as the prompt of every detection record.
  bool fixed_prompt = false;
  /// Append one JSON line per step here; empty disables logging.
  std::string loss_log;

  /// Throws ConfigError naming every invalid field.
  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// Recipe of the shapes-world experiments: AdamW at 1e-3 (weight decay
/// 1e-4), no clipping, 1500 steps of batch 4.
TrainConfig shapes_world_recipe();

/// Piecewise-constant schedule with optional linear warmup, for the base group.
double learning_rate(const TrainConfig& config, int step);

/// Language encoder parameters form the reduced-rate group.
bool is_language_parameter(std::string_view name);

struct TrainExample {
  const Image* image = nullptr;
  TokenizedPrompt prompt;
  std::vector<Box> boxes;
  std::vector<int> phrase_ids;
  int phrase_count = 0;
};

/// Detection vocabulary of a dataset: class names of detection records in
/// first-seen order.
std::vector<std::string> collect_vocabulary(const Dataset& data);

/// Turns a record into one training example. Detection records get a
/// (possibly downsampled) class-name prompt; grounding records get their
/// caption, possibly mixed with negative captions drawn from `data`.
/// Classifier models (`classifier_classes` > 0) use vocabulary indices.
TrainExample make_example(const GroundedRecord& record, const Dataset& data,
                          const std::vector<int>& grounding_indices,
                          const std::vector<std::string>& vocabulary, const TrainConfig& config,
                          bool classifier, Rng& rng);

/// Classification plus localization loss of one example. Gradients of the
/// trainable parameters are added into `grads` when it is non-null. A
/// non-empty `prompt_parameter` names a parameter used as P^0.
template <typename S>
LossReport example_loss(const GroundingModel<S>& model, const ParameterSet<S>& params,
                        const TrainExample& ex, const TrainConfig& config,
                        const TrainablePredicate& trainable, ParameterSet<S>* grads,
                        const std::string& prompt_parameter = "") {
  ad::Tape<S> t;
  Binding<S> p(params, t, grads ? trainable : none_trainable());
  std::optional<ad::Var> pe;
  if (!prompt_parameter.empty()) pe = p(prompt_parameter);
  const auto g = model.forward(t, p, *ex.image, ex.prompt, pe);
  const auto anchors = model.anchors();
  const TargetMatrix tm = match_anchors(anchors, ex.boxes, ex.phrase_ids, ex.phrase_count, config.match);
  const bool classifier = model.config().classifier_classes > 0;
  const ExpandedTargets targets = classifier ? direct_targets(tm) : expand_targets(tm, ex.prompt);
  const LossMode mode = classifier ? LossMode::FocalSigmoid : model.config().loss_mode;
  const auto cls = grounding_loss<S>(t.value(g.logits), targets, mode, config.focal);
  const auto loc = localization_loss<S>(t.value(g.deltas), anchors, tm, ex.boxes);

  LossReport report;
  report.cls = static_cast<double>(cls.value);
  report.loc = static_cast<double>(loc.value);
  report.total = report.cls + report.loc;
  report.matched_anchor_count = tm.positive_count();
  if (grads) {
    const ad::Var root = ad::add(t, ad::external_loss(t, g.logits, cls.value, cls.grad),
                                 ad::external_loss(t, g.deltas, loc.value, loc.grad));
    t.backward(root);
    p.accumulate(*grads);
  }
  return report;
}

/// SGD with momentum or AdamW over a parameter set.
template <typename S>
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig config) : config_(std::move(config)) {
    if (config_.kind != "sgd" && config_.kind != "adamw")
      throw Error(ErrorCode::ConfigError, "unknown optimizer: " + config_.kind);
  }

  /// Weight decay on `name` pulls toward `anchor` instead of zero, which is
  /// decay on an offset from the starting value.
  void decay_toward(const std::string& name, const ad::Matrix<S>& anchor) { anchors_[name] = anchor; }

  /// `lr_of(name)` gives the learning rate of each parameter.
  void step(ParameterSet<S>& params, const ParameterSet<S>& grads,
            const std::function<double(const std::string&)>& lr_of) {
    ++t_;
    for (const auto& [name, g] : grads) {
      ad::Matrix<S>& w = params.at(name);
      const S lr = static_cast<S>(lr_of(name));
      const S wd = static_cast<S>(config_.weight_decay);
      const auto anchor = anchors_.find(name);
      auto& m = state(first_, name, g);
      if (config_.kind == "sgd") {
        m = static_cast<S>(config_.momentum) * m + g;
        if (anchor == anchors_.end()) m += wd * w;
        else m += wd * (w - anchor->second);
        w -= lr * m;
        continue;
      }
      auto& v = state(second_, name, g);
      const S b1 = static_cast<S>(config_.beta1);
      const S b2 = static_cast<S>(config_.beta2);
      m = b1 * m + (S(1) - b1) * g;
      v = b2 * v + (S(1) - b2) * g.cwiseProduct(g);
      const S c1 = S(1) - static_cast<S>(std::pow(config_.beta1, t_));
      const S c2 = S(1) - static_cast<S>(std::pow(config_.beta2, t_));
      const S eps = static_cast<S>(config_.epsilon);
      if (anchor == anchors_.end()) w *= S(1) - lr * wd;
      else w -= (lr * wd) * (w - anchor->second);
      w.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
    }
  }

 private:
  static ad::Matrix<S>& state(ParameterSet<S>& set, const std::string& name, const ad::Matrix<S>& like) {
    auto it = set.find(name);
    if (it == set.end()) it = set.emplace(name, ad::Matrix<S>::Zero(like.rows(), like.cols())).first;
    return it->second;
  }

  OptimizerConfig config_;
  ParameterSet<S> first_;
  ParameterSet<S> second_;
  ParameterSet<S> anchors_;
  int t_ = 0;
};

struct StepLog {
  int step = 0;
  double lr = 0;
  double total = 0;
  double cls = 0;
  double loc = 0;
};

struct TrainResult {
  std::vector<StepLog> steps;
};

/// Runs `config.steps` optimizer steps on `params` (by default the model's
/// own parameters). Records are visited in per-epoch shuffled order; every
/// random choice derives from `config.seed`, so a rerun is bit-identical.
template <typename S>
TrainResult train(const GroundingModel<S>& model, ParameterSet<S>& params, const Dataset& data,
                  const TrainConfig& config, const TrainablePredicate& trainable = all_trainable(),
                  const std::string& prompt_parameter = "") {
  config.validate();
  const ScopedFlushDenormals ftz;
  const bool classifier = model.config().classifier_classes > 0;
  std::vector<std::string> vocabulary = config.vocabulary.empty() ? collect_vocabulary(data) : config.vocabulary;
  if (classifier && static_cast<int>(vocabulary.size()) != model.config().classifier_classes)
    throw Error(ErrorCode::ConfigError, "classifier head size differs from the vocabulary");

  std::vector<int> eligible, grounding;
  for (int i = 0; i < static_cast<int>(data.size()); ++i) {
    const bool detection = data[i].kind == RecordKind::Detection;
    if (!detection) grounding.push_back(i);
    if (classifier && !detection) continue;
    eligible.push_back(i);
  }
  if (eligible.empty() && config.steps > 0)
    throw Error(ErrorCode::InsufficientData, "no trainable records in dataset");

  std::ofstream log;
  if (!config.loss_log.empty()) {
    log.open(config.loss_log, std::ios::app);
    if (!log) throw Error(ErrorCode::IoError, "cannot open loss log " + config.loss_log);
  }

  Optimizer<S> optimizer(config.optimizer);
  if (!prompt_parameter.empty()) optimizer.decay_toward(prompt_parameter, params.at(prompt_parameter));
  TrainResult result;
  std::vector<int> order;
  std::size_t cursor = 0;
  int epoch = 0;
  for (int step = 0; step < config.steps; ++step) {
    ParameterSet<S> grads;
    StepLog entry;
    entry.step = step;
    entry.lr = learning_rate(config, step);
    for (int b = 0; b < config.batch_size; ++b) {
      if (cursor == order.size()) {
        order = eligible;
        Rng shuffle_rng(derive_seed(config.seed, 0x5eed0000ULL + static_cast<std::uint64_t>(epoch++)));
        shuffle_rng.shuffle(order);
        cursor = 0;
      }
      const GroundedRecord& record = data[order[cursor++]];
      Rng rng(derive_seed(config.seed, static_cast<std::uint64_t>(step) * 1024 + static_cast<std::uint64_t>(b)));
      const TrainExample ex = make_example(record, data, grounding, vocabulary, config, classifier, rng);
      const LossReport r = example_loss(model, params, ex, config, trainable, &grads, prompt_parameter);
      entry.total += r.total / config.batch_size;
      entry.cls += r.cls / config.batch_size;
      entry.loc += r.loc / config.batch_size;
    }
    if (!std::isfinite(entry.total))
      throw Error(ErrorCode::DivergenceDetected, "non-finite loss at step " + std::to_string(step));
    const S inv = S(1) / static_cast<S>(config.batch_size);
    double norm2 = 0;
    for (auto& [name, g] : grads) {
      g *= inv;
      norm2 += static_cast<double>(g.squaredNorm());
    }
    if (!std::isfinite(norm2))
      throw Error(ErrorCode::DivergenceDetected, "non-finite gradient at step " + std::to_string(step));
    if (config.grad_clip_norm > 0 && std::sqrt(norm2) > config.grad_clip_norm) {
      const S scale = static_cast<S>(config.grad_clip_norm / std::sqrt(norm2));
      for (auto& [name, g] : grads) g *= scale;
    }
    optimizer.step(params, grads, [&](const std::string& name) {
      return is_language_parameter(name) ? entry.lr * config.language_lr_ratio : entry.lr;
    });
    if (log) {
      log << nlohmann::json{{"step", entry.step}, {"lr", entry.lr}, {"loss", entry.total},
                            {"cls", entry.cls}, {"loc", entry.loc}}
                 .dump()
          << "\n";
      log.flush();
    }
    result.steps.push_back(entry);
  }
  return result;
}

template <typename S>
TrainResult train(GroundingModel<S>& model, const Dataset& data, const TrainConfig& config,
                  const TrainablePredicate& trainable = all_trainable()) {
  return train(model, model.parameters(), data, config, trainable);
}

}  // namespace glip
