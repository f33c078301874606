// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "glip/checkpoint.hpp"
#include "glip/evaluation.hpp"
#include "glip/train.hpp"

namespace glip {

/// A downstream detection task. `prompt_names` are the phrases put in the
/// prompt (rewrites of `class_names`); results are reported under
/// `class_names`. Label i of every split refers to class_names[i].
struct TransferTask {
  std::string name;
  std::vector<std::string> class_names;
  std::vector<std::string> prompt_names;
  Dataset train;
  Dataset val;
  Dataset test;
  int shots = 0;  // 0 = all training data
};

TransferTask make_task(std::string name, std::vector<std::string> class_names, Dataset train,
                       Dataset val, Dataset test);

/// Replaces prompt phrases by the given descriptions. Classes not in the map
/// keep their current phrase. Throws UnknownClass for a key that is not a
/// class and InvalidArgument for an empty rewrite.
TransferTask manual_prompt_override(const TransferTask& task,
                                    const std::map<std::string, std::string>& rewrites);

/// Instances of each class in a dataset (boxes of annotations naming it).
std::vector<int> instances_per_class(const Dataset& data, const std::vector<std::string>& class_names);

/// Greedy random image selection until every class has at least `shots`
/// instances; images that add nothing new are skipped. Deterministic per seed.
/// Throws InsufficientData when the train split cannot satisfy the quota.
TransferTask sample_x_shot(const TransferTask& task, int shots, std::uint64_t seed);

/// Detection-style copies of `data` whose captions list the prompt phrase of
/// every class present; annotations not naming a task class are dropped.
Dataset detection_records(const Dataset& data, const std::vector<std::string>& class_names,
                          const std::vector<std::string>& prompt_names);

/// Recipe defaults per regime.
TrainConfig prompt_tune_defaults();   // lr 0.05, weight decay 0.25, batch 4
TrainConfig linear_probe_defaults();  // lr 1e-4, weight decay 0.05, batch 4
TrainConfig full_tune_defaults();     // lr 1e-5, weight decay 0.05, batch 4

struct RegimeResult {
  std::string regime;
  EvalResult eval;
  std::string frozen_hash_before;  // digest of the parameters that must not move
  std::string frozen_hash_after;
  TrainResult log;

  bool frozen_unchanged() const { return frozen_hash_before == frozen_hash_after; }
};

inline bool is_prompt_parameter(std::string_view name) { return name == "prompt.embedding"; }
inline bool is_probe_parameter(std::string_view name) {
  return name == "probe.proj" || name.starts_with("box.");
}

/// Task config: fixed prompt over the task phrases, no augmentation.
TrainConfig task_config(const TrainConfig& base, const TransferTask& task);

template <typename S>
RegimeResult zero_shot(const GroundingModel<S>& model, const TransferTask& task,
                       const EvalOptions& options = {}) {
  RegimeResult r;
  r.regime = "zero-shot";
  r.eval = evaluate_detection(model, task.test, task.prompt_names, options, task.class_names);
  r.frozen_hash_before = r.frozen_hash_after = parameter_hash(model.parameters());
  return r;
}

template <typename S>
struct PromptTuneResult {
  ad::Matrix<S> embedding;  // tuned P^0, one row per prompt token
  RegimeResult result;
};

/// Tunes P^0 only, without evaluating. P^0 starts as the language encoder
/// output on the task prompt and weight decay pulls it back there, not to
/// zero. Every model parameter stays frozen (checked by hash). Only the
/// train split of `task` is read.
template <typename S>
PromptTuneResult<S> tune_prompt_embedding(const GroundingModel<S>& model, const TransferTask& task,
                                          const TrainConfig& base = prompt_tune_defaults()) {
  if (model.config().classifier_classes > 0)
    throw Error(ErrorCode::InvalidArgument, "prompt tuning needs a grounding model");
  const TrainConfig config = task_config(base, task);
  const TokenizedPrompt prompt = build_detection_prompt(task.prompt_names, config.prompt);
  PromptTuneResult<S> out;
  out.result.regime = "prompt-tune";
  out.result.frozen_hash_before = parameter_hash(model.parameters());
  ParameterSet<S> params = model.parameters();
  params["prompt.embedding"] = model.encode_text(prompt);
  const auto frozen = [](std::string_view n) { return !is_prompt_parameter(n); };
  const std::string working_before = parameter_hash(params, frozen);
  out.result.log = train(model, params, detection_records(task.train, task.class_names, task.prompt_names),
                         config, is_prompt_parameter, "prompt.embedding");
  if (parameter_hash(params, frozen) != working_before)
    throw Error(ErrorCode::InvalidArgument, "prompt tuning moved a frozen parameter");
  out.embedding = params.at("prompt.embedding");
  out.result.frozen_hash_after = parameter_hash(model.parameters());
  return out;
}

template <typename S>
PromptTuneResult<S> prompt_tune(const GroundingModel<S>& model, const TransferTask& task,
                                const TrainConfig& base = prompt_tune_defaults(),
                                const EvalOptions& options = {}) {
  PromptTuneResult<S> out = tune_prompt_embedding(model, task, base);
  out.result.eval = evaluate_detection_with_embedding(model, task.test, task.prompt_names, out.embedding, options,
                                                      task.class_names);
  return out;
}

template <typename S>
struct TunedModelResult {
  GroundingModel<S> model;
  RegimeResult result;
};

/// Trains the box head and a d x d region projection (identity at start).
template <typename S>
TunedModelResult<S> linear_probe(const GroundingModel<S>& model, const TransferTask& task,
                                 const TrainConfig& base = linear_probe_defaults(),
                                 const EvalOptions& options = {}) {
  if (model.config().classifier_classes > 0)
    throw Error(ErrorCode::InvalidArgument, "linear probing needs a grounding model");
  const TrainConfig config = task_config(base, task);
  ModelConfig probed = model.config();
  probed.region_projection = true;
  ParameterSet<S> params = model.parameters();
  if (!params.count("probe.proj")) params.emplace("probe.proj", ad::Matrix<S>::Identity(probed.d, probed.d));
  const auto frozen = [](std::string_view n) { return !is_probe_parameter(n); };
  TunedModelResult<S> out{GroundingModel<S>(probed, std::move(params), model.seed()), {}};
  out.result.regime = "linear-probe";
  out.result.frozen_hash_before = parameter_hash(out.model.parameters(), frozen);
  out.result.log = train(out.model, out.model.parameters(),
                         detection_records(task.train, task.class_names, task.prompt_names), config,
                         is_probe_parameter);
  out.result.frozen_hash_after = parameter_hash(out.model.parameters(), frozen);
  out.result.eval = evaluate_detection(out.model, task.test, task.prompt_names, options, task.class_names);
  return out;
}

/// Every parameter trainable, pre-training recipe (language group at the
/// reduced rate).
template <typename S>
TunedModelResult<S> full_tune(const GroundingModel<S>& model, const TransferTask& task,
                              const TrainConfig& base = full_tune_defaults(),
                              const EvalOptions& options = {}) {
  const TrainConfig config = task_config(base, task);
  TunedModelResult<S> out{model, {}};
  out.result.regime = "full-tune";
  out.result.log = train(out.model, out.model.parameters(),
                         detection_records(task.train, task.class_names, task.prompt_names), config);
  out.result.frozen_hash_before = out.result.frozen_hash_after = "";
  out.result.eval = evaluate_detection(out.model, task.test, task.prompt_names, options, task.class_names);
  return out;
}

struct TransferRow {
  std::string task;
  std::string regime;
  int shots = 0;
  std::string seed;  // a number, or "mean" / "std" for summary rows
  double ap = 0;
  double ap50 = 0;
  std::vector<std::pair<std::string, double>> per_class_ap;
};

TransferRow make_row(const TransferTask& task, const RegimeResult& r, std::uint64_t seed);

/// Mean and sample standard deviation rows over per-seed rows of one regime.
std::vector<TransferRow> summary_rows(const std::vector<TransferRow>& rows);

/// Columns: task,regime,shots,seed,AP,AP50,per_class_AP. Per-class values
/// are "name=value" pairs joined by ';'. Values are percentages.
void write_results_csv(const std::string& path, const std::vector<TransferRow>& rows);

}  // namespace glip
