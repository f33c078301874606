// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "glip/inference.hpp"
#include "glip/metrics.hpp"
#include "glip/records.hpp"

namespace glip {

/// Class name of an annotated phrase: the phrase text with a leading article
/// ("a", "an", "the") removed. Returns -1 when it names no listed class.
int phrase_class(const std::string& phrase_text, const std::vector<std::string>& class_names);

/// Ground-truth boxes of every annotation whose phrase names a listed class.
std::vector<GroundTruthBox> detection_ground_truth(const Dataset& data,
                                                   const std::vector<std::string>& class_names);

struct EvalOptions {
  PromptConfig prompt;
  DecodeConfig decode;
};

/// Box AP, prompting with `class_names` (chunked when longer than the chunk
/// size). Ground truth is read against `label_names` when given (rewritten
/// prompts keep the original names as labels), else against `class_names`.
template <typename S>
EvalResult evaluate_detection(const GroundingModel<S>& model, const Dataset& data,
                              const std::vector<std::string>& class_names,
                              const EvalOptions& options = {},
                              const std::vector<std::string>& label_names = {}) {
  std::vector<ScoredBox> detections;
  for (const auto& r : data) {
    std::vector<Detection> dets;
    if (model.config().classifier_classes > 0) {
      dets = infer(model, r.image, build_detection_prompt(class_names, options.prompt), options.decode);
    } else {
      dets = infer_chunked(model, r.image, class_names, options.prompt, options.decode).detections;
    }
    for (const auto& d : dets) detections.push_back({r.image_id, d.phrase_index, d.box, d.score});
  }
  return compute_ap(detections, detection_ground_truth(data, label_names.empty() ? class_names : label_names));
}

/// Detection AP with a fixed prompt embedding standing in for the language
/// encoder output (prompt-tuned models).
template <typename S>
EvalResult evaluate_detection_with_embedding(const GroundingModel<S>& model, const Dataset& data,
                                             const std::vector<std::string>& class_names,
                                             const ad::Matrix<S>& prompt_embedding,
                                             const EvalOptions& options = {},
                                             const std::vector<std::string>& label_names = {}) {
  const TokenizedPrompt prompt = build_detection_prompt(class_names, options.prompt);
  std::vector<ScoredBox> detections;
  for (const auto& r : data)
    for (const auto& d : infer(model, r.image, prompt, options.decode, &prompt_embedding))
      detections.push_back({r.image_id, d.phrase_index, d.box, d.score});
  return compute_ap(detections, detection_ground_truth(data, label_names.empty() ? class_names : label_names));
}

/// Phrase-grounding Recall@{1,5,10}: each record is prompted with its own
/// caption and every annotated phrase is scored on its ranked boxes.
template <typename S>
std::vector<double> evaluate_grounding(const GroundingModel<S>& model, const Dataset& data,
                                       const EvalOptions& options = {}) {
  std::vector<PhrasePrediction> predictions;
  std::vector<std::vector<Box>> gold;
  DecodeConfig decode = options.decode;
  decode.score_threshold = 0;
  for (const auto& r : data) {
    std::vector<CharSpan> spans;
    for (const auto& a : r.annotations) spans.push_back(a.span);
    const TokenizedPrompt prompt = build_prompt(r.caption, spans, options.prompt);
    const auto dets = infer(model, r.image, prompt, decode);
    for (std::size_t p = 0; p < r.annotations.size(); ++p) {
      PhrasePrediction pred;
      for (const auto& d : dets)
        if (d.phrase_index == static_cast<int>(p)) pred.ranked_boxes.push_back(d.box);
      predictions.push_back(std::move(pred));
      gold.push_back(r.annotations[p].boxes);
    }
  }
  return compute_recall_at_k(predictions, gold);
}

}  // namespace glip
