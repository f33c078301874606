// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "glip/box.hpp"
#include "glip/model.hpp"
#include "glip/prompt.hpp"

#include "json.hpp"

namespace glip {

struct Detection {
  Box box;
  int phrase_index = 0;
  std::string phrase_text;
  CharSpan span;
  double score = 0;
  int anchor_index = 0;

  bool operator==(const Detection&) const = default;
};

struct DecodeConfig {
  double score_threshold = 0.05;
  double nms_iou = 0.6;
  int max_detections = 100;

  void validate() const;
};

/// N x c phrase probabilities from N x M alignment logits. Focal mode
/// averages token sigmoids over each phrase's span; CE mode sums the
/// per-anchor softmax over the span, clamped to [0, 1].
Eigen::MatrixXd phrase_scores(const Eigen::MatrixXd& logits, const TokenizedPrompt& prompt,
                              LossMode mode);

/// Sigmoid of classifier logits, one column per class.
Eigen::MatrixXd class_scores(const Eigen::MatrixXd& logits);

/// Greedy NMS. Candidates are visited by descending score, lower index first
/// on ties; a candidate is dropped when its IoU with a kept box exceeds
/// `iou_threshold`. Returns kept indices in visiting order.
std::vector<int> nms(const std::vector<Box>& boxes, const std::vector<double>& scores,
                     double iou_threshold);

/// Descending score, then phrase index, then anchor index.
void sort_detections(std::vector<Detection>& detections);

/// Per-phrase thresholding, box decoding and NMS, then a global cap of
/// max_detections by score.
std::vector<Detection> decode_detections(const Eigen::MatrixXd& phrase_scores,
                                         const Eigen::MatrixXd& deltas,
                                         const std::vector<Box>& anchors, double image_size,
                                         const DecodeConfig& config,
                                         const TokenizedPrompt* prompt = nullptr);

/// Per-class NMS and max_detections cap over an already decoded pool.
std::vector<Detection> merge_detections(std::vector<Detection> pool, const DecodeConfig& config);

nlohmann::json to_json(const Detection& d);
nlohmann::json to_json(const std::vector<Detection>& ds);

/// Detections for one (image, prompt) pair. `prompt_embedding`, when given,
/// replaces the language encoder output.
template <typename S>
std::vector<Detection> infer(const GroundingModel<S>& model, const Image& image,
                             const TokenizedPrompt& prompt, const DecodeConfig& decode = {},
                             const ad::Matrix<S>* prompt_embedding = nullptr) {
  const auto out = model.infer(image, prompt, prompt_embedding);
  const Eigen::MatrixXd logits = out.logits.template cast<double>();
  const Eigen::MatrixXd scores = model.config().classifier_classes > 0
                                     ? class_scores(logits)
                                     : phrase_scores(logits, prompt, model.config().loss_mode);
  return decode_detections(scores, out.deltas.template cast<double>(), model.anchors(),
                           model.config().image_size, decode, &prompt);
}

struct ChunkedResult {
  std::vector<Detection> detections;
  int forward_passes = 0;
};

/// One forward pass per chunk of `prompt_config.chunk_size` class names;
/// detections are pooled with phrase indices and spans mapped to the global
/// class list and its prompt text, then merged by one global per-class NMS
/// and max_detections cap.
template <typename S>
ChunkedResult infer_chunked(const GroundingModel<S>& model, const Image& image,
                            const std::vector<std::string>& class_names,
                            const PromptConfig& prompt_config, const DecodeConfig& decode = {}) {
  ChunkedResult result;
  std::vector<Detection> pool;
  int offset = 0;  // start of the chunk within the whole class-list text
  for (auto [begin, end] : chunk_ranges(static_cast<int>(class_names.size()), prompt_config.chunk_size)) {
    std::vector<std::string> names(class_names.begin() + begin, class_names.begin() + end);
    const TokenizedPrompt prompt = build_detection_prompt(names, prompt_config);
    for (Detection d : infer(model, image, prompt, decode)) {
      d.phrase_index += begin;
      d.span.begin += offset;
      d.span.end += offset;
      pool.push_back(std::move(d));
    }
    offset += static_cast<int>(prompt.text.size());
    ++result.forward_passes;
  }
  result.detections = merge_detections(std::move(pool), decode);
  return result;
}

struct DetectionModeReport {
  double max_abs_difference = 0;     // over tied token columns
  std::vector<int> mismatched_classes;
  bool detections_identical = false;
  std::vector<Detection> classifier_detections;
  std::vector<Detection> grounding_detections;
};

/// Builds a grounding view of a classifier-head model: every token of class
/// p gets the classifier row W_p as its feature, so S_ground columns must
/// reproduce S_cls = O W^T exactly. `tied_tokens` overrides the token
/// features (for perturbation experiments); pass nullptr for exact ties.
template <typename S>
DetectionModeReport detection_mode_check(const GroundingModel<S>& classifier_model,
                                         const Image& image,
                                         const std::vector<std::string>& class_names,
                                         const PromptConfig& prompt_config,
                                         const DecodeConfig& decode = {},
                                         const ad::Matrix<S>* tied_tokens = nullptr) {
  const ModelConfig& cfg = classifier_model.config();
  if (cfg.classifier_classes != static_cast<int>(class_names.size()))
    throw Error(ErrorCode::InvalidArgument, "detection_mode_check: class count differs from classifier");
  const TokenizedPrompt prompt = build_detection_prompt(class_names, prompt_config);
  const auto out = classifier_model.infer(image, prompt);
  const ad::Matrix<S>& w = classifier_model.parameters().at("classifier.w");
  ad::Matrix<S> tokens = ad::Matrix<S>::Zero(prompt.size(), cfg.d);
  for (int p = 0; p < prompt.phrase_count(); ++p)
    for (int tok : prompt.phrase_token_spans[p]) tokens.row(tok) = w.row(p);
  if (tied_tokens) tokens = *tied_tokens;
  const ad::Matrix<S> s_cls = align<S>(out.regions, w);
  const ad::Matrix<S> s_ground = align<S>(out.regions, tokens);

  DetectionModeReport report;
  for (int p = 0; p < prompt.phrase_count(); ++p) {
    bool mismatch = false;
    for (int tok : prompt.phrase_token_spans[p]) {
      const double diff = (s_ground.col(tok).template cast<double>() - s_cls.col(p).template cast<double>())
                              .cwiseAbs()
                              .maxCoeff();
      report.max_abs_difference = std::max(report.max_abs_difference, diff);
      mismatch = mismatch || diff != 0.0;
    }
    if (mismatch) report.mismatched_classes.push_back(p);
  }
  const auto anchors = classifier_model.anchors();
  const Eigen::MatrixXd deltas = out.deltas.template cast<double>();
  report.classifier_detections = decode_detections(class_scores(s_cls.template cast<double>()), deltas,
                                                   anchors, cfg.image_size, decode, &prompt);
  report.grounding_detections =
      decode_detections(phrase_scores(s_ground.template cast<double>(), prompt, LossMode::FocalSigmoid),
                        deltas, anchors, cfg.image_size, decode, &prompt);
  report.detections_identical = report.classifier_detections == report.grounding_detections;
  return report;
}

}  // namespace glip
