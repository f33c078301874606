// SPDX-License-Identifier: Apache-2.0
#include "glip/inference.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

namespace glip {

void DecodeConfig::validate() const {
  std::vector<std::string> bad;
  if (score_threshold < 0 || score_threshold > 1) bad.emplace_back("score_threshold");
  if (nms_iou < 0 || nms_iou > 1) bad.emplace_back("nms_iou");
  if (max_detections < 1) bad.emplace_back("max_detections");
  if (!bad.empty()) {
    std::string msg = "invalid decode config fields:";
    for (const auto& f : bad) msg += " " + f;
    throw Error(ErrorCode::ConfigError, msg);
  }
}

namespace {

double sigmoid(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

}  // namespace

Eigen::MatrixXd phrase_scores(const Eigen::MatrixXd& logits, const TokenizedPrompt& prompt,
                              LossMode mode) {
  if (logits.cols() != prompt.size())
    throw Error(ErrorCode::ShapeMismatch, "phrase_scores: logits columns differ from prompt length");
  Eigen::MatrixXd out(logits.rows(), prompt.phrase_count());
  Eigen::MatrixXd probs;
  if (mode == LossMode::SoftmaxCE) {
    probs = logits;
    for (Eigen::Index i = 0; i < probs.rows(); ++i) {
      const double m = probs.row(i).maxCoeff();
      probs.row(i) = (probs.row(i).array() - m).exp().matrix();
      probs.row(i) /= probs.row(i).sum();
    }
  }
  for (int p = 0; p < prompt.phrase_count(); ++p) {
    const auto& span = prompt.phrase_token_spans[p];
    if (span.empty()) throw Error(ErrorCode::EmptySpan, "phrase " + std::to_string(p) + " owns no tokens");
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
      if (mode == LossMode::FocalSigmoid) {
        // first + mean offset: equals the plain mean up to rounding and is
        // exact when every token agrees
        const double first = sigmoid(logits(i, span[0]));
        double offset = 0;
        for (std::size_t k = 1; k < span.size(); ++k) offset += sigmoid(logits(i, span[k])) - first;
        out(i, p) = first + offset / static_cast<double>(span.size());
      } else {
        double sum = 0;
        for (int tok : span) sum += probs(i, tok);
        out(i, p) = std::clamp(sum, 0.0, 1.0);
      }
    }
  }
  return out;
}

Eigen::MatrixXd class_scores(const Eigen::MatrixXd& logits) {
  return logits.unaryExpr([](double x) { return sigmoid(x); });
}

std::vector<int> nms(const std::vector<Box>& boxes, const std::vector<double>& scores,
                     double iou_threshold) {
  std::vector<int> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return scores[a] > scores[b]; });
  std::vector<int> kept;
  for (int idx : order) {
    bool keep = true;
    for (int k : kept) {
      if (iou(boxes[idx], boxes[k]) > iou_threshold) {
        keep = false;
        break;
      }
    }
    if (keep) kept.push_back(idx);
  }
  return kept;
}

void sort_detections(std::vector<Detection>& detections) {
  std::sort(detections.begin(), detections.end(), [](const Detection& a, const Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.phrase_index != b.phrase_index) return a.phrase_index < b.phrase_index;
    return a.anchor_index < b.anchor_index;
  });
}

std::vector<Detection> decode_detections(const Eigen::MatrixXd& scores, const Eigen::MatrixXd& deltas,
                                         const std::vector<Box>& anchors, double image_size,
                                         const DecodeConfig& config, const TokenizedPrompt* prompt) {
  config.validate();
  if (scores.rows() != static_cast<Eigen::Index>(anchors.size()) || deltas.rows() != scores.rows())
    throw Error(ErrorCode::ShapeMismatch, "decode_detections: one score row and delta row per anchor");
  std::vector<Box> decoded(anchors.size());
  for (std::size_t i = 0; i < anchors.size(); ++i)
    decoded[i] = clip(decode_box(deltas.row(static_cast<Eigen::Index>(i)), anchors[i]), image_size, image_size);

  std::vector<Detection> out;
  for (Eigen::Index p = 0; p < scores.cols(); ++p) {
    std::vector<Box> boxes;
    std::vector<double> s;
    std::vector<int> anchor_ids;
    for (Eigen::Index i = 0; i < scores.rows(); ++i) {
      if (scores(i, p) <= config.score_threshold) continue;
      boxes.push_back(decoded[i]);
      s.push_back(scores(i, p));
      anchor_ids.push_back(static_cast<int>(i));
    }
    for (int k : nms(boxes, s, config.nms_iou)) {
      Detection d;
      d.box = boxes[k];
      d.score = s[k];
      d.phrase_index = static_cast<int>(p);
      d.anchor_index = anchor_ids[k];
      if (prompt && p < prompt->phrase_count()) {
        d.phrase_text = prompt->phrases[p].text;
        d.span = prompt->phrases[p].char_span;
      }
      out.push_back(std::move(d));
    }
  }
  sort_detections(out);
  if (static_cast<int>(out.size()) > config.max_detections) out.resize(config.max_detections);
  return out;
}

std::vector<Detection> merge_detections(std::vector<Detection> pool, const DecodeConfig& config) {
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < pool.size(); ++i) by_class[pool[i].phrase_index].push_back(i);
  std::vector<Detection> out;
  for (const auto& [cls, idx] : by_class) {
    std::vector<Box> boxes;
    std::vector<double> scores;
    for (std::size_t i : idx) {
      boxes.push_back(pool[i].box);
      scores.push_back(pool[i].score);
    }
    for (int k : nms(boxes, scores, config.nms_iou)) out.push_back(pool[idx[k]]);
  }
  sort_detections(out);
  if (static_cast<int>(out.size()) > config.max_detections) out.resize(config.max_detections);
  return out;
}

nlohmann::json to_json(const Detection& d) {
  return {{"box", {d.box.x1, d.box.y1, d.box.x2, d.box.y2}},
          {"class", d.phrase_text},
          {"phrase_index", d.phrase_index},
          {"span", {d.span.begin, d.span.end}},
          {"score", d.score}};
}

nlohmann::json to_json(const std::vector<Detection>& ds) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& d : ds) arr.push_back(to_json(d));
  return arr;
}

}  // namespace glip
