// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "glip/autodiff.hpp"
#include "glip/box.hpp"
#include "glip/model_config.hpp"
#include "glip/prompt.hpp"

namespace glip {

enum class AnchorState : std::uint8_t { Negative, Positive, Ignored };

using BinaryMatrix = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>;

/// Phrase-level targets T (N x c) from many-to-1 anchor matching.
struct TargetMatrix {
  BinaryMatrix targets;
  std::vector<AnchorState> state;
  std::vector<int> assigned_gt;  // -1 unless positive

  int anchor_count() const { return static_cast<int>(targets.rows()); }
  int phrase_count() const { return static_cast<int>(targets.cols()); }
  int positive_count() const {
    return static_cast<int>(std::count(state.begin(), state.end(), AnchorState::Positive));
  }
};

/// Token-level targets T' (N x M) plus the per-anchor ignore mask.
struct ExpandedTargets {
  BinaryMatrix targets;
  std::vector<bool> ignored;
  int noobj_index = -1;  // -1 when there is no [NoObj] column
};

struct MatchConfig {
  double positive_iou = 0.5;
  double negative_iou = 0.4;
};

/// Anchor is positive for its highest-IoU gt when IoU >= positive_iou,
/// negative when the best IoU < negative_iou and ignored in between. Every gt
/// is additionally force-matched to its best anchor (lowest index on ties).
TargetMatrix match_anchors(const std::vector<Box>& anchors, const std::vector<Box>& gt_boxes,
                           const std::vector<int>& gt_phrase_ids, int phrase_count,
                           const MatchConfig& config = {});

ExpandedTargets expand_targets(const TargetMatrix& targets, const TokenizedPrompt& prompt);

/// Identity expansion for classifier-head models (one column per class).
ExpandedTargets direct_targets(const TargetMatrix& targets);

struct FocalParams {
  double gamma = 2.0;
  double alpha = 0.25;
};

template <typename S>
struct LossValue {
  S value = S(0);
  ad::Matrix<S> grad;  // d value / d input
};

struct LossReport {
  double total = 0;
  double cls = 0;
  double loc = 0;
  int matched_anchor_count = 0;
};

namespace detail {

template <typename S>
S log_sigmoid(S x) {
  return x >= S(0) ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
}

}  // namespace detail

/// Sigmoid focal loss summed over non-ignored (anchor, token) pairs and
/// divided by max(1, #positive pairs).
template <typename S>
LossValue<S> focal_loss(const ad::Matrix<S>& logits, const ExpandedTargets& t,
                        const FocalParams& fp = {}) {
  if (logits.rows() != t.targets.rows() || logits.cols() != t.targets.cols())
    throw Error(ErrorCode::ShapeMismatch, "focal_loss: logits and targets differ in shape");
  const S gamma = static_cast<S>(fp.gamma);
  const S alpha = static_cast<S>(fp.alpha);
  LossValue<S> out;
  out.grad = ad::Matrix<S>::Zero(logits.rows(), logits.cols());
  int valid = 0;
  long positives = 0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    if (t.ignored[i]) continue;
    ++valid;
    for (Eigen::Index j = 0; j < logits.cols(); ++j) positives += t.targets(i, j);
  }
  if (valid == 0) throw Error(ErrorCode::NoValidElements, "focal_loss: every anchor is ignored");
  const S norm = S(1) / static_cast<S>(std::max(1L, positives));
  S total = S(0);
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    if (t.ignored[i]) continue;
    for (Eigen::Index j = 0; j < logits.cols(); ++j) {
      const S x = logits(i, j);
      const S log_p = detail::log_sigmoid(x);
      const S log_q = detail::log_sigmoid(-x);
      const S p = std::exp(log_p);
      const S q = std::exp(log_q);
      if (t.targets(i, j)) {
        const S w = std::pow(q, gamma);
        total += -alpha * w * log_p;
        out.grad(i, j) = alpha * w * (gamma * p * log_p - q) * norm;
      } else {
        const S w = std::pow(p, gamma);
        total += -(S(1) - alpha) * w * log_q;
        out.grad(i, j) = (S(1) - alpha) * w * (p - gamma * q * log_q) * norm;
      }
    }
  }
  ad::flush_subnormals(out.grad);
  out.value = total * norm;
  return out;
}

/// Per-anchor CE target: uniform over positives, else one-hot on [NoObj].
template <typename S>
Eigen::Matrix<S, 1, Eigen::Dynamic> target_distribution(const ExpandedTargets& t, Eigen::Index row) {
  Eigen::Matrix<S, 1, Eigen::Dynamic> dist = Eigen::Matrix<S, 1, Eigen::Dynamic>::Zero(t.targets.cols());
  int count = 0;
  for (Eigen::Index j = 0; j < t.targets.cols(); ++j) count += t.targets(row, j);
  if (count == 0) {
    dist(t.noobj_index) = S(1);
  } else {
    for (Eigen::Index j = 0; j < t.targets.cols(); ++j)
      if (t.targets(row, j)) dist(j) = S(1) / static_cast<S>(count);
  }
  return dist;
}

/// Multi-label softmax cross-entropy over tokens. Each non-ignored anchor
/// spreads unit target mass uniformly over its positive tokens, or puts it
/// all on [NoObj] when it has none. Mean over non-ignored anchors.
template <typename S>
LossValue<S> softmax_ce_loss(const ad::Matrix<S>& logits, const ExpandedTargets& t) {
  if (logits.rows() != t.targets.rows() || logits.cols() != t.targets.cols())
    throw Error(ErrorCode::ShapeMismatch, "softmax_ce_loss: logits and targets differ in shape");
  if (t.noobj_index < 0 || t.noobj_index >= logits.cols())
    throw Error(ErrorCode::InvalidArgument, "softmax_ce_loss: prompt has no [NoObj] column");
  LossValue<S> out;
  out.grad = ad::Matrix<S>::Zero(logits.rows(), logits.cols());
  int valid = 0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) valid += t.ignored[i] ? 0 : 1;
  if (valid == 0) throw Error(ErrorCode::NoValidElements, "softmax_ce_loss: every anchor is ignored");
  const S inv = S(1) / static_cast<S>(valid);
  S total = S(0);
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    if (t.ignored[i]) continue;
    const auto row = logits.row(i);
    const S m = row.maxCoeff();
    const S lse = m + std::log((row.array() - m).exp().sum());
    const auto dist = target_distribution<S>(t, i);
    for (Eigen::Index j = 0; j < logits.cols(); ++j) {
      const S log_prob = row(j) - lse;
      if (dist(j) > S(0)) total -= dist(j) * log_prob;
      out.grad(i, j) = (std::exp(log_prob) - dist(j)) * inv;
    }
  }
  out.value = total * inv;
  return out;
}

template <typename S>
LossValue<S> grounding_loss(const ad::Matrix<S>& logits, const ExpandedTargets& t, LossMode mode,
                            const FocalParams& fp = {}) {
  return mode == LossMode::FocalSigmoid ? focal_loss<S>(logits, t, fp) : softmax_ce_loss<S>(logits, t);
}

/// Smooth-L1 (beta = 1) between predicted deltas and the encoded gt box at
/// every positive anchor, summed over the four coordinates and averaged over
/// positive anchors. Zero when nothing is positive.
template <typename S>
LossValue<S> localization_loss(const ad::Matrix<S>& deltas, const std::vector<Box>& anchors,
                               const TargetMatrix& targets, const std::vector<Box>& gt_boxes) {
  if (deltas.rows() != static_cast<Eigen::Index>(anchors.size()) || deltas.cols() != 4)
    throw Error(ErrorCode::ShapeMismatch, "localization_loss: deltas must be N x 4");
  LossValue<S> out;
  out.grad = ad::Matrix<S>::Zero(deltas.rows(), 4);
  const int positives = targets.positive_count();
  if (positives == 0) return out;
  const S inv = S(1) / static_cast<S>(positives);
  S total = S(0);
  for (Eigen::Index i = 0; i < deltas.rows(); ++i) {
    if (targets.state[i] != AnchorState::Positive) continue;
    const auto goal = encode_box<S>(gt_boxes.at(targets.assigned_gt[i]), anchors[i]);
    for (int c = 0; c < 4; ++c) {
      const S diff = deltas(i, c) - goal(c);
      const S a = std::abs(diff);
      if (a < S(1)) {
        total += S(0.5) * diff * diff;
        out.grad(i, c) = diff * inv;
      } else {
        total += a - S(0.5);
        out.grad(i, c) = (diff > S(0) ? S(1) : S(-1)) * inv;
      }
    }
  }
  out.value = total * inv;
  return out;
}

}  // namespace glip
