// SPDX-License-Identifier: Apache-2.0
#include "glip/loss.hpp"

namespace glip {

TargetMatrix match_anchors(const std::vector<Box>& anchors, const std::vector<Box>& gt_boxes,
                           const std::vector<int>& gt_phrase_ids, int phrase_count,
                           const MatchConfig& config) {
  if (!(0.0 <= config.negative_iou && config.negative_iou <= config.positive_iou &&
        config.positive_iou <= 1.0)) {
    throw Error(ErrorCode::InvalidArgument, "match_anchors: need 0 <= neg <= pos <= 1");
  }
  if (gt_boxes.size() != gt_phrase_ids.size())
    throw Error(ErrorCode::InvalidArgument, "match_anchors: one phrase id per gt box");
  for (int id : gt_phrase_ids) {
    if (id < 0 || id >= phrase_count)
      throw Error(ErrorCode::InvalidArgument, "match_anchors: phrase id out of range");
  }
  const int n = static_cast<int>(anchors.size());
  const int g = static_cast<int>(gt_boxes.size());
  TargetMatrix out;
  out.targets = BinaryMatrix::Zero(n, phrase_count);
  out.state.assign(n, AnchorState::Negative);
  out.assigned_gt.assign(n, -1);
  if (g == 0) return out;

  Eigen::MatrixXd overlaps(n, g);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < g; ++j) overlaps(i, j) = iou(anchors[i], gt_boxes[j]);

  std::vector<double> best_iou(n, 0.0);
  for (int i = 0; i < n; ++i) {
    int best = 0;
    for (int j = 1; j < g; ++j)
      if (overlaps(i, j) > overlaps(i, best)) best = j;
    best_iou[i] = overlaps(i, best);
    if (best_iou[i] >= config.positive_iou) {
      out.state[i] = AnchorState::Positive;
      out.assigned_gt[i] = best;
    } else if (best_iou[i] >= config.negative_iou) {
      out.state[i] = AnchorState::Ignored;
    }
  }
  // force-match: each gt claims its best anchor. A contested anchor goes to
  // the claimant it overlaps most; an anchor already positive keeps its best gt.
  std::vector<int> claim(n, -1);
  for (int j = 0; j < g; ++j) {
    int best = 0;
    for (int i = 1; i < n; ++i)
      if (overlaps(i, j) > overlaps(best, j)) best = i;
    if (overlaps(best, j) <= 0.0) continue;
    if (claim[best] < 0 || overlaps(best, j) > overlaps(best, claim[best])) claim[best] = j;
  }
  for (int i = 0; i < n; ++i) {
    if (claim[i] < 0 || out.state[i] == AnchorState::Positive) continue;
    out.state[i] = AnchorState::Positive;
    out.assigned_gt[i] = claim[i];
  }
  for (int i = 0; i < n; ++i)
    if (out.state[i] == AnchorState::Positive) out.targets(i, gt_phrase_ids[out.assigned_gt[i]]) = 1;
  return out;
}

ExpandedTargets expand_targets(const TargetMatrix& targets, const TokenizedPrompt& prompt) {
  if (targets.phrase_count() != prompt.phrase_count()) {
    throw Error(ErrorCode::PhraseCountMismatch,
                "target matrix has " + std::to_string(targets.phrase_count()) +
                    " phrases, prompt has " + std::to_string(prompt.phrase_count()));
  }
  ExpandedTargets out;
  out.targets = BinaryMatrix::Zero(targets.anchor_count(), prompt.size());
  for (int p = 0; p < prompt.phrase_count(); ++p)
    for (int tok : prompt.phrase_token_spans[p]) out.targets.col(tok) = targets.targets.col(p);
  out.ignored.resize(targets.anchor_count());
  for (int i = 0; i < targets.anchor_count(); ++i)
    out.ignored[i] = targets.state[i] == AnchorState::Ignored;
  out.noobj_index = prompt.noobj_index;
  return out;
}

ExpandedTargets direct_targets(const TargetMatrix& targets) {
  ExpandedTargets out;
  out.targets = targets.targets;
  out.ignored.resize(targets.anchor_count());
  for (int i = 0; i < targets.anchor_count(); ++i)
    out.ignored[i] = targets.state[i] == AnchorState::Ignored;
  return out;
}

}  // namespace glip
