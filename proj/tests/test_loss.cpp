#include <cmath>

#include "doctest.h"
#include "glip/loss.hpp"
#include "glip/model.hpp"
#include "glip/train.hpp"
#include "oracles.hpp"

using namespace glip;

namespace {

ExpandedTargets targets_from(const BinaryMatrix& t, int noobj = -1) {
  ExpandedTargets e;
  e.targets = t;
  e.ignored.assign(static_cast<std::size_t>(t.rows()), false);
  e.noobj_index = noobj;
  return e;
}

ad::Matrix<double> random_matrix(int r, int c, Rng& rng, double scale = 1.0) {
  ad::Matrix<double> m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

}  // namespace

TEST_SUITE("loss") {

TEST_CASE("IoU of offset squares") {
  CHECK(iou({0, 0, 2, 2}, {1, 1, 3, 3}) == doctest::Approx(1.0 / 7.0));
  CHECK(iou({0, 0, 2, 2}, {0, 0, 2, 2}) == 1.0);
  CHECK(iou({0, 0, 1, 1}, {2, 2, 3, 3}) == 0.0);
}

TEST_CASE("anchor matching") {
  const std::vector<Box> anchors = {{0, 0, 2, 2}, {2, 0, 4, 2}, {0, 2, 2, 4}, {2, 2, 4, 4}};
  SUBCASE("identical anchor is positive") {
    const auto t = match_anchors(anchors, {{2, 0, 4, 2}}, {0}, 1);
    CHECK(t.state[1] == AnchorState::Positive);
    CHECK(t.assigned_gt[1] == 0);
    CHECK(t.targets(1, 0) == 1);
    CHECK(t.positive_count() == 1);
  }
  SUBCASE("low IoU is negative unless force matched") {
    const std::vector<Box> two = {{0, 0, 2, 2}, {10, 10, 12, 12}};
    const auto t = match_anchors(two, {{1, 1, 3, 3}}, {0}, 1);
    CHECK(t.state[0] == AnchorState::Positive);  // best anchor, IoU 1/7
    CHECK(t.state[1] == AnchorState::Negative);
  }
  SUBCASE("ignore band") {
    const std::vector<Box> a = {{0, 0, 10, 10}, {0, 0, 10, 10}};
    // IoU 0.45 with both; the first is force matched, the second ignored
    const auto t = match_anchors(a, {{0, 0, 10, 4.5}}, {0}, 1);
    CHECK(t.state[0] == AnchorState::Positive);
    CHECK(t.state[1] == AnchorState::Ignored);
  }
  SUBCASE("no ground truth") {
    const auto t = match_anchors(anchors, {}, {}, 3);
    CHECK(t.targets.rows() == 4);
    CHECK(t.targets.cols() == 3);
    CHECK(t.targets.sum() == 0);
    for (auto s : t.state) CHECK(s == AnchorState::Negative);
  }
  SUBCASE("rows sum to at most one") {
    const auto t = match_anchors(anchors, {{0, 0, 4, 2}, {0, 0, 2, 4}, {0, 0, 2, 2}}, {0, 1, 1}, 2);
    for (int i = 0; i < t.anchor_count(); ++i) CHECK(t.targets.row(i).cast<int>().sum() <= 1);
  }
}

TEST_CASE("target expansion example") {
  // a two-piece phrase next to a one-token phrase
  PromptConfig pc;
  pc.subword_piece_len = 5;
  const auto prompt = build_detection_prompt({"red circle", "ring"}, pc);
  const auto& spans = prompt.phrase_token_spans;
  TargetMatrix tm;
  tm.targets = BinaryMatrix::Zero(2, 2);
  tm.targets(0, 0) = 1;
  tm.state = {AnchorState::Positive, AnchorState::Negative};
  tm.assigned_gt = {0, -1};
  const auto e = expand_targets(tm, prompt);
  for (int j = 0; j < prompt.size(); ++j) {
    const bool in0 = std::find(spans[0].begin(), spans[0].end(), j) != spans[0].end();
    CHECK(e.targets(0, j) == (in0 ? 1 : 0));
    CHECK(e.targets(1, j) == 0);
  }
  CHECK(e.noobj_index == prompt.noobj_index);
  CHECK(e.targets.col(prompt.noobj_index).sum() == 0);

  tm.targets = BinaryMatrix::Zero(2, 3);
  CHECK_THROWS_AS(expand_targets(tm, prompt), Error);
}

TEST_CASE("target expansion matches the span oracle") {
  Rng rng(17);
  const std::vector<std::string> words = {"red", "circle", "toothbrush", "a", "blue", "hairdrier", "x"};
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::string> names;
    const int c = static_cast<int>(rng.uniform_int(1, 4));
    while (static_cast<int>(names.size()) < c) {
      std::string n = words[rng.uniform_int(0, 6)];
      if (rng.bernoulli(0.4)) n += " " + words[rng.uniform_int(0, 6)];
      if (std::find(names.begin(), names.end(), n) == names.end()) names.push_back(n);
    }
    const auto prompt = build_detection_prompt(names, {});
    const int n = static_cast<int>(rng.uniform_int(1, 16));
    TargetMatrix tm;
    tm.targets = BinaryMatrix::Zero(n, c);
    tm.state.assign(static_cast<std::size_t>(n), AnchorState::Negative);
    tm.assigned_gt.assign(static_cast<std::size_t>(n), -1);
    for (int i = 0; i < n; ++i) {
      const auto p = rng.uniform_int(-1, c - 1);
      if (p >= 0) {
        tm.targets(i, p) = 1;
        tm.state[static_cast<std::size_t>(i)] = AnchorState::Positive;
      }
    }
    CHECK(expand_targets(tm, prompt).targets == oracle::expand_targets(tm, prompt));
  }
}

TEST_CASE("focal loss values") {
  BinaryMatrix t = BinaryMatrix::Ones(1, 1);
  ad::Matrix<double> zero = ad::Matrix<double>::Zero(1, 1);
  CHECK(focal_loss<double>(zero, targets_from(t)).value == doctest::Approx(0.25 * 0.25 * std::log(2.0)));
  CHECK(focal_loss<double>(zero, targets_from(t)).value == doctest::Approx(0.04332).epsilon(1e-4));

  BinaryMatrix t2 = BinaryMatrix::Zero(3, 4);
  t2(0, 1) = 1;
  t2(2, 3) = 1;
  ad::Matrix<double> perfect = ad::Matrix<double>::Constant(3, 4, -20);
  perfect(0, 1) = 20;
  perfect(2, 3) = 20;
  const double v = focal_loss<double>(perfect, targets_from(t2)).value;
  CHECK(v >= 0);
  CHECK(v < 1e-6);

  Rng rng(1);
  for (int i = 0; i < 20; ++i) CHECK(focal_loss<double>(random_matrix(3, 4, rng, 3), targets_from(t2)).value >= 0);
}

TEST_CASE("focal loss ignores masked anchors") {
  Rng rng(2);
  BinaryMatrix t = BinaryMatrix::Zero(3, 3);
  t(0, 0) = 1;
  auto full = targets_from(t);
  full.ignored[1] = true;
  const auto logits = random_matrix(3, 3, rng);
  ad::Matrix<double> dropped(2, 3);
  dropped << logits.row(0), logits.row(2);
  BinaryMatrix t_dropped(2, 3);
  t_dropped << t.row(0), t.row(2);
  CHECK(focal_loss<double>(logits, full).value == doctest::Approx(focal_loss<double>(dropped, targets_from(t_dropped)).value));
  CHECK(softmax_ce_loss<double>(logits, ExpandedTargets{t, {false, true, false}, 2}).value ==
        doctest::Approx(softmax_ce_loss<double>(dropped, targets_from(t_dropped, 2)).value));

  full.ignored.assign(3, true);
  try {
    focal_loss<double>(logits, full);
    FAIL("expected NoValidElements");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::NoValidElements);
  }
}

TEST_CASE("softmax cross entropy") {
  const auto e = targets_from(BinaryMatrix::Zero(1, 4), 3);
  CHECK(softmax_ce_loss<double>(ad::Matrix<double>::Zero(1, 4), e).value == doctest::Approx(std::log(4.0)));
  CHECK(softmax_ce_loss<double>(ad::Matrix<double>::Zero(1, 4), e).value == doctest::Approx(1.3863).epsilon(1e-4));
  BinaryMatrix t = BinaryMatrix::Zero(3, 5);
  t(0, 1) = t(0, 2) = 1;
  t(2, 0) = 1;
  const auto et = targets_from(t, 4);
  for (int i = 0; i < 3; ++i) CHECK(target_distribution<double>(et, i).sum() == doctest::Approx(1.0));
  CHECK(target_distribution<double>(et, 1)(4) == 1.0);
  CHECK(target_distribution<double>(et, 0)(1) == 0.5);
  CHECK_THROWS_AS(softmax_ce_loss<double>(ad::Matrix<double>::Zero(3, 5), targets_from(t, -1)), Error);
}

TEST_CASE("localization loss") {
  const std::vector<Box> anchors = {{0, 0, 8, 8}, {8, 0, 16, 8}};
  const std::vector<Box> gt = {{1, 1, 9, 9}};
  const auto tm = match_anchors(anchors, gt, {0}, 1);
  REQUIRE(tm.positive_count() == 1);
  ad::Matrix<double> deltas = ad::Matrix<double>::Zero(2, 4);
  deltas.row(0) = encode_box<double>(gt[0], anchors[0]);
  CHECK(localization_loss<double>(deltas, anchors, tm, gt).value == doctest::Approx(0.0));
  deltas(0, 2) += 1.0;
  CHECK(localization_loss<double>(deltas, anchors, tm, gt).value == doctest::Approx(0.5));
  deltas(0, 0) -= 1.0;
  CHECK(localization_loss<double>(deltas, anchors, tm, gt).value == doctest::Approx(1.0));
  const auto none = match_anchors(anchors, {}, {}, 1);
  CHECK(localization_loss<double>(deltas, anchors, none, {}).value == 0.0);
}

TEST_CASE("loss gradients match central differences") {
  Rng rng(8);
  BinaryMatrix t = BinaryMatrix::Zero(5, 6);
  t(0, 1) = t(0, 2) = t(3, 4) = 1;
  auto e = targets_from(t, 5);
  e.ignored[2] = true;
  const auto x = random_matrix(5, 6, rng, 2);
  for (auto mode : {LossMode::FocalSigmoid, LossMode::SoftmaxCE}) {
    const auto g = grounding_loss<double>(x, e, mode).grad;
    const auto num = oracle::numeric_gradient<double>(
        [&](const ad::Matrix<double>& m) { return grounding_loss<double>(m, e, mode).value; }, x, 1e-6);
    CHECK(oracle::relative_error(g.reshaped(), num) < 1e-6);
  }
}

}
