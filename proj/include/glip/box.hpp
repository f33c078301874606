// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>

#include <Eigen/Dense>

namespace glip {

/// Axis-aligned box in pixel coordinates, (x1, y1) inclusive corner and
/// (x2, y2) exclusive corner.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }

  bool operator==(const Box&) const = default;
};

inline double intersection_area(const Box& a, const Box& b) {
  const double w = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double h = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  return (w > 0 && h > 0) ? w * h : 0.0;
}

inline double iou(const Box& a, const Box& b) {
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

inline Box clip(const Box& b, double width, double height) {
  return {std::clamp(b.x1, 0.0, width), std::clamp(b.y1, 0.0, height),
          std::clamp(b.x2, 0.0, width), std::clamp(b.y2, 0.0, height)};
}

// Largest log-scale delta accepted by decode; exp(4.135) ~ 62.5x anchor size.
inline constexpr double kMaxLogScale = 4.135166556742356;

/// Encodes `target` relative to `anchor` as (dx, dy, dw, dh): center shift
/// scaled by anchor size, log-space width/height ratio.
template <typename Scalar = double>
Eigen::Matrix<Scalar, 1, 4> encode_box(const Box& target, const Box& anchor) {
  Eigen::Matrix<Scalar, 1, 4> d;
  d << Scalar((target.cx() - anchor.cx()) / anchor.width()),
      Scalar((target.cy() - anchor.cy()) / anchor.height()),
      Scalar(std::log(target.width() / anchor.width())),
      Scalar(std::log(target.height() / anchor.height()));
  return d;
}

template <typename Derived>
Box decode_box(const Eigen::MatrixBase<Derived>& delta, const Box& anchor) {
  const double dx = static_cast<double>(delta(0));
  const double dy = static_cast<double>(delta(1));
  const double dw = std::min(static_cast<double>(delta(2)), kMaxLogScale);
  const double dh = std::min(static_cast<double>(delta(3)), kMaxLogScale);
  const double cx = anchor.cx() + dx * anchor.width();
  const double cy = anchor.cy() + dy * anchor.height();
  const double w = anchor.width() * std::exp(dw);
  const double h = anchor.height() * std::exp(dh);
  return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

}  // namespace glip
