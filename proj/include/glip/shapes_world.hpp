// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "glip/records.hpp"

#include "json.hpp"

namespace glip {

struct ColorDef {
  std::string name;
  std::array<float, 3> rgb;
};

/// Parameters of the synthetic grounding corpus: colored geometric shapes
/// placed one per grid cell, captioned as "a red circle and a blue square".
struct ShapesWorldSpec {
  std::vector<ColorDef> colors;
  std::vector<std::string> shapes;
  /// (color, shape) pairs never shown in train images or captions.
  std::vector<std::pair<std::string, std::string>> held_out_pairs;
  int min_objects = 1;
  int max_objects = 3;
  int image_size = 64;
  int grid = 8;
  int min_size = 6;  // object extent in pixels, must fit a cell
  int max_size = 8;
  float color_jitter = 0.06f;
  float background_noise = 0.08f;
  /// Fraction of train records emitted as detection-style records.
  double detection_fraction = 0.5;
  /// Probability that a val/test image contains at least one held-out pair.
  double held_out_rate = 0.6;
  std::string determiner = "a";
  std::vector<std::string> connectives = {" and ", " next to ", " with "};

  static ShapesWorldSpec standard();
  void validate() const;

  std::vector<std::string> all_classes() const;    // every color x shape name
  std::vector<std::string> train_classes() const;  // minus held-out pairs
  std::vector<std::string> held_out_classes() const;
  bool is_held_out(const std::string& color, const std::string& shape) const;
};

void to_json(nlohmann::json& j, const ShapesWorldSpec& s);
void from_json(const nlohmann::json& j, ShapesWorldSpec& s);

struct ShapesWorldSplits {
  Dataset train;
  Dataset val;
  Dataset test;
};

/// `count` is the number of train records; val and test get count / 4 each.
ShapesWorldSplits generate_shapes_world(const ShapesWorldSpec& spec, std::uint64_t seed, int count);

/// Image-caption pairs without boxes (the raw input of pseudo-labelling).
/// Held-out pairs may appear.
Dataset generate_captioned_images(const ShapesWorldSpec& spec, std::uint64_t seed, int count);

/// A single placed object, exposed for rendering tests.
struct ShapeObject {
  std::string color;
  std::string shape;
  Box box;
};

/// Draws a shape filling `box` (integer pixel bounds) and returns the tight
/// extent of the pixels actually painted.
Box render_shape(Image& image, const std::string& shape, const Box& box,
                 const std::array<float, 3>& rgb);

/// Renders a record with exactly the given objects (no randomness besides
/// `seed`-driven noise).
GroundedRecord make_record(const ShapesWorldSpec& spec, const std::vector<ShapeObject>& objects,
                           RecordKind kind, const std::string& image_id, std::uint64_t seed);

}  // namespace glip
