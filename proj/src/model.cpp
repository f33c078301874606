// SPDX-License-Identifier: Apache-2.0
#include "glip/model.hpp"

namespace glip {

std::vector<Box> make_anchors(const ModelConfig& config) {
  std::vector<Box> anchors;
  anchors.reserve(config.anchor_count());
  const double cell = config.cell();
  for (int gy = 0; gy < config.grid; ++gy)
    for (int gx = 0; gx < config.grid; ++gx)
      anchors.push_back({gx * cell, gy * cell, (gx + 1) * cell, (gy + 1) * cell});
  return anchors;
}

}  // namespace glip
