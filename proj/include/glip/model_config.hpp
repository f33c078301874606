// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>

#include "json.hpp"

namespace glip {

enum class LossMode { FocalSigmoid, SoftmaxCE };

std::string to_string(LossMode mode);
LossMode loss_mode_from_string(const std::string& name);

struct ModelConfig {
  int image_size = 64;
  int grid = 8;  // cells per side; one anchor per cell
  int d = 64;
  int fusion_layers = 2;
  int heads = 4;
  int text_layers = 1;
  int hidden = 128;  // MLP width inside vision/text blocks
  bool fusion_enabled = true;
  LossMode loss_mode = LossMode::FocalSigmoid;
  bool positional_encoding = true;
  /// >0 adds a classical c x d classifier head used instead of text features.
  int classifier_classes = 0;
  /// Adds a d x d region-side projection before the alignment dot product.
  bool region_projection = false;

  int cell() const { return image_size / grid; }
  int anchor_count() const { return grid * grid; }
  int head_width() const { return d / heads; }
  int patch_width() const { return cell() * cell() * 3; }

  /// Throws ConfigError listing every violated field.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

}  // namespace glip
