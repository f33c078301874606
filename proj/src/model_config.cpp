// SPDX-License-Identifier: Apache-2.0
#include "glip/model_config.hpp"

#include <vector>

#include "glip/common.hpp"

namespace glip {

std::string to_string(LossMode mode) {
  return mode == LossMode::FocalSigmoid ? "focal_sigmoid" : "softmax_ce";
}

LossMode loss_mode_from_string(const std::string& name) {
  if (name == "focal_sigmoid") return LossMode::FocalSigmoid;
  if (name == "softmax_ce") return LossMode::SoftmaxCE;
  throw Error(ErrorCode::ConfigError, "unknown loss_mode: " + name);
}

void ModelConfig::validate() const {
  std::vector<std::string> bad;
  if (image_size < 1) bad.emplace_back("image_size");
  if (grid < 1 || (grid > 0 && image_size % grid != 0)) bad.emplace_back("grid");
  if (d < 1) bad.emplace_back("d");
  if (heads < 1 || (heads > 0 && d % heads != 0)) bad.emplace_back("heads");
  if (fusion_layers < 1) bad.emplace_back("fusion_layers");
  if (text_layers < 0) bad.emplace_back("text_layers");
  if (hidden < 1) bad.emplace_back("hidden");
  if (classifier_classes < 0) bad.emplace_back("classifier_classes");
  if (!bad.empty()) {
    std::string msg = "invalid model config fields:";
    for (const auto& f : bad) msg += " " + f;
    throw Error(ErrorCode::ConfigError, msg);
  }
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"image_size", c.image_size},
                     {"grid", c.grid},
                     {"d", c.d},
                     {"fusion_layers", c.fusion_layers},
                     {"heads", c.heads},
                     {"text_layers", c.text_layers},
                     {"hidden", c.hidden},
                     {"fusion_enabled", c.fusion_enabled},
                     {"loss_mode", to_string(c.loss_mode)},
                     {"positional_encoding", c.positional_encoding},
                     {"classifier_classes", c.classifier_classes},
                     {"region_projection", c.region_projection}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig def;
  c.image_size = j.value("image_size", def.image_size);
  c.grid = j.value("grid", def.grid);
  c.d = j.value("d", def.d);
  c.fusion_layers = j.value("fusion_layers", def.fusion_layers);
  c.heads = j.value("heads", def.heads);
  c.text_layers = j.value("text_layers", def.text_layers);
  c.hidden = j.value("hidden", def.hidden);
  c.fusion_enabled = j.value("fusion_enabled", def.fusion_enabled);
  c.loss_mode = loss_mode_from_string(j.value("loss_mode", to_string(def.loss_mode)));
  c.positional_encoding = j.value("positional_encoding", def.positional_encoding);
  c.classifier_classes = j.value("classifier_classes", def.classifier_classes);
  c.region_projection = j.value("region_projection", def.region_projection);
}

}  // namespace glip
