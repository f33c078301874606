// SPDX-License-Identifier: Apache-2.0
#include "glip/evaluation.hpp"

#include <algorithm>

namespace glip {

int phrase_class(const std::string& phrase_text, const std::vector<std::string>& class_names) {
  std::string name = phrase_text;
  for (const char* article : {"a ", "an ", "the "}) {
    const std::string a = article;
    if (name.size() > a.size() && name.compare(0, a.size(), a) == 0) {
      name = name.substr(a.size());
      break;
    }
  }
  auto it = std::find(class_names.begin(), class_names.end(), name);
  if (it == class_names.end()) it = std::find(class_names.begin(), class_names.end(), phrase_text);
  return it == class_names.end() ? -1 : static_cast<int>(it - class_names.begin());
}

std::vector<GroundTruthBox> detection_ground_truth(const Dataset& data,
                                                   const std::vector<std::string>& class_names) {
  std::vector<GroundTruthBox> gt;
  for (const auto& r : data) {
    for (std::size_t i = 0; i < r.annotations.size(); ++i) {
      const int label = phrase_class(r.phrase_text(i), class_names);
      if (label < 0) continue;
      for (const Box& b : r.annotations[i].boxes) gt.push_back({r.image_id, label, b});
    }
  }
  return gt;
}

}  // namespace glip
