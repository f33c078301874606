// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <string>
#include <vector>

#include "glip/box.hpp"
#include "glip/image.hpp"
#include "glip/prompt.hpp"

#include "json.hpp"

namespace glip {

enum class Provenance { Gold, Pseudo };
enum class RecordKind { Detection, Grounding };

std::string to_string(Provenance p);
std::string to_string(RecordKind k);

/// One grounded phrase: a character span of the caption and its boxes.
/// Pseudo annotations carry one confidence per box; gold ones carry none.
struct Annotation {
  CharSpan span;
  std::vector<Box> boxes;
  std::vector<double> confidences;
};

/// Unit of both gold and pseudo grounding data. Detection records store the
/// positive class names as a ". "-joined caption, one annotation per class.
struct GroundedRecord {
  std::string image_id;
  std::string image_path;  // relative to the dataset directory
  Image image;
  std::string caption;
  std::vector<Annotation> annotations;
  Provenance provenance = Provenance::Gold;
  RecordKind kind = RecordKind::Grounding;

  std::string phrase_text(std::size_t i) const {
    const CharSpan& s = annotations.at(i).span;
    return caption.substr(s.begin, s.length());
  }
  /// Throws FormatError if a span leaves the caption or confidences are
  /// inconsistent with the provenance.
  void validate() const;
};

using Dataset = std::vector<GroundedRecord>;

nlohmann::json to_json(const GroundedRecord& r);
GroundedRecord record_from_json(const nlohmann::json& j);

/// Line-delimited JSON, one record per line. Images are written next to the
/// file as PPM rasters and referenced by relative path.
void write_records(const std::string& dir, const std::string& file_name, const Dataset& records,
                   bool write_images = true);
Dataset read_records(const std::string& dir, const std::string& file_name, bool load_images = true);

struct SplitSummary {
  std::string file;
  int count = 0;
  int gold = 0;
  int pseudo = 0;
};

/// manifest.json: split name -> file and provenance counts.
void write_manifest(const std::string& dir, const std::map<std::string, SplitSummary>& splits,
                    const nlohmann::json& extra = nlohmann::json::object());
std::map<std::string, SplitSummary> read_manifest(const std::string& dir);
SplitSummary summarize(const std::string& file, const Dataset& records);

/// Every (class name -> boxes) pair of a detection-style reading of a record:
/// annotation phrase text is the class name.
std::map<std::string, std::vector<Box>> boxes_by_phrase(const GroundedRecord& r);

}  // namespace glip
