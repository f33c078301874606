// SPDX-License-Identifier: Apache-2.0
#include "glip/records.hpp"

#include <filesystem>
#include <fstream>

#include "glip/common.hpp"

namespace glip {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(Provenance p) { return p == Provenance::Gold ? "gold" : "pseudo"; }
std::string to_string(RecordKind k) { return k == RecordKind::Detection ? "detection" : "grounding"; }

void GroundedRecord::validate() const {
  const int len = static_cast<int>(caption.size());
  for (const auto& a : annotations) {
    if (a.span.begin < 0 || a.span.end > len || a.span.begin >= a.span.end)
      throw Error(ErrorCode::FormatError, image_id + ": annotation span outside caption");
    if (provenance == Provenance::Gold && !a.confidences.empty())
      throw Error(ErrorCode::FormatError, image_id + ": gold boxes carry no confidence");
    if (provenance == Provenance::Pseudo && a.confidences.size() != a.boxes.size())
      throw Error(ErrorCode::FormatError, image_id + ": pseudo boxes need one confidence each");
  }
}

json to_json(const GroundedRecord& r) {
  json anns = json::array();
  for (std::size_t i = 0; i < r.annotations.size(); ++i) {
    const auto& a = r.annotations[i];
    json boxes = json::array();
    for (const auto& b : a.boxes) boxes.push_back({b.x1, b.y1, b.x2, b.y2});
    json ann = {{"span", {a.span.begin, a.span.end}}, {"phrase", r.phrase_text(i)}, {"boxes", boxes}};
    if (!a.confidences.empty()) ann["confidence"] = a.confidences;
    anns.push_back(std::move(ann));
  }
  return {{"image_id", r.image_id}, {"image", r.image_path},
          {"kind", to_string(r.kind)}, {"provenance", to_string(r.provenance)},
          {"caption", r.caption},      {"annotations", anns}};
}

GroundedRecord record_from_json(const json& j) {
  GroundedRecord r;
  try {
    r.image_id = j.at("image_id").get<std::string>();
    r.image_path = j.value("image", "");
    r.caption = j.at("caption").get<std::string>();
    r.kind = j.value("kind", "grounding") == "detection" ? RecordKind::Detection
                                                         : RecordKind::Grounding;
    r.provenance = j.value("provenance", "gold") == "pseudo" ? Provenance::Pseudo : Provenance::Gold;
    for (const auto& a : j.at("annotations")) {
      Annotation ann;
      ann.span = {a.at("span").at(0).get<int>(), a.at("span").at(1).get<int>()};
      for (const auto& b : a.at("boxes"))
        ann.boxes.push_back({b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(),
                             b.at(3).get<double>()});
      if (a.contains("confidence")) ann.confidences = a.at("confidence").get<std::vector<double>>();
      r.annotations.push_back(std::move(ann));
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::FormatError, std::string("malformed record: ") + e.what());
  }
  r.validate();
  return r;
}

void write_records(const std::string& dir, const std::string& file_name, const Dataset& records,
                   bool write_images) {
  fs::create_directories(dir);
  std::ofstream out(fs::path(dir) / file_name);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + file_name);
  for (const auto& r : records) {
    GroundedRecord copy_ref;
    const GroundedRecord* rec = &r;
    if (rec->image_path.empty()) {
      copy_ref = r;
      copy_ref.image_path = "images/" + r.image_id + ".ppm";
      rec = &copy_ref;
    }
    if (write_images && rec->image.height > 0) {
      const fs::path img = fs::path(dir) / rec->image_path;
      fs::create_directories(img.parent_path());
      write_ppm(img.string(), rec->image);
    }
    out << to_json(*rec).dump() << '\n';
  }
}

Dataset read_records(const std::string& dir, const std::string& file_name, bool load_images) {
  std::ifstream in(fs::path(dir) / file_name);
  if (!in) throw Error(ErrorCode::IoError, "cannot read " + (fs::path(dir) / file_name).string());
  Dataset records;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw Error(ErrorCode::FormatError, std::string("bad JSON line: ") + e.what());
    }
    GroundedRecord r = record_from_json(j);
    if (load_images && !r.image_path.empty())
      r.image = read_ppm((fs::path(dir) / r.image_path).string());
    records.push_back(std::move(r));
  }
  return records;
}

SplitSummary summarize(const std::string& file, const Dataset& records) {
  SplitSummary s;
  s.file = file;
  s.count = static_cast<int>(records.size());
  for (const auto& r : records) (r.provenance == Provenance::Gold ? s.gold : s.pseudo) += 1;
  return s;
}

void write_manifest(const std::string& dir, const std::map<std::string, SplitSummary>& splits,
                    const json& extra) {
  json m = {{"format", "glip-grounding-corpus"}, {"version", 1}};
  json js = json::object();
  for (const auto& [name, s] : splits) {
    js[name] = {{"file", s.file},
                {"count", s.count},
                {"provenance", {{"gold", s.gold}, {"pseudo", s.pseudo}}}};
  }
  m["splits"] = js;
  if (!extra.empty()) m["extra"] = extra;
  fs::create_directories(dir);
  std::ofstream out(fs::path(dir) / "manifest.json");
  if (!out) throw Error(ErrorCode::IoError, "cannot write manifest");
  out << m.dump(2) << '\n';
}

std::map<std::string, SplitSummary> read_manifest(const std::string& dir) {
  std::ifstream in(fs::path(dir) / "manifest.json");
  if (!in) throw Error(ErrorCode::IoError, "cannot read manifest in " + dir);
  std::map<std::string, SplitSummary> out;
  try {
    const json m = json::parse(in);
    for (const auto& [name, s] : m.at("splits").items()) {
      SplitSummary sum;
      sum.file = s.at("file").get<std::string>();
      sum.count = s.at("count").get<int>();
      sum.gold = s.at("provenance").at("gold").get<int>();
      sum.pseudo = s.at("provenance").at("pseudo").get<int>();
      out.emplace(name, sum);
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::FormatError, std::string("malformed manifest: ") + e.what());
  }
  return out;
}

std::map<std::string, std::vector<Box>> boxes_by_phrase(const GroundedRecord& r) {
  std::map<std::string, std::vector<Box>> out;
  for (std::size_t i = 0; i < r.annotations.size(); ++i) {
    auto& v = out[r.phrase_text(i)];
    v.insert(v.end(), r.annotations[i].boxes.begin(), r.annotations[i].boxes.end());
  }
  return out;
}

}  // namespace glip
