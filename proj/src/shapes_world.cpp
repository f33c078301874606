// SPDX-License-Identifier: Apache-2.0
#include "glip/shapes_world.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "glip/common.hpp"

namespace glip {

using nlohmann::json;

ShapesWorldSpec ShapesWorldSpec::standard() {
  ShapesWorldSpec s;
  s.colors = {{"red", {0.90f, 0.15f, 0.15f}},
              {"green", {0.15f, 0.80f, 0.20f}},
              {"blue", {0.20f, 0.30f, 0.95f}},
              {"yellow", {0.95f, 0.90f, 0.15f}},
              {"purple", {0.65f, 0.20f, 0.85f}}};
  s.shapes = {"circle", "square", "triangle", "cross"};
  s.held_out_pairs = {{"red", "triangle"}, {"green", "cross"}, {"blue", "circle"}, {"yellow", "square"}};
  return s;
}

void ShapesWorldSpec::validate() const {
  std::vector<std::string> bad;
  if (colors.empty()) bad.emplace_back("colors");
  if (shapes.empty()) bad.emplace_back("shapes");
  if (grid < 1 || image_size % grid != 0) bad.emplace_back("grid");
  const int cell = grid > 0 ? image_size / grid : 0;
  if (min_size < 2 || min_size > max_size) bad.emplace_back("min_size");
  if (max_size > cell) bad.emplace_back("max_size");
  if (min_objects < 1 || min_objects > max_objects) bad.emplace_back("min_objects");
  if (max_objects > grid * grid) bad.emplace_back("max_objects");
  if (detection_fraction < 0 || detection_fraction > 1) bad.emplace_back("detection_fraction");
  if (held_out_rate < 0 || held_out_rate > 1) bad.emplace_back("held_out_rate");
  if (connectives.empty()) bad.emplace_back("connectives");
  if (!bad.empty()) {
    std::string msg = "invalid shapes-world spec fields:";
    for (const auto& f : bad) msg += " " + f;
    throw Error(ErrorCode::ConfigError, msg);
  }
  std::set<std::string> cs, ss;
  for (const auto& c : colors) cs.insert(c.name);
  for (const auto& s : shapes) ss.insert(s);
  for (const auto& [c, s] : held_out_pairs) {
    if (!cs.count(c) || !ss.count(s))
      throw Error(ErrorCode::SpecInfeasible, "held-out pair not in colors x shapes: " + c + " " + s);
  }
  if (train_classes().empty())
    throw Error(ErrorCode::SpecInfeasible, "every (color, shape) pair is held out");
}

std::vector<std::string> ShapesWorldSpec::all_classes() const {
  std::vector<std::string> out;
  for (const auto& c : colors)
    for (const auto& s : shapes) out.push_back(c.name + " " + s);
  return out;
}

bool ShapesWorldSpec::is_held_out(const std::string& color, const std::string& shape) const {
  return std::find(held_out_pairs.begin(), held_out_pairs.end(), std::make_pair(color, shape)) !=
         held_out_pairs.end();
}

std::vector<std::string> ShapesWorldSpec::train_classes() const {
  std::vector<std::string> out;
  for (const auto& c : colors)
    for (const auto& s : shapes)
      if (!is_held_out(c.name, s)) out.push_back(c.name + " " + s);
  return out;
}

std::vector<std::string> ShapesWorldSpec::held_out_classes() const {
  std::vector<std::string> out;
  for (const auto& c : colors)
    for (const auto& s : shapes)
      if (is_held_out(c.name, s)) out.push_back(c.name + " " + s);
  return out;
}

void to_json(json& j, const ShapesWorldSpec& s) {
  json colors = json::array();
  for (const auto& c : s.colors) colors.push_back({{"name", c.name}, {"rgb", c.rgb}});
  json held = json::array();
  for (const auto& [c, sh] : s.held_out_pairs) held.push_back({c, sh});
  j = {{"colors", colors},
       {"shapes", s.shapes},
       {"held_out_pairs", held},
       {"min_objects", s.min_objects},
       {"max_objects", s.max_objects},
       {"image_size", s.image_size},
       {"grid", s.grid},
       {"min_size", s.min_size},
       {"max_size", s.max_size},
       {"color_jitter", s.color_jitter},
       {"background_noise", s.background_noise},
       {"detection_fraction", s.detection_fraction},
       {"held_out_rate", s.held_out_rate},
       {"determiner", s.determiner},
       {"connectives", s.connectives}};
}

void from_json(const json& j, ShapesWorldSpec& s) {
  s = ShapesWorldSpec::standard();
  if (j.contains("colors")) {
    s.colors.clear();
    for (const auto& c : j.at("colors"))
      s.colors.push_back({c.at("name").get<std::string>(), c.at("rgb").get<std::array<float, 3>>()});
  }
  if (j.contains("shapes")) s.shapes = j.at("shapes").get<std::vector<std::string>>();
  if (j.contains("held_out_pairs")) {
    s.held_out_pairs.clear();
    for (const auto& p : j.at("held_out_pairs"))
      s.held_out_pairs.emplace_back(p.at(0).get<std::string>(), p.at(1).get<std::string>());
  }
  s.min_objects = j.value("min_objects", s.min_objects);
  s.max_objects = j.value("max_objects", s.max_objects);
  s.image_size = j.value("image_size", s.image_size);
  s.grid = j.value("grid", s.grid);
  s.min_size = j.value("min_size", s.min_size);
  s.max_size = j.value("max_size", s.max_size);
  s.color_jitter = j.value("color_jitter", s.color_jitter);
  s.background_noise = j.value("background_noise", s.background_noise);
  s.detection_fraction = j.value("detection_fraction", s.detection_fraction);
  s.held_out_rate = j.value("held_out_rate", s.held_out_rate);
  s.determiner = j.value("determiner", s.determiner);
  if (j.contains("connectives")) s.connectives = j.at("connectives").get<std::vector<std::string>>();
}

Box render_shape(Image& image, const std::string& shape, const Box& box,
                 const std::array<float, 3>& rgb) {
  const int x0 = static_cast<int>(box.x1), y0 = static_cast<int>(box.y1);
  const int x1 = static_cast<int>(box.x2), y1 = static_cast<int>(box.y2);
  const double w = x1 - x0, h = y1 - y0;
  int min_x = x1, min_y = y1, max_x = x0 - 1, max_y = y0 - 1;
  for (int y = y0; y < y1; ++y) {
    for (int x = x0; x < x1; ++x) {
      // pixel center in unit box coordinates
      const double u = (x - x0 + 0.5) / w;
      const double v = (y - y0 + 0.5) / h;
      const double du = u - 0.5, dv = v - 0.5;
      bool inside = false;
      if (shape == "square") {
        inside = true;
      } else if (shape == "circle" || shape == "ellipse") {
        inside = du * du + dv * dv <= 0.25 + 1e-9;
      } else if (shape == "triangle") {
        inside = std::abs(du) <= 0.5 * v + 1e-9;
      } else if (shape == "cross") {
        inside = std::abs(du) <= 0.2 || std::abs(dv) <= 0.2;
      } else if (shape == "diamond") {
        inside = std::abs(du) + std::abs(dv) <= 0.5 + 1e-9;
      } else if (shape == "ring") {
        const double r2 = du * du + dv * dv;
        inside = r2 <= 0.25 + 1e-9 && r2 >= 0.06;
      } else {
        throw Error(ErrorCode::InvalidArgument, "unknown shape: " + shape);
      }
      if (!inside) continue;
      for (int c = 0; c < 3; ++c) image.at(y, x, c) = rgb[c];
      min_x = std::min(min_x, x);
      min_y = std::min(min_y, y);
      max_x = std::max(max_x, x);
      max_y = std::max(max_y, y);
    }
  }
  if (max_x < min_x) return box;
  return {static_cast<double>(min_x), static_cast<double>(min_y), static_cast<double>(max_x + 1),
          static_cast<double>(max_y + 1)};
}

namespace {

const ColorDef& find_color(const ShapesWorldSpec& spec, const std::string& name) {
  for (const auto& c : spec.colors)
    if (c.name == name) return c;
  throw Error(ErrorCode::InvalidArgument, "unknown color: " + name);
}

struct Placement {
  std::string color;
  std::string shape;
};

std::vector<ShapeObject> place_objects(const ShapesWorldSpec& spec,
                                       const std::vector<Placement>& picks, Rng& rng) {
  const int cell = spec.image_size / spec.grid;
  const auto cells = rng.sample_indices(static_cast<std::size_t>(spec.grid * spec.grid), picks.size());
  std::vector<ShapeObject> objects;
  for (std::size_t i = 0; i < picks.size(); ++i) {
    const int gx = static_cast<int>(cells[i]) % spec.grid;
    const int gy = static_cast<int>(cells[i]) / spec.grid;
    const int w = static_cast<int>(rng.uniform_int(spec.min_size, spec.max_size));
    int h = static_cast<int>(rng.uniform_int(spec.min_size, spec.max_size));
    if (picks[i].shape == "ellipse") h = std::max(3, w / 2);
    const int ox = static_cast<int>(rng.uniform_int(0, cell - w));
    const int oy = static_cast<int>(rng.uniform_int(0, cell - h));
    const double x = gx * cell + ox, y = gy * cell + oy;
    objects.push_back({picks[i].color, picks[i].shape, {x, y, x + w, y + h}});
  }
  return objects;
}

std::string caption_for(const ShapesWorldSpec& spec, const std::vector<ShapeObject>& objects,
                        Rng& rng, std::vector<CharSpan>& spans) {
  std::string caption;
  for (std::size_t i = 0; i < objects.size(); ++i) {
    if (i > 0) {
      if (i + 1 < objects.size()) {
        caption += ", ";
      } else {
        caption += spec.connectives[static_cast<std::size_t>(
            rng.uniform_int(0, static_cast<std::int64_t>(spec.connectives.size()) - 1))];
      }
    }
    const std::string phrase = spec.determiner + " " + objects[i].color + " " + objects[i].shape;
    spans.push_back({static_cast<int>(caption.size()), static_cast<int>(caption.size() + phrase.size())});
    caption += phrase;
  }
  return caption;
}

}  // namespace

GroundedRecord make_record(const ShapesWorldSpec& spec, const std::vector<ShapeObject>& objects,
                           RecordKind kind, const std::string& image_id, std::uint64_t seed) {
  Rng rng(seed);
  GroundedRecord r;
  r.image_id = image_id;
  r.kind = kind;
  r.image = Image(spec.image_size, spec.image_size);
  for (float& v : r.image.data) v = static_cast<float>(rng.uniform(0.0, spec.background_noise));
  std::vector<Box> extents;
  for (const auto& o : objects) {
    auto rgb = find_color(spec, o.color).rgb;
    for (float& c : rgb)
      c = std::clamp(c + static_cast<float>(rng.uniform(-spec.color_jitter, spec.color_jitter)), 0.0f, 1.0f);
    extents.push_back(render_shape(r.image, o.shape, o.box, rgb));
  }
  quantize(r.image);
  if (kind == RecordKind::Grounding) {
    std::vector<CharSpan> spans;
    r.caption = caption_for(spec, objects, rng, spans);
    for (std::size_t i = 0; i < objects.size(); ++i) r.annotations.push_back({spans[i], {extents[i]}, {}});
  } else {
    std::vector<std::string> names;
    std::vector<std::vector<Box>> boxes;
    for (std::size_t i = 0; i < objects.size(); ++i) {
      const std::string name = objects[i].color + " " + objects[i].shape;
      auto it = std::find(names.begin(), names.end(), name);
      if (it == names.end()) {
        names.push_back(name);
        boxes.push_back({extents[i]});
      } else {
        boxes[static_cast<std::size_t>(it - names.begin())].push_back(extents[i]);
      }
    }
    for (std::size_t i = 0; i < names.size(); ++i) {
      const int begin = static_cast<int>(r.caption.size());
      r.caption += names[i];
      r.annotations.push_back({{begin, static_cast<int>(r.caption.size())}, boxes[i], {}});
      r.caption += ". ";
    }
  }
  return r;
}

namespace {

std::vector<Placement> sample_pairs(const ShapesWorldSpec& spec, int k, bool allow_held_out,
                                    bool force_held_out, Rng& rng) {
  std::vector<Placement> pool, held;
  for (const auto& c : spec.colors) {
    for (const auto& s : spec.shapes) {
      if (spec.is_held_out(c.name, s)) {
        held.push_back({c.name, s});
        if (!allow_held_out) continue;
      }
      pool.push_back({c.name, s});
    }
  }
  std::vector<Placement> out;
  for (int i = 0; i < k; ++i)
    out.push_back(pool[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(pool.size()) - 1))]);
  if (force_held_out && !held.empty()) {
    const bool has = std::any_of(out.begin(), out.end(), [&](const Placement& p) {
      return spec.is_held_out(p.color, p.shape);
    });
    if (!has)
      out[static_cast<std::size_t>(rng.uniform_int(0, k - 1))] =
          held[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(held.size()) - 1))];
  }
  return out;
}

Dataset generate_split(const ShapesWorldSpec& spec, std::uint64_t seed, int count,
                       const std::string& prefix, bool eval_split) {
  Dataset out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
    const int k = static_cast<int>(rng.uniform_int(spec.min_objects, spec.max_objects));
    const bool force = eval_split && rng.bernoulli(spec.held_out_rate);
    const auto picks = sample_pairs(spec, k, eval_split, force, rng);
    const auto objects = place_objects(spec, picks, rng);
    const RecordKind kind = (!eval_split && rng.bernoulli(spec.detection_fraction))
                                ? RecordKind::Detection
                                : RecordKind::Grounding;
    out.push_back(make_record(spec, objects, kind, prefix + std::to_string(i), rng.next()));
  }
  return out;
}

}  // namespace

ShapesWorldSplits generate_shapes_world(const ShapesWorldSpec& spec, std::uint64_t seed, int count) {
  spec.validate();
  if (count < 1) throw Error(ErrorCode::InvalidArgument, "count must be positive");
  ShapesWorldSplits s;
  s.train = generate_split(spec, derive_seed(seed, 1), count, "train_", false);
  s.val = generate_split(spec, derive_seed(seed, 2), std::max(1, count / 4), "val_", true);
  s.test = generate_split(spec, derive_seed(seed, 3), std::max(1, count / 4), "test_", true);
  return s;
}

Dataset generate_captioned_images(const ShapesWorldSpec& spec, std::uint64_t seed, int count) {
  spec.validate();
  Dataset raw = generate_split(spec, derive_seed(seed, 4), count, "raw_", true);
  for (auto& r : raw) r.annotations.clear();
  return raw;
}

}  // namespace glip
