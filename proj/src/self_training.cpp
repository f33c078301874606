// SPDX-License-Identifier: Apache-2.0
#include "glip/self_training.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>

#include "glip/shapes_world.hpp"

namespace glip {

std::string_view to_string(PosTag t) {
  switch (t) {
    case PosTag::Det: return "DET";
    case PosTag::Adj: return "ADJ";
    case PosTag::Noun: return "NOUN";
    case PosTag::Other: return "OTHER";
  }
  return "?";
}

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

bool ends_with(std::string_view w, std::string_view suffix) {
  return w.size() > suffix.size() + 2 && w.ends_with(suffix);
}

PosTag parse_tag(const std::string& name) {
  if (name == "DET") return PosTag::Det;
  if (name == "ADJ") return PosTag::Adj;
  if (name == "NOUN") return PosTag::Noun;
  if (name == "OTHER") return PosTag::Other;
  throw Error(ErrorCode::ConfigError, "unknown tag in chunker pattern: " + name);
}

// Longest end position reachable by matching pattern[e..] from word w.
int match_from(const TagPattern& pattern, std::size_t e, const std::vector<TaggedWord>& words, std::size_t w) {
  if (e == pattern.size()) return static_cast<int>(w);
  const TagRepeat& r = pattern[e];
  std::size_t run = 0;
  while (w + run < words.size() && words[w + run].tag == r.tag && (r.max < 0 || static_cast<int>(run) < r.max))
    ++run;
  for (int k = static_cast<int>(run); k >= r.min; --k) {
    const int end = match_from(pattern, e + 1, words, w + static_cast<std::size_t>(k));
    if (end >= 0) return end;
  }
  return -1;
}

}  // namespace

Lexicon Lexicon::for_shapes_world(const ShapesWorldSpec& spec) {
  Lexicon lex;
  lex.determiners = {"a",   "an",    "the",   "this",  "that", "these", "those", "some", "each",
                     "every", "another", "one", "two",  "three", "four",  "five",  "its",  "their"};
  lex.adjectives = {"small", "large", "big",  "tiny",   "bright",    "dark",   "light",
                    "round", "flat",  "thin", "hollow", "stretched", "pointy", "filled"};
  lex.nouns = {"shape", "shapes", "object", "objects", "thing", "things", "picture", "image", "background",
               "circle", "square", "triangle", "cross", "diamond", "ring", "ellipse"};
  for (const auto& c : spec.colors) lex.adjectives.insert(lower(c.name));
  for (const auto& s : spec.shapes) lex.nouns.insert(lower(s));
  return lex;
}

PosTag Lexicon::tag(std::string_view word) const {
  const std::string w = lower(word);
  if (determiners.count(w)) return PosTag::Det;
  if (adjectives.count(w)) return PosTag::Adj;
  if (nouns.count(w)) return PosTag::Noun;
  if (w.size() > 1 && w.back() == 's' && nouns.count(w.substr(0, w.size() - 1))) return PosTag::Noun;
  if (w.size() > 2 && w.ends_with("es") && nouns.count(w.substr(0, w.size() - 2))) return PosTag::Noun;
  if (!w.empty() && std::all_of(w.begin(), w.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); }))
    return PosTag::Det;
  for (std::string_view s : {"ly", "ing"})
    if (ends_with(w, s)) return PosTag::Other;
  for (std::string_view s : {"ness", "tion", "sion", "ment", "ity", "ism"})
    if (ends_with(w, s)) return PosTag::Noun;
  for (std::string_view s : {"ous", "ful", "ish", "ive", "less", "able", "ed"})
    if (ends_with(w, s)) return PosTag::Adj;
  return PosTag::Other;
}

ChunkerRule ChunkerRule::noun_phrase() {
  return {{{{PosTag::Det, 0, 1}, {PosTag::Adj, 0, -1}, {PosTag::Noun, 1, -1}}}};
}

ChunkerRule ChunkerRule::parse(const std::vector<std::string>& patterns) {
  ChunkerRule rule;
  for (const auto& text : patterns) {
    TagPattern p;
    std::size_t pos = 0;
    while (pos < text.size()) {
      if (text[pos] == ' ') {
        ++pos;
        continue;
      }
      std::size_t end = text.find(' ', pos);
      if (end == std::string::npos) end = text.size();
      std::string item = text.substr(pos, end - pos);
      TagRepeat r;
      const char q = item.back();
      if (q == '?' || q == '*' || q == '+') {
        item.pop_back();
        r.min = q == '+' ? 1 : 0;
        r.max = q == '?' ? 1 : -1;
      }
      r.tag = parse_tag(item);
      p.push_back(r);
      pos = end;
    }
    rule.patterns.push_back(std::move(p));
  }
  rule.validate();
  return rule;
}

void ChunkerRule::validate() const {
  if (patterns.empty()) throw Error(ErrorCode::ConfigError, "chunker has no patterns");
  for (const auto& p : patterns) {
    if (p.empty()) throw Error(ErrorCode::ConfigError, "empty chunker pattern");
    int least = 0;
    for (const auto& r : p) {
      if (r.min < 0 || (r.max >= 0 && r.max < r.min) || r.max == 0)
        throw Error(ErrorCode::ConfigError, "bad repetition bounds in chunker pattern");
      least += r.min;
    }
    if (least == 0) throw Error(ErrorCode::ConfigError, "chunker pattern matches the empty sequence");
  }
}

std::vector<TaggedWord> tag_words(std::string_view caption, const Lexicon& lexicon) {
  std::vector<TaggedWord> words;
  std::size_t i = 0;
  auto word_char = [](char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '\''; };
  while (i < caption.size()) {
    if (!word_char(caption[i])) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < caption.size() && word_char(caption[j])) ++j;
    TaggedWord w;
    w.text = std::string(caption.substr(i, j - i));
    w.span = {static_cast<int>(i), static_cast<int>(j)};
    w.tag = lexicon.tag(w.text);
    words.push_back(std::move(w));
    i = j;
  }
  return words;
}

std::vector<Phrase> extract_noun_phrases(std::string_view caption, const Lexicon& lexicon,
                                         const ChunkerRule& rule) {
  rule.validate();
  const auto words = tag_words(caption, lexicon);
  std::vector<Phrase> out;
  std::size_t w = 0;
  while (w < words.size()) {
    int best = -1;
    for (const auto& p : rule.patterns) best = std::max(best, match_from(p, 0, words, w));
    if (best <= static_cast<int>(w)) {
      ++w;
      continue;
    }
    const CharSpan span{words[w].span.begin, words[static_cast<std::size_t>(best) - 1].span.end};
    out.push_back({std::string(caption.substr(static_cast<std::size_t>(span.begin),
                                              static_cast<std::size_t>(span.length()))),
                   span});
    w = static_cast<std::size_t>(best);
  }
  return out;
}

void PseudoLabelConfig::validate() const {
  if (!(threshold > 0 && threshold < 1))
    throw Error(ErrorCode::ConfigError, "invalid pseudo-label config fields: threshold");
  decode.validate();
  prompt.validate();
}

Dataset generate_pseudo_labels(const std::string& teacher_checkpoint, const Dataset& captioned,
                               const Lexicon& lexicon, const PseudoLabelConfig& config) {
  LoadedCheckpoint<float> teacher;
  try {
    teacher = load_checkpoint<float>(teacher_checkpoint);
  } catch (const Error& e) {
    throw Error(ErrorCode::TeacherLoadError, std::string("cannot load teacher: ") + e.what());
  }
  if (teacher.model.config().classifier_classes > 0)
    throw Error(ErrorCode::TeacherLoadError, "teacher must be a grounding model");
  return generate_pseudo_labels(teacher.model, captioned, lexicon, config);
}

double pseudo_phrase_recall(const Dataset& gold, const Dataset& pseudo) {
  std::map<std::string, const GroundedRecord*> by_id;
  for (const auto& p : pseudo) by_id.emplace(p.image_id, &p);
  int total = 0, hit = 0;
  for (const auto& g : gold) {
    const auto it = by_id.find(g.image_id);
    for (std::size_t i = 0; i < g.annotations.size(); ++i) {
      ++total;
      if (it == by_id.end()) continue;
      const GroundedRecord& p = *it->second;
      bool found = false;
      for (std::size_t k = 0; k < p.annotations.size() && !found; ++k) {
        if (p.phrase_text(k) != g.phrase_text(i)) continue;
        for (const Box& pb : p.annotations[k].boxes)
          for (const Box& gb : g.annotations[i].boxes)
            if (iou(pb, gb) >= 0.5) found = true;
      }
      hit += found;
    }
  }
  return total ? static_cast<double>(hit) / total : 0.0;
}

StudentCorpus assemble_student_corpus(const Dataset& gold, const Dataset& pseudo, MixingRatio ratio) {
  if (!(ratio.gold >= 0) || !(ratio.pseudo >= 0) || ratio.gold + ratio.pseudo <= 0 || !std::isfinite(ratio.gold) ||
      !std::isfinite(ratio.pseudo))
    throw Error(ErrorCode::InvalidArgument, "mixing ratio weights must be non-negative, not both zero");
  const bool use_gold = ratio.gold > 0 && !gold.empty();
  const bool use_pseudo = ratio.pseudo > 0 && !pseudo.empty();
  StudentCorpus out;
  if (!use_gold && !use_pseudo) return out;

  // Length of the stream: the source that runs out first at this ratio sets it.
  double units = 0;
  if (use_gold) units = std::max(units, gold.size() / ratio.gold);
  if (use_pseudo) units = std::max(units, pseudo.size() / ratio.pseudo);
  const double wg = use_gold ? ratio.gold : 0, wp = use_pseudo ? ratio.pseudo : 0;
  const auto n_gold = static_cast<std::size_t>(std::llround(units * wg));
  const auto n_pseudo = static_cast<std::size_t>(std::llround(units * wp));

  std::size_t taken_gold = 0, taken_pseudo = 0;
  while (taken_gold < n_gold || taken_pseudo < n_pseudo) {
    // Take from the source furthest behind its share of the stream so far.
    const double t = static_cast<double>(taken_gold + taken_pseudo + 1);
    const double lag_gold = t * wg / (wg + wp) - static_cast<double>(taken_gold);
    const double lag_pseudo = t * wp / (wg + wp) - static_cast<double>(taken_pseudo);
    const bool pick_gold = taken_pseudo >= n_pseudo || (taken_gold < n_gold && lag_gold >= lag_pseudo);
    if (pick_gold) {
      out.records.push_back(gold[taken_gold++ % gold.size()]);
    } else {
      out.records.push_back(pseudo[taken_pseudo++ % pseudo.size()]);
    }
  }

  std::map<std::string, DuplicateImage> seen;
  for (const auto& r : gold) {
    auto& d = seen[r.image_id];
    d.image_id = r.image_id;
    ++d.gold;
  }
  for (const auto& r : pseudo) {
    auto& d = seen[r.image_id];
    d.image_id = r.image_id;
    ++d.pseudo;
  }
  for (const auto& [id, d] : seen)
    if (d.gold > 0 && d.pseudo > 0) out.duplicates.push_back(d);
  return out;
}

}  // namespace glip
