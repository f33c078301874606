// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "glip/checkpoint.hpp"
#include "glip/inference.hpp"
#include "glip/records.hpp"

namespace glip {

struct ShapesWorldSpec;

enum class PosTag { Det, Adj, Noun, Other };

std::string_view to_string(PosTag t);

/// Closed-class word lists plus a domain noun lexicon. Words in no list
/// fall back to suffix heuristics.
struct Lexicon {
  std::set<std::string> determiners;
  std::set<std::string> adjectives;
  std::set<std::string> nouns;

  /// English function words plus the colors and shapes of `spec`.
  static Lexicon for_shapes_world(const ShapesWorldSpec& spec);
  PosTag tag(std::string_view word) const;
};

/// One element of a tag pattern: `tag` repeated between min and max times.
struct TagRepeat {
  PosTag tag = PosTag::Noun;
  int min = 1;
  int max = 1;  // -1 = unbounded
};

using TagPattern = std::vector<TagRepeat>;

/// Patterns tried at each word; the longest match wins, ties go to the
/// earlier pattern.
struct ChunkerRule {
  std::vector<TagPattern> patterns;

  /// DET? ADJ* NOUN+
  static ChunkerRule noun_phrase();
  /// Parses "DET? ADJ* NOUN+"-style text (tags DET, ADJ, NOUN, OTHER with
  /// optional ?, * or + suffix). Throws ConfigError on bad input.
  static ChunkerRule parse(const std::vector<std::string>& patterns);
  void validate() const;
};

struct TaggedWord {
  std::string text;
  CharSpan span;
  PosTag tag = PosTag::Other;
};

std::vector<TaggedWord> tag_words(std::string_view caption, const Lexicon& lexicon);

/// Non-overlapping noun phrases, left to right.
std::vector<Phrase> extract_noun_phrases(std::string_view caption, const Lexicon& lexicon,
                                         const ChunkerRule& rule = ChunkerRule::noun_phrase());

struct PseudoLabelConfig {
  double threshold = 0.5;  // boxes kept when score > threshold
  DecodeConfig decode;
  PromptConfig prompt;

  void validate() const;
};

/// Runs the teacher on every caption's noun phrases and keeps the confident
/// (phrase, box) pairs. Phrases without a surviving box stay in the caption
/// unannotated; records left with no annotation at all are skipped.
template <typename S>
Dataset generate_pseudo_labels(const GroundingModel<S>& teacher, const Dataset& captioned,
                               const Lexicon& lexicon, const PseudoLabelConfig& config = {},
                               const ChunkerRule& rule = ChunkerRule::noun_phrase()) {
  config.validate();
  DecodeConfig decode = config.decode;
  decode.score_threshold = config.threshold;
  Dataset out;
  for (const auto& r : captioned) {
    const auto phrases = extract_noun_phrases(r.caption, lexicon, rule);
    if (phrases.empty()) continue;
    std::vector<CharSpan> spans;
    for (const auto& p : phrases) spans.push_back(p.char_span);
    const TokenizedPrompt prompt = build_prompt(r.caption, spans, config.prompt);
    std::vector<Annotation> annotations(phrases.size());
    for (const auto& d : infer(teacher, r.image, prompt, decode)) {
      if (!(d.score > config.threshold)) continue;
      auto& a = annotations[static_cast<std::size_t>(d.phrase_index)];
      a.boxes.push_back(d.box);
      a.confidences.push_back(d.score);
    }
    GroundedRecord p;
    p.image_id = r.image_id;
    p.image_path = r.image_path;
    p.image = r.image;
    p.caption = r.caption;
    p.provenance = Provenance::Pseudo;
    p.kind = RecordKind::Grounding;
    for (std::size_t i = 0; i < phrases.size(); ++i) {
      if (annotations[i].boxes.empty()) continue;
      annotations[i].span = phrases[i].char_span;
      p.annotations.push_back(std::move(annotations[i]));
    }
    if (!p.annotations.empty()) out.push_back(std::move(p));
  }
  return out;
}

/// Loads the teacher from a checkpoint first; load failures surface as
/// TeacherLoadError.
Dataset generate_pseudo_labels(const std::string& teacher_checkpoint, const Dataset& captioned,
                               const Lexicon& lexicon, const PseudoLabelConfig& config = {});

/// Fraction of gold phrases for which the pseudo record of the same image has
/// a box of the same phrase text at IoU >= 0.5.
double pseudo_phrase_recall(const Dataset& gold, const Dataset& pseudo);

struct MixingRatio {
  double gold = 1;
  double pseudo = 1;
};

struct DuplicateImage {
  std::string image_id;
  int gold = 0;
  int pseudo = 0;
};

struct StudentCorpus {
  Dataset records;
  std::vector<DuplicateImage> duplicates;  // image ids present in both sources
};

/// Interleaves the sources so that every prefix of the stream matches the
/// ratio to within one record. The source with the larger count per unit of
/// weight is used exactly once; the other is cycled. A zero weight drops a
/// source.
StudentCorpus assemble_student_corpus(const Dataset& gold, const Dataset& pseudo, MixingRatio ratio);

}  // namespace glip
