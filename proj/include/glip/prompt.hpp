// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "glip/common.hpp"

namespace glip {

/// Half-open character range [begin, end).
struct CharSpan {
  int begin = 0;
  int end = 0;

  int length() const { return end - begin; }
  bool contains(const CharSpan& other) const {
    return begin <= other.begin && other.end <= end;
  }
  bool overlaps(const CharSpan& other) const {
    return begin < other.end && other.begin < end;
  }
  bool operator==(const CharSpan&) const = default;
};

struct Phrase {
  std::string text;
  CharSpan char_span;

  bool operator==(const Phrase&) const = default;
};

struct Token {
  std::string text;  // continuation pieces carry a leading '#'
  CharSpan span;
  bool continuation = false;
  bool punctuation = false;
};

inline constexpr std::string_view kNoObjToken = "[NoObj]";
inline constexpr int kHashVocabSize = 4096;
inline constexpr int kNoObjId = 0;

struct PromptConfig {
  std::string separator = ". ";
  int max_tokens = 256;
  int subword_piece_len = 6;
  int chunk_size = 40;
  int downsample_cap = 85;

  /// Throws ConfigError naming every violated field.
  void validate() const;
};

/// A prompt after tokenization: M tokens, the last one being [NoObj], and a
/// map from each of the c phrases to the token indices it owns.
struct TokenizedPrompt {
  std::string text;
  std::vector<Token> tokens;
  std::vector<int> token_ids;
  std::vector<Phrase> phrases;
  std::vector<std::vector<int>> phrase_token_spans;
  std::vector<bool> special_mask;
  /// Contiguous [begin, end) token ranges encoded independently by the text
  /// stack. Separator tokens close a segment; [NoObj] is a segment of its own.
  std::vector<std::pair<int, int>> segments;
  int noobj_index = 0;

  int size() const { return static_cast<int>(tokens.size()); }
  int phrase_count() const { return static_cast<int>(phrases.size()); }
  /// Owning phrase of every token, -1 for tokens owned by no phrase.
  std::vector<int> token_owner() const;
  /// Concatenated token text of a phrase with continuation markers folded.
  std::string detokenize_phrase(int phrase) const;
};

/// Splits on whitespace and punctuation; words longer than
/// `subword_piece_len` are cut into consecutive fixed-length pieces.
std::vector<Token> tokenize(std::string_view text, const PromptConfig& config);

int token_id(std::string_view token_text);

/// General prompt builder: `phrases` are character spans into `text`.
TokenizedPrompt build_prompt(std::string text, const std::vector<CharSpan>& phrases,
                             const PromptConfig& config);

/// "name1. name2. ... nameK. " with one phrase per class.
TokenizedPrompt build_detection_prompt(const std::vector<std::string>& class_names,
                                       const PromptConfig& config);

/// Consecutive [begin, end) index ranges of at most chunk_size classes.
std::vector<std::pair<int, int>> chunk_ranges(int class_count, int chunk_size);

std::vector<TokenizedPrompt> chunk_vocabulary(const std::vector<std::string>& class_names,
                                              const PromptConfig& config);

std::vector<std::string> downsample_categories(const std::vector<std::string>& positives,
                                               const std::vector<std::string>& negatives,
                                               int cap, Rng& rng);

struct NegativeCaptionOptions {
  double full_mix_probability = 0.3;
  double partial_mix_probability = 0.3;
  int max_negatives = 19;
  std::string separator = ". ";
};

struct MixedCaption {
  std::string text;
  CharSpan positive_span;
  int caption_count = 1;

  /// Moves a span expressed against the positive caption into `text`.
  CharSpan shift(const CharSpan& span) const {
    return {span.begin + positive_span.begin, span.end + positive_span.begin};
  }
};

MixedCaption mix_negative_captions(const std::string& positive,
                                   const std::vector<std::string>& pool, Rng& rng,
                                   const NegativeCaptionOptions& options = {});

}  // namespace glip
