// SPDX-License-Identifier: Apache-2.0
#include "glip/prompt.hpp"

#include <algorithm>
#include <cctype>
#include <set>

namespace glip {
namespace {

bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }

bool is_punct(char c) {
  switch (c) {
    case '.': case ',': case ':': case ';': case '!': case '?':
      return true;
    default:
      return false;
  }
}

std::string lowercase(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

}  // namespace

void PromptConfig::validate() const {
  std::vector<std::string> bad;
  if (separator.empty()) bad.emplace_back("separator");
  if (max_tokens < 4) bad.emplace_back("max_tokens");
  if (subword_piece_len < 1) bad.emplace_back("subword_piece_len");
  if (chunk_size < 1) bad.emplace_back("chunk_size");
  if (downsample_cap < 1) bad.emplace_back("downsample_cap");
  if (!bad.empty()) {
    std::string msg = "invalid prompt config fields:";
    for (const auto& f : bad) msg += " " + f;
    throw Error(ErrorCode::ConfigError, msg);
  }
}

std::vector<int> TokenizedPrompt::token_owner() const {
  std::vector<int> owner(tokens.size(), -1);
  for (int p = 0; p < phrase_count(); ++p)
    for (int t : phrase_token_spans[p]) owner[t] = p;
  return owner;
}

std::string TokenizedPrompt::detokenize_phrase(int phrase) const {
  std::string out;
  int prev_end = -1;
  for (int t : phrase_token_spans.at(phrase)) {
    const Token& tok = tokens[t];
    if (!out.empty() && !tok.continuation && tok.span.begin != prev_end) out += ' ';
    out += tok.continuation ? tok.text.substr(1) : tok.text;
    prev_end = tok.span.end;
  }
  return out;
}

std::vector<Token> tokenize(std::string_view text, const PromptConfig& config) {
  const int piece = std::max(1, config.subword_piece_len);
  std::vector<Token> tokens;
  const int n = static_cast<int>(text.size());
  int i = 0;
  while (i < n) {
    if (is_space(text[i])) {
      ++i;
      continue;
    }
    if (is_punct(text[i])) {
      tokens.push_back({std::string(1, text[i]), {i, i + 1}, false, true});
      ++i;
      continue;
    }
    int j = i;
    while (j < n && !is_space(text[j]) && !is_punct(text[j])) ++j;
    for (int start = i; start < j; start += piece) {
      const int end = std::min(j, start + piece);
      const bool cont = start != i;
      std::string piece_text(text.substr(start, end - start));
      if (cont) piece_text.insert(piece_text.begin(), '#');
      tokens.push_back({std::move(piece_text), {start, end}, cont, false});
    }
    i = j;
  }
  return tokens;
}

int token_id(std::string_view token_text) {
  if (token_text == kNoObjToken) return kNoObjId;
  return 1 + static_cast<int>(fnv1a(lowercase(token_text)) % (kHashVocabSize - 1));
}

TokenizedPrompt build_prompt(std::string text, const std::vector<CharSpan>& phrases,
                             const PromptConfig& config) {
  TokenizedPrompt prompt;
  prompt.tokens = tokenize(text, config);
  const int text_len = static_cast<int>(text.size());
  prompt.tokens.push_back({std::string(kNoObjToken), {text_len, text_len}, false, false});
  const int m = static_cast<int>(prompt.tokens.size());
  if (m > config.max_tokens) {
    throw Error(ErrorCode::TooManyTokens, "prompt has " + std::to_string(m) +
                                              " tokens, limit is " +
                                              std::to_string(config.max_tokens));
  }
  prompt.noobj_index = m - 1;
  prompt.token_ids.reserve(m);
  prompt.special_mask.reserve(m);
  for (int t = 0; t < m; ++t) {
    const Token& tok = prompt.tokens[t];
    prompt.token_ids.push_back(t == m - 1 ? kNoObjId : token_id(tok.text));
    prompt.special_mask.push_back(t == m - 1 || tok.punctuation);
  }

  std::vector<int> owner(m, -1);
  for (std::size_t p = 0; p < phrases.size(); ++p) {
    const CharSpan& span = phrases[p];
    if (span.begin < 0 || span.end > text_len || span.begin >= span.end) {
      throw Error(ErrorCode::InvalidArgument,
                  "phrase span out of bounds: [" + std::to_string(span.begin) + ", " +
                      std::to_string(span.end) + ")");
    }
    std::vector<int> owned;
    for (int t = 0; t < m - 1; ++t) {
      if (prompt.special_mask[t] || !prompt.tokens[t].span.overlaps(span)) continue;
      if (owner[t] != -1) {
        throw Error(ErrorCode::InvalidArgument, "phrases overlap at token " + std::to_string(t));
      }
      owner[t] = static_cast<int>(p);
      owned.push_back(t);
    }
    if (owned.empty()) {
      throw Error(ErrorCode::InvalidArgument,
                  "phrase owns no tokens: '" + text.substr(span.begin, span.length()) + "'");
    }
    prompt.phrases.push_back({text.substr(span.begin, span.length()), span});
    prompt.phrase_token_spans.push_back(std::move(owned));
  }

  int seg_begin = 0;
  for (int t = 0; t < m - 1; ++t) {
    if (prompt.tokens[t].punctuation) {
      prompt.segments.emplace_back(seg_begin, t + 1);
      seg_begin = t + 1;
    }
  }
  if (seg_begin < m - 1) prompt.segments.emplace_back(seg_begin, m - 1);
  prompt.segments.emplace_back(m - 1, m);

  prompt.text = std::move(text);
  return prompt;
}

TokenizedPrompt build_detection_prompt(const std::vector<std::string>& class_names,
                                       const PromptConfig& config) {
  if (class_names.empty()) throw Error(ErrorCode::InvalidArgument, "empty class list");
  std::set<std::string> seen;
  std::string text;
  std::vector<CharSpan> spans;
  spans.reserve(class_names.size());
  for (const auto& name : class_names) {
    if (name.empty()) throw Error(ErrorCode::InvalidArgument, "empty class name");
    if (!seen.insert(name).second) {
      throw Error(ErrorCode::InvalidArgument, "duplicate class name: " + name);
    }
    const int begin = static_cast<int>(text.size());
    text += name;
    spans.push_back({begin, static_cast<int>(text.size())});
    text += config.separator;
  }
  return build_prompt(std::move(text), spans, config);
}

std::vector<std::pair<int, int>> chunk_ranges(int class_count, int chunk_size) {
  if (chunk_size < 1) throw Error(ErrorCode::InvalidArgument, "chunk_size must be >= 1");
  std::vector<std::pair<int, int>> ranges;
  for (int begin = 0; begin < class_count; begin += chunk_size)
    ranges.emplace_back(begin, std::min(class_count, begin + chunk_size));
  return ranges;
}

std::vector<TokenizedPrompt> chunk_vocabulary(const std::vector<std::string>& class_names,
                                              const PromptConfig& config) {
  if (class_names.empty()) throw Error(ErrorCode::InvalidArgument, "empty class list");
  std::vector<TokenizedPrompt> chunks;
  for (auto [begin, end] : chunk_ranges(static_cast<int>(class_names.size()), config.chunk_size)) {
    std::vector<std::string> names(class_names.begin() + begin, class_names.begin() + end);
    chunks.push_back(build_detection_prompt(names, config));
  }
  return chunks;
}

std::vector<std::string> downsample_categories(const std::vector<std::string>& positives,
                                               const std::vector<std::string>& negatives,
                                               int cap, Rng& rng) {
  const std::set<std::string> pos_set(positives.begin(), positives.end());
  for (const auto& n : negatives) {
    if (pos_set.count(n)) {
      throw Error(ErrorCode::InvalidArgument, "class is both positive and negative: " + n);
    }
  }
  const int n_pos = static_cast<int>(positives.size());
  if (n_pos > cap) {
    throw Error(ErrorCode::CapTooSmall, std::to_string(n_pos) + " positives exceed cap " +
                                            std::to_string(cap));
  }
  const int room = cap - n_pos;
  const int available = static_cast<int>(negatives.size());
  int n_add = 0;
  if (rng.bernoulli(0.5)) {
    n_add = std::min(room, available);
  } else if (room >= 1) {
    n_add = std::min(static_cast<int>(rng.uniform_int(1, room)), available);
  }
  std::vector<std::string> out = positives;
  for (std::size_t idx : rng.sample_indices(negatives.size(), static_cast<std::size_t>(n_add)))
    out.push_back(negatives[idx]);
  rng.shuffle(out);
  return out;
}

MixedCaption mix_negative_captions(const std::string& positive,
                                   const std::vector<std::string>& pool, Rng& rng,
                                   const NegativeCaptionOptions& options) {
  const double u = rng.uniform();
  int k = 0;
  if (u < options.full_mix_probability) {
    k = options.max_negatives;
  } else if (u < options.full_mix_probability + options.partial_mix_probability) {
    k = static_cast<int>(rng.uniform_int(1, options.max_negatives));
  }
  MixedCaption mixed;
  if (k == 0) {
    mixed.text = positive;
    mixed.positive_span = {0, static_cast<int>(positive.size())};
    return mixed;
  }
  if (static_cast<int>(pool.size()) < k) {
    throw Error(ErrorCode::PoolTooSmall, "need " + std::to_string(k) +
                                             " negative captions, pool has " +
                                             std::to_string(pool.size()));
  }
  const auto picks = rng.sample_indices(pool.size(), static_cast<std::size_t>(k));
  const int position = static_cast<int>(rng.uniform_int(0, k));
  std::vector<const std::string*> order;
  for (std::size_t idx : picks) order.push_back(&pool[idx]);
  order.insert(order.begin() + position, &positive);
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (i > 0) mixed.text += options.separator;
    if (static_cast<int>(i) == position) {
      mixed.positive_span = {static_cast<int>(mixed.text.size()),
                             static_cast<int>(mixed.text.size() + positive.size())};
    }
    mixed.text += *order[i];
  }
  mixed.caption_count = k + 1;
  return mixed;
}

}  // namespace glip
