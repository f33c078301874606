#include <set>

#include "doctest.h"
#include "glip/prompt.hpp"

using namespace glip;

TEST_SUITE("prompt") {

TEST_CASE("detection prompt joins class names with a trailing separator") {
  const auto p = build_detection_prompt({"person", "bicycle"}, {});
  CHECK(p.text == "person. bicycle. ");
  REQUIRE(p.phrase_count() == 2);
  CHECK(p.phrases[0].text == "person");
  CHECK(p.phrases[1].text == "bicycle");
  CHECK(p.phrase_token_spans[0].back() < p.phrase_token_spans[1].front());
  CHECK(p.noobj_index == p.size() - 1);
  CHECK(p.tokens[p.noobj_index].text == kNoObjToken);
  CHECK(p.special_mask[p.noobj_index]);
}

TEST_CASE("single class prompt") {
  const auto p = build_detection_prompt({"a"}, {});
  REQUIRE(p.phrase_count() == 1);
  CHECK(p.phrase_token_spans[0].size() == 1);
  // content, separator, [NoObj]
  CHECK(p.size() == 3);
}

TEST_CASE("prompt longer than max_tokens is rejected") {
  std::vector<std::string> names;
  for (int i = 0; i < 300; ++i) names.push_back("c" + std::to_string(i));
  try {
    build_detection_prompt(names, {});
    FAIL("expected TooManyTokens");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::TooManyTokens);
  }
}

TEST_CASE("bad class lists are rejected") {
  CHECK_THROWS_AS(build_detection_prompt({}, {}), Error);
  CHECK_THROWS_AS(build_detection_prompt({"cat", "cat"}, {}), Error);
  CHECK_THROWS_AS(build_detection_prompt({"cat", ""}, {}), Error);
}

TEST_CASE("long words split into fixed-length pieces") {
  const auto toks = tokenize("toothbrush", {});
  REQUIRE(toks.size() == 2);
  CHECK(toks[0].text == "toothb");
  CHECK_FALSE(toks[0].continuation);
  CHECK(toks[1].continuation);
  CHECK(toks[0].span == CharSpan{0, 6});
  CHECK(toks[1].span == CharSpan{6, 10});

  const auto cat = tokenize("cat", {});
  REQUIRE(cat.size() == 1);
  CHECK(cat[0].span == CharSpan{0, 3});

  const auto rc = tokenize("red circle", {});
  REQUIRE(rc.size() == 2);
  CHECK(rc[0].span == CharSpan{0, 3});
  CHECK(rc[1].span == CharSpan{4, 10});
}

TEST_CASE("phrases detokenize to their surface text") {
  const auto p = build_detection_prompt({"toothbrush", "red circle", "hair drier"}, {});
  for (int i = 0; i < p.phrase_count(); ++i) CHECK(p.detokenize_phrase(i) == p.phrases[i].text);
  std::set<int> seen;
  for (const auto& span : p.phrase_token_spans) {
    CHECK_FALSE(span.empty());
    for (int t : span) {
      CHECK(seen.insert(t).second);
      CHECK_FALSE(p.special_mask[t]);
    }
  }
  CHECK(p.size() >= p.phrase_count());
}

TEST_CASE("grounding prompt over caption spans") {
  const std::string caption = "a red circle and a blue square";
  const auto p = build_prompt(caption, {{0, 12}, {17, 30}}, {});
  REQUIRE(p.phrase_count() == 2);
  CHECK(p.phrases[0].text == "a red circle");
  CHECK(p.phrases[1].text == "a blue square");
  const auto owner = p.token_owner();
  CHECK(owner[p.noobj_index] == -1);
}

TEST_CASE("vocabulary chunking") {
  CHECK(chunk_ranges(90, 40) == std::vector<std::pair<int, int>>{{0, 40}, {40, 80}, {80, 90}});
  CHECK(chunk_ranges(40, 40).size() == 1);
  CHECK(chunk_ranges(1000, 40).size() == 25);
  std::vector<std::string> names;
  for (int i = 0; i < 90; ++i) names.push_back("class" + std::to_string(i));
  PromptConfig cfg;
  const auto chunks = chunk_vocabulary(names, cfg);
  REQUIRE(chunks.size() == 3);
  std::vector<std::string> flat;
  for (const auto& c : chunks)
    for (const auto& ph : c.phrases) flat.push_back(ph.text);
  CHECK(flat == names);
}

TEST_CASE("category downsampling keeps positives under the cap") {
  std::vector<std::string> pos = {"A", "B", "C"}, neg;
  for (int i = 0; i < 200; ++i) neg.push_back("n" + std::to_string(i));
  bool saw_full = false;
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    Rng rng(seed);
    const auto out = downsample_categories(pos, neg, 85, rng);
    CHECK(out.size() <= 85);
    for (const auto& p : pos) CHECK(std::find(out.begin(), out.end(), p) != out.end());
    saw_full = saw_full || out.size() == 85;
  }
  CHECK(saw_full);

  Rng a(3), b(3);
  CHECK(downsample_categories(pos, neg, 85, a) == downsample_categories(pos, neg, 85, b));

  Rng c(1);
  auto only = downsample_categories(pos, {}, 85, c);
  std::sort(only.begin(), only.end());
  CHECK(only == pos);

  Rng d(1);
  CHECK_THROWS_AS(downsample_categories(pos, neg, 2, d), Error);
}

TEST_CASE("negative caption mixing locates the positive caption") {
  std::vector<std::string> pool;
  for (int i = 0; i < 30; ++i) pool.push_back("a green cross number " + std::to_string(i));
  const std::string positive = "a red circle and a blue square";
  std::set<int> counts;
  for (std::uint64_t seed = 0; seed < 60; ++seed) {
    Rng rng(seed);
    const auto m = mix_negative_captions(positive, pool, rng);
    CHECK(m.text.substr(m.positive_span.begin, m.positive_span.length()) == positive);
    CHECK(m.text.find(positive) == static_cast<std::size_t>(m.positive_span.begin));
    counts.insert(m.caption_count);
    if (m.caption_count == 1) CHECK(m.text == positive);
    const CharSpan blue = m.shift({17, 30});
    CHECK(m.text.substr(blue.begin, blue.length()) == "a blue square");
  }
  CHECK(counts.count(1));
  CHECK(counts.count(20));

  Rng rng(0);
  bool threw = false;
  for (int i = 0; i < 20 && !threw; ++i) {
    try {
      mix_negative_captions(positive, {"x"}, rng);
    } catch (const Error& e) {
      threw = e.code() == ErrorCode::PoolTooSmall;
    }
  }
  CHECK(threw);
}

TEST_CASE("prompt config validation lists fields") {
  PromptConfig c;
  c.chunk_size = 0;
  c.max_tokens = 2;
  try {
    c.validate();
    FAIL("expected ConfigError");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::ConfigError);
    const std::string msg = e.what();
    CHECK(msg.find("chunk_size") != std::string::npos);
    CHECK(msg.find("max_tokens") != std::string::npos);
  }
}

}
