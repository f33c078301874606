#include <cmath>
#include <cstdio>
#include <fstream>

#include "doctest.h"
#include "glip/checkpoint.hpp"
#include "glip/inference.hpp"
#include "glip/model.hpp"
#include "glip/shapes_world.hpp"

using namespace glip;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.image_size = 16;
  c.grid = 4;
  c.d = 16;
  c.heads = 2;
  c.hidden = 16;
  return c;
}

Image noise_image(int size, std::uint64_t seed) {
  Image img(size, size);
  Rng rng(seed);
  for (float& v : img.data) v = static_cast<float>(rng.uniform());
  return img;
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("cross attention hand example") {
  ad::Tape<double> t;
  ParameterSet<double> w;
  for (const char* n : {"q_img", "q_txt", "v_img", "v_txt", "out_img", "out_txt"})
    w.emplace(std::string("x.") + n, ad::Matrix<double>::Identity(1, 1));
  Binding<double> p(w, t);
  ad::Matrix<double> o(2, 1), pm(2, 1);
  o << 1, 0;
  pm << 1, -1;
  const auto [o_ctx, p_ctx] =
      layers::cross_attention(t, t.constant(o), t.constant(pm), layers::cross_attention_weights(p, "x"), 1);
  CHECK(t.value(o_ctx)(0, 0) == doctest::Approx(std::tanh(1.0)).epsilon(1e-12));
  CHECK(t.value(o_ctx)(0, 0) == doctest::Approx(0.76159).epsilon(1e-5));
  CHECK(t.value(o_ctx)(1, 0) == doctest::Approx(0.0));
}

TEST_CASE("zero token features give zero image context") {
  ad::Tape<double> t;
  ParameterSet<double> w;
  Rng rng(5);
  for (const char* n : {"q_img", "q_txt", "v_img", "v_txt", "out_img", "out_txt"}) {
    ad::Matrix<double> m(4, 4);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
    w.emplace(std::string("x.") + n, m);
  }
  Binding<double> p(w, t);
  ad::Matrix<double> o = ad::Matrix<double>::Random(3, 4);
  const auto [o_ctx, p_ctx] = layers::cross_attention(t, t.constant(o), t.constant(ad::Matrix<double>::Zero(5, 4)),
                                                      layers::cross_attention_weights(p, "x"), 2);
  CHECK(t.value(o_ctx).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("anchors tile the image") {
  const ModelConfig c;
  const auto anchors = make_anchors(c);
  REQUIRE(anchors.size() == 64);
  double area = 0;
  for (const auto& a : anchors) {
    CHECK(a.x1 < a.x2);
    CHECK(a.y1 < a.y2);
    CHECK(a.x1 >= 0);
    CHECK(a.y2 <= c.image_size);
    area += a.area();
  }
  CHECK(area == c.image_size * c.image_size);
  for (std::size_t i = 0; i < anchors.size(); ++i)
    for (std::size_t j = i + 1; j < anchors.size(); ++j) CHECK(intersection_area(anchors[i], anchors[j]) == 0.0);
}

TEST_CASE("image encoder shape, zero input and receptive field") {
  const ModelConfig c;
  GroundingModel<double> m(c, 1);
  const auto f = m.encode_image(noise_image(64, 2));
  CHECK(f.rows() == 64);
  CHECK(f.cols() == c.d);

  // zero image with zero biases encodes to zero
  CHECK(m.encode_image(Image(64, 64)).cwiseAbs().maxCoeff() == 0.0);

  // the patch encoder sees one cell: changing cell (2, 5) moves only row 2*8+5
  Image a = noise_image(64, 3), b = a;
  for (int y = 16; y < 24; ++y)
    for (int x = 40; x < 48; ++x) b.at(y, x, 1) = 1.0f - b.at(y, x, 1);
  const auto fa = m.encode_image(a), fb = m.encode_image(b);
  for (int r = 0; r < 64; ++r) {
    const bool same = fa.row(r) == fb.row(r);
    CHECK(same == (r != 21));
  }
  CHECK_THROWS_AS(m.encode_image(Image(32, 32)), Error);
}

TEST_CASE("text encoder permutes rows with class order when positions are off") {
  ModelConfig c = small_config();
  c.positional_encoding = false;
  GroundingModel<double> m(c, 4);
  const PromptConfig pc;
  const auto ab = build_detection_prompt({"red circle", "blue square"}, pc);
  const auto ba = build_detection_prompt({"blue square", "red circle"}, pc);
  const auto fab = m.encode_text(ab), fba = m.encode_text(ba);
  for (int p = 0; p < 2; ++p) {
    const auto& src = ab.phrase_token_spans[p];
    const auto& dst = ba.phrase_token_spans[1 - p];
    REQUIRE(src.size() == dst.size());
    for (std::size_t k = 0; k < src.size(); ++k) CHECK(fab.row(src[k]) == fba.row(dst[k]));
  }
  CHECK(fab.row(ab.noobj_index) == fba.row(ba.noobj_index));
}

TEST_CASE("phrase scores permute with class order when positions are off") {
  ModelConfig c = small_config();
  c.positional_encoding = false;
  GroundingModel<double> m(c, 6);
  // non-zero fusion output projections so the prompt reaches the regions
  Rng rng(1);
  for (auto& [name, w] : m.parameters())
    if (name.find("xmha.out") != std::string::npos)
      for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = 0.2 * rng.normal();
  const PromptConfig pc;
  const auto ab = build_detection_prompt({"red circle", "blue square", "green cross"}, pc);
  const auto ca = build_detection_prompt({"green cross", "red circle", "blue square"}, pc);
  const Image img = noise_image(16, 9);
  const auto sab = phrase_scores(m.infer(img, ab).logits, ab, LossMode::FocalSigmoid);
  const auto sca = phrase_scores(m.infer(img, ca).logits, ca, LossMode::FocalSigmoid);
  const int perm[3] = {1, 2, 0};  // class p of ab sits at perm[p] in ca
  for (int p = 0; p < 3; ++p)
    for (int i = 0; i < sab.rows(); ++i) CHECK(sab(i, p) == doctest::Approx(sca(i, perm[p])).epsilon(1e-12));
}

TEST_CASE("encoders are deterministic") {
  GroundingModel<float> a(ModelConfig{}, 11), b(ModelConfig{}, 11);
  const auto p = build_detection_prompt({"red circle", "blue square"}, {});
  const Image img = noise_image(64, 1);
  CHECK(a.encode_text(p) == b.encode_text(p));
  const auto oa = a.infer(img, p), ob = b.infer(img, p);
  CHECK(oa.logits == ob.logits);
  CHECK(oa.deltas == ob.deltas);
}

TEST_CASE("late fusion region features ignore the prompt") {
  ModelConfig c = small_config();
  c.fusion_enabled = false;
  GroundingModel<double> m(c, 2);
  const Image img = noise_image(16, 4);
  const auto a = m.infer(img, build_detection_prompt({"red circle"}, {}));
  const auto b = m.infer(img, build_detection_prompt({"blue square", "green cross", "ring"}, {}));
  CHECK(a.regions == b.regions);
  CHECK(a.deltas == b.deltas);
  CHECK(m.parameters().count("fusion0.xmha.q_img") == 0);
}

TEST_CASE("deep fusion makes region features prompt dependent") {
  ModelConfig c = small_config();
  GroundingModel<double> m(c, 2);
  for (auto& [name, w] : m.parameters())
    if (name.find("xmha.out") != std::string::npos) w.setConstant(0.05);
  const Image img = noise_image(16, 4);
  const auto a = m.infer(img, build_detection_prompt({"red circle"}, {}));
  const auto b = m.infer(img, build_detection_prompt({"blue square"}, {}));
  CHECK(a.regions != b.regions);
}

TEST_CASE("fresh deep fusion model starts as its late fusion counterpart") {
  ModelConfig deep = small_config(), late = small_config();
  late.fusion_enabled = false;
  GroundingModel<double> a(deep, 3), b(late, 3);
  const Image img = noise_image(16, 8);
  const auto p = build_detection_prompt({"red circle", "blue square"}, {});
  CHECK(a.infer(img, p).logits == b.infer(img, p).logits);
}

TEST_CASE("alignment is a plain dot product") {
  ad::Matrix<double> o(2, 3), p(2, 3);
  o << 1, 2, 3, 1, 0, 0;
  p << 1, 2, 3, 0, 1, 0;
  const auto s = align<double>(o, p);
  CHECK(s(0, 0) == 14.0);
  CHECK(s(1, 1) == 0.0);
  CHECK_THROWS_AS(align<double>(o, ad::Matrix<double>(2, 4)), Error);
}

TEST_CASE("tied classifier weights reproduce classifier logits exactly") {
  ModelConfig c;
  c.fusion_enabled = false;
  c.classifier_classes = 4;
  GroundingModel<double> m(c, 7);
  Rng rng(2);
  for (auto& [name, w] : m.parameters())
    if (name.starts_with("box.")) for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = 0.1 * rng.normal();
  const std::vector<std::string> names = {"red circle", "blue square", "toothbrush", "ring"};
  const auto report = detection_mode_check(m, noise_image(64, 5), names, {}, {0.0, 0.6, 100});
  CHECK(report.max_abs_difference == 0.0);
  CHECK(report.mismatched_classes.empty());
  CHECK(report.detections_identical);
  CHECK_FALSE(report.classifier_detections.empty());

  // perturbing the tokens of one class shows up in that class only
  const auto prompt = build_detection_prompt(names, {});
  ad::Matrix<double> tokens = ad::Matrix<double>::Zero(prompt.size(), c.d);
  const auto& w = m.parameters().at("classifier.w");
  for (int p = 0; p < 4; ++p)
    for (int t : prompt.phrase_token_spans[p]) tokens.row(t) = w.row(p);
  tokens.row(prompt.phrase_token_spans[2][0]).array() += 0.01;
  const auto perturbed = detection_mode_check(m, noise_image(64, 5), names, {}, {}, &tokens);
  CHECK(perturbed.mismatched_classes == std::vector<int>{2});
}

TEST_CASE("box codec") {
  const Box anchor{8, 8, 16, 16};
  const Eigen::RowVector4d zero = Eigen::RowVector4d::Zero();
  CHECK(decode_box(zero, anchor) == anchor);
  Eigen::RowVector4d dw(0, 0, std::log(2.0), 0);
  CHECK(decode_box(dw, anchor).width() == doctest::Approx(16.0));
  Rng rng(4);
  for (int i = 0; i < 100; ++i) {
    const double x = rng.uniform(0, 50), y = rng.uniform(0, 50);
    const Box gt{x, y, x + rng.uniform(1, 14), y + rng.uniform(1, 14)};
    const Box back = decode_box(encode_box(gt, anchor), anchor);
    CHECK(std::abs(back.x1 - gt.x1) < 1e-6);
    CHECK(std::abs(back.y1 - gt.y1) < 1e-6);
    CHECK(std::abs(back.x2 - gt.x2) < 1e-6);
    CHECK(std::abs(back.y2 - gt.y2) < 1e-6);
  }
}

TEST_CASE("model config validation") {
  ModelConfig c;
  c.d = 30;
  c.heads = 4;
  CHECK_THROWS_AS(c.validate(), Error);
  c = ModelConfig{};
  c.fusion_layers = 0;
  CHECK_THROWS_AS(c.validate(), Error);
  nlohmann::json j = ModelConfig{};
  CHECK(j.get<ModelConfig>() == ModelConfig{});
}

TEST_CASE("checkpoint round trip is bit exact") {
  GroundingModel<float> m(ModelConfig{}, 21);
  const std::string path = "test_model_roundtrip.ckpt";
  save_checkpoint(path, m, {{"note", "x"}});
  const auto loaded = load_checkpoint<float>(path);
  CHECK(loaded.model.config() == m.config());
  CHECK(loaded.model.seed() == 21);
  CHECK(loaded.metadata.at("note") == "x");
  CHECK(parameter_hash(loaded.model.parameters()) == parameter_hash(m.parameters()));
  for (const auto& [name, w] : m.parameters()) CHECK(loaded.model.parameters().at(name) == w);
  CHECK(read_checkpoint_header(path).at("seed") == 21);

  const auto widened = load_checkpoint<double>(path);
  CHECK(widened.scalar == "float32");

  ParameterSet<float> arrays{{"prompt.embedding", ad::Matrix<float>::Random(3, 5)}};
  save_arrays("test_model_arrays.ckpt", arrays);
  CHECK(load_arrays<float>("test_model_arrays.ckpt").at("prompt.embedding") == arrays.at("prompt.embedding"));

  std::remove(path.c_str());
  std::remove("test_model_arrays.ckpt");
  try {
    load_checkpoint<float>("does-not-exist.ckpt");
    FAIL("expected IoError");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::IoError);
  }
  {
    std::ofstream bad("test_model_bad.ckpt");
    bad << "not a checkpoint";
  }
  try {
    load_checkpoint<float>("test_model_bad.ckpt");
    FAIL("expected FormatError");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::FormatError);
  }
  std::remove("test_model_bad.ckpt");
}

TEST_CASE("parameter hash sees single bit changes") {
  GroundingModel<float> m(ModelConfig{}, 1);
  const std::string before = parameter_hash(m.parameters());
  m.parameters().at("box.b")(0, 0) = std::nextafter(0.0f, 1.0f);
  CHECK(parameter_hash(m.parameters()) != before);
  const auto not_box = [](std::string_view n) { return !n.starts_with("box."); };
  GroundingModel<float> fresh(ModelConfig{}, 1);
  CHECK(parameter_hash(m.parameters(), not_box) == parameter_hash(fresh.parameters(), not_box));
}

}
