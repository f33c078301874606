#include <cstdio>
#include <fstream>

#include "doctest.h"
#include "glip/checkpoint.hpp"
#include "glip/shapes_world.hpp"
#include "glip/train.hpp"
#include "gradcheck.hpp"

using namespace glip;

namespace {

ShapesWorldSpec small_spec() {
  ShapesWorldSpec s = ShapesWorldSpec::standard();
  return s;
}

}  // namespace

TEST_SUITE("train") {

TEST_CASE("gradients of the losses and of X-MHA") {
  for (auto mode : {LossMode::FocalSigmoid, LossMode::SoftmaxCE})
    CHECK(gradcheck::grounding_loss_check<double>(mode, 1, 1e-6).worst < 1e-4);
  CHECK(gradcheck::localization_loss_check<double>(2, 1e-6).worst < 1e-4);
  const auto x = gradcheck::xmha_check<double>(3, 1e-6);
  INFO("worst input: " << x.worst_name);
  CHECK(x.worst < 1e-4);
}

TEST_CASE("gradient of the full objective") {
  for (auto mode : {LossMode::FocalSigmoid, LossMode::SoftmaxCE}) {
    const auto r = gradcheck::full_objective_check<double>(mode, 4, 1e-6);
    INFO("worst array: " << r.worst_name);
    CHECK(r.worst < 1e-4);
  }
}

TEST_CASE("learning rate schedule") {
  TrainConfig c;
  c.steps = 100;
  c.lr = 1.0;
  CHECK(learning_rate(c, 0) == 1.0);
  CHECK(learning_rate(c, 66) == 1.0);
  CHECK(learning_rate(c, 67) == doctest::Approx(0.1));
  CHECK(learning_rate(c, 89) == doctest::Approx(0.01));
  c.warmup_steps = 10;
  CHECK(learning_rate(c, 0) == doctest::Approx(0.1));
  CHECK(is_language_parameter("language.embed"));
  CHECK_FALSE(is_language_parameter("fusion0.text.ln1.g"));
}

TEST_CASE("anchored weight decay shrinks the offset, not the value") {
  for (const char* kind : {"adamw", "sgd"}) {
    OptimizerConfig oc;
    oc.kind = kind;
    oc.weight_decay = 0.5;
    Optimizer<double> opt(oc);
    ParameterSet<double> params, grads;
    params["a"] = ad::Matrix<double>::Constant(1, 1, 2.0);
    params["b"] = ad::Matrix<double>::Constant(1, 1, 2.0);
    grads["a"] = grads["b"] = ad::Matrix<double>::Zero(1, 1);
    opt.decay_toward("a", ad::Matrix<double>::Constant(1, 1, 1.0));
    opt.step(params, grads, [](const std::string&) { return 0.1; });
    CAPTURE(kind);
    CHECK(params["a"](0, 0) == doctest::Approx(1.95));  // 2 - 0.1 * 0.5 * (2 - 1)
    CHECK(params["b"](0, 0) == doctest::Approx(1.9));   // 2 - 0.1 * 0.5 * 2
  }
}

TEST_CASE("config validation names every bad field") {
  TrainConfig c;
  c.lr = -1;
  c.batch_size = 0;
  c.optimizer.kind = "lbfgs";
  try {
    c.validate();
    FAIL("expected ConfigError");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::ConfigError);
    const std::string m = e.what();
    CHECK(m.find("lr") != std::string::npos);
    CHECK(m.find("batch_size") != std::string::npos);
    CHECK(m.find("optimizer.kind") != std::string::npos);
  }
  nlohmann::json j = shapes_world_recipe();
  CHECK(j.get<TrainConfig>().optimizer.kind == "adamw");
  CHECK_THROWS_AS((nlohmann::json{{"stepz", 3}}.get<TrainConfig>()), Error);
}

TEST_CASE("training overfits one record with the default optimizer") {
  const auto spec = small_spec();
  const auto w = generate_shapes_world(spec, 1, 4);
  const Dataset one = {w.train[0]};
  GroundingModel<float> m(ModelConfig{}, 0);
  TrainConfig c;
  c.steps = 200;
  c.batch_size = 1;
  const auto r = train(m, one, c);
  REQUIRE(r.steps.size() == 200);
  CHECK(r.steps.back().total < r.steps.front().total);
  for (const auto& s : r.steps) CHECK(s.total == doctest::Approx(s.cls + s.loc));
}

TEST_CASE("training is deterministic and logs each step") {
  const auto w = generate_shapes_world(small_spec(), 2, 16);
  TrainConfig c = shapes_world_recipe();
  c.steps = 12;
  c.loss_log = "test_train_loss.jsonl";
  std::remove(c.loss_log.c_str());
  GroundingModel<float> a(ModelConfig{}, 5), b(ModelConfig{}, 5);
  const auto ra = train(a, w.train, c);
  c.loss_log.clear();
  const auto rb = train(b, w.train, c);
  for (int i = 0; i < 12; ++i) CHECK(ra.steps[i].total == rb.steps[i].total);
  CHECK(parameter_hash(a.parameters()) == parameter_hash(b.parameters()));

  std::ifstream log("test_train_loss.jsonl");
  std::string line;
  int lines = 0;
  while (std::getline(log, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.contains("cls"));
    CHECK(j.contains("loc"));
    CHECK(j.contains("lr"));
    CHECK(j.at("step") == lines);
    ++lines;
  }
  CHECK(lines == 12);
  std::remove("test_train_loss.jsonl");
}

TEST_CASE("zero steps leave the model untouched") {
  const auto w = generate_shapes_world(small_spec(), 2, 8);
  GroundingModel<float> m(ModelConfig{}, 5);
  const auto before = parameter_hash(m.parameters());
  TrainConfig c;
  c.steps = 0;
  train(m, w.train, c);
  CHECK(parameter_hash(m.parameters()) == before);
}

TEST_CASE("divergence is reported") {
  const auto w = generate_shapes_world(small_spec(), 2, 8);
  GroundingModel<float> m(ModelConfig{}, 5);
  TrainConfig c;
  c.steps = 50;
  c.lr = 1e6;
  c.grad_clip_norm = 0;
  c.decay_fractions.clear();
  try {
    train(m, w.train, c);
    FAIL("expected DivergenceDetected");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::DivergenceDetected);
  }
}

TEST_CASE("classifier head trains on detection records") {
  const auto spec = small_spec();
  const auto w = generate_shapes_world(spec, 3, 16);
  ModelConfig mc;
  mc.fusion_enabled = false;
  mc.classifier_classes = static_cast<int>(spec.train_classes().size());
  GroundingModel<float> m(mc, 1);
  TrainConfig c = shapes_world_recipe();
  c.steps = 5;
  c.vocabulary = spec.train_classes();
  CHECK(train(m, w.train, c).steps.size() == 5);
  c.vocabulary.pop_back();
  CHECK_THROWS_AS(train(m, w.train, c), Error);
}

}
