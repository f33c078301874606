// Acceptance run: one PASS/FAIL line per criterion.
//
//   glip_acceptance [criterion ...]
//
// With no arguments every criterion runs. GLIP_ACCEPTANCE_CACHE names a
// directory where trained models are saved and reused between runs.
#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "glip/checkpoint.hpp"
#include "glip/evaluation.hpp"
#include "glip/self_training.hpp"
#include "glip/shapes_world.hpp"
#include "glip/transfer.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"

using namespace glip;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int digits = 4) {
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(digits);
  s << v;
  return s.str();
}

bool all_passed = true;

void verdict(int id, bool pass, const std::string& detail) {
  all_passed = all_passed && pass;
  std::cout << "criterion " << id << ": " << (pass ? "PASS" : "FAIL") << "  " << detail << std::endl;
}

void note(const std::string& line) { std::cout << "  " << line << std::endl; }

double median3(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

const ShapesWorldSpec& spec() {
  static const ShapesWorldSpec s = ShapesWorldSpec::standard();
  return s;
}

std::vector<int> label_indices(const std::vector<std::string>& all, const std::vector<std::string>& subset) {
  std::vector<int> out;
  for (int i = 0; i < static_cast<int>(all.size()); ++i)
    if (std::find(subset.begin(), subset.end(), all[static_cast<std::size_t>(i)]) != subset.end()) out.push_back(i);
  return out;
}

double held_out_ap50(const EvalResult& r) {
  return r.mean_ap50_over(label_indices(spec().all_classes(), spec().held_out_classes()));
}

// ---------------------------------------------------------------------------
// Trained models shared between criteria.

constexpr int kSeeds = 3;
constexpr int kWorldRecords = 2000;
constexpr int kSteps = 3000;

const ShapesWorldSplits& world(int seed) {
  static std::map<int, ShapesWorldSplits> cache;
  auto it = cache.find(seed);
  if (it == cache.end()) it = cache.emplace(seed, generate_shapes_world(spec(), 100 + seed, kWorldRecords)).first;
  return it->second;
}

std::string cache_path(const std::string& name) {
  const char* dir = std::getenv("GLIP_ACCEPTANCE_CACHE");
  if (!dir || !*dir) return {};
  fs::create_directories(dir);
  return (fs::path(dir) / (name + ".ckpt")).string();
}

GroundingModel<float> trained(const std::string& name, const ModelConfig& mc, const Dataset& data,
                              const TrainConfig& tc, std::uint64_t seed) {
  static std::map<std::string, GroundingModel<float>> memo;
  if (auto it = memo.find(name); it != memo.end()) return it->second;
  const std::string path = cache_path(name);
  if (!path.empty() && fs::exists(path)) return memo.emplace(name, load_checkpoint<float>(path).model).first->second;
  const auto t0 = Clock::now();
  GroundingModel<float> m(mc, seed);
  train(m, data, tc);
  note("trained " + name + " in " + fmt(seconds_since(t0), 1) + " s");
  if (!path.empty()) save_checkpoint(path, m);
  return memo.emplace(name, std::move(m)).first->second;
}

TrainConfig recipe(int seed) {
  TrainConfig tc = shapes_world_recipe();
  tc.steps = kSteps;
  tc.seed = static_cast<std::uint64_t>(seed);
  tc.vocabulary = spec().train_classes();
  return tc;
}

GroundingModel<float> base_model(bool fusion, int seed) {
  ModelConfig mc;
  mc.fusion_enabled = fusion;
  return trained(std::string(fusion ? "deep" : "late") + std::to_string(seed), mc, world(seed).train, recipe(seed),
                 static_cast<std::uint64_t>(seed));
}

template <typename To, typename From>
GroundingModel<To> cast_model(const GroundingModel<From>& m) {
  ParameterSet<To> params;
  for (const auto& [name, w] : m.parameters()) params[name] = w.template cast<To>();
  return GroundingModel<To>(m.config(), std::move(params), m.seed());
}

// ---------------------------------------------------------------------------

void criterion1() {
  const auto t0 = Clock::now();
  const auto& w = world(0);
  const std::vector<std::string> classes = spec().train_classes();
  Dataset detection;
  for (const auto& r : w.train)
    if (r.kind == RecordKind::Detection) detection.push_back(r);

  TrainConfig tc = shapes_world_recipe();
  tc.seed = 0;
  tc.vocabulary = classes;
  tc.fixed_prompt = true;
  ModelConfig cls_config;
  cls_config.fusion_enabled = false;
  cls_config.classifier_classes = static_cast<int>(classes.size());
  ModelConfig ground_config;
  ground_config.fusion_enabled = false;
  const auto classifier = trained("c1_classifier", cls_config, detection, tc, 0);
  const auto grounding = trained("c1_grounding", ground_config, detection, tc, 0);

  // exact equivalence with tied phrase embeddings, at float64
  const auto t1 = Clock::now();
  const auto donor = cast_model<double>(classifier);
  double worst = 0;
  int identical = 0, images = 0, total_dets = 0;
  for (const auto& r : w.test) {
    if (images == 100) break;
    ++images;
    const auto rep = detection_mode_check(donor, r.image, classes, PromptConfig{});
    worst = std::max(worst, rep.max_abs_difference);
    identical += rep.detections_identical && rep.mismatched_classes.empty();
    total_dets += static_cast<int>(rep.classifier_detections.size());
  }
  const double exact_seconds = seconds_since(t1);

  const EvalResult cls_eval = evaluate_detection(classifier, w.test, classes);
  const EvalResult ground_eval = evaluate_detection(grounding, w.test, classes);
  const double gap = 100 * (cls_eval.ap - ground_eval.ap);
  note("tied check: " + std::to_string(identical) + "/" + std::to_string(images) + " images identical, " +
       std::to_string(total_dets) + " detections, max |S_ground - S_cls| = " + fmt(worst, 1) + ", " +
       fmt(exact_seconds, 1) + " s");
  note("classifier head AP " + fmt(100 * cls_eval.ap, 2) + ", grounding head AP " + fmt(100 * ground_eval.ap, 2) +
       ", difference " + fmt(gap, 2) + " points");
  const bool pass = worst == 0.0 && identical == images && images == 100 && exact_seconds < 60 &&
                    std::abs(gap) <= 1.5;
  verdict(1, pass,
          "exact on " + std::to_string(identical) + "/100 images; AP gap " + fmt(gap, 2) + " points (limit 1.5); " +
              fmt(seconds_since(t0), 1) + " s");
}

void criterion2() {
  Rng rng(2024);
  const std::vector<std::string> words = {"red", "circle", "toothbrush", "a", "blue", "hairdrier", "x", "ring"};
  int trials = 0, equal = 0, max_n = 0, max_m = 0;
  while (trials < 1000) {
    std::vector<std::string> names;
    const int c = static_cast<int>(rng.uniform_int(1, 5));
    while (static_cast<int>(names.size()) < c) {
      std::string n = words[static_cast<std::size_t>(rng.uniform_int(0, 7))];
      if (rng.bernoulli(0.4)) n += " " + words[static_cast<std::size_t>(rng.uniform_int(0, 7))];
      if (std::find(names.begin(), names.end(), n) == names.end()) names.push_back(n);
    }
    const auto prompt = build_detection_prompt(names, {});
    if (prompt.size() > 16) continue;
    const int n = static_cast<int>(rng.uniform_int(1, 16));
    TargetMatrix tm;
    tm.targets = BinaryMatrix::Zero(n, c);
    tm.state.assign(static_cast<std::size_t>(n), AnchorState::Negative);
    tm.assigned_gt.assign(static_cast<std::size_t>(n), -1);
    for (int i = 0; i < n; ++i) {
      const auto p = rng.uniform_int(-1, c - 1);
      if (p >= 0) {
        tm.targets(i, p) = 1;
        tm.state[static_cast<std::size_t>(i)] = AnchorState::Positive;
      } else if (rng.bernoulli(0.2)) {
        tm.state[static_cast<std::size_t>(i)] = AnchorState::Ignored;
      }
    }
    const auto got = expand_targets(tm, prompt);
    const auto want = oracle::expand_targets(tm, prompt);
    equal += got.targets.rows() == want.rows() && got.targets.cols() == want.cols() && got.targets == want;
    max_n = std::max(max_n, n);
    max_m = std::max(max_m, prompt.size());
    ++trials;
  }
  verdict(2, equal == trials,
          std::to_string(equal) + "/" + std::to_string(trials) + " exact (N <= " + std::to_string(max_n) +
              ", M <= " + std::to_string(max_m) + ")");
}

template <typename S>
gradcheck::Report gradient_suite(S h, std::uint64_t seed) {
  gradcheck::Report all;
  for (auto mode : {LossMode::FocalSigmoid, LossMode::SoftmaxCE}) {
    const std::string tag = mode == LossMode::FocalSigmoid ? "focal" : "ce";
    const auto g = gradcheck::grounding_loss_check<S>(mode, seed, h);
    all.add("grounding_loss/" + tag + ": " + g.worst_name, g.worst);
    const auto f = gradcheck::full_objective_check<S>(mode, seed + 1, 1e-6);
    all.add("objective/" + tag + ": " + f.worst_name, f.worst);
  }
  const auto l = gradcheck::localization_loss_check<S>(seed + 2, h);
  all.add("localization_loss: " + l.worst_name, l.worst);
  const auto x = gradcheck::xmha_check<S>(seed + 3, h);
  all.add("xmha: " + x.worst_name, x.worst);
  return all;
}

void criterion3() {
  const auto t0 = Clock::now();
  const auto r64 = gradient_suite<double>(1e-6, 1);
  const auto r32 = gradient_suite<float>(1e-2f, 1);
  const double s = seconds_since(t0);
  note("float64 worst " + fmt(r64.worst, 8) + " (" + r64.worst_name + ")");
  note("float32 worst " + fmt(r32.worst, 6) + " (" + r32.worst_name + ")");
  verdict(3, r64.worst < 1e-4 && r32.worst < 1e-2 && s < 120,
          "float64 " + fmt(r64.worst, 8) + " < 1e-4, float32 " + fmt(r32.worst, 6) + " < 1e-2, " + fmt(s, 1) + " s");
}

// Held-out prompts with their colors rotated; labels stay with the
// original pairs, so a model that reads the color words should miss.
std::vector<std::string> shuffled_held_out_names() {
  const auto& pairs = spec().held_out_pairs;
  std::vector<std::string> out;
  for (std::size_t i = 0; i < pairs.size(); ++i)
    out.push_back(pairs[(i + 1) % pairs.size()].first + " " + pairs[i].second);
  return out;
}

void criterion4() {
  const auto t0 = Clock::now();
  bool pass = true;
  for (int seed = 0; seed < kSeeds; ++seed) {
    const auto& test = world(seed).test;
    const auto deep = base_model(true, seed);
    const auto late = base_model(false, seed);
    const double deep_ap50 = held_out_ap50(evaluate_detection(deep, test, spec().all_classes()));
    const double late_ap50 = held_out_ap50(evaluate_detection(late, test, spec().all_classes()));
    const double control =
        evaluate_detection(deep, test, shuffled_held_out_names(), {}, spec().held_out_classes()).ap50;
    const bool ok = deep_ap50 >= 0.3 && deep_ap50 > late_ap50 && deep_ap50 > control;
    pass = pass && ok;
    note("seed " + std::to_string(seed) + ": held-out AP50 deep " + fmt(deep_ap50) + ", fusion off " +
         fmt(late_ap50) + ", shuffled colors " + fmt(control) + (ok ? "" : "  <- fails"));
  }
  const double s = seconds_since(t0);
  verdict(4, pass && s < 1800, std::to_string(kSeeds) + " seeds, " + fmt(s / 60, 1) + " min (limit 30)");
}

void criterion5() {
  const auto t0 = Clock::now();
  const auto& w = world(0);
  const TransferTask task = make_task("held-out", spec().held_out_classes(), w.val, {}, w.test);
  std::map<std::string, std::vector<double>> ap;
  bool frozen = true;
  for (bool fusion : {true, false}) {
    const std::string tag = fusion ? "deep" : "late";
    const auto model = base_model(fusion, 0);
    for (std::uint64_t shot_seed = 0; shot_seed < 3; ++shot_seed) {
      const TransferTask t = sample_x_shot(task, 5, shot_seed);
      const auto pt = prompt_tune(model, t, prompt_tune_defaults());
      const auto lp = linear_probe(model, t, linear_probe_defaults());
      const auto ft = full_tune(model, t, full_tune_defaults());
      frozen = frozen && pt.result.frozen_unchanged() && lp.result.frozen_unchanged();
      ap[tag + "/pt"].push_back(100 * pt.result.eval.ap);
      ap[tag + "/lp"].push_back(100 * lp.result.eval.ap);
      ap[tag + "/ft"].push_back(100 * ft.result.eval.ap);
    }
  }
  auto mean = [&](const std::string& k) {
    double s = 0;
    for (double v : ap[k]) s += v;
    return s / static_cast<double>(ap[k].size());
  };
  for (const std::string tag : {"deep", "late"})
    note(tag + ": prompt-tune " + fmt(mean(tag + "/pt"), 2) + ", linear probe " + fmt(mean(tag + "/lp"), 2) +
         ", full tune " + fmt(mean(tag + "/ft"), 2) + " AP (mean of 3 five-shot draws)");
  const double deep_gap = mean("deep/ft") - mean("deep/pt");
  const double late_gap = mean("late/ft") - mean("late/pt");
  const bool gap_ok = deep_gap <= 5;
  const bool order_ok = late_gap > deep_gap;
  const bool lp_ok = mean("deep/lp") <= mean("deep/pt");
  note(std::string("full - prompt: deep ") + fmt(deep_gap, 2) + " (<= 5: " + (gap_ok ? "yes" : "no") +
       "), fusion off " + fmt(late_gap, 2) + " (larger: " + (order_ok ? "yes" : "no") + ")");
  note(std::string("deep linear probe <= prompt-tune: ") + (lp_ok ? "yes" : "no"));
  verdict(5, gap_ok && order_ok && lp_ok && frozen,
          std::string("deep gap ") + (gap_ok ? "ok" : "violated") + ", fusion-off gap larger " +
              (order_ok ? "ok" : "violated") + ", probe ordering " +
              (lp_ok ? "ok" : "violated") + ", frozen hashes " + (frozen ? "equal" : "changed") + ", " +
              fmt(seconds_since(t0), 1) + " s");
}

std::string records_bytes(const Dataset& data, const std::string& dir) {
  fs::remove_all(dir);
  write_records(dir, "pseudo.jsonl", data);
  std::ifstream f(fs::path(dir) / "pseudo.jsonl", std::ios::binary);
  std::ostringstream s;
  s << f.rdbuf();
  fs::remove_all(dir);
  return s.str();
}

void criterion6() {
  const auto t0 = Clock::now();
  const Lexicon lexicon = Lexicon::for_shapes_world(spec());
  std::vector<double> margins;
  bool idempotent = true;
  for (int seed = 0; seed < kSeeds; ++seed) {
    const auto& w = world(seed);
    const auto teacher = base_model(true, seed);
    const Dataset raw = generate_captioned_images(spec(), 300 + static_cast<std::uint64_t>(seed), kWorldRecords);
    const Dataset pseudo = generate_pseudo_labels(teacher, raw, lexicon);
    const Dataset again = generate_pseudo_labels(teacher, raw, lexicon);
    const fs::path tmp = fs::temp_directory_path() / ("glip_acceptance_pseudo_" + std::to_string(seed));
    idempotent = idempotent && records_bytes(pseudo, (tmp / "a").string()) == records_bytes(again, (tmp / "b").string());

    const StudentCorpus corpus = assemble_student_corpus(w.train, pseudo, {1, 1});
    ModelConfig mc;
    const auto student = trained("student" + std::to_string(seed), mc, corpus.records, recipe(seed),
                                 static_cast<std::uint64_t>(seed));
    const double teacher_ap50 = held_out_ap50(evaluate_detection(teacher, w.test, spec().all_classes()));
    const double student_ap50 = held_out_ap50(evaluate_detection(student, w.test, spec().all_classes()));
    margins.push_back(student_ap50 - teacher_ap50);
    note("seed " + std::to_string(seed) + ": " + std::to_string(pseudo.size()) + " pseudo records, held-out AP50 teacher " +
         fmt(teacher_ap50) + ", student " + fmt(student_ap50) + ", margin " + fmt(margins.back()));
  }
  const double med = median3(margins);
  verdict(6, med > 0 && idempotent,
          "median margin " + fmt(med) + ", pseudo labels " + (idempotent ? "byte-identical" : "differ") +
              " across generations, " + fmt(seconds_since(t0), 1) + " s");
}

void criterion7() {
  Rng rng(7);
  auto random_box = [&] {
    const double x = rng.uniform(0, 12), y = rng.uniform(0, 12);
    return Box{x, y, x + rng.uniform(4, 10), y + rng.uniform(4, 10)};
  };
  const auto thresholds = coco_iou_thresholds();
  int matched = 0;
  double worst = 0;
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<GroundTruthBox> gt;
    std::vector<ScoredBox> dets;
    const int ng = static_cast<int>(rng.uniform_int(1, 5));
    const int nd = static_cast<int>(rng.uniform_int(0, 5));
    for (int i = 0; i < ng; ++i)
      gt.push_back({rng.bernoulli(0.5) ? "a" : "b", static_cast<int>(rng.uniform_int(0, 1)), random_box()});
    for (int i = 0; i < nd; ++i)
      dets.push_back({rng.bernoulli(0.5) ? "a" : "b", static_cast<int>(rng.uniform_int(0, 1)), random_box(),
                      static_cast<double>(rng.uniform_int(1, 4)) / 4});
    const double diff = std::abs(compute_ap(dets, gt).ap - oracle::mean_ap(dets, gt, thresholds));
    worst = std::max(worst, diff);
    matched += diff <= 1e-9;
  }
  int monotone = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<PhrasePrediction> preds;
    std::vector<std::vector<Box>> gold;
    const int phrases = static_cast<int>(rng.uniform_int(1, 4));
    for (int p = 0; p < phrases; ++p) {
      PhrasePrediction pred;
      const auto n = rng.uniform_int(0, 12);
      for (int k = 0; k < n; ++k) pred.ranked_boxes.push_back(random_box());
      preds.push_back(pred);
      std::vector<Box> g;
      const auto gn = rng.uniform_int(1, 2);
      for (int k = 0; k < gn; ++k) g.push_back(random_box());
      gold.push_back(g);
    }
    const auto r = compute_recall_at_k(preds, gold, {1, 2, 3, 5, 10});
    monotone += std::is_sorted(r.begin(), r.end());
  }
  verdict(7, matched == 500 && monotone == 1000,
          "AP oracle " + std::to_string(matched) + "/500 (worst " + fmt(worst, 12) + "), recall monotone " +
              std::to_string(monotone) + "/1000");
}

void criterion8() {
  const auto t0 = Clock::now();
  const auto& test = world(0).test;
  const auto classes = spec().all_classes();
  PromptConfig chunked;
  chunked.chunk_size = 5;
  PromptConfig whole;
  whole.chunk_size = static_cast<int>(classes.size());

  const auto late = base_model(false, 0);
  int identical = 0;
  for (const auto& r : test)
    identical += infer_chunked(late, r.image, classes, chunked).detections ==
                 infer_chunked(late, r.image, classes, whole).detections;

  const auto deep = base_model(true, 0);
  EvalOptions a, b;
  a.prompt = chunked;
  b.prompt = whole;
  const double ap_chunked = 100 * evaluate_detection(deep, test, classes, a).ap;
  const double ap_whole = 100 * evaluate_detection(deep, test, classes, b).ap;
  const double diff = ap_whole - ap_chunked;
  note("fusion off: " + std::to_string(identical) + "/" + std::to_string(test.size()) +
       " images with identical detections (" + std::to_string(chunk_ranges(static_cast<int>(classes.size()), 5).size()) +
       " chunks vs 1)");
  note("deep fusion: AP unchunked " + fmt(ap_whole, 2) + ", chunked " + fmt(ap_chunked, 2) + ", difference " +
       fmt(diff, 2) + " points");
  verdict(8, identical == static_cast<int>(test.size()) && std::abs(diff) <= 2,
          "late fusion identical on " + std::to_string(identical) + "/" + std::to_string(test.size()) +
              " images; deep fusion AP difference " + fmt(diff, 2) + " points (limit 2); " +
              fmt(seconds_since(t0), 1) + " s");
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));
  const std::vector<void (*)()> criteria = {criterion1, criterion2, criterion3, criterion4,
                                            criterion5, criterion6, criterion7, criterion8};
  const auto t0 = Clock::now();
  // quick criteria first, then the ones that train
  for (int id : {2, 3, 7, 1, 4, 8, 5, 6}) {
    if (!wanted.empty() && !wanted.count(id)) continue;
    try {
      criteria[static_cast<std::size_t>(id - 1)]();
    } catch (const std::exception& e) {
      verdict(id, false, std::string("threw: ") + e.what());
    }
  }
  std::cout << "total " << fmt(seconds_since(t0) / 60, 1) << " min" << std::endl;
  return all_passed ? 0 : 1;
}
