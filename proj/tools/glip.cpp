// SPDX-License-Identifier: Apache-2.0
// Command-line front end: data generation, training, evaluation,
// pseudo-labelling, transfer experiments and the HTTP service.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "glip/checkpoint.hpp"
#include "glip/evaluation.hpp"
#include "glip/self_training.hpp"
#include "glip/service.hpp"
#include "glip/shapes_world.hpp"
#include "glip/train.hpp"
#include "glip/transfer.hpp"

#include "CLI11.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace glip;

namespace {

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot read " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::ConfigError, path + ": " + e.what());
  }
}

void write_json_file(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out << j.dump(2) << '\n';
}

// Top-level sections of a run config; anything else is rejected.
json load_config(const std::string& path, std::initializer_list<const char*> sections) {
  if (path.empty()) return json::object();
  json j = read_json_file(path);
  if (!j.is_object()) throw Error(ErrorCode::ConfigError, path + ": config must be a JSON object");
  std::string unknown;
  for (const auto& [k, v] : j.items()) {
    bool ok = false;
    for (const char* s : sections) ok = ok || k == s;
    if (!ok) unknown += " " + k;
  }
  if (!unknown.empty()) throw Error(ErrorCode::ConfigError, path + ": unknown sections:" + unknown);
  return j;
}

ShapesWorldSpec corpus_spec(const std::string& data_dir) {
  const json m = read_json_file((fs::path(data_dir) / "manifest.json").string());
  if (m.contains("extra") && m["extra"].contains("spec")) return m["extra"]["spec"].get<ShapesWorldSpec>();
  return ShapesWorldSpec::standard();
}

Dataset load_split(const std::string& data_dir, const std::string& split) {
  const auto splits = read_manifest(data_dir);
  auto it = splits.find(split);
  if (it == splits.end()) throw Error(ErrorCode::InvalidArgument, "no split '" + split + "' in " + data_dir);
  return read_records(data_dir, it->second.file);
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

// "all", "train", "held-out" or a comma-separated class list.
std::vector<std::string> resolve_classes(const std::string& which, const ShapesWorldSpec& spec) {
  if (which == "all") return spec.all_classes();
  if (which == "train") return spec.train_classes();
  if (which == "held-out") return spec.held_out_classes();
  return split_list(which);
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << 100.0 * v;
  return os.str();
}

// ---------------------------------------------------------------- commands

struct GenerateArgs {
  std::string out, config;
  int count = 2000;
  int raw_count = 1000;
  std::uint64_t seed = 0;
};

void cmd_generate(const GenerateArgs& a) {
  const json cfg = load_config(a.config, {"spec"});
  const ShapesWorldSpec spec = cfg.contains("spec") ? cfg["spec"].get<ShapesWorldSpec>() : ShapesWorldSpec::standard();
  spec.validate();
  const auto splits = generate_shapes_world(spec, a.seed, a.count);
  const Dataset raw = generate_captioned_images(spec, a.seed, a.raw_count);
  std::map<std::string, SplitSummary> summary;
  for (const auto& [name, data] : {std::pair<std::string, const Dataset*>{"train", &splits.train},
                                   {"val", &splits.val},
                                   {"test", &splits.test},
                                   {"raw", &raw}}) {
    write_records(a.out, name + ".jsonl", *data);
    summary[name] = summarize(name + ".jsonl", *data);
  }
  write_manifest(a.out, summary, {{"spec", spec}, {"seed", a.seed}, {"count", a.count}});
  std::cout << json{{"out", a.out}, {"train", splits.train.size()}, {"val", splits.val.size()},
                    {"test", splits.test.size()}, {"raw", raw.size()}}
                   .dump()
            << "\n";
}

struct TrainArgs {
  std::string data, out, config, split = "train";
  std::optional<int> steps;
  std::optional<std::uint64_t> seed;
  std::optional<double> lr;
  std::optional<bool> fusion;
  std::optional<std::string> loss_mode;
};

void cmd_train(const TrainArgs& a) {
  const json cfg = load_config(a.config, {"model", "train"});
  ModelConfig mc = cfg.contains("model") ? cfg["model"].get<ModelConfig>() : ModelConfig{};
  TrainConfig tc = cfg.contains("train") ? cfg["train"].get<TrainConfig>() : TrainConfig{};
  if (a.steps) tc.steps = *a.steps;
  if (a.seed) tc.seed = *a.seed;
  if (a.lr) tc.lr = *a.lr;
  if (a.fusion) mc.fusion_enabled = *a.fusion;
  if (a.loss_mode) mc.loss_mode = loss_mode_from_string(*a.loss_mode);
  mc.validate();
  tc.validate();
  const Dataset data = load_split(a.data, a.split);
  if (tc.vocabulary.empty()) tc.vocabulary = collect_vocabulary(data);
  fs::create_directories(a.out);
  tc.loss_log = (fs::path(a.out) / "loss.jsonl").string();
  std::ofstream(tc.loss_log, std::ios::trunc);
  GroundingModel<float> model(mc, tc.seed);
  const TrainResult r = train(model, data, tc);
  const json resolved = {{"model", mc}, {"train", tc}};
  write_json_file(fs::path(a.out) / "config.json", resolved);
  const std::string ckpt = (fs::path(a.out) / "model.ckpt").string();
  save_checkpoint(ckpt, model, {{"data", a.data}, {"split", a.split}, {"train", tc}});
  std::cout << json{{"checkpoint", ckpt},
                    {"steps", tc.steps},
                    {"final_loss", r.steps.empty() ? json(nullptr) : json(r.steps.back().total)},
                    {"parameter_hash", parameter_hash(model.parameters())}}
                   .dump()
            << "\n";
}

struct EvalArgs {
  std::string checkpoint, data, out, split = "test", classes = "all";
  int chunk_size = 40;
  bool grounding = true;
};

void cmd_eval(const EvalArgs& a) {
  const auto loaded = load_checkpoint<float>(a.checkpoint);
  const ShapesWorldSpec spec = corpus_spec(a.data);
  const auto classes = resolve_classes(a.classes, spec);
  const Dataset data = load_split(a.data, a.split);
  EvalOptions options;
  options.prompt.chunk_size = a.chunk_size;
  options.prompt.validate();
  const EvalResult det = evaluate_detection(loaded.model, data, classes, options);
  std::vector<double> recall = {0, 0, 0};
  if (a.grounding && loaded.model.config().classifier_classes == 0) recall = evaluate_grounding(loaded.model, data, options);
  fs::create_directories(a.out);
  const fs::path csv = fs::path(a.out) / "eval.csv";
  std::ofstream f(csv);
  if (!f) throw Error(ErrorCode::IoError, "cannot write " + csv.string());
  f << "scope,AP,AP50,R@1,R@5,R@10\n";
  f << "all," << fmt(det.ap) << ',' << fmt(det.ap50) << ',' << fmt(recall[0]) << ',' << fmt(recall[1]) << ','
    << fmt(recall[2]) << '\n';
  for (std::size_t k = 0; k < det.classes.size(); ++k)
    f << classes[static_cast<std::size_t>(det.classes[k])] << ',' << fmt(det.per_class_ap[k]) << ','
      << fmt(det.per_class_ap50[k]) << ",,,\n";
  std::cout << json{{"csv", csv.string()}, {"AP", det.ap}, {"AP50", det.ap50}, {"R@1", recall[0]},
                    {"R@5", recall[1]}, {"R@10", recall[2]}}
                   .dump()
            << "\n";
}

struct PseudoArgs {
  std::string teacher, data, out, split = "raw", gold_split;
  double threshold = 0.5;
  std::string ratio = "1:1";
};

void cmd_pseudo(const PseudoArgs& a) {
  const ShapesWorldSpec spec = corpus_spec(a.data);
  PseudoLabelConfig pc;
  pc.threshold = a.threshold;
  const Dataset raw = load_split(a.data, a.split);
  const Dataset pseudo = generate_pseudo_labels(a.teacher, raw, Lexicon::for_shapes_world(spec), pc);
  std::map<std::string, SplitSummary> summary;
  write_records(a.out, "pseudo.jsonl", pseudo);
  summary["pseudo"] = summarize("pseudo.jsonl", pseudo);
  json report = {{"input", raw.size()}, {"pseudo_records", pseudo.size()}, {"threshold", a.threshold}};
  if (!a.gold_split.empty()) {
    const auto parts = split_list(std::string(a.ratio).replace(a.ratio.find(':'), 1, ","));
    if (parts.size() != 2) throw Error(ErrorCode::ConfigError, "ratio must look like 1:1");
    const MixingRatio ratio{std::stod(parts[0]), std::stod(parts[1])};
    const StudentCorpus corpus = assemble_student_corpus(load_split(a.data, a.gold_split), pseudo, ratio);
    write_records(a.out, "student.jsonl", corpus.records);
    summary["student"] = summarize("student.jsonl", corpus.records);
    json dups = json::array();
    for (const auto& d : corpus.duplicates) dups.push_back({{"image_id", d.image_id}, {"gold", d.gold}, {"pseudo", d.pseudo}});
    write_json_file(fs::path(a.out) / "dedup_report.json", dups);
    report["student_records"] = corpus.records.size();
    report["duplicate_image_ids"] = corpus.duplicates.size();
  }
  write_manifest(a.out, summary, {{"spec", spec}, {"teacher", a.teacher}, {"threshold", a.threshold}});
  std::cout << report.dump() << "\n";
}

struct TransferArgs {
  std::string regime, checkpoint, data, out, config, classes = "held-out";
  std::string train_split = "val", test_split = "test";
  int shots = 5;
  int seeds = 3;
  std::uint64_t first_seed = 0;
  std::optional<int> steps;
  std::vector<std::string> rewrites;
};

void cmd_transfer(const TransferArgs& a) {
  const json cfg = load_config(a.config, {"train"});
  const auto loaded = load_checkpoint<float>(a.checkpoint);
  const ShapesWorldSpec spec = corpus_spec(a.data);
  TransferTask base = make_task(a.regime == "manual-prompt" ? "manual-prompt" : "shapes-world",
                                resolve_classes(a.classes, spec), load_split(a.data, a.train_split), {},
                                load_split(a.data, a.test_split));
  if (a.regime == "manual-prompt") {
    std::map<std::string, std::string> rw;
    for (const auto& r : a.rewrites) {
      const auto eq = r.find('=');
      if (eq == std::string::npos) throw Error(ErrorCode::ConfigError, "rewrite must be class=description: " + r);
      rw[r.substr(0, eq)] = r.substr(eq + 1);
    }
    base = manual_prompt_override(base, rw);
  }
  std::vector<TransferRow> rows;
  for (int s = 0; s < a.seeds; ++s) {
    const std::uint64_t seed = a.first_seed + static_cast<std::uint64_t>(s);
    TransferTask task = a.shots > 0 ? sample_x_shot(base, a.shots, seed) : base;
    RegimeResult r;
    if (a.regime == "zero-shot" || a.regime == "manual-prompt") {
      task.train.clear();  // zero-shot reads no task training data
      r = zero_shot(loaded.model, task);
      r.regime = a.regime;
    } else {
      TrainConfig tc = a.regime == "prompt-tune"    ? prompt_tune_defaults()
                       : a.regime == "linear-probe" ? linear_probe_defaults()
                                                    : full_tune_defaults();
      if (cfg.contains("train")) {
        json merged = tc;
        merged.merge_patch(cfg["train"]);
        tc = merged.get<TrainConfig>();
      }
      if (a.steps) tc.steps = *a.steps;
      tc.seed = seed;
      if (a.regime == "prompt-tune") {
        r = prompt_tune(loaded.model, task, tc).result;
      } else if (a.regime == "linear-probe") {
        r = linear_probe(loaded.model, task, tc).result;
      } else {
        r = full_tune(loaded.model, task, tc).result;
      }
      if (!r.frozen_unchanged()) throw Error(ErrorCode::InvalidArgument, "frozen parameters changed");
    }
    rows.push_back(make_row(task, r, seed));
    std::cerr << a.regime << " seed " << seed << ": AP " << fmt(r.eval.ap) << " AP50 " << fmt(r.eval.ap50) << "\n";
  }
  const auto summary = summary_rows(rows);
  rows.insert(rows.end(), summary.begin(), summary.end());
  fs::create_directories(a.out);
  const std::string csv = (fs::path(a.out) / "results.csv").string();
  write_results_csv(csv, rows);
  std::cout << json{{"csv", csv}, {"mean_AP", summary[0].ap}, {"std_AP", summary[1].ap}}.dump() << "\n";
}

struct ServeArgs {
  std::string config, checkpoint, host;
  std::optional<int> port;
};

void cmd_serve(const ServeArgs& a) {
  ServiceConfig sc;
  if (!a.config.empty()) sc = read_json_file(a.config).get<ServiceConfig>();
  if (!a.checkpoint.empty()) sc.checkpoint = a.checkpoint;
  if (!a.host.empty()) sc.host = a.host;
  if (a.port) sc.port = *a.port;
  apply_env_overrides(sc);
  auto service = Service::from_checkpoint(sc);
  run_server(*service);
}

int fail(std::string_view code, const std::string& message) {
  std::cerr << json{{"error", {{"code", code}, {"message", message}}}}.dump() << "\n";
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"grounded language-image pre-training on a synthetic shapes corpus"};
  app.require_subcommand(1);

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate-data", "render a shapes-world corpus");
  g->add_option("--out", gen.out, "output directory")->required();
  g->add_option("--config", gen.config, "JSON file with a \"spec\" section");
  g->add_option("--count", gen.count, "train records (val/test get a quarter each)");
  g->add_option("--raw-count", gen.raw_count, "unannotated captioned images");
  g->add_option("--seed", gen.seed);

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "train a model from scratch");
  t->add_option("--data", tr.data, "corpus directory")->required();
  t->add_option("--out", tr.out, "output directory")->required();
  t->add_option("--config", tr.config, "JSON file with \"model\" and \"train\" sections");
  t->add_option("--split", tr.split);
  t->add_option("--steps", tr.steps);
  t->add_option("--seed", tr.seed);
  t->add_option("--lr", tr.lr);
  t->add_flag("--fusion,!--no-fusion", tr.fusion, "deep fusion on or off");
  t->add_option("--loss-mode", tr.loss_mode, "focal_sigmoid or softmax_ce");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "box AP and grounding recall");
  e->add_option("--checkpoint", ev.checkpoint)->required();
  e->add_option("--data", ev.data)->required();
  e->add_option("--out", ev.out)->required();
  e->add_option("--split", ev.split);
  e->add_option("--classes", ev.classes, "all, train, held-out or a comma-separated list");
  e->add_option("--chunk-size", ev.chunk_size, "classes per prompt");
  e->add_flag("--grounding,!--no-grounding", ev.grounding, "also compute Recall@k");

  PseudoArgs ps;
  auto* p = app.add_subcommand("pseudo-label", "label captioned images with a teacher");
  p->add_option("--teacher", ps.teacher)->required();
  p->add_option("--data", ps.data)->required();
  p->add_option("--out", ps.out)->required();
  p->add_option("--split", ps.split);
  p->add_option("--threshold", ps.threshold);
  p->add_option("--gold-split", ps.gold_split, "also assemble a student corpus with this gold split");
  p->add_option("--ratio", ps.ratio, "gold:pseudo mixing ratio");

  TransferArgs tf;
  auto* x = app.add_subcommand("transfer", "adapt a checkpoint to a task");
  x->require_subcommand(1);
  for (const char* regime : {"zero-shot", "prompt-tune", "linear-probe", "full-tune", "manual-prompt"}) {
    auto* sub = x->add_subcommand(regime);
    sub->add_option("--checkpoint", tf.checkpoint)->required();
    sub->add_option("--data", tf.data)->required();
    sub->add_option("--out", tf.out)->required();
    sub->add_option("--config", tf.config, "JSON file with a \"train\" section");
    sub->add_option("--classes", tf.classes, "task classes: all, train, held-out or a list");
    sub->add_option("--train-split", tf.train_split);
    sub->add_option("--test-split", tf.test_split);
    sub->add_option("--shots", tf.shots, "instances per class; 0 uses the whole split");
    sub->add_option("--seeds", tf.seeds);
    sub->add_option("--first-seed", tf.first_seed);
    sub->add_option("--steps", tf.steps);
    if (std::string_view(regime) == "manual-prompt")
      sub->add_option("--rewrite", tf.rewrites, "class=description")->required();
    sub->callback([&tf, regime] { tf.regime = regime; });
  }

  ServeArgs sv;
  auto* s = app.add_subcommand("serve", "HTTP inference service");
  s->add_option("--config", sv.config, "service config JSON");
  s->add_option("--checkpoint", sv.checkpoint);
  s->add_option("--host", sv.host);
  s->add_option("--port", sv.port);

  CLI11_PARSE(app, argc, argv);
  try {
    if (g->parsed()) cmd_generate(gen);
    if (t->parsed()) cmd_train(tr);
    if (e->parsed()) cmd_eval(ev);
    if (p->parsed()) cmd_pseudo(ps);
    if (x->parsed()) cmd_transfer(tf);
    if (s->parsed()) cmd_serve(sv);
  } catch (const Error& err) {
    return fail(to_string(err.code()), err.what());
  } catch (const std::exception& err) {
    return fail("InternalError", err.what());
  }
  return 0;
}
