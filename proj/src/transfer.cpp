// SPDX-License-Identifier: Apache-2.0
#include "glip/transfer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>
#include <tuple>

namespace glip {

TransferTask make_task(std::string name, std::vector<std::string> class_names, Dataset train,
                       Dataset val, Dataset test) {
  if (class_names.empty()) throw Error(ErrorCode::InvalidArgument, "task has no classes");
  TransferTask t;
  t.name = std::move(name);
  t.prompt_names = class_names;
  t.class_names = std::move(class_names);
  t.train = std::move(train);
  t.val = std::move(val);
  t.test = std::move(test);
  return t;
}

TransferTask manual_prompt_override(const TransferTask& task,
                                    const std::map<std::string, std::string>& rewrites) {
  TransferTask out = task;
  for (const auto& [cls, text] : rewrites) {
    auto it = std::find(task.class_names.begin(), task.class_names.end(), cls);
    if (it == task.class_names.end()) throw Error(ErrorCode::UnknownClass, "not a task class: " + cls);
    if (text.find_first_not_of(" \t\n") == std::string::npos)
      throw Error(ErrorCode::InvalidArgument, "empty rewrite for class " + cls);
    out.prompt_names[static_cast<std::size_t>(it - task.class_names.begin())] = text;
  }
  std::set<std::string> seen;
  for (const auto& p : out.prompt_names)
    if (!seen.insert(p).second) throw Error(ErrorCode::InvalidArgument, "duplicate prompt phrase: " + p);
  return out;
}

std::vector<int> instances_per_class(const Dataset& data, const std::vector<std::string>& class_names) {
  std::vector<int> counts(class_names.size(), 0);
  for (const auto& r : data)
    for (std::size_t i = 0; i < r.annotations.size(); ++i) {
      const int c = phrase_class(r.phrase_text(i), class_names);
      if (c >= 0) counts[static_cast<std::size_t>(c)] += static_cast<int>(r.annotations[i].boxes.size());
    }
  return counts;
}

TransferTask sample_x_shot(const TransferTask& task, int shots, std::uint64_t seed) {
  if (shots < 1) throw Error(ErrorCode::InvalidArgument, "shots must be >= 1");
  const auto available = instances_per_class(task.train, task.class_names);
  for (std::size_t c = 0; c < available.size(); ++c)
    if (available[c] < shots)
      throw Error(ErrorCode::InsufficientData, "class " + task.class_names[c] + " has " +
                                                   std::to_string(available[c]) + " training instances, " +
                                                   std::to_string(shots) + " requested");
  std::vector<std::size_t> order(task.train.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, 0x5407));
  rng.shuffle(order);

  std::vector<int> have(task.class_names.size(), 0);
  auto satisfied = [&] {
    return std::all_of(have.begin(), have.end(), [&](int h) { return h >= shots; });
  };
  std::vector<std::size_t> picked;
  for (std::size_t idx : order) {
    if (satisfied()) break;
    const auto counts = instances_per_class(Dataset{task.train[idx]}, task.class_names);
    bool useful = false;
    for (std::size_t c = 0; c < counts.size(); ++c)
      if (counts[c] > 0 && have[c] < shots) useful = true;
    if (!useful) continue;
    for (std::size_t c = 0; c < counts.size(); ++c) have[c] += counts[c];
    picked.push_back(idx);
  }
  std::sort(picked.begin(), picked.end());
  TransferTask out = task;
  out.shots = shots;
  out.train.clear();
  for (std::size_t idx : picked) out.train.push_back(task.train[idx]);
  return out;
}

Dataset detection_records(const Dataset& data, const std::vector<std::string>& class_names,
                          const std::vector<std::string>& prompt_names) {
  Dataset out;
  out.reserve(data.size());
  for (const auto& r : data) {
    std::vector<std::vector<Box>> boxes(class_names.size());
    for (std::size_t i = 0; i < r.annotations.size(); ++i) {
      const int c = phrase_class(r.phrase_text(i), class_names);
      if (c < 0) continue;
      auto& dst = boxes[static_cast<std::size_t>(c)];
      dst.insert(dst.end(), r.annotations[i].boxes.begin(), r.annotations[i].boxes.end());
    }
    GroundedRecord d;
    d.image_id = r.image_id;
    d.image_path = r.image_path;
    d.image = r.image;
    d.provenance = r.provenance;
    d.kind = RecordKind::Detection;
    for (std::size_t c = 0; c < class_names.size(); ++c) {
      if (boxes[c].empty()) continue;
      Annotation a;
      a.span = {static_cast<int>(d.caption.size()), static_cast<int>(d.caption.size() + prompt_names[c].size())};
      a.boxes = boxes[c];
      d.caption += prompt_names[c] + ". ";
      d.annotations.push_back(std::move(a));
    }
    out.push_back(std::move(d));
  }
  return out;
}

namespace {

TrainConfig regime_defaults(double lr, double weight_decay) {
  TrainConfig c;
  c.optimizer.kind = "adamw";
  c.lr = lr;
  c.optimizer.weight_decay = weight_decay;
  c.batch_size = 4;
  c.steps = 200;
  c.grad_clip_norm = 0;
  return c;
}

std::string percent(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << 100.0 * v;
  return os.str();
}

}  // namespace

TrainConfig prompt_tune_defaults() { return regime_defaults(0.05, 0.25); }
TrainConfig linear_probe_defaults() { return regime_defaults(1e-4, 0.05); }
TrainConfig full_tune_defaults() { return regime_defaults(1e-5, 0.05); }

TrainConfig task_config(const TrainConfig& base, const TransferTask& task) {
  TrainConfig c = base;
  c.vocabulary = task.prompt_names;
  c.fixed_prompt = true;
  c.downsample_categories = false;
  c.mix_negative_captions = false;
  c.validate();
  return c;
}

TransferRow make_row(const TransferTask& task, const RegimeResult& r, std::uint64_t seed) {
  TransferRow row;
  row.task = task.name;
  row.regime = r.regime;
  row.shots = task.shots;
  row.seed = std::to_string(seed);
  row.ap = r.eval.ap;
  row.ap50 = r.eval.ap50;
  for (std::size_t k = 0; k < r.eval.classes.size(); ++k)
    row.per_class_ap.emplace_back(task.class_names.at(static_cast<std::size_t>(r.eval.classes[k])),
                                  r.eval.per_class_ap[k]);
  return row;
}

std::vector<TransferRow> summary_rows(const std::vector<TransferRow>& rows) {
  if (rows.empty()) return {};
  const double n = static_cast<double>(rows.size());
  auto stats = [&](auto get) {
    double mean = 0;
    for (const auto& r : rows) mean += get(r) / n;
    double var = 0;
    for (const auto& r : rows) var += (get(r) - mean) * (get(r) - mean);
    return std::pair{mean, rows.size() > 1 ? std::sqrt(var / (n - 1)) : 0.0};
  };
  TransferRow mean = rows.front(), sd = rows.front();
  mean.seed = "mean";
  sd.seed = "std";
  std::tie(mean.ap, sd.ap) = stats([](const TransferRow& r) { return r.ap; });
  std::tie(mean.ap50, sd.ap50) = stats([](const TransferRow& r) { return r.ap50; });
  for (std::size_t c = 0; c < mean.per_class_ap.size(); ++c) {
    const std::string& name = mean.per_class_ap[c].first;
    std::tie(mean.per_class_ap[c].second, sd.per_class_ap[c].second) = stats([&](const TransferRow& r) {
      for (const auto& [k, v] : r.per_class_ap)
        if (k == name) return v;
      return 0.0;
    });
  }
  return {mean, sd};
}

void write_results_csv(const std::string& path, const std::vector<TransferRow>& rows) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw Error(ErrorCode::IoError, "cannot write " + path);
  f << "task,regime,shots,seed,AP,AP50,per_class_AP\n";
  for (const auto& r : rows) {
    std::string per_class;
    for (const auto& [name, v] : r.per_class_ap) {
      if (!per_class.empty()) per_class += ';';
      per_class += name + '=' + percent(v);
    }
    f << r.task << ',' << r.regime << ',' << (r.shots > 0 ? std::to_string(r.shots) : "all") << ',' << r.seed
      << ',' << percent(r.ap) << ',' << percent(r.ap50) << ",\"" << per_class << "\"\n";
  }
  if (!f) throw Error(ErrorCode::IoError, "write failed: " + path);
}

}  // namespace glip
