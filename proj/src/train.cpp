// SPDX-License-Identifier: Apache-2.0
#include "glip/train.hpp"

#include <algorithm>

namespace glip {

void TrainConfig::validate() const {
  std::vector<std::string> bad;
  if (steps < 0) bad.emplace_back("steps");
  if (batch_size < 1) bad.emplace_back("batch_size");
  if (!(lr >= 0) || !std::isfinite(lr)) bad.emplace_back("lr");
  if (!(language_lr_ratio >= 0)) bad.emplace_back("language_lr_ratio");
  for (double f : decay_fractions)
    if (!(f > 0 && f <= 1)) bad.emplace_back("decay_fractions");
  if (!(decay_factor > 0 && decay_factor <= 1)) bad.emplace_back("decay_factor");
  if (warmup_steps < 0) bad.emplace_back("warmup_steps");
  if (grad_clip_norm < 0) bad.emplace_back("grad_clip_norm");
  if (optimizer.kind != "sgd" && optimizer.kind != "adamw") bad.emplace_back("optimizer.kind");
  if (optimizer.weight_decay < 0) bad.emplace_back("optimizer.weight_decay");
  if (!(match.negative_iou <= match.positive_iou)) bad.emplace_back("match");
  if (focal.gamma < 0 || focal.alpha < 0 || focal.alpha > 1) bad.emplace_back("focal");
  if (negatives.max_negatives < 0) bad.emplace_back("negatives.max_negatives");
  if (!bad.empty()) {
    std::string msg = "invalid train config fields:";
    for (const auto& f : bad) msg += " " + f;
    throw Error(ErrorCode::ConfigError, msg);
  }
  prompt.validate();
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"steps", c.steps},
       {"batch_size", c.batch_size},
       {"seed", c.seed},
       {"lr", c.lr},
       {"language_lr_ratio", c.language_lr_ratio},
       {"decay_fractions", c.decay_fractions},
       {"decay_factor", c.decay_factor},
       {"warmup_steps", c.warmup_steps},
       {"grad_clip_norm", c.grad_clip_norm},
       {"optimizer",
        {{"kind", c.optimizer.kind},
         {"momentum", c.optimizer.momentum},
         {"beta1", c.optimizer.beta1},
         {"beta2", c.optimizer.beta2},
         {"epsilon", c.optimizer.epsilon},
         {"weight_decay", c.optimizer.weight_decay}}},
       {"match", {{"positive_iou", c.match.positive_iou}, {"negative_iou", c.match.negative_iou}}},
       {"focal", {{"gamma", c.focal.gamma}, {"alpha", c.focal.alpha}}},
       {"prompt",
        {{"separator", c.prompt.separator},
         {"max_tokens", c.prompt.max_tokens},
         {"subword_piece_len", c.prompt.subword_piece_len},
         {"chunk_size", c.prompt.chunk_size},
         {"downsample_cap", c.prompt.downsample_cap}}},
       {"downsample_categories", c.downsample_categories},
       {"mix_negative_captions", c.mix_negative_captions},
       {"negatives",
        {{"full_mix_probability", c.negatives.full_mix_probability},
         {"partial_mix_probability", c.negatives.partial_mix_probability},
         {"max_negatives", c.negatives.max_negatives}}},
       {"vocabulary", c.vocabulary},
       {"fixed_prompt", c.fixed_prompt},
       {"loss_log", c.loss_log}};
}

namespace {

template <typename T>
void read(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

void from_json(const nlohmann::json& j, TrainConfig& c) {
  static const std::vector<std::string> known = {
      "steps", "batch_size", "seed", "lr", "language_lr_ratio", "decay_fractions", "decay_factor",
      "warmup_steps", "grad_clip_norm", "optimizer", "match", "focal", "prompt",
      "downsample_categories", "mix_negative_captions", "negatives", "vocabulary", "fixed_prompt",
      "loss_log"};
  for (const auto& [key, value] : j.items())
    if (std::find(known.begin(), known.end(), key) == known.end())
      throw Error(ErrorCode::ConfigError, "unknown train config field: " + key);
  try {
    read(j, "steps", c.steps);
    read(j, "batch_size", c.batch_size);
    read(j, "seed", c.seed);
    read(j, "lr", c.lr);
    read(j, "language_lr_ratio", c.language_lr_ratio);
    read(j, "decay_fractions", c.decay_fractions);
    read(j, "decay_factor", c.decay_factor);
    read(j, "warmup_steps", c.warmup_steps);
    read(j, "grad_clip_norm", c.grad_clip_norm);
    if (j.contains("optimizer")) {
      const auto& o = j.at("optimizer");
      read(o, "kind", c.optimizer.kind);
      read(o, "momentum", c.optimizer.momentum);
      read(o, "beta1", c.optimizer.beta1);
      read(o, "beta2", c.optimizer.beta2);
      read(o, "epsilon", c.optimizer.epsilon);
      read(o, "weight_decay", c.optimizer.weight_decay);
    }
    if (j.contains("match")) {
      read(j.at("match"), "positive_iou", c.match.positive_iou);
      read(j.at("match"), "negative_iou", c.match.negative_iou);
    }
    if (j.contains("focal")) {
      read(j.at("focal"), "gamma", c.focal.gamma);
      read(j.at("focal"), "alpha", c.focal.alpha);
    }
    if (j.contains("prompt")) {
      const auto& p = j.at("prompt");
      read(p, "separator", c.prompt.separator);
      read(p, "max_tokens", c.prompt.max_tokens);
      read(p, "subword_piece_len", c.prompt.subword_piece_len);
      read(p, "chunk_size", c.prompt.chunk_size);
      read(p, "downsample_cap", c.prompt.downsample_cap);
    }
    read(j, "downsample_categories", c.downsample_categories);
    read(j, "mix_negative_captions", c.mix_negative_captions);
    if (j.contains("negatives")) {
      const auto& n = j.at("negatives");
      read(n, "full_mix_probability", c.negatives.full_mix_probability);
      read(n, "partial_mix_probability", c.negatives.partial_mix_probability);
      read(n, "max_negatives", c.negatives.max_negatives);
    }
    read(j, "vocabulary", c.vocabulary);
    read(j, "fixed_prompt", c.fixed_prompt);
    read(j, "loss_log", c.loss_log);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ConfigError, std::string("train config: ") + e.what());
  }
}

double learning_rate(const TrainConfig& config, int step) {
  double lr = config.lr;
  if (config.warmup_steps > 0 && step < config.warmup_steps)
    lr *= static_cast<double>(step + 1) / config.warmup_steps;
  for (double f : config.decay_fractions)
    if (step >= static_cast<int>(std::floor(f * config.steps))) lr *= config.decay_factor;
  return lr;
}

TrainConfig shapes_world_recipe() {
  TrainConfig c;
  c.steps = 1500;
  c.lr = 1e-3;
  c.optimizer.kind = "adamw";
  c.optimizer.weight_decay = 1e-4;
  c.grad_clip_norm = 0;
  return c;
}

bool is_language_parameter(std::string_view name) { return name.starts_with("language."); }

std::vector<std::string> collect_vocabulary(const Dataset& data) {
  std::vector<std::string> vocab;
  for (const auto& r : data) {
    if (r.kind != RecordKind::Detection) continue;
    for (std::size_t i = 0; i < r.annotations.size(); ++i) {
      const std::string name = r.phrase_text(i);
      if (std::find(vocab.begin(), vocab.end(), name) == vocab.end()) vocab.push_back(name);
    }
  }
  return vocab;
}

namespace {

int index_of(const std::vector<std::string>& names, const std::string& name) {
  auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) throw Error(ErrorCode::UnknownClass, "class not in vocabulary: " + name);
  return static_cast<int>(it - names.begin());
}

}  // namespace

TrainExample make_example(const GroundedRecord& record, const Dataset& data,
                          const std::vector<int>& grounding_indices,
                          const std::vector<std::string>& vocabulary, const TrainConfig& config,
                          bool classifier, Rng& rng) {
  TrainExample ex;
  ex.image = &record.image;
  if (classifier || record.kind == RecordKind::Detection) {
    std::vector<std::string> positives;
    for (std::size_t i = 0; i < record.annotations.size(); ++i) positives.push_back(record.phrase_text(i));
    std::vector<std::string> names;
    if (classifier || config.fixed_prompt || !config.downsample_categories) {
      names = vocabulary;
    } else {
      std::vector<std::string> negatives;
      for (const auto& v : vocabulary)
        if (std::find(positives.begin(), positives.end(), v) == positives.end()) negatives.push_back(v);
      const int cap = std::min<int>(config.prompt.downsample_cap,
                                    static_cast<int>(positives.size() + negatives.size()));
      names = downsample_categories(positives, negatives, std::max<int>(cap, static_cast<int>(positives.size())), rng);
    }
    for (std::size_t i = 0; i < record.annotations.size(); ++i) {
      const int id = index_of(names, positives[i]);
      for (const Box& b : record.annotations[i].boxes) {
        ex.boxes.push_back(b);
        ex.phrase_ids.push_back(id);
      }
    }
    if (!classifier) ex.prompt = build_detection_prompt(names, config.prompt);
    ex.phrase_count = static_cast<int>(names.size());
    return ex;
  }

  std::string text = record.caption;
  std::vector<CharSpan> spans;
  for (const auto& a : record.annotations) spans.push_back(a.span);
  if (config.mix_negative_captions && config.negatives.max_negatives > 0) {
    std::vector<int> others;
    for (int g : grounding_indices)
      if (&data[g] != &record) others.push_back(g);
    const int k = std::min<int>(config.negatives.max_negatives, static_cast<int>(others.size()));
    if (k > 0) {
      std::vector<std::string> pool;
      for (std::size_t idx : rng.sample_indices(others.size(), static_cast<std::size_t>(k)))
        pool.push_back(data[others[idx]].caption);
      NegativeCaptionOptions options = config.negatives;
      options.max_negatives = k;
      options.separator = config.prompt.separator;
      const MixedCaption mixed = mix_negative_captions(record.caption, pool, rng, options);
      text = mixed.text;
      for (auto& s : spans) s = mixed.shift(s);
    }
  }
  ex.prompt = build_prompt(text, spans, config.prompt);
  for (std::size_t i = 0; i < record.annotations.size(); ++i) {
    for (const Box& b : record.annotations[i].boxes) {
      ex.boxes.push_back(b);
      ex.phrase_ids.push_back(static_cast<int>(i));
    }
  }
  ex.phrase_count = static_cast<int>(record.annotations.size());
  return ex;
}

}  // namespace glip
