// SPDX-License-Identifier: Apache-2.0
#include "glip/service.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>

#include "glip/shapes_world.hpp"
#include "glip/transfer.hpp"

#include "httplib.h"

namespace glip {

namespace {

using nlohmann::json;

// A request the client got wrong; carries the HTTP status to answer with.
struct RequestError {
  int status;
  std::string code;
  std::string message;
};

[[noreturn]] void reject(int status, std::string code, std::string message) {
  throw RequestError{status, std::move(code), std::move(message)};
}

json parse_body(const std::string& body) {
  try {
    json j = json::parse(body);
    if (!j.is_object()) reject(400, "SchemaError", "request body must be a JSON object");
    return j;
  } catch (const json::parse_error& e) {
    reject(400, "SchemaError", std::string("malformed JSON: ") + e.what());
  }
}

void allow_only(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
  for (const auto& [k, v] : j.items()) {
    bool known = false;
    for (const char* key : keys) known = known || k == key;
    if (!known) reject(400, "SchemaError", "unknown field " + where + k);
  }
}

Image decode_image(const json& j, const std::string& field, int expected_size) {
  if (!j.contains(field) || !j[field].is_string()) reject(400, "SchemaError", field + " must be a base64 string");
  Image image;
  try {
    image = decode_ppm(base64_decode(j[field].get<std::string>()));
  } catch (const Error& e) {
    reject(400, "SchemaError", field + " is not a base64 PPM image: " + e.what());
  }
  if (image.width != expected_size || image.height != expected_size)
    reject(400, "SchemaError", field + " must be " + std::to_string(expected_size) + "x" +
                                   std::to_string(expected_size));
  return image;
}

std::vector<std::string> class_list(const json& v, const std::string& field) {
  std::vector<std::string> names;
  for (const auto& n : v) {
    if (!n.is_string()) reject(400, "SchemaError", field + " entries must be strings");
    names.push_back(n.get<std::string>());
  }
  if (names.empty()) reject(422, "EmptyPrompt", field + " is empty");
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i].find_first_not_of(" \t\n") == std::string::npos)
      reject(422, "EmptyPrompt", field + " contains an empty class name");
    for (std::size_t k = 0; k < i; ++k)
      if (names[k] == names[i]) reject(400, "SchemaError", "duplicate class name: " + names[i]);
  }
  return names;
}

json phrases_json(const std::vector<Phrase>& phrases) {
  json arr = json::array();
  for (const auto& p : phrases) arr.push_back({{"text", p.text}, {"span", {p.char_span.begin, p.char_span.end}}});
  return arr;
}

// Phrases of "name1. name2. ... " over the whole list, independent of chunking.
std::vector<Phrase> detection_phrases(const std::vector<std::string>& names, const std::string& separator,
                                      std::string& text) {
  std::vector<Phrase> phrases;
  text.clear();
  for (const auto& n : names) {
    phrases.push_back({n, {static_cast<int>(text.size()), static_cast<int>(text.size() + n.size())}});
    text += n + separator;
  }
  return phrases;
}

DecodeConfig decode_options(const json& options, DecodeConfig decode) {
  try {
    if (options.contains("score_threshold")) decode.score_threshold = options.at("score_threshold").get<double>();
    if (options.contains("nms_iou")) decode.nms_iou = options.at("nms_iou").get<double>();
    if (options.contains("max_detections")) decode.max_detections = options.at("max_detections").get<int>();
    decode.validate();
  } catch (const json::exception& e) {
    reject(400, "SchemaError", std::string("options: ") + e.what());
  } catch (const Error& e) {
    reject(400, "SchemaError", e.what());
  }
  return decode;
}

}  // namespace

void ServiceConfig::validate() const {
  std::vector<std::string> bad;
  if (host.empty()) bad.emplace_back("host");
  if (port < 0 || port > 65535) bad.emplace_back("port");
  if (checkpoint.empty()) bad.emplace_back("checkpoint");
  if (max_concurrent_requests < 1) bad.emplace_back("max_concurrent_requests");
  if (max_upload_bytes < 64) bad.emplace_back("max_upload_bytes");
  if (job_dir.empty()) bad.emplace_back("job_dir");
  if (max_job_steps < 0) bad.emplace_back("max_job_steps");
  if (!bad.empty()) {
    std::string msg = "invalid service config fields:";
    for (const auto& f : bad) msg += " " + f;
    throw Error(ErrorCode::ConfigError, msg);
  }
  prompt.validate();
  decode.validate();
}

void to_json(json& j, const ServiceConfig& c) {
  j = {{"host", c.host},
       {"port", c.port},
       {"checkpoint", c.checkpoint},
       {"prompt",
        {{"separator", c.prompt.separator},
         {"max_tokens", c.prompt.max_tokens},
         {"subword_piece_len", c.prompt.subword_piece_len},
         {"chunk_size", c.prompt.chunk_size},
         {"downsample_cap", c.prompt.downsample_cap}}},
       {"decode",
        {{"score_threshold", c.decode.score_threshold},
         {"nms_iou", c.decode.nms_iou},
         {"max_detections", c.decode.max_detections}}},
       {"max_concurrent_requests", c.max_concurrent_requests},
       {"max_upload_bytes", c.max_upload_bytes},
       {"job_dir", c.job_dir},
       {"max_job_steps", c.max_job_steps}};
}

void from_json(const json& j, ServiceConfig& c) {
  std::vector<std::string> unknown;
  for (const auto& [k, v] : j.items())
    if (k != "host" && k != "port" && k != "checkpoint" && k != "prompt" && k != "decode" &&
        k != "max_concurrent_requests" && k != "max_upload_bytes" && k != "job_dir" && k != "max_job_steps")
      unknown.push_back(k);
  if (!unknown.empty()) {
    std::string msg = "unknown service config fields:";
    for (const auto& f : unknown) msg += " " + f;
    throw Error(ErrorCode::ConfigError, msg);
  }
  try {
    c.host = j.value("host", c.host);
    c.port = j.value("port", c.port);
    c.checkpoint = j.value("checkpoint", c.checkpoint);
    c.max_concurrent_requests = j.value("max_concurrent_requests", c.max_concurrent_requests);
    c.max_upload_bytes = j.value("max_upload_bytes", c.max_upload_bytes);
    c.job_dir = j.value("job_dir", c.job_dir);
    c.max_job_steps = j.value("max_job_steps", c.max_job_steps);
    if (j.contains("prompt")) {
      const json& p = j.at("prompt");
      c.prompt.separator = p.value("separator", c.prompt.separator);
      c.prompt.max_tokens = p.value("max_tokens", c.prompt.max_tokens);
      c.prompt.subword_piece_len = p.value("subword_piece_len", c.prompt.subword_piece_len);
      c.prompt.chunk_size = p.value("chunk_size", c.prompt.chunk_size);
      c.prompt.downsample_cap = p.value("downsample_cap", c.prompt.downsample_cap);
    }
    if (j.contains("decode")) {
      const json& d = j.at("decode");
      c.decode.score_threshold = d.value("score_threshold", c.decode.score_threshold);
      c.decode.nms_iou = d.value("nms_iou", c.decode.nms_iou);
      c.decode.max_detections = d.value("max_detections", c.decode.max_detections);
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ConfigError, std::string("service config: ") + e.what());
  }
}

void apply_env_overrides(ServiceConfig& config) {
  if (const char* v = std::getenv("GLIP_HOST"); v && *v) config.host = v;
  if (const char* v = std::getenv("GLIP_PORT"); v && *v) {
    char* end = nullptr;
    const long port = std::strtol(v, &end, 10);
    if (*end != '\0') throw Error(ErrorCode::ConfigError, "GLIP_PORT is not a number: " + std::string(v));
    config.port = static_cast<int>(port);
  }
  if (const char* v = std::getenv("GLIP_CHECKPOINT"); v && *v) config.checkpoint = v;
}

Service::Service(ServiceConfig config, GroundingModel<float> model, json metadata)
    : config_(std::move(config)),
      model_(std::move(model)),
      metadata_(std::move(metadata)),
      parameter_hash_(parameter_hash(model_.parameters())),
      lexicon_(Lexicon::for_shapes_world(ShapesWorldSpec::standard())) {
  config_.prompt.validate();
  config_.decode.validate();
  worker_ = std::thread([this] { worker_loop(); });
}

Service::~Service() {
  {
    std::lock_guard lock(mutex_);
    stopping_ = true;
  }
  cv_.notify_all();
  if (worker_.joinable()) worker_.join();
}

std::unique_ptr<Service> Service::from_checkpoint(const ServiceConfig& config) {
  config.validate();
  LoadedCheckpoint<float> loaded = load_checkpoint<float>(config.checkpoint);
  if (loaded.model.config().classifier_classes > 0)
    throw Error(ErrorCode::ConfigError, "the service needs a grounding checkpoint");
  return std::make_unique<Service>(config, std::move(loaded.model), loaded.metadata);
}

HttpResponse Service::error(int status, std::string_view code, const std::string& message) const {
  return {status, json{{"error", {{"code", code}, {"message", message}}}}.dump()};
}

HttpResponse Service::internal_error(const std::string& message) const {
  char id[32];
  std::snprintf(id, sizeof(id), "err-%08llx", static_cast<unsigned long long>(next_error_.fetch_add(1)));
  std::cerr << "[" << id << "] " << message << "\n";
  return {500, json{{"error", {{"code", "InternalError"}, {"message", "internal error"}, {"correlation_id", id}}}}
                   .dump()};
}

HttpResponse Service::infer(const std::string& body) const {
  try {
    if (body.size() > config_.max_upload_bytes) reject(413, "PayloadTooLarge", "request body exceeds the upload limit");
    const json req = parse_body(body);
    allow_only(req, {"image", "prompt", "options"}, "");
    const json options = req.value("options", json::object());
    if (!options.is_object()) reject(400, "SchemaError", "options must be an object");
    allow_only(options, {"score_threshold", "nms_iou", "max_detections", "prompt_embedding"}, "options.");
    const DecodeConfig decode = decode_options(options, config_.decode);
    const Image image = decode_image(req, "image", model_.config().image_size);

    json out;
    std::vector<Detection> dets;
    if (options.contains("prompt_embedding")) {
      if (!options["prompt_embedding"].is_string()) reject(400, "SchemaError", "options.prompt_embedding must be a job id");
      if (req.contains("prompt")) reject(400, "SchemaError", "prompt and options.prompt_embedding are exclusive");
      const std::string id = options["prompt_embedding"].get<std::string>();
      std::shared_ptr<Job> job;
      {
        std::lock_guard lock(mutex_);
        auto it = jobs_.find(id);
        if (it != jobs_.end() && it->second->status == "succeeded") job = it->second;
      }
      if (!job) reject(404, "UnknownJob", "no finished prompt-tune job " + id);
      const TokenizedPrompt prompt = build_detection_prompt(job->class_names, config_.prompt);
      dets = glip::infer(model_, image, prompt, decode, &job->embedding);
      out["mode"] = "prompt-embedding";
      out["prompt"] = {{"text", prompt.text}, {"phrases", phrases_json(prompt.phrases)}};
    } else {
      if (!req.contains("prompt")) reject(400, "SchemaError", "prompt is required");
      const json& p = req["prompt"];
      if (p.is_string()) {
        const std::string text = p.get<std::string>();
        if (text.find_first_not_of(" \t\n") == std::string::npos) reject(422, "EmptyPrompt", "prompt is empty");
        const auto phrases = extract_noun_phrases(text, lexicon_);
        if (phrases.empty()) reject(422, "NoPhrases", "no noun phrases found in the prompt");
        std::vector<CharSpan> spans;
        for (const auto& ph : phrases) spans.push_back(ph.char_span);
        TokenizedPrompt prompt;
        try {
          prompt = build_prompt(text, spans, config_.prompt);
        } catch (const Error& e) {
          if (e.code() == ErrorCode::TooManyTokens) reject(422, "TooManyTokens", e.what());
          throw;
        }
        dets = glip::infer(model_, image, prompt, decode);
        out["mode"] = "free-text";
        out["prompt"] = {{"text", text}, {"phrases", phrases_json(phrases)}};
      } else if (p.is_array()) {
        const auto names = class_list(p, "prompt");
        std::string text;
        const auto phrases = detection_phrases(names, config_.prompt.separator, text);
        try {
          dets = infer_chunked(model_, image, names, config_.prompt, decode).detections;
        } catch (const Error& e) {
          if (e.code() == ErrorCode::TooManyTokens) reject(422, "TooManyTokens", e.what());
          throw;
        }
        out["mode"] = "class-list";
        out["prompt"] = {{"text", text}, {"phrases", phrases_json(phrases)}};
      } else {
        reject(400, "SchemaError", "prompt must be a string or a list of class names");
      }
    }
    out["detections"] = to_json(dets);
    return {200, out.dump()};
  } catch (const RequestError& e) {
    return error(e.status, e.code, e.message);
  } catch (const std::exception& e) {
    return internal_error(e.what());
  }
}

HttpResponse Service::model_info() const {
  json out = {{"config", model_.config()},
              {"seed", model_.seed()},
              {"parameter_hash", parameter_hash_},
              {"metadata", metadata_},
              {"checkpoint", config_.checkpoint}};
  return {200, out.dump()};
}

HttpResponse Service::submit_prompt_tune(const std::string& body) {
  try {
    if (body.size() > config_.max_upload_bytes) reject(413, "PayloadTooLarge", "request body exceeds the upload limit");
    json req = parse_body(body);
    allow_only(req, {"class_names", "examples", "steps", "lr", "weight_decay", "seed"}, "");
    if (!req.contains("class_names") || !req["class_names"].is_array())
      reject(400, "SchemaError", "class_names must be a list");
    auto job = std::make_shared<Job>();
    job->class_names = class_list(req["class_names"], "class_names");
    if (!req.contains("examples") || !req["examples"].is_array() || req["examples"].empty())
      reject(400, "SchemaError", "examples must be a non-empty list");
    for (const auto& ex : req["examples"]) {
      if (!ex.is_object()) reject(400, "SchemaError", "examples entries must be objects");
      allow_only(ex, {"image", "boxes"}, "examples[].");
      decode_image(ex, "image", model_.config().image_size);
      if (!ex.contains("boxes") || !ex["boxes"].is_array()) reject(400, "SchemaError", "examples[].boxes must be a list");
      for (const auto& b : ex["boxes"]) {
        if (!b.is_object() || !b.contains("class") || !b["class"].is_string() || !b.contains("box") ||
            !b["box"].is_array() || b["box"].size() != 4)
          reject(400, "SchemaError", "boxes entries are {\"class\": string, \"box\": [x1, y1, x2, y2]}");
        const auto cls = b["class"].get<std::string>();
        if (std::find(job->class_names.begin(), job->class_names.end(), cls) == job->class_names.end())
          reject(422, "UnknownClass", "box class not in class_names: " + cls);
        for (const auto& x : b["box"])
          if (!x.is_number()) reject(400, "SchemaError", "box coordinates must be numbers");
      }
    }
    const auto number = [&](const char* key, double fallback) {
      if (!req.contains(key)) return fallback;
      if (!req[key].is_number()) reject(400, "SchemaError", std::string(key) + " must be a number");
      return req[key].get<double>();
    };
    const double steps = number("steps", 100);
    if (steps < 0 || steps > config_.max_job_steps || steps != std::floor(steps))
      reject(400, "SchemaError", "steps must be an integer in [0, " + std::to_string(config_.max_job_steps) + "]");
    if (number("lr", 0.05) < 0 || number("weight_decay", 0.25) < 0 || number("seed", 0) < 0)
      reject(400, "SchemaError", "lr, weight_decay and seed must be non-negative");
    job->request = std::move(req);
    job->status = "queued";
    {
      std::lock_guard lock(mutex_);
      char id[32];
      std::snprintf(id, sizeof(id), "job-%06d", next_job_++);
      job->id = id;
      jobs_[job->id] = job;
      queue_.push_back(job);
    }
    cv_.notify_all();
    return {202, json{{"job_id", job->id}, {"status", "queued"}}.dump()};
  } catch (const RequestError& e) {
    return error(e.status, e.code, e.message);
  } catch (const std::exception& e) {
    return internal_error(e.what());
  }
}

HttpResponse Service::job_status(const std::string& id) const {
  std::lock_guard lock(mutex_);
  auto it = jobs_.find(id);
  if (it == jobs_.end()) return error(404, "UnknownJob", "no job " + id);
  const Job& job = *it->second;
  json out = {{"job_id", job.id}, {"status", job.status}};
  if (!job.result.is_null()) out["result"] = job.result;
  if (!job.error.is_null()) out["error"] = job.error;
  return {200, out.dump()};
}

void Service::drain_jobs() {
  std::unique_lock lock(mutex_);
  cv_.wait(lock, [&] { return queue_.empty() && !busy_; });
}

void Service::worker_loop() {
  for (;;) {
    std::shared_ptr<Job> job;
    {
      std::unique_lock lock(mutex_);
      cv_.wait(lock, [&] { return stopping_ || !queue_.empty(); });
      if (stopping_) return;
      job = queue_.front();
      queue_.pop_front();
      busy_ = true;
      job->status = "running";
    }
    run_job(*job);
    {
      std::lock_guard lock(mutex_);
      busy_ = false;
    }
    cv_.notify_all();
  }
}

void Service::run_job(Job& job) {
  const json& req = job.request;
  json result, err;
  std::string status = "succeeded";
  ad::Matrix<float> embedding;
  try {
    Dataset train;
    int n = 0;
    for (const auto& ex : req["examples"]) {
      GroundedRecord r;
      r.image_id = job.id + "-" + std::to_string(n++);
      r.image = decode_ppm(base64_decode(ex["image"].get<std::string>()));
      r.kind = RecordKind::Detection;
      std::map<std::string, std::vector<Box>> by_class;
      for (const auto& b : ex["boxes"]) {
        const auto& v = b["box"];
        by_class[b["class"].get<std::string>()].push_back(
            {v[0].get<double>(), v[1].get<double>(), v[2].get<double>(), v[3].get<double>()});
      }
      for (const auto& name : job.class_names) {
        auto it = by_class.find(name);
        if (it == by_class.end()) continue;
        Annotation a;
        a.span = {static_cast<int>(r.caption.size()), static_cast<int>(r.caption.size() + name.size())};
        a.boxes = it->second;
        r.caption += name + ". ";
        r.annotations.push_back(std::move(a));
      }
      train.push_back(std::move(r));
    }
    TransferTask task = make_task(job.id, job.class_names, std::move(train), {}, {});
    TrainConfig tc = prompt_tune_defaults();
    tc.prompt = config_.prompt;
    tc.steps = req.value("steps", 100);
    tc.lr = req.value("lr", tc.lr);
    tc.optimizer.weight_decay = req.value("weight_decay", tc.optimizer.weight_decay);
    tc.seed = req.value("seed", std::uint64_t{0});
    const auto tuned = tune_prompt_embedding(model_, task, tc);
    if (!tuned.result.frozen_unchanged()) throw Error(ErrorCode::InvalidArgument, "frozen parameters changed");
    std::filesystem::create_directories(config_.job_dir);
    const std::string path = (std::filesystem::path(config_.job_dir) / (job.id + ".ckpt")).string();
    save_arrays<float>(path, {{"prompt.embedding", tuned.embedding}},
                       {{"job_id", job.id}, {"class_names", job.class_names}, {"base_parameter_hash", parameter_hash_}});
    embedding = tuned.embedding;
    result = {{"artifact", path},
              {"class_names", job.class_names},
              {"steps", tc.steps},
              {"final_loss", tuned.result.log.steps.empty() ? 0.0 : tuned.result.log.steps.back().total},
              {"frozen_parameter_hash", tuned.result.frozen_hash_after}};
  } catch (const Error& e) {
    status = "failed";
    err = {{"code", to_string(e.code())}, {"message", e.what()}};
  } catch (const std::exception& e) {
    status = "failed";
    err = {{"code", "InternalError"}, {"message", e.what()}};
  }
  std::lock_guard lock(mutex_);
  job.status = status;
  job.result = result;
  job.error = err;
  job.embedding = std::move(embedding);
}

void Service::mount(httplib::Server& server) {
  const int threads = config_.max_concurrent_requests;
  server.new_task_queue = [threads] { return new httplib::ThreadPool(static_cast<std::size_t>(threads)); };
  server.set_payload_max_length(config_.max_upload_bytes);
  auto reply = [](httplib::Response& res, const HttpResponse& r) {
    res.status = r.status;
    res.set_content(r.body, "application/json");
  };
  server.Post("/infer", [this, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, infer(req.body));
  });
  server.Get("/model", [this, reply](const httplib::Request&, httplib::Response& res) { reply(res, model_info()); });
  server.Post("/prompt-tune", [this, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, submit_prompt_tune(req.body));
  });
  server.Get(R"(/jobs/([A-Za-z0-9\-]+))", [this, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, job_status(req.matches[1]));
  });
  server.set_exception_handler([this, reply](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    try {
      std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      reply(res, internal_error(e.what()));
    } catch (...) {
      reply(res, internal_error("unknown exception"));
    }
  });
  server.set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (!res.body.empty()) return;
    const char* code = res.status == 413 ? "PayloadTooLarge" : res.status == 404 ? "NotFound" : "HttpError";
    res.set_content(json{{"error", {{"code", code}, {"message", httplib::status_message(res.status)}}}}.dump(),
                    "application/json");
  });
}

void run_server(Service& service) {
  httplib::Server server;
  service.mount(server);
  const auto& c = service.config();
  std::cerr << "serving on " << c.host << ":" << c.port << "\n";
  if (!server.listen(c.host, c.port))
    throw Error(ErrorCode::IoError, "cannot listen on " + c.host + ":" + std::to_string(c.port));
}

}  // namespace glip
