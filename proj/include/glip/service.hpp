// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <condition_variable>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>

#include "glip/checkpoint.hpp"
#include "glip/inference.hpp"
#include "glip/self_training.hpp"
#include "glip/train.hpp"

#include "json.hpp"

namespace httplib {
class Server;
}

namespace glip {

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string checkpoint;
  PromptConfig prompt;
  DecodeConfig decode;
  int max_concurrent_requests = 4;
  std::size_t max_upload_bytes = 1 << 20;
  /// Prompt-tune artifacts are written here as <job id>.ckpt.
  std::string job_dir = "jobs";
  /// Upper bound on training steps a /prompt-tune request may ask for.
  int max_job_steps = 2000;

  /// Throws ConfigError naming every invalid field.
  void validate() const;
};

void to_json(nlohmann::json& j, const ServiceConfig& c);
void from_json(const nlohmann::json& j, ServiceConfig& c);

/// GLIP_HOST, GLIP_PORT and GLIP_CHECKPOINT replace the matching fields.
void apply_env_overrides(ServiceConfig& config);

struct HttpResponse {
  int status = 200;
  std::string body;  // JSON
};

/// Request handling, independent of the HTTP transport so it can be driven
/// directly. The model is never modified; prompt-tune jobs run one at a time
/// on a background worker and write new embedding artifacts.
class Service {
 public:
  Service(ServiceConfig config, GroundingModel<float> model, nlohmann::json metadata = nlohmann::json::object());
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  /// Loads `config.checkpoint`.
  static std::unique_ptr<Service> from_checkpoint(const ServiceConfig& config);

  HttpResponse infer(const std::string& body) const;
  HttpResponse model_info() const;
  HttpResponse submit_prompt_tune(const std::string& body);
  HttpResponse job_status(const std::string& id) const;

  /// Blocks until no job is queued or running.
  void drain_jobs();

  /// Registers the routes on `server` (payload cap, thread pool size).
  void mount(httplib::Server& server);

  const ServiceConfig& config() const { return config_; }
  const GroundingModel<float>& model() const { return model_; }

 private:
  struct Job {
    std::string id;
    std::string status;  // queued, running, succeeded, failed
    nlohmann::json request;
    nlohmann::json result;
    nlohmann::json error;
    std::vector<std::string> class_names;
    ad::Matrix<float> embedding;
  };

  HttpResponse error(int status, std::string_view code, const std::string& message) const;
  HttpResponse internal_error(const std::string& message) const;
  void worker_loop();
  void run_job(Job& job);

  ServiceConfig config_;
  GroundingModel<float> model_;
  nlohmann::json metadata_;
  std::string parameter_hash_;
  Lexicon lexicon_;

  mutable std::mutex mutex_;
  std::condition_variable cv_;
  std::map<std::string, std::shared_ptr<Job>> jobs_;
  std::deque<std::shared_ptr<Job>> queue_;
  bool busy_ = false;
  bool stopping_ = false;
  int next_job_ = 1;
  mutable std::atomic<std::uint64_t> next_error_{1};
  std::thread worker_;
};

/// Binds and serves until the process is stopped.
void run_server(Service& service);

}  // namespace glip
