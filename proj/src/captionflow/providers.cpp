#include <openssl/evp.h>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <thread>

#include <httplib.h>

#include "tridiff/captionflow/captionflow.hpp"

namespace tridiff::caption {

std::string base64_encode(std::string_view bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3) + 1, '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(bytes.data()), static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

void ProviderConfig::validate() const {
  if (max_retries < 0) throw std::invalid_argument("ProviderConfig: max_retries must be >= 0");
  if (concurrency < 1) throw std::invalid_argument("ProviderConfig: concurrency must be >= 1");
  if (!(timeout_s > 0)) throw std::invalid_argument("ProviderConfig: timeout must be positive");
  if (!(backoff_initial_s >= 0) || !(backoff_max_s >= backoff_initial_s)) {
    throw std::invalid_argument("ProviderConfig: backoff must satisfy 0 <= initial <= max");
  }
  if (!(temperature >= 0)) throw std::invalid_argument("ProviderConfig: temperature must be >= 0");
}

ProviderConfig ProviderConfig::from_json(const nlohmann::json& j) {
  ProviderConfig c;
  c.endpoint = j.value("endpoint", c.endpoint);
  c.model = j.value("model", c.model);
  c.auth_env = j.value("auth_env", c.auth_env);
  c.timeout_s = j.value("timeout_s", c.timeout_s);
  c.max_retries = j.value("max_retries", c.max_retries);
  c.concurrency = j.value("concurrency", c.concurrency);
  c.temperature = j.value("temperature", c.temperature);
  c.backoff_initial_s = j.value("backoff_initial_s", c.backoff_initial_s);
  c.backoff_max_s = j.value("backoff_max_s", c.backoff_max_s);
  c.validate();
  return c;
}

// ---------------------------------------------------------------- mock

MockProvider::MockProvider(std::map<std::string, std::string> captions, std::string name)
    : captions_(std::move(captions)), name_(std::move(name)) {}

std::string MockProvider::complete(const ProviderRequest& req) {
  ++calls_;
  const int now = ++in_flight_;
  int prev = max_in_flight_.load();
  while (now > prev && !max_in_flight_.compare_exchange_weak(prev, now)) {
  }
  struct Leave {
    std::atomic<int>& n;
    ~Leave() { --n; }
  } leave{in_flight_};
  if (latency_.count() > 0) std::this_thread::sleep_for(latency_);

  int pending = pending_failures_.load();
  while (pending > 0 && !pending_failures_.compare_exchange_weak(pending, pending - 1)) {
  }
  if (pending > 0) throw TransientError("mock: injected transient failure");

  switch (req.stage) {
    case Stage::Caption: {
      const auto it = captions_.find(req.object_id);
      return it == captions_.end() ? std::string("a 3D object") : it->second;
    }
    case Stage::Simplify:
      if (req.inputs.empty()) throw PermanentError("mock: simplify request without input");
      return req.inputs.front();
    case Stage::Fuse: {
      if (req.inputs.empty()) throw PermanentError("mock: fuse request without inputs");
      std::size_t best = 0;
      long best_count = 0;
      for (std::size_t i = 0; i < req.inputs.size(); ++i) {
        const long c = std::count(req.inputs.begin(), req.inputs.end(), req.inputs[i]);
        if (c > best_count) {
          best = i;
          best_count = c;
        }
      }
      return req.inputs[best];
    }
  }
  throw PermanentError("mock: unknown stage");
}

// ---------------------------------------------------------------- http

HttpProvider::HttpProvider(ProviderConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  if (cfg_.endpoint.find("://") == std::string::npos) {
    throw std::invalid_argument("HttpProvider: endpoint must be an absolute URL: " + cfg_.endpoint);
  }
}

nlohmann::json HttpProvider::request_body(const ProviderRequest& req) {
  nlohmann::json content;
  if (req.image_base64.empty()) {
    content = req.prompt;
  } else {
    content = nlohmann::json::array(
        {{{"type", "text"}, {"text", req.prompt}},
         {{"type", "image_url"},
          {"image_url", {{"url", "data:image/x-portable-pixmap;base64," + req.image_base64}}}}});
  }
  return {{"model", req.model},
          {"temperature", req.temperature},
          {"messages", nlohmann::json::array({{{"role", "user"}, {"content", content}}})}};
}

std::string HttpProvider::complete(const ProviderRequest& req) {
  const auto scheme_end = cfg_.endpoint.find("://") + 3;
  const auto path_start = cfg_.endpoint.find('/', scheme_end);
  const std::string base = cfg_.endpoint.substr(0, path_start);
  const std::string path = path_start == std::string::npos ? "/" : cfg_.endpoint.substr(path_start);

  httplib::Client client(base);
  const auto secs = static_cast<time_t>(cfg_.timeout_s);
  const auto usecs = static_cast<time_t>((cfg_.timeout_s - static_cast<double>(secs)) * 1e6);
  client.set_connection_timeout(secs, usecs);
  client.set_read_timeout(secs, usecs);
  client.set_write_timeout(secs, usecs);
  httplib::Headers headers;
  if (!cfg_.auth_env.empty()) {
    if (const char* token = std::getenv(cfg_.auth_env.c_str()); token && *token) {
      headers.emplace("Authorization", std::string("Bearer ") + token);
    }
  }
  ProviderRequest sent = req;
  if (sent.model.empty()) sent.model = cfg_.model;
  const auto res = client.Post(path, headers, request_body(sent).dump(), "application/json");
  if (!res) throw TransientError("http: " + httplib::to_string(res.error()));
  if (res->status == 429 || res->status >= 500) {
    throw TransientError("http: status " + std::to_string(res->status));
  }
  if (res->status < 200 || res->status >= 300) {
    throw PermanentError("http: status " + std::to_string(res->status) + ": " + res->body.substr(0, 200));
  }
  try {
    const auto j = nlohmann::json::parse(res->body);
    return j.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw PermanentError(std::string("http: malformed response: ") + e.what());
  }
}

// ---------------------------------------------------------------- logging / replay

LoggingProvider::LoggingProvider(Provider& inner, std::filesystem::path log_path)
    : inner_(inner), path_(std::move(log_path)) {
  if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
  std::ofstream probe(path_, std::ios::app);
  if (!probe) throw std::runtime_error("LoggingProvider: cannot open " + path_.string());
}

std::string LoggingProvider::complete(const ProviderRequest& req) {
  std::string response = inner_.complete(req);
  const nlohmann::json line = {{"hash", req.hash()}, {"request", req.to_json()}, {"response", response}};
  std::lock_guard lock(mu_);
  std::ofstream out(path_, std::ios::app);
  out << line.dump() << '\n';
  if (!out) throw std::runtime_error("LoggingProvider: write failed for " + path_.string());
  return response;
}

ReplayProvider::ReplayProvider(const std::filesystem::path& log_path, std::string name) : name_(std::move(name)) {
  std::ifstream in(log_path);
  if (!in) throw std::runtime_error("ReplayProvider: cannot open " + log_path.string());
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    responses_[j.at("hash").get<std::string>()] = j.at("response").get<std::string>();
  }
}

std::string ReplayProvider::complete(const ProviderRequest& req) {
  const auto it = responses_.find(req.hash());
  if (it == responses_.end()) throw PermanentError("replay: no logged response for request " + req.hash());
  return it->second;
}

// ---------------------------------------------------------------- retry

std::string call_with_retry(Provider& p, const ProviderRequest& req, const RetryPolicy& policy, int* retries) {
  if (policy.max_retries < 0) throw std::invalid_argument("call_with_retry: max_retries must be >= 0");
  double delay = policy.initial_s;
  for (int attempt = 0;; ++attempt) {
    if (retries) *retries = attempt;
    try {
      return p.complete(req);
    } catch (const TransientError&) {
      if (attempt >= policy.max_retries) throw;
    }
    std::this_thread::sleep_for(std::chrono::duration<double>(std::min(delay, policy.max_s)));
    delay *= 2;
  }
}

}  // namespace tridiff::caption
