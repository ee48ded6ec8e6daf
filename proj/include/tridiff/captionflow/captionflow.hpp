#pragma once

#include <atomic>
#include <chrono>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "tridiff/synthdata/synthdata.hpp"

namespace tridiff::caption {

// Verbatim instruction bodies of the three prompts.
inline constexpr const char* kCaptionPrompt =
    "I will show you a picture of a 3D object. Briefly describe the appearance and shape of it.";
inline constexpr const char* kSimplifyPrompt =
    "You will be given a description of an object. Please compress the description into one or two sentences. "
    "The details about the visual appearance and features must be retained. Please remove the irrelevant comments "
    "and contents that are not related to the object. Some examples are listed as follows:";
inline constexpr const char* kFusePrompt =
    "Given a set of descriptions about the same 3D object, conclude these descriptions into one concise caption. "
    "The descriptions may contain contradictory information as each description comes from a certain view. In the "
    "output caption, keep the most specific information with more evidence and details. DO NOT generate ambiguous, "
    "contradictory or repeated information. Here is an example:";

inline constexpr int kMaxViews = 10;

struct SimplifyExample {
  std::string description;
  std::string caption;
};
struct FewShot {
  std::vector<SimplifyExample> simplify;  // 8 slots
  std::vector<std::string> fuse_descriptions;
  std::string fuse_caption;
};
/// Loads the bundled caption_fewshot.json (or `path` when given).
FewShot load_fewshot(const std::filesystem::path& path = {});

/// "USER: <image> <caption prompt>\nASSISTANT:"
std::string render_caption_prompt();
/// Instruction, the 8 examples as USER/ASSISTANT pairs, then the description.
std::string render_simplify_prompt(const std::string& description, const FewShot& shots);
/// Instruction, the example (numbered descriptions and its caption), then the list.
std::string render_fuse_prompt(const std::vector<std::string>& descriptions, const FewShot& shots);

enum class Stage { Caption, Simplify, Fuse };
std::string stage_name(Stage s);

/// Standard base64 without line breaks.
std::string base64_encode(std::string_view bytes);

struct ProviderRequest {
  Stage stage = Stage::Caption;
  std::string model;
  double temperature = 0.2;
  std::string prompt;                 // fully rendered text
  std::vector<std::string> inputs;    // slot contents: description(s)
  std::string image_base64;           // caption stage only
  std::string object_id;
  int view = -1;

  nlohmann::json to_json() const;
  /// SHA-256 of the canonical JSON form.
  std::string hash() const;
};

/// Retryable failure (transport error, 429, 5xx).
class TransientError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
/// Non-retryable failure (4xx, malformed response, missing replay entry).
class PermanentError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Provider {
 public:
  virtual ~Provider() = default;
  /// Thread-safe.
  virtual std::string complete(const ProviderRequest& req) = 0;
  virtual std::string name() const = 0;
};

struct ProviderConfig {
  std::string endpoint;            // e.g. https://host/v1/chat/completions
  std::string model;
  std::string auth_env = "TRIDIFF_API_KEY";  // environment variable holding the bearer token
  double timeout_s = 60.0;
  int max_retries = 3;
  int concurrency = 4;
  double temperature = 0.2;
  double backoff_initial_s = 1.0;  // doubled per retry
  double backoff_max_s = 30.0;

  void validate() const;
  static ProviderConfig from_json(const nlohmann::json& j);
};

/// Deterministic stand-in. Caption requests answer with the object's caption
/// from `captions` (falling back to "a 3D object"); simplify echoes its input;
/// fuse returns the most frequent input, ties broken by first occurrence.
class MockProvider final : public Provider {
 public:
  explicit MockProvider(std::map<std::string, std::string> captions = {}, std::string name = "mock");
  std::string complete(const ProviderRequest& req) override;
  std::string name() const override { return name_; }

  /// The next n calls throw TransientError before answering normally.
  void fail_next(int n) { pending_failures_ = n; }
  /// Every call sleeps this long while counted as in flight.
  void set_latency(std::chrono::milliseconds ms) { latency_ = ms; }
  int calls() const { return calls_.load(); }
  int max_in_flight() const { return max_in_flight_.load(); }

 private:
  std::map<std::string, std::string> captions_;
  std::string name_;
  std::atomic<int> pending_failures_{0};
  std::atomic<int> calls_{0};
  std::atomic<int> in_flight_{0};
  std::atomic<int> max_in_flight_{0};
  std::chrono::milliseconds latency_{0};
};

/// JSON chat-completion client: POST {model, temperature, messages} with the
/// image as a base64 data URL; reads choices[0].message.content.
class HttpProvider final : public Provider {
 public:
  explicit HttpProvider(ProviderConfig cfg);
  std::string complete(const ProviderRequest& req) override;
  std::string name() const override { return "http:" + cfg_.model; }
  static nlohmann::json request_body(const ProviderRequest& req);

 private:
  ProviderConfig cfg_;
};

/// Appends {hash, request, response} per call to a JSONL log.
class LoggingProvider final : public Provider {
 public:
  LoggingProvider(Provider& inner, std::filesystem::path log_path);
  std::string complete(const ProviderRequest& req) override;
  std::string name() const override { return inner_.name(); }

 private:
  Provider& inner_;
  std::filesystem::path path_;
  std::mutex mu_;
};

/// Answers from a LoggingProvider log by request hash.
class ReplayProvider final : public Provider {
 public:
  explicit ReplayProvider(const std::filesystem::path& log_path, std::string name = "replay");
  std::string complete(const ProviderRequest& req) override;
  std::string name() const override { return name_; }
  std::size_t size() const { return responses_.size(); }

 private:
  std::map<std::string, std::string> responses_;
  std::string name_;
};

struct RetryPolicy {
  int max_retries = 3;
  double initial_s = 1.0;
  double max_s = 30.0;
};
/// Calls the provider, retrying TransientError with delays initial_s * 2^k
/// (capped). `retries` receives the number of retries used. Rethrows the last
/// error when attempts run out; PermanentError is never retried.
std::string call_with_retry(Provider& p, const ProviderRequest& req, const RetryPolicy& policy, int* retries = nullptr);

struct Providers {
  Provider* caption = nullptr;
  Provider* simplify = nullptr;
  Provider* fuse = nullptr;
};

struct PipelineOptions {
  int concurrency = 4;  // cap on in-flight provider calls
  RetryPolicy retry;
  std::string caption_model = "llava-13b";
  std::string simplify_model = "vicuna-13b-v1.5";
  std::string fuse_model = "gpt-3.5-turbo";
  double temperature = 0.2;
  std::size_t max_caption_chars = 1000;
  bool resume = true;
  FewShot fewshot;  // loaded from the bundled asset when empty
};

struct ViewCaption {
  int view = 0;
  std::string image;
  std::string raw;
  std::string simplified;
  std::string error;
  int retries = 0;
};

struct CaptionRecord {
  std::string id;
  std::vector<ViewCaption> views;
  std::string fused;
  bool is_fused = false;
  std::string error;  // why fusion did not happen
  std::map<std::string, std::string> providers;  // stage -> provider name/model
  std::string started_at, finished_at;           // ISO 8601 UTC

  nlohmann::json to_json() const;
  static CaptionRecord from_json(const nlohmann::json& j);
};

struct PipelineStats {
  int captioned = 0;
  int simplified = 0;
  int fused = 0;
  int failed = 0;
  int skipped = 0;  // already fused in the output file
  bool operator==(const PipelineStats&) const = default;
};

/// Single-view steps. Empty raw captions are not simplified (no call).
std::string caption_view(const std::filesystem::path& image, Provider& p, const PipelineOptions& opts,
                         int* retries = nullptr, const std::string& object_id = {}, int view = -1);
std::string simplify_caption(const std::string& raw, Provider& p, const PipelineOptions& opts, int* retries = nullptr);
/// Throws std::invalid_argument when no non-empty description is given.
std::string fuse_captions(const std::vector<std::string>& simplified, Provider& p, const PipelineOptions& opts,
                          int* retries = nullptr);

/// Captions every manifest entry (image paths relative to `root`) and
/// appends one record per processed object to `out_path`. With resume on,
/// ids already fused in `out_path` are skipped without provider calls.
PipelineStats run_pipeline(const synth::DatasetManifest& manifest, const std::filesystem::path& root,
                           const Providers& providers, const std::filesystem::path& out_path,
                           const PipelineOptions& opts = {});

/// Latest record per id from a JSONL file; missing file gives an empty map.
std::map<std::string, CaptionRecord> read_records(const std::filesystem::path& path);

/// Summary over fused records: sample count and mean caption
/// length in words.
struct DatasetStats {
  std::size_t samples = 0;
  double mean_length = 0;
};
DatasetStats dataset_stats(const std::filesystem::path& records_path);

}  // namespace tridiff::caption
