#include <algorithm>
#include <atomic>
#include <ctime>
#include <fstream>
#include <future>
#include <mutex>
#include <semaphore>
#include <set>
#include <sstream>
#include <thread>

#include "tridiff/captionflow/captionflow.hpp"

namespace tridiff::caption {

namespace {

std::string iso_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("image unreadable: " + p.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

const FewShot& shots_for(const PipelineOptions& opts) {
  if (!opts.fewshot.simplify.empty()) return opts.fewshot;
  static const FewShot bundled = load_fewshot();
  return bundled;
}

// Caps in-flight calls across every stage and worker.
class Throttled final : public Provider {
 public:
  Throttled(Provider& inner, std::counting_semaphore<>& sem) : inner_(inner), sem_(sem) {}
  std::string complete(const ProviderRequest& req) override {
    sem_.acquire();
    struct Release {
      std::counting_semaphore<>& s;
      ~Release() { s.release(); }
    } release{sem_};
    return inner_.complete(req);
  }
  std::string name() const override { return inner_.name(); }

 private:
  Provider& inner_;
  std::counting_semaphore<>& sem_;
};

class Appender {
 public:
  explicit Appender(const std::filesystem::path& path) : out_(path, std::ios::app) {
    if (!out_) throw std::runtime_error("run_pipeline: cannot open output " + path.string());
  }
  void write(const CaptionRecord& r) {
    std::lock_guard lock(mu_);
    out_ << r.to_json().dump() << '\n';
    out_.flush();
    if (!out_) throw std::runtime_error("run_pipeline: write failed");
  }

 private:
  std::ofstream out_;
  std::mutex mu_;
};

}  // namespace

std::string caption_view(const std::filesystem::path& image, Provider& p, const PipelineOptions& opts, int* retries,
                         const std::string& object_id, int view) {
  ProviderRequest req;
  req.stage = Stage::Caption;
  req.model = opts.caption_model;
  req.temperature = opts.temperature;
  req.prompt = render_caption_prompt();
  req.image_base64 = base64_encode(read_bytes(image));
  req.object_id = object_id;
  req.view = view;
  return trim(call_with_retry(p, req, opts.retry, retries));
}

std::string simplify_caption(const std::string& raw, Provider& p, const PipelineOptions& opts, int* retries) {
  if (retries) *retries = 0;
  const std::string text = trim(raw);
  if (text.empty()) return {};
  ProviderRequest req;
  req.stage = Stage::Simplify;
  req.model = opts.simplify_model;
  req.temperature = opts.temperature;
  req.prompt = render_simplify_prompt(text, shots_for(opts));
  req.inputs = {text};
  return trim(call_with_retry(p, req, opts.retry, retries));
}

std::string fuse_captions(const std::vector<std::string>& simplified, Provider& p, const PipelineOptions& opts,
                          int* retries) {
  std::vector<std::string> items;
  for (const auto& s : simplified) {
    if (auto t = trim(s); !t.empty()) items.push_back(std::move(t));
  }
  if (items.empty()) throw std::invalid_argument("fuse_captions: no non-empty descriptions");
  ProviderRequest req;
  req.stage = Stage::Fuse;
  req.model = opts.fuse_model;
  req.temperature = opts.temperature;
  req.prompt = render_fuse_prompt(items, shots_for(opts));
  req.inputs = items;
  std::string out = trim(call_with_retry(p, req, opts.retry, retries));
  if (out.size() > opts.max_caption_chars) out = trim(out.substr(0, opts.max_caption_chars));
  return out;
}

nlohmann::json CaptionRecord::to_json() const {
  nlohmann::json vs = nlohmann::json::array();
  for (const auto& v : views) {
    std::string status = "ok";
    if (!v.error.empty()) status = "failed";
    else if (v.raw.empty()) status = "empty";
    vs.push_back({{"view", v.view},
                  {"image", v.image},
                  {"raw", v.raw},
                  {"simplified", v.simplified},
                  {"status", status},
                  {"retries", v.retries},
                  {"error", v.error}});
  }
  return {{"id", id},
          {"views", vs},
          {"fused", fused},
          {"status", is_fused ? "fused" : "unfused"},
          {"error", error},
          {"providers", providers},
          {"started_at", started_at},
          {"finished_at", finished_at}};
}

CaptionRecord CaptionRecord::from_json(const nlohmann::json& j) {
  CaptionRecord r;
  r.id = j.at("id").get<std::string>();
  for (const auto& v : j.at("views")) {
    ViewCaption vc;
    vc.view = v.value("view", 0);
    vc.image = v.value("image", std::string());
    vc.raw = v.value("raw", std::string());
    vc.simplified = v.value("simplified", std::string());
    vc.error = v.value("error", std::string());
    vc.retries = v.value("retries", 0);
    r.views.push_back(std::move(vc));
  }
  if (r.views.size() > static_cast<std::size_t>(kMaxViews)) {
    throw std::runtime_error("CaptionRecord: more than 10 views for " + r.id);
  }
  r.fused = j.value("fused", std::string());
  r.is_fused = j.value("status", std::string()) == "fused";
  r.error = j.value("error", std::string());
  r.providers = j.value("providers", std::map<std::string, std::string>{});
  r.started_at = j.value("started_at", std::string());
  r.finished_at = j.value("finished_at", std::string());
  return r;
}

std::map<std::string, CaptionRecord> read_records(const std::filesystem::path& path) {
  std::map<std::string, CaptionRecord> out;
  std::ifstream in(path);
  if (!in) return out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    try {
      auto r = CaptionRecord::from_json(nlohmann::json::parse(line));
      out[r.id] = std::move(r);
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

PipelineStats run_pipeline(const synth::DatasetManifest& manifest, const std::filesystem::path& root,
                           const Providers& providers, const std::filesystem::path& out_path,
                           const PipelineOptions& opts_in) {
  if (!providers.caption || !providers.simplify || !providers.fuse) {
    throw std::invalid_argument("run_pipeline: all three providers are required");
  }
  if (opts_in.concurrency < 1) throw std::invalid_argument("run_pipeline: concurrency must be >= 1");
  PipelineOptions opts = opts_in;
  if (opts.fewshot.simplify.empty()) opts.fewshot = load_fewshot();

  if (out_path.has_parent_path()) std::filesystem::create_directories(out_path.parent_path());
  std::set<std::string> done;
  if (opts.resume) {
    for (const auto& [id, r] : read_records(out_path)) {
      if (r.is_fused) done.insert(id);
    }
  }
  Appender appender(out_path);

  std::counting_semaphore<> sem(opts.concurrency);
  Throttled cap_p(*providers.caption, sem), simp_p(*providers.simplify, sem), fuse_p(*providers.fuse, sem);
  const std::map<std::string, std::string> meta = {
      {"caption", providers.caption->name() + "/" + opts.caption_model},
      {"simplify", providers.simplify->name() + "/" + opts.simplify_model},
      {"fuse", providers.fuse->name() + "/" + opts.fuse_model}};

  std::vector<const synth::ManifestEntry*> todo;
  PipelineStats stats;
  for (const auto& e : manifest.entries) {
    if (done.count(e.id)) ++stats.skipped;
    else todo.push_back(&e);
  }

  std::atomic<int> captioned{0}, simplified{0}, fused{0}, failed{0};
  std::atomic<std::size_t> next{0};
  std::mutex err_mu;
  std::exception_ptr fatal;

  auto process = [&](const synth::ManifestEntry& e) {
    CaptionRecord rec;
    rec.id = e.id;
    rec.providers = meta;
    rec.started_at = iso_now();
    const std::size_t n = std::min<std::size_t>(e.views.size(), kMaxViews);
    rec.views.resize(n);
    std::vector<std::future<void>> jobs;
    for (std::size_t v = 0; v < n; ++v) {
      jobs.push_back(std::async(std::launch::async, [&, v] {
        ViewCaption& vc = rec.views[v];
        vc.view = static_cast<int>(v);
        vc.image = e.views[v].image;
        int r1 = 0, r2 = 0;
        try {
          vc.raw = caption_view(root / e.views[v].image, cap_p, opts, &r1, e.id, vc.view);
          vc.simplified = simplify_caption(vc.raw, simp_p, opts, &r2);
        } catch (const std::exception& ex) {
          vc.error = ex.what();
        }
        vc.retries = r1 + r2;
      }));
    }
    for (auto& j : jobs) j.get();

    std::vector<std::string> simp;
    bool any_raw = false;
    for (const auto& vc : rec.views) {
      any_raw = any_raw || !vc.raw.empty();
      if (!vc.simplified.empty()) simp.push_back(vc.simplified);
    }
    if (any_raw) ++captioned;
    if (!simp.empty()) {
      ++simplified;
      try {
        rec.fused = fuse_captions(simp, fuse_p, opts);
        rec.is_fused = !rec.fused.empty();
        if (!rec.is_fused) rec.error = "empty fused caption";
      } catch (const std::exception& ex) {
        rec.error = std::string("fuse: ") + ex.what();
      }
    } else {
      rec.error = "no simplified captions";
    }
    if (rec.is_fused) ++fused;
    else ++failed;
    rec.finished_at = iso_now();
    appender.write(rec);
  };

  auto worker = [&] {
    for (;;) {
      const std::size_t i = next++;
      if (i >= todo.size()) return;
      try {
        process(*todo[i]);
      } catch (...) {
        std::lock_guard lock(err_mu);
        if (!fatal) fatal = std::current_exception();
        next = todo.size();
        return;
      }
    }
  };
  const int n_workers = std::max(1, std::min<int>(opts.concurrency, static_cast<int>(todo.size())));
  std::vector<std::thread> pool;
  for (int w = 0; w < n_workers; ++w) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (fatal) std::rethrow_exception(fatal);

  stats.captioned = captioned;
  stats.simplified = simplified;
  stats.fused = fused;
  stats.failed = failed;
  return stats;
}

DatasetStats dataset_stats(const std::filesystem::path& records_path) {
  DatasetStats s;
  double words = 0;
  for (const auto& [id, r] : read_records(records_path)) {
    if (!r.is_fused) continue;
    ++s.samples;
    std::istringstream is(r.fused);
    std::string w;
    while (is >> w) words += 1;
  }
  if (s.samples > 0) s.mean_length = words / static_cast<double>(s.samples);
  return s;
}

}  // namespace tridiff::caption
