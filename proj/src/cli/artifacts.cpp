#include "tridiff/cli/artifacts.hpp"

#include <algorithm>
#include <ctime>
#include <fstream>

#include "tridiff/numerics/hash.hpp"

namespace tridiff::cli {

namespace fs = std::filesystem;

namespace {

std::string iso_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace

nlohmann::json ArtifactRecord::to_json() const {
  return {{"stage", stage},       {"key", key},           {"content_hash", content_hash},
          {"config_hash", config_hash}, {"upstream", upstream}, {"created", created},
          {"info", info}};
}

ArtifactStore::ArtifactStore(fs::path root) : root_(fs::absolute(std::move(root))) {
  fs::create_directories(root_ / "store");
  load_index();
}

void ArtifactStore::load_index() {
  index_ = {{"artifacts", nlohmann::json::object()}, {"latest", nlohmann::json::object()}};
  std::ifstream in(root_ / "index.json");
  if (!in) return;
  try {
    in >> index_;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("corrupt artifact index " + (root_ / "index.json").string() + ": " + e.what());
  }
  if (!index_.is_object() || !index_.contains("artifacts") || !index_.contains("latest")) {
    throw std::runtime_error("corrupt artifact index " + (root_ / "index.json").string());
  }
}

void ArtifactStore::save_index() const {
  const fs::path tmp = root_ / "index.json.tmp";
  {
    std::ofstream out(tmp);
    out << index_.dump(2) << '\n';
    if (!out) throw std::runtime_error("cannot write artifact index under " + root_.string());
  }
  fs::rename(tmp, root_ / "index.json");
}

std::string ArtifactStore::stage_key(const std::string& stage, const std::string& config_hash,
                                     const std::vector<std::string>& upstream) {
  std::string s = stage + "\n" + config_hash + "\n";
  for (const auto& u : upstream) s += u + "\n";
  return num::sha256_hex(s);
}

std::string ArtifactStore::hash_directory(const fs::path& dir) {
  std::vector<std::pair<std::string, std::string>> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    files.emplace_back(fs::relative(e.path(), dir).generic_string(), num::sha256_file(e.path()));
  }
  std::sort(files.begin(), files.end());
  std::string s;
  for (const auto& [name, digest] : files) s += name + "\t" + digest + "\n";
  return num::sha256_hex(s);
}

ArtifactRecord ArtifactStore::from_json(const nlohmann::json& j) const {
  ArtifactRecord r;
  r.stage = j.at("stage");
  r.key = j.at("key");
  r.content_hash = j.at("content_hash");
  r.config_hash = j.at("config_hash");
  r.upstream = j.at("upstream").get<std::vector<std::string>>();
  r.created = j.value("created", "");
  r.info = j.value("info", nlohmann::json::object());
  r.dir = root_ / "store" / r.content_hash;
  return r;
}

std::optional<ArtifactRecord> ArtifactStore::lookup(const std::string& key) const {
  const auto& arts = index_.at("artifacts");
  if (!arts.contains(key)) return std::nullopt;
  ArtifactRecord r = from_json(arts.at(key));
  if (!fs::is_directory(r.dir) || hash_directory(r.dir) != r.content_hash) return std::nullopt;
  return r;
}

std::optional<ArtifactRecord> ArtifactStore::latest(const std::string& stage) const {
  const auto& latest = index_.at("latest");
  if (!latest.contains(stage)) return std::nullopt;
  return lookup(latest.at(stage).get<std::string>());
}

fs::path ArtifactStore::staging(const std::string& stage, const std::string& key) const {
  const fs::path dir = root_ / "staging" / (stage + "-" + key.substr(0, 16));
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

ArtifactRecord ArtifactStore::commit(const std::string& stage, const std::string& key, const std::string& config_hash,
                                     const std::vector<std::string>& upstream, const fs::path& staging_dir,
                                     nlohmann::json info) {
  ArtifactRecord r;
  r.stage = stage;
  r.key = key;
  r.content_hash = hash_directory(staging_dir);
  r.config_hash = config_hash;
  r.upstream = upstream;
  r.created = iso_now();
  r.info = std::move(info);
  r.dir = root_ / "store" / r.content_hash;
  if (fs::exists(r.dir)) {
    // Identical content is already stored.
    fs::remove_all(staging_dir);
  } else {
    fs::rename(staging_dir, r.dir);
  }
  index_["artifacts"][key] = r.to_json();
  index_["latest"][stage] = key;
  save_index();
  return r;
}

}  // namespace tridiff::cli
