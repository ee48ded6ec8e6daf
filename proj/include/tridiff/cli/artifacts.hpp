#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace tridiff::cli {

struct ArtifactRecord {
  std::string stage;
  std::string key;           // hash of stage config and upstream content hashes
  std::string content_hash;  // hash of the artifact's files
  std::string config_hash;   // hash of the stage config text
  std::vector<std::string> upstream;  // content hashes of the inputs
  std::string created;                // ISO 8601 UTC
  nlohmann::json info;                // stage summary (not hashed)
  std::filesystem::path dir;          // absolute location of the files

  nlohmann::json to_json() const;
};

/// Content-addressed artifact tree:
///   <root>/store/<content_hash>/...   immutable stage outputs
///   <root>/index.json                 cache key -> record, stage -> latest key
/// Outputs are written to a staging directory and moved into the store on
/// commit, so an interrupted stage leaves no partial artifact behind.
class ArtifactStore {
 public:
  explicit ArtifactStore(std::filesystem::path root);

  const std::filesystem::path& root() const { return root_; }
  static std::string stage_key(const std::string& stage, const std::string& config_hash,
                               const std::vector<std::string>& upstream);

  /// The record for `key` if its files are still present and intact.
  std::optional<ArtifactRecord> lookup(const std::string& key) const;
  /// Most recently committed record of the stage, if intact.
  std::optional<ArtifactRecord> latest(const std::string& stage) const;

  /// Fresh empty directory for a stage's outputs.
  std::filesystem::path staging(const std::string& stage, const std::string& key) const;
  ArtifactRecord commit(const std::string& stage, const std::string& key, const std::string& config_hash,
                        const std::vector<std::string>& upstream, const std::filesystem::path& staging_dir,
                        nlohmann::json info);

  /// SHA-256 over sorted relative paths and file digests.
  static std::string hash_directory(const std::filesystem::path& dir);

 private:
  void load_index();
  void save_index() const;
  ArtifactRecord from_json(const nlohmann::json& j) const;

  std::filesystem::path root_;
  nlohmann::json index_;
};

}  // namespace tridiff::cli
