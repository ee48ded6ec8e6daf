#include <fstream>
#include <sstream>

#include "tridiff/captionflow/captionflow.hpp"
#include "tridiff/numerics/hash.hpp"

namespace tridiff::caption {

FewShot load_fewshot(const std::filesystem::path& path) {
  const std::filesystem::path p =
      path.empty() ? std::filesystem::path(TRIDIFF_ASSET_DIR) / "caption_fewshot.json" : path;
  std::ifstream in(p);
  if (!in) throw std::runtime_error("load_fewshot: cannot open " + p.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("load_fewshot: " + p.string() + ": " + e.what());
  }
  FewShot out;
  for (const auto& ex : j.at("simplify")) {
    out.simplify.push_back({ex.at("description").get<std::string>(), ex.at("caption").get<std::string>()});
  }
  const auto& fuse = j.at("fuse");
  out.fuse_descriptions = fuse.at("descriptions").get<std::vector<std::string>>();
  out.fuse_caption = fuse.at("caption").get<std::string>();
  if (out.simplify.empty() || out.fuse_descriptions.empty() || out.fuse_caption.empty()) {
    throw std::runtime_error("load_fewshot: " + p.string() + " has empty example slots");
  }
  return out;
}

std::string render_caption_prompt() { return std::string("USER: <image> ") + kCaptionPrompt + "\nASSISTANT:"; }

std::string render_simplify_prompt(const std::string& description, const FewShot& shots) {
  std::ostringstream os;
  os << "USER: " << kSimplifyPrompt << "\n";
  for (const auto& ex : shots.simplify) os << "\nUSER: " << ex.description << "\nASSISTANT: " << ex.caption << "\n";
  os << "\nUSER: " << description << "\nASSISTANT:";
  return os.str();
}

namespace {
void numbered(std::ostringstream& os, const std::vector<std::string>& items) {
  for (std::size_t i = 0; i < items.size(); ++i) os << "\n" << (i + 1) << ". " << items[i];
}
}  // namespace

std::string render_fuse_prompt(const std::vector<std::string>& descriptions, const FewShot& shots) {
  std::ostringstream os;
  os << "USER: " << kFusePrompt << "\n\nUSER:";
  numbered(os, shots.fuse_descriptions);
  os << "\nASSISTANT: " << shots.fuse_caption << "\n\nUSER:";
  numbered(os, descriptions);
  os << "\nASSISTANT:";
  return os.str();
}

std::string stage_name(Stage s) {
  switch (s) {
    case Stage::Caption: return "caption";
    case Stage::Simplify: return "simplify";
    case Stage::Fuse: return "fuse";
  }
  return "unknown";
}

nlohmann::json ProviderRequest::to_json() const {
  return {{"stage", stage_name(stage)},
          {"model", model},
          {"temperature", temperature},
          {"prompt", prompt},
          {"inputs", inputs},
          {"image_sha256", image_base64.empty() ? std::string() : num::sha256_hex(image_base64)},
          {"object_id", object_id},
          {"view", view}};
}

std::string ProviderRequest::hash() const { return num::sha256_hex(to_json().dump()); }

}  // namespace tridiff::caption
