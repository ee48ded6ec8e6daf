#include "tridiff/numerics/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <json.hpp>

namespace tridiff::num {

static_assert(std::endian::native == std::endian::little, "TTNS IO assumes a little-endian host");

namespace {

template <class T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& in) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) throw std::runtime_error("TTNS: truncated stream");
  return v;
}

}  // namespace

void write_tensor(std::ostream& out, const Tensor& t) {
  out.write("TTNS", 4);
  put<std::uint32_t>(out, kTtnsVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) put<std::uint64_t>(out, static_cast<std::uint64_t>(d));
  out.write(reinterpret_cast<const char*>(t.ptr()), static_cast<std::streamsize>(t.numel() * sizeof(float)));
  if (!out) throw std::runtime_error("TTNS: write failed");
}

Tensor read_tensor(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "TTNS", 4) != 0) throw std::runtime_error("TTNS: bad magic");
  const auto version = get<std::uint32_t>(in);
  if (version != kTtnsVersion) throw std::runtime_error("TTNS: unsupported version " + std::to_string(version));
  const auto rank = get<std::uint32_t>(in);
  if (rank > 16) throw std::runtime_error("TTNS: implausible rank");
  Shape shape(rank);
  for (auto& d : shape) d = static_cast<std::int64_t>(get<std::uint64_t>(in));
  std::vector<float> data(static_cast<std::size_t>(shape_numel(shape)));
  if (!in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float)))) {
    throw std::runtime_error("TTNS: truncated payload");
  }
  return Tensor(std::move(shape), std::move(data));
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  write_tensor(out, t);
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return read_tensor(in);
}

void save_bundle(const std::filesystem::path& path, const TensorBundle& bundle) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  nlohmann::json index = nlohmann::json::array();
  for (const auto& [name, t] : bundle) {
    write_tensor(out, t);
    index.push_back({{"name", name}, {"shape", t.shape()}});
  }
  std::ofstream meta(path.string() + ".json");
  meta << nlohmann::json{{"format", "TTNS"}, {"version", kTtnsVersion}, {"tensors", index}}.dump(2) << '\n';
  if (!meta) throw std::runtime_error("cannot write bundle index for " + path.string());
}

TensorBundle load_bundle(const std::filesystem::path& path) {
  std::ifstream meta(path.string() + ".json");
  if (!meta) throw std::runtime_error("missing bundle index for " + path.string());
  const auto index = nlohmann::json::parse(meta);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  TensorBundle bundle;
  for (const auto& entry : index.at("tensors")) {
    Tensor t = read_tensor(in);
    if (t.shape() != entry.at("shape").get<Shape>()) throw std::runtime_error("bundle index/shape mismatch");
    bundle.emplace(entry.at("name").get<std::string>(), std::move(t));
  }
  return bundle;
}

}  // namespace tridiff::num
