#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>

#include "tridiff/numerics/tensor.hpp"

// TTNS container: "TTNS", u32 version, u32 rank, u64 dims[rank], then the
// row-major float32 payload, all little-endian.

namespace tridiff::num {

inline constexpr std::uint32_t kTtnsVersion = 1;

void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);
void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

/// Named tensors stored as consecutive TTNS records, with a JSON index at
/// `path + ".json"` listing names and shapes in file order.
using TensorBundle = std::map<std::string, Tensor>;
void save_bundle(const std::filesystem::path& path, const TensorBundle& bundle);
TensorBundle load_bundle(const std::filesystem::path& path);

}  // namespace tridiff::num
