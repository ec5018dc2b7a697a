#pragma once

// Length-prefixed binary container for named float64 tensors.
//
// Layout (all integers little-endian u64 unless noted):
//   magic      8 bytes
//   version    u32
//   header     u64 length + UTF-8 JSON text
//   count      number of tensors
//   per tensor: u64 name length, name bytes, u64 rank, rank x u64 dims,
//               numel x float64 (IEEE-754, little-endian)

#include <filesystem>
#include <string>
#include <vector>

#include "ctm/tensor.hpp"
#include "json.hpp"

namespace ctm {

struct NamedTensor {
  std::string name;
  Tensor value;
};

struct TensorFile {
  nlohmann::json header;
  std::vector<NamedTensor> tensors;

  const Tensor& get(const std::string& name) const;
};

inline constexpr std::uint32_t kTensorFileVersion = 1;

// `magic` must be exactly 8 characters.
void write_tensor_file(const std::filesystem::path& path, const std::string& magic,
                       const nlohmann::json& header, const std::vector<NamedTensor>& tensors);

// Throws std::runtime_error on a missing file, wrong magic, unknown version or truncation.
TensorFile read_tensor_file(const std::filesystem::path& path, const std::string& magic);

// Writes `text` to `path` via a temporary file and rename.
void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace ctm
