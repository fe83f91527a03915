#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "epiguide/geometry.hpp"
#include "epiguide/matrix.hpp"
#include "epiguide/robustf.hpp"

namespace epiguide {

// Tensor file layout (all little-endian):
//   "EPGT" | u16 version = 1 | u8 dtype | u8 ndim | ndim x u32 dims | payload
// dtype 0 is f32, 1 is u8; payload is row-major.
enum class DType : std::uint8_t { F32 = 0, U8 = 1 };

struct Tensor {
  DType dtype = DType::F32;
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> payload;  // raw little-endian bytes

  std::size_t element_count() const;

  static Tensor from_f32(std::vector<std::uint32_t> dims, std::span<const float> values);
  static Tensor from_u8(std::vector<std::uint32_t> dims, std::span<const std::uint8_t> values);
  // Rounds each entry to f32.
  static Tensor from_matrix(const Matrix& m);

  std::vector<float> f32_values() const;
  Matrix to_matrix() const;  // 2-D f32 tensors only

  bool operator==(const Tensor&) const = default;
};

std::vector<std::uint8_t> encode_tensor(const Tensor& t);
// Decodes one tensor starting at `offset` and advances it past the payload.
Tensor decode_tensor(std::span<const std::uint8_t> bytes, std::size_t& offset);

void write_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor read_tensor(const std::filesystem::path& path);

// Named tensor archive:
//   "EPGA" | u16 version = 1 | u32 count | count x (u16 name length | name | tensor)
using TensorArchive = std::vector<std::pair<std::string, Tensor>>;

void write_archive(const std::filesystem::path& path, const TensorArchive& archive);
TensorArchive read_archive(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text(const std::filesystem::path& path, const std::string& text);

// One image of a benchmark manifest (one JSON object per line).
struct ManifestRecord {
  int image_id = 0;
  int instance_id = 0;
  int category_id = 0;
  std::string split;         // "train" or "test"
  std::string feature_path;  // relative to the manifest directory
  std::optional<CameraView> pose;
  std::optional<std::map<int, double>> overlaps;
  std::optional<std::string> correspondences_path;
};

std::string manifest_line(const ManifestRecord& record);
void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRecord>& records);
// Validates every line; errors carry the 1-based line number.
std::vector<ManifestRecord> load_manifest(const std::filesystem::path& path);

// JSON array of [x1, y1, x2, y2].
Correspondences parse_correspondences(const std::string& json_text);
Correspondences read_correspondences(const std::filesystem::path& path);
std::string correspondences_json(const Correspondences& c);
// JSON object mapping partner image id to a correspondence array (this image is image 1).
std::map<int, Correspondences> read_pair_correspondences(const std::filesystem::path& path);
std::string pair_correspondences_json(const std::map<int, Correspondences>& pairs);

}  // namespace epiguide
