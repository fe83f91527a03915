#include "epiguide/dataio.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

#include "epiguide/error.hpp"

namespace epiguide {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

static_assert(std::endian::native == std::endian::little, "byte order helpers assume little-endian");

namespace {

constexpr char kTensorMagic[4] = {'E', 'P', 'G', 'T'};
constexpr char kArchiveMagic[4] = {'E', 'P', 'G', 'A'};
constexpr std::uint16_t kVersion = 1;

std::size_t dtype_size(DType d) { return d == DType::F32 ? 4 : 1; }

template <typename T>
void put(std::vector<std::uint8_t>& out, T value) {
  std::uint8_t buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.insert(out.end(), buf, buf + sizeof(T));
}

template <typename T>
T take(std::span<const std::uint8_t> bytes, std::size_t& offset, const char* what) {
  if (offset > bytes.size() || bytes.size() - offset < sizeof(T)) {
    throw Error(ErrorCode::TruncatedPayload, std::string("truncated ") + what);
  }
  T value;
  std::memcpy(&value, bytes.data() + offset, sizeof(T));
  offset += sizeof(T);
  return value;
}

void expect_magic(std::span<const std::uint8_t> bytes, std::size_t& offset, const char (&magic)[4]) {
  if (bytes.size() - offset < 4 || std::memcmp(bytes.data() + offset, magic, 4) != 0) {
    throw Error(ErrorCode::BadMagic, std::string("expected magic ") + std::string(magic, 4));
  }
  offset += 4;
  const auto version = take<std::uint16_t>(bytes, offset, "version");
  if (version != kVersion) {
    throw Error(ErrorCode::BadMagic, "unsupported version " + std::to_string(version));
  }
}

[[noreturn]] void schema(long line, const std::string& what) {
  throw Error(ErrorCode::SchemaViolation, what, line);
}

template <std::size_t N>
std::array<double, N> number_array(const json& j, const char* key, long line) {
  if (!j.contains(key) || !j[key].is_array() || j[key].size() != N) {
    schema(line, std::string("pose.") + key + " must be an array of " + std::to_string(N) + " numbers");
  }
  std::array<double, N> out{};
  for (std::size_t i = 0; i < N; ++i) {
    if (!j[key][i].is_number()) schema(line, std::string("pose.") + key + " has a non-number");
    out[i] = j[key][i].get<double>();
  }
  return out;
}

json pose_json(const CameraView& v) {
  json p;
  json r = json::array(), t = json::array(), k = json::array();
  for (int i = 0; i < 3; ++i) {
    for (int c = 0; c < 3; ++c) {
      r.push_back(v.rotation()(i, c));
      k.push_back(v.intrinsics()(i, c));
    }
    t.push_back(v.translation()(i));
  }
  p["r"] = r;
  p["t"] = t;
  p["k"] = k;
  p["w"] = v.width();
  p["h"] = v.height();
  return p;
}

CameraView parse_pose(const json& p, long line) {
  if (!p.is_object()) schema(line, "pose must be an object or null");
  const auto r = number_array<9>(p, "r", line);
  const auto t = number_array<3>(p, "t", line);
  const auto k = number_array<9>(p, "k", line);
  if (!p.contains("w") || !p["w"].is_number_integer() || !p.contains("h") ||
      !p["h"].is_number_integer()) {
    schema(line, "pose.w and pose.h must be integers");
  }
  Mat3 rm, km;
  for (int i = 0; i < 3; ++i) {
    for (int c = 0; c < 3; ++c) {
      rm(i, c) = r[3 * i + c];
      km(i, c) = k[3 * i + c];
    }
  }
  try {
    return CameraView(rm, Vec3(t[0], t[1], t[2]), km, p["w"].get<int>(), p["h"].get<int>());
  } catch (const Error& e) {
    schema(line, std::string("invalid pose: ") + e.what());
  }
}

Correspondences parse_correspondence_array(const json& arr) {
  if (!arr.is_array()) throw Error(ErrorCode::SchemaViolation, "correspondences must be an array");
  Correspondences out;
  out.reserve(arr.size());
  for (const auto& item : arr) {
    if (!item.is_array() || item.size() != 4) {
      throw Error(ErrorCode::SchemaViolation, "each correspondence must be [x1, y1, x2, y2]");
    }
    double v[4];
    for (int i = 0; i < 4; ++i) {
      if (!item[i].is_number()) throw Error(ErrorCode::SchemaViolation, "non-numeric coordinate");
      v[i] = item[i].get<double>();
    }
    out.push_back({v[0], v[1], v[2], v[3]});
  }
  return out;
}

json correspondence_array(const Correspondences& c) {
  json arr = json::array();
  for (const auto& p : c) arr.push_back(json::array({p.x1, p.y1, p.x2, p.y2}));
  return arr;
}

}  // namespace

std::size_t Tensor::element_count() const {
  std::size_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

Tensor Tensor::from_f32(std::vector<std::uint32_t> dims, std::span<const float> values) {
  Tensor t{DType::F32, std::move(dims), {}};
  if (values.size() != t.element_count()) {
    throw Error(ErrorCode::ShapeMismatch, "value count does not match dims");
  }
  t.payload.resize(values.size() * 4);
  std::memcpy(t.payload.data(), values.data(), t.payload.size());
  return t;
}

Tensor Tensor::from_u8(std::vector<std::uint32_t> dims, std::span<const std::uint8_t> values) {
  Tensor t{DType::U8, std::move(dims), {}};
  if (values.size() != t.element_count()) {
    throw Error(ErrorCode::ShapeMismatch, "value count does not match dims");
  }
  t.payload.assign(values.begin(), values.end());
  return t;
}

Tensor Tensor::from_matrix(const Matrix& m) {
  std::vector<float> v(m.values().begin(), m.values().end());
  return from_f32({static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())}, v);
}

std::vector<float> Tensor::f32_values() const {
  if (dtype != DType::F32) throw Error(ErrorCode::UnsupportedDtype, "tensor is not f32");
  std::vector<float> v(payload.size() / 4);
  std::memcpy(v.data(), payload.data(), v.size() * 4);
  return v;
}

Matrix Tensor::to_matrix() const {
  if (dims.size() != 2) throw Error(ErrorCode::ShapeMismatch, "expected a 2-D tensor");
  const auto v = f32_values();
  Matrix m(static_cast<int>(dims[0]), static_cast<int>(dims[1]));
  std::copy(v.begin(), v.end(), m.values().begin());
  return m;
}

std::vector<std::uint8_t> encode_tensor(const Tensor& t) {
  if (t.dtype != DType::F32 && t.dtype != DType::U8) {
    throw Error(ErrorCode::UnsupportedDtype, "unknown dtype");
  }
  if (t.dims.size() > 255) throw Error(ErrorCode::InvalidArgument, "too many dimensions");
  if (t.payload.size() != t.element_count() * dtype_size(t.dtype)) {
    throw Error(ErrorCode::ShapeMismatch, "payload size does not match dims");
  }
  std::vector<std::uint8_t> out(kTensorMagic, kTensorMagic + 4);
  put<std::uint16_t>(out, kVersion);
  put<std::uint8_t>(out, static_cast<std::uint8_t>(t.dtype));
  put<std::uint8_t>(out, static_cast<std::uint8_t>(t.dims.size()));
  for (auto d : t.dims) put<std::uint32_t>(out, d);
  out.insert(out.end(), t.payload.begin(), t.payload.end());
  return out;
}

Tensor decode_tensor(std::span<const std::uint8_t> bytes, std::size_t& offset) {
  expect_magic(bytes, offset, kTensorMagic);
  const auto dtype = take<std::uint8_t>(bytes, offset, "dtype");
  if (dtype > 1) throw Error(ErrorCode::UnsupportedDtype, "dtype " + std::to_string(dtype));
  const auto ndim = take<std::uint8_t>(bytes, offset, "ndim");
  Tensor t;
  t.dtype = static_cast<DType>(dtype);
  for (int i = 0; i < ndim; ++i) t.dims.push_back(take<std::uint32_t>(bytes, offset, "dims"));
  const std::size_t n = t.element_count() * dtype_size(t.dtype);
  if (bytes.size() - offset < n) {
    throw Error(ErrorCode::TruncatedPayload, "payload needs " + std::to_string(n) + " bytes, " +
                                                 std::to_string(bytes.size() - offset) + " left");
  }
  t.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(offset),
                   bytes.begin() + static_cast<std::ptrdiff_t>(offset + n));
  offset += n;
  return t;
}

std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::Io, "write failed for " + path.string());
}

void write_text(const fs::path& path, const std::string& text) {
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

void write_tensor(const fs::path& path, const Tensor& t) { write_file(path, encode_tensor(t)); }

Tensor read_tensor(const fs::path& path) {
  const auto bytes = read_file(path);
  std::size_t offset = 0;
  Tensor t = decode_tensor(bytes, offset);
  if (offset != bytes.size()) {
    throw Error(ErrorCode::TruncatedPayload, "trailing bytes after tensor payload in " + path.string());
  }
  return t;
}

void write_archive(const fs::path& path, const TensorArchive& archive) {
  std::vector<std::uint8_t> out(kArchiveMagic, kArchiveMagic + 4);
  put<std::uint16_t>(out, kVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(archive.size()));
  for (const auto& [name, tensor] : archive) {
    if (name.size() > 0xFFFF) throw Error(ErrorCode::InvalidArgument, "tensor name too long");
    put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    const auto blob = encode_tensor(tensor);
    out.insert(out.end(), blob.begin(), blob.end());
  }
  write_file(path, out);
}

TensorArchive read_archive(const fs::path& path) {
  const auto bytes = read_file(path);
  std::span<const std::uint8_t> view(bytes);
  std::size_t offset = 0;
  expect_magic(view, offset, kArchiveMagic);
  const auto count = take<std::uint32_t>(view, offset, "entry count");
  TensorArchive archive;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = take<std::uint16_t>(view, offset, "name length");
    if (view.size() - offset < len) throw Error(ErrorCode::TruncatedPayload, "truncated name");
    std::string name(reinterpret_cast<const char*>(view.data() + offset), len);
    offset += len;
    archive.emplace_back(std::move(name), decode_tensor(view, offset));
  }
  if (offset != view.size()) {
    throw Error(ErrorCode::TruncatedPayload, "trailing bytes after archive in " + path.string());
  }
  return archive;
}

std::string manifest_line(const ManifestRecord& r) {
  json j;
  j["image_id"] = r.image_id;
  j["instance_id"] = r.instance_id;
  j["category_id"] = r.category_id;
  j["split"] = r.split;
  j["feature_path"] = r.feature_path;
  j["pose"] = r.pose ? pose_json(*r.pose) : json(nullptr);
  if (r.overlaps) {
    json o = json::object();
    for (const auto& [id, v] : *r.overlaps) o[std::to_string(id)] = v;
    j["overlaps"] = o;
  } else {
    j["overlaps"] = nullptr;
  }
  j["correspondences_path"] = r.correspondences_path ? json(*r.correspondences_path) : json(nullptr);
  return j.dump();
}

void write_manifest(const fs::path& path, const std::vector<ManifestRecord>& records) {
  std::string text;
  for (const auto& r : records) text += manifest_line(r) + "\n";
  write_text(path, text);
}

std::vector<ManifestRecord> load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open manifest " + path.string());
  const fs::path dir = path.parent_path();
  static const std::set<std::string> kKeys = {"image_id", "instance_id", "category_id",
                                              "split",    "feature_path", "pose",
                                              "overlaps", "correspondences_path"};
  std::vector<ManifestRecord> records;
  std::set<int> seen;
  std::string text;
  long line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(text);
    } catch (const json::parse_error& e) {
      schema(line, std::string("invalid JSON: ") + e.what());
    }
    if (!j.is_object()) schema(line, "record must be a JSON object");
    for (const auto& [key, _] : j.items()) {
      if (!kKeys.contains(key)) schema(line, "unknown field '" + key + "'");
    }
    for (const char* key : {"image_id", "instance_id", "category_id"}) {
      if (!j.contains(key) || !j[key].is_number_integer()) {
        schema(line, std::string(key) + " must be an integer");
      }
    }
    for (const char* key : {"split", "feature_path"}) {
      if (!j.contains(key) || !j[key].is_string()) schema(line, std::string(key) + " must be a string");
    }
    ManifestRecord r;
    r.image_id = j["image_id"].get<int>();
    r.instance_id = j["instance_id"].get<int>();
    r.category_id = j["category_id"].get<int>();
    r.split = j["split"].get<std::string>();
    r.feature_path = j["feature_path"].get<std::string>();
    if (r.split != "train" && r.split != "test") schema(line, "split must be train or test");
    if (!seen.insert(r.image_id).second) {
      throw Error(ErrorCode::DuplicateId, "image_id " + std::to_string(r.image_id) + " repeated", line);
    }
    if (j.contains("pose") && !j["pose"].is_null()) r.pose = parse_pose(j["pose"], line);
    if (j.contains("overlaps") && !j["overlaps"].is_null()) {
      if (!j["overlaps"].is_object()) schema(line, "overlaps must be an object or null");
      std::map<int, double> o;
      for (const auto& [key, value] : j["overlaps"].items()) {
        if (!value.is_number()) schema(line, "overlap values must be numbers");
        std::size_t used = 0;
        int id = 0;
        try {
          id = std::stoi(key, &used);
        } catch (const std::exception&) {
          used = 0;
        }
        if (used != key.size()) schema(line, "overlap keys must be image ids");
        o[id] = value.get<double>();
      }
      r.overlaps = std::move(o);
    }
    if (j.contains("correspondences_path") && !j["correspondences_path"].is_null()) {
      if (!j["correspondences_path"].is_string()) schema(line, "correspondences_path must be a string");
      r.correspondences_path = j["correspondences_path"].get<std::string>();
    }
    if (!fs::exists(dir / r.feature_path)) {
      throw Error(ErrorCode::DanglingPath, "missing feature file " + r.feature_path, line);
    }
    if (r.correspondences_path && !fs::exists(dir / *r.correspondences_path)) {
      throw Error(ErrorCode::DanglingPath, "missing correspondences " + *r.correspondences_path, line);
    }
    records.push_back(std::move(r));
  }
  return records;
}

Correspondences parse_correspondences(const std::string& text) {
  try {
    return parse_correspondence_array(json::parse(text));
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::SchemaViolation, std::string("invalid JSON: ") + e.what());
  }
}

Correspondences read_correspondences(const fs::path& path) {
  const auto bytes = read_file(path);
  return parse_correspondences(std::string(bytes.begin(), bytes.end()));
}

std::string correspondences_json(const Correspondences& c) { return correspondence_array(c).dump(); }

std::map<int, Correspondences> read_pair_correspondences(const fs::path& path) {
  const auto bytes = read_file(path);
  json j;
  try {
    j = json::parse(bytes.begin(), bytes.end());
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::SchemaViolation, std::string("invalid JSON: ") + e.what());
  }
  if (!j.is_object()) throw Error(ErrorCode::SchemaViolation, "expected an object keyed by image id");
  std::map<int, Correspondences> out;
  for (const auto& [key, value] : j.items()) out[std::stoi(key)] = parse_correspondence_array(value);
  return out;
}

std::string pair_correspondences_json(const std::map<int, Correspondences>& pairs) {
  json j = json::object();
  for (const auto& [id, c] : pairs) j[std::to_string(id)] = correspondence_array(c);
  return j.dump();
}

}  // namespace epiguide
