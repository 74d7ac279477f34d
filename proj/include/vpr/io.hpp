#pragma once

// On-disk formats: the binary tensor container, JSON-Lines manifests and
// model checkpoints.
//
// Tensor file layout (all integers and floats little-endian):
//   "VPRT" | u32 version = 1 | u32 dtype = 1 (f32) | u32 ndim | u64 dims[ndim]
//   | f32 payload[prod(dims)] in row-major order

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "vpr/aggregator.hpp"
#include "vpr/error.hpp"
#include "vpr/retrieval.hpp"
#include "vpr/tensor.hpp"

namespace vpr {

namespace fs = std::filesystem;

inline constexpr std::array<char, 4> kTensorMagic = {'V', 'P', 'R', 'T'};
inline constexpr std::uint32_t kTensorVersion = 1;
inline constexpr std::uint32_t kDtypeF32 = 1;

struct TensorHeader {
  std::uint32_t version = kTensorVersion;
  std::uint32_t dtype = kDtypeF32;
  Shape dims;
  std::size_t payload_offset = 0;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint64_t get_le(std::string_view bytes, std::size_t offset, int width) {
  std::uint64_t v = 0;
  for (int i = 0; i < width; ++i) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[offset + i])) << (8 * i);
  }
  return v;
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed for " + path.string());
  return bytes;
}

}  // namespace detail

// Writes via a sibling temp file and rename so readers never see a partial file.
inline void write_file_atomic(const fs::path& path, std::string_view bytes) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

inline std::string encode_tensor(const Tensor<float>& t) {
  std::string out(kTensorMagic.begin(), kTensorMagic.end());
  detail::put_u32(out, kTensorVersion);
  detail::put_u32(out, kDtypeF32);
  detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) detail::put_u64(out, d);
  out.reserve(out.size() + 4 * t.size());
  for (float v : t.data()) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

// Validates magic, version and dtype before touching dims or payload.
inline TensorHeader decode_tensor_header(std::string_view bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kTensorMagic.data(), 4) != 0) {
    throw BadMagicError("not a tensor file (bad magic)");
  }
  if (bytes.size() < 16) throw TruncatedPayloadError("tensor header truncated");
  TensorHeader h;
  h.version = static_cast<std::uint32_t>(detail::get_le(bytes, 4, 4));
  if (h.version != kTensorVersion) {
    throw UnsupportedVersionError("unsupported tensor file version " + std::to_string(h.version));
  }
  h.dtype = static_cast<std::uint32_t>(detail::get_le(bytes, 8, 4));
  if (h.dtype != kDtypeF32) {
    throw UnsupportedDtypeError("unsupported tensor dtype code " + std::to_string(h.dtype));
  }
  const auto ndim = static_cast<std::uint32_t>(detail::get_le(bytes, 12, 4));
  if (ndim == 0) throw FormatError("tensor file declares zero dimensions");
  const std::size_t dims_end = 16 + 8 * static_cast<std::size_t>(ndim);
  if (bytes.size() < dims_end) throw TruncatedPayloadError("tensor dims truncated");
  for (std::uint32_t i = 0; i < ndim; ++i) {
    const std::uint64_t d = detail::get_le(bytes, 16 + 8 * i, 8);
    if (d == 0) throw FormatError("tensor file declares a zero-sized dimension");
    h.dims.push_back(static_cast<std::size_t>(d));
  }
  h.payload_offset = dims_end;
  return h;
}

inline Tensor<float> decode_tensor(std::string_view bytes) {
  const TensorHeader h = decode_tensor_header(bytes);
  const std::size_t count = element_count(h.dims);
  const std::size_t payload = bytes.size() - h.payload_offset;
  if (payload < 4 * count) {
    throw TruncatedPayloadError("tensor payload truncated: " + std::to_string(payload) +
                                " bytes for " + std::to_string(count) + " values");
  }
  if (payload > 4 * count) {
    throw FormatError("tensor payload has " + std::to_string(payload - 4 * count) +
                      " trailing bytes");
  }
  std::vector<float> data(count);
  for (std::size_t i = 0; i < count; ++i) {
    data[i] = std::bit_cast<float>(
        static_cast<std::uint32_t>(detail::get_le(bytes, h.payload_offset + 4 * i, 4)));
  }
  return Tensor<float>(h.dims, std::move(data));
}

inline void write_tensor(const fs::path& path, const Tensor<float>& t) {
  write_file_atomic(path, encode_tensor(t));
}

inline Tensor<float> read_tensor(const fs::path& path) {
  const std::string bytes = detail::read_file(path);
  try {
    return decode_tensor(bytes);
  } catch (const FormatError& e) {
    // Keep the concrete error type while naming the file.
    const std::string msg = path.string() + ": " + e.what();
    if (dynamic_cast<const BadMagicError*>(&e)) throw BadMagicError(msg);
    if (dynamic_cast<const UnsupportedVersionError*>(&e)) throw UnsupportedVersionError(msg);
    if (dynamic_cast<const UnsupportedDtypeError*>(&e)) throw UnsupportedDtypeError(msg);
    if (dynamic_cast<const TruncatedPayloadError*>(&e)) throw TruncatedPayloadError(msg);
    throw FormatError(msg);
  }
}

inline TensorHeader read_tensor_header(const fs::path& path) {
  return decode_tensor_header(detail::read_file(path));
}

// ---------------------------------------------------------------------------
// Manifests

enum class Split { kTrain, kDatabase, kQuery };

inline std::string_view split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kDatabase: return "database";
    case Split::kQuery: return "query";
  }
  return "?";
}

inline std::optional<Split> parse_split(std::string_view name) {
  if (name == "train") return Split::kTrain;
  if (name == "database") return Split::kDatabase;
  if (name == "query") return Split::kQuery;
  return std::nullopt;
}

struct ImageRecord {
  std::string image_id;
  std::string place_id;
  GeoTag tag;
  Split split = Split::kTrain;
  std::string features;     // as written in the manifest
  fs::path features_path;   // resolved against the manifest directory
};

inline nlohmann::json record_to_json(const ImageRecord& r) {
  return {{"image_id", r.image_id}, {"place_id", r.place_id},
          {"lat", r.tag.lat},       {"lon", r.tag.lon},
          {"split", split_name(r.split)}, {"features", r.features}};
}

inline ImageRecord parse_manifest_line(const std::string& line, std::size_t line_no,
                                       const fs::path& base_dir) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(line_no, std::string("invalid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ParseError(line_no, "record is not a JSON object");

  auto require = [&](const char* key) -> const nlohmann::json& {
    auto it = j.find(key);
    if (it == j.end()) throw ParseError(line_no, std::string("missing field '") + key + "'");
    return *it;
  };
  auto require_string = [&](const char* key) {
    const auto& v = require(key);
    if (!v.is_string() || v.get<std::string>().empty()) {
      throw ParseError(line_no, std::string("field '") + key + "' must be a non-empty string");
    }
    return v.get<std::string>();
  };
  auto require_number = [&](const char* key) {
    const auto& v = require(key);
    if (!v.is_number()) throw ParseError(line_no, std::string("field '") + key + "' must be a number");
    return v.get<double>();
  };

  ImageRecord r;
  r.image_id = require_string("image_id");
  r.place_id = require_string("place_id");
  r.tag = {require_number("lat"), require_number("lon")};
  const std::string split = require_string("split");
  r.features = require_string("features");
  try {
    validate_geotag(r.tag);
  } catch (const RangeError& e) {
    throw ParseError(line_no, e.what());
  }
  const auto s = parse_split(split);
  if (!s) throw ParseError(line_no, "unknown split '" + split + "'");
  r.split = *s;
  const fs::path feat(r.features);
  r.features_path = feat.is_absolute() ? feat : base_dir / feat;
  return r;
}

// JSON-Lines manifest, one record per non-blank line.
inline std::vector<ImageRecord> parse_manifest(std::istream& in, const fs::path& base_dir) {
  std::vector<ImageRecord> records;
  std::set<std::string> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    ImageRecord r = parse_manifest_line(line, line_no, base_dir);
    if (!seen.insert(r.image_id).second) {
      throw ParseError(line_no, "duplicate image_id '" + r.image_id + "'");
    }
    records.push_back(std::move(r));
  }
  return records;
}

inline std::vector<ImageRecord> parse_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  try {
    return parse_manifest(in, path.parent_path());
  } catch (const ParseError& e) {
    throw ParseError(e.line(), e.reason(), path.string());
  }
}

inline void write_manifest(const fs::path& path, const std::vector<ImageRecord>& records) {
  std::string out;
  for (const auto& r : records) out += record_to_json(r).dump() + "\n";
  write_file_atomic(path, out);
}

inline std::vector<ImageRecord> filter_split(const std::vector<ImageRecord>& records, Split split) {
  std::vector<ImageRecord> out;
  for (const auto& r : records) {
    if (r.split == split) out.push_back(r);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: a directory with one tensor file per parameter plus a
// key=value snapshot of the shape config.

inline std::string format_aggregator_config(const AggregatorConfig& c) {
  std::ostringstream os;
  os << "feature_maps=" << c.feature_maps << "\n"
     << "grid_side=" << c.grid_side << "\n"
     << "mixer_depth=" << c.mixer_depth << "\n"
     << "depth_out=" << c.depth_out << "\n"
     << "row_out=" << c.row_out << "\n"
     << "hidden_ratio=" << c.hidden_ratio << "\n"
     << "block_norm=" << (c.block_norm ? "true" : "false") << "\n";
  return os.str();
}

// Parses "key=value" lines; '#' starts a comment. Duplicate keys are errors.
inline std::map<std::string, std::string> parse_key_values(std::istream& in) {
  std::map<std::string, std::string> kv;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      if (b == std::string::npos) return std::string();
      const auto e = s.find_last_not_of(" \t\r");
      return s.substr(b, e - b + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError(line_no, "expected key=value");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ParseError(line_no, "empty key");
    if (!kv.emplace(key, value).second) throw ParseError(line_no, "duplicate key '" + key + "'");
  }
  return kv;
}

namespace detail {

inline std::size_t parse_size(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  unsigned long long x = 0;
  try {
    if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
    x = std::stoull(v, &pos);
  } catch (const std::exception&) {
    throw Error("config key '" + key + "': expected a non-negative integer, got '" + v + "'");
  }
  if (pos != v.size()) throw Error("config key '" + key + "': trailing characters in '" + v + "'");
  return static_cast<std::size_t>(x);
}

inline double parse_double(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  double x = 0;
  try {
    x = std::stod(v, &pos);
  } catch (const std::exception&) {
    throw Error("config key '" + key + "': expected a number, got '" + v + "'");
  }
  if (pos != v.size()) throw Error("config key '" + key + "': trailing characters in '" + v + "'");
  return x;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw Error("config key '" + key + "': expected true/false, got '" + v + "'");
}

}  // namespace detail

inline AggregatorConfig parse_aggregator_config(const std::map<std::string, std::string>& kv) {
  AggregatorConfig c;
  for (const auto& [k, v] : kv) {
    if (k == "feature_maps") c.feature_maps = detail::parse_size(k, v);
    else if (k == "grid_side") c.grid_side = detail::parse_size(k, v);
    else if (k == "mixer_depth") c.mixer_depth = detail::parse_size(k, v);
    else if (k == "depth_out") c.depth_out = detail::parse_size(k, v);
    else if (k == "row_out") c.row_out = detail::parse_size(k, v);
    else if (k == "hidden_ratio") c.hidden_ratio = detail::parse_size(k, v);
    else if (k == "block_norm") c.block_norm = detail::parse_bool(k, v);
    else throw Error("unknown checkpoint config key '" + k + "'");
  }
  validate_config(c);
  return c;
}

inline void save_checkpoint(const fs::path& dir, const AggregatorModel<float>& model) {
  fs::create_directories(dir);
  write_file_atomic(dir / "config.txt", format_aggregator_config(model.config));
  for_each_parameter(model, [&](const std::string& name, const Tensor<float>& w) {
    write_tensor(dir / (name + ".vprt"), w);
  });
}

inline AggregatorModel<float> load_checkpoint(const fs::path& dir) {
  std::ifstream in(dir / "config.txt");
  if (!in) throw IoError("checkpoint " + dir.string() + " has no config.txt");
  AggregatorModel<float> model = zero_model<float>(parse_aggregator_config(parse_key_values(in)));
  for_each_parameter(model, [&](const std::string& name, Tensor<float>& w) {
    w = read_tensor(dir / (name + ".vprt"));
  });
  for (auto& b : model.blocks) b.normalize_input = model.config.block_norm;
  validate_model(model);
  return model;
}

// ---------------------------------------------------------------------------
// Retrieval index: descriptors.vprt (N x dim) plus records.jsonl with one
// {image_id, lat, lon} object per row.

inline void save_index(const fs::path& dir, const RetrievalIndex& index) {
  if (index.empty()) throw InsufficientDataError("refusing to save an empty index");
  fs::create_directories(dir);
  std::string lines;
  for (std::size_t i = 0; i < index.size(); ++i) {
    const nlohmann::json j = {{"image_id", index.image_id(i)},
                              {"lat", index.geotag(i).lat},
                              {"lon", index.geotag(i).lon}};
    lines += j.dump() + "\n";
  }
  write_tensor(dir / "descriptors.vprt", index.descriptors());
  write_file_atomic(dir / "records.jsonl", lines);
}

inline RetrievalIndex load_index(const fs::path& dir) {
  const Tensor<float> desc = read_tensor(dir / "descriptors.vprt");
  if (desc.rank() != 2) throw FormatError("index descriptors must be a matrix");
  std::ifstream in(dir / "records.jsonl");
  if (!in) throw IoError("cannot open " + (dir / "records.jsonl").string());
  RetrievalIndex index(desc.cols());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
      const std::size_t row = index.size();
      if (row >= desc.rows()) throw ParseError(line_no, "more records than descriptors");
      index.add(j.at("image_id").get<std::string>(),
                {j.at("lat").get<double>(), j.at("lon").get<double>()},
                desc.data().subspan(row * desc.cols(), desc.cols()));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(line_no, e.what(), (dir / "records.jsonl").string());
    }
  }
  if (index.size() != desc.rows()) {
    throw FormatError("index has " + std::to_string(desc.rows()) + " descriptors but " +
                      std::to_string(index.size()) + " records");
  }
  return index;
}

}  // namespace vpr
