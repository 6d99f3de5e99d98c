#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "harfuse/errors.hpp"
#include "harfuse/tensor.hpp"

namespace harfuse {

// Checkpoint layout:
//   8-byte magic "HARFUSE1"
//   u64 little-endian manifest byte length
//   UTF-8 JSON manifest {"version", "tensors": [{name, shape, offset}], "config"}
//   raw little-endian float32 blob
// Offsets are byte offsets into the blob, non-overlapping, in manifest order.

inline constexpr char kCheckpointMagic[8] = {'H', 'A', 'R', 'F',
                                             'U', 'S', 'E', '1'};
inline constexpr int kCheckpointVersion = 1;

struct CheckpointContents {
  std::map<std::string, TensorValue> tensors;
  nlohmann::json config;
};

namespace detail {

inline void write_u64_le(std::ostream& out, std::uint64_t v) {
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(buf), 8);
}

inline std::uint64_t read_u64_le(std::istream& in) {
  unsigned char buf[8];
  in.read(reinterpret_cast<char*>(buf), 8);
  if (!in) throw DataError("checkpoint: truncated header");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return v;
}

// Atomic write: temp file in the same directory, then rename.
class AtomicFile {
 public:
  explicit AtomicFile(const std::string& path)
      : path_(path), tmp_(path + ".tmp") {
    out_.open(tmp_, std::ios::binary | std::ios::trunc);
    if (!out_) throw DataError("cannot write '" + tmp_ + "'");
  }
  std::ostream& stream() { return out_; }
  void commit() {
    out_.flush();
    if (!out_) throw DataError("write failed for '" + tmp_ + "'");
    out_.close();
    std::error_code ec;
    std::filesystem::rename(tmp_, path_, ec);
    if (ec) throw DataError("cannot rename '" + tmp_ + "' to '" + path_ +
                            "': " + ec.message());
    committed_ = true;
  }
  ~AtomicFile() {
    if (!committed_) {
      out_.close();
      std::error_code ec;
      std::filesystem::remove(tmp_, ec);
    }
  }

 private:
  std::string path_, tmp_;
  std::ofstream out_;
  bool committed_ = false;
};

}  // namespace detail

inline void save_checkpoint(const std::string& path,
                            const std::map<std::string, TensorValue>& tensors,
                            const nlohmann::json& config = nlohmann::json::object()) {
  nlohmann::json manifest;
  manifest["version"] = kCheckpointVersion;
  manifest["config"] = config;
  nlohmann::json entries = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    entries.push_back({{"name", name}, {"shape", t.shape}, {"offset", offset}});
    offset += t.size() * sizeof(float);
  }
  manifest["tensors"] = std::move(entries);
  const std::string mtext = manifest.dump();

  detail::AtomicFile file(path);
  std::ostream& out = file.stream();
  out.write(kCheckpointMagic, 8);
  detail::write_u64_le(out, mtext.size());
  out.write(mtext.data(), static_cast<std::streamsize>(mtext.size()));
  for (const auto& [name, t] : tensors) {
    static_assert(sizeof(float) == 4);
    // x86/aarch64 are little-endian; float bytes go out as stored.
    out.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(t.data.size() * sizeof(float)));
  }
  file.commit();
}

inline void save_checkpoint(const std::string& path, const ParamSet& params,
                            const nlohmann::json& config = nlohmann::json::object()) {
  save_checkpoint(path, params.entries, config);
}

inline CheckpointContents load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint '" + path + "'");
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw DataError("checkpoint '" + path + "': bad magic");
  const std::uint64_t mlen = detail::read_u64_le(in);
  std::string mtext(mlen, '\0');
  in.read(mtext.data(), static_cast<std::streamsize>(mlen));
  if (!in) throw DataError("checkpoint '" + path + "': truncated manifest");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(mtext);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError("checkpoint '" + path + "': bad manifest: " + e.what());
  }
  if (!manifest.contains("version") ||
      manifest["version"].get<int>() != kCheckpointVersion)
    throw DataError("checkpoint '" + path + "': unsupported format version");

  std::vector<char> blob((std::istreambuf_iterator<char>(in)),
                         std::istreambuf_iterator<char>());
  CheckpointContents contents;
  contents.config = manifest.value("config", nlohmann::json::object());
  std::uint64_t expected_offset = 0;
  for (const auto& entry : manifest["tensors"]) {
    const std::string name = entry["name"].get<std::string>();
    const Shape shape = entry["shape"].get<Shape>();
    const std::uint64_t offset = entry["offset"].get<std::uint64_t>();
    if (offset != expected_offset)
      throw DataError("checkpoint '" + path + "': tensor '" + name +
                      "' offset " + std::to_string(offset) +
                      " out of order (expected " +
                      std::to_string(expected_offset) + ")");
    const std::uint64_t bytes = numel(shape) * sizeof(float);
    if (offset + bytes > blob.size())
      throw DataError("checkpoint '" + path + "': blob truncated at tensor '" +
                      name + "'");
    TensorValue t = TensorValue::zeros(shape);
    std::memcpy(t.data.data(), blob.data() + offset, bytes);
    contents.tensors.emplace(name, std::move(t));
    expected_offset = offset + bytes;
  }
  if (expected_offset != blob.size())
    throw DataError("checkpoint '" + path + "': blob length " +
                    std::to_string(blob.size()) + " disagrees with manifest (" +
                    std::to_string(expected_offset) + " expected)");
  return contents;
}

// Restores parameter values into an existing ParamSet; name sets and shapes
// must agree exactly.
inline void load_params(const CheckpointContents& contents, ParamSet& params,
                        const std::string& what) {
  for (auto& [name, t] : params.entries) {
    auto it = contents.tensors.find(name);
    if (it == contents.tensors.end())
      throw DataError(what + ": missing tensor '" + name + "'");
    if (it->second.shape != t.shape)
      throw DataError(what + ": tensor '" + name + "' has shape " +
                      shape_str(it->second.shape) + ", expected " +
                      shape_str(t.shape));
    t.data = it->second.data;
  }
  for (const auto& [name, t] : contents.tensors) {
    (void)t;
    if (!params.entries.count(name))
      throw DataError(what + ": unexpected tensor '" + name + "'");
  }
}

}  // namespace harfuse
