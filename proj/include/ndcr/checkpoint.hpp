#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "ndcr/common.hpp"
#include "ndcr/param_store.hpp"
#include "ndcr/tensor.hpp"

namespace ndcr {

// Checkpoint container: magic "NDCR", u32 version, u32 entry count, then per
// entry: u32 name length, name bytes, u32 rank, u32 dims..., little-endian
// f32 payload. The effective config fingerprint rides along as a reserved
// entry ("meta.config_hash", 8 floats holding one hash byte each).

inline constexpr uint32_t kCheckpointVersion = 1;
inline constexpr const char kCheckpointMagic[4] = {'N', 'D', 'C', 'R'};
inline constexpr const char* kConfigHashEntry = "meta.config_hash";

namespace io {

inline void write_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_u64(std::ostream& os, uint64_t v) {
  write_u32(os, static_cast<uint32_t>(v));
  write_u32(os, static_cast<uint32_t>(v >> 32));
}

inline void write_f32(std::ostream& os, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  write_u32(os, bits);
}

// Reader that tracks its byte offset so format errors can name it.
class Reader {
 public:
  explicit Reader(std::istream& is, std::string what) : is_(is), what_(std::move(what)) {}

  uint64_t offset() const { return offset_; }

  void read_bytes(void* dst, size_t n) {
    is_.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<size_t>(is_.gcount()) != n)
      throw FormatError(what_ + ": truncated at byte offset " + std::to_string(offset_));
    offset_ += n;
  }

  uint32_t read_u32() {
    unsigned char b[4];
    read_bytes(b, 4);
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
  }

  uint64_t read_u64() {
    uint64_t lo = read_u32();
    uint64_t hi = read_u32();
    return lo | (hi << 32);
  }

  float read_f32() {
    uint32_t bits = read_u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }

  std::string read_string(uint32_t len) {
    std::string s(len, '\0');
    if (len) read_bytes(s.data(), len);
    return s;
  }

  void expect_magic(const char magic[4]) {
    char got[4];
    read_bytes(got, 4);
    if (std::memcmp(got, magic, 4) != 0)
      throw FormatError(what_ + ": bad magic (expected '" + std::string(magic, 4) + "', got '" +
                        std::string(got, 4) + "') at byte offset 0");
  }

  bool at_eof() {
    is_.peek();
    return is_.eof();
  }

 private:
  std::istream& is_;
  std::string what_;
  uint64_t offset_ = 0;
};

}  // namespace io

struct CheckpointEntry {
  std::string name;
  std::vector<uint32_t> dims;
  std::vector<float> data;

  size_t element_count() const {
    size_t n = 1;
    for (uint32_t d : dims) n *= d;
    return dims.empty() ? 0 : n;
  }
};

inline Tensor<float> hash_to_tensor(uint64_t hash) {
  Tensor<float> t(1, 8);
  for (int i = 0; i < 8; ++i) t.data[static_cast<size_t>(i)] = static_cast<float>((hash >> (8 * i)) & 0xff);
  return t;
}

inline uint64_t hash_from_floats(const std::vector<float>& v) {
  if (v.size() != 8) throw FormatError("checkpoint: malformed config hash entry");
  uint64_t h = 0;
  for (int i = 0; i < 8; ++i) h |= static_cast<uint64_t>(static_cast<unsigned char>(v[static_cast<size_t>(i)])) << (8 * i);
  return h;
}

template <typename T>
void save_checkpoint(const std::string& path, const ParamStore<T>& store, uint64_t config_hash) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("checkpoint: cannot open '" + path + "' for writing");
  os.write(kCheckpointMagic, 4);
  io::write_u32(os, kCheckpointVersion);
  io::write_u32(os, static_cast<uint32_t>(store.count() + 1));
  auto write_entry = [&os](const std::string& name, uint32_t rows, uint32_t cols,
                           const auto& data) {
    io::write_u32(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    io::write_u32(os, 2);  // rank
    io::write_u32(os, rows);
    io::write_u32(os, cols);
    for (auto v : data) io::write_f32(os, static_cast<float>(v));
  };
  Tensor<float> hash_t = hash_to_tensor(config_hash);
  write_entry(kConfigHashEntry, 1, 8, hash_t.data);
  for (const auto& [name, e] : store.entries())
    write_entry(name, static_cast<uint32_t>(e.value.rows), static_cast<uint32_t>(e.value.cols),
                e.value.data);
  if (!os) throw FormatError("checkpoint: write failed for '" + path + "'");
}

inline std::vector<CheckpointEntry> read_checkpoint_entries(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("checkpoint: cannot open '" + path + "'");
  io::Reader r(is, "checkpoint '" + path + "'");
  r.expect_magic(kCheckpointMagic);
  uint32_t version = r.read_u32();
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint '" + path + "': unsupported version " + std::to_string(version));
  uint32_t count = r.read_u32();
  std::vector<CheckpointEntry> entries;
  entries.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    uint32_t name_len = r.read_u32();
    if (name_len > 4096)
      throw FormatError("checkpoint '" + path + "': implausible name length at byte offset " +
                        std::to_string(r.offset() - 4));
    e.name = r.read_string(name_len);
    uint32_t rank = r.read_u32();
    if (rank > 8)
      throw FormatError("checkpoint '" + path + "': implausible rank at byte offset " +
                        std::to_string(r.offset() - 4));
    size_t n = 1;
    for (uint32_t d = 0; d < rank; ++d) {
      e.dims.push_back(r.read_u32());
      n *= e.dims.back();
    }
    e.data.resize(rank == 0 ? 0 : n);
    for (float& f : e.data) f = r.read_f32();
    entries.push_back(std::move(e));
  }
  return entries;
}

template <typename T>
struct LoadedCheckpoint {
  ParamStore<T> store;
  uint64_t config_hash = 0;
};

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::string& path) {
  LoadedCheckpoint<T> out;
  bool saw_hash = false;
  for (auto& e : read_checkpoint_entries(path)) {
    if (e.name == kConfigHashEntry) {
      out.config_hash = hash_from_floats(e.data);
      saw_hash = true;
      continue;
    }
    if (e.dims.size() != 2)
      throw FormatError("checkpoint '" + path + "': entry '" + e.name + "' has rank " +
                        std::to_string(e.dims.size()) + ", expected 2");
    Tensor<T> t(static_cast<int>(e.dims[0]), static_cast<int>(e.dims[1]));
    for (size_t i = 0; i < e.data.size(); ++i) t.data[i] = static_cast<T>(e.data[i]);
    out.store.add(e.name, std::move(t));
  }
  if (!saw_hash) throw FormatError("checkpoint '" + path + "': missing config hash entry");
  return out;
}

}  // namespace ndcr
