#pragma once

#include <string>
#include <vector>

#include "ndcr/datagen.hpp"

namespace ndcr {

// Dataset container: magic "NDCD", u32 version, header (u32 d, u32 L,
// u32 instance count, u32 JSON config blob length, blob), then per instance:
// u32 text rows, u32 proposition count, u32 gold index, u64 seed, u64 config
// hash, little-endian f32 text / images / cross tensors, u8 masks. The same
// format ingests externally exported real embeddings.

inline constexpr uint32_t kDatasetVersion = 1;
inline constexpr const char kDatasetMagic[4] = {'N', 'D', 'C', 'D'};

struct DatasetHeader {
  int d = 0;
  int L = 0;
  int count = 0;
  std::string config_json;
  uint64_t config_hash = 0;
};

struct Dataset {
  DatasetHeader header;
  std::vector<Instance> instances;
};

void write_dataset(const std::string& path, const std::vector<Instance>& instances,
                   const GenConfig& cfg);

Dataset read_dataset(const std::string& path);

// Header only (for `inspect`).
DatasetHeader read_dataset_header(const std::string& path);

}  // namespace ndcr
