#include "ndcr/dataset_io.hpp"

#include <fstream>

#include "ndcr/checkpoint.hpp"  // io helpers

namespace ndcr {

void write_dataset(const std::string& path, const std::vector<Instance>& instances,
                   const GenConfig& cfg) {
  cfg.validate();
  if (instances.empty()) throw ConfigError("dataset: refusing to write an empty dataset");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("dataset: cannot open '" + path + "' for writing");
  const std::string blob = cfg.to_json();
  os.write(kDatasetMagic, 4);
  io::write_u32(os, kDatasetVersion);
  io::write_u32(os, static_cast<uint32_t>(cfg.d));
  io::write_u32(os, static_cast<uint32_t>(cfg.L));
  io::write_u32(os, static_cast<uint32_t>(instances.size()));
  io::write_u32(os, static_cast<uint32_t>(blob.size()));
  os.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  for (const Instance& inst : instances) {
    if (inst.text.cols != cfg.d || inst.images.rows != cfg.L || inst.images.cols != cfg.d ||
        inst.cross.rows != cfg.L || inst.cross.cols != cfg.d)
      throw ShapeError("dataset: instance tensors disagree with header dimensions");
    if (inst.count != inst.text.rows - 1 ||
        static_cast<int>(inst.masks.size()) != inst.count)
      throw ShapeError("dataset: instance metadata inconsistent");
    io::write_u32(os, static_cast<uint32_t>(inst.text.rows));
    io::write_u32(os, static_cast<uint32_t>(inst.count));
    io::write_u32(os, static_cast<uint32_t>(inst.gold));
    io::write_u64(os, inst.seed);
    io::write_u64(os, inst.config_hash);
    for (float v : inst.text.data) io::write_f32(os, v);
    for (float v : inst.images.data) io::write_f32(os, v);
    for (float v : inst.cross.data) io::write_f32(os, v);
    for (const auto& row : inst.masks)
      os.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!os) throw FormatError("dataset: write failed for '" + path + "'");
}

namespace {

DatasetHeader read_header(io::Reader& r) {
  r.expect_magic(kDatasetMagic);
  uint32_t version = r.read_u32();
  if (version != kDatasetVersion)
    throw FormatError("dataset: unsupported version " + std::to_string(version));
  DatasetHeader h;
  h.d = static_cast<int>(r.read_u32());
  h.L = static_cast<int>(r.read_u32());
  h.count = static_cast<int>(r.read_u32());
  uint32_t blob_len = r.read_u32();
  if (blob_len > (1u << 20))
    throw FormatError("dataset: implausible config blob length at byte offset " +
                      std::to_string(r.offset() - 4));
  h.config_json = r.read_string(blob_len);
  h.config_hash = fnv1a(h.config_json);
  if (h.d < 1 || h.L < 2 || h.count < 0)
    throw FormatError("dataset: malformed header dimensions");
  return h;
}

}  // namespace

DatasetHeader read_dataset_header(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("dataset: cannot open '" + path + "'");
  io::Reader r(is, "dataset '" + path + "'");
  return read_header(r);
}

Dataset read_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("dataset: cannot open '" + path + "'");
  io::Reader r(is, "dataset '" + path + "'");
  Dataset ds;
  ds.header = read_header(r);
  ds.instances.reserve(static_cast<size_t>(ds.header.count));
  for (int i = 0; i < ds.header.count; ++i) {
    Instance inst;
    int text_rows = static_cast<int>(r.read_u32());
    inst.count = static_cast<int>(r.read_u32());
    inst.gold = static_cast<int>(r.read_u32());
    inst.seed = r.read_u64();
    inst.config_hash = r.read_u64();
    if (text_rows != inst.count + 1 || inst.count < 1 || inst.count > 10)
      throw FormatError("dataset '" + path + "': instance " + std::to_string(i) +
                        " has inconsistent proposition count at byte offset " +
                        std::to_string(r.offset()));
    if (inst.gold < 0 || inst.gold >= ds.header.L)
      throw FormatError("dataset '" + path + "': instance " + std::to_string(i) +
                        " gold index out of range");
    inst.text = Tensor<float>(text_rows, ds.header.d);
    for (float& v : inst.text.data) v = r.read_f32();
    inst.images = Tensor<float>(ds.header.L, ds.header.d);
    for (float& v : inst.images.data) v = r.read_f32();
    inst.cross = Tensor<float>(ds.header.L, ds.header.d);
    for (float& v : inst.cross.data) v = r.read_f32();
    inst.masks.assign(static_cast<size_t>(inst.count),
                      std::vector<uint8_t>(static_cast<size_t>(ds.header.L)));
    for (auto& row : inst.masks) r.read_bytes(row.data(), row.size());
    ds.instances.push_back(std::move(inst));
  }
  return ds;
}

}  // namespace ndcr
