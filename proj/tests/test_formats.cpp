#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "ndcr/checkpoint.hpp"
#include "ndcr/dataset_io.hpp"
#include "ndcr/param_store.hpp"

using namespace ndcr;

namespace {

std::string temp_path(const std::string& name) {
  return std::string("ndcr_fmt_test_") + name;
}

std::vector<char> slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  REQUIRE(is.good());
  return std::vector<char>(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

void spit(const std::string& path, const std::vector<char>& bytes) {
  std::ofstream os(path, std::ios::binary);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

GenConfig small_config() {
  GenConfig cfg;
  cfg.d = 12;
  cfg.L = 4;
  cfg.A = 6;
  cfg.seed = 3;
  return cfg;
}

ParamStore<float> sample_store() {
  ParamStore<float> s;
  Rng rng(8);
  for (const char* name : {"alpha.w", "alpha.b", "beta.w"}) {
    Tensor<float> t(3, 5);
    for (auto& v : t.data) v = static_cast<float>(rng.next_gaussian());
    s.add(name, std::move(t));
  }
  return s;
}

}  // namespace

TEST_CASE("checkpoint: round-trips byte-exactly and preserves the config hash") {
  const std::string p1 = temp_path("ck1.ndcr"), p2 = temp_path("ck2.ndcr");
  ParamStore<float> store = sample_store();
  const uint64_t hash = 0x0123456789abcdefull;
  save_checkpoint(p1, store, hash);

  auto loaded = load_checkpoint<float>(p1);
  CHECK(loaded.config_hash == hash);
  CHECK(loaded.store.count() == store.count());
  for (const auto& [name, e] : store.entries())
    CHECK(loaded.store.get(name).data == e.value.data);  // bitwise

  // re-serializing the loaded store reproduces the file byte for byte
  save_checkpoint(p2, loaded.store, loaded.config_hash);
  CHECK(slurp(p1) == slurp(p2));
  std::remove(p1.c_str());
  std::remove(p2.c_str());
}

TEST_CASE("checkpoint: corrupted inputs rejected with format errors naming offsets") {
  const std::string p = temp_path("ck_bad.ndcr");
  save_checkpoint(p, sample_store(), 42);
  auto good = slurp(p);

  SUBCASE("wrong magic") {
    auto bad = good;
    bad[0] = 'X';
    spit(p, bad);
    CHECK_THROWS_AS(load_checkpoint<float>(p), FormatError);
  }
  SUBCASE("unsupported version") {
    auto bad = good;
    bad[4] = 99;
    spit(p, bad);
    CHECK_THROWS_WITH_AS(load_checkpoint<float>(p),
                         doctest::Contains("unsupported version"), FormatError);
  }
  SUBCASE("truncated payload") {
    auto bad = good;
    bad.resize(bad.size() / 2);
    spit(p, bad);
    CHECK_THROWS_WITH_AS(load_checkpoint<float>(p), doctest::Contains("byte offset"),
                         FormatError);
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS(load_checkpoint<float>("definitely_not_here.ndcr"), FormatError);
  }
  std::remove(p.c_str());
}

TEST_CASE("dataset: round-trips element-exactly including metadata") {
  const std::string p = temp_path("ds1.ndcd");
  GenConfig cfg = small_config();
  auto data = make_dataset(cfg, 25);
  write_dataset(p, data, cfg);

  Dataset ds = read_dataset(p);
  CHECK(ds.header.d == cfg.d);
  CHECK(ds.header.L == cfg.L);
  CHECK(ds.header.count == 25);
  CHECK(ds.header.config_hash == cfg.hash());
  CHECK(GenConfig::from_json(ds.header.config_json).hash() == cfg.hash());
  REQUIRE(ds.instances.size() == data.size());
  for (size_t i = 0; i < data.size(); ++i) {
    CHECK(ds.instances[i].text.data == data[i].text.data);      // bitwise
    CHECK(ds.instances[i].images.data == data[i].images.data);  // bitwise
    CHECK(ds.instances[i].cross.data == data[i].cross.data);    // bitwise
    CHECK(ds.instances[i].gold == data[i].gold);
    CHECK(ds.instances[i].count == data[i].count);
    CHECK(ds.instances[i].seed == data[i].seed);
    CHECK(ds.instances[i].masks == data[i].masks);
  }

  // writing the re-read instances reproduces the file byte for byte
  const std::string p2 = temp_path("ds2.ndcd");
  write_dataset(p2, ds.instances, cfg);
  CHECK(slurp(p) == slurp(p2));
  std::remove(p.c_str());
  std::remove(p2.c_str());
}

TEST_CASE("dataset: identical seeds produce bitwise-identical files") {
  const std::string p1 = temp_path("ds_a.ndcd"), p2 = temp_path("ds_b.ndcd");
  GenConfig cfg = small_config();
  write_dataset(p1, make_dataset(cfg, 30), cfg);
  write_dataset(p2, make_dataset(cfg, 30), cfg);
  CHECK(slurp(p1) == slurp(p2));
  std::remove(p1.c_str());
  std::remove(p2.c_str());
}

TEST_CASE("dataset: corrupted inputs rejected") {
  const std::string p = temp_path("ds_bad.ndcd");
  GenConfig cfg = small_config();
  write_dataset(p, make_dataset(cfg, 5), cfg);
  auto good = slurp(p);

  SUBCASE("wrong magic") {
    auto bad = good;
    bad[2] = '?';
    spit(p, bad);
    CHECK_THROWS_WITH_AS(read_dataset(p), doctest::Contains("magic"), FormatError);
  }
  SUBCASE("truncated mid-instance") {
    auto bad = good;
    bad.resize(bad.size() - 37);
    spit(p, bad);
    CHECK_THROWS_WITH_AS(read_dataset(p), doctest::Contains("byte offset"), FormatError);
  }
  SUBCASE("header still readable when payload truncated") {
    auto bad = good;
    bad.resize(bad.size() - 37);
    spit(p, bad);
    CHECK_NOTHROW(read_dataset_header(p));
  }
  std::remove(p.c_str());
}

TEST_CASE("little-endian primitives round-trip through the io helpers") {
  const std::string p = temp_path("io.bin");
  {
    std::ofstream os(p, std::ios::binary);
    io::write_u32(os, 0xdeadbeefu);
    io::write_u64(os, 0x0123456789abcdefull);
    io::write_f32(os, -1.5f);
  }
  // byte layout is fixed little-endian regardless of host order
  auto bytes = slurp(p);
  REQUIRE(bytes.size() == 16);
  CHECK(static_cast<unsigned char>(bytes[0]) == 0xef);
  CHECK(static_cast<unsigned char>(bytes[3]) == 0xde);
  {
    std::ifstream is(p, std::ios::binary);
    io::Reader r(is, "io.bin");
    CHECK(r.read_u32() == 0xdeadbeefu);
    CHECK(r.read_u64() == 0x0123456789abcdefull);
    CHECK(r.read_f32() == -1.5f);
    CHECK(r.offset() == 16);
    CHECK(r.at_eof());
  }
  std::remove(p.c_str());
}

TEST_CASE("config hash rides along in both artifact kinds") {
  const std::string ds_path = temp_path("hash.ndcd");
  GenConfig cfg = small_config();
  write_dataset(ds_path, make_dataset(cfg, 3), cfg);
  CHECK(read_dataset_header(ds_path).config_hash == cfg.hash());
  std::remove(ds_path.c_str());

  const std::string ck_path = temp_path("hash.ndcr");
  save_checkpoint(ck_path, sample_store(), cfg.hash());
  CHECK(load_checkpoint<float>(ck_path).config_hash == cfg.hash());
  std::remove(ck_path.c_str());
}
