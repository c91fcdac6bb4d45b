#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <set>

#include "doctest.h"
#include "error.hpp"
#include "store.hpp"
#include "synthetic.hpp"

using namespace ssch;
using ssch::testing::TempDir;

namespace {

testing::StoreData small_store() {
  testing::StoreData d;
  d.manifest = testing::make_manifest("tiny", 2, 2, 3, 8, 2);
  d.labels = {0, 1, 1, 0};
  d.embeddings.resize(4 * 3 * 8);
  for (std::size_t i = 0; i < d.embeddings.size(); ++i)
    d.embeddings[i] = static_cast<float>(std::sin(0.37 * static_cast<double>(i)) * 3.0);
  return d;
}

std::string error_message(const std::function<void()>& f) {
  try {
    f();
  } catch (const std::exception& e) {
    return e.what();
  }
  return {};
}

void corrupt(const std::filesystem::path& p, std::size_t offset, char byte) {
  std::fstream f(p, std::ios::in | std::ios::out | std::ios::binary);
  f.seekp(static_cast<std::streamoff>(offset));
  f.put(byte);
}

}  // namespace

TEST_CASE("store: round trip is bit exact") {
  TempDir dir;
  const auto data = small_store();
  const auto path = testing::write_store(data, dir / "tiny.ssch");
  CHECK(std::filesystem::exists(path));
  CHECK(std::filesystem::exists(dir / "tiny.json"));

  const auto ds = store::EmbeddingDataset::open(path);
  CHECK(ds.n_tokens() == 4);
  CHECK(ds.n_layers() == 3);
  CHECK(ds.dim() == 8);
  CHECK(ds.n_classes() == 2);
  CHECK(ds.manifest().task_name == "tiny");
  CHECK(ds.manifest().label_vocab == data.manifest.label_vocab);
  CHECK(ds.manifest().provenance == "synthetic");
  for (std::uint64_t t = 0; t < 4; ++t) {
    CHECK(ds.label(t) == data.labels[t]);
    const auto tok = ds.token(t);
    CHECK(std::memcmp(tok.data(), data.embeddings.data() + t * 24, 24 * sizeof(float)) == 0);
  }
}

TEST_CASE("store: random access matches sequential read") {
  TempDir dir;
  testing::ClusterSpec spec;
  spec.strength = {0.5, 1.0, 2.0};
  spec.n_train = 40;
  spec.n_dev = 10;
  const auto data = testing::make_clusters(spec);
  const auto ds = store::EmbeddingDataset::open(testing::write_store(data, dir / "c.ssch"));

  std::ifstream in(dir / "c.ssch", std::ios::binary);
  in.seekg(static_cast<std::streamoff>(store::kHeaderSize + 4 * ds.n_tokens()));
  std::vector<float> all(ds.n_tokens() * ds.n_layers() * ds.dim());
  in.read(reinterpret_cast<char*>(all.data()), static_cast<std::streamsize>(all.size() * 4));
  REQUIRE(in);

  for (std::uint64_t t : {49u, 0u, 17u, 3u})
    for (std::uint64_t l = 0; l < 3; ++l) {
      const auto v = ds.vector(t, l);
      REQUIRE(v.size() == ds.dim());
      for (std::size_t i = 0; i < v.size(); ++i)
        CHECK(v[i] == all[(t * ds.n_layers() + l) * ds.dim() + i]);
    }
}

TEST_CASE("store: header layout") {
  TempDir dir;
  const auto path = testing::write_store(small_store(), dir / "tiny.ssch");
  const std::string bytes = testing::read_file(path);
  REQUIRE(bytes.size() == 40 + 4 * 4 + 4 * 3 * 8 * 4);
  CHECK(bytes.substr(0, 4) == "SSCH");
  auto u64 = [&](std::size_t off) {
    std::uint64_t v = 0;
    for (int b = 7; b >= 0; --b) v = (v << 8) | static_cast<unsigned char>(bytes[off + b]);
    return v;
  };
  CHECK(u64(4) == 1);
  CHECK(u64(12) == 4);
  CHECK(u64(20) == 3);
  CHECK(u64(28) == 8);
  const auto ds = store::EmbeddingDataset::open(path);
  std::uint32_t crc = 0;
  std::memcpy(&crc, bytes.data() + 36, 4);
  CHECK(crc == ds.checksum());
}

TEST_CASE("store: write validation") {
  TempDir dir;
  auto data = small_store();
  data.labels[2] = 2;
  CHECK(error_message([&] { testing::write_store(data, dir / "a.ssch"); }) == "label out of range");

  data = small_store();
  data.embeddings[5] = std::numeric_limits<float>::quiet_NaN();
  CHECK(error_message([&] { testing::write_store(data, dir / "b.ssch"); }) ==
        "non-finite embedding");
  data.embeddings[5] = std::numeric_limits<float>::infinity();
  CHECK_THROWS_AS(testing::write_store(data, dir / "b.ssch"), Error);

  data = small_store();
  data.embeddings.pop_back();
  CHECK_THROWS_WITH_AS(testing::write_store(data, dir / "c.ssch"),
                       doctest::Contains("shape mismatch"), Error);

  data = small_store();
  CHECK_THROWS_AS(testing::write_store(data, dir / "missing" / "dir" / "x.ssch"), Error);
  CHECK_FALSE(std::filesystem::exists(dir / "a.ssch"));
}

TEST_CASE("store: manifest invariants") {
  auto m = testing::make_manifest("t", 2, 2, 3, 8, 2);
  CHECK_NOTHROW(m.validate());

  auto bad = m;
  bad.n_classes = 1;
  bad.label_vocab = {"x"};
  CHECK_THROWS_AS(bad.validate(), Error);

  bad = m;
  bad.label_vocab.push_back("extra");
  CHECK_THROWS_AS(bad.validate(), Error);

  bad = m;
  bad.splits[1].ranges = {{1, 4}};
  CHECK_THROWS_WITH(bad.validate(), doctest::Contains("overlap"));

  bad = m;
  bad.splits[1].ranges = {{2, 5}};
  CHECK_THROWS_AS(bad.validate(), Error);

  for (auto field : {&store::StoreManifest::n_layers, &store::StoreManifest::dim,
                     &store::StoreManifest::n_tokens}) {
    bad = m;
    bad.*field = 0;
    CHECK_THROWS_AS(bad.validate(), Error);
  }
}

TEST_CASE("store: manifest json keeps split order") {
  auto m = testing::make_manifest("t", 4, 4, 1, 2, 3);
  m.splits = {{"test", {{6, 8}}}, {"train", {{0, 4}}}, {"dev", {{4, 6}}}};
  const auto j = m.to_json();
  const auto back = store::StoreManifest::from_json(nlohmann::ordered_json::parse(j.dump()));
  REQUIRE(back.splits.size() == 3);
  CHECK(back.splits[0].name == "test");
  CHECK(back.splits[1].name == "train");
  CHECK(back.splits[2].name == "dev");
  CHECK(back.to_json().dump() == j.dump());
}

TEST_CASE("store: corrupted magic") {
  TempDir dir;
  const auto path = testing::write_store(small_store(), dir / "tiny.ssch");
  corrupt(path, 0, 'X');
  CHECK_THROWS_WITH(store::EmbeddingDataset::open(path),
                    doctest::Contains("unrecognized format"));
}

TEST_CASE("store: truncated payload") {
  TempDir dir;
  const auto path = testing::write_store(small_store(), dir / "tiny.ssch");
  const auto size = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, size - 37);
  CHECK_THROWS_WITH(store::EmbeddingDataset::open(path), doctest::Contains("truncated payload"));
  std::filesystem::resize_file(path, 20);
  CHECK_THROWS_WITH(store::EmbeddingDataset::open(path), doctest::Contains("truncated payload"));
}

TEST_CASE("store: version mismatch and checksum failure") {
  TempDir dir;
  const auto path = testing::write_store(small_store(), dir / "tiny.ssch");
  corrupt(path, 4, 2);
  CHECK_THROWS_WITH(store::EmbeddingDataset::open(path), doctest::Contains("version mismatch"));

  const auto path2 = testing::write_store(small_store(), dir / "tiny2.ssch");
  corrupt(path2, 40 + 16 + 9, 0x55);
  CHECK_THROWS_WITH(store::EmbeddingDataset::open(path2), doctest::Contains("checksum mismatch"));
}

TEST_CASE("store: manifest sidecar disagrees with header") {
  TempDir dir;
  const auto path = testing::write_store(small_store(), dir / "tiny.ssch");
  auto j = nlohmann::ordered_json::parse(testing::read_file(dir / "tiny.json"));
  j["dim"] = 4;
  testing::write_file(dir / "tiny.json", j.dump());
  CHECK_THROWS_AS(store::EmbeddingDataset::open(path), Error);

  std::filesystem::remove(dir / "tiny.json");
  try {
    store::EmbeddingDataset::open(path);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::Io);
  }
}

TEST_CASE("store: split views") {
  TempDir dir;
  const auto ds = store::EmbeddingDataset::open(testing::write_store(small_store(), dir / "t.ssch"));
  const auto train = store::split_view(ds, "train");
  const auto dev = store::split_view(ds, "dev");
  CHECK(train.size() == 2);
  CHECK(train.indices() == std::vector<std::uint64_t>{0, 1});
  CHECK(dev.indices() == std::vector<std::uint64_t>{2, 3});
  CHECK(train.labels() == std::vector<std::uint32_t>{0, 1});
  CHECK(dev.label(0) == 1);
  CHECK_THROWS_WITH(store::split_view(ds, "foo"), doctest::Contains("unknown split"));
  CHECK(store::full_view(ds).size() == 4);
}

TEST_CASE("store: views of declared splits are disjoint and ordered") {
  TempDir dir;
  auto data = small_store();
  data.manifest.n_tokens = 4;
  data.manifest.splits = {{"b", {{3, 4}, {0, 1}}}, {"a", {{1, 3}}}};
  const auto ds = store::EmbeddingDataset::open(testing::write_store(data, dir / "t.ssch"));
  const auto b = store::split_view(ds, "b");
  CHECK(b.indices() == std::vector<std::uint64_t>{3, 0});
  std::set<std::uint64_t> seen;
  for (const auto& s : ds.manifest().splits) {
    const auto view = store::split_view(ds, s.name);
    for (auto i : view.indices()) CHECK(seen.insert(i).second);
  }
}

TEST_CASE("store: copies share the mapping") {
  TempDir dir;
  auto view = [&] {
    const auto ds =
        store::EmbeddingDataset::open(testing::write_store(small_store(), dir / "t.ssch"));
    return store::split_view(ds, "dev");
  }();
  CHECK(view.dataset().vector(3, 2).size() == 8);
  CHECK(view.label(1) == 0);
}
