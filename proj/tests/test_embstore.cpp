#include <cstring>
#include <fstream>

#include "doctest.h"
#include "oracles.hpp"
#include "vas/embstore.hpp"
#include "vas/error.hpp"

using vas::Errc;
using vas::Error;

namespace {

void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

Errc code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return Errc::io_failure;
}

std::string file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST_CASE("csv identity rows load as normalized") {
  oracle::TempDir dir("emb");
  write_text(dir / "eye.csv", "1,0\n0,1\n");
  const auto m = vas::load_embeddings(dir / "eye.csv", true);
  CHECK(m.n == 2);
  CHECK(m.d == 2);
  CHECK(m.normalized);
  CHECK(m.data == std::vector<float>{1, 0, 0, 1});
}

TEST_CASE("csv 3,0,4 is scaled to unit norm") {
  oracle::TempDir dir("emb");
  write_text(dir / "r.csv", "3,0,4\n");
  const auto m = vas::load_embeddings(dir / "r.csv", true);
  CHECK(m.data[0] == doctest::Approx(0.6).epsilon(1e-7));
  CHECK(m.data[1] == 0.0f);
  CHECK(m.data[2] == doctest::Approx(0.8).epsilon(1e-7));
}

TEST_CASE("binary round trip of 1000x512 is byte identical") {
  oracle::TempDir dir("emb");
  oracle::Rand rng(7);
  auto m = oracle::random_embeddings(rng, 1000, 512, false);
  std::vector<std::uint64_t> ids(1000);
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = 1000000 + 3 * i;
  m.ids = ids;
  vas::save_embeddings(m, dir / "a.vemb");
  const auto back = vas::load_embeddings(dir / "a.vemb", false);
  CHECK(back == m);
  vas::save_embeddings(back, dir / "b.vemb");
  CHECK(file_bytes(dir / "a.vemb") == file_bytes(dir / "b.vemb"));
  CHECK(file_bytes(dir / "a.vemb").size() == vas::EmbeddingHeader::kSize + 1000 * 512 * 4);
}

TEST_CASE("round trip property over random shapes") {
  oracle::TempDir dir("emb");
  oracle::Rand rng(11);
  for (int trial = 0; trial < 25; ++trial) {
    const auto n = 1 + rng.below(40);
    const auto d = static_cast<std::uint32_t>(1 + rng.below(20));
    const bool unit = trial % 2 == 0;
    auto m = oracle::random_embeddings(rng, n, d, unit, trial % 3 ? vas::Modality::vision : vas::Modality::language);
    vas::save_embeddings(m, dir / "m.vemb");
    CHECK(vas::load_embeddings(dir / "m.vemb", false) == m);
  }
}

TEST_CASE("header layout") {
  oracle::TempDir dir("emb");
  auto m = vas::EmbeddingMatrix::make(2, 3, {1, 0, 0, 0, 1, 0}, vas::Modality::language);
  m.normalized = true;
  vas::save_embeddings(m, dir / "h.vemb");
  const std::string bytes = file_bytes(dir / "h.vemb");
  REQUIRE(bytes.size() == 32 + 24);
  CHECK(bytes.substr(0, 4) == "VEMB");
  std::uint32_t version = 0, d = 0;
  std::uint64_t n = 0;
  std::memcpy(&version, bytes.data() + 4, 4);
  std::memcpy(&n, bytes.data() + 8, 8);
  std::memcpy(&d, bytes.data() + 16, 4);
  CHECK(version == 1);
  CHECK(n == 2);
  CHECK(d == 3);
  CHECK(bytes[20] == 1);
  CHECK(bytes[21] == 1);
  CHECK(bytes[22] == 1);
  for (int i = 23; i < 32; ++i) CHECK(bytes[static_cast<std::size_t>(i)] == 0);
}

TEST_CASE("corrupt binary files are rejected with specific errors") {
  oracle::TempDir dir("emb");
  auto m = vas::EmbeddingMatrix::make(4, 2, {1, 2, 3, 4, 5, 6, 7, 8});
  vas::save_embeddings(m, dir / "ok.vemb");
  std::string bytes = file_bytes(dir / "ok.vemb");

  std::string bad = bytes;
  bad[0] = 'X';
  write_text(dir / "magic.vemb", bad);
  CHECK(code_of([&] { vas::load_embeddings(dir / "magic.vemb", false); }) == Errc::bad_magic);

  bad = bytes;
  bad[4] = 2;
  write_text(dir / "ver.vemb", bad);
  CHECK(code_of([&] { vas::load_embeddings(dir / "ver.vemb", false); }) == Errc::version_mismatch);

  write_text(dir / "short.vemb", bytes.substr(0, bytes.size() - 4));
  CHECK(code_of([&] { vas::load_embeddings(dir / "short.vemb", false); }) == Errc::truncated_payload);

  vas::LoadOptions tiny;
  tiny.max_bytes = 16;
  CHECK(code_of([&] { vas::load_embeddings(dir / "ok.vemb", tiny); }) == Errc::dimension_overflow);

  CHECK(code_of([&] { vas::load_embeddings(dir / "missing.vemb", false); }) == Errc::io_failure);
}

TEST_CASE("zero rows cannot be normalized") {
  oracle::TempDir dir("emb");
  write_text(dir / "z.csv", "1,0\n0,0\n");
  try {
    vas::load_embeddings(dir / "z.csv", true);
    FAIL("expected ZeroNormRow");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::zero_norm_row);
    CHECK(std::string(e.what()).find("row 1") != std::string::npos);
  }
}

TEST_CASE("a normalized header over non-unit rows is rejected") {
  oracle::TempDir dir("emb");
  auto m = vas::EmbeddingMatrix::make(1, 2, {1, 0});
  m.normalized = true;
  vas::save_embeddings(m, dir / "n.vemb");
  std::string bytes = file_bytes(dir / "n.vemb");
  const float two = 2.0f;
  std::memcpy(bytes.data() + 32, &two, 4);
  write_text(dir / "n.vemb", bytes);
  CHECK(code_of([&] { vas::load_embeddings(dir / "n.vemb", false); }) == Errc::not_normalized);
}

TEST_CASE("save rejects wrong-length ids before writing anything") {
  oracle::TempDir dir("emb");
  auto m = vas::EmbeddingMatrix::make(3, 1, {1, 2, 3});
  m.ids = std::vector<std::uint64_t>{1, 2};
  CHECK(code_of([&] { vas::save_embeddings(m, dir / "w.vemb"); }) == Errc::length_mismatch);
  CHECK_FALSE(std::filesystem::exists(dir / "w.vemb"));
  CHECK(std::filesystem::is_empty(dir.path));
}

TEST_CASE("empty and duplicate-id matrices are invalid") {
  CHECK(code_of([] { vas::EmbeddingMatrix::make(0, 4, {}); }) == Errc::invalid_shape);
  CHECK(code_of([] { vas::EmbeddingMatrix::make(2, 1, {1, 2}, vas::Modality::vision, std::vector<std::uint64_t>{5, 5}); }) ==
        Errc::invalid_shape);
}

TEST_CASE("align_pairs") {
  auto v = vas::EmbeddingMatrix::make(3, 1, {1, 1, 1}, vas::Modality::vision, std::vector<std::uint64_t>{1, 2, 3});
  auto l = vas::EmbeddingMatrix::make(3, 1, {1, 1, 1}, vas::Modality::language, std::vector<std::uint64_t>{1, 2, 3});
  CHECK(vas::align_pairs(v, l).size() == 3);

  auto l4 = vas::EmbeddingMatrix::make(4, 1, {1, 1, 1, 1}, vas::Modality::language);
  CHECK(code_of([&] { vas::align_pairs(v, l4); }) == Errc::length_mismatch);

  auto swapped =
      vas::EmbeddingMatrix::make(3, 1, {1, 1, 1}, vas::Modality::language, std::vector<std::uint64_t>{1, 3, 2});
  try {
    vas::align_pairs(v, swapped);
    FAIL("expected IdMismatch");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::id_mismatch);
    CHECK(std::string(e.what()).find("position 1") != std::string::npos);
  }
}

TEST_CASE("renormalization is idempotent") {
  oracle::Rand rng(3);
  auto m = oracle::random_embeddings(rng, 50, 1024, true);
  auto again = m;
  vas::renormalize(again);
  for (std::size_t i = 0; i < m.data.size(); ++i) {
    CHECK(std::abs(again.data[i] - m.data[i]) <= 1e-7 * std::max(1e-3f, std::abs(m.data[i])));
  }
}

TEST_CASE("csv and binary loaders agree") {
  oracle::TempDir dir("emb");
  oracle::Rand rng(5);
  const auto m = oracle::random_embeddings(rng, 30, 7, false);
  vas::save_embeddings(m, dir / "m.vemb");
  {
    std::ofstream out(dir / "m.csv");
    out.precision(9);
    for (std::uint64_t i = 0; i < m.n; ++i) {
      for (std::uint32_t j = 0; j < m.d; ++j) out << (j ? "," : "") << m.row(i)[j];
      out << '\n';
    }
  }
  const auto a = vas::load_embeddings(dir / "m.vemb", false);
  const auto b = vas::load_embeddings(dir / "m.csv", false);
  REQUIRE(a.data.size() == b.data.size());
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    CHECK(std::abs(a.data[i] - b.data[i]) <= 1e-6 * std::max(1.0f, std::abs(a.data[i])));
  }
}

TEST_CASE("csv malformed lines") {
  oracle::TempDir dir("emb");
  write_text(dir / "ragged.csv", "1,2\n3\n");
  CHECK(code_of([&] { vas::load_embeddings(dir / "ragged.csv", false); }) == Errc::invalid_shape);
  write_text(dir / "junk.csv", "1,x\n");
  CHECK(code_of([&] { vas::load_embeddings(dir / "junk.csv", false); }) == Errc::parse_error);
}

TEST_CASE("id sidecar is loaded with the matrix") {
  oracle::TempDir dir("emb");
  auto m = vas::EmbeddingMatrix::make(2, 1, {1, 2}, vas::Modality::vision, std::vector<std::uint64_t>{42, 7});
  vas::save_embeddings(m, dir / "s.vemb");
  CHECK(std::filesystem::exists(vas::id_sidecar_path(dir / "s.vemb")));
  const auto back = vas::load_embeddings(dir / "s.vemb", false);
  REQUIRE(back.ids);
  CHECK(*back.ids == std::vector<std::uint64_t>{42, 7});
}

TEST_CASE("streaming reader returns the same rows in chunks") {
  oracle::TempDir dir("emb");
  oracle::Rand rng(9);
  const auto m = oracle::random_embeddings(rng, 103, 5, false);
  vas::save_embeddings(m, dir / "s.vemb");
  vas::EmbeddingStream stream(dir / "s.vemb");
  CHECK(stream.header().n == 103);
  std::vector<float> all, chunk;
  while (stream.read(10, chunk) > 0) all.insert(all.end(), chunk.begin(), chunk.end());
  CHECK(all == m.data);
  stream.seek_row(100);
  CHECK(stream.read(10, chunk) == 3);
  CHECK(std::equal(chunk.begin(), chunk.end(), m.data.begin() + 500));
}
