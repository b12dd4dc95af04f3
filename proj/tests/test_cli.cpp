#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "oracles.hpp"
#include "vas/embstore.hpp"
#include "vas/scoring.hpp"

#ifndef VAS_CLI_PATH
#error "VAS_CLI_PATH must point at the vas-select binary"
#endif

namespace {

struct Outcome {
  int code = -1;
  std::string err;
};

Outcome run_cli(const std::string& args, const std::filesystem::path& scratch) {
  const auto err_path = scratch / "stderr.txt";
  const std::string cmd = std::string(VAS_CLI_PATH) + " " + args + " >/dev/null 2>" + err_path.string();
  const int status = std::system(cmd.c_str());
  Outcome o;
  o.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(err_path);
  o.err.assign(std::istreambuf_iterator<char>(in), {});
  return o;
}

std::string bytes_of(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST_CASE("cli: mismatched pair counts are a validation error") {
  oracle::TempDir dir("cli");
  oracle::Rand rng(1);
  vas::save_embeddings(oracle::random_embeddings(rng, 10, 4, true), dir / "v.vemb");
  vas::save_embeddings(oracle::random_embeddings(rng, 11, 4, true, vas::Modality::language), dir / "l.vemb");
  const auto o = run_cli("clipscore --image " + (dir / "v.vemb").string() + " --text " + (dir / "l.vemb").string() +
                             " --out " + (dir / "c.csv").string(),
                         dir.path);
  CHECK(o.code == 2);
  CHECK(o.err.find("LengthMismatch") != std::string::npos);
  CHECK_FALSE(std::filesystem::exists(dir / "c.csv"));
  CHECK_FALSE(std::filesystem::exists(dir / "c.csv.manifest.json"));
}

TEST_CASE("cli: a missing input file is an I/O error") {
  oracle::TempDir dir("cli");
  const auto o = run_cli("vas --image " + (dir / "nope.vemb").string() + " --prior-from " +
                             (dir / "nope.vemb").string() + " --out " + (dir / "s.csv").string(),
                         dir.path);
  CHECK(o.code == 1);
  CHECK(o.err.find("error:") != std::string::npos);
  CHECK_FALSE(std::filesystem::exists(dir / "s.csv"));
}

TEST_CASE("cli: bad flags are a validation error") {
  oracle::TempDir dir("cli");
  CHECK(run_cli("vasd --bogus", dir.path).code == 2);
  CHECK(run_cli("", dir.path).code == 2);
}

TEST_CASE("cli: every subcommand has help") {
  oracle::TempDir dir("cli");
  CHECK(run_cli("--help", dir.path).code == 0);
  for (const char* sub : {"clipscore", "vas", "pipeline", "vasd", "optdesign", "sim", "stats"}) {
    CAPTURE(sub);
    CHECK(run_cli(std::string(sub) + " --help", dir.path).code == 0);
  }
}

TEST_CASE("cli: vas output matches the library byte for byte") {
  oracle::TempDir dir("cli");
  oracle::Rand rng(2);
  auto v = oracle::random_embeddings(rng, 300, 8, true);
  const auto proxy = oracle::random_embeddings(rng, 120, 8, true);
  vas::save_embeddings(v, dir / "v.vemb");
  vas::save_embeddings(proxy, dir / "p.vemb");
  const auto o = run_cli("vas --image " + (dir / "v.vemb").string() + " --prior-from " + (dir / "p.vemb").string() +
                             " --threads 3 --out " + (dir / "cli.csv").string(),
                         dir.path);
  REQUIRE(o.code == 0);
  const auto prior = vas::second_moment(proxy, nullptr, 1);
  vas::write_scores_csv(vas::vas_scores(v, nullptr, prior, 1), v.ids, dir / "lib.csv");
  CHECK(bytes_of(dir / "cli.csv") == bytes_of(dir / "lib.csv"));
  CHECK(std::filesystem::exists(dir / "cli.csv.manifest.json"));
  const std::string manifest = bytes_of(dir / "cli.csv.manifest.json");
  CHECK(manifest.find("\"subcommand\": \"vas\"") != std::string::npos);
  CHECK(manifest.find("--threads") != std::string::npos);
}

TEST_CASE("cli: identity prior on unit rows scores one") {
  oracle::TempDir dir("cli");
  oracle::Rand rng(3);
  vas::save_embeddings(oracle::random_embeddings(rng, 50, 6, true), dir / "v.vemb");
  vas::save_moment(vas::MomentMatrix::identity(6), dir / "eye.vmom");
  const auto o = run_cli("vas --image " + (dir / "v.vemb").string() + " --prior " + (dir / "eye.vmom").string() +
                             " --out " + (dir / "s.csv").string(),
                         dir.path);
  REQUIRE(o.code == 0);
  const auto s = vas::read_scores_csv(dir / "s.csv");
  REQUIRE(s.size() == 50);
  for (double x : s.scores) CHECK(x == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("cli: pipeline keeps the requested counts") {
  oracle::TempDir dir("cli");
  oracle::Rand rng(4);
  vas::save_embeddings(oracle::random_embeddings(rng, 100, 5, true), dir / "v.vemb");
  vas::save_embeddings(oracle::random_embeddings(rng, 100, 5, true, vas::Modality::language), dir / "l.vemb");
  const auto o = run_cli("pipeline --image " + (dir / "v.vemb").string() + " --text " + (dir / "l.vemb").string() +
                             " --prior-from " + (dir / "v.vemb").string() + " --out " + (dir / "keep.txt").string(),
                         dir.path);
  REQUIRE(o.code == 0);
  std::ifstream in(dir / "keep.txt");
  std::string line;
  int count = 0;
  while (std::getline(in, line)) count += !line.empty() && line[0] != '#';
  CHECK(count == 30);
  std::ifstream stages(dir / "keep.stages.jsonl");
  int lines = 0;
  while (std::getline(stages, line)) ++lines;
  CHECK(lines == 2);
}
