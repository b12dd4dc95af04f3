#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>

namespace vas {

/// Writes to "<path>.tmp-<pid>" and renames over `path` on commit().
/// If destroyed without commit() the temporary is removed, so a failed run
/// never leaves a partial output file behind.
class AtomicFile {
 public:
  explicit AtomicFile(std::filesystem::path path, bool binary = false);
  ~AtomicFile();

  AtomicFile(const AtomicFile&) = delete;
  AtomicFile& operator=(const AtomicFile&) = delete;

  std::ofstream& stream() { return out_; }
  void commit();

 private:
  std::filesystem::path path_;
  std::filesystem::path tmp_;
  std::ofstream out_;
  bool committed_ = false;
};

/// Shortest text that parses back to the same double ("%.17g").
std::string format_double(double value);

/// 64-bit FNV-1a over the bytes of a file.
std::uint64_t hash_file(const std::filesystem::path& path);

/// 64-bit FNV-1a over a byte string.
std::uint64_t hash_bytes(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);

std::string to_hex(std::uint64_t value);

}  // namespace vas
