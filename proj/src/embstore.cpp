#include "vas/embstore.hpp"

#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>
#include <string>
#include <unordered_set>

#include "vas/error.hpp"
#include "vas/io_util.hpp"

namespace vas {

namespace {

static_assert(std::endian::native == std::endian::little,
              "payload I/O assumes a little-endian host");

template <typename T>
void put_le(unsigned char* dst, T value) {
  std::memcpy(dst, &value, sizeof(T));
}

template <typename T>
T get_le(const unsigned char* src) {
  T value;
  std::memcpy(&value, src, sizeof(T));
  return value;
}

// Layout: magic[0,4) version[4,8) n[8,16) d[16,20) dtype[20] modality[21]
// normalized[22] reserved[23,32).
std::array<unsigned char, EmbeddingHeader::kSize> encode_header(const EmbeddingHeader& h) {
  std::array<unsigned char, EmbeddingHeader::kSize> buf{};
  std::memcpy(buf.data(), EmbeddingHeader::kMagic, 4);
  put_le<std::uint32_t>(buf.data() + 4, EmbeddingHeader::kVersion);
  put_le<std::uint64_t>(buf.data() + 8, h.n);
  put_le<std::uint32_t>(buf.data() + 16, h.d);
  buf[20] = h.dtype;
  buf[21] = static_cast<unsigned char>(h.modality);
  buf[22] = h.normalized ? 1 : 0;
  return buf;
}

EmbeddingHeader read_header(std::ifstream& in, const std::filesystem::path& path,
                            std::uint64_t file_size) {
  std::array<unsigned char, EmbeddingHeader::kSize> buf{};
  in.read(reinterpret_cast<char*>(buf.data()), buf.size());
  if (in.gcount() < 4 || std::memcmp(buf.data(), EmbeddingHeader::kMagic, 4) != 0) {
    throw Error(Errc::bad_magic, path.string());
  }
  if (static_cast<std::size_t>(in.gcount()) < buf.size()) {
    throw Error(Errc::truncated_payload, "short header in " + path.string());
  }
  if (get_le<std::uint32_t>(buf.data() + 4) != EmbeddingHeader::kVersion) {
    throw Error(Errc::version_mismatch, "version " + std::to_string(get_le<std::uint32_t>(buf.data() + 4)));
  }
  EmbeddingHeader h;
  h.n = get_le<std::uint64_t>(buf.data() + 8);
  h.d = get_le<std::uint32_t>(buf.data() + 16);
  h.dtype = buf[20];
  if (h.dtype != EmbeddingHeader::kDtypeF32) {
    throw Error(Errc::version_mismatch, "unsupported dtype code " + std::to_string(h.dtype));
  }
  if (buf[21] > 1) throw Error(Errc::invalid_shape, "bad modality code");
  h.modality = static_cast<Modality>(buf[21]);
  h.normalized = buf[22] != 0;
  if (h.n == 0 || h.d == 0) throw Error(Errc::invalid_shape, "n and d must be >= 1");
  if (h.n > std::numeric_limits<std::uint64_t>::max() / 4 / h.d) {
    throw Error(Errc::dimension_overflow, "n*d overflows");
  }
  const std::uint64_t payload = h.n * h.d * 4;
  if (file_size - EmbeddingHeader::kSize != payload) {
    throw Error(Errc::truncated_payload, "header declares " + std::to_string(payload) +
                                             " payload bytes, file has " +
                                             std::to_string(file_size - EmbeddingHeader::kSize));
  }
  return h;
}

std::uint64_t checked_file_size(const std::filesystem::path& path) {
  std::error_code ec;
  const auto size = std::filesystem::file_size(path, ec);
  if (ec) throw Error(Errc::io_failure, "cannot stat " + path.string() + ": " + ec.message());
  return size;
}

bool is_csv(const std::filesystem::path& path) {
  auto ext = path.extension().string();
  for (auto& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return ext == ".csv";
}

EmbeddingMatrix load_csv(const std::filesystem::path& path, const LoadOptions& opts) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::io_failure, "cannot open " + path.string());
  std::vector<float> data;
  std::uint32_t d = 0;
  std::uint64_t n = 0;
  std::string line;
  std::uint64_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    std::uint32_t cols = 0;
    const char* p = line.data();
    const char* end = line.data() + line.size();
    for (;;) {
      while (p < end && (*p == ' ' || *p == '\t')) ++p;
      float value = 0.0f;
      auto [next, ec] = std::from_chars(p, end, value);
      if (ec != std::errc{}) {
        throw Error(Errc::parse_error, path.string() + ":" + std::to_string(line_no));
      }
      data.push_back(value);
      ++cols;
      p = next;
      while (p < end && (*p == ' ' || *p == '\t')) ++p;
      if (p == end) break;
      if (*p != ',') throw Error(Errc::parse_error, path.string() + ":" + std::to_string(line_no));
      ++p;
    }
    if (d == 0) d = cols;
    if (cols != d) {
      throw Error(Errc::invalid_shape, "line " + std::to_string(line_no) + " has " +
                                           std::to_string(cols) + " columns, expected " +
                                           std::to_string(d));
    }
    ++n;
    if (data.size() > kCsvMaxEntries) {
      throw Error(Errc::dimension_overflow, "CSV input limited to 1e7 entries");
    }
  }
  if (n == 0) throw Error(Errc::invalid_shape, "empty CSV " + path.string());
  if (n * d * 4 > opts.max_bytes) throw Error(Errc::dimension_overflow, path.string());
  EmbeddingMatrix m;
  m.n = n;
  m.d = d;
  m.data = std::move(data);
  m.modality = opts.csv_modality;
  return m;
}

}  // namespace

std::string_view modality_name(Modality m) noexcept {
  return m == Modality::vision ? "vision" : "language";
}

EmbeddingMatrix EmbeddingMatrix::make(std::uint64_t n, std::uint32_t d, std::vector<float> data,
                                      Modality modality,
                                      std::optional<std::vector<std::uint64_t>> ids) {
  EmbeddingMatrix m;
  m.n = n;
  m.d = d;
  m.data = std::move(data);
  m.modality = modality;
  m.ids = std::move(ids);
  m.validate();
  return m;
}

void EmbeddingMatrix::validate() const {
  if (n == 0 || d == 0) throw Error(Errc::invalid_shape, "n and d must be >= 1");
  if (data.size() != n * d) {
    throw Error(Errc::invalid_shape, "data has " + std::to_string(data.size()) +
                                         " entries, expected " + std::to_string(n * d));
  }
  if (ids) {
    if (ids->size() != n) {
      throw Error(Errc::length_mismatch, "ids has " + std::to_string(ids->size()) +
                                             " entries, expected " + std::to_string(n));
    }
    std::unordered_set<std::uint64_t> seen;
    seen.reserve(ids->size());
    for (auto id : *ids) {
      if (!seen.insert(id).second) throw Error(Errc::invalid_shape, "duplicate id " + std::to_string(id));
    }
  }
  if (normalized && max_norm_deviation(*this) > kNormTolerance) {
    throw Error(Errc::not_normalized, "rows flagged normalized are not unit norm");
  }
}

double max_norm_deviation(const EmbeddingMatrix& m) {
  double worst = 0.0;
  for (std::uint64_t i = 0; i < m.n; ++i) {
    double sq = 0.0;
    for (float v : m.row(i)) sq += static_cast<double>(v) * v;
    worst = std::max(worst, std::abs(std::sqrt(sq) - 1.0));
  }
  return worst;
}

void renormalize(EmbeddingMatrix& m) {
  for (std::uint64_t i = 0; i < m.n; ++i) {
    auto r = m.row(i);
    double sq = 0.0;
    for (float v : r) sq += static_cast<double>(v) * v;
    const double norm = std::sqrt(sq);
    if (!(norm >= 1e-12)) throw Error(Errc::zero_norm_row, "row " + std::to_string(i));
    for (float& v : r) v = static_cast<float>(static_cast<double>(v) / norm);
  }
  m.normalized = true;
}

std::filesystem::path id_sidecar_path(const std::filesystem::path& path) {
  return std::filesystem::path(path.string() + ".ids");
}

EmbeddingMatrix load_embeddings(const std::filesystem::path& path, const LoadOptions& opts) {
  EmbeddingMatrix m;
  if (is_csv(path)) {
    m = load_csv(path, opts);
  } else {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(Errc::io_failure, "cannot open " + path.string());
    const auto header = read_header(in, path, checked_file_size(path));
    const std::uint64_t bytes = header.n * header.d * 4;
    if (bytes > opts.max_bytes) {
      throw Error(Errc::dimension_overflow, std::to_string(bytes) + " bytes exceeds budget of " +
                                                std::to_string(opts.max_bytes));
    }
    m.n = header.n;
    m.d = header.d;
    m.modality = header.modality;
    m.normalized = header.normalized;
    m.data.resize(header.n * header.d);
    in.read(reinterpret_cast<char*>(m.data.data()), static_cast<std::streamsize>(bytes));
    if (static_cast<std::uint64_t>(in.gcount()) != bytes) {
      throw Error(Errc::truncated_payload, path.string());
    }
  }
  if (opts.read_id_sidecar) {
    const auto sidecar = id_sidecar_path(path);
    if (std::filesystem::exists(sidecar)) m.ids = load_ids(sidecar);
  }
  if (m.normalized) {
    if (max_norm_deviation(m) > kNormTolerance) {
      throw Error(Errc::not_normalized, "header flags normalized but rows are not unit norm");
    }
  } else if (opts.expect_normalized) {
    renormalize(m);
  }
  m.validate();
  return m;
}

void save_embeddings(const EmbeddingMatrix& m, const std::filesystem::path& path) {
  m.validate();
  EmbeddingHeader h;
  h.n = m.n;
  h.d = m.d;
  h.modality = m.modality;
  h.normalized = m.normalized;
  const auto header = encode_header(h);
  {
    AtomicFile out(path, /*binary=*/true);
    out.stream().write(reinterpret_cast<const char*>(header.data()), header.size());
    out.stream().write(reinterpret_cast<const char*>(m.data.data()),
                       static_cast<std::streamsize>(m.data.size() * sizeof(float)));
    out.commit();
  }
  const auto sidecar = id_sidecar_path(path);
  if (m.ids) {
    save_ids(*m.ids, sidecar);
  } else {
    std::error_code ec;
    std::filesystem::remove(sidecar, ec);
  }
}

std::vector<std::uint64_t> load_ids(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::io_failure, "cannot open " + path.string());
  std::vector<std::uint64_t> ids;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::uint64_t value = 0;
    auto [ptr, ec] = std::from_chars(line.data(), line.data() + line.size(), value);
    if (ec != std::errc{} || ptr != line.data() + line.size()) {
      throw Error(Errc::parse_error, "bad id '" + line + "' in " + path.string());
    }
    ids.push_back(value);
  }
  return ids;
}

void save_ids(std::span<const std::uint64_t> ids, const std::filesystem::path& path) {
  AtomicFile out(path);
  for (auto id : ids) out.stream() << id << '\n';
  out.commit();
}

EmbeddingStream::EmbeddingStream(const std::filesystem::path& path)
    : in_(path, std::ios::binary) {
  if (!in_) throw Error(Errc::io_failure, "cannot open " + path.string());
  header_ = read_header(in_, path, checked_file_size(path));
}

std::uint64_t EmbeddingStream::read(std::uint64_t max_rows, std::vector<float>& out) {
  const std::uint64_t rows = std::min(max_rows, rows_remaining());
  out.resize(rows * header_.d);
  if (rows == 0) return 0;
  const auto bytes = static_cast<std::streamsize>(rows * header_.d * sizeof(float));
  in_.read(reinterpret_cast<char*>(out.data()), bytes);
  if (in_.gcount() != bytes) throw Error(Errc::truncated_payload, "stream ended early");
  next_row_ += rows;
  return rows;
}

void EmbeddingStream::seek_row(std::uint64_t row) {
  if (row > header_.n) throw Error(Errc::invalid_argument, "seek past end");
  in_.clear();
  in_.seekg(static_cast<std::streamoff>(EmbeddingHeader::kSize + row * header_.d * sizeof(float)));
  next_row_ = row;
}

PairedView align_pairs(const EmbeddingMatrix& vision, const EmbeddingMatrix& language) {
  if (vision.n != language.n) {
    throw Error(Errc::length_mismatch, std::to_string(vision.n) + " vs " + std::to_string(language.n));
  }
  if (vision.ids && language.ids) {
    const auto& a = *vision.ids;
    const auto& b = *language.ids;
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (a[i] != b[i]) throw Error(Errc::id_mismatch, "position " + std::to_string(i));
    }
  }
  return PairedView(vision, language);
}

}  // namespace vas
