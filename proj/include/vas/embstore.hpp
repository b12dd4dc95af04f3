#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

namespace vas {

enum class Modality : std::uint8_t { vision = 0, language = 1 };

std::string_view modality_name(Modality m) noexcept;

/// n x d row-major float32 embeddings for one modality.
///
/// Construct through make() or the loaders; the invariants (n, d >= 1,
/// data.size() == n*d, unique ids of length n, unit rows when normalized)
/// are checked there. Treat loaded matrices as immutable.
struct EmbeddingMatrix {
  std::uint64_t n = 0;
  std::uint32_t d = 0;
  std::vector<float> data;
  std::optional<std::vector<std::uint64_t>> ids;
  Modality modality = Modality::vision;
  bool normalized = false;

  static EmbeddingMatrix make(std::uint64_t n, std::uint32_t d, std::vector<float> data,
                              Modality modality = Modality::vision,
                              std::optional<std::vector<std::uint64_t>> ids = std::nullopt);

  std::span<const float> row(std::uint64_t i) const {
    return {data.data() + i * d, d};
  }
  std::span<float> row(std::uint64_t i) { return {data.data() + i * d, d}; }

  /// Throws if any invariant is violated.
  void validate() const;

  friend bool operator==(const EmbeddingMatrix&, const EmbeddingMatrix&) = default;
};

/// Divides every row by its float64 norm. Throws ZeroNormRow(i) for norms < 1e-12.
void renormalize(EmbeddingMatrix& m);

/// Largest |‖row‖ - 1| over all rows.
double max_norm_deviation(const EmbeddingMatrix& m);

inline constexpr double kNormTolerance = 1e-3;
inline constexpr std::uint64_t kCsvMaxEntries = 10'000'000;

struct LoadOptions {
  bool expect_normalized = false;
  /// Upper bound on n*d*4 payload bytes; DimensionOverflow beyond it.
  std::uint64_t max_bytes = std::uint64_t{16} << 30;
  /// Modality assigned to CSV inputs (the binary header carries its own).
  Modality csv_modality = Modality::vision;
  /// Read "<path>.ids" when it exists.
  bool read_id_sidecar = true;
};

/// Binary "VEMB" file (32-byte header + float32 LE payload) or, for a ".csv"
/// extension, one row of comma-separated reals per line.
EmbeddingMatrix load_embeddings(const std::filesystem::path& path, const LoadOptions& opts = {});
inline EmbeddingMatrix load_embeddings(const std::filesystem::path& path, bool expect_normalized) {
  LoadOptions opts;
  opts.expect_normalized = expect_normalized;
  return load_embeddings(path, opts);
}

/// Writes the binary format; ids (if any) go to the "<path>.ids" sidecar.
void save_embeddings(const EmbeddingMatrix& m, const std::filesystem::path& path);

std::vector<std::uint64_t> load_ids(const std::filesystem::path& path);
void save_ids(std::span<const std::uint64_t> ids, const std::filesystem::path& path);

std::filesystem::path id_sidecar_path(const std::filesystem::path& path);

struct EmbeddingHeader {
  static constexpr char kMagic[4] = {'V', 'E', 'M', 'B'};
  static constexpr std::uint32_t kVersion = 1;
  static constexpr std::size_t kSize = 32;
  static constexpr std::uint8_t kDtypeF32 = 1;

  std::uint64_t n = 0;
  std::uint32_t d = 0;
  std::uint8_t dtype = kDtypeF32;
  Modality modality = Modality::vision;
  bool normalized = false;
};

/// Row-chunk reader over the binary format; the header is validated on open.
class EmbeddingStream {
 public:
  explicit EmbeddingStream(const std::filesystem::path& path);

  const EmbeddingHeader& header() const { return header_; }
  std::uint64_t rows_remaining() const { return header_.n - next_row_; }

  /// Reads up to max_rows rows into out (resized to rows*d); returns rows read.
  std::uint64_t read(std::uint64_t max_rows, std::vector<float>& out);
  void seek_row(std::uint64_t row);

 private:
  std::ifstream in_;
  EmbeddingHeader header_;
  std::uint64_t next_row_ = 0;
};

/// Read-only pairing of row i of the vision matrix with row i of the language matrix.
class PairedView {
 public:
  PairedView(const EmbeddingMatrix& vision, const EmbeddingMatrix& language)
      : vision_(&vision), language_(&language) {}

  const EmbeddingMatrix& vision() const { return *vision_; }
  const EmbeddingMatrix& language() const { return *language_; }
  std::uint64_t size() const { return vision_->n; }
  std::uint32_t dim() const { return vision_->d; }

 private:
  const EmbeddingMatrix* vision_;
  const EmbeddingMatrix* language_;
};

/// LengthMismatch when n differs; IdMismatch(first differing position) when
/// both sides carry ids that disagree.
PairedView align_pairs(const EmbeddingMatrix& vision, const EmbeddingMatrix& language);

}  // namespace vas
