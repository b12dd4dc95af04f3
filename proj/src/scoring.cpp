#include "vas/scoring.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>

#include "vas/error.hpp"
#include "vas/io_util.hpp"
#include "vas/parallel.hpp"

namespace vas {

namespace {

// Chunks reduced per wave when summing moment partials; bounds memory to
// kWave d x d partials without making the sum order depend on workers.
constexpr std::size_t kWave = 16;

template <typename RowAt>
void gather_rows(const EmbeddingMatrix& m, std::uint64_t begin, std::uint64_t end, RowAt row_at,
                 RowMajorMatrix& out) {
  out.resize(static_cast<Eigen::Index>(end - begin), m.d);
  for (std::uint64_t j = begin; j < end; ++j) {
    const float* src = m.data.data() + row_at(j) * m.d;
    double* dst = out.data() + (j - begin) * m.d;
    for (std::uint32_t c = 0; c < m.d; ++c) dst[c] = src[c];
  }
}

template <typename RowAt>
void quadratic_forms_impl(const EmbeddingMatrix& a, const EmbeddingMatrix& b,
                          const Eigen::MatrixXd& sigma, std::uint64_t count, RowAt row_at,
                          double* out, unsigned workers) {
  const bool same = &a == &b;
  const Eigen::MatrixXd sigma_t = sigma.transpose();
  const std::uint64_t n_chunks = (count + kScoreChunkRows - 1) / kScoreChunkRows;
  parallel_for(n_chunks, workers, [&](std::size_t chunk) {
    const std::uint64_t begin = chunk * kScoreChunkRows;
    const std::uint64_t end = std::min(count, begin + kScoreChunkRows);
    RowMajorMatrix left;
    RowMajorMatrix right;
    gather_rows(a, begin, end, row_at, left);
    if (!same) gather_rows(b, begin, end, row_at, right);
    // Row j of projected is (sigma * b_j)^T.
    RowMajorMatrix projected = (same ? left : right) * sigma_t;
    for (Eigen::Index j = 0; j < left.rows(); ++j) {
      out[begin + static_cast<std::uint64_t>(j)] = left.row(j).dot(projected.row(j));
    }
  });
}

template <typename RowAt>
Eigen::MatrixXd moment_sum_impl(const EmbeddingMatrix& a, const EmbeddingMatrix& b,
                                std::uint64_t count, RowAt row_at, unsigned workers) {
  const bool same = &a == &b;
  const std::uint64_t n_chunks = (count + kMomentChunkRows - 1) / kMomentChunkRows;
  Eigen::MatrixXd total = Eigen::MatrixXd::Zero(a.d, b.d);
  std::vector<Eigen::MatrixXd> partials;
  for (std::uint64_t wave = 0; wave < n_chunks; wave += kWave) {
    const std::size_t in_wave = static_cast<std::size_t>(std::min<std::uint64_t>(kWave, n_chunks - wave));
    partials.assign(in_wave, Eigen::MatrixXd());
    parallel_for(in_wave, workers, [&](std::size_t k) {
      const std::uint64_t begin = (wave + k) * kMomentChunkRows;
      const std::uint64_t end = std::min(count, begin + kMomentChunkRows);
      RowMajorMatrix left;
      RowMajorMatrix right;
      gather_rows(a, begin, end, row_at, left);
      if (same) {
        partials[k].noalias() = left.transpose() * left;
      } else {
        gather_rows(b, begin, end, row_at, right);
        partials[k].noalias() = left.transpose() * right;
      }
    });
    for (const auto& p : partials) total += p;
  }
  return total;
}

void require_same_shape(const EmbeddingMatrix& a, const EmbeddingMatrix& b) {
  if (a.n != b.n) throw Error(Errc::length_mismatch, std::to_string(a.n) + " vs " + std::to_string(b.n));
  if (a.d != b.d) throw Error(Errc::dim_mismatch, std::to_string(a.d) + " vs " + std::to_string(b.d));
}

bool unit_rows(const EmbeddingMatrix& m) {
  return m.normalized || max_norm_deviation(m) <= kNormTolerance;
}

double quantile_sorted(const std::vector<double>& sorted, double q) {
  if (sorted.size() == 1) return sorted.front();
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

AxisSummary summarize(const std::vector<double>& values) {
  std::vector<double> sorted = values;
  std::sort(sorted.begin(), sorted.end());
  AxisSummary s;
  s.min = sorted.front();
  s.max = sorted.back();
  double sum = 0.0;
  for (double v : values) sum += v;
  s.mean = sum / static_cast<double>(values.size());
  s.q05 = quantile_sorted(sorted, 0.05);
  s.q25 = quantile_sorted(sorted, 0.25);
  s.q50 = quantile_sorted(sorted, 0.50);
  s.q75 = quantile_sorted(sorted, 0.75);
  s.q95 = quantile_sorted(sorted, 0.95);
  return s;
}

std::uint32_t bin_of(double v, double lo, double hi, std::uint32_t bins) {
  if (!(hi > lo)) return 0;
  const double t = (v - lo) / (hi - lo) * bins;
  if (!(t > 0)) return 0;
  return std::min<std::uint32_t>(bins - 1, static_cast<std::uint32_t>(t));
}

}  // namespace

MomentMatrix MomentMatrix::identity(std::uint32_t d, std::string label) {
  return from_entries(Eigen::MatrixXd::Identity(d, d), 1, std::move(label));
}

MomentMatrix MomentMatrix::from_entries(Eigen::MatrixXd entries, std::uint64_t count,
                                        std::string label) {
  if (entries.rows() != entries.cols() || entries.rows() == 0) {
    throw Error(Errc::dim_mismatch, "moment matrix must be square and non-empty");
  }
  MomentMatrix m;
  m.d = static_cast<std::uint32_t>(entries.rows());
  m.entries = std::move(entries);
  m.count = count;
  m.label = std::move(label);
  return m;
}

std::string_view score_kind_name(ScoreKind k) noexcept {
  switch (k) {
    case ScoreKind::clip_score: return "clip_score";
    case ScoreKind::vas: return "vas";
    case ScoreKind::a_opt_leverage: return "a_opt_leverage";
    case ScoreKind::v_opt_leverage: return "v_opt_leverage";
  }
  return "unknown";
}

ScoreVector clip_scores(const PairedView& pairs, unsigned workers) {
  const auto& v = pairs.vision();
  const auto& l = pairs.language();
  require_same_shape(v, l);
  if (!unit_rows(v) || !unit_rows(l)) {
    throw Error(Errc::not_normalized, "CLIP scores need unit-norm rows in both modalities");
  }
  ScoreVector out;
  out.kind = ScoreKind::clip_score;
  out.source_n = v.n;
  out.scores.resize(v.n);
  const std::uint64_t n_chunks = (v.n + kScoreChunkRows - 1) / kScoreChunkRows;
  parallel_for(n_chunks, workers, [&](std::size_t chunk) {
    const std::uint64_t begin = chunk * kScoreChunkRows;
    const std::uint64_t end = std::min(v.n, begin + kScoreChunkRows);
    for (std::uint64_t i = begin; i < end; ++i) {
      auto a = v.row(i);
      auto b = l.row(i);
      double dot = 0.0;
      for (std::uint32_t c = 0; c < v.d; ++c) dot += static_cast<double>(a[c]) * b[c];
      out.scores[i] = dot;
    }
  });
  return out;
}

Eigen::MatrixXd moment_sum(const EmbeddingMatrix& a, const EmbeddingMatrix& b,
                           std::span<const std::uint64_t> rows, unsigned workers) {
  if (a.d != b.d) throw Error(Errc::dim_mismatch, std::to_string(a.d) + " vs " + std::to_string(b.d));
  if (rows.empty()) {
    if (a.n != b.n) throw Error(Errc::length_mismatch, std::to_string(a.n) + " vs " + std::to_string(b.n));
    return moment_sum_impl(a, b, a.n, [](std::uint64_t j) { return j; }, workers);
  }
  for (auto r : rows) {
    if (r >= a.n || r >= b.n) throw Error(Errc::invalid_argument, "row index out of range");
  }
  return moment_sum_impl(a, b, rows.size(), [rows](std::uint64_t j) { return rows[j]; }, workers);
}

MomentMatrix second_moment(const EmbeddingMatrix& a, const EmbeddingMatrix* b, unsigned workers) {
  const EmbeddingMatrix& right = b ? *b : a;
  require_same_shape(a, right);
  MomentMatrix m;
  m.d = a.d;
  m.entries = moment_sum(a, right, {}, workers) / static_cast<double>(a.n);
  if (&right == &a) m.entries = (0.5 * (m.entries + m.entries.transpose())).eval();
  m.count = a.n;
  m.modality_left = a.modality;
  m.modality_right = right.modality;
  return m;
}

std::vector<double> quadratic_forms(const EmbeddingMatrix& a, const EmbeddingMatrix& b,
                                    const Eigen::MatrixXd& sigma,
                                    std::span<const std::uint64_t> rows, unsigned workers) {
  if (a.d != b.d || sigma.rows() != a.d || sigma.cols() != a.d) {
    throw Error(Errc::dim_mismatch, "embedding and moment dimensions differ");
  }
  for (auto r : rows) {
    if (r >= a.n || r >= b.n) throw Error(Errc::invalid_argument, "row index out of range");
  }
  std::vector<double> out(rows.size());
  quadratic_forms_impl(a, b, sigma, rows.size(), [rows](std::uint64_t j) { return rows[j]; },
                       out.data(), workers);
  return out;
}

ScoreVector vas_scores(const EmbeddingMatrix& a, const EmbeddingMatrix* b,
                       const MomentMatrix& sigma, unsigned workers) {
  const EmbeddingMatrix& right = b ? *b : a;
  require_same_shape(a, right);
  if (sigma.d != a.d || sigma.entries.rows() != a.d || sigma.entries.cols() != a.d) {
    throw Error(Errc::dim_mismatch, "prior d=" + std::to_string(sigma.d) + ", embeddings d=" +
                                        std::to_string(a.d));
  }
  ScoreVector out;
  out.kind = ScoreKind::vas;
  out.source_n = a.n;
  out.scores.resize(a.n);
  quadratic_forms_impl(a, right, sigma.entries, a.n, [](std::uint64_t j) { return j; },
                       out.scores.data(), workers);
  return out;
}

std::uint64_t JointHistogram::total() const {
  std::uint64_t t = 0;
  for (auto c : counts) t += c;
  return t;
}

JointHistogram score_stats(const ScoreVector& x, const ScoreVector& y, std::uint32_t bins) {
  if (bins < 1) throw Error(Errc::invalid_argument, "bins must be >= 1");
  if (x.size() != y.size()) {
    throw Error(Errc::length_mismatch, std::to_string(x.size()) + " vs " + std::to_string(y.size()));
  }
  if (x.size() == 0) throw Error(Errc::invalid_shape, "empty score vectors");
  JointHistogram h;
  h.bins = bins;
  h.counts.assign(static_cast<std::size_t>(bins) * bins, 0);
  h.x = summarize(x.scores);
  h.y = summarize(y.scores);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const auto bx = bin_of(x[i], h.x.min, h.x.max, bins);
    const auto by = bin_of(y[i], h.y.min, h.y.max, bins);
    ++h.counts[static_cast<std::size_t>(bx) * bins + by];
  }
  return h;
}

void save_moment(const MomentMatrix& m, const std::filesystem::path& path) {
  AtomicFile out(path, /*binary=*/true);
  std::array<unsigned char, 12> header{};
  std::memcpy(header.data(), "VMOM", 4);
  const std::uint32_t version = 1;
  std::memcpy(header.data() + 4, &version, 4);
  std::memcpy(header.data() + 8, &m.d, 4);
  out.stream().write(reinterpret_cast<const char*>(header.data()), header.size());
  std::vector<double> row_major(static_cast<std::size_t>(m.d) * m.d);
  for (std::uint32_t r = 0; r < m.d; ++r) {
    for (std::uint32_t c = 0; c < m.d; ++c) row_major[r * m.d + c] = m.entries(r, c);
  }
  out.stream().write(reinterpret_cast<const char*>(row_major.data()),
                     static_cast<std::streamsize>(row_major.size() * sizeof(double)));
  out.commit();
}

MomentMatrix load_moment(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::io_failure, "cannot open " + path.string());
  std::array<unsigned char, 12> header{};
  in.read(reinterpret_cast<char*>(header.data()), header.size());
  if (in.gcount() < 4 || std::memcmp(header.data(), "VMOM", 4) != 0) {
    throw Error(Errc::bad_magic, path.string());
  }
  if (in.gcount() < 12) throw Error(Errc::truncated_payload, path.string());
  std::uint32_t version = 0;
  std::uint32_t d = 0;
  std::memcpy(&version, header.data() + 4, 4);
  std::memcpy(&d, header.data() + 8, 4);
  if (version != 1) throw Error(Errc::version_mismatch, "version " + std::to_string(version));
  if (d == 0) throw Error(Errc::invalid_shape, "d must be >= 1");
  std::vector<double> row_major(static_cast<std::size_t>(d) * d);
  const auto bytes = static_cast<std::streamsize>(row_major.size() * sizeof(double));
  in.read(reinterpret_cast<char*>(row_major.data()), bytes);
  if (in.gcount() != bytes || in.peek() != std::char_traits<char>::eof()) {
    throw Error(Errc::truncated_payload, path.string());
  }
  Eigen::MatrixXd entries(d, d);
  for (std::uint32_t r = 0; r < d; ++r) {
    for (std::uint32_t c = 0; c < d; ++c) entries(r, c) = row_major[r * d + c];
  }
  return MomentMatrix::from_entries(std::move(entries), 1, path.filename().string());
}

void write_scores_csv(const ScoreVector& s, const std::optional<std::vector<std::uint64_t>>& ids,
                      const std::filesystem::path& path) {
  if (ids && ids->size() != s.size()) throw Error(Errc::length_mismatch, "ids vs scores");
  AtomicFile out(path);
  auto& os = out.stream();
  os << "index,id,score\n";
  for (std::size_t i = 0; i < s.size(); ++i) {
    os << i << ',';
    if (ids) os << (*ids)[i];
    os << ',' << format_double(s[i]) << '\n';
  }
  out.commit();
}

ScoreVector read_scores_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::io_failure, "cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line.rfind("index,id,score", 0) != 0) {
    throw Error(Errc::parse_error, "missing 'index,id,score' header in " + path.string());
  }
  ScoreVector s;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto comma = line.rfind(',');
    if (comma == std::string::npos) throw Error(Errc::parse_error, line);
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(line.data() + comma + 1, line.data() + line.size(), v);
    if (ec != std::errc{} || !std::isfinite(v)) throw Error(Errc::parse_error, line);
    s.scores.push_back(v);
  }
  s.source_n = s.scores.size();
  return s;
}

void write_histogram_csv(const JointHistogram& h, const std::filesystem::path& path) {
  AtomicFile out(path);
  auto& os = out.stream();
  os << "bin_x,bin_y,count\n";
  for (std::uint32_t bx = 0; bx < h.bins; ++bx) {
    for (std::uint32_t by = 0; by < h.bins; ++by) os << bx << ',' << by << ',' << h.at(bx, by) << '\n';
  }
  out.commit();
}

void write_axis_summary_csv(const JointHistogram& h, const std::filesystem::path& path) {
  AtomicFile out(path);
  auto& os = out.stream();
  os << "axis,min,max,mean,q05,q25,q50,q75,q95\n";
  auto emit = [&](const char* name, const AxisSummary& a) {
    os << name;
    for (double v : {a.min, a.max, a.mean, a.q05, a.q25, a.q50, a.q75, a.q95}) os << ',' << format_double(v);
    os << '\n';
  };
  emit("x", h.x);
  emit("y", h.y);
  out.commit();
}

}  // namespace vas
