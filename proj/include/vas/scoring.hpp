#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vas/embstore.hpp"

namespace vas {

using RowMajorMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Uncentered (cross-)second moment (1/count) * sum_i a_i b_i^T in float64.
struct MomentMatrix {
  std::uint32_t d = 0;
  Eigen::MatrixXd entries;
  std::uint64_t count = 0;
  Modality modality_left = Modality::vision;
  Modality modality_right = Modality::vision;
  std::string label;

  static MomentMatrix identity(std::uint32_t d, std::string label = "identity");
  static MomentMatrix from_entries(Eigen::MatrixXd entries, std::uint64_t count = 1,
                                   std::string label = {});
};

enum class ScoreKind { clip_score, vas, a_opt_leverage, v_opt_leverage };

std::string_view score_kind_name(ScoreKind k) noexcept;

struct ScoreVector {
  std::vector<double> scores;
  ScoreKind kind = ScoreKind::vas;
  std::uint64_t source_n = 0;

  std::size_t size() const { return scores.size(); }
  double operator[](std::size_t i) const { return scores[i]; }
};

/// Rows per work unit. Chunk boundaries depend only on n, never on the worker
/// count, so every reduction happens in the same order for any --threads.
inline constexpr std::uint64_t kScoreChunkRows = 1024;
inline constexpr std::uint64_t kMomentChunkRows = 4096;

/// Diagonal CLIP score: cosine similarity dot(v_i, l_i) of unit rows.
ScoreVector clip_scores(const PairedView& pairs, unsigned workers = 0);

/// (1/n) sum_i a_i b_i^T. Pass `b == nullptr` (or b == &a) for the
/// same-matrix moment, which is then symmetrized as (M + M^T)/2.
MomentMatrix second_moment(const EmbeddingMatrix& a, const EmbeddingMatrix* b = nullptr,
                           unsigned workers = 0);

/// Unnormalized sum_{i in rows} a_i b_i^T over a row subset (all rows when empty).
Eigen::MatrixXd moment_sum(const EmbeddingMatrix& a, const EmbeddingMatrix& b,
                           std::span<const std::uint64_t> rows, unsigned workers = 0);

/// VAS_i = a_i^T * sigma * b_i for every row (b == nullptr means b = a).
ScoreVector vas_scores(const EmbeddingMatrix& a, const EmbeddingMatrix* b,
                       const MomentMatrix& sigma, unsigned workers = 0);

/// Quadratic forms a_r^T * sigma * b_r for the listed rows only, in list order.
std::vector<double> quadratic_forms(const EmbeddingMatrix& a, const EmbeddingMatrix& b,
                                    const Eigen::MatrixXd& sigma,
                                    std::span<const std::uint64_t> rows, unsigned workers = 0);

struct AxisSummary {
  double min = 0, max = 0, mean = 0;
  double q05 = 0, q25 = 0, q50 = 0, q75 = 0, q95 = 0;
};

/// bins x bins joint histogram of (x, y) score pairs plus per-axis summaries.
struct JointHistogram {
  std::uint32_t bins = 0;
  std::vector<std::uint64_t> counts;  // row-major [bin_x * bins + bin_y]
  AxisSummary x, y;

  std::uint64_t at(std::uint32_t bx, std::uint32_t by) const { return counts[bx * bins + by]; }
  std::uint64_t total() const;
};

JointHistogram score_stats(const ScoreVector& x, const ScoreVector& y, std::uint32_t bins);

/// Moment matrix binary: "VMOM", u32 version = 1, u32 d, d*d float64 LE row-major.
void save_moment(const MomentMatrix& m, const std::filesystem::path& path);
MomentMatrix load_moment(const std::filesystem::path& path);

/// "index,id,score" CSV, one row per sample, index ascending; id blank without ids.
void write_scores_csv(const ScoreVector& s, const std::optional<std::vector<std::uint64_t>>& ids,
                      const std::filesystem::path& path);
ScoreVector read_scores_csv(const std::filesystem::path& path);

/// "bin_x,bin_y,count" CSV.
void write_histogram_csv(const JointHistogram& h, const std::filesystem::path& path);
/// "axis,min,max,mean,q05,q25,q50,q75,q95" CSV.
void write_axis_summary_csv(const JointHistogram& h, const std::filesystem::path& path);

}  // namespace vas
