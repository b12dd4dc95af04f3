#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "vas/embstore.hpp"
#include "vas/scoring.hpp"

namespace vas {

struct StageRecord {
  std::string name;
  std::uint64_t input_n = 0;
  std::uint64_t output_n = 0;
  std::optional<double> threshold_used;
  std::optional<double> objective_value;
};

/// Kept row indices (strictly increasing, in the source matrix's numbering)
/// and the stages that produced them. target_n = 0 means threshold mode.
struct SelectionResult {
  std::vector<std::uint64_t> kept;
  std::vector<StageRecord> stages;
  std::uint64_t target_n = 0;

  /// The identity selection over [0, n), used as pipeline input.
  static SelectionResult all(std::uint64_t n);
};

struct VasDStep {
  std::uint64_t t = 0;
  std::uint64_t n_t = 0;
  std::uint64_t removed = 0;
  double tr_sigma_sq = 0.0;
};

struct VasDTrace {
  std::vector<VasDStep> steps;
  std::uint64_t tau = 0;
};

struct VasDResult {
  SelectionResult selection;
  VasDTrace trace;
  /// Maintained sum of outer products over the final set (symmetric).
  Eigen::MatrixXd moment_sum;
};

/// Default greedy step count for VAS-D.
inline constexpr std::uint64_t kDefaultTau = 168;
/// VAS-D refreshes its downdated moment from scratch every this many rounds.
inline constexpr std::uint64_t kMomentRefreshRounds = 16;

/// Indices of the k largest scores (ties: smaller index first), returned ascending.
SelectionResult select_top_k(const ScoreVector& scores, std::uint64_t k);

/// Every index with score >= min_score, ascending. May be empty.
SelectionResult select_by_threshold(const ScoreVector& scores, double min_score);

/// Size schedule N_1..N_tau: N_t = round(N_0 - (t/tau)(N_0 - target)), made
/// strictly decreasing where possible and with N_tau = target.
std::vector<std::uint64_t> greedy_schedule(std::uint64_t n0, std::uint64_t target, std::uint64_t tau);

/// Positions (into `scores`) to drop this round: the `count` lowest scores,
/// breaking ties so that the smaller original index survives.
std::vector<std::size_t> lowest_to_remove(std::span<const double> scores,
                                          std::span<const std::uint64_t> original, std::size_t count);

struct ClipKeepFraction {
  double fraction = 0.5;
};
struct ClipKeepThreshold {
  double min_score = 0.214;
};
using ClipKeep = std::variant<ClipKeepFraction, ClipKeepThreshold>;

/// Stage 1 keeps the best CLIP scores; stage 2 keeps the top `vas_target`
/// survivors by VAS(vision, vision, prior). Kept indices are original rows.
SelectionResult two_stage_filter(const PairedView& pairs, const ClipKeep& clip_keep,
                                 std::uint64_t vas_target, const MomentMatrix& prior,
                                 unsigned workers = 0);

/// VAS-D: tau rounds of greedy removal against the current set's own
/// (unnormalized) second moment.
VasDResult vas_d(const EmbeddingMatrix& vision, const SelectionResult& input_set,
                 std::uint64_t target_n, std::uint64_t tau, unsigned workers = 0);

std::vector<std::uint64_t> remap_to_ids(const SelectionResult& result, const EmbeddingMatrix& m);

/// Newline-delimited ascending indices (or ids when given).
void write_selection(const SelectionResult& r, const std::filesystem::path& path,
                     const std::vector<std::uint64_t>* ids = nullptr);
/// Reads a newline-delimited index list; the result is sorted and deduplicated.
SelectionResult read_selection(const std::filesystem::path& path, std::uint64_t n);
/// JSON-lines: name, input_n, output_n, threshold_used, objective_value.
void write_stages_jsonl(const SelectionResult& r, const std::filesystem::path& path);
/// "t,N_t,removed,tr_sigma_sq".
void write_trace_csv(const VasDTrace& trace, const std::filesystem::path& path);

}  // namespace vas
