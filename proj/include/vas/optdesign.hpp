#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "vas/embstore.hpp"
#include "vas/scoring.hpp"
#include "vas/selection.hpp"

namespace vas {

/// Inverse of (S + lambda*I), where S is a running sum of outer products,
/// kept current under rank-1 removals by Sherman-Morrison.
class RidgeInverse {
 public:
  /// Removal is refused when |1 - f^T M f| falls below this.
  static constexpr double kSingularTolerance = 1e-10;

  RidgeInverse(const Eigen::MatrixXd& outer_sum, double lambda, std::uint64_t count);

  std::uint32_t d() const { return static_cast<std::uint32_t>(inv_.rows()); }
  double lambda() const { return lambda_; }
  std::uint64_t count() const { return count_; }
  const Eigen::MatrixXd& inverse() const { return inv_; }

  /// (A - f f^T)^{-1} = A^{-1} + (A^{-1} f)(A^{-1} f)^T / (1 - f^T A^{-1} f).
  void downdate(const Eigen::Ref<const Eigen::VectorXd>& f);

  /// Recomputes the inverse of (outer_sum + lambda*I) directly.
  void rebuild(const Eigen::MatrixXd& outer_sum);

  /// ||inv * (outer_sum + lambda I) - I||_F / ||I||_F.
  double residual(const Eigen::MatrixXd& outer_sum) const;

 private:
  Eigen::MatrixXd inv_;
  double lambda_;
  std::uint64_t count_;
};

enum class DesignCriterion { a_optimal, v_optimal };

struct DesignRound {
  std::uint64_t t = 0;
  std::uint64_t n_t = 0;
  std::uint64_t removed = 0;
  double objective = 0.0;
};

struct DesignResult {
  SelectionResult selection;
  DesignCriterion criterion = DesignCriterion::a_optimal;
  double lambda = 0.0;
  std::vector<DesignRound> rounds;
};

/// 1e-6 times the mean squared row norm over the input set.
double default_ridge(const EmbeddingMatrix& vision, const SelectionResult& input_set);

/// Greedy backward elimination on the VAS-D size schedule. Each round drops
/// the samples whose removal least increases Tr((S + lambda I)^{-1}).
DesignResult a_optimal_select(const EmbeddingMatrix& vision, const SelectionResult& input_set,
                              std::uint64_t target_n, std::uint64_t tau, double lambda,
                              unsigned workers = 0);

/// As a_optimal_select with objective Tr(prior * (S + lambda I)^{-1}).
DesignResult v_optimal_select(const EmbeddingMatrix& vision, const SelectionResult& input_set,
                              std::uint64_t target_n, std::uint64_t tau, double lambda,
                              const MomentMatrix& prior, unsigned workers = 0);

/// Uniform sample without replacement driven by CounterRng (splitmix64-ctr/v1).
SelectionResult random_select(std::uint64_t n, std::uint64_t target_n, std::uint64_t seed);

/// "t,N_t,removed,objective" after a "# criterion=... optimizer=... scaling=... lambda=..." line.
void write_design_rounds_csv(const DesignResult& r, const std::filesystem::path& path);

}  // namespace vas
