#include "vas/optdesign.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "vas/error.hpp"
#include "vas/io_util.hpp"
#include "vas/parallel.hpp"
#include "vas/rng.hpp"

namespace vas {

RidgeInverse::RidgeInverse(const Eigen::MatrixXd& outer_sum, double lambda, std::uint64_t count)
    : lambda_(lambda), count_(count) {
  if (outer_sum.rows() != outer_sum.cols()) throw Error(Errc::dim_mismatch, "outer sum must be square");
  if (!(lambda >= 0.0)) throw Error(Errc::invalid_argument, "ridge must be >= 0");
  if (lambda == 0.0 && count < static_cast<std::uint64_t>(outer_sum.rows())) {
    throw Error(Errc::invalid_argument, "ridge must be > 0 while count < d");
  }
  rebuild(outer_sum);
}

void RidgeInverse::rebuild(const Eigen::MatrixXd& outer_sum) {
  const auto d = outer_sum.rows();
  const Eigen::MatrixXd regularized = outer_sum + lambda_ * Eigen::MatrixXd::Identity(d, d);
  Eigen::LDLT<Eigen::MatrixXd> ldlt(regularized);
  if (ldlt.info() != Eigen::Success) throw Error(Errc::singular_downdate, "ridge system is singular");
  inv_ = ldlt.solve(Eigen::MatrixXd::Identity(d, d));
  inv_ = (0.5 * (inv_ + inv_.transpose())).eval();
}

void RidgeInverse::downdate(const Eigen::Ref<const Eigen::VectorXd>& f) {
  if (f.size() != inv_.rows()) throw Error(Errc::dim_mismatch, "downdate vector length");
  const Eigen::VectorXd w = inv_ * f;
  const double denom = 1.0 - f.dot(w);
  if (std::abs(denom) < kSingularTolerance) {
    throw Error(Errc::singular_downdate, "|1 - f^T M f| = " + format_double(std::abs(denom)));
  }
  inv_.noalias() += (w / denom) * w.transpose();
  if (count_ > 0) --count_;
}

double RidgeInverse::residual(const Eigen::MatrixXd& outer_sum) const {
  const auto d = outer_sum.rows();
  const Eigen::MatrixXd regularized = outer_sum + lambda_ * Eigen::MatrixXd::Identity(d, d);
  const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(d, d);
  return (inv_ * regularized - eye).norm() / eye.norm();
}

double default_ridge(const EmbeddingMatrix& vision, const SelectionResult& input_set) {
  if (input_set.kept.empty()) return 1e-6;
  double total = 0.0;
  for (auto r : input_set.kept) {
    for (float v : vision.row(r)) total += static_cast<double>(v) * v;
  }
  const double mean_sq = total / static_cast<double>(input_set.kept.size());
  return mean_sq > 0.0 ? 1e-6 * mean_sq : 1e-6;
}

namespace {

// Increase of the design objective if each listed row were removed.
std::vector<double> removal_deltas(const EmbeddingMatrix& vision, std::span<const std::uint64_t> rows,
                                   const Eigen::MatrixXd& inv, const Eigen::MatrixXd* prior,
                                   unsigned workers) {
  std::vector<double> out(rows.size());
  const std::uint64_t n_chunks = (rows.size() + kScoreChunkRows - 1) / kScoreChunkRows;
  const Eigen::MatrixXd prior_t = prior ? Eigen::MatrixXd(prior->transpose()) : Eigen::MatrixXd();
  parallel_for(n_chunks, workers, [&](std::size_t chunk) {
    const std::uint64_t begin = chunk * kScoreChunkRows;
    const std::uint64_t end = std::min<std::uint64_t>(rows.size(), begin + kScoreChunkRows);
    RowMajorMatrix f(static_cast<Eigen::Index>(end - begin), vision.d);
    for (std::uint64_t j = begin; j < end; ++j) {
      auto src = vision.row(rows[j]);
      for (std::uint32_t c = 0; c < vision.d; ++c) f(static_cast<Eigen::Index>(j - begin), c) = src[c];
    }
    const RowMajorMatrix w = f * inv;  // inv is symmetric: row j is (inv f_j)^T
    RowMajorMatrix pw;
    if (prior) pw = w * prior_t;
    for (Eigen::Index j = 0; j < f.rows(); ++j) {
      const double denom = 1.0 - f.row(j).dot(w.row(j));
      const double num = prior ? w.row(j).dot(pw.row(j)) : w.row(j).dot(w.row(j));
      out[begin + static_cast<std::uint64_t>(j)] =
          std::abs(denom) < RidgeInverse::kSingularTolerance ? std::numeric_limits<double>::infinity()
                                                              : num / denom;
    }
  });
  return out;
}

DesignResult design_select(const EmbeddingMatrix& vision, const SelectionResult& input_set,
                           std::uint64_t target_n, std::uint64_t tau, double lambda,
                           const MomentMatrix* prior, unsigned workers) {
  if (tau == 0) throw Error(Errc::tau_zero, "");
  const std::uint64_t n0 = input_set.kept.size();
  if (target_n > n0) {
    throw Error(Errc::target_exceeds_input, std::to_string(target_n) + " > " + std::to_string(n0));
  }
  if (target_n == 0) throw Error(Errc::invalid_argument, "target must be >= 1");
  if (!(lambda > 0.0)) throw Error(Errc::invalid_argument, "lambda must be > 0");
  if (prior && (prior->d != vision.d || prior->entries.rows() != vision.d)) {
    throw Error(Errc::dim_mismatch, "prior d=" + std::to_string(prior->d) + ", embeddings d=" +
                                        std::to_string(vision.d));
  }
  for (auto r : input_set.kept) {
    if (r >= vision.n) throw Error(Errc::invalid_argument, "input set index out of range");
  }
  const auto schedule = greedy_schedule(n0, target_n, tau);
  const Eigen::MatrixXd* prior_entries = prior ? &prior->entries : nullptr;
  auto objective = [&](const RidgeInverse& ri) {
    return prior_entries ? (*prior_entries * ri.inverse()).trace() : ri.inverse().trace();
  };

  std::vector<std::uint64_t> current = input_set.kept;
  Eigen::MatrixXd outer = moment_sum(vision, vision, current, workers);
  outer = (0.5 * (outer + outer.transpose())).eval();
  RidgeInverse ridge(outer, lambda, n0);

  DesignResult result;
  result.criterion = prior ? DesignCriterion::v_optimal : DesignCriterion::a_optimal;
  result.lambda = lambda;
  Eigen::VectorXd f(vision.d);
  for (std::uint64_t t = 1; t <= tau; ++t) {
    const std::uint64_t n_t = schedule[t - 1];
    const std::uint64_t removed = current.size() - n_t;
    if (removed > 0) {
      const auto deltas = removal_deltas(vision, current, ridge.inverse(), prior_entries, workers);
      const auto drop = lowest_to_remove(deltas, current, removed);
      std::vector<char> dropped(current.size(), 0);
      for (auto p : drop) {
        dropped[p] = 1;
        auto src = vision.row(current[p]);
        for (std::uint32_t c = 0; c < vision.d; ++c) f[c] = src[c];
        ridge.downdate(f);
        outer.noalias() -= f * f.transpose();
      }
      std::vector<std::uint64_t> next;
      next.reserve(n_t);
      for (std::size_t p = 0; p < current.size(); ++p) {
        if (!dropped[p]) next.push_back(current[p]);
      }
      current = std::move(next);
      if (t % kMomentRefreshRounds == 0) {
        outer = moment_sum(vision, vision, current, workers);
        outer = (0.5 * (outer + outer.transpose())).eval();
        ridge.rebuild(outer);
      }
    }
    result.rounds.push_back({t, n_t, removed, objective(ridge)});
  }

  result.selection.kept = std::move(current);
  result.selection.target_n = target_n;
  result.selection.stages = input_set.stages;
  result.selection.stages.push_back(
      {prior ? "v_optimal" : "a_optimal", n0, target_n, std::nullopt, objective(ridge)});
  return result;
}

}  // namespace

DesignResult a_optimal_select(const EmbeddingMatrix& vision, const SelectionResult& input_set,
                              std::uint64_t target_n, std::uint64_t tau, double lambda,
                              unsigned workers) {
  return design_select(vision, input_set, target_n, tau, lambda, nullptr, workers);
}

DesignResult v_optimal_select(const EmbeddingMatrix& vision, const SelectionResult& input_set,
                              std::uint64_t target_n, std::uint64_t tau, double lambda,
                              const MomentMatrix& prior, unsigned workers) {
  return design_select(vision, input_set, target_n, tau, lambda, &prior, workers);
}

SelectionResult random_select(std::uint64_t n, std::uint64_t target_n, std::uint64_t seed) {
  if (target_n > n) {
    throw Error(Errc::target_exceeds_input, std::to_string(target_n) + " > " + std::to_string(n));
  }
  std::vector<std::uint64_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::uint64_t{0});
  CounterRng rng(seed);
  for (std::uint64_t i = 0; i < target_n; ++i) {
    const std::uint64_t j = i + rng.below(n - i);
    std::swap(perm[i], perm[j]);
  }
  perm.resize(target_n);
  std::sort(perm.begin(), perm.end());
  SelectionResult r;
  r.kept = std::move(perm);
  r.target_n = target_n;
  r.stages.push_back({std::string("random:") + CounterRng::kName, n, target_n, std::nullopt, std::nullopt});
  return r;
}

void write_design_rounds_csv(const DesignResult& r, const std::filesystem::path& path) {
  AtomicFile out(path);
  out.stream() << "# criterion=" << (r.criterion == DesignCriterion::a_optimal ? "a_optimal" : "v_optimal")
               << " optimizer=greedy_backward scaling=sum lambda=" << format_double(r.lambda) << '\n';
  out.stream() << "t,N_t,removed,objective\n";
  for (const auto& round : r.rounds) {
    out.stream() << round.t << ',' << round.n_t << ',' << round.removed << ','
                 << format_double(round.objective) << '\n';
  }
  out.commit();
}

}  // namespace vas
