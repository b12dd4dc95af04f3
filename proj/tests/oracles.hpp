#pragma once

// Independent reference implementations used only by the tests. They favour
// the most literal formulation (loops, explicit inverses, enumeration) over
// speed and share no code paths with the library kernels.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "vas/embstore.hpp"

namespace oracle {

using Matrix = Eigen::MatrixXd;

/// std::mt19937_64 based helpers; deliberately a different generator than the library's.
struct Rand {
  std::mt19937_64 gen;
  explicit Rand(std::uint64_t seed) : gen(seed) {}
  double uniform(double lo = 0.0, double hi = 1.0) { return std::uniform_real_distribution<double>(lo, hi)(gen); }
  double normal() { return std::normal_distribution<double>(0.0, 1.0)(gen); }
  std::uint64_t below(std::uint64_t n) { return std::uniform_int_distribution<std::uint64_t>(0, n - 1)(gen); }
  Matrix gaussian(Eigen::Index rows, Eigen::Index cols) {
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
      for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = normal();
    }
    return m;
  }
};

inline vas::EmbeddingMatrix random_embeddings(Rand& rng, std::uint64_t n, std::uint32_t d, bool unit,
                                              vas::Modality m = vas::Modality::vision) {
  std::vector<float> data(n * d);
  for (std::uint64_t i = 0; i < n; ++i) {
    double norm = 0.0;
    for (std::uint32_t j = 0; j < d; ++j) {
      const double v = rng.normal();
      data[i * d + j] = static_cast<float>(v);
      norm += static_cast<double>(data[i * d + j]) * data[i * d + j];
    }
    if (unit) {
      for (std::uint32_t j = 0; j < d; ++j) data[i * d + j] = static_cast<float>(data[i * d + j] / std::sqrt(norm));
    }
  }
  auto e = vas::EmbeddingMatrix::make(n, d, std::move(data), m);
  if (unit) e.normalized = true;
  return e;
}

/// a_i^T sigma b_i by three nested loops in long double.
inline std::vector<double> naive_vas(const vas::EmbeddingMatrix& a, const vas::EmbeddingMatrix& b,
                                     const Matrix& sigma) {
  std::vector<double> out(a.n);
  for (std::uint64_t i = 0; i < a.n; ++i) {
    long double total = 0.0L;
    for (std::uint32_t p = 0; p < a.d; ++p) {
      for (std::uint32_t q = 0; q < a.d; ++q) {
        total += static_cast<long double>(a.row(i)[p]) * sigma(p, q) * static_cast<long double>(b.row(i)[q]);
      }
    }
    out[i] = static_cast<double>(total);
  }
  return out;
}

/// (1/n) sum a_i b_i^T by explicit loops.
inline Matrix naive_moment(const vas::EmbeddingMatrix& a, const vas::EmbeddingMatrix& b,
                           const std::vector<std::uint64_t>& rows) {
  Matrix m = Matrix::Zero(a.d, a.d);
  for (auto i : rows) {
    for (std::uint32_t p = 0; p < a.d; ++p) {
      for (std::uint32_t q = 0; q < a.d; ++q) m(p, q) += static_cast<double>(a.row(i)[p]) * b.row(i)[q];
    }
  }
  return m;
}

/// Visits every k-subset of [0, n) in lexicographic order via recursion.
inline void for_each_subset(std::uint64_t n, std::uint64_t k,
                            const std::function<void(const std::vector<std::uint64_t>&)>& visit) {
  std::vector<std::uint64_t> cur;
  std::function<void(std::uint64_t)> rec = [&](std::uint64_t start) {
    if (cur.size() == k) {
      visit(cur);
      return;
    }
    for (std::uint64_t i = start; i + (k - cur.size()) <= n; ++i) {
      cur.push_back(i);
      rec(i + 1);
      cur.pop_back();
    }
  };
  rec(0);
}

/// Max-sum k-subset by enumeration; among equal sums the lexicographically
/// smallest index list wins.
inline std::vector<std::uint64_t> exhaustive_top_k(const std::vector<double>& s, std::uint64_t k) {
  std::vector<std::uint64_t> best;
  long double best_sum = -std::numeric_limits<long double>::infinity();
  for_each_subset(s.size(), k, [&](const std::vector<std::uint64_t>& sub) {
    long double total = 0.0L;
    for (auto i : sub) total += s[i];
    if (total > best_sum) {
      best_sum = total;
      best = sub;
    }
  });
  return best;
}

/// Gradient descent on the factorized regularized linear contrastive loss,
/// built from its pairwise definition:
///   L = sum_{i,j} (s_ij - s_ii) / (n(n-1)) + (rho/2)(n/(n-1)) ||G_v G_l^T||_F^2.
struct GdResult {
  Matrix product;
  double loss = 0.0;
  int iterations = 0;
  bool converged = false;
};

struct PairwiseLoss {
  Matrix b;  // sum_i x_i^v (sum_j x_j^l)^T - n sum_i x_i^v x_i^l^T, divided by n(n-1)
  double rho_eff = 0.0;

  PairwiseLoss(const Matrix& xv, const Matrix& xl, double rho) {
    const double n = static_cast<double>(xv.rows());
    const Eigen::VectorXd sv = xv.colwise().sum();
    const Eigen::VectorXd sl = xl.colwise().sum();
    b = (sv * sl.transpose() - n * xv.transpose() * xl) / (n * (n - 1.0));
    rho_eff = rho * n / (n - 1.0);
  }
  double operator()(const Matrix& p) const { return (b.array() * p.array()).sum() + 0.5 * rho_eff * p.squaredNorm(); }
};

inline double power_sigma_max(const Matrix& m) {
  Eigen::VectorXd v = Eigen::VectorXd::Ones(m.cols()).normalized();
  double sigma = 0.0;
  for (int it = 0; it < 500; ++it) {
    Eigen::VectorXd w = m.transpose() * (m * v);
    const double norm = w.norm();
    if (norm == 0.0) return 0.0;
    v = w / norm;
    sigma = std::sqrt(norm);
  }
  return sigma;
}

/// Step 0.1/sigma_max(-B), at most 1e4 iterations, stops when the relative
/// loss change drops below 1e-10 with a small gradient.
inline GdResult gradient_descent_train(const Matrix& xv, const Matrix& xl, int r, double rho, std::uint64_t seed) {
  const PairwiseLoss loss(xv, xl, rho);
  const double smax = power_sigma_max(loss.b);
  Rand rng(seed);
  const double init = 0.1 * std::sqrt(smax / loss.rho_eff);
  Matrix gv = init * rng.gaussian(xv.cols(), r);
  Matrix gl = init * rng.gaussian(xl.cols(), r);
  const double eta = 0.1 / smax;
  GdResult res;
  double prev = loss(gv * gl.transpose());
  for (int it = 1; it <= 10000; ++it) {
    const Matrix p = gv * gl.transpose();
    const Matrix g = loss.b + loss.rho_eff * p;
    const Matrix grad_v = g * gl;
    const Matrix grad_l = g.transpose() * gv;
    gv -= eta * grad_v;
    gl -= eta * grad_l;
    const double cur = loss(gv * gl.transpose());
    res.iterations = it;
    const double grad_norm = std::sqrt(grad_v.squaredNorm() + grad_l.squaredNorm());
    if (std::abs(cur - prev) <= 1e-10 * std::max(std::abs(cur), 1e-300) && grad_norm < 1e-9 * smax) {
      res.converged = true;
      prev = cur;
      break;
    }
    prev = cur;
  }
  res.product = gv * gl.transpose();
  res.loss = prev;
  return res;
}

/// Sherman-Morrison reference: explicit inverse of (S + lambda I) by LU.
inline Matrix explicit_ridge_inverse(const Matrix& outer_sum, double lambda) {
  return (outer_sum + lambda * Matrix::Identity(outer_sum.rows(), outer_sum.cols())).fullPivLu().inverse();
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() /
           ("vas-test-" + tag + "-" + std::to_string(std::random_device{}()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  std::filesystem::path operator/(const std::string& name) const { return path / name; }
};

}  // namespace oracle
