#include "vas/theorysim.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "vas/error.hpp"
#include "vas/io_util.hpp"
#include "vas/optdesign.hpp"
#include "vas/scoring.hpp"
#include "vas/selection.hpp"

namespace vas::sim {

namespace {

// Stream tags for derive_seed, fixed so worlds are reproducible.
constexpr std::uint64_t kStreamGv = 1;
constexpr std::uint64_t kStreamGl = 2;
constexpr std::uint64_t kStreamCalTrain = 3;
constexpr std::uint64_t kStreamCalTest = 4;
constexpr std::uint64_t kStreamTrain = 5;
constexpr std::uint64_t kStreamTest = 6;
constexpr std::uint64_t kStreamResample = 7;
constexpr std::uint64_t kStreamSelect = 8;
constexpr std::uint64_t kStreamClasses = 9;
constexpr std::uint64_t kStreamAccuracy = 10;
constexpr std::uint64_t kStreamRetry = 11;

Eigen::MatrixXd gaussian(Eigen::Index rows, Eigen::Index cols, CounterRng& rng) {
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = rng.normal();
  }
  return m;
}

Eigen::MatrixXd orthonormal_columns(Eigen::Index d, Eigen::Index r, CounterRng& rng) {
  const Eigen::MatrixXd g = gaussian(d, r, rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  return qr.householderQ() * Eigen::MatrixXd::Identity(d, r);
}

Eigen::MatrixXd gather(const Eigen::MatrixXd& m, std::span<const std::uint64_t> rows) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= static_cast<std::uint64_t>(m.rows())) {
      throw Error(Errc::invalid_argument, "row " + std::to_string(rows[i]) + " out of range");
    }
    out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(rows[i]));
  }
  return out;
}

std::vector<std::uint64_t> iota_rows(std::uint64_t n) {
  std::vector<std::uint64_t> v(n);
  std::iota(v.begin(), v.end(), std::uint64_t{0});
  return v;
}

void normalize_rows(Eigen::MatrixXd& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const double norm = m.row(i).norm();
    if (norm > 0.0) m.row(i) /= norm;
  }
}

double frobenius_inner(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  return (a.array() * b.array()).sum();
}

double mean_shift(const Eigen::MatrixXd& z_v, const Eigen::MatrixXd& z_l, std::span<const std::uint64_t> rows) {
  const Eigen::VectorXd mv = gather(z_v, rows).colwise().mean();
  const Eigen::VectorXd ml = gather(z_l, rows).colwise().mean();
  return mv.norm() * ml.norm();
}

std::vector<std::uint64_t> vas_prior_subset(const SynthWorld& world, const Eigen::MatrixXd& proxy,
                                            std::uint64_t k) {
  const EmbeddingMatrix f = teacher_embeddings(world.train.x_v, world.g_star_v, Modality::vision);
  const ScoreVector s = vas_scores(f, nullptr, MomentMatrix::from_entries(proxy), 1);
  return select_top_k(s, k).kept;
}

// World regeneration on DegenerateSpectrum, bounded so a pathological config fails loudly.
constexpr std::uint64_t kMaxResamples = 10;

}  // namespace

void SynthConfig::validate() const {
  auto bad = [](const std::string& msg) { throw Error(Errc::config_invalid, msg); };
  if (r < 1) bad("r must be >= 1");
  if (d < r) bad("d must be >= r");
  if (sigma_train_diag.size() != r || sigma_test_diag.size() != r) {
    bad("sigma diagonals need exactly r entries");
  }
  for (const auto* diag : {&sigma_train_diag, &sigma_test_diag}) {
    double total = 0.0;
    for (double v : *diag) {
      if (!(v > 0.0) || !std::isfinite(v)) bad("sigma diagonal entries must be positive");
      total += v;
    }
    if (total > 1.0 + 1e-12) bad("sigma diagonal sums to " + format_double(total) + " > 1");
  }
  if (!(noise_std >= 0.0) || !std::isfinite(noise_std)) bad("noise_std must be >= 0");
  if (!(rho > 0.0) || !std::isfinite(rho)) bad("rho must be > 0");
  if (n_train < 2) bad("n_train must be >= 2");
}

LatentSampler LatentSampler::calibrate(std::span<const double> target_diag, std::uint64_t seed) {
  const auto r = static_cast<Eigen::Index>(target_diag.size());
  const Eigen::Index m = static_cast<Eigen::Index>(kCalibrationDraws);
  Eigen::VectorXd cross(r);
  for (Eigen::Index k = 0; k < r; ++k) cross[k] = target_diag[static_cast<std::size_t>(k)];
  const double alpha = cross.sum();
  const Eigen::VectorXd marginal = cross / alpha;
  const bool identical = alpha >= 1.0 - 1e-12;

  CounterRng rng(seed);
  const Eigen::MatrixXd s = gaussian(m, r, rng);
  const Eigen::MatrixXd e1 = gaussian(m, r, rng);
  const Eigen::MatrixXd e2 = gaussian(m, r, rng);

  Eigen::VectorXd total = marginal;
  Eigen::VectorXd corr = Eigen::VectorXd::Constant(r, identical ? 1.0 : alpha);
  LatentSampler out;
  auto amplitudes = [&] {
    out.shared = (total.array() * corr.array()).sqrt();
    out.independent = (total.array() * (1.0 - corr.array())).sqrt();
  };
  amplitudes();
  for (std::uint32_t it = 1; it <= 200; ++it) {
    Eigen::MatrixXd zv = s * out.shared.asDiagonal();
    Eigen::MatrixXd zl = zv;
    zv += e1 * out.independent.asDiagonal();
    zl += e2 * out.independent.asDiagonal();
    normalize_rows(zv);
    normalize_rows(zl);
    const Eigen::VectorXd c_hat = (zv.array() * zl.array()).colwise().mean();
    const Eigen::VectorXd m_hat =
        0.5 * ((zv.array().square() + zl.array().square()).colwise().mean()).matrix().transpose();
    double err = 0.0;
    for (Eigen::Index k = 0; k < r; ++k) {
      err = std::max(err, std::abs(c_hat[k] - cross[k]) / cross[k]);
      err = std::max(err, std::abs(m_hat[k] - marginal[k]) / marginal[k]);
    }
    out.calibration_iterations = it;
    out.calibration_error = err;
    if (err < 1e-6) break;
    for (Eigen::Index k = 0; k < r; ++k) {
      const double m_ratio = marginal[k] / m_hat[k];
      total[k] *= m_ratio;
      if (!identical) corr[k] = std::clamp(corr[k] * (cross[k] / std::max(c_hat[k], 1e-300)) / m_ratio, 0.0, 1.0);
    }
    total /= total.sum();
    amplitudes();
  }
  return out;
}

void LatentSampler::sample(std::uint64_t n, CounterRng& rng, Eigen::MatrixXd& z_v, Eigen::MatrixXd& z_l) const {
  const auto r = shared.size();
  const auto rows = static_cast<Eigen::Index>(n);
  z_v.resize(rows, r);
  z_l.resize(rows, r);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index k = 0; k < r; ++k) {
      const double common = shared[k] * rng.normal();
      z_v(i, k) = common + independent[k] * rng.normal();
      z_l(i, k) = common + independent[k] * rng.normal();
    }
  }
  normalize_rows(z_v);
  normalize_rows(z_l);
}

SynthSplit sample_split(const SynthWorld& world, const LatentSampler& sampler, std::uint64_t n,
                        std::uint64_t seed) {
  CounterRng rng(seed);
  SynthSplit split;
  sampler.sample(n, rng, split.z_v, split.z_l);
  split.x_v = split.z_v * world.g_star_v.transpose();
  split.x_l = split.z_l * world.g_star_l.transpose();
  const double noise = world.config.noise_std;
  if (noise > 0.0) {
    for (auto* x : {&split.x_v, &split.x_l}) {
      for (Eigen::Index i = 0; i < x->rows(); ++i) {
        for (Eigen::Index j = 0; j < x->cols(); ++j) (*x)(i, j) += noise * rng.normal();
      }
    }
  }
  return split;
}

SynthWorld gen_world(const SynthConfig& cfg) {
  cfg.validate();
  SynthWorld w;
  w.config = cfg;
  CounterRng rng_v(derive_seed(cfg.seed, kStreamGv));
  CounterRng rng_l(derive_seed(cfg.seed, kStreamGl));
  w.g_star_v = orthonormal_columns(cfg.d, cfg.r, rng_v);
  w.g_star_l = orthonormal_columns(cfg.d, cfg.r, rng_l);
  w.train_sampler = LatentSampler::calibrate(cfg.sigma_train_diag, derive_seed(cfg.seed, kStreamCalTrain));
  w.test_sampler = LatentSampler::calibrate(cfg.sigma_test_diag, derive_seed(cfg.seed, kStreamCalTest));
  w.train = sample_split(w, w.train_sampler, cfg.n_train, derive_seed(cfg.seed, kStreamTrain));
  w.test = sample_split(w, w.test_sampler, cfg.n_test, derive_seed(cfg.seed, kStreamTest));
  return w;
}

Eigen::MatrixXd empirical_gamma(const Eigen::MatrixXd& x_v, const Eigen::MatrixXd& x_l,
                                std::span<const std::uint64_t> subset) {
  if (subset.size() < 2) throw Error(Errc::subset_too_small, "|S| = " + std::to_string(subset.size()));
  const Eigen::MatrixXd v = gather(x_v, subset);
  const Eigen::MatrixXd l = gather(x_l, subset);
  const double n = static_cast<double>(subset.size());
  const Eigen::VectorXd mv = v.colwise().mean();
  const Eigen::VectorXd ml = l.colwise().mean();
  return (v.transpose() * l - n * mv * ml.transpose()) / (n - 1.0);
}

TrainedMap closed_form_train(const Eigen::MatrixXd& x_v, const Eigen::MatrixXd& x_l,
                             std::span<const std::uint64_t> subset, std::uint32_t r, double rho) {
  if (!(rho > 0.0)) throw Error(Errc::config_invalid, "rho must be > 0");
  const Eigen::MatrixXd gamma = empirical_gamma(x_v, x_l, subset);
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(gamma, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Eigen::VectorXd& s = svd.singularValues();
  const auto rank = std::min<Eigen::Index>(r, s.size());
  if (rank < s.size()) {
    const double top = s[0];
    const double sr = s[rank - 1];
    if (sr > 1e-9 * top && sr - s[rank] < 1e-12) {
      throw Error(Errc::degenerate_spectrum, "sigma_r - sigma_{r+1} = " + format_double(sr - s[rank]));
    }
  }
  const double n = static_cast<double>(subset.size());
  TrainedMap map;
  map.rho = rho;
  map.subset_size = subset.size();
  map.product = (svd.matrixU().leftCols(rank) * s.head(rank).asDiagonal() *
                 svd.matrixV().leftCols(rank).transpose()) *
                ((n - 1.0) / (n * rho));
  return map;
}

TrainedMap closed_form_train(const SynthWorld& world, std::span<const std::uint64_t> subset, double rho) {
  return closed_form_train(world.train.x_v, world.train.x_l, subset, world.config.r, rho);
}

double training_loss(const SynthWorld& world, std::span<const std::uint64_t> subset, double rho,
                     const Eigen::MatrixXd& product) {
  if (subset.size() < 2) throw Error(Errc::subset_too_small, "|S| = " + std::to_string(subset.size()));
  const Eigen::MatrixXd v = gather(world.train.x_v, subset);
  const Eigen::MatrixXd l = gather(world.train.x_l, subset);
  const Eigen::MatrixXd sim = (v * product) * l.transpose();
  const double n = static_cast<double>(subset.size());
  const double pair_sum = sim.sum() - n * sim.trace();
  return pair_sum / (n * (n - 1.0)) + 0.5 * rho * (n / (n - 1.0)) * product.squaredNorm();
}

double simplified_test_loss(const Eigen::MatrixXd& product, const SynthSplit& split) {
  if (split.size() == 0) throw Error(Errc::empty_test, "");
  const Eigen::MatrixXd vp = split.x_v * product;
  return -(vp.array() * split.x_l.array()).sum() / static_cast<double>(split.size());
}

TestLoss test_loss(const TrainedMap& map, const SynthWorld& world, std::uint64_t resample_seed) {
  const SynthSplit& test = world.test;
  if (test.size() == 0) throw Error(Errc::empty_test, "");
  const SynthSplit fresh = sample_split(world, world.test_sampler, test.size(),
                                        derive_seed(world.config.seed ^ resample_seed, kStreamResample));
  const Eigen::MatrixXd vp = test.x_v * map.product;
  const Eigen::VectorXd matched = (vp.array() * test.x_l.array()).rowwise().sum();
  const Eigen::VectorXd crossed = (vp.array() * fresh.x_l.array()).rowwise().sum();
  const double n = static_cast<double>(test.size());
  TestLoss out;
  out.simplified = -matched.sum() / n;
  out.contrast = (crossed - matched).sum() / n;
  out.scale = std::sqrt(crossed.squaredNorm() / n);
  return out;
}

ClassTask make_class_task(const SynthWorld& world, std::uint32_t classes, std::uint64_t per_class,
                          double jitter, std::uint64_t seed) {
  if (classes < 2 || per_class < 1) {
    throw Error(Errc::degenerate_classes, "classes=" + std::to_string(classes) +
                                              " per_class=" + std::to_string(per_class));
  }
  const auto r = static_cast<Eigen::Index>(world.config.r);
  CounterRng rng(seed);
  Eigen::MatrixXd templates;  // C x r latent
  if (classes <= r) {
    templates = orthonormal_columns(r, classes, rng).transpose();
  } else {
    templates = gaussian(classes, r, rng);
    normalize_rows(templates);
  }
  ClassTask task;
  task.classes = classes;
  task.text_templates = templates * world.g_star_l.transpose();
  const auto m = static_cast<Eigen::Index>(classes * per_class);
  Eigen::MatrixXd z(m, r);
  task.labels.reserve(static_cast<std::size_t>(m));
  for (std::uint32_t c = 0; c < classes; ++c) {
    for (std::uint64_t j = 0; j < per_class; ++j) {
      const auto row = static_cast<Eigen::Index>(c * per_class + j);
      for (Eigen::Index k = 0; k < r; ++k) z(row, k) = templates(c, k) + jitter * rng.normal();
      task.labels.push_back(c);
    }
  }
  normalize_rows(z);
  task.images = z * world.g_star_v.transpose();
  const double noise = world.config.noise_std;
  if (noise > 0.0) {
    for (Eigen::Index i = 0; i < task.images.rows(); ++i) {
      for (Eigen::Index j = 0; j < task.images.cols(); ++j) task.images(i, j) += noise * rng.normal();
    }
  }
  return task;
}

double classification_accuracy(const TrainedMap& map, const ClassTask& task, std::uint64_t trials,
                               std::uint64_t seed) {
  if (task.classes < 2 || task.images.rows() == 0) throw Error(Errc::degenerate_classes, "");
  if (trials == 0) throw Error(Errc::invalid_argument, "trials must be >= 1");
  const Eigen::MatrixXd sims = (task.images * map.product) * task.text_templates.transpose();
  CounterRng rng(seed);
  double wins = 0.0;
  for (std::uint64_t t = 0; t < trials; ++t) {
    const auto i = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(task.images.rows())));
    const std::uint32_t c = task.labels[static_cast<std::size_t>(i)];
    auto other = static_cast<std::uint32_t>(rng.below(task.classes - 1));
    if (other >= c) ++other;
    const double right = sims(i, c);
    const double wrong = sims(i, other);
    wins += right > wrong ? 1.0 : (right == wrong ? 0.5 : 0.0);
  }
  return wins / static_cast<double>(trials);
}

Eigen::MatrixXd latent_cross_moment(const Eigen::MatrixXd& z_v, const Eigen::MatrixXd& z_l,
                                    std::span<const std::uint64_t> rows, Centering centering) {
  if (rows.empty()) throw Error(Errc::subset_too_small, "empty subset");
  const Eigen::MatrixXd v = gather(z_v, rows);
  const Eigen::MatrixXd l = gather(z_l, rows);
  const double n = static_cast<double>(rows.size());
  Eigen::MatrixXd m = v.transpose() * l / n;
  if (centering == Centering::centered) {
    const Eigen::VectorXd mv = v.colwise().mean();
    const Eigen::VectorXd ml = l.colwise().mean();
    m -= mv * ml.transpose();
  }
  return m;
}

BestSubset best_subset_oracle(const SynthWorld& world, std::span<const std::uint64_t> pool,
                              std::uint64_t k, const Eigen::MatrixXd& sigma_test, Centering centering) {
  const std::uint64_t p = pool.size();
  if (k < 1 || k > p) throw Error(Errc::k_out_of_range, "k=" + std::to_string(k) + " pool=" + std::to_string(p));
  double combos = 1.0;
  for (std::uint64_t i = 0; i < k; ++i) combos = combos * static_cast<double>(p - i) / static_cast<double>(i + 1);
  if (combos > static_cast<double>(kMaxEnumeration) + 0.5) {
    throw Error(Errc::combinatorial_blowup, "C(" + std::to_string(p) + "," + std::to_string(k) + ") = " +
                                                format_double(std::round(combos)));
  }
  const Eigen::MatrixXd v = gather(world.train.z_v, pool);
  const Eigen::MatrixXd l = gather(world.train.z_l, pool);
  // w(i, j) = z_v,i^T sigma_test z_l,j; the objective is the mean diagonal
  // minus (centered only) the mean of the whole k x k block.
  const bool centered = centering == Centering::centered && k > 1;
  Eigen::MatrixXd w;
  Eigen::VectorXd diag(static_cast<Eigen::Index>(p));
  const Eigen::MatrixXd vs = v * sigma_test;
  if (centered) {
    w = vs * l.transpose();
    diag = w.diagonal();
  } else {
    diag = (vs.array() * l.array()).rowwise().sum();
  }
  const double kd = static_cast<double>(k);
  std::vector<std::uint64_t> idx(k);
  std::iota(idx.begin(), idx.end(), std::uint64_t{0});
  BestSubset best;
  best.objective = -std::numeric_limits<double>::infinity();
  std::vector<std::uint64_t> best_idx;
  while (true) {
    double d_sum = 0.0;
    for (auto i : idx) d_sum += diag[static_cast<Eigen::Index>(i)];
    double value = d_sum / kd;
    if (centered) {
      double block = 0.0;
      for (auto i : idx) {
        for (auto j : idx) block += w(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
      }
      value -= block / (kd * kd);
    } else if (centering == Centering::centered) {
      value = 0.0;  // a single sample has zero centered moment
    }
    if (value > best.objective) {
      best.objective = value;
      best_idx = idx;
    }
    // Next combination in lexicographic order.
    std::int64_t pos = static_cast<std::int64_t>(k) - 1;
    while (pos >= 0 && idx[static_cast<std::size_t>(pos)] == p - k + static_cast<std::uint64_t>(pos)) --pos;
    if (pos < 0) break;
    ++idx[static_cast<std::size_t>(pos)];
    for (std::size_t q = static_cast<std::size_t>(pos) + 1; q < k; ++q) idx[q] = idx[q - 1] + 1;
  }
  for (auto i : best_idx) best.indices.push_back(pool[i]);
  std::sort(best.indices.begin(), best.indices.end());
  return best;
}

BestSubset best_subset_additive(const SynthWorld& world, std::span<const std::uint64_t> pool,
                                std::uint64_t k, const Eigen::MatrixXd& sigma_test) {
  const std::uint64_t p = pool.size();
  if (k < 1 || k > p) throw Error(Errc::k_out_of_range, "k=" + std::to_string(k) + " pool=" + std::to_string(p));
  const Eigen::MatrixXd v = gather(world.train.z_v, pool);
  const Eigen::MatrixXd l = gather(world.train.z_l, pool);
  const Eigen::VectorXd w = ((v * sigma_test).array() * l.array()).rowwise().sum();
  ScoreVector s;
  s.scores.assign(w.data(), w.data() + w.size());
  const auto top = select_top_k(s, k);
  BestSubset best;
  double total = 0.0;
  for (auto pos : top.kept) {
    best.indices.push_back(pool[pos]);
    total += w[static_cast<Eigen::Index>(pos)];
  }
  std::sort(best.indices.begin(), best.indices.end());
  best.objective = total / static_cast<double>(k);
  return best;
}

double nuclear_norm(const Eigen::MatrixXd& m) {
  return Eigen::JacobiSVD<Eigen::MatrixXd>(m).singularValues().sum();
}

double operator_norm(const Eigen::MatrixXd& m) {
  if (m.size() == 0) return 0.0;
  return Eigen::JacobiSVD<Eigen::MatrixXd>(m).singularValues()[0];
}

TeacherErrorReport measure_teacher_error(const SynthWorld& world, const Eigen::MatrixXd& teacher_v,
                                         const Eigen::MatrixXd& teacher_l,
                                         std::span<const std::uint64_t> subset) {
  const auto r = static_cast<Eigen::Index>(world.config.r);
  if (teacher_v.rows() != world.g_star_v.rows() || teacher_v.cols() != r || teacher_l.rows() != teacher_v.rows() ||
      teacher_l.cols() != r) {
    throw Error(Errc::shape_mismatch, "teacher maps must be d x r");
  }
  if (subset.empty()) throw Error(Errc::subset_too_small, "empty subset");
  const Eigen::MatrixXd fv = gather(world.train.x_v, subset) * teacher_v;
  const Eigen::MatrixXd fl = gather(world.train.x_l, subset) * teacher_l;
  const Eigen::MatrixXd zv = gather(world.train.z_v, subset);
  const Eigen::MatrixXd zl = gather(world.train.z_l, subset);
  const double n = static_cast<double>(subset.size());
  TeacherErrorReport rep;
  rep.eps_v = nuclear_norm((fv.transpose() * fv - zv.transpose() * zv) / n);
  rep.eps_l = nuclear_norm((fl.transpose() * fl - zl.transpose() * zl) / n);
  rep.eps_cross = nuclear_norm((fv.transpose() * fl - zv.transpose() * zl) / n);
  return rep;
}

TeacherErrorReport sampled_worst_teacher_error(const SynthWorld& world, const Eigen::MatrixXd& teacher_v,
                                               const Eigen::MatrixXd& teacher_l, std::uint64_t size,
                                               std::uint64_t samples, std::uint64_t seed) {
  TeacherErrorReport worst;
  for (std::uint64_t s = 0; s < samples; ++s) {
    const auto subset = random_select(world.train.size(), size, derive_seed(seed, s)).kept;
    const auto rep = measure_teacher_error(world, teacher_v, teacher_l, subset);
    worst.eps_v = std::max(worst.eps_v, rep.eps_v);
    worst.eps_l = std::max(worst.eps_l, rep.eps_l);
    worst.eps_cross = std::max(worst.eps_cross, rep.eps_cross);
  }
  return worst;
}

double alignment_term(const Eigen::MatrixXd& z_v, const Eigen::MatrixXd& z_l,
                      std::span<const std::uint64_t> rows) {
  if (rows.empty()) throw Error(Errc::subset_too_small, "empty subset");
  double total = 0.0;
  for (auto i : rows) {
    total += z_v.row(static_cast<Eigen::Index>(i)).dot(z_l.row(static_cast<Eigen::Index>(i)));
  }
  return std::sqrt(std::max(0.0, 1.0 - total / static_cast<double>(rows.size())));
}

double noise_scale(std::uint32_t d, std::uint64_t subset_size, std::uint64_t best_size, double noise_std) {
  auto term = [d](std::uint64_t n) {
    const double dd = static_cast<double>(d);
    const double nn = static_cast<double>(std::max<std::uint64_t>(n, 1));
    return std::sqrt(dd * std::log(std::max(dd * nn, 2.0)) / nn);
  };
  return noise_std * (term(subset_size) + term(best_size));
}

EmbeddingMatrix teacher_embeddings(const Eigen::MatrixXd& x, const Eigen::MatrixXd& teacher, Modality m) {
  const Eigen::MatrixXd f = x * teacher;
  std::vector<float> data(static_cast<std::size_t>(f.size()));
  for (Eigen::Index i = 0; i < f.rows(); ++i) {
    for (Eigen::Index j = 0; j < f.cols(); ++j) {
      data[static_cast<std::size_t>(i * f.cols() + j)] = static_cast<float>(f(i, j));
    }
  }
  return EmbeddingMatrix::make(static_cast<std::uint64_t>(f.rows()), static_cast<std::uint32_t>(f.cols()),
                               std::move(data), m);
}

Eigen::MatrixXd teacher_vision_moment(const SynthSplit& split, const Eigen::MatrixXd& teacher_v) {
  if (split.size() == 0) throw Error(Errc::empty_test, "");
  const Eigen::MatrixXd f = split.x_v * teacher_v;
  return f.transpose() * f / static_cast<double>(split.size());
}

BoundReport bound_report(const SynthWorld& world, std::span<const std::uint64_t> subset,
                         std::span<const std::uint64_t> pool, const Eigen::MatrixXd& sigma_test_proxy,
                         const Eigen::MatrixXd& teacher_v, const Eigen::MatrixXd& teacher_l, double rho,
                         const BoundOptions& opts) {
  const auto r = static_cast<Eigen::Index>(world.config.r);
  if (sigma_test_proxy.rows() != r || sigma_test_proxy.cols() != r) {
    throw Error(Errc::shape_mismatch, "proxy must be r x r");
  }
  if (subset.size() < 2) throw Error(Errc::subset_too_small, "|S| = " + std::to_string(subset.size()));
  const auto& tr = world.train;
  const std::vector<std::uint64_t> all_test = iota_rows(world.test.size());
  const Eigen::MatrixXd sigma_test = latent_cross_moment(world.test.z_v, world.test.z_l, all_test,
                                                         Centering::uncentered);
  const BestSubset best = best_subset_additive(world, pool, subset.size(), sigma_test);

  BoundReport rep;
  rep.best = best.indices;
  rep.prior_gap = operator_norm(sigma_test_proxy - sigma_test);
  const Eigen::MatrixXd u_s = latent_cross_moment(tr.z_v, tr.z_l, subset, Centering::uncentered);
  const Eigen::MatrixXd u_b = latent_cross_moment(tr.z_v, tr.z_l, best.indices, Centering::uncentered);
  rep.subset_gap = nuclear_norm(u_s - u_b);
  rep.alignment = alignment_term(tr.z_v, tr.z_l, subset);
  rep.teacher = measure_teacher_error(world, teacher_v, teacher_l, subset);
  const TeacherErrorReport teacher_best = measure_teacher_error(world, teacher_v, teacher_l, best.indices);

  const TrainedMap map_s = closed_form_train(world, subset, rho);
  const TrainedMap map_b = closed_form_train(world, best.indices, rho);
  rep.delta_measured = simplified_test_loss(map_s.product, world.test) - simplified_test_loss(map_b.product, world.test);
  rep.rho_delta = rho * rep.delta_measured;

  const bool vision_only = opts.mode == BoundMode::vision_only;
  const double align_best = alignment_term(tr.z_v, tr.z_l, best.indices);
  const double t_s = vision_only ? rep.teacher.eps_v + std::sqrt(2.0) * rep.alignment : rep.teacher.eps_cross;
  const double t_b = vision_only ? teacher_best.eps_v + std::sqrt(2.0) * align_best : teacher_best.eps_cross;
  rep.term_sum = rep.prior_gap * rep.subset_gap +
                 (vision_only ? rep.teacher.eps_v + rep.alignment : rep.teacher.eps_cross);
  const double sigma_op = operator_norm(sigma_test);
  rep.envelope = opts.envelope_constant * noise_scale(world.config.d, subset.size(), best.indices.size(),
                                                      world.config.noise_std) +
                 sigma_op * (mean_shift(tr.z_v, tr.z_l, subset) + mean_shift(tr.z_v, tr.z_l, best.indices));
  rep.rhs = rep.prior_gap * rep.subset_gap + operator_norm(sigma_test_proxy) * (t_s + t_b) + rep.envelope;
  rep.holds = rep.rho_delta <= rep.rhs + 1e-12 * (1.0 + std::abs(rep.rhs));
  return rep;
}

double calibrate_envelope_constant(const SynthConfig& cfg, std::uint64_t k, std::uint64_t seeds) {
  if (cfg.noise_std == 0.0) return 0.0;
  double worst = 0.0;
  for (std::uint64_t s = 0; s < seeds; ++s) {
    SynthConfig c = cfg;
    c.seed = derive_seed(cfg.seed ^ 0xCA11B4A7EULL, s);
    const SynthWorld w = gen_world(c);
    const auto pool = iota_rows(w.train.size());
    const auto all_test = iota_rows(w.test.size());
    const Eigen::MatrixXd sigma_test = latent_cross_moment(w.test.z_v, w.test.z_l, all_test, Centering::uncentered);
    const Eigen::MatrixXd proxy = teacher_vision_moment(w.test, w.g_star_v);
    const auto subset = vas_prior_subset(w, proxy, k);
    const auto best = best_subset_additive(w, pool, k, sigma_test).indices;
    const double delta = simplified_test_loss(closed_form_train(w, subset, c.rho).product, w.test) -
                         simplified_test_loss(closed_form_train(w, best, c.rho).product, w.test);
    const double gap = frobenius_inner(
        sigma_test, latent_cross_moment(w.train.z_v, w.train.z_l, best, Centering::centered) -
                        latent_cross_moment(w.train.z_v, w.train.z_l, subset, Centering::centered));
    worst = std::max(worst, std::abs(c.rho * delta - gap) / noise_scale(c.d, k, k, c.noise_std));
  }
  return worst;
}

std::vector<Lemma1Row> verify_lemma1(const SynthConfig& cfg, std::uint64_t pool_n, std::uint64_t k,
                                     std::uint64_t trials) {
  if (k < 2) throw Error(Errc::subset_too_small, "k must be >= 2");
  std::vector<Lemma1Row> rows;
  for (std::uint64_t trial = 0; trial < trials; ++trial) {
    const std::uint64_t trial_seed = derive_seed(cfg.seed, trial);
    for (std::uint64_t attempt = 0;; ++attempt) {
      SynthConfig c = cfg;
      c.n_train = pool_n;
      c.seed = attempt == 0 ? trial_seed : derive_seed(trial_seed, kStreamRetry + attempt);
      const SynthWorld w = gen_world(c);
      const auto pool = iota_rows(pool_n);
      const auto all_test = iota_rows(w.test.size());
      const Eigen::MatrixXd sigma_test =
          latent_cross_moment(w.test.z_v, w.test.z_l, all_test, Centering::uncentered);
      const BestSubset best = best_subset_oracle(w, pool, k, sigma_test, Centering::centered);
      const Eigen::MatrixXd proxy = teacher_vision_moment(w.test, w.g_star_v);
      const std::vector<std::pair<std::string, std::vector<std::uint64_t>>> variants = {
          {"random", random_select(pool_n, k, derive_seed(c.seed, kStreamSelect)).kept},
          {"vas", vas_prior_subset(w, proxy, k)},
          {"best", best.indices},
      };
      std::vector<Lemma1Row> trial_rows;
      try {
        const double loss_best = simplified_test_loss(closed_form_train(w, best.indices, c.rho).product, w.test);
        const Eigen::MatrixXd c_best = latent_cross_moment(w.train.z_v, w.train.z_l, best.indices, Centering::centered);
        for (const auto& [name, subset] : variants) {
          const double loss_s = simplified_test_loss(closed_form_train(w, subset, c.rho).product, w.test);
          const Eigen::MatrixXd c_s = latent_cross_moment(w.train.z_v, w.train.z_l, subset, Centering::centered);
          Lemma1Row row;
          row.trial = trial;
          row.variant = name;
          row.objective_gap = frobenius_inner(sigma_test, c_best - c_s);
          row.rho_delta = c.rho * (loss_s - loss_best);
          row.discrepancy = std::abs(row.rho_delta - row.objective_gap);
          row.objective_scale =
              std::max(std::abs(frobenius_inner(sigma_test, c_best)), std::abs(frobenius_inner(sigma_test, c_s)));
          row.noise_scale = noise_scale(c.d, k, k, c.noise_std);
          row.resampled = attempt;
          trial_rows.push_back(row);
        }
      } catch (const Error& e) {
        if (e.code() != Errc::degenerate_spectrum || attempt + 1 >= kMaxResamples) throw;
        continue;
      }
      rows.insert(rows.end(), trial_rows.begin(), trial_rows.end());
      break;
    }
  }
  return rows;
}

std::string_view strategy_name(Strategy s) noexcept {
  switch (s) {
    case Strategy::random: return "random";
    case Strategy::vas_prior: return "vas_prior";
    case Strategy::vas_d: return "vas_d";
    case Strategy::a_opt: return "a_opt";
    case Strategy::v_opt: return "v_opt";
    case Strategy::clip_top: return "clip_top";
  }
  return "unknown";
}

std::optional<Strategy> parse_strategy(std::string_view name) noexcept {
  for (auto s : {Strategy::random, Strategy::vas_prior, Strategy::vas_d, Strategy::a_opt, Strategy::v_opt,
                 Strategy::clip_top}) {
    if (strategy_name(s) == name) return s;
  }
  return std::nullopt;
}

std::vector<std::uint64_t> select_with_strategy(const SynthWorld& world, Strategy s, std::uint64_t budget,
                                                std::uint64_t tau, std::uint64_t seed) {
  const std::uint64_t n = world.train.size();
  if (budget < 2 || budget > n) {
    throw Error(Errc::k_out_of_range, "budget=" + std::to_string(budget) + " pool=" + std::to_string(n));
  }
  if (s == Strategy::random) return random_select(n, budget, seed).kept;
  const EmbeddingMatrix fv = teacher_embeddings(world.train.x_v, world.g_star_v, Modality::vision);
  const MomentMatrix proxy = MomentMatrix::from_entries(teacher_vision_moment(world.test, world.g_star_v));
  const SelectionResult all = SelectionResult::all(n);
  switch (s) {
    case Strategy::vas_prior: return select_top_k(vas_scores(fv, nullptr, proxy, 1), budget).kept;
    case Strategy::vas_d: return vas_d(fv, all, budget, tau, 1).selection.kept;
    case Strategy::a_opt: return a_optimal_select(fv, all, budget, tau, default_ridge(fv, all), 1).selection.kept;
    case Strategy::v_opt:
      return v_optimal_select(fv, all, budget, tau, default_ridge(fv, all), proxy, 1).selection.kept;
    case Strategy::clip_top: {
      const EmbeddingMatrix fl = teacher_embeddings(world.train.x_l, world.g_star_l, Modality::language);
      return select_top_k(vas_scores(fv, &fl, MomentMatrix::identity(fv.d), 1), budget).kept;
    }
    case Strategy::random: break;
  }
  return {};
}

FaceoffTable strategy_faceoff(const SynthConfig& cfg, std::uint64_t budget, std::span<const Strategy> strategies,
                              std::uint64_t trials, const FaceoffOptions& opts) {
  if (strategies.empty()) throw Error(Errc::invalid_argument, "no strategies");
  if (trials == 0) throw Error(Errc::invalid_argument, "trials must be >= 1");
  FaceoffTable table;
  for (std::uint64_t trial = 0; trial < trials; ++trial) {
    const std::uint64_t trial_seed = derive_seed(cfg.seed, trial);
    for (std::uint64_t attempt = 0;; ++attempt) {
      SynthConfig c = cfg;
      c.seed = attempt == 0 ? trial_seed : derive_seed(trial_seed, kStreamRetry + attempt);
      const SynthWorld w = gen_world(c);
      const ClassTask task = make_class_task(w, opts.classes, opts.per_class, opts.class_jitter,
                                             derive_seed(c.seed, kStreamClasses));
      std::vector<FaceoffRow> trial_rows;
      try {
        for (auto s : strategies) {
          const auto subset = select_with_strategy(w, s, budget, opts.tau, derive_seed(c.seed, kStreamSelect));
          const TrainedMap map = closed_form_train(w, subset, c.rho);
          const TestLoss loss = test_loss(map, w);
          FaceoffRow row;
          row.trial = trial;
          row.strategy = s;
          row.subset_size = subset.size();
          row.loss_simplified = loss.simplified;
          row.loss_contrast = loss.contrast;
          row.accuracy =
              classification_accuracy(map, task, opts.accuracy_trials, derive_seed(c.seed, kStreamAccuracy));
          trial_rows.push_back(row);
        }
      } catch (const Error& e) {
        if (e.code() != Errc::degenerate_spectrum || attempt + 1 >= kMaxResamples) throw;
        continue;
      }
      table.rows.insert(table.rows.end(), trial_rows.begin(), trial_rows.end());
      break;
    }
  }
  for (auto s : strategies) {
    FaceoffSummary sum;
    sum.strategy = s;
    std::vector<double> loss, acc;
    for (const auto& row : table.rows) {
      if (row.strategy != s) continue;
      loss.push_back(row.loss_simplified);
      acc.push_back(row.accuracy);
    }
    auto mean_std = [](const std::vector<double>& v, double& mean, double& sd) {
      mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
      double ss = 0.0;
      for (double x : v) ss += (x - mean) * (x - mean);
      sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
    };
    mean_std(loss, sum.mean_loss, sum.std_loss);
    mean_std(acc, sum.mean_accuracy, sum.std_accuracy);
    table.summary.push_back(sum);
  }
  return table;
}

void write_lemma1_csv(std::span<const Lemma1Row> rows, const std::filesystem::path& path) {
  AtomicFile out(path);
  out.stream() << "trial,variant,objective_gap,rho_delta,discrepancy,objective_scale,noise_scale,resampled\n";
  for (const auto& r : rows) {
    out.stream() << r.trial << ',' << r.variant << ',' << format_double(r.objective_gap) << ','
                 << format_double(r.rho_delta) << ',' << format_double(r.discrepancy) << ','
                 << format_double(r.objective_scale) << ',' << format_double(r.noise_scale) << ',' << r.resampled
                 << '\n';
  }
  out.commit();
}

void write_faceoff_csv(const FaceoffTable& t, const std::filesystem::path& path) {
  AtomicFile out(path);
  out.stream() << "trial,strategy,subset_size,loss_simplified,loss_contrast,accuracy\n";
  for (const auto& r : t.rows) {
    out.stream() << r.trial << ',' << strategy_name(r.strategy) << ',' << r.subset_size << ','
                 << format_double(r.loss_simplified) << ',' << format_double(r.loss_contrast) << ','
                 << format_double(r.accuracy) << '\n';
  }
  out.commit();
}

void write_faceoff_summary_csv(const FaceoffTable& t, const std::filesystem::path& path) {
  AtomicFile out(path);
  out.stream() << "strategy,mean_loss,std_loss,mean_accuracy,std_accuracy\n";
  for (const auto& s : t.summary) {
    out.stream() << strategy_name(s.strategy) << ',' << format_double(s.mean_loss) << ','
                 << format_double(s.std_loss) << ',' << format_double(s.mean_accuracy) << ','
                 << format_double(s.std_accuracy) << '\n';
  }
  out.commit();
}

void save_world(const SynthWorld& world, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(Errc::io_failure, "cannot create " + dir.string() + ": " + ec.message());
  const Eigen::MatrixXd eye_r = Eigen::MatrixXd::Identity(world.config.r, world.config.r);
  const Eigen::MatrixXd eye_d = Eigen::MatrixXd::Identity(world.config.d, world.config.d);
  for (const auto& [name, split] : {std::pair<const char*, const SynthSplit*>{"train", &world.train},
                                    std::pair<const char*, const SynthSplit*>{"test", &world.test}}) {
    const std::string base(name);
    save_embeddings(teacher_embeddings(split->z_v, eye_r, Modality::vision), dir / (base + "_z_v.vemb"));
    save_embeddings(teacher_embeddings(split->z_l, eye_r, Modality::language), dir / (base + "_z_l.vemb"));
    save_embeddings(teacher_embeddings(split->x_v, eye_d, Modality::vision), dir / (base + "_x_v.vemb"));
    save_embeddings(teacher_embeddings(split->x_l, eye_d, Modality::language), dir / (base + "_x_l.vemb"));
  }
}

}  // namespace vas::sim
