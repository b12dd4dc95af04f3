#include "vas/selection.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <numeric>

#include "json.hpp"
#include "vas/error.hpp"
#include "vas/io_util.hpp"

namespace vas {

namespace {

// Ranking order for "keep": higher score first, then smaller index.
struct KeepOrder {
  const double* scores;
  bool operator()(std::uint64_t a, std::uint64_t b) const {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  }
};

double sum_at(const ScoreVector& s, std::span<const std::uint64_t> idx) {
  double total = 0.0;
  for (auto i : idx) total += s[i];
  return total;
}

void check_finite(const ScoreVector& s) {
  for (double v : s.scores) {
    if (!std::isfinite(v)) throw Error(Errc::invalid_argument, "non-finite score");
  }
}

}  // namespace

SelectionResult SelectionResult::all(std::uint64_t n) {
  SelectionResult r;
  r.kept.resize(n);
  std::iota(r.kept.begin(), r.kept.end(), std::uint64_t{0});
  r.stages.push_back({"input", n, n, std::nullopt, std::nullopt});
  return r;
}

SelectionResult select_top_k(const ScoreVector& scores, std::uint64_t k) {
  const std::uint64_t n = scores.size();
  if (k < 1 || k > n) {
    throw Error(Errc::k_out_of_range, "k=" + std::to_string(k) + " with n=" + std::to_string(n));
  }
  check_finite(scores);
  std::vector<std::uint64_t> order(n);
  std::iota(order.begin(), order.end(), std::uint64_t{0});
  KeepOrder cmp{scores.scores.data()};
  if (k < n) std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(), cmp);
  order.resize(k);
  std::sort(order.begin(), order.end());

  SelectionResult r;
  r.target_n = k;
  r.stages.push_back({"top_k", n, k, std::nullopt, sum_at(scores, order)});
  r.kept = std::move(order);
  return r;
}

SelectionResult select_by_threshold(const ScoreVector& scores, double min_score) {
  if (!std::isfinite(min_score)) throw Error(Errc::invalid_argument, "threshold must be finite");
  SelectionResult r;
  for (std::uint64_t i = 0; i < scores.size(); ++i) {
    if (scores[i] >= min_score) r.kept.push_back(i);
  }
  r.stages.push_back({"threshold", scores.size(), r.kept.size(), min_score, sum_at(scores, r.kept)});
  return r;
}

std::vector<std::uint64_t> greedy_schedule(std::uint64_t n0, std::uint64_t target, std::uint64_t tau) {
  if (tau == 0) throw Error(Errc::tau_zero, "");
  if (target > n0) {
    throw Error(Errc::target_exceeds_input, std::to_string(target) + " > " + std::to_string(n0));
  }
  const std::uint64_t span = n0 - target;
  std::vector<std::uint64_t> sizes;
  sizes.reserve(tau);
  std::uint64_t prev = n0;
  for (std::uint64_t t = 1; t <= tau; ++t) {
    // removed = round(t * span / tau), exact integer arithmetic; an exact
    // half rounds N_t up, matching round-half-away-from-zero on N_t.
    const unsigned __int128 num = static_cast<unsigned __int128>(2) * t * span + tau - 1;
    const auto removed = static_cast<std::uint64_t>(num / (2 * static_cast<unsigned __int128>(tau)));
    std::uint64_t n_t = n0 - removed;
    if (n_t >= prev && prev > target) n_t = prev - 1;
    n_t = std::max(n_t, target);
    if (t == tau) n_t = target;
    sizes.push_back(n_t);
    prev = n_t;
  }
  return sizes;
}

std::vector<std::size_t> lowest_to_remove(std::span<const double> scores,
                                          std::span<const std::uint64_t> original, std::size_t count) {
  std::vector<std::size_t> pos(scores.size());
  std::iota(pos.begin(), pos.end(), std::size_t{0});
  auto removal_first = [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] < scores[b];
    return original[a] > original[b];
  };
  if (count < pos.size()) {
    std::nth_element(pos.begin(), pos.begin() + static_cast<std::ptrdiff_t>(count), pos.end(), removal_first);
  }
  pos.resize(std::min(count, pos.size()));
  std::sort(pos.begin(), pos.end(), removal_first);
  return pos;
}

SelectionResult two_stage_filter(const PairedView& pairs, const ClipKeep& clip_keep,
                                 std::uint64_t vas_target, const MomentMatrix& prior,
                                 unsigned workers) {
  const auto& vision = pairs.vision();
  if (prior.d != vision.d) {
    throw Error(Errc::dim_mismatch, "prior d=" + std::to_string(prior.d) + ", embeddings d=" +
                                        std::to_string(vision.d));
  }
  if (vas_target == 0) throw Error(Errc::invalid_argument, "vas_target must be >= 1");
  const ScoreVector clip = clip_scores(pairs, workers);

  SelectionResult stage1;
  if (const auto* frac = std::get_if<ClipKeepFraction>(&clip_keep)) {
    if (!(frac->fraction > 0.0 && frac->fraction <= 1.0)) {
      throw Error(Errc::invalid_argument, "clip keep fraction must lie in (0, 1]");
    }
    const auto k = std::clamp<std::uint64_t>(
        static_cast<std::uint64_t>(std::llround(frac->fraction * static_cast<double>(clip.size()))), 1,
        clip.size());
    stage1 = select_top_k(clip, k);
  } else {
    stage1 = select_by_threshold(clip, std::get<ClipKeepThreshold>(clip_keep).min_score);
  }
  stage1.stages.back().name = "clip_filter";
  if (stage1.kept.empty()) throw Error(Errc::empty_stage, "CLIP stage kept no samples");
  if (vas_target > stage1.kept.size()) {
    throw Error(Errc::target_exceeds_stage1, std::to_string(vas_target) + " > " +
                                                 std::to_string(stage1.kept.size()));
  }

  ScoreVector vas;
  vas.kind = ScoreKind::vas;
  vas.source_n = stage1.kept.size();
  vas.scores = quadratic_forms(vision, vision, prior.entries, stage1.kept, workers);
  const SelectionResult local = select_top_k(vas, vas_target);

  SelectionResult out;
  out.target_n = vas_target;
  out.stages = stage1.stages;
  out.kept.reserve(local.kept.size());
  for (auto p : local.kept) out.kept.push_back(stage1.kept[p]);
  StageRecord rec = local.stages.back();
  rec.name = "vas_filter";
  out.stages.push_back(rec);
  return out;
}

VasDResult vas_d(const EmbeddingMatrix& vision, const SelectionResult& input_set,
                 std::uint64_t target_n, std::uint64_t tau, unsigned workers) {
  if (tau == 0) throw Error(Errc::tau_zero, "");
  const std::uint64_t n0 = input_set.kept.size();
  if (target_n > n0) {
    throw Error(Errc::target_exceeds_input, std::to_string(target_n) + " > " + std::to_string(n0));
  }
  if (target_n == 0) throw Error(Errc::invalid_argument, "target must be >= 1");
  for (auto r : input_set.kept) {
    if (r >= vision.n) throw Error(Errc::invalid_argument, "input set index out of range");
  }
  const auto schedule = greedy_schedule(n0, target_n, tau);

  std::vector<std::uint64_t> current = input_set.kept;
  Eigen::MatrixXd moment = moment_sum(vision, vision, current, workers);
  moment = (0.5 * (moment + moment.transpose())).eval();

  VasDResult result;
  result.trace.tau = tau;
  for (std::uint64_t t = 1; t <= tau; ++t) {
    const std::uint64_t n_t = schedule[t - 1];
    const std::uint64_t removed = current.size() - n_t;
    if (removed > 0) {
      const auto scores = quadratic_forms(vision, vision, moment, current, workers);
      const auto drop = lowest_to_remove(scores, current, removed);
      std::vector<char> dropped(current.size(), 0);
      std::vector<std::uint64_t> removed_rows;
      removed_rows.reserve(drop.size());
      for (auto p : drop) {
        dropped[p] = 1;
        removed_rows.push_back(current[p]);
      }
      std::vector<std::uint64_t> next;
      next.reserve(n_t);
      for (std::size_t p = 0; p < current.size(); ++p) {
        if (!dropped[p]) next.push_back(current[p]);
      }
      current = std::move(next);
      if (t % kMomentRefreshRounds == 0) {
        moment = moment_sum(vision, vision, current, workers);
      } else {
        std::sort(removed_rows.begin(), removed_rows.end());
        moment -= moment_sum(vision, vision, removed_rows, workers);
      }
      moment = (0.5 * (moment + moment.transpose())).eval();
    }
    result.trace.steps.push_back({t, n_t, removed, moment.squaredNorm()});
  }

  result.selection.kept = std::move(current);
  result.selection.target_n = target_n;
  result.selection.stages = input_set.stages;
  result.selection.stages.push_back({"vas_d", n0, target_n, std::nullopt, moment.squaredNorm()});
  result.moment_sum = std::move(moment);
  return result;
}

std::vector<std::uint64_t> remap_to_ids(const SelectionResult& result, const EmbeddingMatrix& m) {
  if (!m.ids) throw Error(Errc::missing_ids, "matrix carries no ids");
  std::vector<std::uint64_t> out;
  out.reserve(result.kept.size());
  for (auto i : result.kept) {
    if (i >= m.ids->size()) throw Error(Errc::invalid_argument, "index out of range");
    out.push_back((*m.ids)[i]);
  }
  return out;
}

void write_selection(const SelectionResult& r, const std::filesystem::path& path,
                     const std::vector<std::uint64_t>* ids) {
  AtomicFile out(path);
  if (ids) {
    for (auto id : *ids) out.stream() << id << '\n';
  } else {
    for (auto i : r.kept) out.stream() << i << '\n';
  }
  out.commit();
}

SelectionResult read_selection(const std::filesystem::path& path, std::uint64_t n) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::io_failure, "cannot open " + path.string());
  SelectionResult r;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::uint64_t v = 0;
    auto [ptr, ec] = std::from_chars(line.data(), line.data() + line.size(), v);
    if (ec != std::errc{} || ptr != line.data() + line.size()) {
      throw Error(Errc::parse_error, "bad index '" + line + "' in " + path.string());
    }
    if (v >= n) throw Error(Errc::invalid_argument, "index " + line + " out of range");
    r.kept.push_back(v);
  }
  std::sort(r.kept.begin(), r.kept.end());
  r.kept.erase(std::unique(r.kept.begin(), r.kept.end()), r.kept.end());
  if (r.kept.empty()) throw Error(Errc::empty_stage, "input set " + path.string() + " is empty");
  r.stages.push_back({"input_set", n, r.kept.size(), std::nullopt, std::nullopt});
  return r;
}

void write_stages_jsonl(const SelectionResult& r, const std::filesystem::path& path) {
  AtomicFile out(path);
  for (const auto& s : r.stages) {
    nlohmann::ordered_json j;
    j["name"] = s.name;
    j["input_n"] = s.input_n;
    j["output_n"] = s.output_n;
    j["threshold_used"] = s.threshold_used ? nlohmann::ordered_json(*s.threshold_used) : nullptr;
    j["objective_value"] = s.objective_value ? nlohmann::ordered_json(*s.objective_value) : nullptr;
    out.stream() << j.dump() << '\n';
  }
  out.commit();
}

void write_trace_csv(const VasDTrace& trace, const std::filesystem::path& path) {
  AtomicFile out(path);
  out.stream() << "t,N_t,removed,tr_sigma_sq\n";
  for (const auto& s : trace.steps) {
    out.stream() << s.t << ',' << s.n_t << ',' << s.removed << ',' << format_double(s.tr_sigma_sq) << '\n';
  }
  out.commit();
}

}  // namespace vas
