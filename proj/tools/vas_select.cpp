// vas-select: command-line front end for scoring, filtering and the
// latent-model simulator. Exit codes: 0 ok, 1 I/O, 2 validation, 3 numerical.

#include <chrono>
#include <cmath>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "vas/embstore.hpp"
#include "vas/error.hpp"
#include "vas/io_util.hpp"
#include "vas/optdesign.hpp"
#include "vas/parallel.hpp"
#include "vas/scoring.hpp"
#include "vas/selection.hpp"
#include "vas/theorysim.hpp"

#ifndef VAS_VERSION
#define VAS_VERSION "0.0.0"
#endif

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

// Collects what goes into "<out>.manifest.json".
struct Run {
  std::string subcommand;
  CLI::App* app = nullptr;
  std::vector<fs::path> inputs;
  ordered_json resolved = ordered_json::object();
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

  void input(const fs::path& p) {
    inputs.push_back(p);
    const fs::path ids = vas::id_sidecar_path(p);
    if (fs::exists(ids)) inputs.push_back(ids);
  }

  void write_manifest(const fs::path& out) const {
    ordered_json j;
    j["subcommand"] = subcommand;
    j["version"] = VAS_VERSION;
    ordered_json params = ordered_json::object();
    for (const CLI::Option* opt : app->get_options()) {
      if (opt == app->get_help_ptr()) continue;
      const std::string name = opt->get_name(false, true);
      std::string value;
      if (opt->count() > 0) {
        const auto& res = opt->results();
        for (std::size_t i = 0; i < res.size(); ++i) value += (i ? "," : "") + res[i];
        if (opt->get_type_size() == 0 && value.empty()) value = "true";
      } else {
        value = opt->get_default_str();
      }
      params[name] = value;
    }
    j["params"] = params;
    j["resolved"] = resolved;
    ordered_json hashes = ordered_json::object();
    for (const auto& p : inputs) hashes[p.string()] = vas::to_hex(vas::hash_file(p));
    j["inputs"] = hashes;
    j["duration_ms"] = std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - start)
                           .count();
    vas::AtomicFile f(fs::path(out.string() + ".manifest.json"));
    f.stream() << j.dump(2) << '\n';
    f.commit();
  }
};

fs::path derived(const fs::path& out, const std::string& suffix) {
  fs::path p = out;
  p.replace_extension();
  return fs::path(p.string() + suffix);
}

vas::EmbeddingMatrix load(Run& run, const fs::path& p, bool normalized, vas::Modality csv_modality) {
  run.input(p);
  vas::LoadOptions opts;
  opts.expect_normalized = normalized;
  opts.csv_modality = csv_modality;
  return vas::load_embeddings(p, opts);
}

// --clip-keep / --vas-keep: (0, 1] is a fraction of `n`, anything larger an absolute count.
std::uint64_t keep_count(double value, std::uint64_t n, const char* flag) {
  if (!(value > 0.0) || !std::isfinite(value)) {
    throw vas::Error(vas::Errc::invalid_argument, std::string(flag) + " must be > 0");
  }
  if (value <= 1.0) return static_cast<std::uint64_t>(std::llround(value * static_cast<double>(n)));
  if (value != std::floor(value)) {
    throw vas::Error(vas::Errc::invalid_argument, std::string(flag) + " above 1 must be an integer count");
  }
  return static_cast<std::uint64_t>(value);
}

std::vector<double> parse_list(const std::string& text, const char* flag) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw vas::Error(vas::Errc::parse_error, std::string(flag) + ": bad number '" + item + "'");
    }
  }
  return out;
}

vas::MomentMatrix resolve_prior(Run& run, const std::string& prior, const std::string& prior_from,
                                const std::string& prior_from_text, unsigned threads) {
  if (!prior.empty()) {
    run.input(prior);
    return vas::load_moment(prior);
  }
  const auto proxy = load(run, prior_from, false, vas::Modality::vision);
  if (prior_from_text.empty()) return vas::second_moment(proxy, nullptr, threads);
  const auto proxy_l = load(run, prior_from_text, false, vas::Modality::language);
  return vas::second_moment(proxy, &proxy_l, threads);
}

vas::SelectionResult resolve_input_set(Run& run, const std::string& path, std::uint64_t n) {
  if (path.empty()) return vas::SelectionResult::all(n);
  run.input(path);
  return vas::read_selection(path, n);
}

struct Common {
  unsigned threads = vas::default_workers();
  std::string out;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--threads", c.threads, "Worker threads; results do not depend on it")
      ->check(CLI::Range(1u, 4096u));
  sub->add_option("--out", c.out, "Output file")->required();
}

vas::sim::SynthConfig sim_config(std::uint32_t r, std::uint32_t d, std::uint64_t n_train, std::uint64_t n_test,
                                 const std::string& train_diag, const std::string& test_diag, double noise,
                                 double rho, std::uint64_t seed) {
  vas::sim::SynthConfig cfg;
  cfg.r = r;
  cfg.d = d;
  cfg.n_train = n_train;
  cfg.n_test = n_test;
  cfg.noise_std = noise;
  cfg.rho = rho;
  cfg.seed = seed;
  auto diag = [r](const std::string& text, const char* flag) {
    if (text.empty()) return std::vector<double>(r, 0.8 / r);
    return parse_list(text, flag);
  };
  cfg.sigma_train_diag = diag(train_diag, "--sigma-train");
  cfg.sigma_test_diag = diag(test_diag, "--sigma-test");
  cfg.validate();
  return cfg;
}

int exit_code(vas::ErrorClass c) {
  switch (c) {
    case vas::ErrorClass::io: return 1;
    case vas::ErrorClass::validation: return 2;
    case vas::ErrorClass::numerical: return 3;
  }
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Variance-alignment data selection for paired image/text embeddings", "vas-select"};
  app.set_version_flag("--version", VAS_VERSION);
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();
  Run run;

  // clipscore
  Common clip_c;
  std::string clip_image, clip_text;
  auto* clip = app.add_subcommand("clipscore", "Per-pair CLIP score <image_i, text_i> as CSV (index,id,score)");
  clip->add_option("--image", clip_image, "Image embeddings (VEMB or .csv)")->required();
  clip->add_option("--text", clip_text, "Text embeddings, row-aligned with --image")->required();
  add_common(clip, clip_c);
  clip->callback([&] {
    auto v = load(run, clip_image, true, vas::Modality::vision);
    auto l = load(run, clip_text, true, vas::Modality::language);
    const auto pairs = vas::align_pairs(v, l);
    const auto s = vas::clip_scores(pairs, clip_c.threads);
    vas::write_scores_csv(s, v.ids, clip_c.out);
    run.resolved["n"] = v.n;
    run.write_manifest(clip_c.out);
  });

  // vas
  Common vas_c;
  std::string vas_image, vas_text, vas_prior, vas_prior_from, vas_prior_from_text, vas_save_prior;
  bool vas_cross = false;
  auto* vas_cmd = app.add_subcommand("vas", "Variance alignment scores f_v^T Sigma f_{v|l} against a prior moment");
  vas_cmd->add_option("--image", vas_image, "Image embeddings")->required();
  vas_cmd->add_option("--text", vas_text, "Text embeddings (required with --cross)");
  auto* p1 = vas_cmd->add_option("--prior", vas_prior, "Precomputed VMOM moment file");
  auto* p2 = vas_cmd->add_option("--prior-from", vas_prior_from,
                                 "Proxy embeddings; the prior is their uncentered second moment");
  p1->excludes(p2);
  vas_cmd->add_option("--prior-from-text", vas_prior_from_text,
                      "Proxy text embeddings paired with --prior-from; builds a cross moment")
      ->needs(p2);
  vas_cmd->add_flag("--cross", vas_cross, "Score image against text (VAS(v, l)) instead of VAS(v, v)");
  vas_cmd->add_option("--save-prior", vas_save_prior, "Also write the prior used as a VMOM file");
  add_common(vas_cmd, vas_c);
  vas_cmd->callback([&] {
    if (vas_prior.empty() && vas_prior_from.empty()) {
      throw vas::Error(vas::Errc::invalid_argument, "one of --prior or --prior-from is required");
    }
    if (vas_cross && vas_text.empty()) throw vas::Error(vas::Errc::invalid_argument, "--cross needs --text");
    const auto v = load(run, vas_image, false, vas::Modality::vision);
    const auto prior = resolve_prior(run, vas_prior, vas_prior_from, vas_prior_from_text, vas_c.threads);
    vas::ScoreVector s;
    if (vas_cross) {
      const auto l = load(run, vas_text, false, vas::Modality::language);
      vas::align_pairs(v, l);
      s = vas::vas_scores(v, &l, prior, vas_c.threads);
    } else {
      s = vas::vas_scores(v, nullptr, prior, vas_c.threads);
    }
    vas::write_scores_csv(s, v.ids, vas_c.out);
    if (!vas_save_prior.empty()) vas::save_moment(prior, vas_save_prior);
    run.resolved["n"] = v.n;
    run.resolved["d"] = v.d;
    run.resolved["prior_count"] = prior.count;
    run.write_manifest(vas_c.out);
  });

  // pipeline
  Common pipe_c;
  std::string pipe_image, pipe_text, pipe_prior, pipe_prior_from, pipe_stages;
  double clip_keep = 0.5, vas_keep = 0.3;
  std::optional<double> clip_threshold;
  bool emit_ids = false;
  auto* pipe = app.add_subcommand("pipeline", "CLIP-score filter followed by VAS top-k; writes kept row indices");
  pipe->add_option("--image", pipe_image, "Image embeddings")->required();
  pipe->add_option("--text", pipe_text, "Text embeddings")->required();
  auto* pp1 = pipe->add_option("--prior", pipe_prior, "Precomputed VMOM moment file");
  auto* pp2 = pipe->add_option("--prior-from", pipe_prior_from, "Proxy embeddings for the prior moment");
  pp1->excludes(pp2);
  auto* ck = pipe->add_option("--clip-keep", clip_keep,
                              "CLIP stage keep: fraction of n if in (0,1], else an absolute count");
  pipe->add_option("--clip-threshold", clip_threshold, "Keep CLIP score >= this instead of --clip-keep")
      ->excludes(ck);
  pipe->add_option("--vas-keep", vas_keep, "VAS stage keep: fraction of the ORIGINAL n if in (0,1], else a count");
  pipe->add_option("--stages", pipe_stages, "Stage log JSONL (default <out>.stages.jsonl)");
  pipe->add_flag("--emit-ids", emit_ids, "Write sample ids instead of row indices (needs an .ids sidecar)");
  add_common(pipe, pipe_c);
  pipe->callback([&] {
    if (pipe_prior.empty() && pipe_prior_from.empty()) {
      throw vas::Error(vas::Errc::invalid_argument, "one of --prior or --prior-from is required");
    }
    auto v = load(run, pipe_image, true, vas::Modality::vision);
    auto l = load(run, pipe_text, true, vas::Modality::language);
    const auto pairs = vas::align_pairs(v, l);
    const auto prior = resolve_prior(run, pipe_prior, pipe_prior_from, "", pipe_c.threads);
    vas::ClipKeep keep = vas::ClipKeepFraction{};
    if (clip_threshold) {
      keep = vas::ClipKeepThreshold{*clip_threshold};
    } else {
      const auto k = keep_count(clip_keep, v.n, "--clip-keep");
      keep = vas::ClipKeepFraction{static_cast<double>(k) / static_cast<double>(v.n)};
    }
    const auto target = keep_count(vas_keep, v.n, "--vas-keep");
    const auto r = vas::two_stage_filter(pairs, keep, target, prior, pipe_c.threads);
    if (emit_ids) {
      const auto ids = vas::remap_to_ids(r, v);
      vas::write_selection(r, pipe_c.out, &ids);
    } else {
      vas::write_selection(r, pipe_c.out);
    }
    const fs::path stages = pipe_stages.empty() ? derived(pipe_c.out, ".stages.jsonl") : fs::path(pipe_stages);
    vas::write_stages_jsonl(r, stages);
    run.resolved["n"] = v.n;
    run.resolved["vas_target"] = target;
    run.resolved["stages"] = stages.string();
    run.write_manifest(pipe_c.out);
  });

  // vasd
  Common vasd_c;
  std::string vasd_image, vasd_input, vasd_trace;
  std::uint64_t vasd_target = 0, vasd_tau = vas::kDefaultTau;
  auto* vasd = app.add_subcommand("vasd", "VAS-D greedy selection against the surviving set's own moment");
  vasd->add_option("--image", vasd_image, "Image embeddings")->required();
  vasd->add_option("--input-set", vasd_input, "Row indices to start from (default: all rows)");
  vasd->add_option("--target", vasd_target, "Number of samples to keep")->required();
  vasd->add_option("--tau", vasd_tau, "Greedy rounds");
  vasd->add_option("--trace", vasd_trace, "Per-round CSV (default <out>.trace.csv)");
  add_common(vasd, vasd_c);
  vasd->callback([&] {
    const auto v = load(run, vasd_image, false, vas::Modality::vision);
    const auto input = resolve_input_set(run, vasd_input, v.n);
    const auto r = vas::vas_d(v, input, vasd_target, vasd_tau, vasd_c.threads);
    vas::write_selection(r.selection, vasd_c.out);
    const fs::path trace = vasd_trace.empty() ? derived(vasd_c.out, ".trace.csv") : fs::path(vasd_trace);
    vas::write_trace_csv(r.trace, trace);
    run.resolved["input_n"] = input.kept.size();
    run.resolved["trace"] = trace.string();
    run.write_manifest(vasd_c.out);
  });

  // optdesign
  Common od_c;
  std::string od_mode = "a", od_image, od_prior, od_prior_from, od_input, od_rounds, od_lambda = "auto";
  std::uint64_t od_target = 0, od_tau = vas::kDefaultTau, od_seed = 0;
  auto* od = app.add_subcommand("optdesign", "Greedy A-/V-optimal design baselines, or a seeded random subset");
  od->add_option("--mode", od_mode, "a | v | random")->check(CLI::IsMember({"a", "v", "random"}));
  od->add_option("--image", od_image, "Image embeddings")->required();
  auto* op1 = od->add_option("--prior", od_prior, "VMOM prior for V-optimality");
  auto* op2 = od->add_option("--prior-from", od_prior_from, "Proxy embeddings for the V-optimality prior");
  op1->excludes(op2);
  od->add_option("--input-set", od_input, "Row indices to start from (default: all rows)");
  od->add_option("--target", od_target, "Number of samples to keep")->required();
  od->add_option("--tau", od_tau, "Greedy rounds");
  od->add_option("--lambda", od_lambda, "Ridge; 'auto' = 1e-6 * mean squared row norm");
  od->add_option("--seed", od_seed, "Seed for --mode random");
  od->add_option("--rounds", od_rounds, "Per-round CSV (default <out>.rounds.csv; not written for random)");
  add_common(od, od_c);
  od->callback([&] {
    const auto v = load(run, od_image, false, vas::Modality::vision);
    const auto input = resolve_input_set(run, od_input, v.n);
    if (od_mode == "random") {
      auto local = vas::random_select(input.kept.size(), od_target, od_seed);
      vas::SelectionResult r;
      r.target_n = od_target;
      r.stages = input.stages;
      r.stages.push_back(local.stages.back());
      for (auto p : local.kept) r.kept.push_back(input.kept[p]);
      vas::write_selection(r, od_c.out);
      run.resolved["rng"] = vas::CounterRng::kName;
      run.write_manifest(od_c.out);
      return;
    }
    double lambda = 0.0;
    if (od_lambda == "auto") {
      lambda = vas::default_ridge(v, input);
    } else {
      const auto vals = parse_list(od_lambda, "--lambda");
      if (vals.size() != 1) throw vas::Error(vas::Errc::parse_error, "--lambda takes one value");
      lambda = vals[0];
    }
    vas::DesignResult r;
    if (od_mode == "a") {
      r = vas::a_optimal_select(v, input, od_target, od_tau, lambda, od_c.threads);
    } else {
      if (od_prior.empty() && od_prior_from.empty()) {
        throw vas::Error(vas::Errc::invalid_argument, "--mode v needs --prior or --prior-from");
      }
      const auto prior = resolve_prior(run, od_prior, od_prior_from, "", od_c.threads);
      r = vas::v_optimal_select(v, input, od_target, od_tau, lambda, prior, od_c.threads);
    }
    vas::write_selection(r.selection, od_c.out);
    const fs::path rounds = od_rounds.empty() ? derived(od_c.out, ".rounds.csv") : fs::path(od_rounds);
    vas::write_design_rounds_csv(r, rounds);
    run.resolved["lambda"] = r.lambda;
    run.resolved["optimizer"] = "greedy_backward";
    run.resolved["objective_scaling"] = "sum";
    run.resolved["rounds"] = rounds.string();
    run.write_manifest(od_c.out);
  });

  // sim
  Common sim_c;
  std::string sim_task, sim_train_diag, sim_test_diag, sim_strategies = "random,vas_prior,vas_d,a_opt,v_opt,clip_top";
  std::string sim_summary, sim_save_world, sim_mode = "vision_only";
  std::uint32_t sim_r = 4, sim_d = 16, sim_classes = 4;
  std::uint64_t sim_n_train = 200, sim_n_test = 2000, sim_seed = 0, sim_trials = 20, sim_pool = 12, sim_k = 6,
                sim_budget = 40, sim_tau = 16, sim_worst = 1000, sim_cal_seeds = 20;
  double sim_noise = 0.0, sim_rho = 1.0;
  std::optional<double> sim_envelope;
  auto* sim = app.add_subcommand("sim", "Linear latent-model experiments: verify-lemma1 | faceoff | bound-report");
  sim->add_option("task", sim_task, "verify-lemma1 | faceoff | bound-report")
      ->required()
      ->check(CLI::IsMember({"verify-lemma1", "faceoff", "bound-report"}));
  sim->add_option("--r", sim_r, "Latent dimension");
  sim->add_option("--d", sim_d, "Observation dimension");
  sim->add_option("--n-train", sim_n_train, "Train split size (faceoff, bound-report)");
  sim->add_option("--n-test", sim_n_test, "Test split size");
  sim->add_option("--sigma-train", sim_train_diag, "Comma list of r cross-moment diagonal entries (default 0.8/r each)");
  sim->add_option("--sigma-test", sim_test_diag, "Comma list for the test distribution (default 0.8/r each)");
  sim->add_option("--noise-std", sim_noise, "Observation noise standard deviation");
  sim->add_option("--rho", sim_rho, "Regularizer constant");
  sim->add_option("--seed", sim_seed, "Base seed; trial t uses derive_seed(seed, t)");
  sim->add_option("--trials", sim_trials, "Number of seeded trials");
  sim->add_option("--pool", sim_pool, "Pool size for verify-lemma1 (exhaustive best subset)");
  sim->add_option("--k", sim_k, "Subset size for verify-lemma1");
  sim->add_option("--budget", sim_budget, "Subset size for faceoff and bound-report");
  sim->add_option("--strategies", sim_strategies, "Comma list for faceoff");
  sim->add_option("--tau", sim_tau, "Greedy rounds for vas_d / a_opt / v_opt");
  sim->add_option("--classes", sim_classes, "Classes in the faceoff classification task");
  sim->add_option("--mode", sim_mode, "Bound branch: vision_only | vision_language")
      ->check(CLI::IsMember({"vision_only", "vision_language"}));
  sim->add_option("--envelope-constant", sim_envelope,
                  "Noise envelope constant (default: calibrated over --calibration-seeds worlds)");
  sim->add_option("--calibration-seeds", sim_cal_seeds, "Worlds used to calibrate the envelope constant");
  sim->add_option("--worst-case-samples", sim_worst, "Random subsets for the sampled worst-case teacher error");
  sim->add_option("--summary", sim_summary, "faceoff summary CSV (default <out>.summary.csv)");
  sim->add_option("--save-world", sim_save_world, "Write trial-0 world latents and observations as VEMB files here");
  add_common(sim, sim_c);
  sim->callback([&] {
    auto cfg = sim_config(sim_r, sim_d, sim_n_train, sim_n_test, sim_train_diag, sim_test_diag, sim_noise, sim_rho,
                          sim_seed);
    if (!sim_save_world.empty()) {
      auto c0 = cfg;
      c0.seed = vas::derive_seed(cfg.seed, 0);
      vas::sim::save_world(vas::sim::gen_world(c0), sim_save_world);
    }
    {
      auto c0 = cfg;
      c0.seed = vas::derive_seed(cfg.seed, 0);
      const auto w = vas::sim::gen_world(c0);
      run.resolved["latent_mixture"] = {
          {"method", "shared/independent Gaussian mix, row-normalized, calibrated"},
          {"draws", vas::sim::LatentSampler::kCalibrationDraws},
          {"train_calibration_error", w.train_sampler.calibration_error},
          {"test_calibration_error", w.test_sampler.calibration_error}};
    }
    if (sim_task == "verify-lemma1") {
      const auto rows = vas::sim::verify_lemma1(cfg, sim_pool, sim_k, sim_trials);
      vas::sim::write_lemma1_csv(rows, sim_c.out);
    } else if (sim_task == "faceoff") {
      std::vector<vas::sim::Strategy> strategies;
      std::stringstream ss(sim_strategies);
      std::string item;
      while (std::getline(ss, item, ',')) {
        const auto s = vas::sim::parse_strategy(item);
        if (!s) throw vas::Error(vas::Errc::invalid_argument, "unknown strategy '" + item + "'");
        strategies.push_back(*s);
      }
      vas::sim::FaceoffOptions opts;
      opts.tau = sim_tau;
      opts.classes = sim_classes;
      const auto table = vas::sim::strategy_faceoff(cfg, sim_budget, strategies, sim_trials, opts);
      vas::sim::write_faceoff_csv(table, sim_c.out);
      const fs::path summary = sim_summary.empty() ? derived(sim_c.out, ".summary.csv") : fs::path(sim_summary);
      vas::sim::write_faceoff_summary_csv(table, summary);
      run.resolved["summary"] = summary.string();
    } else {
      vas::sim::BoundOptions opts;
      opts.mode = sim_mode == "vision_only" ? vas::sim::BoundMode::vision_only : vas::sim::BoundMode::vision_language;
      opts.envelope_constant =
          sim_envelope ? *sim_envelope : vas::sim::calibrate_envelope_constant(cfg, sim_budget, sim_cal_seeds);
      run.resolved["envelope_constant"] = opts.envelope_constant;
      run.resolved["worst_case"] = "sampled over --worst-case-samples random subsets, not exhaustive";
      vas::AtomicFile f(sim_c.out);
      f.stream() << "trial,subset_size,prior_gap,subset_gap,alignment,eps_v,eps_l,eps_cross,worst_eps_v,"
                    "worst_eps_l,worst_eps_cross,delta_measured,rho_delta,term_sum,envelope,rhs,holds\n";
      for (std::uint64_t t = 0; t < sim_trials; ++t) {
        auto c = cfg;
        c.seed = vas::derive_seed(cfg.seed, t);
        const auto w = vas::sim::gen_world(c);
        const Eigen::MatrixXd proxy = vas::sim::teacher_vision_moment(w.test, w.g_star_v);
        const auto subset = vas::sim::select_with_strategy(w, vas::sim::Strategy::vas_prior, sim_budget, sim_tau, 0);
        std::vector<std::uint64_t> pool(w.train.size());
        std::iota(pool.begin(), pool.end(), std::uint64_t{0});
        const auto rep = vas::sim::bound_report(w, subset, pool, proxy, w.g_star_v, w.g_star_l, c.rho, opts);
        const auto worst = vas::sim::sampled_worst_teacher_error(w, w.g_star_v, w.g_star_l, sim_budget, sim_worst,
                                                                 vas::derive_seed(c.seed, 0x3c));
        using vas::format_double;
        f.stream() << t << ',' << subset.size() << ',' << format_double(rep.prior_gap) << ','
                   << format_double(rep.subset_gap) << ',' << format_double(rep.alignment) << ','
                   << format_double(rep.teacher.eps_v) << ',' << format_double(rep.teacher.eps_l) << ','
                   << format_double(rep.teacher.eps_cross) << ',' << format_double(worst.eps_v) << ','
                   << format_double(worst.eps_l) << ',' << format_double(worst.eps_cross) << ','
                   << format_double(rep.delta_measured) << ',' << format_double(rep.rho_delta) << ','
                   << format_double(rep.term_sum) << ',' << format_double(rep.envelope) << ','
                   << format_double(rep.rhs) << ',' << (rep.holds ? 1 : 0) << '\n';
      }
      f.commit();
    }
    run.write_manifest(sim_c.out);
  });

  // stats
  Common st_c;
  std::string st_a, st_b, st_summary;
  std::uint32_t st_bins = 50;
  auto* st = app.add_subcommand("stats", "Joint histogram and quantile summary of two score files");
  st->add_option("--scores-a", st_a, "Score CSV (x axis)")->required();
  st->add_option("--scores-b", st_b, "Score CSV (y axis), same length")->required();
  st->add_option("--bins", st_bins, "Bins per axis")->check(CLI::Range(1u, 100000u));
  st->add_option("--summary", st_summary, "Per-axis quantile CSV (default <out>.summary.csv)");
  add_common(st, st_c);
  st->callback([&] {
    run.input(st_a);
    run.input(st_b);
    const auto a = vas::read_scores_csv(st_a);
    const auto b = vas::read_scores_csv(st_b);
    const auto h = vas::score_stats(a, b, st_bins);
    vas::write_histogram_csv(h, st_c.out);
    const fs::path summary = st_summary.empty() ? derived(st_c.out, ".summary.csv") : fs::path(st_summary);
    vas::write_axis_summary_csv(h, summary);
    run.resolved["summary"] = summary.string();
    run.write_manifest(st_c.out);
  });

  for (CLI::App* sub : app.get_subcommands({})) {
    sub->preparse_callback([&run, sub](std::size_t) {
      run.subcommand = sub->get_name();
      run.app = sub;
    });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  } catch (const vas::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code(vas::error_class(e.code()));
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: IoFailure: " << e.what() << '\n';
    return 1;
  } catch (const std::bad_alloc&) {
    std::cerr << "error: OutOfMemory\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
