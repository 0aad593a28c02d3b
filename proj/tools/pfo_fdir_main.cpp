#include "pfo/bench.hpp"
#include "pfo/certificates.hpp"
#include "pfo/inference.hpp"
#include "pfo/io.hpp"
#include "pfo/recovery.hpp"
#include "pfo/spacecraft.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

using namespace pfo;
using nlohmann::json;

namespace {

bench::ExperimentConfig load_config(const std::string& config_path, std::uint64_t seed_override,
                                    bool seed_set, const std::string& out_dir,
                                    const std::string& checkpoint) {
  bench::ExperimentConfig cfg;
  if (!config_path.empty()) cfg = bench::ExperimentConfig::from_json_file(config_path);
  if (seed_set) cfg.seed = seed_override;
  if (!out_dir.empty()) cfg.out_dir = out_dir;
  if (!checkpoint.empty()) cfg.checkpoint_path = checkpoint;
  if (cfg.checkpoint_path.empty())
    cfg.checkpoint_path =
        (std::filesystem::path(cfg.out_dir) / "checkpoint.json").string();
  std::filesystem::create_directories(cfg.out_dir);
  return cfg;
}

std::string opath(const bench::ExperimentConfig& cfg, const std::string& name) {
  return (std::filesystem::path(cfg.out_dir) / name).string();
}

json vec_json(const Vec& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

int cmd_simulate(const bench::ExperimentConfig& cfg) {
  SpacecraftParams params;
  params.dt = cfg.dt;
  SystemModel model = build_spacecraft(params);
  auto library = bench::default_library();
  auto dataset = bench::spacecraft_dataset(cfg, library);
  save_dataset(opath(cfg, "dataset.jsonl"), dataset, model.state_dim, model.control_dim,
               model.fault_dim, cfg.seed);

  // noise-free nominal trajectory and one faulted SDE rollout for reference
  ClosedLoopField nominal{model, FaultProfile::nominal(4), nullptr};
  auto f = nominal.as_field();
  Vec x = spacecraft_initial_state(params);
  std::ostringstream csv;
  csv << "t";
  for (int i = 0; i < model.state_dim; ++i) csv << ",x" << i;
  csv << "\n";
  for (int k = 0; k <= cfg.horizon_steps; ++k) {
    csv << k * cfg.dt;
    for (int i = 0; i < model.state_dim; ++i) csv << "," << x[i];
    csv << "\n";
    if (k < cfg.horizon_steps) x = flow_map(f, x, k * cfg.dt, (k + 1) * cfg.dt, 1);
  }
  write_text_file(opath(cfg, "nominal_trajectory.csv"), csv.str());

  // measurement log under alpha_star for `infer`
  Mat R = cfg.meas_noise * cfg.meas_noise * Mat::Identity(model.obs_dim, model.obs_dim);
  Rng proc = Rng::stream(cfg.seed, 10), meas = Rng::stream(cfg.seed, 11);
  Eigen::LLT<Mat> llt(R);
  ClosedLoopField faulted{model, FaultProfile{cfg.alpha_star, std::nullopt}, nullptr};
  Vec xf = spacecraft_initial_state(params);
  std::vector<std::pair<double, Vec>> history;
  history.emplace_back(0.0, model.observation(xf) + Mat(llt.matrixL()) * meas.normal_vec(10));
  for (int k = 0; k < cfg.horizon_steps; ++k) {
    xf = step_sde(faulted, xf, k * cfg.dt, cfg.dt, proc);
    history.emplace_back((k + 1) * cfg.dt,
                         model.observation(xf) + Mat(llt.matrixL()) * meas.normal_vec(10));
  }
  save_measurements(opath(cfg, "measurements.jsonl"), history);

  json summary;
  summary["config_hash"] = config_hash_of(cfg.canonical_json());
  summary["seed"] = cfg.seed;
  summary["code_version"] = bench::code_version();
  summary["dataset_pairs"] = dataset.size();
  summary["library_size"] = library.size();
  write_text_file(opath(cfg, "simulate_summary.json"), summary.dump(1) + "\n");
  std::cout << "simulate: wrote " << dataset.size() << " pairs and measurement log to "
            << cfg.out_dir << "\n";
  return 0;
}

int cmd_train(const bench::ExperimentConfig& cfg) {
  Checkpoint ckpt = bench::train_spacecraft(cfg);
  const auto& hist = ckpt.history;
  double ep0 = hist.front().losses.ep, ep1 = hist.back().losses.ep;
  std::cout << "train: endpoint loss " << ep0 << " -> " << ep1 << " over "
            << hist.back().step << " steps; checkpoint at " << cfg.checkpoint_path << "\n";
  json summary;
  summary["config_hash"] = config_hash_of(cfg.canonical_json());
  summary["seed"] = cfg.seed;
  summary["code_version"] = bench::code_version();
  summary["endpoint_loss_initial"] = ep0;
  summary["endpoint_loss_final"] = ep1;
  summary["checkpoint"] = cfg.checkpoint_path;
  write_text_file(opath(cfg, "train_summary.json"), summary.dump(1) + "\n");
  return 0;
}

int cmd_infer(const bench::ExperimentConfig& cfg, const std::string& log_path) {
  SpacecraftParams params;
  params.dt = cfg.dt;
  SystemModel model = build_spacecraft(params);
  auto history = load_measurements(log_path.empty() ? opath(cfg, "measurements.jsonl") : log_path);
  if (history.size() < 2) throw ArgumentError("infer: measurement log too short");
  Mat R = cfg.meas_noise * cfg.meas_noise * Mat::Identity(model.obs_dim, model.obs_dim);

  // discrete bank over the library, true-flow prediction
  auto library = bench::default_library();
  HypothesisBank bank;
  bank.R = R;
  Rng rng(derive_seed(cfg.seed, 0xba9c));
  Rng init_rng(derive_seed(cfg.seed, 0x1b1b));
  for (const auto& fp : library) {
    Hypothesis h;
    h.fault = fp;
    Mat pts(64, model.state_dim);
    Vec y0 = history.front().second;
    for (int i = 0; i < 64; ++i)
      pts.row(i) =
          (y0 + cfg.meas_noise * init_rng.normal_vec(model.state_dim)).transpose();
    h.ensemble = ParticleEnsemble::uniform(pts, history.front().first);
    h.log_weight = 0.0;
    bank.hypotheses.push_back(std::move(h));
  }

  std::ostringstream post_csv, lik_csv;
  post_csv << "t";
  lik_csv << "t";
  for (size_t j = 0; j < library.size(); ++j) {
    post_csv << ",p" << j;
    lik_csv << ",loglik" << j;
  }
  post_csv << "\n";
  lik_csv << "\n";
  auto h_fn = [&](const Vec& x) { return model.observation(x); };
  for (size_t k = 1; k < history.size(); ++k) {
    predict_bank(bank, model, history[k - 1].first, history[k].first, {});
    Vec loglik = update_posterior(bank, history[k].second, h_fn, rng);
    Vec post = bank.posterior();
    post_csv << history[k].first;
    lik_csv << history[k].first;
    for (Eigen::Index j = 0; j < post.size(); ++j) {
      post_csv << "," << post[j];
      lik_csv << "," << loglik[j];
    }
    post_csv << "\n";
    lik_csv << "\n";
  }
  write_text_file(opath(cfg, "infer_posterior.csv"), post_csv.str());
  write_text_file(opath(cfg, "infer_likelihoods.csv"), lik_csv.str());

  // continuous MLE trace over growing history prefixes
  MleConfig mle;
  mle.starts = cfg.mle_starts;
  mle.iterations = cfg.mle_iterations;
  mle.seed = derive_seed(cfg.seed, 0x331e);
  Vec x0 = history.front().second;
  std::ostringstream what_csv;
  what_csv << "t,w0,w1,w2,w3,objective\n";
  Vec w_final;
  for (double frac : {0.25, 0.5, 0.75, 1.0}) {
    size_t k = static_cast<size_t>(frac * (static_cast<double>(history.size()) - 1));
    std::vector<std::pair<double, Vec>> prefix(history.begin(),
                                               history.begin() + static_cast<long>(k) + 1);
    ContinuousFaultEstimate est =
        fit_continuous_fault(prefix, model, x0, Vec::Zero(4), Vec::Ones(4), R, mle);
    what_csv << prefix.back().first;
    for (int d = 0; d < 4; ++d) what_csv << "," << est.w_mle[d];
    what_csv << "," << est.objective << "\n";
    w_final = est.w_mle;
  }
  write_text_file(opath(cfg, "infer_what_trace.csv"), what_csv.str());

  json summary;
  summary["config_hash"] = config_hash_of(cfg.canonical_json());
  summary["seed"] = cfg.seed;
  summary["code_version"] = bench::code_version();
  summary["w_mle"] = vec_json(w_final);
  Vec post = bank.posterior();
  int argmax = 0;
  post.maxCoeff(&argmax);
  summary["posterior_argmax"] = argmax;
  summary["posterior_max"] = post[argmax];
  write_text_file(opath(cfg, "infer_summary.json"), summary.dump(1) + "\n");
  std::cout << "infer: posterior argmax " << argmax << " (p=" << post[argmax] << "), w_mle "
            << w_final.transpose() << "\n";
  return 0;
}

int cmd_recover(const bench::ExperimentConfig& cfg, const std::string& w_hat_arg) {
  SpacecraftParams params;
  params.dt = cfg.dt;
  SystemModel model = build_spacecraft(params);
  Checkpoint ckpt = load_checkpoint(cfg.checkpoint_path);

  EpisodeConfig ecfg;
  ecfg.horizon_steps = cfg.horizon_steps;
  ecfg.dt = cfg.dt;
  ecfg.x0 = spacecraft_initial_state(params);
  ecfg.w_true = cfg.alpha_star;
  ecfg.R = cfg.meas_noise * cfg.meas_noise * Mat::Identity(model.obs_dim, model.obs_dim);
  ecfg.n_particles = std::min(cfg.n_particles, 128);
  ecfg.recovery_start_step = cfg.recovery_start_step;
  ecfg.replan_every = cfg.replan_every;
  ecfg.recovery_horizon = cfg.recovery_horizon;
  ecfg.gmm_components = cfg.gmm_components;
  ecfg.weights = cfg.ocp_weights;
  ecfg.control_limit = params.torque_limit;
  ecfg.mle.starts = std::max(2, cfg.mle_starts / 2);
  ecfg.mle.iterations = cfg.mle_iterations;
  ecfg.mle.seed = derive_seed(cfg.seed, 0x3f1e);
  ecfg.seed = derive_seed(cfg.seed, 0xe915);
  if (!w_hat_arg.empty()) {
    std::stringstream ss(w_hat_arg);
    Vec w(4);
    char comma;
    for (int i = 0; i < 4; ++i) {
      ss >> w[i];
      if (i < 3) ss >> comma;
    }
    ecfg.w_hat_override = w;  // replaces the internal fit
  }
  EpisodeLog log = run_recovery(model, ckpt.model, ecfg);

  std::ostringstream csv;
  csv << "t";
  for (int i = 0; i < model.state_dim; ++i) csv << ",x" << i;
  for (int i = 0; i < model.control_dim; ++i) csv << ",ucl" << i;
  for (int i = 0; i < model.control_dim; ++i) csv << ",urec" << i;
  csv << ",error_to_nominal\n";
  for (int k = 0; k <= cfg.horizon_steps; ++k) {
    csv << log.times[static_cast<size_t>(k)];
    Vec x = log.x_recovered.row(k).transpose();
    for (int i = 0; i < model.state_dim; ++i) csv << "," << x[i];
    Vec ucl = model.nominal_feedback(x, log.times[static_cast<size_t>(k)]);
    for (int i = 0; i < model.control_dim; ++i) csv << "," << ucl[i];
    for (int i = 0; i < model.control_dim; ++i)
      csv << "," << (k < cfg.horizon_steps ? log.u_rec(k, i) : 0.0);
    csv << "," << (log.x_recovered.row(k) - log.x_nominal.row(k)).norm() << "\n";
  }
  write_text_file(opath(cfg, "recover_trajectory.csv"), csv.str());

  // surrogate-bound diagnostics at the end of the episode
  double eps_f = 0.0, bound = 0.0;
  {
    Rng rng(derive_seed(cfg.seed, 0xb0b0));
    Mat pts(64, model.state_dim);
    Eigen::LLT<Mat> llt(ecfg.R);
    Vec x_end = log.x_recovered.row(cfg.horizon_steps - cfg.recovery_horizon).transpose();
    for (int i = 0; i < 64; ++i)
      pts.row(i) = (x_end + Mat(llt.matrixL()) * rng.normal_vec(model.state_dim)).transpose();
    ParticleEnsemble rho = ParticleEnsemble::uniform(pts);
    double t_plan = (cfg.horizon_steps - cfg.recovery_horizon) * cfg.dt;
    auto [fault_tubes, nom_tubes] = propagate_recovery_densities(
        rho, ckpt.model, log.w_hat, t_plan, cfg.recovery_horizon, cfg.dt);
    GmmConfig gcfg;
    gcfg.seed = derive_seed(cfg.seed, 0x99);
    auto [fmix, nmix] =
        matched_gmm_pair(fault_tubes.back(), nom_tubes.back(), cfg.gmm_components, gcfg);
    (void)nmix;
    eps_f = gmm_surrogate_eps(fmix, fault_tubes.back());
    std::vector<Vec> cpts;
    Vec taus(32);
    for (int i = 0; i < 32; ++i) {
      cpts.push_back(fault_tubes[static_cast<size_t>(i % fault_tubes.size())]
                         .points.row(i % rho.size())
                         .transpose());
      taus[i] = i / 31.0;
    }
    OperatorCond cond{t_plan, t_plan + cfg.recovery_horizon * cfg.dt, log.w_hat};
    ContractionCertificate cert =
        measure_certificate(ckpt.metric, ckpt.model, cpts, taus, cond, {});
    bound = surrogate_bound(cert, 0.0, eps_f);
  }

  json summary;
  summary["config_hash"] = config_hash_of(cfg.canonical_json());
  summary["seed"] = cfg.seed;
  summary["code_version"] = bench::code_version();
  summary["w_hat"] = vec_json(log.w_hat);
  summary["fault_terminal_error"] = log.fault_terminal_error;
  summary["recovered_terminal_error"] = log.recovered_terminal_error;
  summary["fault_mean_error"] = log.fault_mean_error;
  summary["recovered_mean_error"] = log.recovered_mean_error;
  summary["terminal_improvement"] = log.terminal_improvement;
  summary["mean_improvement"] = log.mean_improvement;
  summary["gmm_eps_f"] = eps_f;
  summary["surrogate_bound_at_zero_filter_gap"] = bound;
  write_text_file(opath(cfg, "recover_summary.json"), summary.dump(1) + "\n");
  std::cout << "recover: terminal improvement " << log.terminal_improvement << "x, mean "
            << log.mean_improvement << "x\n";
  return 0;
}

int cmd_certify(const bench::ExperimentConfig& cfg) {
  SpacecraftParams params;
  params.dt = cfg.dt;
  SystemModel model = build_spacecraft(params);
  Checkpoint ckpt = load_checkpoint(cfg.checkpoint_path);
  auto library = bench::default_library();

  json table = json::array();
  std::cout << "fault | alpha | alpha~ | kappa | m_lo | m_hi | eps_ctr | d_bar | delta_w\n";
  for (const auto& fp : library) {
    DatasetConfig dcfg;
    Vec x0 = spacecraft_initial_state(params);
    dcfg.initial_sampler = [x0](Rng& r) {
      return Vec(x0 + 1e-2 * r.normal_vec(static_cast<int>(x0.size())));
    };
    dcfg.trajectories_per_fault = 8;
    dcfg.steps_per_trajectory = 25;
    dcfg.dt = cfg.dt;
    dcfg.gaps = {1};
    dcfg.pairs_per_trajectory = 8;
    dcfg.seed = derive_seed(cfg.seed, 0xce57 + static_cast<std::uint64_t>(fp.label.value_or(0)));
    auto pairs = generate_dataset(model, {fp}, dcfg);

    std::vector<Vec> pts;
    Vec taus(static_cast<Eigen::Index>(std::min<size_t>(pairs.size(), 48)));
    Rng tau_rng(derive_seed(cfg.seed, 0x7a1));
    for (Eigen::Index i = 0; i < taus.size(); ++i) {
      double tau = tau_rng.uniform();
      pts.push_back((1.0 - tau) * pairs[static_cast<size_t>(i)].x_s +
                    tau * pairs[static_cast<size_t>(i)].x_t);
      taus[i] = tau;
    }
    OperatorCond cond{0.0, cfg.dt, fp.w};
    auto gap_samples = surrogate_field_gap_samples(pairs, {0.0, 0.5, 1.0}, 5);
    ContractionCertificate cert =
        measure_certificate(ckpt.metric, ckpt.model, pts, taus, cond, gap_samples);
    double dw = terminal_bias(cert);
    json row;
    row["w"] = vec_json(fp.w);
    row["alpha"] = cert.alpha;
    row["alpha_tilde"] = cert.alpha_tilde();
    row["kappa"] = cert.kappa;
    row["m_lower"] = cert.m_lower;
    row["m_upper"] = cert.m_upper;
    row["eps_ctr"] = cert.eps_ctr;
    row["d_bar"] = cert.d_bar;
    row["delta_w"] = dw;
    row["sample_count"] = cert.sample_count;
    table.push_back(row);
    std::cout << "[" << fp.w.transpose() << "] | " << cert.alpha << " | " << cert.alpha_tilde()
              << " | " << cert.kappa << " | " << cert.m_lower << " | " << cert.m_upper << " | "
              << cert.eps_ctr << " | " << cert.d_bar << " | " << dw << "\n";
  }
  json summary;
  summary["config_hash"] = config_hash_of(cfg.canonical_json());
  summary["seed"] = cfg.seed;
  summary["code_version"] = bench::code_version();
  summary["certificates"] = table;
  write_text_file(opath(cfg, "certify_summary.json"), summary.dump(1) + "\n");
  return 0;
}

int cmd_reproduce(const bench::ExperimentConfig& cfg, const std::string& experiment) {
  std::vector<std::string> names;
  if (experiment == "all")
    names = {"ood_sweep", "ood_single", "separation", "operator_gap"};
  else
    names = {experiment};
  bool all_passed = true;
  for (const auto& name : names) {
    bench::ExperimentReport rep = bench::reproduce(name, cfg);
    std::cout << (rep.passed ? "[PASS] " : "[FAIL] ") << name << "\n";
    all_passed = all_passed && rep.passed;
  }
  return all_passed ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"density-space FDIR for control-affine stochastic systems"};
  app.require_subcommand(1);

  std::string config_path, out_dir, checkpoint, log_path, experiment = "all", w_hat_arg;
  std::uint64_t seed = 0;
  bool seed_set = false;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "JSON config file");
    cmd->add_option("--seed", seed, "root seed")->each([&](const std::string&) { seed_set = true; });
    cmd->add_option("--out", out_dir, "output directory");
    cmd->add_option("--checkpoint", checkpoint, "checkpoint path");
  };

  CLI::App* simulate = app.add_subcommand("simulate", "generate datasets and measurement logs");
  add_common(simulate);
  CLI::App* train_cmd = app.add_subcommand("train", "train the fault-conditioned flow map");
  add_common(train_cmd);
  CLI::App* infer = app.add_subcommand("infer", "run bank + continuous fault inference");
  add_common(infer);
  infer->add_option("--log", log_path, "measurement log (JSON lines of t, y)");
  CLI::App* recover = app.add_subcommand("recover", "run the recovery episode");
  add_common(recover);
  recover->add_option("--w-hat", w_hat_arg, "comma-separated fault estimate override");
  CLI::App* certify = app.add_subcommand("certify", "print the certificate bound table");
  add_common(certify);
  CLI::App* reproduce = app.add_subcommand("reproduce", "run named experiments");
  add_common(reproduce);
  reproduce->add_option("--experiment", experiment,
                        "ood_single|ood_sweep|separation|operator_gap|all");

  CLI11_PARSE(app, argc, argv);

  try {
    bench::ExperimentConfig cfg = load_config(config_path, seed, seed_set, out_dir, checkpoint);
    if (simulate->parsed()) return cmd_simulate(cfg);
    if (train_cmd->parsed()) return cmd_train(cfg);
    if (infer->parsed()) return cmd_infer(cfg, log_path);
    if (recover->parsed()) return cmd_recover(cfg, w_hat_arg);
    if (certify->parsed()) return cmd_certify(cfg);
    if (reproduce->parsed()) return cmd_reproduce(cfg, experiment);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
