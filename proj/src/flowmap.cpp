#include "pfo/flowmap.hpp"

#include "pfo/linalg.hpp"

#include <cmath>
#include <map>
#include <string>

namespace pfo {

InterpolantSchedule InterpolantSchedule::linear(double gamma0) {
  InterpolantSchedule s;
  s.alpha = [](double tau) { return 1.0 - tau; };
  s.dalpha = [](double) { return -1.0; };
  s.beta = [](double tau) { return tau; };
  s.dbeta = [](double) { return 1.0; };
  s.gamma = [gamma0](double tau) { return gamma0 * std::sin(M_PI * tau); };
  s.dgamma = [gamma0](double tau) { return gamma0 * M_PI * std::cos(M_PI * tau); };
  return s;
}

void InterpolantSchedule::validate() const {
  if (!alpha || !beta || !gamma || !dalpha || !dbeta || !dgamma)
    throw ConfigError("InterpolantSchedule: missing coefficient function");
  auto near = [](double a, double b) { return std::abs(a - b) <= 1e-12; };
  if (!near(alpha(0.0), 1.0) || !near(alpha(1.0), 0.0) || !near(beta(0.0), 0.0) ||
      !near(beta(1.0), 1.0) || !near(gamma(0.0), 0.0) || !near(gamma(1.0), 0.0))
    throw ConfigError("InterpolantSchedule: endpoint conditions violated");
}

std::pair<Vec, Vec> sample_interpolant(const TrajectoryPair& pair, double tau, const Vec& z,
                                       const InterpolantSchedule& schedule) {
  if (tau < 0.0 || tau > 1.0) throw ArgumentError("sample_interpolant: tau outside [0,1]");
  Vec I = schedule.alpha(tau) * pair.x_s + schedule.beta(tau) * pair.x_t + schedule.gamma(tau) * z;
  Vec Idot =
      schedule.dalpha(tau) * pair.x_s + schedule.dbeta(tau) * pair.x_t + schedule.dgamma(tau) * z;
  return {std::move(I), std::move(Idot)};
}

// ---------------------------------------------------------------------------
// FlowMapModel
// ---------------------------------------------------------------------------

FlowMapModel FlowMapModel::create(int n, int p, const std::vector<int>& hidden, Rng& rng) {
  FlowMapModel m;
  m.n = n;
  m.p = p;
  ad::MlpArch arch;
  arch.in = n + 4 + p;
  arch.out = n;
  arch.hidden = hidden;
  m.net = ad::MlpParams::init(arch, rng, 1.0, /*zero_last_layer=*/true);
  m.x_shift = Vec::Zero(n);
  m.x_scale = Vec::Ones(n);
  return m;
}

Mat FlowMapModel::cond_rows(const OperatorCond& c, int count) {
  Mat rows(count, 2 + c.w.size());
  for (int i = 0; i < count; ++i) {
    rows(i, 0) = c.s;
    rows(i, 1) = c.t;
    rows.row(i).tail(c.w.size()) = c.w.transpose();
  }
  return rows;
}

Mat FlowMapModel::features(const Mat& X, const Vec& tau0, const Vec& tau1, const Mat& conds) const {
  const int B = static_cast<int>(X.rows());
  if (conds.rows() != B || conds.cols() != 2 + p)
    throw ConfigError("FlowMapModel::features: conditioning shape mismatch");
  Mat F(B, n + 4 + p);
  F.leftCols(n) =
      (X.rowwise() - x_shift.transpose()).array().rowwise() / x_scale.transpose().array();
  F.col(n) = tau0;
  F.col(n + 1) = tau1;
  F.col(n + 2) = conds.col(0) / t_ref;
  F.col(n + 3) = (conds.col(1) - conds.col(0)) / gap_ref;
  F.rightCols(p) = conds.rightCols(p);
  return F;
}

Mat FlowMapModel::phi_batch(const Mat& X, const Vec& tau0, const Vec& tau1, const Mat& conds,
                            Mat* dphi_dtau1_out) const {
  Mat F = features(X, tau0, tau1, conds);
  Vec dt = tau1 - tau0;
  Mat out;
  if (dphi_dtau1_out == nullptr) {
    Mat D = ad::mlp_eval(net, F);
    D.array().rowwise() *= x_scale.transpose().array();
    out = X + dt.asDiagonal() * D;
  } else {
    Mat dF = Mat::Zero(F.rows(), F.cols());
    dF.col(n + 1).setOnes();
    auto [D, dD] = ad::mlp_eval_jvp(net, F, dF);
    D.array().rowwise() *= x_scale.transpose().array();
    dD.array().rowwise() *= x_scale.transpose().array();
    out = X + dt.asDiagonal() * D;
    *dphi_dtau1_out = D + dt.asDiagonal() * dD;
  }
  return out;
}

Vec FlowMapModel::phi(const Vec& x, double tau0, double tau1, const OperatorCond& c) const {
  Vec t0(1), t1(1);
  t0 << tau0;
  t1 << tau1;
  return phi_batch(x.transpose(), t0, t1, cond_rows(c, 1)).row(0).transpose();
}

Vec FlowMapModel::dphi_dtau1(const Vec& x, double tau0, double tau1, const OperatorCond& c) const {
  Vec t0(1), t1(1);
  t0 << tau0;
  t1 << tau1;
  Mat d;
  phi_batch(x.transpose(), t0, t1, cond_rows(c, 1), &d);
  return d.row(0).transpose();
}

Vec FlowMapModel::induced_velocity(const Vec& x, double tau, const OperatorCond& c) const {
  return dphi_dtau1(x, tau, tau, c);
}

Mat FlowMapModel::induced_velocity_jacobian(const Vec& x, double tau, const OperatorCond& c) const {
  Vec t(1);
  t << tau;
  Mat F = features(x.transpose(), t, t, cond_rows(c, 1));
  Mat J(n, n);
  for (int k = 0; k < n; ++k) {
    Mat dF = Mat::Zero(1, F.cols());
    dF(0, k) = 1.0 / x_scale[k];
    auto [D, dD] = ad::mlp_eval_jvp(net, F, dF);
    (void)D;
    J.col(k) = x_scale.cwiseProduct(dD.row(0).transpose());
  }
  return J;
}

// ---------------------------------------------------------------------------
// MetricModel
// ---------------------------------------------------------------------------

namespace {
constexpr double kDiagRawInit = 0.46118565;  // softplus(x) ~= 0.95 so diag ~= 1 with floor
}

MetricModel MetricModel::create(int n, int p, const std::vector<int>& hidden, Rng& rng) {
  MetricModel m;
  m.n = n;
  m.p = p;
  ad::MlpArch arch;
  arch.in = n + 1 + p;
  arch.out = n * (n + 1) / 2;
  arch.hidden = hidden;
  m.theta_net = ad::MlpParams::init(arch, rng, 1.0, /*zero_last_layer=*/true);
  m.theta_net.b.back().head(n).setConstant(kDiagRawInit);  // M ~ I at init
  m.alpha_coef = Mat::Zero(1, p + 1);
  m.alpha_coef(0, 0) = -0.1;
  m.x_shift = Vec::Zero(n);
  m.x_scale = Vec::Ones(n);
  return m;
}

namespace {

Mat metric_features(const MetricModel& m, const Vec& x, double tau, const Vec& w) {
  Mat F(1, m.n + 1 + m.p);
  F.leftCols(m.n) =
      ((x - m.x_shift).array() / m.x_scale.array()).matrix().transpose();
  F(0, m.n) = tau;
  F.rightCols(m.p) = w.transpose();
  return F;
}

Mat assemble_lower(const Vec& diag, const Vec& lower, int n) {
  Mat L = Mat::Zero(n, n);
  for (int i = 0; i < n; ++i) L(i, i) = diag[i];
  int k = 0;
  for (int i = 1; i < n; ++i)
    for (int j = 0; j < i; ++j) L(i, j) = lower[k++];
  return L;
}

double softplus_scalar(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }
double sigmoid_scalar(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

Mat MetricModel::theta_factor(const Vec& x, double tau, const Vec& w) const {
  Mat raw = ad::mlp_eval(theta_net, metric_features(*this, x, tau, w));
  Vec diag(n), lower(n * (n - 1) / 2);
  for (int i = 0; i < n; ++i) diag[i] = softplus_scalar(raw(0, i)) + diag_floor;
  for (int k = 0; k < lower.size(); ++k) lower[k] = raw(0, n + k);
  return assemble_lower(diag, lower, n);
}

Mat MetricModel::metric(const Vec& x, double tau, const Vec& w) const {
  Mat L = theta_factor(x, tau, w);
  return L.transpose() * L;
}

double MetricModel::alpha(const Vec& w) const {
  double a = alpha_coef(0, 0);
  for (int i = 0; i < p; ++i) a += alpha_coef(0, 1 + i) * w[i];
  return a;
}

Mat contraction_residual_terms(const Mat& M_dot, const Mat& M, const Mat& Db, double alpha) {
  return M_dot + Db.transpose() * M + M * Db - 2.0 * alpha * M;
}

Mat contraction_residual(const MetricModel& metric, const FlowMapModel& model, const Vec& x,
                         double tau, const OperatorCond& cond) {
  const int n = model.n;
  Vec b = model.induced_velocity(x, tau, cond);
  Mat J = model.induced_velocity_jacobian(x, tau, cond);

  Mat F = metric_features(metric, x, tau, cond.w);
  Mat dF(1, F.cols());
  dF.setZero();
  dF.leftCols(n) = (b.array() / metric.x_scale.array()).matrix().transpose();
  dF(0, n) = 1.0;  // d tau
  auto [raw, draw] = ad::mlp_eval_jvp(metric.theta_net, F, dF);

  Vec diag(n), lower(n * (n - 1) / 2), ddiag(n), dlower(n * (n - 1) / 2);
  for (int i = 0; i < n; ++i) {
    diag[i] = softplus_scalar(raw(0, i)) + metric.diag_floor;
    ddiag[i] = sigmoid_scalar(raw(0, i)) * draw(0, i);
  }
  for (int k = 0; k < lower.size(); ++k) {
    lower[k] = raw(0, n + k);
    dlower[k] = draw(0, n + k);
  }
  Mat L = assemble_lower(diag, lower, n);
  Mat dL = assemble_lower(ddiag, dlower, n);
  Mat M = L.transpose() * L;
  Mat M_dot = dL.transpose() * L + L.transpose() * dL;
  return contraction_residual_terms(M_dot, M, J, metric.alpha(cond.w));
}

// ---------------------------------------------------------------------------
// Batch sampling
// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
  if (lambda_ep < 0 || lambda_sg < 0 || lambda_ctr < 0 || lambda_cert < 0 || c_alpha < 0 ||
      c_kappa < 0)
    throw ConfigError("TrainConfig: loss weights must be nonnegative");
  if (omega0_lower <= 0) throw ConfigError("TrainConfig: omega0 lower bound must be positive");
  if (batch_size < 1 || steps < 0 || learning_rate <= 0)
    throw ConfigError("TrainConfig: invalid optimization settings");
}

SampledBatch sample_batch(const std::vector<TrajectoryPair>& data, const std::vector<int>& indices,
                          int ctr_samples, Rng& rng, int state_dim) {
  SampledBatch b;
  const int B = static_cast<int>(indices.size());
  b.pairs.reserve(static_cast<size_t>(B));
  for (int i : indices) b.pairs.push_back(data[static_cast<size_t>(i)]);
  b.tau0.resize(B);
  b.tau1.resize(B);
  b.z_fmm.resize(B, state_dim);
  b.r_ep.resize(B);
  b.z_ep.resize(B, state_dim);
  b.sg0.resize(B);
  b.sg1.resize(B);
  b.sg2.resize(B);
  b.z_sg.resize(B, state_dim);
  for (int i = 0; i < B; ++i) {
    double u = rng.uniform(), v = rng.uniform();
    b.tau0[i] = std::min(u, v);
    b.tau1[i] = std::max(u, v);
    b.z_fmm.row(i) = rng.normal_vec(state_dim).transpose();
    b.r_ep[i] = rng.uniform();
    b.z_ep.row(i) = rng.normal_vec(state_dim).transpose();
    double a[3] = {rng.uniform(), rng.uniform(), rng.uniform()};
    std::sort(std::begin(a), std::end(a));
    b.sg0[i] = a[0];
    b.sg1[i] = a[1];
    b.sg2[i] = a[2];
    b.z_sg.row(i) = rng.normal_vec(state_dim).transpose();
  }
  b.ctr_tau.resize(ctr_samples);
  b.z_ctr.resize(ctr_samples, state_dim);
  for (int k = 0; k < ctr_samples; ++k) {
    b.ctr_index.push_back(B > 0 ? rng.uniform_int(0, B - 1) : 0);
    b.ctr_tau[k] = rng.uniform();
    b.z_ctr.row(k) = rng.normal_vec(state_dim).transpose();
  }
  return b;
}

// ---------------------------------------------------------------------------
// Value-only losses
// ---------------------------------------------------------------------------

FlowMapLike as_flow_like(const FlowMapModel& model) {
  FlowMapLike f;
  f.phi = [&model](const Vec& x, double t0, double t1, const OperatorCond& c) {
    return model.phi(x, t0, t1, c);
  };
  f.dphi_dtau1 = [&model](const Vec& x, double t0, double t1, const OperatorCond& c) {
    return model.dphi_dtau1(x, t0, t1, c);
  };
  return f;
}

namespace {
OperatorCond cond_of(const TrajectoryPair& p) { return OperatorCond{p.s, p.t, p.w}; }
}  // namespace

double loss_fmm(const FlowMapLike& flow, const SampledBatch& batch,
                const InterpolantSchedule& schedule) {
  if (batch.pairs.empty()) throw ArgumentError("loss_fmm: empty batch");
  double acc = 0.0;
  for (int i = 0; i < batch.size(); ++i) {
    const auto& pair = batch.pairs[static_cast<size_t>(i)];
    OperatorCond c = cond_of(pair);
    auto [I1, I1dot] =
        sample_interpolant(pair, batch.tau1[i], batch.z_fmm.row(i).transpose(), schedule);
    Vec inner = flow.phi(I1, batch.tau1[i], batch.tau0[i], c);
    Vec outer = flow.phi(inner, batch.tau0[i], batch.tau1[i], c);
    Vec outer_d = flow.dphi_dtau1(inner, batch.tau0[i], batch.tau1[i], c);
    acc += (outer_d - I1dot).squaredNorm() + (outer - I1).squaredNorm();
  }
  return acc / batch.size();
}

double loss_endpoint(const FlowMapLike& flow, const SampledBatch& batch,
                     const InterpolantSchedule& schedule, double omega0_lower,
                     double* unweighted_residual_integral) {
  if (batch.pairs.empty()) throw ArgumentError("loss_endpoint: empty batch");
  (void)omega0_lower;  // omega_0 is uniform (== 1); weighted and unweighted coincide
  double acc = 0.0;
  for (int i = 0; i < batch.size(); ++i) {
    const auto& pair = batch.pairs[static_cast<size_t>(i)];
    auto [Ir, Irdot] =
        sample_interpolant(pair, batch.r_ep[i], batch.z_ep.row(i).transpose(), schedule);
    (void)Ir;
    Vec d = flow.dphi_dtau1(pair.x_s, 0.0, batch.r_ep[i], cond_of(pair));
    acc += (d - Irdot).squaredNorm();
  }
  double value = acc / batch.size();
  if (unweighted_residual_integral) *unweighted_residual_integral = value;
  return value;
}

double loss_semigroup(const FlowMapLike& flow, const SampledBatch& batch,
                      const InterpolantSchedule& schedule) {
  if (batch.pairs.empty()) throw ArgumentError("loss_semigroup: empty batch");
  double acc = 0.0;
  for (int i = 0; i < batch.size(); ++i) {
    const auto& pair = batch.pairs[static_cast<size_t>(i)];
    OperatorCond c = cond_of(pair);
    auto [I0, I0dot] =
        sample_interpolant(pair, batch.sg0[i], batch.z_sg.row(i).transpose(), schedule);
    (void)I0dot;
    Vec direct = flow.phi(I0, batch.sg0[i], batch.sg2[i], c);
    Vec mid = flow.phi(I0, batch.sg0[i], batch.sg1[i], c);
    Vec two_leg = flow.phi(mid, batch.sg1[i], batch.sg2[i], c);
    acc += (direct - two_leg).squaredNorm();
  }
  return acc / batch.size();
}

double loss_contraction(const MetricModel& metric, const FlowMapModel& model,
                        const SampledBatch& batch, const InterpolantSchedule& schedule) {
  if (batch.ctr_index.empty()) return 0.0;
  double acc = 0.0;
  for (size_t k = 0; k < batch.ctr_index.size(); ++k) {
    const auto& pair = batch.pairs[static_cast<size_t>(batch.ctr_index[k])];
    auto [I, Idot] = sample_interpolant(pair, batch.ctr_tau[static_cast<Eigen::Index>(k)],
                                        batch.z_ctr.row(static_cast<Eigen::Index>(k)).transpose(),
                                        schedule);
    (void)Idot;
    Mat R = contraction_residual(metric, model, I, batch.ctr_tau[static_cast<Eigen::Index>(k)],
                                 cond_of(pair));
    acc += psd_project(R).squaredNorm();
  }
  return acc / static_cast<double>(batch.ctr_index.size());
}

double loss_certificate(const MetricModel& metric, const FlowMapModel& model,
                        const SampledBatch& batch, const InterpolantSchedule& schedule,
                        double c_alpha, double c_kappa) {
  if (batch.ctr_index.empty()) return 0.0;
  std::map<std::string, std::pair<double, std::pair<double, double>>> groups;  // key -> (alpha, (mmin, mmax))
  std::map<std::string, Vec> group_w;
  for (size_t k = 0; k < batch.ctr_index.size(); ++k) {
    const auto& pair = batch.pairs[static_cast<size_t>(batch.ctr_index[k])];
    auto [I, Idot] = sample_interpolant(pair, batch.ctr_tau[static_cast<Eigen::Index>(k)],
                                        batch.z_ctr.row(static_cast<Eigen::Index>(k)).transpose(),
                                        schedule);
    (void)Idot;
    Mat M = metric.metric(I, batch.ctr_tau[static_cast<Eigen::Index>(k)], pair.w);
    double lo = min_eigenvalue(M), hi = max_eigenvalue(M);
    std::string key(reinterpret_cast<const char*>(pair.w.data()),
                    sizeof(double) * static_cast<size_t>(pair.w.size()));
    auto it = groups.find(key);
    if (it == groups.end()) {
      groups[key] = {metric.alpha(pair.w), {lo, hi}};
      group_w[key] = pair.w;
    } else {
      it->second.second.first = std::min(it->second.second.first, lo);
      it->second.second.second = std::max(it->second.second.second, hi);
    }
  }
  double acc = 0.0;
  for (const auto& [key, g] : groups) {
    double apos = std::max(g.first, 0.0);
    acc += c_alpha * apos * apos + c_kappa * (std::log(g.second.second) - std::log(g.second.first));
  }
  (void)model;
  return acc / static_cast<double>(groups.size());
}

// ---------------------------------------------------------------------------
// Tape-backed joint loss graph
// ---------------------------------------------------------------------------
namespace {

using ad::Tape;

struct TapeCtx {
  Tape* tape = nullptr;
  const FlowMapModel* model = nullptr;
  ad::MlpVars flow_vars;
};

Mat replicate_row(const Vec& v, int rows) {
  Mat m(rows, v.size());
  m.rowwise() = v.transpose();
  return m;
}

// Features from a tape-valued state node.
int features_var(TapeCtx& c, int x_node, const Vec& tau0, const Vec& tau1, const Mat& conds) {
  const auto& m = *c.model;
  const int B = static_cast<int>(tau0.size());
  int shift = c.tape->constant(replicate_row(m.x_shift, B));
  int invscale = c.tape->constant(replicate_row(m.x_scale.cwiseInverse(), B));
  int xn = c.tape->cwise_mul(c.tape->sub(x_node, shift), invscale);
  Mat rest(B, 4 + m.p);
  rest.col(0) = tau0;
  rest.col(1) = tau1;
  rest.col(2) = conds.col(0) / m.t_ref;
  rest.col(3) = (conds.col(1) - conds.col(0)) / m.gap_ref;
  rest.rightCols(m.p) = conds.rightCols(m.p);
  return c.tape->hcat({xn, c.tape->constant(rest)});
}

struct PhiNodes {
  int phi = -1;
  int dphi = -1;      // d/dtau1, if requested
  int delta_raw = -1; // unscaled network output
};

// Builds Phi = X + (tau1-tau0) * scale .* Delta(features) on the tape.
PhiNodes phi_node(TapeCtx& c, int x_node, int feats, const Vec& tau0, const Vec& tau1,
                  bool want_dphi) {
  const auto& m = *c.model;
  const int B = static_cast<int>(tau0.size());
  auto trace = ad::mlp_forward(*c.tape, c.flow_vars, feats);
  int scale_bc = c.tape->constant(replicate_row(m.x_scale, B));
  Mat dt_mat = replicate_row(Vec::Ones(m.n), B);
  for (int i = 0; i < B; ++i) dt_mat.row(i) *= (tau1[i] - tau0[i]);
  int dt_bc = c.tape->constant(dt_mat);
  int d_scaled = c.tape->cwise_mul(scale_bc, trace.out);
  PhiNodes out;
  out.delta_raw = trace.out;
  out.phi = c.tape->add(x_node, c.tape->cwise_mul(dt_bc, d_scaled));
  if (want_dphi) {
    Mat dir = Mat::Zero(B, m.n + 4 + m.p);
    dir.col(m.n + 1).setOnes();
    int jvp = ad::mlp_jvp(*c.tape, c.flow_vars, trace, c.tape->constant(dir));
    out.dphi = c.tape->add(d_scaled, c.tape->cwise_mul(dt_bc, c.tape->cwise_mul(scale_bc, jvp)));
  }
  return out;
}

struct MetricVars {
  ad::MlpVars theta;
  int alpha = -1;  // 1 x (p+1) leaf
};

}  // namespace

Vec flatten_joint(const FlowMapModel& model, const MetricModel& metric) {
  Vec a = model.net.flatten();
  Vec b = metric.theta_net.flatten();
  Vec out(a.size() + b.size() + metric.alpha_coef.size());
  out << a, b, metric.alpha_coef.row(0).transpose();
  return out;
}

void unflatten_joint(FlowMapModel& model, MetricModel& metric, const Vec& theta) {
  const int na = model.net.parameter_count();
  const int nb = metric.theta_net.parameter_count();
  model.net.unflatten(theta.head(na));
  metric.theta_net.unflatten(theta.segment(na, nb));
  metric.alpha_coef.row(0) = theta.tail(metric.alpha_coef.size()).transpose();
}

LossValues eval_losses(const FlowMapModel& model, const MetricModel& metric,
                       const SampledBatch& batch, const InterpolantSchedule& schedule,
                       const TrainConfig& config, const std::array<double, 5>& term_weights,
                       Vec* grad) {
  if (batch.pairs.empty()) throw ArgumentError("eval_losses: empty batch");
  const int B = batch.size();
  const int n = model.n;
  const int p = model.p;

  Tape tape;
  TapeCtx ctx;
  ctx.tape = &tape;
  ctx.model = &model;
  ctx.flow_vars = ad::insert_params(tape, model.net);
  MetricVars mv;
  mv.theta = ad::insert_params(tape, metric.theta_net);
  mv.alpha = tape.leaf(metric.alpha_coef);

  Mat conds(B, 2 + p);
  Mat Xs(B, n), Xt(B, n);
  for (int i = 0; i < B; ++i) {
    const auto& pr = batch.pairs[static_cast<size_t>(i)];
    conds(i, 0) = pr.s;
    conds(i, 1) = pr.t;
    conds.row(i).tail(p) = pr.w.transpose();
    Xs.row(i) = pr.x_s.transpose();
    Xt.row(i) = pr.x_t.transpose();
  }

  auto interp_rows = [&](const Vec& taus, const Mat& z) {
    Mat I(B, n), Idot(B, n);
    for (int i = 0; i < B; ++i) {
      auto [Ii, Di] = sample_interpolant(batch.pairs[static_cast<size_t>(i)], taus[i],
                                         z.row(i).transpose(), schedule);
      I.row(i) = Ii.transpose();
      Idot.row(i) = Di.transpose();
    }
    return std::make_pair(I, Idot);
  };

  // --- FMM: round trip tau1 -> tau0 -> tau1 --------------------------------
  auto [I1, I1dot] = interp_rows(batch.tau1, batch.z_fmm);
  int I1c = tape.constant(I1);
  int inner_feats = features_var(ctx, I1c, batch.tau1, batch.tau0, conds);
  PhiNodes inner = phi_node(ctx, I1c, inner_feats, batch.tau1, batch.tau0, false);
  int outer_feats = features_var(ctx, inner.phi, batch.tau0, batch.tau1, conds);
  PhiNodes outer = phi_node(ctx, inner.phi, outer_feats, batch.tau0, batch.tau1, true);
  int fmm = tape.scale(tape.add(tape.sumsq(tape.sub(outer.dphi, tape.constant(I1dot))),
                                tape.sumsq(tape.sub(outer.phi, tape.constant(I1)))),
                       1.0 / B);

  // --- endpoint: d/dr Phi_{0,r}(x_s) vs interpolant velocity ---------------
  auto [Ir, Irdot] = interp_rows(batch.r_ep, batch.z_ep);
  (void)Ir;
  int xs_c = tape.constant(Xs);
  Vec zeros_tau = Vec::Zero(B);
  int ep_feats = features_var(ctx, xs_c, zeros_tau, batch.r_ep, conds);
  PhiNodes ep_phi = phi_node(ctx, xs_c, ep_feats, zeros_tau, batch.r_ep, true);
  int ep = tape.scale(tape.sumsq(tape.sub(ep_phi.dphi, tape.constant(Irdot))), 1.0 / B);

  // --- semigroup ------------------------------------------------------------
  auto [I0, I0dot] = interp_rows(batch.sg0, batch.z_sg);
  (void)I0dot;
  int I0c = tape.constant(I0);
  int direct_feats = features_var(ctx, I0c, batch.sg0, batch.sg2, conds);
  PhiNodes direct = phi_node(ctx, I0c, direct_feats, batch.sg0, batch.sg2, false);
  int mid_feats = features_var(ctx, I0c, batch.sg0, batch.sg1, conds);
  PhiNodes mid = phi_node(ctx, I0c, mid_feats, batch.sg0, batch.sg1, false);
  int leg2_feats = features_var(ctx, mid.phi, batch.sg1, batch.sg2, conds);
  PhiNodes two_leg = phi_node(ctx, mid.phi, leg2_feats, batch.sg1, batch.sg2, false);
  int sg = tape.scale(tape.sumsq(tape.sub(direct.phi, two_leg.phi)), 1.0 / B);

  // --- contraction + certificate -------------------------------------------
  int ctr = -1, cert = -1;
  const int S = static_cast<int>(batch.ctr_index.size());
  if (S > 0) {
    Mat Ic(S, n);
    Mat cconds(S, 2 + p);
    for (int k = 0; k < S; ++k) {
      const auto& pr = batch.pairs[static_cast<size_t>(batch.ctr_index[static_cast<size_t>(k)])];
      auto [Ik, Dk] = sample_interpolant(pr, batch.ctr_tau[k], batch.z_ctr.row(k).transpose(),
                                         schedule);
      (void)Dk;
      Ic.row(k) = Ik.transpose();
      cconds(k, 0) = pr.s;
      cconds(k, 1) = pr.t;
      cconds.row(k).tail(p) = pr.w.transpose();
    }
    int Icc = tape.constant(Ic);
    int cfeats = features_var(ctx, Icc, batch.ctr_tau, batch.ctr_tau, cconds);
    auto ctrace = ad::mlp_forward(tape, ctx.flow_vars, cfeats);  // Delta_raw = b_hat / scale

    // state Jacobian passes: direction e_k / scale_k in the x block
    std::vector<int> jvp_cols;
    for (int k = 0; k < n; ++k) {
      Mat dir = Mat::Zero(S, n + 4 + p);
      dir.col(k).setConstant(1.0 / model.x_scale[k]);
      jvp_cols.push_back(ad::mlp_jvp(tape, ctx.flow_vars, ctrace, tape.constant(dir)));
    }

    // metric forward + JVP along (b_hat, dtau=1, dw=0)
    Mat mfeat(S, n + 1 + p);
    mfeat.leftCols(n) =
        (Ic.rowwise() - metric.x_shift.transpose()).array().rowwise() /
        metric.x_scale.transpose().array();
    mfeat.col(n) = batch.ctr_tau;
    mfeat.rightCols(p) = cconds.rightCols(p);
    auto mtrace = ad::mlp_forward(tape, mv.theta, tape.constant(mfeat));
    // direction: x part = b_hat / x_scale = Delta_raw (flow and metric share scales)
    int ones_col = tape.constant(Mat::Ones(S, 1));
    int zeros_w = tape.constant(Mat::Zero(S, p));
    int mdir = tape.hcat({ctrace.out, ones_col, zeros_w});
    int mjvp = ad::mlp_jvp(tape, mv.theta, mtrace, mdir);

    // lower-triangular placement matrix (n^2 x K), K = n(n+1)/2
    const int K = n * (n + 1) / 2;
    Mat place = Mat::Zero(n * n, K);
    for (int i = 0; i < n; ++i) place(i * n + i, i) = 1.0;
    {
      int slot = n;
      for (int i = 1; i < n; ++i)
        for (int j = 0; j < i; ++j) place(i * n + j, slot++) = 1.0;
    }
    int place_c = tape.constant(place);
    int floor_c = tape.constant(Mat::Constant(1, n, metric.diag_floor));
    int scale_diag = tape.constant(Mat(model.x_scale.asDiagonal()));
    int zero_s = tape.constant(Mat::Zero(1, 1));

    std::vector<int> ctr_terms;
    struct GroupAgg {
      std::vector<int> eig_hi, eig_lo;
      int alpha_node = -1;
    };
    std::map<std::string, GroupAgg> groups;
    for (int k = 0; k < S; ++k) {
      const auto& pr = batch.pairs[static_cast<size_t>(batch.ctr_index[static_cast<size_t>(k)])];
      int raw_row = tape.row(mtrace.out, k);
      int draw_row = tape.row(mjvp, k);
      int diag_raw = tape.cols(raw_row, 0, n);
      int low_raw = tape.cols(raw_row, n, K - n);
      int diag = tape.add(tape.softplus(diag_raw), floor_c);
      int ddiag = tape.cwise_mul(tape.sigmoid(diag_raw), tape.cols(draw_row, 0, n));
      int dlow = tape.cols(draw_row, n, K - n);
      int theta_vec = tape.linmap(tape.hcat({diag, low_raw}), place_c);
      int dtheta_vec = tape.linmap(tape.hcat({ddiag, dlow}), place_c);
      int Th = tape.reshape_row(theta_vec, n, n);
      int dTh = tape.reshape_row(dtheta_vec, n, n);
      int M = tape.matmul(tape.transpose(Th), Th);
      int Mdot = tape.add(tape.matmul(tape.transpose(dTh), Th),
                          tape.matmul(tape.transpose(Th), dTh));

      std::vector<int> cols_k;
      for (int kk = 0; kk < n; ++kk)
        cols_k.push_back(tape.transpose(tape.row(jvp_cols[static_cast<size_t>(kk)], k)));
      int J = tape.matmul(scale_diag, tape.hcat(cols_k));

      Mat wrow(1, p + 1);
      wrow(0, 0) = 1.0;
      wrow.row(0).tail(p) = pr.w.transpose();
      int a_k = tape.linmap(tape.constant(wrow), mv.alpha);

      int R = tape.add(Mdot, tape.add(tape.matmul(tape.transpose(J), M), tape.matmul(M, J)));
      R = tape.add(R, tape.scale(tape.mul_scalar(a_k, M), -2.0));
      ctr_terms.push_back(tape.psd_penalty(R));

      std::string key(reinterpret_cast<const char*>(pr.w.data()),
                      sizeof(double) * static_cast<size_t>(pr.w.size()));
      auto& g = groups[key];
      g.eig_hi.push_back(tape.eig_max(M));
      g.eig_lo.push_back(tape.eig_min(M));
      g.alpha_node = a_k;
    }
    int ctr_sum = ctr_terms[0];
    for (size_t k = 1; k < ctr_terms.size(); ++k) ctr_sum = tape.add(ctr_sum, ctr_terms[k]);
    ctr = tape.scale(ctr_sum, 1.0 / S);

    std::vector<int> cert_terms;
    for (auto& [key, g] : groups) {
      int mbar = tape.max_of(g.eig_hi);
      int mlow = tape.min_of(g.eig_lo);
      int lg = tape.sub(tape.log_scalar(mbar), tape.log_scalar(mlow));
      int apos = tape.max_of({g.alpha_node, zero_s});
      int apos2 = tape.cwise_mul(apos, apos);
      cert_terms.push_back(
          tape.add(tape.scale(apos2, config.c_alpha), tape.scale(lg, config.c_kappa)));
    }
    int cert_sum = cert_terms[0];
    for (size_t k = 1; k < cert_terms.size(); ++k) cert_sum = tape.add(cert_sum, cert_terms[k]);
    cert = tape.scale(cert_sum, 1.0 / static_cast<double>(cert_terms.size()));
  } else {
    ctr = tape.constant(Mat::Zero(1, 1));
    cert = tape.constant(Mat::Zero(1, 1));
  }

  int total = tape.add(
      tape.add(tape.scale(fmm, term_weights[0]),
               tape.add(tape.scale(ep, term_weights[1] * config.lambda_ep),
                        tape.scale(sg, term_weights[2] * config.lambda_sg))),
      tape.add(tape.scale(ctr, term_weights[3] * config.lambda_ctr),
               tape.scale(cert, term_weights[4] * config.lambda_cert)));

  LossValues out;
  out.fmm = tape.scalar(fmm);
  out.ep = tape.scalar(ep);
  out.sg = tape.scalar(sg);
  out.ctr = tape.scalar(ctr);
  out.cert = tape.scalar(cert);
  out.ep_unweighted = out.ep;  // omega_0 uniform

  if (grad) {
    tape.backward(total);
    Vec g(flatten_joint(model, metric).size());
    int off = 0;
    auto take = [&](int id, Eigen::Index rows, Eigen::Index cols) {
      const Mat& gm = tape.grad_of(id);
      Mat use = (gm.size() == 0) ? Mat(Mat::Zero(rows, cols)) : gm;
      for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) g[off++] = use(i, j);
    };
    for (size_t l = 0; l < model.net.W.size(); ++l) {
      take(ctx.flow_vars.W[l], model.net.W[l].rows(), model.net.W[l].cols());
      take(ctx.flow_vars.b[l], model.net.b[l].size(), 1);
    }
    for (size_t l = 0; l < metric.theta_net.W.size(); ++l) {
      take(mv.theta.W[l], metric.theta_net.W[l].rows(), metric.theta_net.W[l].cols());
      take(mv.theta.b[l], metric.theta_net.b[l].size(), 1);
    }
    take(mv.alpha, 1, p + 1);
    *grad = g;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training loop: Adam on the joint parameter vector.
// ---------------------------------------------------------------------------
TrainResult train(FlowMapModel model, MetricModel metric,
                  const std::vector<TrajectoryPair>& dataset, const InterpolantSchedule& schedule,
                  const TrainConfig& config) {
  config.validate();
  schedule.validate();
  if (dataset.empty()) throw ArgumentError("train: empty dataset");

  TrainResult result;
  Rng rng(derive_seed(config.seed, 0x7261));

  Vec theta = flatten_joint(model, metric);
  Vec m1 = Vec::Zero(theta.size()), m2 = Vec::Zero(theta.size());
  Vec last_good = theta;
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;

  auto log_entry = [&](int step, const LossValues& lv) {
    result.history.push_back({step, lv});
  };

  for (int step = 0; step < config.steps; ++step) {
    std::vector<int> idx(static_cast<size_t>(config.batch_size));
    for (auto& i : idx) i = rng.uniform_int(0, static_cast<int>(dataset.size()) - 1);
    SampledBatch batch = sample_batch(dataset, idx, config.ctr_samples, rng, model.n);

    Vec grad;
    LossValues lv = eval_losses(model, metric, batch, schedule, config, {1, 1, 1, 1, 1}, &grad);
    double total = lv.weighted_total(config);
    if (!std::isfinite(total) || !grad.allFinite()) {
      unflatten_joint(model, metric, last_good);
      result.aborted_on_nan = true;
      break;
    }

    double t = step + 1;
    m1 = b1 * m1 + (1.0 - b1) * grad;
    m2 = b2 * m2 + (1.0 - b2) * grad.cwiseProduct(grad);
    Vec mhat = m1 / (1.0 - std::pow(b1, t));
    Vec vhat = m2 / (1.0 - std::pow(b2, t));
    Vec denom = vhat.cwiseSqrt() + Vec::Constant(theta.size(), eps);
    theta -= config.learning_rate * mhat.cwiseQuotient(denom);
    unflatten_joint(model, metric, theta);

    if (step % std::max(config.log_every, 1) == 0) {
      log_entry(step, lv);
      last_good = theta;
    }
  }

  // terminal loss snapshot on a fresh batch
  {
    std::vector<int> idx(static_cast<size_t>(config.batch_size));
    for (auto& i : idx) i = rng.uniform_int(0, static_cast<int>(dataset.size()) - 1);
    SampledBatch batch = sample_batch(dataset, idx, config.ctr_samples, rng, model.n);
    LossValues lv = eval_losses(model, metric, batch, schedule, config);
    log_entry(config.steps, lv);
  }

  result.model = std::move(model);
  result.metric = std::move(metric);
  return result;
}

ParticleEnsemble apply_operator(const FlowMapModel& model, const ParticleEnsemble& ensemble,
                                double s, double t, const Vec& w) {
  ensemble.validate();
  if (static_cast<int>(w.size()) != model.p)
    throw ArgumentError("apply_operator: fault parameter dimension mismatch");
  const int N = ensemble.size();
  OperatorCond c{s, t, w};
  Vec zeros = Vec::Zero(N), ones = Vec::Ones(N);
  Mat mapped = model.phi_batch(ensemble.points, zeros, ones, FlowMapModel::cond_rows(c, N));
  if (!mapped.allFinite()) throw NumericError("apply_operator: non-finite mapped particle");
  ParticleEnsemble out;
  out.points = mapped;
  out.weights = ensemble.weights;
  out.timestamp = t;
  return out;
}

}  // namespace pfo
