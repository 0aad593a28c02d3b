#include "pfo/io.hpp"

#include <json.hpp>

#include <fstream>
#include <sstream>

namespace pfo {

using nlohmann::json;

namespace {

json vec_to_json(const Vec& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

Vec vec_from_json(const json& a) {
  Vec v(a.size());
  for (size_t i = 0; i < a.size(); ++i) v[static_cast<Eigen::Index>(i)] = a[i].get<double>();
  return v;
}

json mat_to_json(const Mat& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) rows.push_back(vec_to_json(m.row(i).transpose()));
  return rows;
}

Mat mat_from_json(const json& rows) {
  if (rows.empty()) return Mat(0, 0);
  Mat m(rows.size(), rows[0].size());
  for (size_t i = 0; i < rows.size(); ++i)
    m.row(static_cast<Eigen::Index>(i)) = vec_from_json(rows[i]).transpose();
  return m;
}

std::ifstream open_in(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ArgumentError("cannot open file for reading: " + path);
  return in;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ArgumentError("cannot open file for writing: " + path);
  return out;
}

json mlp_to_json(const ad::MlpParams& p) {
  json j;
  j["in"] = p.arch.in;
  j["out"] = p.arch.out;
  j["hidden"] = p.arch.hidden;
  json Ws = json::array(), bs = json::array();
  for (size_t l = 0; l < p.W.size(); ++l) {
    Ws.push_back(mat_to_json(p.W[l]));
    bs.push_back(vec_to_json(p.b[l]));
  }
  j["W"] = Ws;
  j["b"] = bs;
  return j;
}

ad::MlpParams mlp_from_json(const json& j) {
  ad::MlpParams p;
  p.arch.in = j.at("in").get<int>();
  p.arch.out = j.at("out").get<int>();
  p.arch.hidden = j.at("hidden").get<std::vector<int>>();
  for (const auto& w : j.at("W")) p.W.push_back(mat_from_json(w));
  for (const auto& b : j.at("b")) p.b.push_back(vec_from_json(b));
  return p;
}

}  // namespace

void save_dataset(const std::string& path, const std::vector<TrajectoryPair>& pairs, int n, int m,
                  int p, std::uint64_t root_seed) {
  auto out = open_out(path);
  json header;
  header["schema"] = "pfo.dataset.v1";
  header["n"] = n;
  header["m"] = m;
  header["p"] = p;
  header["root_seed"] = root_seed;
  out << header.dump() << "\n";
  for (const auto& pr : pairs) {
    json rec;
    rec["xs"] = vec_to_json(pr.x_s);
    rec["xt"] = vec_to_json(pr.x_t);
    rec["s"] = pr.s;
    rec["t"] = pr.t;
    rec["w"] = vec_to_json(pr.w);
    rec["seed"] = pr.seed;
    out << rec.dump() << "\n";
  }
}

std::vector<TrajectoryPair> load_dataset(const std::string& path, int* n, int* m, int* p,
                                         std::uint64_t* root_seed) {
  auto in = open_in(path);
  std::string line;
  if (!std::getline(in, line)) throw ArgumentError("load_dataset: empty file " + path);
  json header = json::parse(line);
  if (header.value("schema", "") != "pfo.dataset.v1")
    throw ArgumentError("load_dataset: unexpected schema in " + path);
  if (n) *n = header.at("n").get<int>();
  if (m) *m = header.at("m").get<int>();
  if (p) *p = header.at("p").get<int>();
  if (root_seed) *root_seed = header.at("root_seed").get<std::uint64_t>();
  std::vector<TrajectoryPair> pairs;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json rec = json::parse(line);
    TrajectoryPair pr;
    pr.x_s = vec_from_json(rec.at("xs"));
    pr.x_t = vec_from_json(rec.at("xt"));
    pr.s = rec.at("s").get<double>();
    pr.t = rec.at("t").get<double>();
    pr.w = vec_from_json(rec.at("w"));
    pr.seed = rec.at("seed").get<std::uint64_t>();
    pairs.push_back(std::move(pr));
  }
  return pairs;
}

void save_ensemble(const std::string& path, const ParticleEnsemble& ensemble) {
  auto out = open_out(path);
  json header;
  header["schema"] = "pfo.ensemble.v1";
  header["n"] = ensemble.dim();
  header["timestamp"] = ensemble.timestamp;
  out << header.dump() << "\n";
  for (int i = 0; i < ensemble.size(); ++i) {
    json rec;
    rec["x"] = vec_to_json(ensemble.points.row(i).transpose());
    rec["w"] = ensemble.weights[i];
    out << rec.dump() << "\n";
  }
}

ParticleEnsemble load_ensemble(const std::string& path) {
  auto in = open_in(path);
  std::string line;
  if (!std::getline(in, line)) throw ArgumentError("load_ensemble: empty file " + path);
  json header = json::parse(line);
  if (header.value("schema", "") != "pfo.ensemble.v1")
    throw ArgumentError("load_ensemble: unexpected schema in " + path);
  double ts = header.value("timestamp", 0.0);
  std::vector<Vec> pts;
  std::vector<double> wts;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json rec = json::parse(line);
    pts.push_back(vec_from_json(rec.at("x")));
    wts.push_back(rec.at("w").get<double>());
  }
  if (pts.empty()) throw ArgumentError("load_ensemble: no particles in " + path);
  ParticleEnsemble e;
  e.points.resize(static_cast<int>(pts.size()), pts[0].size());
  e.weights.resize(static_cast<int>(wts.size()));
  for (size_t i = 0; i < pts.size(); ++i) {
    e.points.row(static_cast<Eigen::Index>(i)) = pts[i].transpose();
    e.weights[static_cast<Eigen::Index>(i)] = wts[i];
  }
  e.timestamp = ts;
  return e;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  json j;
  j["schema"] = "pfo.checkpoint.v1";
  json flow;
  flow["n"] = ckpt.model.n;
  flow["p"] = ckpt.model.p;
  flow["net"] = mlp_to_json(ckpt.model.net);
  flow["x_shift"] = vec_to_json(ckpt.model.x_shift);
  flow["x_scale"] = vec_to_json(ckpt.model.x_scale);
  flow["t_ref"] = ckpt.model.t_ref;
  flow["gap_ref"] = ckpt.model.gap_ref;
  j["flow"] = flow;
  json metric;
  metric["n"] = ckpt.metric.n;
  metric["p"] = ckpt.metric.p;
  metric["theta_net"] = mlp_to_json(ckpt.metric.theta_net);
  metric["alpha_coef"] = mat_to_json(ckpt.metric.alpha_coef);
  metric["diag_floor"] = ckpt.metric.diag_floor;
  metric["x_shift"] = vec_to_json(ckpt.metric.x_shift);
  metric["x_scale"] = vec_to_json(ckpt.metric.x_scale);
  j["metric"] = metric;
  j["schedule_gamma0"] = ckpt.schedule_gamma0;
  j["config_hash"] = ckpt.config_hash;
  json hist = json::array();
  for (const auto& h : ckpt.history) {
    json e;
    e["step"] = h.step;
    e["fmm"] = h.losses.fmm;
    e["ep"] = h.losses.ep;
    e["sg"] = h.losses.sg;
    e["ctr"] = h.losses.ctr;
    e["cert"] = h.losses.cert;
    hist.push_back(e);
  }
  j["history"] = hist;
  auto out = open_out(path);
  out << j.dump(1) << "\n";
}

Checkpoint load_checkpoint(const std::string& path) {
  auto in = open_in(path);
  json j = json::parse(in);
  if (j.value("schema", "") != "pfo.checkpoint.v1")
    throw ArgumentError("load_checkpoint: unexpected schema in " + path);
  Checkpoint c;
  const json& flow = j.at("flow");
  c.model.n = flow.at("n").get<int>();
  c.model.p = flow.at("p").get<int>();
  c.model.net = mlp_from_json(flow.at("net"));
  c.model.x_shift = vec_from_json(flow.at("x_shift"));
  c.model.x_scale = vec_from_json(flow.at("x_scale"));
  c.model.t_ref = flow.at("t_ref").get<double>();
  c.model.gap_ref = flow.at("gap_ref").get<double>();
  const json& metric = j.at("metric");
  c.metric.n = metric.at("n").get<int>();
  c.metric.p = metric.at("p").get<int>();
  c.metric.theta_net = mlp_from_json(metric.at("theta_net"));
  c.metric.alpha_coef = mat_from_json(metric.at("alpha_coef"));
  c.metric.diag_floor = metric.at("diag_floor").get<double>();
  c.metric.x_shift = vec_from_json(metric.at("x_shift"));
  c.metric.x_scale = vec_from_json(metric.at("x_scale"));
  c.schedule_gamma0 = j.value("schedule_gamma0", 0.0);
  c.config_hash = j.value("config_hash", "");
  for (const auto& e : j.value("history", json::array())) {
    TrainHistoryEntry h;
    h.step = e.at("step").get<int>();
    h.losses.fmm = e.at("fmm").get<double>();
    h.losses.ep = e.at("ep").get<double>();
    h.losses.sg = e.at("sg").get<double>();
    h.losses.ctr = e.at("ctr").get<double>();
    h.losses.cert = e.at("cert").get<double>();
    h.losses.ep_unweighted = h.losses.ep;
    c.history.push_back(h);
  }
  return c;
}

void save_measurements(const std::string& path,
                       const std::vector<std::pair<double, Vec>>& history) {
  auto out = open_out(path);
  for (const auto& [t, y] : history) {
    json rec;
    rec["t"] = t;
    rec["y"] = vec_to_json(y);
    out << rec.dump() << "\n";
  }
}

std::vector<std::pair<double, Vec>> load_measurements(const std::string& path) {
  auto in = open_in(path);
  std::vector<std::pair<double, Vec>> history;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json rec = json::parse(line);
    history.emplace_back(rec.at("t").get<double>(), vec_from_json(rec.at("y")));
  }
  return history;
}

void write_text_file(const std::string& path, const std::string& content) {
  auto out = open_out(path);
  out << content;
}

std::string config_hash_of(const std::string& canonical_json) {
  return hex64(fnv1a(canonical_json));
}

}  // namespace pfo
