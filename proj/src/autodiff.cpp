#include "pfo/autodiff.hpp"

#include "pfo/linalg.hpp"

#include <cmath>

namespace pfo::ad {

int Tape::push(Mat v, bool needs, std::function<void(Tape&, const Mat&)> back) {
  Node n;
  n.value = std::move(v);
  n.needs_grad = needs;
  n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

int Tape::constant(Mat v) { return push(std::move(v), false, nullptr); }
int Tape::leaf(Mat v) { return push(std::move(v), true, nullptr); }

double Tape::scalar(int id) const {
  const Mat& m = val(id);
  if (m.rows() != 1 || m.cols() != 1) throw ArgumentError("scalar() on non-1x1 node");
  return m(0, 0);
}

void Tape::accum(int id, const Mat& g) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (!n.needs_grad) return;
  if (n.grad.size() == 0)
    n.grad = g;
  else
    n.grad += g;
}

void Tape::backward(int loss_id) {
  if (val(loss_id).rows() != 1 || val(loss_id).cols() != 1)
    throw ArgumentError("backward() expects a scalar loss node");
  accum(loss_id, Mat::Ones(1, 1));
  for (int id = loss_id; id >= 0; --id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.back && n.needs_grad && n.grad.size() != 0) n.back(*this, n.grad);
  }
}

int Tape::add(int a, int b) {
  bool needs = needs_grad(a) || needs_grad(b);
  return push(val(a) + val(b), needs, [a, b](Tape& t, const Mat& g) {
    t.accum(a, g);
    t.accum(b, g);
  });
}

int Tape::sub(int a, int b) {
  bool needs = needs_grad(a) || needs_grad(b);
  return push(val(a) - val(b), needs, [a, b](Tape& t, const Mat& g) {
    t.accum(a, g);
    t.accum(b, -g);
  });
}

int Tape::scale(int a, double c) {
  return push(c * val(a), needs_grad(a), [a, c](Tape& t, const Mat& g) { t.accum(a, c * g); });
}

int Tape::matmul(int a, int b) {
  bool needs = needs_grad(a) || needs_grad(b);
  return push(val(a) * val(b), needs, [a, b](Tape& t, const Mat& g) {
    t.accum(a, g * t.val(b).transpose());
    t.accum(b, t.val(a).transpose() * g);
  });
}

int Tape::transpose(int a) {
  return push(val(a).transpose(), needs_grad(a),
              [a](Tape& t, const Mat& g) { t.accum(a, g.transpose()); });
}

int Tape::cwise_mul(int a, int b) {
  bool needs = needs_grad(a) || needs_grad(b);
  return push(val(a).cwiseProduct(val(b)), needs, [a, b](Tape& t, const Mat& g) {
    t.accum(a, g.cwiseProduct(t.val(b)));
    t.accum(b, g.cwiseProduct(t.val(a)));
  });
}

int Tape::affine(int x, int w, int b) {
  const Mat& X = val(x);
  const Mat& W = val(w);
  const Mat& B = val(b);  // out x 1
  Mat v = X * W.transpose();
  v.rowwise() += B.col(0).transpose();
  bool needs = needs_grad(x) || needs_grad(w) || needs_grad(b);
  return push(std::move(v), needs, [x, w, b](Tape& t, const Mat& g) {
    t.accum(x, g * t.val(w));
    t.accum(w, g.transpose() * t.val(x));
    t.accum(b, g.colwise().sum().transpose());
  });
}

int Tape::linmap(int x, int w) {
  bool needs = needs_grad(x) || needs_grad(w);
  return push(val(x) * val(w).transpose(), needs, [x, w](Tape& t, const Mat& g) {
    t.accum(x, g * t.val(w));
    t.accum(w, g.transpose() * t.val(x));
  });
}

int Tape::tanh_op(int a) {
  Mat v = val(a).array().tanh().matrix();
  int id = push(std::move(v), needs_grad(a), nullptr);
  nodes_[static_cast<size_t>(id)].back = [a, id](Tape& t, const Mat& g) {
    const Mat& y = t.val(id);
    t.accum(a, g.cwiseProduct((1.0 - y.array().square()).matrix()));
  };
  return id;
}

int Tape::one_minus_sq(int tnode) {
  Mat v = (1.0 - val(tnode).array().square()).matrix();
  return push(std::move(v), needs_grad(tnode), [tnode](Tape& t, const Mat& g) {
    t.accum(tnode, g.cwiseProduct((-2.0 * t.val(tnode).array()).matrix()));
  });
}

int Tape::sigmoid(int a) {
  Mat v = (1.0 / (1.0 + (-val(a).array()).exp())).matrix();
  int id = push(std::move(v), needs_grad(a), nullptr);
  nodes_[static_cast<size_t>(id)].back = [a, id](Tape& t, const Mat& g) {
    const auto s = t.val(id).array();
    t.accum(a, g.cwiseProduct((s * (1.0 - s)).matrix()));
  };
  return id;
}

int Tape::softplus(int a) {
  // log(1 + exp(x)) computed stably as max(x,0) + log1p(exp(-|x|))
  Mat v = val(a).unaryExpr([](double x) {
    return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
  });
  return push(std::move(v), needs_grad(a), [a](Tape& t, const Mat& g) {
    Mat s = (1.0 / (1.0 + (-t.val(a).array()).exp())).matrix();
    t.accum(a, g.cwiseProduct(s));
  });
}

int Tape::hcat(const std::vector<int>& parts) {
  if (parts.empty()) throw ArgumentError("hcat of zero parts");
  Eigen::Index rows = val(parts[0]).rows();
  Eigen::Index total = 0;
  bool needs = false;
  for (int p : parts) {
    if (val(p).rows() != rows) throw ArgumentError("hcat row mismatch");
    total += val(p).cols();
    needs = needs || needs_grad(p);
  }
  Mat v(rows, total);
  Eigen::Index off = 0;
  for (int p : parts) {
    v.middleCols(off, val(p).cols()) = val(p);
    off += val(p).cols();
  }
  return push(std::move(v), needs, [parts](Tape& t, const Mat& g) {
    Eigen::Index off2 = 0;
    for (int p : parts) {
      Eigen::Index c = t.val(p).cols();
      t.accum(p, g.middleCols(off2, c));
      off2 += c;
    }
  });
}

int Tape::cols(int a, int j0, int len) {
  Mat v = val(a).middleCols(j0, len);
  return push(std::move(v), needs_grad(a), [a, j0, len](Tape& t, const Mat& g) {
    Mat pad = Mat::Zero(t.val(a).rows(), t.val(a).cols());
    pad.middleCols(j0, len) = g;
    t.accum(a, pad);
  });
}

int Tape::row(int a, int i) {
  Mat v = val(a).row(i);
  return push(std::move(v), needs_grad(a), [a, i](Tape& t, const Mat& g) {
    Mat pad = Mat::Zero(t.val(a).rows(), t.val(a).cols());
    pad.row(i) = g;
    t.accum(a, pad);
  });
}

int Tape::reshape_row(int a, int r, int c) {
  const Mat& src = val(a);
  if (src.rows() != 1 || src.cols() != r * c) throw ArgumentError("reshape_row shape mismatch");
  Mat v(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) v(i, j) = src(0, i * c + j);
  return push(std::move(v), needs_grad(a), [a, r, c](Tape& t, const Mat& g) {
    Mat flat(1, r * c);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) flat(0, i * c + j) = g(i, j);
    t.accum(a, flat);
  });
}

int Tape::sumsq(int a) {
  Mat v(1, 1);
  v(0, 0) = val(a).squaredNorm();
  return push(std::move(v), needs_grad(a), [a](Tape& t, const Mat& g) {
    t.accum(a, 2.0 * g(0, 0) * t.val(a));
  });
}

int Tape::sum(int a) {
  Mat v(1, 1);
  v(0, 0) = val(a).sum();
  return push(std::move(v), needs_grad(a), [a](Tape& t, const Mat& g) {
    t.accum(a, Mat::Constant(t.val(a).rows(), t.val(a).cols(), g(0, 0)));
  });
}

int Tape::mul_scalar(int s, int a) {
  double sv = scalar(s);
  bool needs = needs_grad(s) || needs_grad(a);
  return push(sv * val(a), needs, [s, a](Tape& t, const Mat& g) {
    Mat gs(1, 1);
    gs(0, 0) = g.cwiseProduct(t.val(a)).sum();
    t.accum(s, gs);
    t.accum(a, t.val(s)(0, 0) * g);
  });
}

int Tape::log_scalar(int a) {
  Mat v(1, 1);
  v(0, 0) = std::log(scalar(a));
  return push(std::move(v), needs_grad(a), [a](Tape& t, const Mat& g) {
    Mat ga(1, 1);
    ga(0, 0) = g(0, 0) / t.val(a)(0, 0);
    t.accum(a, ga);
  });
}

int Tape::max_of(const std::vector<int>& scalars) {
  if (scalars.empty()) throw ArgumentError("max_of empty set");
  int arg = scalars[0];
  bool needs = false;
  for (int s : scalars) {
    if (scalar(s) > scalar(arg)) arg = s;
    needs = needs || needs_grad(s);
  }
  Mat v(1, 1);
  v(0, 0) = scalar(arg);
  return push(std::move(v), needs, [arg](Tape& t, const Mat& g) { t.accum(arg, g); });
}

int Tape::min_of(const std::vector<int>& scalars) {
  if (scalars.empty()) throw ArgumentError("min_of empty set");
  int arg = scalars[0];
  bool needs = false;
  for (int s : scalars) {
    if (scalar(s) < scalar(arg)) arg = s;
    needs = needs || needs_grad(s);
  }
  Mat v(1, 1);
  v(0, 0) = scalar(arg);
  return push(std::move(v), needs, [arg](Tape& t, const Mat& g) { t.accum(arg, g); });
}

int Tape::eig_max(int a) {
  auto es = eig_sym(val(a));
  int n = static_cast<int>(es.eigenvalues().size());
  Vec u = es.eigenvectors().col(n - 1);
  Mat v(1, 1);
  v(0, 0) = es.eigenvalues()(n - 1);
  Mat outer = u * u.transpose();
  return push(std::move(v), needs_grad(a), [a, outer](Tape& t, const Mat& g) {
    t.accum(a, g(0, 0) * outer);
  });
}

int Tape::eig_min(int a) {
  auto es = eig_sym(val(a));
  Vec u = es.eigenvectors().col(0);
  Mat v(1, 1);
  v(0, 0) = es.eigenvalues()(0);
  Mat outer = u * u.transpose();
  return push(std::move(v), needs_grad(a), [a, outer](Tape& t, const Mat& g) {
    t.accum(a, g(0, 0) * outer);
  });
}

int Tape::psd_penalty(int a) {
  // f(A) = sum_i max(lambda_i, 0)^2 over eigenvalues of sym(A).
  // Spectral-function gradient: df/dA = 2 [sym(A)]_+ (C^1 at crossings).
  Mat plus = psd_project(val(a));
  Mat v(1, 1);
  v(0, 0) = plus.squaredNorm();
  return push(std::move(v), needs_grad(a), [a, plus](Tape& t, const Mat& g) {
    t.accum(a, 2.0 * g(0, 0) * plus);
  });
}

// ---------------------------------------------------------------------------

std::vector<int> MlpArch::dims() const {
  std::vector<int> d;
  d.push_back(in);
  for (int h : hidden) d.push_back(h);
  d.push_back(out);
  return d;
}

MlpParams MlpParams::init(const MlpArch& arch, pfo::Rng& rng, double weight_scale,
                          bool zero_last_layer) {
  MlpParams p;
  p.arch = arch;
  auto d = arch.dims();
  for (size_t l = 0; l + 1 < d.size(); ++l) {
    double s = weight_scale / std::sqrt(static_cast<double>(d[l]));
    Mat W = s * rng.normal_mat(d[l + 1], d[l]);
    Vec b = Vec::Zero(d[l + 1]);
    if (zero_last_layer && l + 2 == d.size()) W.setZero();
    p.W.push_back(std::move(W));
    p.b.push_back(std::move(b));
  }
  return p;
}

int MlpParams::parameter_count() const {
  int n = 0;
  for (size_t l = 0; l < W.size(); ++l)
    n += static_cast<int>(W[l].size() + b[l].size());
  return n;
}

Vec MlpParams::flatten() const {
  Vec theta(parameter_count());
  int k = 0;
  for (size_t l = 0; l < W.size(); ++l) {
    for (Eigen::Index i = 0; i < W[l].rows(); ++i)
      for (Eigen::Index j = 0; j < W[l].cols(); ++j) theta[k++] = W[l](i, j);
    for (Eigen::Index i = 0; i < b[l].size(); ++i) theta[k++] = b[l][i];
  }
  return theta;
}

void MlpParams::unflatten(const Vec& theta) {
  int k = 0;
  for (size_t l = 0; l < W.size(); ++l) {
    for (Eigen::Index i = 0; i < W[l].rows(); ++i)
      for (Eigen::Index j = 0; j < W[l].cols(); ++j) W[l](i, j) = theta[k++];
    for (Eigen::Index i = 0; i < b[l].size(); ++i) b[l][i] = theta[k++];
  }
}

MlpVars insert_params(Tape& tape, const MlpParams& p) {
  MlpVars v;
  for (size_t l = 0; l < p.W.size(); ++l) {
    v.W.push_back(tape.leaf(p.W[l]));
    v.b.push_back(tape.leaf(p.b[l]));
  }
  return v;
}

MlpTrace mlp_forward(Tape& tape, const MlpVars& vars, int x) {
  MlpTrace tr;
  int h = x;
  int L = static_cast<int>(vars.W.size());
  for (int l = 0; l < L; ++l) {
    int z = tape.affine(h, vars.W[l], vars.b[l]);
    if (l + 1 < L) {
      int t = tape.tanh_op(z);
      tr.dphi.push_back(tape.one_minus_sq(t));
      h = t;
    } else {
      h = z;
    }
  }
  tr.out = h;
  return tr;
}

int mlp_jvp(Tape& tape, const MlpVars& vars, const MlpTrace& trace, int dx) {
  int d = dx;
  int L = static_cast<int>(vars.W.size());
  for (int l = 0; l < L; ++l) {
    int dz = tape.linmap(d, vars.W[l]);
    if (l + 1 < L)
      d = tape.cwise_mul(trace.dphi[static_cast<size_t>(l)], dz);
    else
      d = dz;
  }
  return d;
}

Mat mlp_eval(const MlpParams& p, const Mat& x) {
  Mat h = x;
  int L = p.layer_count();
  for (int l = 0; l < L; ++l) {
    Mat z = h * p.W[static_cast<size_t>(l)].transpose();
    z.rowwise() += p.b[static_cast<size_t>(l)].transpose();
    h = (l + 1 < L) ? Mat(z.array().tanh().matrix()) : z;
  }
  return h;
}

std::pair<Mat, Mat> mlp_eval_jvp(const MlpParams& p, const Mat& x, const Mat& dx) {
  Mat h = x, d = dx;
  int L = p.layer_count();
  for (int l = 0; l < L; ++l) {
    Mat z = h * p.W[static_cast<size_t>(l)].transpose();
    z.rowwise() += p.b[static_cast<size_t>(l)].transpose();
    Mat dz = d * p.W[static_cast<size_t>(l)].transpose();
    if (l + 1 < L) {
      Mat t = z.array().tanh().matrix();
      d = dz.cwiseProduct((1.0 - t.array().square()).matrix());
      h = t;
    } else {
      h = z;
      d = dz;
    }
  }
  return {h, d};
}

}  // namespace pfo::ad
