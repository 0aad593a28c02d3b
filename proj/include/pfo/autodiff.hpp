#pragma once

#include "pfo/common.hpp"

#include <functional>
#include <utility>
#include <vector>

namespace pfo::ad {

using pfo::Mat;
using pfo::Vec;

// Reverse-mode tape over matrix-valued nodes. A fresh tape is built for every
// loss evaluation; nodes are created in topological order so the backward
// sweep is a single reverse pass. Scalars are 1x1 matrices.
class Tape {
 public:
  struct Node {
    Mat value;
    Mat grad;  // empty until first accumulation
    bool needs_grad = false;
    std::function<void(Tape&, const Mat&)> back;  // (tape, upstream grad of this node)
  };

  int constant(Mat v);
  int leaf(Mat v);  // parameter node, participates in gradients

  const Mat& val(int id) const { return nodes_[static_cast<size_t>(id)].value; }
  double scalar(int id) const;
  const Mat& grad_of(int id) const { return nodes_[static_cast<size_t>(id)].grad; }
  bool needs_grad(int id) const { return nodes_[static_cast<size_t>(id)].needs_grad; }
  size_t size() const { return nodes_.size(); }

  void accum(int id, const Mat& g);
  void backward(int loss_id);

  // --- elementary ops -------------------------------------------------------
  int add(int a, int b);
  int sub(int a, int b);
  int scale(int a, double c);
  int neg(int a) { return scale(a, -1.0); }
  int matmul(int a, int b);
  int transpose(int a);
  int cwise_mul(int a, int b);
  int affine(int x, int w, int b);   // X*W^T + 1*b^T ; W: out x in, b: out x 1
  int linmap(int x, int w);          // X*W^T
  int tanh_op(int a);
  int one_minus_sq(int t);           // 1 - T.^2  (tanh derivative given T = tanh)
  int sigmoid(int a);
  int softplus(int a);
  int hcat(const std::vector<int>& parts);
  int cols(int a, int j0, int len);
  int row(int a, int i);
  int reshape_row(int a, int r, int c);  // 1 x (r*c) row-major -> r x c
  int sumsq(int a);                      // scalar
  int sum(int a);                        // scalar
  int mul_scalar(int s, int a);          // s (1x1) * A
  int log_scalar(int a);
  int max_of(const std::vector<int>& scalars);
  int min_of(const std::vector<int>& scalars);

  // --- spectral ops (exact closed-form backward rules) ----------------------
  int eig_max(int a);      // largest eigenvalue of sym(A); grad = u u^T
  int eig_min(int a);      // smallest eigenvalue of sym(A); grad = u u^T
  int psd_penalty(int a);  // ||[sym(A)]_+||_F^2 ; grad = 2 [sym(A)]_+

 private:
  int push(Mat v, bool needs, std::function<void(Tape&, const Mat&)> back);
  std::vector<Node> nodes_;
};

// --- small MLP with tanh hidden layers -------------------------------------
struct MlpArch {
  int in = 0;
  int out = 0;
  std::vector<int> hidden;
  std::vector<int> dims() const;
};

struct MlpParams {
  MlpArch arch;
  std::vector<Mat> W;  // W[l]: dims[l+1] x dims[l]
  std::vector<Vec> b;  // b[l]: dims[l+1]

  static MlpParams init(const MlpArch& arch, pfo::Rng& rng, double weight_scale,
                        bool zero_last_layer);
  int layer_count() const { return static_cast<int>(W.size()); }
  int parameter_count() const;
  Vec flatten() const;
  void unflatten(const Vec& theta);
};

// Tape-resident parameter handles.
struct MlpVars {
  std::vector<int> W, b;
};
MlpVars insert_params(Tape& tape, const MlpParams& p);

// Forward pass keeping the activation derivatives needed for on-tape JVPs.
struct MlpTrace {
  int out = -1;
  std::vector<int> dphi;  // per hidden layer: 1 - tanh(z)^2 node
};
MlpTrace mlp_forward(Tape& tape, const MlpVars& vars, int x);
// Directional derivative of the network output w.r.t. its input, along dx
// (same shape as x). Reuses the trace so reverse-mode sees one graph.
int mlp_jvp(Tape& tape, const MlpVars& vars, const MlpTrace& trace, int dx);

// Plain (tape-free) evaluation for inference paths.
Mat mlp_eval(const MlpParams& p, const Mat& x);
std::pair<Mat, Mat> mlp_eval_jvp(const MlpParams& p, const Mat& x, const Mat& dx);

}  // namespace pfo::ad
