#pragma once

#include "pfo/common.hpp"

namespace pfo {

inline Mat sym(const Mat& a) { return 0.5 * (a + a.transpose()); }

// Symmetric eigendecomposition helpers. All PSD manipulation goes through
// these so eigenvalue clipping is applied in one place.
inline Eigen::SelfAdjointEigenSolver<Mat> eig_sym(const Mat& a) {
  Eigen::SelfAdjointEigenSolver<Mat> es(sym(a));
  if (es.info() != Eigen::Success) throw NumericError("symmetric eigendecomposition failed");
  return es;
}

// Principal square root with negative eigenvalues clipped to zero.
inline Mat sqrt_psd(const Mat& a) {
  auto es = eig_sym(a);
  Vec lam = es.eigenvalues().cwiseMax(0.0);
  return es.eigenvectors() * lam.cwiseSqrt().asDiagonal() * es.eigenvectors().transpose();
}

// Projection onto the PSD cone (Frobenius-optimal): zero out negative eigenvalues.
inline Mat psd_project(const Mat& a) {
  auto es = eig_sym(a);
  Vec lam = es.eigenvalues().cwiseMax(0.0);
  return es.eigenvectors() * lam.asDiagonal() * es.eigenvectors().transpose();
}

inline double min_eigenvalue(const Mat& a) { return eig_sym(a).eigenvalues().minCoeff(); }
inline double max_eigenvalue(const Mat& a) { return eig_sym(a).eigenvalues().maxCoeff(); }

// Clip a nearly-PSD matrix to PSD and symmetrize.
inline Mat clip_psd(const Mat& a, double floor_eig = 0.0) {
  auto es = eig_sym(a);
  Vec lam = es.eigenvalues().cwiseMax(floor_eig);
  return es.eigenvectors() * lam.asDiagonal() * es.eigenvectors().transpose();
}

inline bool is_psd(const Mat& a, double tol = 1e-10) { return min_eigenvalue(a) >= -tol; }

}  // namespace pfo
