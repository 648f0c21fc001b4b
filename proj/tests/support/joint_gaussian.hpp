#pragma once

// Brute-force oracle: stack (z_1..z_L, x_1..x_L) of a linear-Gaussian chain
// into one joint Gaussian and condition by dense linear algebra.

#include <vector>

#include <Eigen/Dense>

namespace condgap::testing {

struct JointGaussian {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
  Eigen::Index n = 0, m = 0, L = 0;

  Eigen::Index z_index(Eigen::Index t) const { return t * n; }          // t is 0-based
  Eigen::Index x_index(Eigen::Index t) const { return L * n + t * m; }  // t is 0-based
};

/// z_1 ~ N(mu1, sigma1), z_t = A z_{t-1} + N(0, Q), x_t = H z_t + N(0, R).
inline JointGaussian build_joint(const Eigen::MatrixXd& A, const Eigen::MatrixXd& Q, const Eigen::MatrixXd& H,
                                 const Eigen::MatrixXd& R, const Eigen::VectorXd& mu1, const Eigen::MatrixXd& sigma1,
                                 Eigen::Index L) {
  JointGaussian j;
  j.n = A.rows();
  j.m = H.rows();
  j.L = L;
  const Eigen::Index n = j.n, m = j.m, dim = L * (n + m);
  // every variable is a linear map of the independent sources (z_1, w_2..w_L, v_1..v_L)
  const Eigen::Index src = n + (L - 1) * n + L * m;
  Eigen::MatrixXd M = Eigen::MatrixXd::Zero(dim, src);
  Eigen::MatrixXd S = Eigen::MatrixXd::Zero(src, src);
  Eigen::VectorXd mu_src = Eigen::VectorXd::Zero(src);
  S.topLeftCorner(n, n) = sigma1;
  mu_src.head(n) = mu1;
  for (Eigen::Index t = 1; t < L; ++t) S.block(n + (t - 1) * n, n + (t - 1) * n, n, n) = Q;
  for (Eigen::Index t = 0; t < L; ++t) S.block(L * n + t * m, L * n + t * m, m, m) = R;

  Eigen::MatrixXd row = Eigen::MatrixXd::Zero(n, src);
  row.leftCols(n) = Eigen::MatrixXd::Identity(n, n);
  for (Eigen::Index t = 0; t < L; ++t) {
    if (t > 0) {
      row = A * row;
      row.block(0, n + (t - 1) * n, n, n) += Eigen::MatrixXd::Identity(n, n);
    }
    M.block(t * n, 0, n, src) = row;
    M.block(L * n + t * m, 0, m, src) = H * row;
    M.block(L * n + t * m, L * n + t * m, m, m) += Eigen::MatrixXd::Identity(m, m);
  }
  j.mean = M * mu_src;
  j.cov = M * S * M.transpose();
  return j;
}

struct Conditional {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

/// Distribution of variables `a` given observed values of variables `b`.
inline Conditional condition(const JointGaussian& j, const std::vector<Eigen::Index>& a,
                             const std::vector<Eigen::Index>& b, const Eigen::VectorXd& xb) {
  const auto na = static_cast<Eigen::Index>(a.size()), nb = static_cast<Eigen::Index>(b.size());
  Eigen::MatrixXd Saa(na, na), Sab(na, nb), Sbb(nb, nb);
  Eigen::VectorXd ma(na), mb(nb);
  for (Eigen::Index i = 0; i < na; ++i) {
    ma(i) = j.mean(a[i]);
    for (Eigen::Index k = 0; k < na; ++k) Saa(i, k) = j.cov(a[i], a[k]);
    for (Eigen::Index k = 0; k < nb; ++k) Sab(i, k) = j.cov(a[i], b[k]);
  }
  for (Eigen::Index i = 0; i < nb; ++i) {
    mb(i) = j.mean(b[i]);
    for (Eigen::Index k = 0; k < nb; ++k) Sbb(i, k) = j.cov(b[i], b[k]);
  }
  if (nb == 0) return {ma, Saa};
  const auto solver = Sbb.completeOrthogonalDecomposition();
  return {ma + Sab * solver.solve(xb - mb), Saa - Sab * solver.solve(Sab.transpose())};
}

inline std::vector<Eigen::Index> range_indices(Eigen::Index begin, Eigen::Index count) {
  std::vector<Eigen::Index> out;
  for (Eigen::Index i = 0; i < count; ++i) out.push_back(begin + i);
  return out;
}

}  // namespace condgap::testing
