#pragma once
// Rank-4 tensors indexed 0..d-1 and small helpers. The vertical axis is d-1.

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <vector>

#include "memhom/errors.hpp"

namespace memhom {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

struct Tensor4 {
  int dim = 0;
  std::vector<double> data;

  Tensor4() = default;
  explicit Tensor4(int d) : dim(d), data(static_cast<size_t>(d * d * d * d), 0.0) {}

  double& operator()(int i, int j, int k, int l) { return data[idx(i, j, k, l)]; }
  double operator()(int i, int j, int k, int l) const { return data[idx(i, j, k, l)]; }

  size_t idx(int i, int j, int k, int l) const {
    return static_cast<size_t>(((i * dim + j) * dim + k) * dim + l);
  }

  double max_abs() const {
    double m = 0;
    for (double v : data) m = std::max(m, std::abs(v));
    return m;
  }

  // Restriction to the first m indices (in-plane block).
  Tensor4 leading(int m) const {
    Tensor4 t(m);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < m; ++j)
        for (int k = 0; k < m; ++k)
          for (int l = 0; l < m; ++l) t(i, j, k, l) = (*this)(i, j, k, l);
    return t;
  }

  // E : T : F with T acting as T_{ijkl} E_ij F_kl.
  double contract(const Mat& E, const Mat& F) const {
    double s = 0;
    for (int i = 0; i < dim; ++i)
      for (int j = 0; j < dim; ++j)
        for (int k = 0; k < dim; ++k)
          for (int l = 0; l < dim; ++l) s += (*this)(i, j, k, l) * E(i, j) * F(k, l);
    return s;
  }

  Mat apply(const Mat& E) const {  // (T E)_ij = T_ijkl E_kl
    Mat S = Mat::Zero(dim, dim);
    for (int i = 0; i < dim; ++i)
      for (int j = 0; j < dim; ++j)
        for (int k = 0; k < dim; ++k)
          for (int l = 0; l < dim; ++l) S(i, j) += (*this)(i, j, k, l) * E(k, l);
    return S;
  }
};

inline Mat unit_sym(int d, int i, int j) {
  Mat M = Mat::Zero(d, d);
  M(i, j) += 0.5;
  M(j, i) += 0.5;
  return M;
}

inline Tensor4 isotropic_tensor(int d, double lambda, double mu) {
  Tensor4 A(d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j)
      for (int k = 0; k < d; ++k)
        for (int l = 0; l < d; ++l)
          A(i, j, k, l) = lambda * (i == j) * (k == l) + mu * ((i == k) * (j == l) + (i == l) * (j == k));
  return A;
}

// Voigt ordering: 2D (00,11,01); 3D (00,11,22,12,02,01).
inline std::vector<std::array<int, 2>> voigt_pairs(int d) {
  if (d == 2) return {{0, 0}, {1, 1}, {0, 1}};
  return {{0, 0}, {1, 1}, {2, 2}, {1, 2}, {0, 2}, {0, 1}};
}

inline Tensor4 tensor_from_voigt(int d, const Mat& C) {
  auto vp = voigt_pairs(d);
  if (C.rows() != static_cast<int>(vp.size()) || C.cols() != C.rows())
    throw ShapeError("Voigt matrix has wrong size for dimension");
  Tensor4 A(d);
  for (size_t I = 0; I < vp.size(); ++I)
    for (size_t J = 0; J < vp.size(); ++J) {
      auto [i, j] = vp[I];
      auto [k, l] = vp[J];
      double v = C(I, J);
      A(i, j, k, l) = v; A(j, i, k, l) = v; A(i, j, l, k) = v; A(j, i, l, k) = v;
    }
  return A;
}

inline Mat voigt_matrix(const Tensor4& A) {
  auto vp = voigt_pairs(A.dim);
  int n = static_cast<int>(vp.size());
  Mat C(n, n);
  for (int I = 0; I < n; ++I)
    for (int J = 0; J < n; ++J) C(I, J) = A(vp[I][0], vp[I][1], vp[J][0], vp[J][1]);
  return C;
}

// Mandel matrix: quadratic form on symmetric matrices in an orthonormal basis.
inline Mat mandel_matrix(const Tensor4& A) {
  auto vp = voigt_pairs(A.dim);
  int n = static_cast<int>(vp.size());
  Mat C(n, n);
  for (int I = 0; I < n; ++I)
    for (int J = 0; J < n; ++J) {
      auto [i, j] = vp[I];
      auto [k, l] = vp[J];
      double fi = (i == j) ? 1.0 : std::sqrt(2.0);
      double fj = (k == l) ? 1.0 : std::sqrt(2.0);
      C(I, J) = fi * fj * A(i, j, k, l);
    }
  return C;
}

// Largest violation of minor and major symmetry.
inline double symmetry_defect(const Tensor4& A) {
  double m = 0;
  int d = A.dim;
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j)
      for (int k = 0; k < d; ++k)
        for (int l = 0; l < d; ++l) {
          double a = A(i, j, k, l);
          m = std::max({m, std::abs(a - A(j, i, k, l)), std::abs(a - A(i, j, l, k)),
                        std::abs(a - A(k, l, i, j))});
        }
  return m;
}

inline double major_symmetry_defect(const Tensor4& A) {
  double m = 0;
  int d = A.dim;
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j)
      for (int k = 0; k < d; ++k)
        for (int l = 0; l < d; ++l) m = std::max(m, std::abs(A(i, j, k, l) - A(k, l, i, j)));
  return m;
}

inline double coercivity_constant(const Tensor4& A) {
  Eigen::SelfAdjointEigenSolver<Mat> es(mandel_matrix(A));
  return es.eigenvalues().minCoeff();
}

}  // namespace memhom
