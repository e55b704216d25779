#pragma once
/**
 * @file linsolve.hpp
 * @brief SPD and symmetric saddle-point solvers.
 *
 * solve_spd: Jacobi-preconditioned CG with an optional declared kernel.
 * solve_saddle: [A B^T; B 0] by bordered sparse LU (direct) or block-diagonally
 * preconditioned MINRES (iterative). A constant pressure kernel is handled by a
 * weighted mean-zero gauge.
 */

#include <Eigen/Sparse>
#include <Eigen/SparseLU>

#include <cmath>
#include <functional>
#include <fstream>
#include <iomanip>
#include <memory>
#include <string>
#include <vector>

#include "memhom/errors.hpp"
#include "memhom/tensor.hpp"

namespace memhom {

using SpMat = Eigen::SparseMatrix<double>;

struct SolveStats {
  std::string method;
  int iterations = 0;
  double residual = 0;            // relative residual (momentum for saddle systems)
  double continuity_residual = 0; // saddle only
};

struct SparseSystem {
  SpMat matrix;
  Vec rhs;
  std::vector<Vec> kernel;   // declared null-space basis (may be empty)
  Vec gauge_weights;         // weights for the orthogonality gauge; empty = Euclidean
};

struct SpdResult {
  Vec x;
  SolveStats stats;
};

namespace detail {

// Orthonormal basis (Euclidean) of the kernel span.
inline std::vector<Vec> orthonormal(const std::vector<Vec>& K, const Vec* w) {
  std::vector<Vec> Q;
  for (const Vec& k : K) {
    Vec v = k;
    for (int pass = 0; pass < 2; ++pass)
      for (const Vec& q : Q) {
        double num = w ? (q.array() * w->array() * v.array()).sum() : q.dot(v);
        v -= num * q;
      }
    double nrm = w ? std::sqrt((v.array() * w->array() * v.array()).sum()) : v.norm();
    if (nrm > 1e-12 * (w ? std::sqrt((k.array() * w->array() * k.array()).sum()) : k.norm()))
      Q.push_back(v / nrm);
  }
  return Q;
}

inline void project_out(Vec& x, const std::vector<Vec>& Q, const Vec* w) {
  for (const Vec& q : Q) {
    double c = w ? (q.array() * w->array() * x.array()).sum() : q.dot(x);
    x -= c * q;
  }
}

}  // namespace detail

// Enforce orthogonality of x to the kernel in the gauge inner product (idempotent).
inline void apply_gauge(Vec& x, const std::vector<Vec>& kernel, const Vec& weights) {
  const Vec* w = weights.size() ? &weights : nullptr;
  auto Q = detail::orthonormal(kernel, w);
  detail::project_out(x, Q, w);
}

inline SpdResult solve_spd(const SparseSystem& sys, double tol = 1e-10, int max_iter = 20000) {
  const SpMat& A = sys.matrix;
  int n = static_cast<int>(A.rows());
  if (A.cols() != n || sys.rhs.size() != n) throw ShapeError("solve_spd: size mismatch");
  Vec b = sys.rhs;
  double bn = b.norm();
  auto Qe = detail::orthonormal(sys.kernel, nullptr);
  for (const Vec& q : Qe)
    if (bn > 0 && std::abs(q.dot(b)) > 10 * tol * bn)
      throw IncompatibleRHS("right-hand side has a kernel component " +
                            std::to_string(std::abs(q.dot(b)) / bn));
  detail::project_out(b, Qe, nullptr);
  SpdResult res;
  res.stats.method = "pcg-jacobi";
  res.x = Vec::Zero(n);
  if (b.norm() == 0) return res;
  Vec dinv(n);
  for (int i = 0; i < n; ++i) {
    double d = A.coeff(i, i);
    dinv[i] = d > 0 ? 1.0 / d : 1.0;
  }
  Vec r = b, z = dinv.cwiseProduct(r), p = z;
  double rz = r.dot(z), bnorm = b.norm();
  int it = 0;
  double rel = 1;
  while (it < max_iter) {
    Vec Ap = A * p;
    double alpha = rz / p.dot(Ap);
    res.x += alpha * p;
    r -= alpha * Ap;
    ++it;
    rel = r.norm() / bnorm;
    if (rel <= tol) break;
    z = dinv.cwiseProduct(r);
    double rz2 = r.dot(z);
    p = z + (rz2 / rz) * p;
    rz = rz2;
  }
  // Recompute the true residual before judging convergence.
  rel = (b - A * res.x).norm() / bnorm;
  if (rel > tol) throw NoConvergence(it, rel);
  Vec gw = sys.gauge_weights;
  apply_gauge(res.x, sys.kernel, gw);
  res.stats.iterations = it;
  res.stats.residual = rel;
  return res;
}

// --------------------------------------------------------------------- saddle

struct SaddleSystem {
  SpMat A;        // n x n, symmetric positive (semi-)definite velocity block
  SpMat B;        // m x n constraint block
  Vec f, g;       // right-hand sides
  bool pressure_kernel = false;  // constant pressure in the kernel
  Vec pressure_weights;          // gauge and preconditioner weights (default ones)
};

struct SaddleResult {
  Vec u, p;
  SolveStats stats;
};

enum class SaddleMethod { Auto, Direct, Iterative };

// Options shared by the cell solvers (direct path auto-selected for small systems).
struct CellSolveOptions {
  double tol = 1e-10;
  int max_iter = 50000;
  SaddleMethod method = SaddleMethod::Auto;
};

inline std::pair<double, double> saddle_residuals(const SaddleSystem& s, const Vec& u, const Vec& p) {
  Vec r1 = s.A * u + s.B.transpose() * p - s.f;
  Vec r2 = s.B * u - s.g;
  double fn = std::max(s.f.norm(), 1e-300), gn = std::max(s.g.norm(), 1e-300);
  double scale = std::max(fn, gn);
  if (s.f.norm() == 0 && s.g.norm() == 0) scale = 1.0;
  return {r1.norm() / scale, r2.norm() / scale};
}

inline void check_velocity_block(const SpMat& A) {
  for (int i = 0; i < A.rows(); ++i)
    if (!(A.coeff(i, i) > 0))
      throw SingularBlock("velocity block has a non-positive diagonal entry at row " + std::to_string(i));
}

// Monolithic [A B^T; B 0] matrix, bordered by the weight row when the
// pressure kernel is constant.
inline SpMat assemble_saddle_matrix(const SaddleSystem& s) {
  const int n = static_cast<int>(s.A.rows()), m = static_cast<int>(s.B.rows());
  const int extra = s.pressure_kernel ? 1 : 0;
  Vec w = s.pressure_weights.size() ? s.pressure_weights : Vec::Ones(m);
  std::vector<Eigen::Triplet<double>> t;
  t.reserve(s.A.nonZeros() + 2 * s.B.nonZeros() + 2 * m);
  for (int k = 0; k < s.A.outerSize(); ++k)
    for (SpMat::InnerIterator it(s.A, k); it; ++it) t.emplace_back(it.row(), it.col(), it.value());
  for (int k = 0; k < s.B.outerSize(); ++k)
    for (SpMat::InnerIterator it(s.B, k); it; ++it) {
      t.emplace_back(n + it.row(), it.col(), it.value());
      t.emplace_back(it.col(), n + it.row(), it.value());
    }
  if (extra)
    for (int i = 0; i < m; ++i) {
      t.emplace_back(n + m, n + i, w[i]);
      t.emplace_back(n + i, n + m, w[i]);
    }
  SpMat K(n + m + extra, n + m + extra);
  K.setFromTriplets(t.begin(), t.end());
  return K;
}

// Factorized saddle operator for repeated right-hand sides.
class SaddleFactorization {
 public:
  SaddleFactorization() = default;
  explicit SaddleFactorization(const SaddleSystem& s) { compute(s); }

  void compute(const SaddleSystem& s) {
    check_velocity_block(s.A);
    n_ = static_cast<int>(s.A.rows());
    m_ = static_cast<int>(s.B.rows());
    kernel_ = s.pressure_kernel;
    w_ = s.pressure_weights.size() ? s.pressure_weights : Vec::Ones(m_);
    K_ = assemble_saddle_matrix(s);
    K_.makeCompressed();
    lu_ = std::make_shared<Eigen::SparseLU<SpMat, Eigen::COLAMDOrdering<int>>>();
    lu_->analyzePattern(K_);
    lu_->factorize(K_);
    if (lu_->info() != Eigen::Success) throw SingularBlock("sparse LU failed: " + lu_->lastErrorMessage());
  }

  std::pair<Vec, Vec> solve(const Vec& f, const Vec& g) const {
    int extra = kernel_ ? 1 : 0;
    Vec rhs = Vec::Zero(n_ + m_ + extra);
    rhs.head(n_) = f;
    rhs.segment(n_, m_) = g;
    Vec x = lu_->solve(rhs);
    if (lu_->info() != Eigen::Success) throw SingularBlock("sparse LU solve failed");
    Vec u = x.head(n_), p = x.segment(n_, m_);
    if (kernel_) gauge(p);
    return {u, p};
  }

  void gauge(Vec& p) const {
    double wsum = w_.sum();
    if (wsum > 0) p.array() -= w_.dot(p) / wsum;
  }

  int rows() const { return n_; }
  int cols() const { return m_; }

 private:
  int n_ = 0, m_ = 0;
  bool kernel_ = false;
  Vec w_;
  SpMat K_;
  std::shared_ptr<Eigen::SparseLU<SpMat, Eigen::COLAMDOrdering<int>>> lu_;
};

// Preconditioned MINRES for K x = b with SPD diagonal preconditioner Minv.
inline Vec minres(const std::function<Vec(const Vec&)>& K, const Vec& b, const Vec& Minv, double tol,
                  int max_iter, int* iters, double* relres) {
  int n = static_cast<int>(b.size());
  Vec x = Vec::Zero(n);
  double bnorm = b.norm();
  *iters = 0;
  *relres = 0;
  if (bnorm == 0) return x;
  Vec r1 = b, y = Minv.cwiseProduct(r1);
  double beta1 = std::sqrt(r1.dot(y));
  double beta = beta1, oldb = 0, dbar = 0, epsln = 0, phibar = beta1, cs = -1, sn = 0;
  Vec r2 = r1, w = Vec::Zero(n), w2 = Vec::Zero(n), w1;
  for (int itn = 1; itn <= max_iter; ++itn) {
    Vec v = y / beta;
    y = K(v);
    if (itn >= 2) y -= (beta / oldb) * r1;
    double alfa = v.dot(y);
    y -= (alfa / beta) * r2;
    r1 = r2;
    r2 = y;
    y = Minv.cwiseProduct(r2);
    oldb = beta;
    beta = std::sqrt(std::max(r2.dot(y), 0.0));
    double oldeps = epsln;
    double delta = cs * dbar + sn * alfa;
    double gbar = sn * dbar - cs * alfa;
    epsln = sn * beta;
    dbar = -cs * beta;
    double gamma = std::max(std::sqrt(gbar * gbar + beta * beta), 1e-300);
    cs = gbar / gamma;
    sn = beta / gamma;
    double phi = cs * phibar;
    phibar = sn * phibar;
    w1 = w2;
    w2 = w;
    w = (v - oldeps * w1 - delta * w2) / gamma;
    x += phi * w;
    *iters = itn;
    if (phibar / beta1 < 0.1 * tol || beta == 0 || itn % 50 == 0) {
      double rr = (b - K(x)).norm() / bnorm;
      *relres = rr;
      if (rr <= tol || beta == 0) return x;
    }
  }
  *relres = (b - K(x)).norm() / bnorm;
  return x;
}

inline SaddleResult solve_saddle(const SaddleSystem& s, double tol = 1e-10, int max_iter = 50000,
                                 SaddleMethod method = SaddleMethod::Auto) {
  int n = static_cast<int>(s.A.rows()), m = static_cast<int>(s.B.rows());
  if (s.A.cols() != n || s.B.cols() != n || s.f.size() != n || s.g.size() != m)
    throw ShapeError("solve_saddle: block sizes disagree");
  if (method == SaddleMethod::Auto) method = (n + m <= 200000) ? SaddleMethod::Direct : SaddleMethod::Iterative;
  SaddleResult res;
  if (method == SaddleMethod::Direct) {
    SaddleFactorization fac(s);
    std::tie(res.u, res.p) = fac.solve(s.f, s.g);
    res.stats.method = "sparse-lu";
    res.stats.iterations = 1;
  } else {
    check_velocity_block(s.A);
    Vec w = s.pressure_weights.size() ? s.pressure_weights : Vec::Ones(m);
    Vec Minv(n + m);
    for (int i = 0; i < n; ++i) Minv[i] = 1.0 / s.A.coeff(i, i);
    // Pressure Schur complement ~ (weights)^2 / cell volume; use weights as mass diagonal.
    for (int i = 0; i < m; ++i) Minv[n + i] = w[i] > 0 ? 1.0 / w[i] : 1.0;
    SpMat Bt = s.B.transpose();
    auto K = [&](const Vec& x) {
      Vec y(n + m);
      y.head(n) = s.A * x.head(n) + Bt * x.tail(m);
      y.tail(m) = s.B * x.head(n);
      return y;
    };
    Vec b(n + m);
    b.head(n) = s.f;
    b.tail(m) = s.g;
    if (s.pressure_kernel) {  // compatibility: constant pressure kernel
      double gw = s.g.sum();
      if (std::abs(gw) > 10 * tol * std::max(b.norm(), 1e-300) * std::sqrt(double(m)))
        throw IncompatibleRHS("continuity data has a kernel component");
    }
    int its = 0;
    double rr = 0;
    Vec x = minres(K, b, Minv, tol, max_iter, &its, &rr);
    if (rr > tol) throw NoConvergence(its, rr);
    res.u = x.head(n);
    res.p = x.tail(m);
    if (s.pressure_kernel) res.p.array() -= w.dot(res.p) / w.sum();
    res.stats.method = "minres-blockdiag";
    res.stats.iterations = its;
  }
  auto [r1, r2] = saddle_residuals(s, res.u, res.p);
  res.stats.residual = r1;
  res.stats.continuity_residual = r2;
  return res;
}

// MatrixMarket coordinate dump (general, real).
inline void write_matrix_market(const std::string& path, const SpMat& A) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << "%%MatrixMarket matrix coordinate real general\n";
  out << A.rows() << " " << A.cols() << " " << A.nonZeros() << "\n" << std::setprecision(17);
  for (int k = 0; k < A.outerSize(); ++k)
    for (SpMat::InnerIterator it(A, k); it; ++it)
      out << it.row() + 1 << " " << it.col() + 1 << " " << it.value() << "\n";
}

}  // namespace memhom
