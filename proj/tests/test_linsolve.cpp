#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "memhom/linsolve.hpp"
#include "memhom/staggered.hpp"

using namespace memhom;

namespace {

SpMat periodic_laplacian(int n) {
  std::vector<Triplet> t;
  for (int i = 0; i < n; ++i) {
    t.emplace_back(i, i, 2.0);
    t.emplace_back(i, (i + 1) % n, -1.0);
    t.emplace_back(i, (i + n - 1) % n, -1.0);
  }
  SpMat A(n, n);
  A.setFromTriplets(t.begin(), t.end());
  return A;
}

// Couette flow on a walled rectangle: u1 = 0 at z = 0, u1 = 1 at z = 1.
struct Couette {
  StaggeredGrid g;
  SaddleSystem sys;
  std::vector<int> free_map;
  Vec full;
  Couette(int nx, int nz) : g(2, {nx, nz, 1}, {1.0 / nx, 1.0 / nz, 1}, {true, false, true}, {0, 0, 0}) {
    int nv = g.num_vel();
    full = Vec::Zero(nv);
    std::vector<char> fixed(nv, 0);
    for (int dof = 0; dof < nv; ++dof) {
      auto [k, s] = g.vel_slot(dof);
      if (k == 0 && (s[1] == 0 || s[1] == nz + 1)) {
        fixed[dof] = 1;
        full[dof] = s[1] == 0 ? 0.0 : 1.0;
      }
      if (k == 1 && (s[1] == 0 || s[1] == nz)) fixed[dof] = 1;
    }
    SpMat S = g.strain_operator();
    Vec w = g.sample_weights({});
    SpMat A = S.transpose() * w.asDiagonal() * S;
    SpMat B = -g.cell_volume() * g.divergence_operator();
    free_map.assign(nv, -1);
    int nf = 0;
    for (int i = 0; i < nv; ++i)
      if (!fixed[i]) free_map[i] = nf++;
    SpMat P(nv, nf);
    std::vector<Triplet> t;
    for (int i = 0; i < nv; ++i)
      if (free_map[i] >= 0) t.emplace_back(i, free_map[i], 1.0);
    P.setFromTriplets(t.begin(), t.end());
    sys.A = P.transpose() * A * P;
    sys.B = B * P;
    sys.f = -(P.transpose() * (A * full));
    sys.g = -(B * full);
    sys.pressure_kernel = true;
  }
};

}  // namespace

TEST(Linsolve, IdentityInOneIteration) {
  int n = 10;
  SparseSystem s;
  s.matrix.resize(n, n);
  s.matrix.setIdentity();
  s.rhs = Vec::LinSpaced(n, 1, 10);
  auto r = solve_spd(s);
  EXPECT_EQ(r.stats.iterations, 1);
  EXPECT_LT((r.x - s.rhs).norm(), 1e-14);
}

TEST(Linsolve, PeriodicLaplacianSineMode) {
  int n = 64;
  SparseSystem s;
  s.matrix = periodic_laplacian(n);
  s.rhs.resize(n);
  for (int i = 0; i < n; ++i) s.rhs[i] = std::sin(2 * M_PI * 3 * i / n);
  s.kernel.push_back(Vec::Ones(n));
  double lam = 2 - 2 * std::cos(2 * M_PI * 3 / n);
  auto r = solve_spd(s, 1e-12);
  EXPECT_LT((r.x - s.rhs / lam).norm() / (s.rhs / lam).norm(), 1e-10);
  EXPECT_NEAR(r.x.sum(), 0.0, 1e-10);
}

TEST(Linsolve, IncompatibleRhsIsRejected) {
  SparseSystem s;
  s.matrix = periodic_laplacian(16);
  s.rhs = Vec::Ones(16);
  s.kernel.push_back(Vec::Ones(16));
  EXPECT_THROW(solve_spd(s), IncompatibleRHS);
}

TEST(Linsolve, NoConvergenceReported) {
  int n = 200;
  SparseSystem s;
  std::vector<Triplet> t;
  for (int i = 0; i < n; ++i) {
    t.emplace_back(i, i, 2.0);
    if (i > 0) t.emplace_back(i, i - 1, -1.0);
    if (i + 1 < n) t.emplace_back(i, i + 1, -1.0);
  }
  s.matrix.resize(n, n);
  s.matrix.setFromTriplets(t.begin(), t.end());
  s.rhs = Vec::Ones(n);
  try {
    solve_spd(s, 1e-12, 3);
    FAIL();
  } catch (const NoConvergence& e) {
    EXPECT_EQ(e.iterations, 3);
    EXPECT_GT(e.residual, 1e-12);
  }
}

TEST(Linsolve, ZeroSaddleGivesZero) {
  Couette c(6, 5);
  c.sys.f.setZero();
  c.sys.g.setZero();
  auto r = solve_saddle(c.sys);
  EXPECT_EQ(r.u.norm(), 0.0);
  EXPECT_EQ(r.p.norm(), 0.0);
}

TEST(Linsolve, CouetteIsLinearWithZeroPressure) {
  Couette c(6, 5);
  for (auto method : {SaddleMethod::Direct, SaddleMethod::Iterative}) {
    auto r = solve_saddle(c.sys, 1e-11, 50000, method);
    Vec full = c.full;
    for (int i = 0; i < c.g.num_vel(); ++i)
      if (c.free_map[i] >= 0) full[i] = r.u[c.free_map[i]];
    for (int i = 0; i < c.g.num_vel(); ++i) {
      auto [k, s] = c.g.vel_slot(i);
      auto x = c.g.vel_position(i);
      EXPECT_NEAR(full[i], k == 0 ? x[1] : 0.0, 1e-9);
    }
    EXPECT_LT(r.p.cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_LT(r.stats.continuity_residual, 1e-10);
  }
}

TEST(Linsolve, DirectAndIterativeAgreeAndGaugeIsIdempotent) {
  Couette c(8, 6);
  // Add a body force so the pressure is nontrivial.
  std::mt19937 rng(1);
  std::uniform_real_distribution<double> U(-1, 1);
  for (int i = 0; i < c.sys.f.size(); ++i) c.sys.f[i] += 0.01 * U(rng);
  double tol = 1e-10;
  auto d = solve_saddle(c.sys, tol, 50000, SaddleMethod::Direct);
  auto it = solve_saddle(c.sys, tol, 50000, SaddleMethod::Iterative);
  EXPECT_LT((d.u - it.u).norm() / d.u.norm(), 10 * tol * 1e3);
  EXPECT_NEAR(d.p.sum(), 0.0, 1e-12);
  Vec p2 = d.p;
  p2.array() -= p2.mean();
  EXPECT_LT((p2 - d.p).norm(), 1e-14);
  auto before = saddle_residuals(c.sys, d.u, d.p);
  Vec p3 = d.p.array() + 5.0;
  auto after = saddle_residuals(c.sys, d.u, p3);
  EXPECT_NEAR(before.first, after.first, 1e-9);
}

TEST(Linsolve, SingularVelocityBlockDetected) {
  SaddleSystem s;
  s.A.resize(2, 2);
  s.A.insert(0, 0) = 1.0;
  s.B.resize(1, 2);
  s.B.insert(0, 0) = 1.0;
  s.f = Vec::Zero(2);
  s.g = Vec::Zero(1);
  EXPECT_THROW(solve_saddle(s), SingularBlock);
}

TEST(Linsolve, DeterministicRepeatedSolve) {
  Couette c(7, 5);
  auto a = solve_saddle(c.sys, 1e-10, 50000, SaddleMethod::Iterative);
  auto b = solve_saddle(c.sys, 1e-10, 50000, SaddleMethod::Iterative);
  EXPECT_EQ(a.u, b.u);
  EXPECT_EQ(a.p, b.p);
}

TEST(Linsolve, MatrixMarketDump) {
  SpMat A = periodic_laplacian(4);
  std::string p = testing::TempDir() + "/a.mtx";
  write_matrix_market(p, A);
  std::ifstream in(p);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "%%MatrixMarket matrix coordinate real general");
  std::getline(in, line);
  EXPECT_EQ(line, "4 4 12");
}
