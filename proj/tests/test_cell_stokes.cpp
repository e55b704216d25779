#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "memhom/cell_stokes.hpp"

using namespace memhom;

namespace {

std::shared_ptr<const CellGeometry> disc(int N, double r = 0.3) {
  GeometryDescriptor d;
  d.dim = 2;
  d.resolution = N;
  Shape s;
  s.type = "ball";
  s.centre = {0.5, 0.0, 0};
  s.radius = r;
  d.shapes.push_back(s);
  return build_cell_geometry(d);
}

std::shared_ptr<const CellGeometry> ball3(int N) {
  GeometryDescriptor d;
  d.dim = 3;
  d.resolution = N;
  Shape s;
  s.type = "ball";
  s.centre = {0.5, 0.5, 0.0};
  s.radius = 0.3;
  d.shapes.push_back(s);
  return build_cell_geometry(d);
}

std::shared_ptr<const CellGeometry> box2(int N) {
  GeometryDescriptor d;
  d.dim = 2;
  d.resolution = N;
  Shape s;
  s.type = "box";
  s.centre = {0.5, 0.1, 0};
  s.half = {0.25, 0.3, 0};
  d.shapes.push_back(s);
  return build_cell_geometry(d);
}

struct Fixture {
  std::shared_ptr<const CellGeometry> g;
  StokesCellSolutionSet s;
  FluidInterfaceCoefficients c;
};

const Fixture& disc32() {
  static Fixture f = [] {
    Fixture x;
    x.g = disc(32);
    x.s = solve_stokes_cells(x.g);
    x.c = assemble_fluid_coefficients(x.s);
    return x;
  }();
  return f;
}

double maxabs(const Mat& m) { return m.cwiseAbs().maxCoeff(); }

}  // namespace

TEST(CellStokes, CompletenessOnReferenceDisc) {
  EXPECT_LE(completeness_residual(disc32().s), 1e-9);
}

TEST(CellStokes, DirichletDataIsImposed) {
  auto& f = disc32();
  StokesCellProblem P(f.g);
  auto& cls = P.classes();
  auto grid = P.grid();
  for (int dof = 0; dof < grid.num_vel(); ++dof) {
    int k = grid.vel_slot(dof).first;
    if (cls[dof] == DofClass::SPlus || cls[dof] == DofClass::SMinus) {
      EXPECT_EQ(f.s.qG[0].values[dof], 0.0);
      EXPECT_EQ(f.s.q3.values[dof], k == 1 ? 1.0 : 0.0);
    }
    if (cls[dof] == DofClass::Gamma) {
      EXPECT_EQ(f.s.qP[0].values[dof], 0.0);
      EXPECT_EQ(f.s.q3.values[dof], 0.0);
      EXPECT_EQ(f.s.qG[1].values[dof], k == 1 ? 1.0 : 0.0);
    }
  }
}

TEST(CellStokes, PrescribedDataHasZeroNetFlux) {
  auto g = disc(16);
  StokesCellProblem P(g);
  for (int i = 0; i < 2; ++i) EXPECT_NEAR(P.data_flux(P.data(i, {DofClass::Gamma})), 0.0, 1e-13);
  EXPECT_NEAR(P.data_flux(P.data(1, {DofClass::SPlus, DofClass::SMinus})), 0.0, 1e-13);
}

TEST(CellStokes, SolutionsAreDivergenceFreeOnFluid) {
  auto& f = disc32();
  double h = f.g->h();
  auto check = [&](const CellField& q) {
    Vec dv = divergence(q);
    double worst = 0;
    for (int v = 0; v < f.g->num_voxels(); ++v)
      if (!f.g->solid(v)) worst = std::max(worst, std::abs(dv[v]));
    EXPECT_LE(worst * h, 1e-9);
  };
  for (auto& q : f.s.qG) check(q);
  for (auto& q : f.s.qP) check(q);
  for (auto& q : f.s.qM) check(q);
  check(f.s.q3);
}

TEST(CellStokes, PressuresAreMeanZero) {
  auto& f = disc32();
  EXPECT_NEAR(f.s.piG[0].values.sum(), 0.0, 1e-8);
  EXPECT_NEAR(f.s.pi3.values.sum(), 0.0, 1e-8);
}

// Mass conservation: the vertical flux of q3 through every horizontal level is |Y|.
TEST(CellStokes, Q3FluxIsConstantAcrossLevels) {
  auto& f = disc32();
  int N = f.g->resolution();
  auto grid = StaggeredGrid::for_cell(*f.g);
  for (int lev = 0; lev <= 2 * N; ++lev) {
    double flux = 0;
    for (int i = 0; i < N; ++i) flux += f.s.q3.values[grid.vel_index(1, Idx3{i, lev, 0})] / N;
    EXPECT_NEAR(flux, 1.0, 1e-9) << "level " << lev;
  }
}

// A geometry symmetric about y3 = 0 maps q1+ onto the mirror of q1-.
TEST(CellStokes, ReflectionMapsPlusOntoMinus) {
  auto g = disc(16);
  auto s = solve_stokes_cells(g);
  int N = 16;
  auto grid = StaggeredGrid::for_cell(*g);
  double worst = 0;
  for (int dof = 0; dof < grid.num_vel(); ++dof) {
    auto [k, sl] = grid.vel_slot(dof);
    Idx3 m = sl;
    double sign = 1;
    if (k == 0) {
      m[1] = 2 * N + 1 - sl[1];
    } else {
      m[1] = 2 * N - sl[1];
      sign = -1;
    }
    worst = std::max(worst, std::abs(s.qP[0].values[dof] - sign * s.qM[0].values[grid.vel_index(k, m)]));
  }
  EXPECT_LE(worst, 1e-9);
}

TEST(CellStokes, Lemma68Identities) {
  for (auto g : {disc(32), box2(32), ball3(8)}) {
    auto c = assemble_fluid_coefficients(solve_stokes_cells(g));
    int d = c.dim;
    double scale = maxabs(c.LG);
    EXPECT_LE(maxabs(c.L[0] + c.L[1] + c.LG), 1e-9 * scale);
    for (int a = 0; a < 2; ++a) {
      EXPECT_LE(maxabs(c.L[a] + c.B[a][0].transpose() + c.B[a][1].transpose()), 1e-9 * scale);
      Vec e3 = Vec::Unit(d, d - 1);
      EXPECT_LE(((c.K[a] + c.L[a]) * e3).cwiseAbs().maxCoeff(), 1e-9 * scale);
    }
  }
}

TEST(CellStokes, SymmetryAndDefiniteness) {
  auto& c = disc32().c;
  double scale = maxabs(c.LG);
  EXPECT_LE(maxabs(c.LG - c.LG.transpose()), 1e-9 * scale);
  Eigen::SelfAdjointEigenSolver<Mat> es(c.LG);
  EXPECT_GT(es.eigenvalues().minCoeff(), 0.0);
  for (int a = 0; a < 2; ++a) EXPECT_LE(maxabs(c.B[a][a] - c.B[a][a].transpose()), 1e-9 * scale);
  EXPECT_LE(maxabs(c.B[0][1] - c.B[1][0].transpose()), 1e-9 * scale);
}

TEST(CellStokes, MAndKFactorPatterns) {
  auto c = assemble_fluid_coefficients(solve_stokes_cells(ball3(6)));
  for (int a = 0; a < 2; ++a)
    for (int i = 0; i < 3; ++i) {
      EXPECT_EQ(c.M[a](i, 2), 0.0);
      EXPECT_EQ(c.M[a](2, i), 0.0);
      for (int j = 0; j < 3; ++j) {
        double f = (i == 2 || j == 2) ? 2.0 : 1.0;
        EXPECT_DOUBLE_EQ(c.K[a](i, j), f * c.B[a][a](i, j));
        if (i < 2 && j < 2) {
          EXPECT_DOUBLE_EQ(c.M[a](i, j), c.B[a][1 - a](i, j));
        }
      }
    }
  EXPECT_DOUBLE_EQ(c.K[0](0, 1), c.B[0][0](0, 1));
}

// Quadratic form of the combined cell energy; vanishes on the rigid combination.
TEST(CellStokes, CombinedQuadraticFormIsSemidefinite) {
  auto& c = disc32().c;
  double scale = maxabs(c.LG);
  std::mt19937 rng(11);
  std::normal_distribution<double> nd;
  auto rnd = [&] { return Vec(Vec::NullaryExpr(2, [&] { return nd(rng); })); };
  auto form = [&](const Vec& g, const Vec& p, const Vec& m) {
    Vec x[2] = {p, m};
    double q = g.dot(c.LG * g);
    for (int a = 0; a < 2; ++a) q += 2 * x[a].dot(c.L[a] * g);
    for (int a = 0; a < 2; ++a)
      for (int b = 0; b < 2; ++b) q += x[b].dot(c.B[a][b] * x[a]);
    return q;
  };
  for (int t = 0; t < 100; ++t) {
    EXPECT_GE(form(rnd(), rnd(), rnd()), -1e-9 * scale);
    Vec x = rnd();
    EXPECT_LE(std::abs(form(x, x, x)), 1e-9 * scale * x.squaredNorm());
  }
}

// Normal stress jump chain: once the vertical membrane relation holds the
// combination with nu+ = e3, nu- = -e3 vanishes identically.
TEST(CellStokes, NormalStressChainVanishes) {
  auto& c = disc32().c;
  std::mt19937 rng(5);
  std::normal_distribution<double> nd;
  Vec e3 = Vec::Unit(2, 1);
  for (int t = 0; t < 20; ++t) {
    Vec w(2), a(2), b(2);
    for (int i = 0; i < 2; ++i) { w[i] = nd(rng); a[i] = nd(rng); b[i] = nd(rng); }
    // Fix b so that LG w . e3 = -(L+ e3 . a + L- e3 . b).
    Vec lm = c.L[1] * e3;
    int k = std::abs(lm[0]) > std::abs(lm[1]) ? 0 : 1;
    double target = -(c.LG * w).dot(e3) - (c.L[0] * e3).dot(a);
    b[k] = 0;
    b[k] = (target - lm.dot(b)) / lm[k];
    double F = (c.L[0] * w).dot(e3) + (c.L[1] * w).dot(e3) + (c.K[0] * a).dot(e3) + (c.K[1] * b).dot(e3);
    EXPECT_NEAR(F, 0.0, 1e-8 * maxabs(c.LG) * (w.norm() + a.norm() + b.norm()));
  }
}

TEST(CellStokes, DirectAndIterativeAgree) {
  auto g = disc(8);
  CellSolveOptions it;
  it.method = SaddleMethod::Iterative;
  it.tol = 1e-11;
  auto a = solve_stokes_cells(g);
  auto b = solve_stokes_cells(g, it);
  EXPECT_LT((a.qG[0].values - b.qG[0].values).cwiseAbs().maxCoeff(), 1e-7);
  EXPECT_LT((a.q3.values - b.q3.values).cwiseAbs().maxCoeff(), 1e-7);
}

TEST(CellStokes, TinyBallPerturbsQ3OnlyNearby) {
  auto g = disc(32, 0.05);
  auto s = solve_stokes_cells(g);
  auto grid = StaggeredGrid::for_cell(*g);
  double near = 0, far = 0;
  for (int dof = 0; dof < grid.num_vel(); ++dof) {
    auto [k, sl] = grid.vel_slot(dof);
    auto y = grid.vel_position(dof);
    double dev = std::abs(s.q3.values[dof] - (k == 1 ? 1.0 : 0.0));
    double r = std::hypot(y[0] - 0.5, y[1]);
    if (r < 0.2) near = std::max(near, dev);
    if (r > 0.6) far = std::max(far, dev);
  }
  EXPECT_GT(near, 0.5);
  EXPECT_LT(far, 0.2 * near);
}

TEST(CellStokes, GammaCoefficientConvergesUnderRefinement) {
  double v[3];
  int i = 0;
  for (int N : {16, 32, 64}) v[i++] = assemble_fluid_coefficients(solve_stokes_cells(disc(N))).LG(0, 0);
  EXPECT_GT(std::abs(v[1] - v[0]), std::abs(v[2] - v[1]));
}

TEST(CellStokes, ReconstructionIsLinearAndComplete) {
  auto& s = disc32().s;
  Vec z = Vec::Zero(2);
  EXPECT_EQ(reconstruct_membrane_velocity(s, z, z, z).values.cwiseAbs().maxCoeff(), 0.0);
  Vec c(2);
  c << 0.3, -1.7;
  auto v = reconstruct_membrane_velocity(s, c, c, c);
  auto grid = StaggeredGrid::for_cell(*s.geom);
  for (int dof = 0; dof < grid.num_vel(); ++dof)
    EXPECT_NEAR(v.values[dof], c[grid.vel_slot(dof).first], 1e-9);
  auto p = reconstruct_membrane_pressure(s, c, c, c);
  EXPECT_LT(p.values.cwiseAbs().maxCoeff(), 1e-7);
  Vec e3 = Vec::Unit(2, 1);
  auto v3 = reconstruct_membrane_velocity(s, e3, z, z);
  EXPECT_EQ(v3.values, s.qG[1].values);
  EXPECT_THROW(reconstruct_membrane_velocity(s, Vec::Zero(3), z, z), ShapeError);
}

TEST(CellStokes, IncompleteSetIsRejected) {
  StokesCellSolutionSet s = disc32().s;
  s.qP.clear();
  EXPECT_THROW(assemble_fluid_coefficients(s), IncompleteSet);
}
