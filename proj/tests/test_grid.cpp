#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <random>

#include "memhom/grid.hpp"

using namespace memhom;

namespace {

std::shared_ptr<const CellGeometry> disc(int N) {
  GeometryDescriptor d;
  d.dim = 2;
  d.resolution = N;
  Shape s;
  s.type = "ball";
  s.centre = {0.5, 0.0, 0};
  s.radius = 0.3;
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

StaggeredGrid walled_box(int d, int n) {
  Idx3 nn{n, n + 1, n + 2};
  std::array<double, 3> h{1.0 / n, 0.7 / (n + 1), 1.3 / (n + 2)};
  return StaggeredGrid(d, nn, h, {false, false, false}, {0.1, -0.2, 0.3});
}

}  // namespace

// Affine fields are reproduced exactly on a walled box (no periodic wrap).
TEST(Grid, AffineStrainIsExact) {
  for (int d : {2, 3}) {
    auto g = walled_box(d, 5);
    SpMat S = g.strain_operator();
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j) {
        Mat M = unit_sym(d, i, j);
        Vec u = g.interpolate([&](int k, const std::array<double, 3>& y) {
          double s = 0;
          for (int m = 0; m < d; ++m) s += M(k, m) * y[m];
          return s;
        });
        Vec D = S * u;
        for (int s = 0; s < g.num_samples(); ++s) {
          auto& smp = g.samples()[s];
          EXPECT_NEAR(D[s], M(smp.k, smp.l), 1e-12);
        }
      }
  }
}

TEST(Grid, RigidMotionsHaveZeroStrain) {
  for (int d : {2, 3}) {
    auto g = walled_box(d, 4);
    SpMat S = g.strain_operator();
    Vec c = g.interpolate([](int k, const std::array<double, 3>&) { return 1.0 + k; });
    EXPECT_LT((S * c).cwiseAbs().maxCoeff(), 1e-12);
    for (int a = 0; a < d; ++a)
      for (int b = a + 1; b < d; ++b) {
        Vec r = g.interpolate([&](int k, const std::array<double, 3>& y) {
          return k == a ? y[b] : (k == b ? -y[a] : 0.0);
        });
        EXPECT_LT((S * r).cwiseAbs().maxCoeff(), 1e-12);
      }
  }
}

// Kernel of the strain operator = rigid motions plus modes living only on corner
// dofs (a wall slot combined with a boundary face or a second wall slot), which
// enter a single corner sample each and are prescribed in every solver.
namespace {
int nullity(const Mat& R) {
  Eigen::JacobiSVD<Mat> svd(R);
  auto sv = svd.singularValues();
  int n = static_cast<int>(R.cols()) - static_cast<int>(sv.size());
  for (int i = 0; i < sv.size(); ++i) n += sv[i] < 1e-10 * std::max(sv[0], 1.0);
  return n;
}
}  // namespace

TEST(Grid, StrainKernelDimensionIsRigidMotions) {
  for (int d : {2, 3}) {
    auto g = walled_box(d, 3);
    Mat S = Mat(g.strain_operator());
    std::vector<int> corner;
    for (int j = 0; j < S.cols(); ++j) {
      auto [k, s] = g.vel_slot(j);
      int walls = 0;
      for (int m = 0; m < d; ++m) walls += g.is_wall_slot(k, m, s[m]);
      bool bface = s[k] == 0 || s[k] == g.n()[k];
      if (walls >= 2 || (walls == 1 && bface)) corner.push_back(j);
    }
    Mat C(S.rows(), corner.size());
    for (size_t j = 0; j < corner.size(); ++j) C.col(j) = S.col(corner[j]);
    EXPECT_EQ(nullity(S) - nullity(C), d * (d + 1) / 2) << "dim " << d;
  }
}

TEST(Grid, DivergenceOfConstantAndIdentity) {
  auto g = disc(8);
  auto c = sample_field(FieldKind::Velocity, g, [](int, const std::array<double, 3>&) { return 2.0; });
  EXPECT_LT(divergence(c).cwiseAbs().maxCoeff(), 1e-13);
  auto id = sample_field(FieldKind::Velocity, g, [](int k, const std::array<double, 3>& y) { return y[k]; });
  Vec dv = divergence(id);
  // Interior cells (no lateral wrap) see div = dim.
  auto grid = StaggeredGrid::for_cell(*g);
  for (int cidx = 0; cidx < grid.num_cells(); ++cidx) {
    if (grid.cell_coords(cidx)[0] == 7) continue;
    EXPECT_NEAR(dv[cidx], 2.0, 1e-12);
  }
}

TEST(Grid, InnerProductSymmetricBilinearAndUnitStrain) {
  auto g = ball3(6);
  std::mt19937 rng(7);
  std::normal_distribution<double> nd;
  auto f = make_field(FieldKind::Velocity, g), h = make_field(FieldKind::Velocity, g);
  for (int i = 0; i < f.values.size(); ++i) { f.values[i] = nd(rng); h.values[i] = nd(rng); }
  double a = inner_product_D(f, h, Region::Fluid), b = inner_product_D(h, f, Region::Fluid);
  EXPECT_NEAR(a, b, 1e-12 * std::abs(a));
  auto f2 = f;
  f2.values *= 3.0;
  EXPECT_NEAR(inner_product_D(f2, h, Region::Fluid), 3 * a, 1e-11 * std::abs(a));
  EXPECT_GE(inner_product_D(f, f, Region::Fluid), 0.0);

  // Walled box, full region, u = M11 y: integral of M11:M11 = volume.
  auto box = walled_box(3, 4);
  Vec u = box.interpolate([](int k, const std::array<double, 3>& y) { return k == 0 ? y[0] : 0.0; });
  SpMat S = box.strain_operator();
  Vec w = box.sample_weights({});
  Vec D = S * u;
  double vol = 1.0 * 0.7 * 1.3;
  EXPECT_NEAR((w.array() * D.array() * D.array()).sum(), vol, 1e-12);
}

TEST(Grid, InnerProductOfRigidIsZero) {
  auto g = disc(8);
  auto c = sample_field(FieldKind::Velocity, g, [](int k, const std::array<double, 3>&) { return 1.0 - k; });
  EXPECT_NEAR(inner_product_D(c, c, Region::Fluid), 0.0, 1e-14);
}

TEST(Grid, SummationByParts) {
  for (int d : {2, 3}) {
    auto g = walled_box(d, 4);
    std::mt19937 rng(3);
    std::uniform_real_distribution<double> U(-1, 1);
    Vec p(g.num_cells());
    for (int i = 0; i < p.size(); ++i) p[i] = U(rng);
    // Velocity vanishing on all walls (boundary faces and wall slots).
    Vec v = Vec::Zero(g.num_vel());
    for (int dof = 0; dof < g.num_vel(); ++dof) {
      auto [k, s] = g.vel_slot(dof);
      bool boundary = (s[k] == 0 || s[k] == g.n()[k]);
      for (int m = 0; m < d; ++m) boundary |= g.is_wall_slot(k, m, s[m]);
      if (!boundary) v[dof] = U(rng);
    }
    double vol = g.cell_volume();
    double lhs = vol * (g.gradient_operator() * p).dot(v) + vol * p.dot(g.divergence_operator() * v);
    EXPECT_NEAR(lhs, 0.0, 1e-12);
  }
}

TEST(Grid, DisplacementStrainAffineAndRigid) {
  auto g = ball3(4);
  // Vertical shear u = -y3 e1 : D = -M_13.
  auto u = sample_field(FieldKind::Displacement, g, [](int k, const std::array<double, 3>& y) {
    return k == 0 ? -y[2] : 0.0;
  });
  auto s = sym_gradient(u);
  for (size_t i = 0; i < s.k.size(); ++i) {
    double expect = (s.k[i] == 0 && s.l[i] == 2) ? -0.5 : 0.0;
    EXPECT_NEAR(s.value[i], expect, 1e-12);
  }
  auto c = sample_field(FieldKind::Displacement, g, [](int k, const std::array<double, 3>&) { return k + 1.0; });
  EXPECT_LT(sym_gradient(c).value.cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_NEAR(inner_product_D(u, u, Region::All), 2.0 * 0.5, 1e-12);  // |Z| * (2 * 0.25)
}

TEST(Grid, LayoutMismatchThrows) {
  auto g = disc(8);
  CellField f{FieldKind::Velocity, g, Vec::Zero(3)};
  EXPECT_THROW(sym_gradient(f), LayoutError);
  EXPECT_THROW(divergence(f), LayoutError);
  auto p = make_field(FieldKind::Pressure, g);
  EXPECT_THROW(divergence(p), LayoutError);
  auto v = make_field(FieldKind::Velocity, g);
  EXPECT_THROW(inner_product_D(v, p, Region::Fluid), LayoutError);
}

TEST(Grid, ExportWritesFiles) {
  auto g = disc(4);
  auto v = make_field(FieldKind::Velocity, g);
  auto p = make_field(FieldKind::Pressure, g);
  auto u = make_field(FieldKind::Displacement, g);
  std::string path = testing::TempDir() + "/f.vtk";
  write_vtk(path, {{"v", v}, {"p", p}, {"u", u}});
  std::ifstream in(path);
  std::string first;
  std::getline(in, first);
  EXPECT_EQ(first, "# vtk DataFile Version 3.0");
  write_csv(testing::TempDir() + "/f.csv", p);
}
