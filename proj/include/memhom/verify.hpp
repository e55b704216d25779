#pragma once
/**
 * @file verify.hpp
 * @brief Independent oracles: brute-force coefficient sums, identity suite,
 * refinement studies and finite-difference operator checks.
 *
 * The brute-force sums walk voxel by voxel and difference the raw field arrays
 * directly. They never call the strain operators or the assembly routines, so
 * agreement with assemble_* checks the assembly against a second implementation.
 */

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <iomanip>
#include <random>
#include <regex>
#include <sstream>
#include <string>
#include <vector>

#include "memhom/cell_elastic.hpp"
#include "memhom/cell_stokes.hpp"
#include "memhom/errors.hpp"
#include "memhom/geometry.hpp"
#include "memhom/grid.hpp"
#include "memhom/linsolve.hpp"
#include "memhom/parallel.hpp"

namespace memhom {

inline double max_abs(const Mat& m) { return m.size() ? m.cwiseAbs().maxCoeff() : 0.0; }

// ------------------------------------------------------------ brute force: fluid

namespace detail {

// Strain of staggered velocity fields, evaluated cell by cell.
class VoxelStrain {
 public:
  explicit VoxelStrain(const CellGeometry& g) : G_(g), grid_(StaggeredGrid::for_cell(g)), d_(g.dim()), h_(g.h()) {}

  // Value of component k on face f (own axis) at the cell centres of c elsewhere.
  double face_value(const Vec& u, int k, int f, const Idx3& c) const {
    Idx3 s{0, 0, 0};
    for (int m = 0; m < d_; ++m) s[m] = m == k ? f : c[m] + (m == d_ - 1 ? 1 : 0);
    if (k < d_ - 1) s[k] = ((f % G_.shape()[k]) + G_.shape()[k]) % G_.shape()[k];
    return u[grid_.vel_index(k, s)];
  }

  // d u_k / d y_l (l != k) at the edge between faces fk (axis k) and fl (axis l), centre co elsewhere.
  double cross_derivative(const Vec& u, int k, int l, int fk, int fl, const Idx3& c) const {
    const int n = G_.shape()[l];
    Idx3 s{0, 0, 0};
    for (int m = 0; m < d_; ++m) s[m] = c[m] + (m == d_ - 1 ? 1 : 0);
    s[k] = k < d_ - 1 ? ((fk % G_.shape()[k]) + G_.shape()[k]) % G_.shape()[k] : fk;
    Idx3 lo = s, hi = s;
    double dist = h_;
    if (l < d_ - 1) {
      lo[l] = ((fl - 1) % n + n) % n;
      hi[l] = ((fl % n) + n) % n;
    } else {
      lo[l] = fl;  // slot fl is the centre below (or the lower wall)
      hi[l] = fl + 1;
      if (fl == 0 || fl == n) dist = 0.5 * h_;
    }
    return (u[grid_.vel_index(k, hi)] - u[grid_.vel_index(k, lo)]) / dist;
  }

  // All strain values touching voxel v with their quadrature weights.
  // Diagonal entries at the centre (weight vol), off-diagonal entries on the
  // cell's edges (weight 2 vol / 4 each, the D:D multiplicity included).
  void visit(int v, const std::vector<const Vec*>& fields, const std::function<void(double, const Vec&)>& fn) const {
    Idx3 c = G_.coords(v);
    const double vol = std::pow(h_, d_);
    const int nf = static_cast<int>(fields.size());
    Vec e(nf);
    for (int k = 0; k < d_; ++k) {
      for (int q = 0; q < nf; ++q)
        e[q] = (face_value(*fields[q], k, c[k] + 1, c) - face_value(*fields[q], k, c[k], c)) / h_;
      fn(vol, e);
    }
    for (int k = 0; k < d_; ++k)
      for (int l = k + 1; l < d_; ++l)
        for (int a = 0; a < 2; ++a)
          for (int b = 0; b < 2; ++b) {
            int fk = c[k] + a, fl = c[l] + b;
            for (int q = 0; q < nf; ++q)
              e[q] = 0.5 * (cross_derivative(*fields[q], k, l, fk, fl, c) + cross_derivative(*fields[q], l, k, fl, fk, c));
            fn(2.0 * vol / 4.0, e);
          }
  }

  const StaggeredGrid& grid() const { return grid_; }

 private:
  const CellGeometry& G_;
  StaggeredGrid grid_;
  int d_;
  double h_;
};

// Gram matrix of the fluid energy over fields (qG_0.., q+_0.., q-_0..).
inline Mat fluid_gram(const StokesCellSolutionSet& s) {
  if (!s.complete()) throw IncompleteSet("Stokes cell solution set is incomplete");
  const int d = s.dim();
  std::vector<Vec> store;
  for (int i = 0; i < d; ++i) store.push_back(s.qG[i].values);
  for (Side side : {Side::Plus, Side::Minus})
    for (int i = 0; i < d; ++i) store.push_back(s.q_side(side, i).values);
  std::vector<const Vec*> f;
  for (const Vec& v : store) f.push_back(&v);
  VoxelStrain vs(*s.geom);
  const int nf = static_cast<int>(f.size());
  Mat Gm = Mat::Zero(nf, nf);
  for (int v = 0; v < s.geom->num_voxels(); ++v) {
    if (s.geom->solid(v)) continue;
    vs.visit(v, f, [&](double w, const Vec& e) { Gm.noalias() += w * e * e.transpose(); });
  }
  return Gm;
}

// Q1 gradient at reference point x in [0,1]^d of voxel c, computed from the
// vertex values by tensor-product differences.
inline Mat q1_gradient(const VertexGrid& vg, const Vec& u, const Idx3& c, const std::array<double, 3>& x) {
  const int d = vg.dim();
  const double h = vg.h();
  const int nv = vg.num_vertices();
  Mat Gr = Mat::Zero(d, d);
  for (int i = 0; i < d; ++i)
    for (int m = 0; m < d; ++m) {
      // d/dy_m: difference along m, multilinear interpolation along the other axes.
      double acc = 0;
      for (int corner = 0; corner < (1 << d); ++corner) {
        if ((corner >> m) & 1) continue;
        double wgt = 1;
        for (int q = 0; q < d; ++q)
          if (q != m) wgt *= ((corner >> q) & 1) ? x[q] : 1 - x[q];
        int hiC = corner | (1 << m);
        acc += wgt * (u[i * nv + vg.voxel_vertex(c, hiC)] - u[i * nv + vg.voxel_vertex(c, corner)]);
      }
      Gr(i, m) = acc / h;
    }
  return Gr;
}

// Visit solid Gauss points with the 2-point rule per axis.
inline void solid_gauss_points(const CellGeometry& g,
                               const std::function<void(int, const Idx3&, const std::array<double, 3>&, double, double)>& fn) {
  const int d = g.dim();
  const double r = 0.5 / std::sqrt(3.0), h = g.h();
  const double w = std::pow(h, d) / (1 << d);
  for (int v = 0; v < g.num_voxels(); ++v) {
    if (!g.solid(v)) continue;
    Idx3 c = g.coords(v);
    for (int p = 0; p < (1 << d); ++p) {
      std::array<double, 3> x{0, 0, 0};
      for (int m = 0; m < d; ++m) x[m] = 0.5 + (((p >> m) & 1) ? r : -r);
      double y3 = (c[d - 1] + x[d - 1]) * h - 1.0;
      fn(v, c, x, y3, w);
    }
  }
}

inline double contract_AB(const Tensor4& A, const Mat& X, const Mat& Y) {
  // sum_ijkl A_ijkl X_kl Y_ij
  double s = 0;
  const int d = A.dim;
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j)
      for (int k = 0; k < d; ++k)
        for (int l = 0; l < d; ++l) s += A(i, j, k, l) * X(k, l) * Y(i, j);
  return s;
}

}  // namespace detail

inline const std::vector<std::string>& fluid_definition_ids() {
  static const std::vector<std::string> ids = {"B++", "B+-", "B-+", "B--", "L+", "L-", "LG", "K+", "K-", "M+", "M-"};
  return ids;
}
inline const std::vector<std::string>& elastic_definition_ids() {
  static const std::vector<std::string> ids = {"Astar", "Astar_energy", "a", "b", "c"};
  return ids;
}

// Fluid coefficient by definition id, recomputed from the raw fields.
inline Mat brute_force_fluid(const StokesCellSolutionSet& s, const std::string& id) {
  const auto& ids = fluid_definition_ids();
  if (std::find(ids.begin(), ids.end(), id) == ids.end()) throw UnknownDefinition("unknown fluid definition '" + id + "'");
  const int d = s.dim();
  Mat Gm = detail::fluid_gram(s);
  auto blk = [&](int A, int Bb) { return Mat(Gm.block(A * d, Bb * d, d, d)); };  // (i, j) = <f_A,i , f_B,j>
  auto side = [](char c) { return c == '+' ? 1 : 2; };
  if (id == "LG") return blk(0, 0);
  if (id[0] == 'L') return blk(0, side(id[1])).transpose();  // L[a](j,i) = <qG_i, q^a_j>
  if (id[0] == 'B') return blk(side(id[1]), side(id[2])).transpose();
  Mat Bm = blk(side(id[1]), id[0] == 'K' ? side(id[1]) : 3 - side(id[1])).transpose();
  Mat out = Bm;
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) {
      bool vertical = i == d - 1 || j == d - 1;
      if (id[0] == 'K') out(i, j) = vertical ? 2.0 * Bm(i, j) : Bm(i, j);
      else out(i, j) = vertical ? 0.0 : Bm(i, j);
    }
  return out;
}

// Elastic tensor by definition id, recomputed with an independent Q1 gradient.
inline Tensor4 brute_force_elastic(const ElasticCellSolutionSet& s, const std::string& id) {
  const auto& ids = elastic_definition_ids();
  if (std::find(ids.begin(), ids.end(), id) == ids.end()) throw UnknownDefinition("unknown elastic definition '" + id + "'");
  const CellGeometry& g = *s.geom;
  const int d = g.dim(), m = d - 1;
  const bool plate = id == "a" || id == "b" || id == "c";
  const int n = plate ? m : d;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      s.chi_of(i, j);
      if (plate) s.chiB_of(i, j);
    }
  const double vs = g.count(Phase::Solid) * std::pow(g.h(), d);
  Tensor4 T(n);
  VertexGrid vg(g);
  detail::solid_gauss_points(g, [&](int v, const Idx3& c, const std::array<double, 3>& x, double y3, double w) {
    const Tensor4& A = s.tensor.at(v);
    std::vector<Mat> E(n * n), F(n * n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        Mat Gc = detail::q1_gradient(vg, s.chi[i * d + j].values, c, x);
        Mat Mij = unit_sym(d, i, j);
        E[i * n + j] = Mij + 0.5 * (Gc + Gc.transpose());
        if (plate) {
          Mat Gb = detail::q1_gradient(vg, s.chiB[i * d + j].values, c, x);
          F[i * n + j] = 0.5 * (Gb + Gb.transpose()) - y3 * Mij;
        }
      }
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        for (int k = 0; k < n; ++k)
          for (int l = 0; l < n; ++l) {
            const Mat& Ekl = E[k * n + l];
            double val;
            if (id == "Astar") {
              val = 0;  // (A (M_kl + D chi_kl))_ij
              for (int p = 0; p < d; ++p)
                for (int q = 0; q < d; ++q) val += A(i, j, p, q) * Ekl(p, q);
            } else if (id == "Astar_energy" || id == "a") {
              val = detail::contract_AB(A, Ekl, E[i * n + j]);
            } else if (id == "b") {
              val = detail::contract_AB(A, F[i * n + j], Ekl);
            } else {
              val = detail::contract_AB(A, F[i * n + j], F[k * n + l]);
            }
            T(i, j, k, l) += plate ? w / vs * val : w * val;
          }
  });
  return T;
}

struct OracleComparison {
  std::string id;
  double max_abs_diff = 0, scale = 0;
  double relative() const { return scale > 0 ? max_abs_diff / scale : max_abs_diff; }
};

inline double tensor_max_diff(const Tensor4& a, const Tensor4& b) {
  if (a.dim != b.dim) throw DimensionMismatch("tensor dimensions differ");
  double m = 0;
  for (size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}

// Every fluid definition against the assembled set.
inline std::vector<OracleComparison> compare_fluid_oracles(const StokesCellSolutionSet& s,
                                                           const FluidInterfaceCoefficients& c) {
  std::vector<OracleComparison> out;
  auto side = [](char ch) { return ch == '+' ? 0 : 1; };
  for (const auto& id : fluid_definition_ids()) {
    Mat ref;
    if (id == "LG") ref = c.LG;
    else if (id[0] == 'B') ref = c.B[side(id[1])][side(id[2])];
    else if (id[0] == 'L') ref = c.L[side(id[1])];
    else if (id[0] == 'K') ref = c.K[side(id[1])];
    else ref = c.M[side(id[1])];
    Mat bf = brute_force_fluid(s, id);
    out.push_back({id, max_abs(bf - ref), max_abs(ref)});
  }
  return out;
}

inline std::vector<OracleComparison> compare_elastic_oracles(const ElasticCellSolutionSet& s,
                                                             const ElasticEffectiveTensors& T) {
  std::vector<OracleComparison> out;
  for (const auto& id : elastic_definition_ids()) {
    const Tensor4* ref = id == "Astar" ? &T.Astar : id == "Astar_energy" ? &T.Astar_energy : id == "a" ? &T.a : id == "b" ? &T.b : &T.c;
    if (!T.has_plate && (id == "a" || id == "b" || id == "c")) continue;
    Tensor4 bf = brute_force_elastic(s, id);
    // b vanishes on mid-plane symmetric cells; measure the plate block against its own magnitude.
    double scale = ref->max_abs();
    if (id == "a" || id == "b" || id == "c") scale = std::max({T.a.max_abs(), T.b.max_abs(), T.c.max_abs()});
    out.push_back({id, tensor_max_diff(bf, *ref), scale});
  }
  return out;
}

// ------------------------------------------------------------- identity suite

struct IdentityCheck {
  std::string name;
  double residual = 0, scale = 0, tol = 0;
  bool pass = false;
};

struct IdentityReport {
  int dim = 0;
  std::vector<IdentityCheck> checks;
  bool all_pass() const {
    return std::all_of(checks.begin(), checks.end(), [](const IdentityCheck& c) { return c.pass; });
  }
  const IdentityCheck& get(const std::string& name) const {
    for (const auto& c : checks)
      if (c.name == name) return c;
    throw UnknownDefinition("no identity named '" + name + "'");
  }
  nlohmann::json to_json() const {
    nlohmann::json j;
    j["dim"] = dim;
    j["all_pass"] = all_pass();
    for (const auto& c : checks)
      j["checks"].push_back({{"name", c.name}, {"residual", c.residual}, {"scale", c.scale}, {"tol", c.tol}, {"pass", c.pass}});
    return j;
  }
  std::string to_text() const {
    std::ostringstream os;
    os << std::left << std::setw(24) << "identity" << std::setw(14) << "residual" << std::setw(14) << "scale"
       << "status\n";
    for (const auto& c : checks)
      os << std::left << std::setw(24) << c.name << std::setw(14) << std::setprecision(4) << c.residual << std::setw(14)
         << c.scale << (c.pass ? "pass" : "FAIL") << '\n';
    return os.str();
  }
};

// Value of the Sigma quadratic form at a triple (g, x+, x-).
inline double interface_form(const FluidInterfaceCoefficients& c, const Vec& g, const Vec& xp, const Vec& xm) {
  const Vec* x[2] = {&xp, &xm};
  double q = g.dot(c.LG * g);
  for (int a = 0; a < 2; ++a) q += 2.0 * x[a]->dot(c.L[a] * g);
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 2; ++b) q += x[b]->dot(c.B[a][b] * *x[a]);
  return q;
}

struct FormProbes {
  double min_random = 0;    // min of form / |probe|^2 over random triples
  double max_equal = 0;     // max of |form| / |x|^2 over equal triples
  double scale = 0;
};

inline FormProbes probe_interface_form(const FluidInterfaceCoefficients& c, int count = 1000, unsigned seed = 2024) {
  const int d = c.dim;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  auto rnd = [&] { return Vec(Vec::NullaryExpr(d, [&] { return nd(rng); })); };
  FormProbes p;
  p.scale = std::max({max_abs(c.LG), max_abs(c.B[0][0]), max_abs(c.B[1][1])});
  p.min_random = std::numeric_limits<double>::infinity();
  for (int n = 0; n < count; ++n) {
    Vec g = rnd(), xp = rnd(), xm = rnd();
    double nrm = g.squaredNorm() + xp.squaredNorm() + xm.squaredNorm();
    p.min_random = std::min(p.min_random, interface_form(c, g, xp, xm) / nrm);
    Vec x = rnd();
    p.max_equal = std::max(p.max_equal, std::abs(interface_form(c, x, x, x)) / x.squaredNorm());
  }
  return p;
}

// Algebraic identities between the fluid coefficients plus semi-definiteness of
// the Sigma form. The vanishing on equal triples is reported by probe_interface_form.
inline IdentityReport identity_suite(const FluidInterfaceCoefficients& c, double tol = 1e-9) {
  const int d = c.dim;
  IdentityReport r;
  r.dim = d;
  const double sLG = max_abs(c.LG);
  const double scale = std::max({sLG, max_abs(c.B[0][0]), max_abs(c.B[1][1]), max_abs(c.L[0]), max_abs(c.L[1])});
  auto add = [&](const std::string& name, double res, double sc) {
    r.checks.push_back({name, res, sc, tol, res <= tol * sc});
  };
  add("L_sum", max_abs(c.L[0] + c.L[1] + c.LG), sLG);
  const char* nm[2] = {"plus", "minus"};
  for (int a = 0; a < 2; ++a)
    add(std::string("L_B_") + nm[a], max_abs(c.L[a] + c.B[a][0].transpose() + c.B[a][1].transpose()), scale);
  for (int a = 0; a < 2; ++a)
    add(std::string("K_L_vertical_") + nm[a], max_abs((c.K[a] + c.L[a]).col(d - 1)), scale);
  add("symmetry_LG", max_abs(c.LG - c.LG.transpose()), sLG);
  add("symmetry_B", std::max({max_abs(c.B[0][1] - c.B[1][0].transpose()), max_abs(c.B[0][0] - c.B[0][0].transpose()),
                              max_abs(c.B[1][1] - c.B[1][1].transpose())}),
      scale);
  auto p = probe_interface_form(c);
  add("form_semidefinite", std::max(0.0, -p.min_random), p.scale);
  return r;
}

// ---------------------------------------------------------- refinement study

// Quantity selector, e.g. "LG[0][0]", "B+-[2][1]", "Astar[0][0][0][0]", "c[0][0][0][0]",
// "completeness". Indices are zero-based.
struct QuantitySelector {
  std::string name;
  std::vector<int> idx;

  static QuantitySelector parse(const std::string& text) {
    static const std::regex re(R"(^\s*([A-Za-z_+\-]+)((\[\d+\])*)\s*$)");
    std::smatch m;
    if (!std::regex_match(text, m, re)) throw ConfigError("bad quantity selector '" + text + "'");
    QuantitySelector q;
    q.name = m[1];
    std::string rest = m[2];
    static const std::regex num(R"(\[(\d+)\])");
    for (auto it = std::sregex_iterator(rest.begin(), rest.end(), num); it != std::sregex_iterator(); ++it)
      q.idx.push_back(std::stoi((*it)[1]));
    const auto& f = fluid_definition_ids();
    const auto& e = elastic_definition_ids();
    bool fluid = std::find(f.begin(), f.end(), q.name) != f.end();
    bool elastic = std::find(e.begin(), e.end(), q.name) != e.end();
    if (q.name == "completeness") {
      if (!q.idx.empty()) throw ConfigError("completeness takes no indices");
    } else if (fluid) {
      if (q.idx.size() != 2) throw ConfigError("fluid coefficient selector needs two indices");
    } else if (elastic) {
      if (q.idx.size() != 4) throw ConfigError("elastic tensor selector needs four indices");
    } else {
      throw UnknownDefinition("unknown quantity '" + q.name + "'");
    }
    return q;
  }
  bool elastic() const {
    const auto& e = elastic_definition_ids();
    return std::find(e.begin(), e.end(), name) != e.end();
  }
};

struct RefinementRow {
  int resolution = 0;
  double value = 0;
};

struct RefinementTable {
  std::string quantity;
  std::vector<RefinementRow> rows;
  std::vector<double> orders;  // one per consecutive triple
  double order = std::nan("");
  double extrapolated = std::nan("");
  double extrapolated_lo = std::nan(""), extrapolated_hi = std::nan("");
  bool order_unstable = false;
  std::vector<std::string> warnings;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["quantity"] = quantity;
    for (const auto& r : rows) j["rows"].push_back({{"resolution", r.resolution}, {"value", r.value}});
    j["orders"] = orders;
    j["order"] = std::isfinite(order) ? nlohmann::json(order) : nlohmann::json();
    j["extrapolated"] = std::isfinite(extrapolated) ? nlohmann::json(extrapolated) : nlohmann::json();
    if (order_unstable) j["extrapolated_range"] = {extrapolated_lo, extrapolated_hi};
    j["warnings"] = warnings;
    return j;
  }
  std::string to_text() const {
    std::ostringstream os;
    os << "quantity " << quantity << '\n';
    os << std::left << std::setw(12) << "resolution" << std::setw(22) << "value" << "difference\n";
    for (size_t i = 0; i < rows.size(); ++i) {
      os << std::left << std::setw(12) << rows[i].resolution << std::setw(22) << std::setprecision(14) << rows[i].value;
      if (i > 0) os << std::setprecision(4) << rows[i].value - rows[i - 1].value;
      os << '\n';
    }
    os << "observed order " << std::setprecision(4) << order << ", extrapolated " << std::setprecision(14)
       << extrapolated << '\n';
    if (order_unstable) os << "order unstable; extrapolated range [" << extrapolated_lo << ", " << extrapolated_hi << "]\n";
    for (const auto& w : warnings) os << "warning: " << w << '\n';
    return os.str();
  }
};

// Order and Richardson limit from values at increasing resolutions.
inline RefinementTable analyse_refinement(const std::string& quantity, const std::vector<RefinementRow>& rows) {
  if (rows.size() < 3) throw ConfigError("refinement study needs at least three resolutions");
  for (size_t i = 1; i < rows.size(); ++i)
    if (rows[i].resolution <= rows[i - 1].resolution) throw ConfigError("resolutions must increase");
  RefinementTable t;
  t.quantity = quantity;
  t.rows = rows;
  std::vector<double> lims;
  for (size_t i = 2; i < rows.size(); ++i) {
    double d1 = rows[i - 1].value - rows[i - 2].value, d2 = rows[i].value - rows[i - 1].value;
    if (std::abs(d2) >= std::abs(d1) && std::abs(d1) > 0)
      t.warnings.push_back("NonMonotone: differences do not shrink between resolutions " +
                           std::to_string(rows[i - 2].resolution) + ".." + std::to_string(rows[i].resolution));
    if (d1 == 0 || d2 == 0 || d1 * d2 < 0) {
      t.orders.push_back(std::nan(""));
      continue;
    }
    // Error model C h^p: d1/d2 = r2^p (r1^p - 1) / (r2^p - 1), solved for p by bisection.
    const double r1 = static_cast<double>(rows[i - 1].resolution) / rows[i - 2].resolution;
    const double r2 = static_cast<double>(rows[i].resolution) / rows[i - 1].resolution;
    const double target = std::abs(d1 / d2);
    auto ratio = [&](double p) { return std::pow(r2, p) * (std::pow(r1, p) - 1.0) / (std::pow(r2, p) - 1.0); };
    double lo = 1e-6, hi = 30.0;
    if (target <= ratio(lo) || target >= ratio(hi)) {
      t.orders.push_back(std::nan(""));
      continue;
    }
    for (int it = 0; it < 200; ++it) {
      double mid = 0.5 * (lo + hi);
      (ratio(mid) < target ? lo : hi) = mid;
    }
    const double p = 0.5 * (lo + hi);
    t.orders.push_back(p);
    lims.push_back(rows[i].value + d2 / (std::pow(r2, p) - 1.0));
  }
  if (!t.orders.empty() && std::isfinite(t.orders.back())) {
    t.order = t.orders.back();
    t.extrapolated = lims.back();
  } else {
    t.extrapolated = rows.back().value;
  }
  std::vector<double> fin;
  for (double o : t.orders)
    if (std::isfinite(o)) fin.push_back(o);
  if (fin.size() >= 2) {
    auto [lo, hi] = std::minmax_element(fin.begin(), fin.end());
    if (*hi - *lo > 0.5) {
      t.order_unstable = true;
      auto [a, b] = std::minmax_element(lims.begin(), lims.end());
      t.extrapolated_lo = *a;
      t.extrapolated_hi = *b;
    }
  }
  return t;
}

// Cell solves per resolution (concurrently), then the selected quantity.
inline RefinementTable refinement_study(const GeometryDescriptor& desc, const std::vector<int>& resolutions,
                                        const std::string& quantity, const MicroElasticTensor* micro = nullptr,
                                        CellSolveOptions opt = {}) {
  auto q = QuantitySelector::parse(quantity);
  if (q.elastic() && !micro) throw MissingCoefficient("elastic quantity needs a micro elasticity tensor");
  std::vector<RefinementRow> rows(resolutions.size());
  parallel_for(static_cast<int>(resolutions.size()), [&](int n) {
    GeometryDescriptor d = desc;
    d.resolution = resolutions[n];
    auto g = build_cell_geometry(d);
    rows[n].resolution = resolutions[n];
    auto pick = [&](const Mat& m) {
      if (q.idx[0] >= m.rows() || q.idx[1] >= m.cols()) throw ShapeError("selector index out of range");
      return m(q.idx[0], q.idx[1]);
    };
    if (q.elastic()) {
      auto s = solve_elastic_cells(g, *micro, q.name == "a" || q.name == "b" || q.name == "c", opt);
      ElasticEffectiveTensors T = assemble_Astar(s);
      const Tensor4* t = &T.Astar;
      if (q.name == "Astar_energy") t = &T.Astar_energy;
      if (q.name == "a" || q.name == "b" || q.name == "c") {
        assemble_plate_tensors(s, T);
        t = q.name == "a" ? &T.a : q.name == "b" ? &T.b : &T.c;
      }
      for (int i : q.idx)
        if (i >= t->dim) throw ShapeError("selector index out of range");
      rows[n].value = (*t)(q.idx[0], q.idx[1], q.idx[2], q.idx[3]);
      return;
    }
    auto s = solve_stokes_cells(g, opt);
    if (q.name == "completeness") {
      rows[n].value = completeness_residual(s);
      return;
    }
    auto c = assemble_fluid_coefficients(s);
    auto side = [](char ch) { return ch == '+' ? 0 : 1; };
    const std::string& id = q.name;
    if (id == "LG") rows[n].value = pick(c.LG);
    else if (id[0] == 'B') rows[n].value = pick(c.B[side(id[1])][side(id[2])]);
    else if (id[0] == 'L') rows[n].value = pick(c.L[side(id[1])]);
    else if (id[0] == 'K') rows[n].value = pick(c.K[side(id[1])]);
    else rows[n].value = pick(c.M[side(id[1])]);
  });
  auto t = analyse_refinement(quantity, rows);
  if (q.name == "completeness") {
    // Constant-field quantity: the residual itself is the result; no order.
    t.order = std::nan("");
    t.extrapolated = rows.back().value;
  }
  return t;
}

// ---------------------------------------------------------------- fd checks

struct FdCheck {
  std::string op;
  double deviation = 0, scale = 0;
  bool pass(double tol = 1e-13) const { return deviation <= tol * std::max(scale, 1e-300); }
};

// Assembled operators against stencil recomputation on seeded random fields.
// op: "divergence", "strain" (staggered), "sym_gradient" (Q1), "saddle".
inline FdCheck fd_check(const std::string& op, const CellGeometry& g, unsigned seed = 7) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> U(-1, 1);
  const int d = g.dim();
  const double h = g.h();
  FdCheck r;
  r.op = op;
  auto grid = StaggeredGrid::for_cell(g);
  auto rand_vec = [&](int n) { return Vec(Vec::NullaryExpr(n, [&] { return U(rng); })); };
  if (op == "divergence") {
    Vec u = rand_vec(grid.num_vel());
    Vec D = grid.divergence_operator() * u;
    detail::VoxelStrain vs(g);
    for (int v = 0; v < g.num_voxels(); ++v) {
      Idx3 c = g.coords(v);
      double s = 0;
      for (int k = 0; k < d; ++k) s += (vs.face_value(u, k, c[k] + 1, c) - vs.face_value(u, k, c[k], c)) / h;
      r.deviation = std::max(r.deviation, std::abs(s - D[v]));
      r.scale = std::max(r.scale, std::abs(s));
    }
    return r;
  }
  if (op == "strain") {
    // Energy of a random field: assembled S^T W S against the voxel walk.
    Vec u = rand_vec(grid.num_vel());
    Vec Su = grid.strain_operator() * u;
    Vec w = grid.sample_weights({});
    double e1 = (w.array() * Su.array().square()).sum();
    detail::VoxelStrain vs(g);
    double e2 = 0;
    std::vector<const Vec*> f{&u};
    for (int v = 0; v < g.num_voxels(); ++v) vs.visit(v, f, [&](double wt, const Vec& e) { e2 += wt * e[0] * e[0]; });
    r.deviation = std::abs(e1 - e2);
    r.scale = std::abs(e1);
    return r;
  }
  if (op == "sym_gradient") {
    VertexGrid vg(g);
    Q1Element el(d, h);
    Vec u = rand_vec(d * vg.num_vertices());
    for (int v = 0; v < g.num_voxels(); ++v) {
      Idx3 c = g.coords(v);
      for (int p = 0; p < el.ngp; ++p) {
        Mat E = q1_strain(vg, el, u, c, p);
        Mat Gr = detail::q1_gradient(vg, u, c, el.gp[p]);
        Mat E2 = 0.5 * (Gr + Gr.transpose());
        r.deviation = std::max(r.deviation, max_abs(E - E2));
        r.scale = std::max(r.scale, max_abs(E2));
      }
    }
    return r;
  }
  if (op == "saddle") {
    // Monolithic product against the block formula, on the cell Stokes operator.
    SpMat S = grid.strain_operator();
    Vec w = grid.sample_weights(region_mask(g, Region::Fluid));
    SpMat A = S.transpose() * w.asDiagonal() * S;
    SpMat B = grid.divergence_operator();
    const int n = static_cast<int>(A.rows()), m = static_cast<int>(B.rows());
    SaddleSystem sys;
    sys.A = A;
    sys.B = B;
    sys.pressure_kernel = true;
    SpMat K = assemble_saddle_matrix(sys);
    const int nk = static_cast<int>(K.rows());
    Vec x = rand_vec(nk);
    Vec y = K * x;
    Vec y1 = A * x.head(n) + B.transpose() * x.segment(n, m);
    Vec y2 = B * x.head(n) + Vec::Constant(m, x[n + m]);
    double y3 = x.segment(n, m).sum();
    r.deviation = std::max({max_abs(y.head(n) - y1), max_abs(y.segment(n, m) - y2), std::abs(y[n + m] - y3)});
    r.scale = std::max(max_abs(y1), max_abs(y2));
    return r;
  }
  throw UnknownDefinition("unknown operator '" + op + "'");
}

}  // namespace memhom
