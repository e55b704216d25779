#pragma once
/**
 * @file macro.hpp
 * @brief Homogenized Stokes/membrane (gamma = 1) and Stokes/plate (gamma = 3) time stepping.
 *
 * Omega+ = Sigma x (0, H) and Omega- = Sigma x (-H, 0) are MAC boxes. Lateral walls are
 * no-slip, top and bottom are stress-free. On Sigma the normal velocity is a single
 * shared unknown per cell; each side keeps its own tangential trace (the wall slots).
 *
 * The Sigma coupling is the cell quadratic form
 *   Q = LG g.g + 2 sum_a L^a g.x^a + sum_ab B^ab x^a.x^b,  g = d_t u,
 * integrated with Gauss points. Its derivatives give the fluid traction and the
 * displacement equation, so the discrete form stays positive semi-definite.
 *
 * Implicit Euler with the surface rate r as unknown: u_new = u + dt r. The matrix
 * is symmetric, fixed for a run and factorised once.
 */

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "memhom/cell_elastic.hpp"
#include "memhom/cell_stokes.hpp"
#include "memhom/errors.hpp"
#include "memhom/expr.hpp"
#include "memhom/geometry.hpp"
#include "memhom/linsolve.hpp"
#include "memhom/staggered.hpp"
#include "memhom/tensor.hpp"

namespace memhom {

// ------------------------------------------------------------------ forcing

struct ForcingSegment {
  double t_end = std::numeric_limits<double>::infinity();
  std::vector<Expr> side[2];  // 0: Omega+, 1: Omega-
};

// Body force per side. Segments are piecewise constant in time; the first
// segment with t <= t_end applies, the last one extends to infinity.
struct Forcing {
  int dim = 2;
  std::vector<ForcingSegment> segments;

  static Forcing zero(int d) {
    Forcing f;
    f.dim = d;
    return f;
  }

  // Constant-in-time expressions for both sides.
  static Forcing expressions(int d, const std::vector<std::string>& plus, const std::vector<std::string>& minus) {
    Forcing f;
    f.dim = d;
    ForcingSegment s;
    for (const auto& e : plus) s.side[0].push_back(Expr::parse(e));
    for (const auto& e : minus) s.side[1].push_back(Expr::parse(e));
    f.segments.push_back(s);
    f.check();
    return f;
  }

  void check() const {
    for (const auto& s : segments)
      for (int a = 0; a < 2; ++a)
        if (!s.side[a].empty() && static_cast<int>(s.side[a].size()) != dim)
          throw ConfigError("forcing needs " + std::to_string(dim) + " components per side");
  }

  bool is_zero() const {
    for (const auto& s : segments)
      for (int a = 0; a < 2; ++a)
        for (const auto& e : s.side[a])
          if (!e.is_zero_constant()) return false;
    return true;
  }

  double value(int side, int k, const std::array<double, 3>& x, double t) const {
    for (size_t i = 0; i < segments.size(); ++i) {
      const auto& s = segments[i];
      if (t <= s.t_end || i + 1 == segments.size()) {
        if (s.side[side].empty()) return 0.0;
        return s.side[side][k](x, t, dim);
      }
    }
    return 0.0;
  }
};

inline Forcing parse_forcing(const nlohmann::json& j, int dim) {
  Forcing f;
  f.dim = dim;
  auto read_side = [&](const nlohmann::json& s, std::vector<Expr>& out) {
    if (s.is_null()) return;
    if (!s.is_array()) throw ConfigError("forcing side must be an array of components");
    for (const auto& c : s) {
      if (c.is_number()) out.push_back(Expr::number(c.get<double>()));
      else if (c.is_string()) out.push_back(Expr::parse(c.get<std::string>()));
      else throw ConfigError("forcing component must be a number or an expression string");
    }
  };
  auto read_segment = [&](const nlohmann::json& s) {
    ForcingSegment seg;
    if (s.contains("until")) seg.t_end = s.at("until").get<double>();
    read_side(s.value("plus", nlohmann::json()), seg.side[0]);
    read_side(s.value("minus", nlohmann::json()), seg.side[1]);
    f.segments.push_back(seg);
  };
  if (j.is_null()) return f;
  try {
    if (j.contains("segments")) {
      for (const auto& s : j.at("segments")) read_segment(s);
    } else {
      read_segment(j);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("forcing: ") + e.what());
  }
  for (size_t i = 1; i < f.segments.size(); ++i)
    if (!(f.segments[i].t_end > f.segments[i - 1].t_end)) throw ConfigError("forcing segments must have increasing 'until'");
  f.check();
  return f;
}

// ---------------------------------------------------------------- bulk boxes

enum class BoxSide { Dirichlet, Neumann, FreeSlip, Interface };
using BoxSides = std::array<std::array<BoxSide, 2>, 3>;

// MAC box with every axis walled. A dof is fixed when a Dirichlet side holds it
// or when it is the normal component on a free-slip side.
class BulkBox {
 public:
  BulkBox(int dim, Idx3 n, std::array<double, 3> h, std::array<double, 3> origin, BoxSides sides)
      : grid_(dim, n, h, {false, false, false}, origin), sides_(sides) {
    int nv = grid_.num_vel();
    fixed_.assign(nv, 0);
    mass_ = Vec::Zero(nv);
    const Idx3& N = grid_.n();
    for (int dof = 0; dof < nv; ++dof) {
      auto [k, s] = grid_.vel_slot(dof);
      bool fix = false;
      double m = 1.0;
      for (int a = 0; a < dim; ++a) {
        const double ha = grid_.h()[a];
        if (a == k) {
          bool lo = s[a] == 0, hi = s[a] == N[a];
          if (lo || hi) {
            BoxSide b = sides_[a][hi ? 1 : 0];
            if (b == BoxSide::Dirichlet || b == BoxSide::FreeSlip) fix = true;
            m *= 0.5 * ha;
          } else {
            m *= ha;
          }
        } else {
          bool lo = s[a] == 0, hi = s[a] == N[a] + 1;
          if (lo || hi) {
            if (sides_[a][hi ? 1 : 0] == BoxSide::Dirichlet) fix = true;
            m = 0.0;
          } else {
            m *= ha;
          }
        }
      }
      fixed_[dof] = fix;
      mass_[dof] = m;
    }
    S_ = grid_.strain_operator();
    w_ = grid_.sample_weights({});
    Div_ = grid_.divergence_operator();
  }

  const StaggeredGrid& grid() const { return grid_; }
  int dim() const { return grid_.dim(); }
  bool fixed(int dof) const { return fixed_[dof] != 0; }
  const Vec& mass() const { return mass_; }
  const SpMat& strain() const { return S_; }
  const Vec& weights() const { return w_; }
  const SpMat& divergence() const { return Div_; }
  BoxSide side(int axis, int end) const { return sides_[axis][end]; }

  SpMat stiffness() const {
    SpMat A = S_.transpose() * w_.asDiagonal() * S_;
    return A;
  }
  // Constant pressure is in the kernel unless a side is open.
  bool pressure_kernel() const {
    for (int a = 0; a < dim(); ++a)
      for (int e = 0; e < 2; ++e)
        if (sides_[a][e] == BoxSide::Neumann || sides_[a][e] == BoxSide::Interface) return false;
    return true;
  }
  double kinetic_energy(const Vec& v) const { return 0.5 * (mass_.array() * v.array().square()).sum(); }
  double max_divergence(const Vec& v) const {
    Vec d = Div_ * v;
    return d.size() ? d.cwiseAbs().maxCoeff() : 0.0;
  }

 private:
  StaggeredGrid grid_;
  BoxSides sides_;
  std::vector<uint8_t> fixed_;
  Vec mass_;
  SpMat S_;
  Vec w_;
  SpMat Div_;
};

using FieldFn = std::function<double(int, const std::array<double, 3>&, double)>;

// Implicit Euler for instationary Stokes on one box, with Dirichlet data g and
// body force f. Used for manufactured solutions and reference solves.
class StokesBoxSolver {
 public:
  StokesBoxSolver(BulkBox box, double dt) : box_(std::move(box)), dt_(dt) {
    if (!(dt > 0)) throw ConfigError("time step must be positive");
    int nv = box_.grid().num_vel();
    idx_.assign(nv, -1);
    nfree_ = 0;
    for (int i = 0; i < nv; ++i)
      if (!box_.fixed(i)) idx_[i] = nfree_++;
    K_ = box_.stiffness();
    K_ += SpMat(Vec(box_.mass() / dt_).asDiagonal());
    Bfull_ = -box_.grid().cell_volume() * box_.divergence();
    SpMat P = selector();
    SaddleSystem s;
    s.A = P.transpose() * K_ * P;
    s.B = Bfull_ * P;
    s.pressure_kernel = box_.pressure_kernel();
    fact_.compute(s);
  }

  const BulkBox& box() const { return box_; }

  // Returns (v, p) at t1 from v at t1 - dt.
  std::pair<Vec, Vec> step(const Vec& v, double t1, const FieldFn& f, const FieldFn& g) const {
    const auto& G = box_.grid();
    int nv = G.num_vel();
    Vec data = Vec::Zero(nv), force(nv);
    for (int i = 0; i < nv; ++i) {
      auto x = G.vel_position(i);
      int k = G.vel_slot(i).first;
      force[i] = f ? f(k, x, t1) : 0.0;
      if (box_.fixed(i) && g) data[i] = g(k, x, t1);
    }
    Vec rhs = box_.mass().cwiseProduct(v / dt_ + force) - K_ * data;
    SpMat P = selector();
    Vec ff = P.transpose() * rhs;
    Vec gg = -(Bfull_ * data);
    auto [uf, p] = fact_.solve(ff, gg);
    Vec out = data + P * uf;
    return {out, p};
  }

 private:
  SpMat selector() const {
    std::vector<Triplet> t;
    for (int i = 0; i < static_cast<int>(idx_.size()); ++i)
      if (idx_[i] >= 0) t.emplace_back(i, idx_[i], 1.0);
    SpMat P(static_cast<int>(idx_.size()), nfree_);
    P.setFromTriplets(t.begin(), t.end());
    return P;
  }

  BulkBox box_;
  double dt_;
  std::vector<int> idx_;
  int nfree_ = 0;
  SpMat K_, Bfull_;
  SaddleFactorization fact_;
};

// ------------------------------------------------------------ surface tensors

// In-plane (dim - 1) tensors acting on Sigma.
struct SurfaceTensors {
  int dim = 0;  // ambient dimension
  Tensor4 A;    // membrane, gamma = 1
  Tensor4 a, b, c;  // plate, gamma = 3
  bool has_membrane = false, has_plate = false;
};

inline SurfaceTensors surface_tensors(const ElasticEffectiveTensors& e) {
  SurfaceTensors s;
  s.dim = e.dim;
  if (e.Astar.dim == e.dim) {
    s.A = e.Astar.leading(e.dim - 1);
    s.has_membrane = true;
  }
  if (e.has_plate) {
    s.a = e.a;
    s.b = e.b;
    s.c = e.c;
    s.has_plate = true;
  }
  return s;
}

// 3d x 3d matrix of the Sigma quadratic form, ordered (Gamma, +, -).
inline Mat interface_form_matrix(const FluidInterfaceCoefficients& c) {
  int d = c.dim;
  Mat C = Mat::Zero(3 * d, 3 * d);
  C.block(0, 0, d, d) = c.LG;
  for (int a = 0; a < 2; ++a) {
    C.block(d * (1 + a), 0, d, d) = c.L[a];
    C.block(0, d * (1 + a), d, d) = c.L[a].transpose();
    for (int b = 0; b < 2; ++b) C.block(d * (1 + b), d * (1 + a), d, d) = c.B[a][b];
  }
  Mat Cs = 0.5 * (C + C.transpose());
  return Cs;
}

// ------------------------------------------------------------------ the system

struct MacroOptions {
  int gamma = 1;
  double dt = 1e-2;
  bool freeze_surface = false;  // drop the surface unknowns (u stays at its initial value)
};

struct MacroState {
  int step = 0;
  double t = 0;
  Vec v[2], p[2];  // full bulk vectors, 0: Omega+, 1: Omega-
  Vec u;           // surface displacement (full surface layout)
  Vec rate;        // surface rate of the last step
};

struct SigmaFlux {
  double sigma = 0;           // downward flux through Sigma from the shared normal velocity
  double leaving_plus = 0;    // same, from the mass budget of Omega+
  double entering_minus = 0;  // same, from the mass budget of Omega-
  double imbalance() const {
    return std::max({std::abs(sigma - leaving_plus), std::abs(sigma - entering_minus),
                     std::abs(leaving_plus - entering_minus)});
  }
};

struct InterfaceResiduals {
  double continuity = 0;  // max |w+ - w-| on Sigma
  double f1 = 0, f1_scale = 0;  // L+g.nu+ - L-g.nu- + K+v+.nu+ - K-v-.nu- (gamma = 1)
  double vertical = 0, vertical_scale = 0;  // (LG g)_3 + sum L^a e3.v^a (gamma = 1)
  // [[sigma33]] - predicted: RMS over cells at least 1/8 of the Sigma width away from
  // its boundary (the wall/interface corners are singular), and max over all cells.
  double normal_jump = 0, normal_jump_scale = 0, normal_jump_max = 0;
  double tangential = 0, tangential_scale = 0;
  double membrane = 0, membrane_scale = 0;  // weak membrane force vs tangential stress jump
};

class MacroSystem {
 public:
  MacroSystem(const MacroDomain& dom, const FluidInterfaceCoefficients& coeffs, const SurfaceTensors& tensors,
              MacroOptions opt)
      : dom_(dom), coeffs_(coeffs), ten_(tensors), opt_(opt) {
    dom_.validate();
    d_ = dom_.dim;
    if (coeffs_.dim != d_) throw DimensionMismatch("fluid coefficients have dim " + std::to_string(coeffs_.dim));
    for (const Mat* m : {&coeffs_.LG, &coeffs_.L[0], &coeffs_.L[1], &coeffs_.B[0][0], &coeffs_.B[0][1],
                         &coeffs_.B[1][0], &coeffs_.B[1][1]})
      if (m->rows() != d_ || m->cols() != d_) throw MissingCoefficient("fluid coefficient block missing or mis-sized");
    if (opt_.gamma != 1 && opt_.gamma != 3) throw ConfigError("gamma must be 1 or 3");
    if (!(opt_.dt > 0)) throw ConfigError("time step must be positive");
    if (opt_.gamma == 1 && !ten_.has_membrane) throw MissingCoefficient("gamma = 1 needs the membrane tensor A*");
    if (opt_.gamma == 3 && !ten_.has_plate) throw MissingCoefficient("gamma = 3 needs the plate tensors a*, b*, c*");
    const Tensor4& chk = opt_.gamma == 1 ? ten_.A : ten_.a;
    if (chk.dim != d_ - 1) throw DimensionMismatch("surface tensors must have dim - 1 indices");
    if (opt_.gamma == 3 && (ten_.b.dim != d_ - 1 || ten_.c.dim != d_ - 1))
      throw DimensionMismatch("plate tensors must have dim - 1 indices");

    build_layout();
    build_surface_matrix();
    build_interface();
    factorize();
  }

  int dim() const { return d_; }
  int gamma() const { return opt_.gamma; }
  double dt() const { return opt_.dt; }
  const MacroDomain& domain() const { return dom_; }
  const BulkBox& bulk(int side) const { return *bulk_[side]; }
  const FluidInterfaceCoefficients& coefficients() const { return coeffs_; }
  int num_unknowns() const { return nglob_; }
  int num_surface() const { return nsurf_; }
  int sigma_cells() const { return L_[0] * L_[1]; }
  const SpMat& surface_matrix() const { return E_; }
  const SpMat& interface_matrix() const { return Cint_; }

  MacroState zero_state() const {
    MacroState s;
    for (int b = 0; b < 2; ++b) {
      s.v[b] = Vec::Zero(bulk_[b]->grid().num_vel());
      s.p[b] = Vec::Zero(bulk_[b]->grid().num_cells());
    }
    s.u = Vec::Zero(nsurf_);
    s.rate = Vec::Zero(nsurf_);
    return s;
  }

  // Plate (gamma = 3) nodal interpolant of w from (w, w_x, w_y, w_xy) at (x, y).
  Vec plate_interpolant(const std::function<std::array<double, 4>(double, double)>& w) const {
    if (opt_.gamma != 3) throw ConfigError("plate interpolant needs gamma = 3");
    Vec u = Vec::Zero(nsurf_);
    const int npd = d_ == 2 ? 2 : 4, off = (d_ - 1) * nn_;
    for (int node = 0; node < nn_; ++node) {
      double x = dom_.a[0] + (node % N_[0]) * dom_.hx();
      double y = d_ == 3 ? dom_.a[1] + (node / N_[0]) * dom_.hx() : 0.0;
      auto v = w(x, y);
      for (int q = 0; q < npd; ++q) u[off + node * npd + q] = sfixed_[off + node * npd + q] ? 0.0 : v[q];
    }
    return u;
  }

  // Random values on every free dof (not divergence free).
  MacroState random_state(unsigned seed, double amplitude = 1.0) const {
    MacroState s = zero_state();
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> U(-amplitude, amplitude);
    for (int b = 0; b < 2; ++b)
      for (int i = 0; i < s.v[b].size(); ++i)
        if (gv_[b][i] >= 0) s.v[b][i] = U(rng);
    for (int b = 0; b < 2; ++b)
      for (int i = 0; i < s.v[b].size(); ++i)
        if (shared_[b][i] >= 0) s.v[b][i] = s.v[0][shared_[b][i]];
    for (int i = 0; i < nsurf_; ++i)
      if (!sfixed_[i]) s.u[i] = U(rng);
    return s;
  }

  MacroState step(const MacroState& s, const Forcing& f) const {
    double t1 = s.t + opt_.dt;
    Vec rhs = Vec::Zero(nglob_);
    for (int b = 0; b < 2; ++b) {
      const auto& G = bulk_[b]->grid();
      const Vec& m = bulk_[b]->mass();
      for (int i = 0; i < G.num_vel(); ++i) {
        int g = gv_[b][i];
        if (g < 0 || m[i] == 0.0) continue;
        double fi = f.segments.empty() ? 0.0 : f.value(b, G.vel_slot(i).first, G.vel_position(i), t1);
        rhs[g] += m[i] * (s.v[b][i] / opt_.dt + fi);
      }
    }
    if (!opt_.freeze_surface) {
      Vec Eu = E_ * s.u;
      for (int i = 0; i < nsurf_; ++i)
        if (gs_[i] >= 0) rhs[gs_[i]] -= Eu[i];
    }
    Vec g = Vec::Zero(npres_);
    auto [x, p] = solve(rhs, g);

    MacroState n;
    n.step = s.step + 1;
    n.t = t1;
    for (int b = 0; b < 2; ++b) {
      n.v[b] = Vec::Zero(s.v[b].size());
      for (int i = 0; i < n.v[b].size(); ++i)
        if (gv_[b][i] >= 0) n.v[b][i] = x[gv_[b][i]];
      n.p[b] = p.segment(b == 0 ? 0 : bulk_[0]->grid().num_cells(), bulk_[b]->grid().num_cells());
    }
    n.rate = Vec::Zero(nsurf_);
    for (int i = 0; i < nsurf_; ++i)
      if (gs_[i] >= 0) n.rate[i] = x[gs_[i]];
    n.u = s.u + opt_.dt * n.rate;
    return n;
  }

  double kinetic_energy(const MacroState& s) const {
    return bulk_[0]->kinetic_energy(s.v[0]) + bulk_[1]->kinetic_energy(s.v[1]);
  }
  double elastic_energy(const MacroState& s) const { return 0.5 * s.u.dot(E_ * s.u); }
  double energy(const MacroState& s) const { return kinetic_energy(s) + elastic_energy(s); }

  // Max |div v| over both bulks (per unit length, like the constraint rows).
  double max_divergence(const MacroState& s) const {
    return std::max(bulk_[0]->max_divergence(s.v[0]), bulk_[1]->max_divergence(s.v[1]));
  }

  SigmaFlux flux(const MacroState& s) const {
    SigmaFlux fl;
    double area = std::pow(dom_.hx(), d_ - 1);
    int z = d_ - 1;
    for (int c = 0; c < sigma_cells(); ++c) {
      fl.sigma -= s.v[0][wface(0, c)] * area;
      fl.leaving_plus -= s.v[0][vface(0, c, nz_)] * area;
      fl.entering_minus -= s.v[1][vface(1, c, 0)] * area;
    }
    (void)z;
    return fl;
  }

  // Surface fields per Sigma cell (centre coordinate, w, u3, d_t u3, max in-plane displacement).
  struct SigmaSample {
    std::array<double, 3> x{0, 0, 0};
    double w = 0, u3 = 0, r3 = 0, uh = 0;
  };
  std::vector<SigmaSample> sigma_profile(const MacroState& s) const {
    std::vector<SigmaSample> out(sigma_cells());
    Vec X = global_vector(s);
    for (int c = 0; c < sigma_cells(); ++c) {
      int i = c % L_[0], j = c / L_[0];
      SigmaSample& o = out[c];
      o.x[0] = dom_.a[0] + (i + 0.5) * dom_.hx();
      if (d_ == 3) o.x[1] = dom_.a[1] + (j + 0.5) * dom_.hx();
      o.w = s.v[0][wface(0, c)];
      auto sb = surface_basis(i, j, 0.5, 0.5);
      for (auto [dof, val] : sb.w) {
        o.u3 += val * s.u[dof];
        o.r3 += val * s.rate[dof];
      }
      double uh = 0;
      for (int k = 0; k < d_ - 1; ++k) {
        double v = 0;
        for (const auto& nb : sb.nodes) v += nb.N * s.u[k * nn_ + nb.node];
        uh += v * v;
      }
      o.uh = std::sqrt(uh);
      (void)X;
    }
    return out;
  }

  InterfaceResiduals interface_residuals(const MacroState& s) const {
    InterfaceResiduals R;
    Vec X = global_vector(s);
    const int d = d_, z = d_ - 1;
    Vec Sv[2] = {bulk_[0]->strain() * s.v[0], bulk_[1]->strain() * s.v[1]};
    Mat Kc[2] = {coeffs_.K[0], coeffs_.K[1]};

    // Normal velocity continuity (both bulks read their own Sigma face).
    for (int c = 0; c < sigma_cells(); ++c)
      R.continuity = std::max(R.continuity, std::abs(s.v[0][wface(0, c)] - s.v[1][wface(1, c)]));

    double jump2 = 0, jscale = 0;
    int ninterior = 0;
    for (int c = 0; c < sigma_cells(); ++c) {
      int i = c % L_[0], j = c / L_[0];
      Vec g = Vec::Zero(d), xp = Vec::Zero(d), xm = Vec::Zero(d);
      for (size_t q = 0; q < gp_.size(); ++q)
        for (size_t r = 0; r < (d == 3 ? gp_.size() : 1); ++r) {
          double wt = gw_[q] * (d == 3 ? gw_[r] : 1.0);
          auto F = functionals(i, j, gp_[q], d == 3 ? gp_[r] : 0.5);
          for (int k = 0; k < 3 * d; ++k) {
            double v = 0;
            for (auto [idx, a] : F[k]) v += a * X[idx];
            (k < d ? g[k] : k < 2 * d ? xp[k - d] : xm[k - 2 * d]) += wt * v;
          }
        }
      // nu+ = -e3, nu- = +e3.
      double t1 = -(coeffs_.L[0] * g)[z], t2 = -(coeffs_.L[1] * g)[z];
      double t3 = -(Kc[0] * xp)[z], t4 = -(Kc[1] * xm)[z];
      double f1 = t1 + t2 + t3 + t4;
      if (opt_.gamma == 1) {
        R.f1 = std::max(R.f1, std::abs(f1));
        R.f1_scale = std::max(R.f1_scale, std::abs(t1) + std::abs(t2) + std::abs(t3) + std::abs(t4));
        double a1 = (coeffs_.LG * g)[z], a2 = coeffs_.L[0].col(z).dot(xp), a3 = coeffs_.L[1].col(z).dot(xm);
        R.vertical = std::max(R.vertical, std::abs(a1 + a2 + a3));
        R.vertical_scale = std::max(R.vertical_scale, std::abs(a1) + std::abs(a2) + std::abs(a3));
      }
      // [[sigma33]] predicted by the weak form: sum_b (L^b g)_3 + sum_a (K^a x^a)_3.
      double pred = (coeffs_.L[0] * g)[z] + (coeffs_.L[1] * g)[z] + (Kc[0] * xp)[z] + (Kc[1] * xm)[z];
      double sig[2];
      for (int b = 0; b < 2; ++b) {
        int c1 = bulk_cell(b, c, b == 0 ? 0 : nz_ - 1), c2 = bulk_cell(b, c, b == 0 ? 1 : nz_ - 2);
        double s1 = Sv[b][c1 * d + z] - s.p[b][c1], s2 = Sv[b][c2 * d + z] - s.p[b][c2];
        sig[b] = 1.5 * s1 - 0.5 * s2;
      }
      double jump = sig[0] - sig[1];
      R.normal_jump_max = std::max(R.normal_jump_max, std::abs(jump - pred));
      if (!interior_cell(c)) continue;
      jump2 += (jump - pred) * (jump - pred);
      ninterior += 1;
      jscale = std::max({jscale, std::abs(jump), std::abs(pred)});
    }
    R.normal_jump = std::sqrt(jump2 / std::max(1, ninterior));
    R.normal_jump_scale = jscale;

    tangential_residuals(s, X, Sv, R);
    return R;
  }

  // Global unknown vector (velocities and rates) of a state.
  Vec global_vector(const MacroState& s) const {
    Vec X = Vec::Zero(nglob_);
    for (int b = 0; b < 2; ++b)
      for (int i = 0; i < s.v[b].size(); ++i)
        if (gv_[b][i] >= 0) X[gv_[b][i]] = s.v[b][i];
    for (int i = 0; i < nsurf_; ++i)
      if (gs_[i] >= 0) X[gs_[i]] = s.rate[i];
    return X;
  }

  // Value of the Sigma quadratic form for the traces of a state.
  double interface_energy(const MacroState& s) const {
    Vec X = global_vector(s);
    return X.dot(Cint_ * X);
  }

 private:
  struct NodeBasis {
    int node;
    double N, dN[2];
  };
  struct SurfaceBasis {
    std::vector<NodeBasis> nodes;  // Q1 / P1 in-plane basis
    std::vector<std::pair<int, double>> w;  // vertical displacement: (surface dof, value)
    std::vector<std::array<double, 4>> hess;  // Hessian (xx, xy, yx, yy) per w entry (plate)
  };

  // ---- layout

  void build_layout() {
    const int d = d_;
    L_ = {dom_.cells(0), d == 3 ? dom_.cells(1) : 1};
    N_ = {L_[0] + 1, d == 3 ? L_[1] + 1 : 1};
    nn_ = N_[0] * N_[1];
    nz_ = dom_.vertical_cells();
    double hx = dom_.hx(), hz = dom_.hz();
    Idx3 n{L_[0], d == 3 ? L_[1] : nz_, nz_};
    std::array<double, 3> h{hx, d == 3 ? hx : hz, hz};
    for (int b = 0; b < 2; ++b) {
      std::array<double, 3> org{static_cast<double>(dom_.a[0]), 0, 0};
      if (d == 3) org[1] = dom_.a[1];
      org[d - 1] = b == 0 ? 0.0 : -dom_.H;
      BoxSides sides;
      for (auto& s : sides) s = {BoxSide::Dirichlet, BoxSide::Dirichlet};
      sides[d - 1] = b == 0 ? std::array<BoxSide, 2>{BoxSide::Interface, BoxSide::Neumann}
                            : std::array<BoxSide, 2>{BoxSide::Neumann, BoxSide::Interface};
      bulk_[b] = std::make_shared<BulkBox>(d, n, h, org, sides);
    }

    nglob_ = 0;
    for (int b = 0; b < 2; ++b) {
      const auto& G = bulk_[b]->grid();
      gv_[b].assign(G.num_vel(), -1);
      shared_[b].assign(G.num_vel(), -1);
    }
    const auto& Gp = bulk_[0]->grid();
    for (int i = 0; i < Gp.num_vel(); ++i)
      if (!bulk_[0]->fixed(i)) gv_[0][i] = nglob_++;
    std::map<int, int> shared;  // Omega- Sigma face -> Omega+ Sigma face
    for (int c = 0; c < sigma_cells(); ++c) shared[wface(1, c)] = wface(0, c);
    const auto& Gm = bulk_[1]->grid();
    for (int i = 0; i < Gm.num_vel(); ++i) {
      if (bulk_[1]->fixed(i)) continue;
      auto it = shared.find(i);
      if (it != shared.end()) {
        gv_[1][i] = gv_[0][it->second];
        shared_[1][i] = it->second;
      } else {
        gv_[1][i] = nglob_++;
      }
    }

    // Surface layout.
    int npd = d == 2 ? 2 : 4;
    nsurf_ = (d - 1) * nn_ + (opt_.gamma == 1 ? sigma_cells() : nn_ * npd);
    sfixed_.assign(nsurf_, 0);
    for (int node = 0; node < nn_; ++node) {
      if (!boundary_node(node)) continue;
      for (int k = 0; k < d - 1; ++k) sfixed_[k * nn_ + node] = 1;
      if (opt_.gamma == 3)
        for (int q = 0; q < npd; ++q) sfixed_[(d - 1) * nn_ + node * npd + q] = 1;
    }
    gs_.assign(nsurf_, -1);
    if (!opt_.freeze_surface)
      for (int i = 0; i < nsurf_; ++i)
        if (!sfixed_[i]) gs_[i] = nglob_++;

    npres_ = bulk_[0]->grid().num_cells() + bulk_[1]->grid().num_cells();

    // 4-point Gauss rule on [0, 1].
    double r1 = std::sqrt(3.0 / 7.0 - 2.0 / 7.0 * std::sqrt(6.0 / 5.0));
    double r2 = std::sqrt(3.0 / 7.0 + 2.0 / 7.0 * std::sqrt(6.0 / 5.0));
    double w1 = (18.0 + std::sqrt(30.0)) / 36.0, w2 = (18.0 - std::sqrt(30.0)) / 36.0;
    gp_ = {0.5 * (1 - r2), 0.5 * (1 - r1), 0.5 * (1 + r1), 0.5 * (1 + r2)};
    gw_ = {0.5 * w2, 0.5 * w1, 0.5 * w1, 0.5 * w2};
  }

  bool interior_cell(int c) const {
    int ci[2] = {c % L_[0], c / L_[0]};
    for (int k = 0; k < d_ - 1; ++k) {
      double x = (ci[k] + 0.5) / L_[k];
      if (x < 0.125 || x > 0.875) return false;
    }
    return true;
  }

  bool boundary_node(int node) const {
    int ix = node % N_[0], iy = node / N_[0];
    if (ix == 0 || ix == L_[0]) return true;
    return d_ == 3 && (iy == 0 || iy == L_[1]);
  }

  int bulk_cell(int b, int sigma_cell, int layer) const {
    int i = sigma_cell % L_[0], j = sigma_cell / L_[0];
    Idx3 c{i, 0, 0};
    if (d_ == 3) c = {i, j, layer};
    else c = {i, layer, 0};
    return bulk_[b]->grid().cell_index(c);
  }

  // Vertical face of component d-1 above Sigma cell c at vertical face index f.
  int vface(int b, int c, int f) const {
    int i = c % L_[0], j = c / L_[0];
    const auto& G = bulk_[b]->grid();
    Idx3 s{0, 0, 0};
    s[0] = G.centre_slot(0, i);
    if (d_ == 3) s[1] = G.centre_slot(1, j);
    s[d_ - 1] = f;
    return G.vel_index(d_ - 1, s);
  }
  int wface(int b, int c) const { return vface(b, c, b == 0 ? 0 : nz_); }

  // Tangential trace of component k at lateral face fk (along k) and centre cm (other lateral axis).
  int trace_dof(int b, int k, int fk, int cm) const {
    const auto& G = bulk_[b]->grid();
    Idx3 s{0, 0, 0};
    s[k] = fk;
    if (d_ == 3) s[1 - k] = G.centre_slot(1 - k, cm);
    s[d_ - 1] = b == 0 ? 0 : nz_ + 1;
    return G.vel_index(k, s);
  }

  // ---- surface basis at local coordinates (xi, eta) of Sigma cell (i, j)

  static std::array<double, 4> hermite(double t) {
    return {1 - 3 * t * t + 2 * t * t * t, t - 2 * t * t + t * t * t, 3 * t * t - 2 * t * t * t, -t * t + t * t * t};
  }
  static std::array<double, 4> hermite_d1(double t) {
    return {-6 * t + 6 * t * t, 1 - 4 * t + 3 * t * t, 6 * t - 6 * t * t, -2 * t + 3 * t * t};
  }
  static std::array<double, 4> hermite_d2(double t) {
    return {-6 + 12 * t, -4 + 6 * t, 6 - 12 * t, -2 + 6 * t};
  }

  SurfaceBasis surface_basis(int i, int j, double xi, double eta) const {
    SurfaceBasis sb;
    const double h = dom_.hx();
    if (d_ == 2) {
      sb.nodes.push_back({i, 1 - xi, {-1 / h, 0}});
      sb.nodes.push_back({i + 1, xi, {1 / h, 0}});
    } else {
      for (int b = 0; b < 2; ++b)
        for (int a = 0; a < 2; ++a) {
          double Nx = a ? xi : 1 - xi, Ny = b ? eta : 1 - eta;
          double dx = (a ? 1 : -1) / h, dy = (b ? 1 : -1) / h;
          sb.nodes.push_back({(i + a) + N_[0] * (j + b), Nx * Ny, {dx * Ny, Nx * dy}});
        }
    }
    if (opt_.gamma == 1) {
      sb.w.push_back({(d_ - 1) * nn_ + i + L_[0] * j, 1.0});
      sb.hess.push_back({0, 0, 0, 0});
      return sb;
    }
    const int off = (d_ - 1) * nn_;
    auto H = hermite(xi), H1 = hermite_d1(xi), H2 = hermite_d2(xi);
    // Hermite scale: slope dofs carry a factor h.
    auto scale = [&](int q) { return q == 1 || q == 3 ? h : 1.0; };
    if (d_ == 2) {
      for (int a = 0; a < 2; ++a)
        for (int p = 0; p < 2; ++p) {
          int q = 2 * a + p;
          int node = i + a;
          double s = scale(q);
          sb.w.push_back({off + node * 2 + p, s * H[q]});
          sb.hess.push_back({s * H2[q] / (h * h), 0, 0, 0});
        }
      return sb;
    }
    auto G = hermite(eta), G1 = hermite_d1(eta), G2 = hermite_d2(eta);
    for (int b = 0; b < 2; ++b)
      for (int a = 0; a < 2; ++a) {
        int node = (i + a) + N_[0] * (j + b);
        for (int py = 0; py < 2; ++py)
          for (int px = 0; px < 2; ++px) {
            int qx = 2 * a + px, qy = 2 * b + py;
            double s = scale(qx) * scale(qy);
            int dof = off + node * 4 + px + 2 * py;  // (w, wx, wy, wxy)
            double xx = H2[qx] * G[qy] / (h * h), yy = H[qx] * G2[qy] / (h * h), xy = H1[qx] * G1[qy] / (h * h);
            sb.w.push_back({dof, s * H[qx] * G[qy]});
            sb.hess.push_back({s * xx, s * xy, s * xy, s * yy});
          }
      }
    return sb;
  }

  // ---- surface stiffness (membrane A* or plate a*, b*, c*)

  void build_surface_matrix() {
    const int m = d_ - 1;
    const double area = std::pow(dom_.hx(), m);
    std::vector<Triplet> t;
    auto add_inplane = [&](const Tensor4& T, const SurfaceBasis& sb, double wt) {
      for (const auto& A : sb.nodes)
        for (const auto& B : sb.nodes)
          for (int k = 0; k < m; ++k)
            for (int l = 0; l < m; ++l) {
              double v = 0;
              for (int b = 0; b < m; ++b)
                for (int dd = 0; dd < m; ++dd) v += T(k, b, l, dd) * A.dN[b] * B.dN[dd];
              if (v != 0.0) t.emplace_back(k * nn_ + A.node, l * nn_ + B.node, wt * v);
            }
    };
    for (int j = 0; j < L_[1]; ++j)
      for (int i = 0; i < L_[0]; ++i)
        for (size_t q = 0; q < gp_.size(); ++q)
          for (size_t r = 0; r < (d_ == 3 ? gp_.size() : 1); ++r) {
            double wt = area * gw_[q] * (d_ == 3 ? gw_[r] : 1.0);
            auto sb = surface_basis(i, j, gp_[q], d_ == 3 ? gp_[r] : 0.5);
            if (opt_.gamma == 1) {
              add_inplane(ten_.A, sb, wt);
              continue;
            }
            add_inplane(ten_.a, sb, wt);
            auto Hm = [&](size_t e, int a, int b) { return sb.hess[e][a * 2 + b]; };
            for (size_t e1 = 0; e1 < sb.w.size(); ++e1) {
              for (size_t e2 = 0; e2 < sb.w.size(); ++e2) {
                double v = 0;
                for (int a = 0; a < m; ++a)
                  for (int b = 0; b < m; ++b)
                    for (int c = 0; c < m; ++c)
                      for (int dd = 0; dd < m; ++dd) v += ten_.c(a, b, c, dd) * Hm(e1, a, b) * Hm(e2, c, dd);
                if (v != 0.0) t.emplace_back(sb.w[e1].first, sb.w[e2].first, wt * v);
              }
              // Coupling b(Q, D(u)): bending pair first, stretching pair second.
              for (const auto& B : sb.nodes)
                for (int l = 0; l < m; ++l) {
                  double v = 0;
                  for (int a = 0; a < m; ++a)
                    for (int b = 0; b < m; ++b)
                      for (int dd = 0; dd < m; ++dd) v += ten_.b(a, b, l, dd) * Hm(e1, a, b) * B.dN[dd];
                  if (v == 0.0) continue;
                  t.emplace_back(sb.w[e1].first, l * nn_ + B.node, wt * v);
                  t.emplace_back(l * nn_ + B.node, sb.w[e1].first, wt * v);
                }
            }
          }
    E_.resize(nsurf_, nsurf_);
    E_.setFromTriplets(t.begin(), t.end());
    // Fixed surface dofs never move; drop their rows and columns.
    std::vector<Triplet> keep;
    for (int k = 0; k < E_.outerSize(); ++k)
      for (SpMat::InnerIterator it(E_, k); it; ++it)
        if (!sfixed_[it.row()] && !sfixed_[it.col()]) keep.emplace_back(it.row(), it.col(), it.value());
    E_.setZero();
    E_.setFromTriplets(keep.begin(), keep.end());
  }

  // ---- interface functionals and form

  using Functional = std::vector<std::pair<int, double>>;

  // 3d functionals (Gamma rate, + trace, - trace) at a point of Sigma cell (i, j).
  std::vector<Functional> functionals(int i, int j, double xi, double eta) const {
    const int d = d_, z = d_ - 1;
    std::vector<Functional> F(3 * d);
    auto push = [](Functional& f, int idx, double a) {
      if (idx >= 0 && a != 0.0) f.emplace_back(idx, a);
    };
    const int c = i + L_[0] * j;
    int ci[2] = {i, j};
    double loc[2] = {xi, eta};
    for (int b = 0; b < 2; ++b) {
      Functional* T = &F[d * (1 + b)];
      for (int k = 0; k < d - 1; ++k) {
        int cm = d == 3 ? ci[1 - k] : 0;
        push(T[k], gv_[b][trace_dof(b, k, ci[k], cm)], 1 - loc[k]);
        push(T[k], gv_[b][trace_dof(b, k, ci[k] + 1, cm)], loc[k]);
      }
      push(T[z], gv_[b][wface(b, c)], 1.0);
    }
    if (opt_.freeze_surface) return F;
    auto sb = surface_basis(i, j, xi, eta);
    if (opt_.gamma == 1)
      for (int k = 0; k < d - 1; ++k)
        for (const auto& nb : sb.nodes) push(F[k], gs_[k * nn_ + nb.node], nb.N);
    for (auto [dof, val] : sb.w) push(F[z], gs_[dof], val);
    return F;
  }

  void build_interface() {
    const int d = d_;
    Mat C = interface_form_matrix(coeffs_);
    if (opt_.gamma == 3)  // only the vertical rate enters the fluid coupling
      for (int k = 0; k < d - 1; ++k) {
        C.row(k).setZero();
        C.col(k).setZero();
      }
    const double area = std::pow(dom_.hx(), d - 1);
    std::vector<Triplet> t;
    for (int j = 0; j < L_[1]; ++j)
      for (int i = 0; i < L_[0]; ++i)
        for (size_t q = 0; q < gp_.size(); ++q)
          for (size_t r = 0; r < (d == 3 ? gp_.size() : 1); ++r) {
            double wt = area * gw_[q] * (d == 3 ? gw_[r] : 1.0);
            auto F = functionals(i, j, gp_[q], d == 3 ? gp_[r] : 0.5);
            for (int a = 0; a < 3 * d; ++a)
              for (int b = 0; b < 3 * d; ++b) {
                double cab = C(a, b);
                if (cab == 0.0) continue;
                for (auto [ia, va] : F[a])
                  for (auto [ib, vb] : F[b]) t.emplace_back(ia, ib, wt * cab * va * vb);
              }
          }
    Cint_.resize(nglob_, nglob_);
    Cint_.setFromTriplets(t.begin(), t.end());
  }

  // ---- monolithic matrix

  void factorize() {
    std::vector<Triplet> t;
    for (int b = 0; b < 2; ++b) {
      SpMat K = bulk_[b]->stiffness();
      const Vec& m = bulk_[b]->mass();
      for (int k = 0; k < K.outerSize(); ++k)
        for (SpMat::InnerIterator it(K, k); it; ++it) {
          int r = gv_[b][it.row()], c = gv_[b][it.col()];
          if (r >= 0 && c >= 0) t.emplace_back(r, c, it.value());
        }
      for (int i = 0; i < m.size(); ++i)
        if (gv_[b][i] >= 0 && m[i] != 0.0) t.emplace_back(gv_[b][i], gv_[b][i], m[i] / opt_.dt);
    }
    if (!opt_.freeze_surface)
      for (int k = 0; k < E_.outerSize(); ++k)
        for (SpMat::InnerIterator it(E_, k); it; ++it) {
          int r = gs_[it.row()], c = gs_[it.col()];
          if (r >= 0 && c >= 0) t.emplace_back(r, c, opt_.dt * it.value());
        }
    for (int k = 0; k < Cint_.outerSize(); ++k)
      for (SpMat::InnerIterator it(Cint_, k); it; ++it) t.emplace_back(it.row(), it.col(), it.value());
    sys_.A.resize(nglob_, nglob_);
    sys_.A.setFromTriplets(t.begin(), t.end());

    std::vector<Triplet> tb;
    int off = 0;
    for (int b = 0; b < 2; ++b) {
      SpMat Dv = bulk_[b]->divergence();
      double vol = bulk_[b]->grid().cell_volume();
      for (int k = 0; k < Dv.outerSize(); ++k)
        for (SpMat::InnerIterator it(Dv, k); it; ++it) {
          int c = gv_[b][it.col()];
          if (c >= 0) tb.emplace_back(off + it.row(), c, -vol * it.value());
        }
      off += bulk_[b]->grid().num_cells();
    }
    sys_.B.resize(npres_, nglob_);
    sys_.B.setFromTriplets(tb.begin(), tb.end());
    sys_.pressure_kernel = false;
    fact_.compute(sys_);
  }

  std::pair<Vec, Vec> solve(const Vec& f, const Vec& g) const {
    auto [u, p] = fact_.solve(f, g);
    double fn = std::max(f.norm(), g.norm());
    for (int it = 0; it < 2 && fn > 0; ++it) {
      Vec r1 = f - sys_.A * u - sys_.B.transpose() * p, r2 = g - sys_.B * u;
      if (std::max(r1.norm(), r2.norm()) <= 1e-14 * fn) break;
      auto [du, dp] = fact_.solve(r1, r2);
      u += du;
      p += dp;
    }
    if (fn > 0) {
      double res = std::max((f - sys_.A * u - sys_.B.transpose() * p).norm(), (g - sys_.B * u).norm()) / fn;
      if (!(res <= 1e-8)) throw NoConvergence(1, res);
    }
    return {u, p};
  }

  // ---- tangential laws and the membrane balance

  void tangential_residuals(const MacroState& s, const Vec& X, const Vec Sv[2], InterfaceResiduals& R) const {
    const int d = d_, z = d - 1;
    // Edge sample (k, z) on Sigma for every trace: map (b, k, fk, cm) -> sample index.
    std::map<std::array<int, 4>, int> edge;
    for (int b = 0; b < 2; ++b) {
      const auto& smp = bulk_[b]->grid().samples();
      int fz = b == 0 ? 0 : nz_;
      for (int q = 0; q < static_cast<int>(smp.size()); ++q)
        if (smp[q].l == z && smp[q].k < z && smp[q].pos[1] == fz)
          edge[{b, smp[q].k, smp[q].pos[0], d == 3 ? smp[q].pos[2] : 0}] = q;
    }
    auto sigma_k3 = [&](int b, int k, int fk, int cm) { return Sv[b][edge.at({b, k, fk, cm})]; };

    // Pointwise tangential law at interior traces.
    for (int b = 0; b < 2; ++b)
      for (int k = 0; k < d - 1; ++k)
        for (int cm = 0; cm < (d == 3 ? L_[1 - k] : 1); ++cm)
          for (int fk = 1; fk < L_[k]; ++fk) {
            Vec pred = Vec::Zero(d);
            for (int side = 0; side < 2; ++side) {  // average of the two cells sharing the face
              int ci[2];
              ci[k] = fk - 1 + side;
              if (d == 3) ci[1 - k] = cm;
              else ci[1] = 0;
              double loc[2] = {0.5, 0.5};
              loc[k] = side == 0 ? 1.0 : 0.0;
              auto F = functionals(ci[0], d == 3 ? ci[1] : 0, loc[0], loc[1]);
              Vec g(d), xs[2] = {Vec(d), Vec(d)};
              for (int a = 0; a < 3 * d; ++a) {
                double v = 0;
                for (auto [idx, c] : F[a]) v += c * X[idx];
                if (a < d) g[a] = v;
                else xs[(a - d) / d][(a - d) % d] = v;
              }
              Vec tr = coeffs_.L[b] * g + coeffs_.B[0][b] * xs[0] + coeffs_.B[1][b] * xs[1];
              pred += 0.5 * tr;
            }
            double expect = b == 0 ? pred[k] : -pred[k];
            double obs = sigma_k3(b, k, fk, cm);
            R.tangential = std::max(R.tangential, std::abs(obs - expect));
            R.tangential_scale = std::max({R.tangential_scale, std::abs(obs), std::abs(expect)});
          }

    if (opt_.gamma != 1) return;
    // Weak membrane force against the tangential stress jump.
    Vec Eu = E_ * s.u;
    Vec J = Vec::Zero(nsurf_);
    const double area = std::pow(dom_.hx(), d - 1);
    for (int j = 0; j < L_[1]; ++j)
      for (int i = 0; i < L_[0]; ++i)
        for (size_t q = 0; q < gp_.size(); ++q)
          for (size_t r = 0; r < (d == 3 ? gp_.size() : 1); ++r) {
            double wt = area * gw_[q] * (d == 3 ? gw_[r] : 1.0);
            double loc[2] = {gp_[q], d == 3 ? gp_[r] : 0.5};
            int ci[2] = {i, j};
            auto sb = surface_basis(i, j, loc[0], loc[1]);
            for (int k = 0; k < d - 1; ++k) {
              int cm = d == 3 ? ci[1 - k] : 0;
              double jump = 0;
              for (int b = 0; b < 2; ++b) {
                double v = (1 - loc[k]) * sigma_k3(b, k, ci[k], cm) + loc[k] * sigma_k3(b, k, ci[k] + 1, cm);
                jump += b == 0 ? v : -v;
              }
              for (const auto& nb : sb.nodes) J[k * nn_ + nb.node] += wt * nb.N * jump;
            }
          }
    for (int k = 0; k < d - 1; ++k)
      for (int node = 0; node < nn_; ++node) {
        int idx = k * nn_ + node;
        if (sfixed_[idx]) continue;
        R.membrane = std::max(R.membrane, std::abs(Eu[idx] - J[idx]));
        R.membrane_scale = std::max({R.membrane_scale, std::abs(Eu[idx]), std::abs(J[idx])});
      }
  }

  MacroDomain dom_;
  FluidInterfaceCoefficients coeffs_;
  SurfaceTensors ten_;
  MacroOptions opt_;
  int d_ = 2;
  std::array<int, 2> L_{1, 1}, N_{2, 1};
  int nn_ = 0, nz_ = 0;
  std::shared_ptr<BulkBox> bulk_[2];
  std::vector<int> gv_[2], shared_[2];
  std::vector<int> gs_;
  std::vector<uint8_t> sfixed_;
  int nglob_ = 0, nsurf_ = 0, npres_ = 0;
  std::vector<double> gp_, gw_;
  SpMat E_, Cint_;
  SaddleSystem sys_;
  SaddleFactorization fact_;
};

// ------------------------------------------------------------------ transient

struct StepDiagnostics {
  int step = 0;
  double t = 0;
  double energy = 0, kinetic = 0, elastic = 0;
  SigmaFlux flux;
  double max_divergence = 0;
  InterfaceResiduals residuals;
  double max_deflection = 0, max_inplane = 0;
};

inline StepDiagnostics diagnose(const MacroSystem& M, const MacroState& s) {
  StepDiagnostics d;
  d.step = s.step;
  d.t = s.t;
  d.kinetic = M.kinetic_energy(s);
  d.elastic = M.elastic_energy(s);
  d.energy = d.kinetic + d.elastic;
  d.flux = M.flux(s);
  d.max_divergence = M.max_divergence(s);
  d.residuals = M.interface_residuals(s);
  for (const auto& p : M.sigma_profile(s)) {
    d.max_deflection = std::max(d.max_deflection, std::abs(p.u3));
    d.max_inplane = std::max(d.max_inplane, p.uh);
  }
  return d;
}

struct Trajectory {
  std::vector<StepDiagnostics> rows;
  MacroState final_state;
};

// Runs round(T / dt) steps from `initial` (zero state when null). The callback
// sees every post-step state. BlowUp: non-finite energy, or growth beyond 1e6
// times the initial energy when the forcing is zero.
inline Trajectory solve_transient(const MacroSystem& M, const Forcing& f, double T, const MacroState* initial = nullptr,
                                  const std::function<void(const MacroState&)>& on_step = {}) {
  if (!(T >= 0)) throw ConfigError("final time must be non-negative");
  int steps = static_cast<int>(std::lround(T / M.dt()));
  Trajectory tr;
  MacroState s = initial ? *initial : M.zero_state();
  tr.rows.push_back(diagnose(M, s));
  const double e0 = tr.rows.front().energy;
  const bool unforced = f.is_zero();
  for (int n = 0; n < steps; ++n) {
    s = M.step(s, f);
    auto dg = diagnose(M, s);
    if (!std::isfinite(dg.energy)) throw BlowUp(s.step, "energy is not finite at step " + std::to_string(s.step));
    if (unforced && e0 > 0 && dg.energy > 1e6 * e0)
      throw BlowUp(s.step, "energy grew beyond 1e6 times its initial value at step " + std::to_string(s.step));
    tr.rows.push_back(dg);
    if (on_step) on_step(s);
  }
  tr.final_state = s;
  return tr;
}

inline void write_trajectory_csv(std::ostream& os, const Trajectory& tr) {
  os << "step,t,energy,kinetic,elastic,flux_sigma,flux_leaving_plus,flux_entering_minus,max_div,"
        "continuity,f1,vertical,normal_jump,tangential,membrane,max_deflection,max_inplane\n";
  os.precision(12);
  for (const auto& r : tr.rows) {
    const auto& R = r.residuals;
    os << r.step << ',' << r.t << ',' << r.energy << ',' << r.kinetic << ',' << r.elastic << ',' << r.flux.sigma << ','
       << r.flux.leaving_plus << ',' << r.flux.entering_minus << ',' << r.max_divergence << ',' << R.continuity << ','
       << R.f1 << ',' << R.vertical << ',' << R.normal_jump << ',' << R.tangential << ',' << R.membrane << ','
       << r.max_deflection << ',' << r.max_inplane << '\n';
  }
}

}  // namespace memhom
