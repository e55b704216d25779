#pragma once
/**
 * @file cell_stokes.hpp
 * @brief Stokes cell problems on Z_f and the fluid interface coefficients.
 *
 * Velocity dofs are classified as free (between two fluid voxels), Gamma (next
 * to a solid voxel), S+ or S- (top/bottom walls). Prescribed dofs carry the
 * Dirichlet data of the problem; one factorization serves every problem.
 */

#include <array>
#include <memory>
#include <string>
#include <vector>

#include "memhom/grid.hpp"
#include "memhom/linsolve.hpp"
#include "memhom/parallel.hpp"

namespace memhom {

enum class DofClass : uint8_t { Free, Gamma, SPlus, SMinus };
enum class Side { Plus = 0, Minus = 1 };

class StokesCellProblem {
 public:
  explicit StokesCellProblem(std::shared_ptr<const CellGeometry> g, CellSolveOptions opt = {})
      : geom_(std::move(g)), grid_(StaggeredGrid::for_cell(*geom_)), opt_(opt) {
    const CellGeometry& G = *geom_;
    int d = G.dim();
    int nv = grid_.num_vel();
    cls_.assign(nv, DofClass::Free);
    int top = grid_.n()[d - 1];
    for (int dof = 0; dof < nv; ++dof) {
      auto [k, s] = grid_.vel_slot(dof);
      Idx3 a{0, 0, 0}, b{0, 0, 0};
      if (k < d - 1) {
        int sv = s[d - 1];
        if (sv == 0) { cls_[dof] = DofClass::SMinus; continue; }
        if (sv == top + 1) { cls_[dof] = DofClass::SPlus; continue; }
        for (int m = 0; m < d; ++m) a[m] = b[m] = (m == d - 1) ? sv - 1 : s[m];
        auto fc = grid_.face_cells(k, s[k]);
        a[k] = fc[0];
        b[k] = fc[1];
      } else {
        int f = s[d - 1];
        if (f == 0) { cls_[dof] = DofClass::SMinus; continue; }
        if (f == top) { cls_[dof] = DofClass::SPlus; continue; }
        for (int m = 0; m < d - 1; ++m) a[m] = b[m] = s[m];
        a[d - 1] = f - 1;
        b[d - 1] = f;
      }
      if (G.solid(a) || G.solid(b)) cls_[dof] = DofClass::Gamma;
    }
    free_.assign(nv, -1);
    nfree_ = 0;
    for (int i = 0; i < nv; ++i)
      if (cls_[i] == DofClass::Free) free_[i] = nfree_++;
    fluid_.assign(G.num_voxels(), -1);
    nfluid_ = 0;
    for (int v = 0; v < G.num_voxels(); ++v)
      if (!G.solid(v)) fluid_[v] = nfluid_++;

    S_ = grid_.strain_operator();
    w_ = grid_.sample_weights(region_mask(G, Region::Fluid));
    A_ = SpMat(S_.transpose() * w_.asDiagonal() * S_);
    SpMat Div = grid_.divergence_operator();
    std::vector<Triplet> tp, tq;
    for (int i = 0; i < nv; ++i)
      if (free_[i] >= 0) tp.emplace_back(i, free_[i], 1.0);
    for (int v = 0; v < G.num_voxels(); ++v)
      if (fluid_[v] >= 0) tq.emplace_back(fluid_[v], v, 1.0);
    P_.resize(nv, nfree_);
    P_.setFromTriplets(tp.begin(), tp.end());
    Q_.resize(nfluid_, G.num_voxels());
    Q_.setFromTriplets(tq.begin(), tq.end());
    BD_ = SpMat(Q_ * Div) * grid_.cell_volume();  // vol * div on fluid cells

    sys_.A = P_.transpose() * A_ * P_;
    sys_.B = -(BD_ * P_);
    sys_.pressure_kernel = true;
    sys_.pressure_weights = Vec::Ones(nfluid_);
    if (opt_.method == SaddleMethod::Auto)
      opt_.method = (nfree_ + nfluid_ <= 200000) ? SaddleMethod::Direct : SaddleMethod::Iterative;
    if (opt_.method == SaddleMethod::Direct) fac_.compute(sys_);
  }

  const CellGeometry& geometry() const { return *geom_; }
  std::shared_ptr<const CellGeometry> geometry_ptr() const { return geom_; }
  const StaggeredGrid& grid() const { return grid_; }
  const std::vector<DofClass>& classes() const { return cls_; }
  const SpMat& strain() const { return S_; }
  const Vec& weights() const { return w_; }
  int num_free() const { return nfree_; }
  int num_fluid_cells() const { return nfluid_; }

  // Dirichlet data: value 1 on component `comp` for dofs of the given classes.
  Vec data(int comp, std::initializer_list<DofClass> on) const {
    Vec g = Vec::Zero(grid_.num_vel());
    for (int dof = 0; dof < grid_.num_vel(); ++dof) {
      if (grid_.vel_slot(dof).first != comp) continue;
      for (DofClass c : on)
        if (cls_[dof] == c) g[dof] = 1.0;
    }
    return g;
  }

  // Net discrete flux of prescribed data out of the fluid region.
  double data_flux(const Vec& g) const { return (BD_ * g).sum(); }

  struct Solution {
    CellField q, pi;
    SolveStats stats;
  };

  Solution solve(const Vec& g) const {
    // Local right-hand sides keep concurrent solves on one factorization safe.
    Vec f = -(P_.transpose() * (A_ * g));
    Vec gc = BD_ * g;
    auto residuals = [&](const Vec& u, const Vec& p) {
      Vec r1 = sys_.A * u + sys_.B.transpose() * p - f;
      Vec r2 = sys_.B * u - gc;
      double scale = std::max(f.norm(), gc.norm());
      if (scale == 0) scale = 1.0;
      return std::make_pair(r1.norm() / scale, r2.norm() / scale);
    };
    Vec u, p;
    SolveStats st;
    if (opt_.method == SaddleMethod::Direct) {
      std::tie(u, p) = fac_.solve(f, gc);
      // Iterative refinement on the unbordered system.
      for (int it = 0; it < 3; ++it) {
        auto [r1, r2] = residuals(u, p);
        if (std::max(r1, r2) <= 0.01 * opt_.tol) break;
        Vec rf = f - sys_.A * u - sys_.B.transpose() * p;
        Vec rg = gc - sys_.B * u;
        auto [du, dp] = fac_.solve(rf, rg);
        u += du;
        p += dp;
        fac_.gauge(p);
      }
      st.method = "sparse-lu";
      st.iterations = 1;
    } else {
      SaddleSystem local = sys_;
      local.f = f;
      local.g = gc;
      auto r = solve_saddle(local, opt_.tol, opt_.max_iter, SaddleMethod::Iterative);
      u = r.u;
      p = r.p;
      st = r.stats;
    }
    std::tie(st.residual, st.continuity_residual) = residuals(u, p);
    if (std::max(st.residual, st.continuity_residual) > opt_.tol)
      throw NoConvergence(st.iterations, std::max(st.residual, st.continuity_residual));
    Solution s;
    s.q = make_field(FieldKind::Velocity, geom_);
    s.q.values = g + P_ * u;
    s.pi = make_field(FieldKind::Pressure, geom_);
    s.pi.values = Q_.transpose() * p;
    s.stats = st;
    return s;
  }

 private:
  std::shared_ptr<const CellGeometry> geom_;
  StaggeredGrid grid_;
  CellSolveOptions opt_;
  std::vector<DofClass> cls_;
  std::vector<int> free_, fluid_;
  int nfree_ = 0, nfluid_ = 0;
  SpMat S_, A_, P_, Q_, BD_;
  Vec w_;
  SaddleSystem sys_;
  SaddleFactorization fac_;
};

struct StokesCellSolutionSet {
  std::shared_ptr<const CellGeometry> geom;
  std::vector<CellField> qG, piG;          // i = 0..d-1
  std::vector<CellField> qP, piP, qM, piM; // i = 0..d-2
  CellField q3, pi3;
  SolveStats stats;                        // worst residuals over all problems

  int dim() const { return geom ? geom->dim() : 0; }

  bool complete() const {
    if (!geom) return false;
    size_t d = static_cast<size_t>(dim());
    auto ok = [&](const std::vector<CellField>& v, size_t n) {
      if (v.size() != n) return false;
      for (auto& f : v)
        if (f.values.size() == 0) return false;
      return true;
    };
    return ok(qG, d) && ok(piG, d) && ok(qP, d - 1) && ok(qM, d - 1) && ok(piP, d - 1) &&
           ok(piM, d - 1) && q3.values.size() > 0 && pi3.values.size() > 0;
  }

  // q_i^side with the vertical convention q_d^+- = q3 / 2.
  CellField q_side(Side s, int i) const {
    if (i == dim() - 1) {
      CellField f = q3;
      f.values *= 0.5;
      return f;
    }
    return s == Side::Plus ? qP[i] : qM[i];
  }
  CellField pi_side(Side s, int i) const {
    if (i == dim() - 1) {
      CellField f = pi3;
      f.values *= 0.5;
      return f;
    }
    return s == Side::Plus ? piP[i] : piM[i];
  }
};

inline void merge_stats(SolveStats& acc, const SolveStats& s) {
  acc.method = s.method;
  acc.iterations = std::max(acc.iterations, s.iterations);
  acc.residual = std::max(acc.residual, s.residual);
  acc.continuity_residual = std::max(acc.continuity_residual, s.continuity_residual);
}

inline std::pair<CellField, CellField> solve_cell_gamma(const StokesCellProblem& P, int i) {
  if (i < 0 || i >= P.geometry().dim()) throw ShapeError("direction index out of range");
  auto s = P.solve(P.data(i, {DofClass::Gamma}));
  return {s.q, s.pi};
}

inline std::pair<CellField, CellField> solve_cell_pm(const StokesCellProblem& P, int i, Side side) {
  if (i < 0 || i >= P.geometry().dim() - 1) throw ShapeError("tangential index out of range");
  auto s = P.solve(P.data(i, {side == Side::Plus ? DofClass::SPlus : DofClass::SMinus}));
  return {s.q, s.pi};
}

inline std::pair<CellField, CellField> solve_cell_q3(const StokesCellProblem& P) {
  int d = P.geometry().dim();
  auto s = P.solve(P.data(d - 1, {DofClass::SPlus, DofClass::SMinus}));
  return {s.q, s.pi};
}

inline StokesCellSolutionSet solve_stokes_cells(std::shared_ptr<const CellGeometry> g, CellSolveOptions opt = {}) {
  StokesCellProblem P(g, opt);
  int d = g->dim();
  StokesCellSolutionSet set;
  set.geom = g;
  set.qG.resize(d);
  set.piG.resize(d);
  set.qP.resize(d - 1);
  set.piP.resize(d - 1);
  set.qM.resize(d - 1);
  set.piM.resize(d - 1);
  struct Job {
    Vec data;
    CellField* q;
    CellField* pi;
    SolveStats stats;
  };
  std::vector<Job> jobs;
  for (int i = 0; i < d; ++i) jobs.push_back({P.data(i, {DofClass::Gamma}), &set.qG[i], &set.piG[i], {}});
  for (int i = 0; i < d - 1; ++i) {
    jobs.push_back({P.data(i, {DofClass::SPlus}), &set.qP[i], &set.piP[i], {}});
    jobs.push_back({P.data(i, {DofClass::SMinus}), &set.qM[i], &set.piM[i], {}});
  }
  jobs.push_back({P.data(d - 1, {DofClass::SPlus, DofClass::SMinus}), &set.q3, &set.pi3, {}});
  parallel_for(static_cast<int>(jobs.size()), [&](int j) {
    auto s = P.solve(jobs[j].data);
    *jobs[j].q = std::move(s.q);
    *jobs[j].pi = std::move(s.pi);
    jobs[j].stats = s.stats;
  });
  for (auto& j : jobs) merge_stats(set.stats, j.stats);
  return set;
}

// Max over dofs and directions of |q_i^G + q_i^+ + q_i^- - e_i|.
inline double completeness_residual(const StokesCellSolutionSet& s) {
  int d = s.dim();
  auto grid = StaggeredGrid::for_cell(*s.geom);
  double worst = 0;
  for (int i = 0; i < d; ++i) {
    Vec sum = s.qG[i].values + s.q_side(Side::Plus, i).values + s.q_side(Side::Minus, i).values;
    for (int dof = 0; dof < grid.num_vel(); ++dof) {
      double e = grid.vel_slot(dof).first == i ? 1.0 : 0.0;
      worst = std::max(worst, std::abs(sum[dof] - e));
    }
  }
  return worst;
}

// ---------------------------------------------------------------- coefficients

struct FluidInterfaceCoefficients {
  int dim = 0;
  Mat B[2][2];   // B[a][b](j,i) = int D(q_i^a):D(q_j^b), a,b in {+,-}
  Mat L[2];      // L[a](j,i) = int D(q_i^G):D(q_j^a)
  Mat K[2], M[2];
  Mat LG;        // LG(i,j) = int D(q_i^G):D(q_j^G)
  std::string geometry_hash;
  int resolution = 0;
  SolveStats stats;
};

inline Mat K_from_B(const Mat& Baa) {
  int d = static_cast<int>(Baa.rows());
  Mat K = Baa;
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j)
      if (i == d - 1 || j == d - 1) K(i, j) = 2.0 * Baa(i, j);
  return K;
}

inline Mat M_from_B(const Mat& Bab) {
  int d = static_cast<int>(Bab.rows());
  Mat M = Bab;
  for (int i = 0; i < d; ++i) {
    M(i, d - 1) = 0.0;
    M(d - 1, i) = 0.0;
  }
  return M;
}

// Fill K and M from B (shared by assembly and the brute-force oracle).
inline void derive_K_M(FluidInterfaceCoefficients& c) {
  for (int a = 0; a < 2; ++a) {
    c.K[a] = K_from_B(c.B[a][a]);
    c.M[a] = M_from_B(c.B[a][1 - a]);
  }
}

inline FluidInterfaceCoefficients assemble_fluid_coefficients(const StokesCellSolutionSet& s) {
  if (!s.complete()) throw IncompleteSet("Stokes cell solution set is incomplete");
  int d = s.dim();
  auto grid = StaggeredGrid::for_cell(*s.geom);
  SpMat S = grid.strain_operator();
  Vec w = grid.sample_weights(region_mask(*s.geom, Region::Fluid));
  std::vector<Vec> EG(d), E[2];
  for (int i = 0; i < d; ++i) EG[i] = S * s.qG[i].values;
  for (int a = 0; a < 2; ++a) {
    E[a].resize(d);
    for (int i = 0; i < d; ++i) E[a][i] = S * s.q_side(static_cast<Side>(a), i).values;
  }
  auto ip = [&](const Vec& x, const Vec& y) { return (w.array() * x.array() * y.array()).sum(); };
  FluidInterfaceCoefficients c;
  c.dim = d;
  c.LG = Mat(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) c.LG(i, j) = ip(EG[i], EG[j]);
  for (int a = 0; a < 2; ++a) {
    c.L[a] = Mat(d, d);
    for (int j = 0; j < d; ++j)
      for (int i = 0; i < d; ++i) c.L[a](j, i) = ip(EG[i], E[a][j]);
    for (int b = 0; b < 2; ++b) {
      c.B[a][b] = Mat(d, d);
      for (int j = 0; j < d; ++j)
        for (int i = 0; i < d; ++i) c.B[a][b](j, i) = ip(E[a][i], E[b][j]);
    }
  }
  derive_K_M(c);
  c.geometry_hash = s.geom->hash();
  c.resolution = s.geom->resolution();
  c.stats = s.stats;
  return c;
}

// ---------------------------------------------------------------- reconstruction

inline CellField reconstruct_membrane_velocity(const StokesCellSolutionSet& s, const Vec& dtu, const Vec& vplus,
                                               const Vec& vminus) {
  int d = s.dim();
  if (dtu.size() != d || vplus.size() != d || vminus.size() != d)
    throw ShapeError("reconstruction inputs must have dim components");
  if (!s.complete()) throw IncompleteSet("Stokes cell solution set is incomplete");
  CellField v = make_field(FieldKind::Velocity, s.geom);
  for (int i = 0; i < d; ++i) {
    v.values += dtu[i] * s.qG[i].values;
    v.values += vplus[i] * s.q_side(Side::Plus, i).values;
    v.values += vminus[i] * s.q_side(Side::Minus, i).values;
  }
  return v;
}

inline CellField reconstruct_membrane_pressure(const StokesCellSolutionSet& s, const Vec& dtu, const Vec& vplus,
                                               const Vec& vminus) {
  int d = s.dim();
  if (dtu.size() != d || vplus.size() != d || vminus.size() != d)
    throw ShapeError("reconstruction inputs must have dim components");
  if (!s.complete()) throw IncompleteSet("Stokes cell solution set is incomplete");
  CellField p = make_field(FieldKind::Pressure, s.geom);
  for (int i = 0; i < d; ++i) {
    p.values += dtu[i] * s.piG[i].values;
    p.values += vplus[i] * s.pi_side(Side::Plus, i).values;
    p.values += vminus[i] * s.pi_side(Side::Minus, i).values;
  }
  return p;
}

}  // namespace memhom
