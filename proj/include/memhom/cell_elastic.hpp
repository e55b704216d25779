#pragma once
/**
 * @file cell_elastic.hpp
 * @brief Elasticity cell problems on Z_s (Q1 vertex elements) and the effective
 * membrane tensor A* and plate tensors a*, b*, c*.
 *
 * Unknowns live on vertices touching a solid voxel. The rigid kernel consists of
 * translations plus those rotations that stay single-valued under the lateral
 * identification. It is removed by pinning a few dofs, and the result is then
 * projected onto the mean-zero gauge over Z_s.
 */

#include <Eigen/QR>
#include <Eigen/SparseCholesky>
#include <fstream>
#include <map>
#include <queue>

#include "memhom/grid.hpp"
#include "memhom/linsolve.hpp"
#include "memhom/parallel.hpp"
#include "memhom/tensor.hpp"

namespace memhom {

// Micro elasticity tensor, uniform or one tensor per voxel.
class MicroElasticTensor {
 public:
  MicroElasticTensor() = default;
  explicit MicroElasticTensor(Tensor4 uniform) { table_.push_back(std::move(uniform)); }
  MicroElasticTensor(std::vector<Tensor4> per_voxel, bool) : table_(std::move(per_voxel)), per_voxel_(true) {}

  static MicroElasticTensor isotropic(int d, double lambda, double mu) {
    return MicroElasticTensor(isotropic_tensor(d, lambda, mu));
  }
  static MicroElasticTensor from_voigt(int d, const Mat& C) { return MicroElasticTensor(tensor_from_voigt(d, C)); }

  int dim() const { return table_.empty() ? 0 : table_[0].dim; }
  bool per_voxel() const { return per_voxel_; }
  const Tensor4& at(int voxel) const { return per_voxel_ ? table_[voxel] : table_[0]; }
  const std::vector<Tensor4>& table() const { return table_; }

  // Throws ConfigError on a symmetry or coercivity violation; returns c0.
  double validate() const {
    if (table_.empty()) throw ConfigError("elastic tensor is empty");
    double c0 = std::numeric_limits<double>::infinity();
    for (const auto& A : table_) {
      double s = A.max_abs();
      if (symmetry_defect(A) > 1e-12 * std::max(s, 1.0))
        throw ConfigError("elastic tensor violates minor/major symmetry");
      c0 = std::min(c0, coercivity_constant(A));
    }
    if (!(c0 > 0)) throw ConfigError("elastic tensor is not coercive (c0 = " + std::to_string(c0) + ")");
    return c0;
  }

  void check_geometry(const CellGeometry& g) const {
    if (dim() != g.dim()) throw DimensionMismatch("elastic tensor dimension differs from the cell");
    if (per_voxel_ && static_cast<int>(table_.size()) != g.num_voxels())
      throw ShapeError("per-voxel elastic table size differs from the voxel count");
  }

 private:
  std::vector<Tensor4> table_;
  bool per_voxel_ = false;
};

// Per-voxel binary table: int32 dim, int32 nvox, then nvox blocks of the upper
// triangle of the Voigt matrix (row-major, float64).
inline MicroElasticTensor read_elastic_table(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open elastic table " + path);
  int32_t hdr[2];
  if (!in.read(reinterpret_cast<char*>(hdr), sizeof hdr)) throw FormatError("elastic table header truncated");
  int d = hdr[0], n = hdr[1];
  if ((d != 2 && d != 3) || n <= 0) throw FormatError("elastic table header invalid");
  int nv = d == 2 ? 3 : 6;
  std::vector<Tensor4> t;
  t.reserve(n);
  for (int v = 0; v < n; ++v) {
    Mat C(nv, nv);
    for (int a = 0; a < nv; ++a)
      for (int b = a; b < nv; ++b) {
        double x;
        if (!in.read(reinterpret_cast<char*>(&x), sizeof x)) throw FormatError("elastic table truncated");
        C(a, b) = C(b, a) = x;
      }
    t.push_back(tensor_from_voigt(d, C));
  }
  return MicroElasticTensor(std::move(t), true);
}

inline void write_elastic_table(const std::string& path, const std::vector<Mat>& voigt) {
  std::ofstream out(path, std::ios::binary);
  if (!out || voigt.empty()) throw Error("cannot write elastic table " + path);
  int32_t hdr[2] = {voigt[0].rows() == 3 ? 2 : 3, static_cast<int32_t>(voigt.size())};
  out.write(reinterpret_cast<const char*>(hdr), sizeof hdr);
  for (const Mat& C : voigt)
    for (int a = 0; a < C.rows(); ++a)
      for (int b = a; b < C.cols(); ++b) {
        double x = C(a, b);
        out.write(reinterpret_cast<const char*>(&x), sizeof x);
      }
}

// ---------------------------------------------------------------- problem

enum class Prestrain { Constant, Bending };  // M_ij or -y3 M_ij

class ElasticCellProblem {
 public:
  ElasticCellProblem(std::shared_ptr<const CellGeometry> g, MicroElasticTensor A, CellSolveOptions tol = {})
      : geom_(std::move(g)), A_(std::move(A)), vg_(*geom_), el_(geom_->dim(), geom_->h()), opt_(tol) {
    const CellGeometry& G = *geom_;
    A_.check_geometry(G);
    A_.validate();
    int d = G.dim();
    int nv = vg_.num_vertices();
    act_.assign(nv, -1);
    nact_ = 0;
    for (int v = 0; v < G.num_voxels(); ++v) {
      if (!G.solid(v)) continue;
      Idx3 c = G.coords(v);
      for (int a = 0; a < el_.nloc; ++a) {
        int w = vg_.voxel_vertex(c, a);
        if (act_[w] < 0) act_[w] = nact_++;
      }
    }
    ndof_ = d * nact_;
    assemble_stiffness();
    build_kernel();
    if (opt_.method == SaddleMethod::Auto)
      opt_.method = ndof_ <= 200000 ? SaddleMethod::Direct : SaddleMethod::Iterative;
    if (opt_.method == SaddleMethod::Direct) factorize();
  }

  const CellGeometry& geometry() const { return *geom_; }
  const MicroElasticTensor& tensor() const { return A_; }
  int num_dofs() const { return ndof_; }
  int num_rotations() const { return nrot_; }
  const std::vector<Vec>& kernel() const { return kernel_; }
  const SpMat& stiffness() const { return K_; }

  // Reduced (active) <-> full displacement field.
  Vec expand(const Vec& x) const {
    int d = geom_->dim(), nv = vg_.num_vertices();
    Vec u = Vec::Zero(d * nv);
    for (int v = 0; v < nv; ++v)
      if (act_[v] >= 0)
        for (int k = 0; k < d; ++k) u[k * nv + v] = x[k * nact_ + act_[v]];
    return u;
  }
  Vec compress(const Vec& u) const {
    int d = geom_->dim(), nv = vg_.num_vertices();
    Vec x(ndof_);
    for (int v = 0; v < nv; ++v)
      if (act_[v] >= 0)
        for (int k = 0; k < d; ++k) x[k * nact_ + act_[v]] = u[k * nv + v];
    return x;
  }

  // Prestrain at a Gauss point position.
  Mat prestrain(Prestrain kind, int i, int j, const std::array<double, 3>& y) const {
    int d = geom_->dim();
    Mat M = unit_sym(d, i, j);
    return kind == Prestrain::Constant ? M : Mat(-y[d - 1] * M);
  }

  // Load vector f = -int A P : D(phi) over Z_s.
  Vec load(Prestrain kind, int i, int j) const {
    const CellGeometry& G = *geom_;
    int d = G.dim();
    Vec f = Vec::Zero(ndof_);
    for (int v = 0; v < G.num_voxels(); ++v) {
      if (!G.solid(v)) continue;
      Idx3 c = G.coords(v);
      const Tensor4& A = A_.at(v);
      auto y0 = vg_.local_position(c, 0);
      for (int g = 0; g < el_.ngp; ++g) {
        std::array<double, 3> y = y0;
        for (int m = 0; m < d; ++m) y[m] += el_.gp[g][m] * G.h();
        Mat S = A.apply(prestrain(kind, i, j, y));
        for (int a = 0; a < el_.nloc; ++a) {
          int w = act_[vg_.voxel_vertex(c, a)];
          for (int k = 0; k < d; ++k) {
            double s = 0;
            for (int m = 0; m < d; ++m) s += S(k, m) * el_.grad[g][a][m];
            f[k * nact_ + w] -= el_.gw * s;
          }
        }
      }
    }
    return f;
  }

  struct Solution {
    CellField u;
    SolveStats stats;
  };

  Solution solve(const Vec& f) const {
    Vec x;
    SolveStats st;
    double fn = f.norm();
    if (fn == 0) {
      x = Vec::Zero(ndof_);
      st.method = "trivial";
    } else if (opt_.method == SaddleMethod::Direct) {
      Vec fr(nfree_);
      for (int i = 0; i < ndof_; ++i)
        if (free_[i] >= 0) fr[free_[i]] = f[i];
      Vec xr = ldlt_.solve(fr);
      for (int it = 0; it < 3; ++it) {
        Vec r = fr - Kr_ * xr;
        if (r.norm() <= 0.01 * opt_.tol * fn) break;
        xr += ldlt_.solve(r);
      }
      x = Vec::Zero(ndof_);
      for (int i = 0; i < ndof_; ++i)
        if (free_[i] >= 0) x[i] = xr[free_[i]];
      st.method = "sparse-cholesky";
      st.iterations = 1;
    } else {
      SparseSystem s{K_, f, kernel_, gauge_};
      auto r = solve_spd(s, opt_.tol, opt_.max_iter);
      x = r.x;
      st = r.stats;
    }
    project_gauge(x);
    st.residual = fn > 0 ? (K_ * x - f).norm() / fn : 0.0;
    if (st.residual > opt_.tol) throw NoConvergence(st.iterations, st.residual);
    Solution s;
    s.u = make_field(FieldKind::Displacement, geom_);
    s.u.values = expand(x);
    s.stats = st;
    return s;
  }

  // Remove the kernel component in the gauge inner product: C x = 0.
  void project_gauge(Vec& x) const {
    int nk = static_cast<int>(kernel_.size());
    if (nk == 0) return;
    Mat G(nk, nk);
    Vec r(nk);
    for (int a = 0; a < nk; ++a) {
      r[a] = kernel_[a].dot(gauge_.cwiseProduct(x));
      for (int b = 0; b < nk; ++b) G(a, b) = kernel_[a].dot(gauge_.cwiseProduct(kernel_[b]));
    }
    Vec c = G.ldlt().solve(r);
    for (int a = 0; a < nk; ++a) x -= c[a] * kernel_[a];
  }

  // Gauge moments int_{Z_s} chi . k_a of a full field.
  Vec gauge_moments(const CellField& u) const {
    Vec x = compress(u.values);
    Vec m(kernel_.size());
    for (size_t a = 0; a < kernel_.size(); ++a) m[a] = kernel_[a].dot(gauge_.cwiseProduct(x));
    return m;
  }

 private:
  void assemble_stiffness() {
    const CellGeometry& G = *geom_;
    int d = G.dim(), nl = el_.nloc;
    std::map<const Tensor4*, Mat> cache;
    std::vector<Triplet> t;
    for (int v = 0; v < G.num_voxels(); ++v) {
      if (!G.solid(v)) continue;
      const Tensor4& A = A_.at(v);
      auto it = cache.find(&A);
      if (it == cache.end()) it = cache.emplace(&A, element_matrix(A)).first;
      const Mat& Ke = it->second;
      Idx3 c = G.coords(v);
      std::vector<int> dof(d * nl);
      for (int k = 0; k < d; ++k)
        for (int a = 0; a < nl; ++a) dof[k * nl + a] = k * nact_ + act_[vg_.voxel_vertex(c, a)];
      for (int p = 0; p < d * nl; ++p)
        for (int q = 0; q < d * nl; ++q)
          if (Ke(p, q) != 0) t.emplace_back(dof[p], dof[q], Ke(p, q));
    }
    K_.resize(ndof_, ndof_);
    K_.setFromTriplets(t.begin(), t.end());
  }

  // Ke[(k,a),(l,b)] = sum_g w A_{kmln} dN_a/dy_m dN_b/dy_n.
  Mat element_matrix(const Tensor4& A) const {
    int d = geom_->dim(), nl = el_.nloc;
    Mat Ke = Mat::Zero(d * nl, d * nl);
    for (int g = 0; g < el_.ngp; ++g)
      for (int k = 0; k < d; ++k)
        for (int a = 0; a < nl; ++a)
          for (int l = 0; l < d; ++l)
            for (int b = 0; b < nl; ++b) {
              double s = 0;
              for (int m = 0; m < d; ++m)
                for (int n = 0; n < d; ++n) s += A(k, m, l, n) * el_.grad[g][a][m] * el_.grad[g][b][n];
              Ke(k * nl + a, l * nl + b) += el_.gw * s;
            }
    return Ke;
  }

  // Translations always; rotation (a,b) when neither axis is wrapped by the solid.
  void build_kernel() {
    const CellGeometry& G = *geom_;
    int d = G.dim(), N = G.resolution();
    // Unwrap the solid by a breadth-first search, recording period shifts.
    std::vector<Idx3> shift(G.num_voxels(), Idx3{0, 0, 0});
    std::vector<char> seen(G.num_voxels(), 0);
    std::array<bool, 3> wrapped{false, false, false};
    for (int s0 = 0; s0 < G.num_voxels(); ++s0) {
      if (!G.solid(s0) || seen[s0]) continue;
      std::queue<int> q;
      q.push(s0);
      seen[s0] = 1;
      while (!q.empty()) {
        int v = q.front();
        q.pop();
        Idx3 c = G.coords(v);
        for (int m = 0; m < d; ++m)
          for (int dir : {-1, 1}) {
            int w = G.neighbour(v, m, dir);
            if (w < 0 || !G.solid(w)) continue;
            Idx3 s = shift[v];
            if (m < d - 1) {
              if (dir == 1 && c[m] == N - 1) s[m] += 1;
              if (dir == -1 && c[m] == 0) s[m] -= 1;
            }
            if (!seen[w]) {
              seen[w] = 1;
              shift[w] = s;
              q.push(w);
            } else {
              for (int k = 0; k < d - 1; ++k)
                if (shift[w][k] != s[k]) wrapped[k] = true;
            }
          }
      }
    }
    // Unwrapped vertex coordinates; a conflict also counts as a wrap.
    int nv = vg_.num_vertices();
    std::vector<std::array<double, 3>> pos(nv);
    std::vector<char> set(nv, 0);
    for (int v = 0; v < G.num_voxels(); ++v) {
      if (!G.solid(v)) continue;
      Idx3 c = G.coords(v);
      for (int a = 0; a < el_.nloc; ++a) {
        int w = vg_.voxel_vertex(c, a);
        auto y = vg_.local_position(c, a);
        for (int m = 0; m < d - 1; ++m) y[m] += shift[v][m];
        if (!set[w]) {
          pos[w] = y;
          set[w] = 1;
        } else {
          for (int m = 0; m < d - 1; ++m)
            if (std::abs(pos[w][m] - y[m]) > 0.5 * G.h()) wrapped[m] = true;
        }
      }
    }
    Vec centre = Vec::Zero(3);
    for (int w = 0; w < nv; ++w)
      if (act_[w] >= 0)
        for (int m = 0; m < d; ++m) centre[m] += pos[w][m] / nact_;
    kernel_.clear();
    for (int k = 0; k < d; ++k) {
      Vec t = Vec::Zero(ndof_);
      t.segment(k * nact_, nact_).setOnes();
      kernel_.push_back(t);
    }
    nrot_ = 0;
    for (int a = 0; a < d; ++a)
      for (int b = a + 1; b < d; ++b) {
        if ((a < d - 1 && wrapped[a]) || (b < d - 1 && wrapped[b])) continue;
        Vec r = Vec::Zero(ndof_);
        for (int w = 0; w < nv; ++w) {
          if (act_[w] < 0) continue;
          r[a * nact_ + act_[w]] = pos[w][b] - centre[b];
          r[b * nact_ + act_[w]] = -(pos[w][a] - centre[a]);
        }
        kernel_.push_back(r);
        ++nrot_;
      }
    // Gauge weights: lumped Q1 mass over solid voxels (int_{Z_s} N_v).
    Vec mv = Vec::Zero(nact_);
    double share = std::pow(G.h(), d) / el_.nloc;
    for (int v = 0; v < G.num_voxels(); ++v) {
      if (!G.solid(v)) continue;
      Idx3 c = G.coords(v);
      for (int a = 0; a < el_.nloc; ++a) mv[act_[vg_.voxel_vertex(c, a)]] += share;
    }
    gauge_ = Vec(ndof_);
    for (int k = 0; k < d; ++k) gauge_.segment(k * nact_, nact_) = mv;
  }

  void factorize() {
    // Pin rows selected by column-pivoted QR of the kernel basis.
    int nk = static_cast<int>(kernel_.size());
    Mat R(ndof_, nk);
    for (int a = 0; a < nk; ++a) R.col(a) = kernel_[a];
    Eigen::ColPivHouseholderQR<Mat> qr(R.transpose());
    std::vector<char> pinned(ndof_, 0);
    for (int a = 0; a < nk; ++a) pinned[qr.colsPermutation().indices()[a]] = 1;
    free_.assign(ndof_, -1);
    nfree_ = 0;
    for (int i = 0; i < ndof_; ++i)
      if (!pinned[i]) free_[i] = nfree_++;
    std::vector<Triplet> t;
    for (int k = 0; k < K_.outerSize(); ++k)
      for (SpMat::InnerIterator it(K_, k); it; ++it)
        if (free_[it.row()] >= 0 && free_[it.col()] >= 0)
          t.emplace_back(free_[it.row()], free_[it.col()], it.value());
    Kr_.resize(nfree_, nfree_);
    Kr_.setFromTriplets(t.begin(), t.end());
    ldlt_.compute(Kr_);
    if (ldlt_.info() != Eigen::Success)
      throw SingularBlock("elastic stiffness is singular after removing the rigid kernel");
  }

  std::shared_ptr<const CellGeometry> geom_;
  MicroElasticTensor A_;
  VertexGrid vg_;
  Q1Element el_;
  CellSolveOptions opt_;
  std::vector<int> act_, free_;
  int nact_ = 0, ndof_ = 0, nfree_ = 0, nrot_ = 0;
  SpMat K_, Kr_;
  std::vector<Vec> kernel_;
  Vec gauge_;
  Eigen::SimplicialLDLT<SpMat> ldlt_;
};

// ---------------------------------------------------------------- solution set

struct ElasticCellSolutionSet {
  std::shared_ptr<const CellGeometry> geom;
  MicroElasticTensor tensor;
  std::vector<CellField> chi, chiB;  // index i*d+j, symmetric fill; empty values = not solved
  SolveStats stats;
  int num_rotations = 0;

  int dim() const { return geom ? geom->dim() : 0; }
  bool has_chi(int i, int j) const { return !chi.empty() && chi[i * dim() + j].values.size() > 0; }
  bool has_chiB(int i, int j) const { return !chiB.empty() && chiB[i * dim() + j].values.size() > 0; }
  const CellField& chi_of(int i, int j) const {
    if (!has_chi(i, j)) throw IncompleteSet("chi_" + std::to_string(i + 1) + std::to_string(j + 1) + " missing");
    return chi[i * dim() + j];
  }
  const CellField& chiB_of(int i, int j) const {
    if (!has_chiB(i, j)) throw IncompleteSet("chiB_" + std::to_string(i + 1) + std::to_string(j + 1) + " missing");
    return chiB[i * dim() + j];
  }
};

// Solves chi for every pair i <= j and, if bending, chiB for in-plane pairs.
inline ElasticCellSolutionSet solve_elastic_cells(std::shared_ptr<const CellGeometry> g, const MicroElasticTensor& A,
                                                  bool bending = true, CellSolveOptions opt = {}) {
  ElasticCellProblem P(g, A, opt);
  int d = g->dim();
  ElasticCellSolutionSet s;
  s.geom = g;
  s.tensor = A;
  s.num_rotations = P.num_rotations();
  s.chi.resize(d * d);
  s.chiB.resize(d * d);
  struct Job {
    Prestrain kind;
    int i, j;
    SolveStats stats;
  };
  std::vector<Job> jobs;
  for (int i = 0; i < d; ++i)
    for (int j = i; j < d; ++j) jobs.push_back({Prestrain::Constant, i, j, {}});
  if (bending)
    for (int i = 0; i < d - 1; ++i)
      for (int j = i; j < d - 1; ++j) jobs.push_back({Prestrain::Bending, i, j, {}});
  parallel_for(static_cast<int>(jobs.size()), [&](int n) {
    auto& jb = jobs[n];
    auto r = P.solve(P.load(jb.kind, jb.i, jb.j));
    auto& dst = jb.kind == Prestrain::Constant ? s.chi : s.chiB;
    dst[jb.i * d + jb.j] = r.u;
    dst[jb.j * d + jb.i] = r.u;
    jb.stats = r.stats;
  });
  for (auto& jb : jobs) {
    s.stats.method = jb.stats.method;
    s.stats.iterations = std::max(s.stats.iterations, jb.stats.iterations);
    s.stats.residual = std::max(s.stats.residual, jb.stats.residual);
  }
  return s;
}

// ---------------------------------------------------------------- tensors

struct ElasticEffectiveTensors {
  int dim = 0;
  Tensor4 Astar;         // stress-average form, all indices
  Tensor4 Astar_energy;  // energy form, all indices
  Tensor4 a, b, c;       // in-plane plate tensors (dim - 1)
  bool has_plate = false;
  double solid_volume = 0;
};

namespace detail {

// Visit every solid Gauss point: callback(voxel, y, weight, strain(field)).
template <class F>
void for_each_solid_gp(const CellGeometry& G, F&& fn) {
  VertexGrid vg(G);
  Q1Element el(G.dim(), G.h());
  for (int v = 0; v < G.num_voxels(); ++v) {
    if (!G.solid(v)) continue;
    Idx3 c = G.coords(v);
    auto y0 = vg.local_position(c, 0);
    for (int g = 0; g < el.ngp; ++g) {
      std::array<double, 3> y = y0;
      for (int m = 0; m < G.dim(); ++m) y[m] += el.gp[g][m] * G.h();
      fn(v, y, el.gw, [&](const Vec& u) { return q1_strain(vg, el, u, c, g); });
    }
  }
}

}  // namespace detail

inline ElasticEffectiveTensors assemble_Astar(const ElasticCellSolutionSet& s) {
  int d = s.dim();
  if (!s.geom) throw IncompleteSet("elastic solution set has no geometry");
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) s.chi_of(i, j);
  ElasticEffectiveTensors T;
  T.dim = d;
  T.Astar = Tensor4(d);
  T.Astar_energy = Tensor4(d);
  T.solid_volume = s.geom->count(Phase::Solid) * std::pow(s.geom->h(), d);
  detail::for_each_solid_gp(*s.geom, [&](int v, const std::array<double, 3>&, double w, auto strain) {
    const Tensor4& A = s.tensor.at(v);
    std::vector<Mat> E(d * d);
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j) E[i * d + j] = unit_sym(d, i, j) + strain(s.chi[i * d + j].values);
    for (int k = 0; k < d; ++k)
      for (int l = 0; l < d; ++l) {
        Mat S = A.apply(E[k * d + l]);
        for (int i = 0; i < d; ++i)
          for (int j = 0; j < d; ++j) {
            T.Astar(i, j, k, l) += w * S(i, j);
            T.Astar_energy(i, j, k, l) += w * (S.array() * E[i * d + j].array()).sum();
          }
      }
  });
  return T;
}

inline void assemble_plate_tensors(const ElasticCellSolutionSet& s, ElasticEffectiveTensors& T) {
  int d = s.dim(), m = d - 1;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j) {
      s.chi_of(i, j);
      s.chiB_of(i, j);
    }
  T.a = Tensor4(m);
  T.b = Tensor4(m);
  T.c = Tensor4(m);
  double vs = s.geom->count(Phase::Solid) * std::pow(s.geom->h(), d);
  T.solid_volume = vs;
  detail::for_each_solid_gp(*s.geom, [&](int v, const std::array<double, 3>& y, double w, auto strain) {
    const Tensor4& A = s.tensor.at(v);
    std::vector<Mat> E(m * m), F(m * m);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < m; ++j) {
        Mat M = unit_sym(d, i, j);
        E[i * m + j] = M + strain(s.chi[i * d + j].values);
        F[i * m + j] = strain(s.chiB[i * d + j].values) - y[d - 1] * M;
      }
    for (int p = 0; p < m * m; ++p) {
      Mat AE = A.apply(E[p]), AF = A.apply(F[p]);
      for (int q = 0; q < m * m; ++q) {
        int al = p / m, be = p % m, ga = q / m, de = q % m;
        T.a(al, be, ga, de) += w / vs * (AE.array() * E[q].array()).sum();
        T.b(al, be, ga, de) += w / vs * (AF.array() * E[q].array()).sum();
        T.c(al, be, ga, de) += w / vs * (AF.array() * F[q].array()).sum();
      }
    }
  });
  T.has_plate = true;
}

// ---------------------------------------------------------------- correctors

inline CellField reconstruct_u1(const ElasticCellSolutionSet& s, const Mat& strain) {
  int m = s.dim() - 1;
  if (strain.rows() != m || strain.cols() != m) throw ShapeError("in-plane strain must be (dim-1)x(dim-1)");
  CellField u = make_field(FieldKind::Displacement, s.geom);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j)
      if (strain(i, j) != 0) u.values += strain(i, j) * s.chi_of(i, j).values;
  return u;
}

inline CellField reconstruct_u2(const ElasticCellSolutionSet& s, const Mat& strain1, const Mat& hessian) {
  int m = s.dim() - 1;
  if (hessian.rows() != m || hessian.cols() != m) throw ShapeError("hessian must be (dim-1)x(dim-1)");
  CellField u = reconstruct_u1(s, strain1);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j)
      if (hessian(i, j) != 0) u.values += hessian(i, j) * s.chiB_of(i, j).values;
  return u;
}

}  // namespace memhom
