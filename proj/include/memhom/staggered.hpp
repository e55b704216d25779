#pragma once
/**
 * @file staggered.hpp
 * @brief MAC layout on a box with per-axis periodic or walled ends.
 *
 * Component k lives on k-faces. Along its own axis it has n slots (periodic) or
 * n+1 (walled). Along another axis m it sits at cell centres; when m is walled
 * two extra wall slots (lo, hi) hold boundary values, so slot s=0 is the lo wall,
 * s=1..n are centres and s=n+1 the hi wall.
 *
 * Strain samples: D_kk at cell centres, D_kl (k<l) on the (k,l) edges.
 */

#include <Eigen/Sparse>

#include <array>
#include <cmath>
#include <vector>

#include "memhom/errors.hpp"
#include "memhom/geometry.hpp"
#include "memhom/tensor.hpp"

namespace memhom {

using SpMat = Eigen::SparseMatrix<double>;
using Triplet = Eigen::Triplet<double>;

struct StrainSample {
  int k, l;       // D_kl, k <= l
  Idx3 pos;       // diag: cell index; off-diag: (face along k, face along l, cell elsewhere)
};

class StaggeredGrid {
 public:
  StaggeredGrid() = default;
  StaggeredGrid(int dim, Idx3 n, std::array<double, 3> h, std::array<bool, 3> periodic,
                std::array<double, 3> origin)
      : dim_(dim), n_(n), h_(h), per_(periodic), org_(origin) {
    for (int k = dim; k < 3; ++k) { n_[k] = 1; h_[k] = 1.0; per_[k] = true; }
    int off = 0;
    for (int k = 0; k < dim_; ++k) {
      for (int m = 0; m < 3; ++m) {
        if (m >= dim_) ext_[k][m] = 1;
        else if (m == k) ext_[k][m] = per_[m] ? n_[m] : n_[m] + 1;
        else ext_[k][m] = per_[m] ? n_[m] : n_[m] + 2;
      }
      offset_[k] = off;
      off += ext_[k][0] * ext_[k][1] * ext_[k][2];
    }
    num_vel_ = off;
    build_samples();
  }

  // Cell-problem grid on Z: lateral periodic, vertical walled.
  static StaggeredGrid for_cell(const CellGeometry& g) {
    int d = g.dim();
    std::array<double, 3> h{g.h(), g.h(), g.h()};
    std::array<bool, 3> per{true, true, true};
    per[d - 1] = false;
    std::array<double, 3> org{0, 0, 0};
    org[d - 1] = -1.0;
    return StaggeredGrid(d, g.shape(), h, per, org);
  }

  int dim() const { return dim_; }
  const Idx3& n() const { return n_; }
  const std::array<double, 3>& h() const { return h_; }
  bool periodic(int m) const { return per_[m]; }
  const std::array<double, 3>& origin() const { return org_; }
  int num_cells() const { return n_[0] * n_[1] * n_[2]; }
  int num_vel() const { return num_vel_; }
  const Idx3& extent(int k) const { return ext_[k]; }
  double cell_volume() const { return h_[0] * h_[1] * h_[2]; }  // h_[2] = 1 in 2D

  int cell_index(const Idx3& c) const { return c[0] + n_[0] * (c[1] + n_[1] * c[2]); }
  Idx3 cell_coords(int v) const { return {v % n_[0], (v / n_[0]) % n_[1], v / (n_[0] * n_[1])}; }

  int vel_index(int k, const Idx3& s) const {
    const Idx3& e = ext_[k];
    return offset_[k] + s[0] + e[0] * (s[1] + e[1] * s[2]);
  }
  // Inverse of vel_index: component and slots.
  std::pair<int, Idx3> vel_slot(int dof) const {
    int k = 0;
    while (k + 1 < dim_ && dof >= offset_[k + 1]) ++k;
    int r = dof - offset_[k];
    const Idx3& e = ext_[k];
    return {k, Idx3{r % e[0], (r / e[0]) % e[1], r / (e[0] * e[1])}};
  }

  // Slot of component k at a cell centre along axis m != k.
  int centre_slot(int m, int c) const { return per_[m] ? c : c + 1; }
  // Slot of component k at face f along its own axis.
  int face_slot(int m, int f) const { return per_[m] ? ((f % n_[m]) + n_[m]) % n_[m] : f; }

  bool is_wall_slot(int k, int m, int s) const {
    return m != k && m < dim_ && !per_[m] && (s == 0 || s == n_[m] + 1);
  }

  // Physical coordinate of slot s of component k along axis m.
  double slot_coord(int k, int m, int s) const {
    if (m == k) return org_[m] + s * h_[m];
    if (per_[m]) return org_[m] + (s + 0.5) * h_[m];
    if (s == 0) return org_[m];
    if (s == n_[m] + 1) return org_[m] + n_[m] * h_[m];
    return org_[m] + (s - 0.5) * h_[m];
  }

  std::array<double, 3> vel_position(int dof) const {
    auto [k, s] = vel_slot(dof);
    std::array<double, 3> x{0, 0, 0};
    for (int m = 0; m < dim_; ++m) x[m] = slot_coord(k, m, s[m]);
    return x;
  }

  std::array<double, 3> cell_centre(int c) const {
    Idx3 ci = cell_coords(c);
    std::array<double, 3> x{0, 0, 0};
    for (int m = 0; m < dim_; ++m) x[m] = org_[m] + (ci[m] + 0.5) * h_[m];
    return x;
  }

  // Cells adjacent to face f along axis m (-1 when outside a walled end).
  std::array<int, 2> face_cells(int m, int f) const {
    if (per_[m]) return {((f - 1) % n_[m] + n_[m]) % n_[m], f % n_[m]};
    return {f - 1 >= 0 ? f - 1 : -1, f < n_[m] ? f : -1};
  }

  const std::vector<StrainSample>& samples() const { return samples_; }
  int num_samples() const { return static_cast<int>(samples_.size()); }

  // Volume weight per unit region fraction, times the D:D multiplicity (2 off-diagonal).
  // cell_in_region may be empty (all cells).
  Vec sample_weights(const std::vector<uint8_t>& cell_in_region) const {
    Vec w(num_samples());
    double vol = cell_volume();
    auto in = [&](int c) { return cell_in_region.empty() || cell_in_region[c] != 0; };
    for (int s = 0; s < num_samples(); ++s) {
      const auto& smp = samples_[s];
      if (smp.k == smp.l) {
        w[s] = in(smp.pos[0]) ? vol : 0.0;
        continue;
      }
      int count = 0;
      auto ck = face_cells(smp.k, smp.pos[0]);
      auto cl = face_cells(smp.l, smp.pos[1]);
      for (int a : ck)
        for (int b : cl) {
          if (a < 0 || b < 0) continue;
          Idx3 c{0, 0, 0};
          c[smp.k] = a;
          c[smp.l] = b;
          int o = 3 - smp.k - smp.l;
          if (o < dim_) c[o] = smp.pos[2];
          if (in(cell_index(c))) ++count;
        }
      w[s] = 2.0 * vol * count / 4.0;
    }
    return w;
  }

  // Rows: samples; columns: velocity dofs.
  SpMat strain_operator() const {
    std::vector<Triplet> t;
    t.reserve(samples_.size() * 4);
    for (int s = 0; s < num_samples(); ++s) {
      const auto& smp = samples_[s];
      if (smp.k == smp.l) {
        int k = smp.k;
        Idx3 c = cell_coords(smp.pos[0]);
        Idx3 lo = centre_slots(k, c), hi = lo;
        lo[k] = face_slot(k, c[k]);
        hi[k] = face_slot(k, c[k] + 1);
        t.emplace_back(s, vel_index(k, hi), 1.0 / h_[k]);
        t.emplace_back(s, vel_index(k, lo), -1.0 / h_[k]);
      } else {
        add_half_derivative(t, s, smp.k, smp.l, smp);
        add_half_derivative(t, s, smp.l, smp.k, smp);
      }
    }
    SpMat S(num_samples(), num_vel_);
    S.setFromTriplets(t.begin(), t.end());
    return S;
  }

  // Rows: cells; discrete divergence.
  SpMat divergence_operator() const {
    std::vector<Triplet> t;
    for (int c = 0; c < num_cells(); ++c) {
      Idx3 ci = cell_coords(c);
      for (int k = 0; k < dim_; ++k) {
        Idx3 lo = centre_slots(k, ci), hi = lo;
        lo[k] = face_slot(k, ci[k]);
        hi[k] = face_slot(k, ci[k] + 1);
        t.emplace_back(c, vel_index(k, hi), 1.0 / h_[k]);
        t.emplace_back(c, vel_index(k, lo), -1.0 / h_[k]);
      }
    }
    SpMat D(num_cells(), num_vel_);
    D.setFromTriplets(t.begin(), t.end());
    return D;
  }

  // Rows: velocity dofs; (p(c+) - p(c-))/h on faces with two adjacent cells, else 0.
  SpMat gradient_operator() const {
    std::vector<Triplet> t;
    for (int dof = 0; dof < num_vel_; ++dof) {
      auto [k, s] = vel_slot(dof);
      bool centred = true;
      Idx3 c{0, 0, 0};
      for (int m = 0; m < dim_; ++m) {
        if (m == k) continue;
        if (is_wall_slot(k, m, s[m])) centred = false;
        c[m] = per_[m] ? s[m] : s[m] - 1;
      }
      if (!centred) continue;
      auto fc = face_cells(k, s[k]);
      if (fc[0] < 0 || fc[1] < 0) continue;
      Idx3 a = c, b = c;
      a[k] = fc[0];
      b[k] = fc[1];
      t.emplace_back(dof, cell_index(b), 1.0 / h_[k]);
      t.emplace_back(dof, cell_index(a), -1.0 / h_[k]);
    }
    SpMat G(num_vel_, num_cells());
    G.setFromTriplets(t.begin(), t.end());
    return G;
  }

  // Evaluate a velocity field from a function of position (component-wise).
  template <class F>
  Vec interpolate(F&& f) const {
    Vec u(num_vel_);
    for (int dof = 0; dof < num_vel_; ++dof) {
      auto [k, s] = vel_slot(dof);
      (void)s;
      u[dof] = f(k, vel_position(dof));
    }
    return u;
  }

 private:
  Idx3 centre_slots(int k, const Idx3& c) const {
    Idx3 s{0, 0, 0};
    for (int m = 0; m < dim_; ++m)
      if (m != k) s[m] = centre_slot(m, c[m]);
    return s;
  }

  // Adds 1/2 d_b u_a at the (a,b)-edge of sample smp.
  void add_half_derivative(std::vector<Triplet>& t, int row, int a, int b, const StrainSample& smp) const {
    int fa = smp.k == a ? smp.pos[0] : smp.pos[1];
    int fb = smp.k == b ? smp.pos[0] : smp.pos[1];
    int o = 3 - a - b;
    Idx3 s{0, 0, 0};
    s[a] = face_slot(a, fa);
    if (o < dim_) s[o] = centre_slot(o, smp.pos[2]);
    Idx3 lo = s, hi = s;
    double dist;
    if (per_[b]) {
      lo[b] = ((fb - 1) % n_[b] + n_[b]) % n_[b];
      hi[b] = fb % n_[b];
      dist = h_[b];
    } else {
      lo[b] = fb;
      hi[b] = fb + 1;
      dist = (fb == 0 || fb == n_[b]) ? 0.5 * h_[b] : h_[b];
    }
    t.emplace_back(row, vel_index(a, hi), 0.5 / dist);
    t.emplace_back(row, vel_index(a, lo), -0.5 / dist);
  }

  void build_samples() {
    samples_.clear();
    for (int c = 0; c < num_cells(); ++c)
      for (int k = 0; k < dim_; ++k) samples_.push_back({k, k, {c, 0, 0}});
    for (int k = 0; k < dim_; ++k)
      for (int l = k + 1; l < dim_; ++l) {
        int Fk = per_[k] ? n_[k] : n_[k] + 1;
        int Fl = per_[l] ? n_[l] : n_[l] + 1;
        int o = 3 - k - l;
        int No = o < dim_ ? n_[o] : 1;
        for (int co = 0; co < No; ++co)
          for (int fl = 0; fl < Fl; ++fl)
            for (int fk = 0; fk < Fk; ++fk) samples_.push_back({k, l, {fk, fl, co}});
      }
  }

  int dim_ = 2;
  Idx3 n_{1, 1, 1};
  std::array<double, 3> h_{1, 1, 1};
  std::array<bool, 3> per_{true, true, true};
  std::array<double, 3> org_{0, 0, 0};
  std::array<Idx3, 3> ext_{};
  Idx3 offset_{0, 0, 0};
  int num_vel_ = 0;
  std::vector<StrainSample> samples_;
};

}  // namespace memhom
