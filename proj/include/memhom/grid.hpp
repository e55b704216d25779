#pragma once
/**
 * @file grid.hpp
 * @brief Cell fields, Q1 vertex layout, strain sampling, D:D products and field export.
 *
 * Vertex layout: lateral axes carry N vertices (periodic, stored once), the
 * vertical axis 2N+1. Displacement fields store d components per vertex,
 * component-major blocks: value[k * nvert + v].
 */

#include <array>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <memory>
#include <string>
#include <vector>

#include "memhom/geometry.hpp"
#include "memhom/staggered.hpp"

namespace memhom {

enum class FieldKind { Velocity, Pressure, Displacement };
enum class Region { Fluid, Solid, All };

class VertexGrid {
 public:
  explicit VertexGrid(const CellGeometry& g) : dim_(g.dim()), h_(g.h()) {
    nv_ = {1, 1, 1};
    for (int k = 0; k < dim_ - 1; ++k) nv_[k] = g.resolution();
    nv_[dim_ - 1] = 2 * g.resolution() + 1;
    nc_ = g.shape();
  }
  int dim() const { return dim_; }
  double h() const { return h_; }
  int num_vertices() const { return nv_[0] * nv_[1] * nv_[2]; }
  const Idx3& shape() const { return nv_; }
  int index(const Idx3& c) const { return c[0] + nv_[0] * (c[1] + nv_[1] * c[2]); }
  Idx3 coords(int v) const { return {v % nv_[0], (v / nv_[0]) % nv_[1], v / (nv_[0] * nv_[1])}; }

  // Local vertex a (bit m of a = offset along axis m) of voxel c, lateral wrap.
  int voxel_vertex(const Idx3& c, int a) const {
    Idx3 v{0, 0, 0};
    for (int m = 0; m < dim_; ++m) {
      v[m] = c[m] + ((a >> m) & 1);
      if (m < dim_ - 1) v[m] %= nv_[m];
    }
    return index(v);
  }
  // Unwrapped position of local vertex a of voxel c.
  std::array<double, 3> local_position(const Idx3& c, int a) const {
    std::array<double, 3> y{0, 0, 0};
    for (int m = 0; m < dim_; ++m) y[m] = (c[m] + ((a >> m) & 1)) * h_;
    y[dim_ - 1] -= 1.0;
    return y;
  }
  std::array<double, 3> position(int v) const {
    Idx3 c = coords(v);
    std::array<double, 3> y{0, 0, 0};
    for (int m = 0; m < dim_; ++m) y[m] = c[m] * h_;
    y[dim_ - 1] -= 1.0;
    return y;
  }

 private:
  int dim_;
  double h_;
  Idx3 nv_, nc_;
};

// Bilinear/trilinear element on a cube of side h with 2^d Gauss points.
struct Q1Element {
  int dim;
  double h;
  int nloc, ngp;
  std::vector<std::array<double, 3>> gp;   // reference coordinates in [0,1]^d
  double gw;                               // weight per point (physical volume / ngp)
  // grad[g][a][m] = d N_a / d y_m at point g
  std::vector<std::vector<std::array<double, 3>>> grad;
  std::vector<std::vector<double>> N;

  Q1Element(int d, double hh) : dim(d), h(hh), nloc(1 << d), ngp(1 << d) {
    const double r = 0.5 / std::sqrt(3.0);
    for (int g = 0; g < ngp; ++g) {
      std::array<double, 3> x{0, 0, 0};
      for (int m = 0; m < d; ++m) x[m] = 0.5 + (((g >> m) & 1) ? r : -r);
      gp.push_back(x);
    }
    gw = std::pow(h, d) / ngp;
    grad.assign(ngp, std::vector<std::array<double, 3>>(nloc));
    N.assign(ngp, std::vector<double>(nloc));
    for (int g = 0; g < ngp; ++g)
      for (int a = 0; a < nloc; ++a) {
        double val = 1;
        for (int m = 0; m < d; ++m) val *= ((a >> m) & 1) ? gp[g][m] : 1 - gp[g][m];
        N[g][a] = val;
        for (int m = 0; m < d; ++m) {
          double dv = 1.0 / h;
          for (int q = 0; q < d; ++q) {
            double f = ((a >> q) & 1) ? gp[g][q] : 1 - gp[g][q];
            double df = ((a >> q) & 1) ? 1.0 : -1.0;
            dv *= (q == m) ? df : f;
          }
          grad[g][a][m] = dv;
        }
      }
  }
};

struct CellField {
  FieldKind kind = FieldKind::Velocity;
  std::shared_ptr<const CellGeometry> geom;
  Vec values;
};

inline int expected_size(FieldKind kind, const CellGeometry& g) {
  switch (kind) {
    case FieldKind::Velocity: return StaggeredGrid::for_cell(g).num_vel();
    case FieldKind::Pressure: return g.num_voxels();
    case FieldKind::Displacement: return g.dim() * VertexGrid(g).num_vertices();
  }
  return 0;
}

inline void check_layout(const CellField& f) {
  if (!f.geom) throw LayoutError("field has no geometry");
  if (f.values.size() != expected_size(f.kind, *f.geom))
    throw LayoutError("field array length does not match its layout");
}

inline CellField make_field(FieldKind kind, std::shared_ptr<const CellGeometry> g) {
  CellField f;
  f.kind = kind;
  f.values = Vec::Zero(expected_size(kind, *g));
  f.geom = std::move(g);
  return f;
}

// Sample a velocity/displacement field from a function (k, y) -> value.
template <class F>
CellField sample_field(FieldKind kind, std::shared_ptr<const CellGeometry> g, F&& f) {
  CellField out = make_field(kind, g);
  if (kind == FieldKind::Velocity) {
    out.values = StaggeredGrid::for_cell(*g).interpolate(f);
  } else if (kind == FieldKind::Displacement) {
    VertexGrid vg(*g);
    int nv = vg.num_vertices();
    for (int k = 0; k < g->dim(); ++k)
      for (int v = 0; v < nv; ++v) out.values[k * nv + v] = f(k, vg.position(v));
  } else {
    for (int v = 0; v < g->num_voxels(); ++v) out.values[v] = f(0, g->centre(v));
  }
  return out;
}

struct StrainSamples {
  std::vector<int> k, l;
  std::vector<std::array<double, 3>> where;
  Vec value;
};

inline std::vector<uint8_t> region_mask(const CellGeometry& g, Region r) {
  std::vector<uint8_t> m(g.num_voxels(), 1);
  if (r == Region::All) return m;
  for (int v = 0; v < g.num_voxels(); ++v) m[v] = (g.solid(v) == (r == Region::Solid)) ? 1 : 0;
  return m;
}

// Displacement strain at Gauss point gp of voxel c as a d x d matrix.
inline Mat q1_strain(const VertexGrid& vg, const Q1Element& el, const Vec& u, const Idx3& c, int gp) {
  int d = vg.dim(), nv = vg.num_vertices();
  Mat G = Mat::Zero(d, d);  // G(i,m) = d u_i / d y_m
  for (int a = 0; a < el.nloc; ++a) {
    int v = vg.voxel_vertex(c, a);
    for (int i = 0; i < d; ++i)
      for (int m = 0; m < d; ++m) G(i, m) += u[i * nv + v] * el.grad[gp][a][m];
  }
  return 0.5 * (G + G.transpose());
}

inline StrainSamples sym_gradient(const CellField& f) {
  check_layout(f);
  const CellGeometry& g = *f.geom;
  StrainSamples out;
  if (f.kind == FieldKind::Velocity) {
    auto grid = StaggeredGrid::for_cell(g);
    out.value = grid.strain_operator() * f.values;
    for (auto& s : grid.samples()) {
      out.k.push_back(s.k);
      out.l.push_back(s.l);
      std::array<double, 3> y{0, 0, 0};
      if (s.k == s.l) {
        y = grid.cell_centre(s.pos[0]);
      } else {
        y[s.k] = grid.origin()[s.k] + s.pos[0] * grid.h()[s.k];
        y[s.l] = grid.origin()[s.l] + s.pos[1] * grid.h()[s.l];
        int o = 3 - s.k - s.l;
        if (o < g.dim()) y[o] = grid.origin()[o] + (s.pos[2] + 0.5) * grid.h()[o];
      }
      out.where.push_back(y);
    }
    return out;
  }
  if (f.kind == FieldKind::Displacement) {
    VertexGrid vg(g);
    Q1Element el(g.dim(), g.h());
    std::vector<double> vals;
    int d = g.dim();
    for (int v = 0; v < g.num_voxels(); ++v) {
      Idx3 c = g.coords(v);
      auto y0 = vg.local_position(c, 0);
      for (int gp = 0; gp < el.ngp; ++gp) {
        Mat E = q1_strain(vg, el, f.values, c, gp);
        std::array<double, 3> y = y0;
        for (int m = 0; m < d; ++m) y[m] += el.gp[gp][m] * g.h();
        for (int i = 0; i < d; ++i)
          for (int j = i; j < d; ++j) {
            out.k.push_back(i);
            out.l.push_back(j);
            out.where.push_back(y);
            vals.push_back(E(i, j));
          }
      }
    }
    out.value = Eigen::Map<Vec>(vals.data(), static_cast<long>(vals.size()));
    return out;
  }
  throw LayoutError("sym_gradient needs a velocity or displacement field");
}

inline Vec divergence(const CellField& f) {
  check_layout(f);
  if (f.kind != FieldKind::Velocity) throw LayoutError("divergence needs a velocity field");
  return StaggeredGrid::for_cell(*f.geom).divergence_operator() * f.values;
}

inline double inner_product_D(const CellField& f, const CellField& g, Region region) {
  check_layout(f);
  check_layout(g);
  if (f.kind != g.kind || (f.geom.get() != g.geom.get() && f.geom->hash() != g.geom->hash()))
    throw LayoutError("fields do not share geometry and kind");
  const CellGeometry& geo = *f.geom;
  auto mask = region_mask(geo, region);
  if (f.kind == FieldKind::Velocity) {
    auto grid = StaggeredGrid::for_cell(geo);
    SpMat S = grid.strain_operator();
    Vec w = grid.sample_weights(mask);
    Vec a = S * f.values, b = S * g.values;
    return (w.array() * a.array() * b.array()).sum();
  }
  if (f.kind == FieldKind::Displacement) {
    VertexGrid vg(geo);
    Q1Element el(geo.dim(), geo.h());
    double s = 0;
    for (int v = 0; v < geo.num_voxels(); ++v) {
      if (!mask[v]) continue;
      Idx3 c = geo.coords(v);
      for (int gp = 0; gp < el.ngp; ++gp) {
        Mat A = q1_strain(vg, el, f.values, c, gp), B = q1_strain(vg, el, g.values, c, gp);
        s += el.gw * (A.array() * B.array()).sum();
      }
    }
    return s;
  }
  throw LayoutError("inner_product_D needs velocity or displacement fields");
}

// ---------------------------------------------------------------- export

// Cell-centred velocity by averaging the two faces of each component.
inline std::vector<std::array<double, 3>> velocity_at_centres(const CellField& f) {
  check_layout(f);
  auto grid = StaggeredGrid::for_cell(*f.geom);
  std::vector<std::array<double, 3>> out(grid.num_cells(), {0, 0, 0});
  for (int c = 0; c < grid.num_cells(); ++c) {
    Idx3 ci = grid.cell_coords(c);
    for (int k = 0; k < grid.dim(); ++k) {
      Idx3 s{0, 0, 0};
      for (int m = 0; m < grid.dim(); ++m) s[m] = (m == k) ? 0 : grid.centre_slot(m, ci[m]);
      Idx3 lo = s, hi = s;
      lo[k] = grid.face_slot(k, ci[k]);
      hi[k] = grid.face_slot(k, ci[k] + 1);
      out[c][k] = 0.5 * (f.values[grid.vel_index(k, lo)] + f.values[grid.vel_index(k, hi)]);
    }
  }
  return out;
}

// Legacy VTK structured points. Velocity/pressure as CELL_DATA, displacement as
// POINT_DATA with the periodic layer duplicated. Ordering: axis 0 fastest.
inline void write_vtk(const std::string& path, const std::vector<std::pair<std::string, CellField>>& fields) {
  if (fields.empty()) return;
  const CellGeometry& g = *fields.front().second.geom;
  int d = g.dim();
  Idx3 n = g.shape();
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << std::setprecision(17);
  out << "# vtk DataFile Version 3.0\nmemhom cell fields\nASCII\nDATASET STRUCTURED_POINTS\n";
  out << "DIMENSIONS " << n[0] + 1 << " " << n[1] + 1 << " " << (d == 3 ? n[2] + 1 : 1) << "\n";
  out << "ORIGIN 0 " << (d == 2 ? "-1 0" : "0 -1") << "\n";
  out << "SPACING " << g.h() << " " << g.h() << " " << (d == 3 ? g.h() : 1.0) << "\n";
  out << "CELL_DATA " << g.num_voxels() << "\n";
  out << "SCALARS phase int 1\nLOOKUP_TABLE default\n";
  for (int v = 0; v < g.num_voxels(); ++v) out << int(g.solid(v)) << "\n";
  for (auto& [name, f] : fields) {
    check_layout(f);
    if (f.kind == FieldKind::Pressure) {
      out << "SCALARS " << name << " double 1\nLOOKUP_TABLE default\n";
      for (int v = 0; v < g.num_voxels(); ++v) out << f.values[v] << "\n";
    } else if (f.kind == FieldKind::Velocity) {
      auto vc = velocity_at_centres(f);
      out << "VECTORS " << name << " double\n";
      for (auto& x : vc) out << x[0] << " " << x[1] << " " << x[2] << "\n";
    }
  }
  bool header = false;
  VertexGrid vg(g);
  int nv = vg.num_vertices();
  for (auto& [name, f] : fields) {
    if (f.kind != FieldKind::Displacement) continue;
    if (!header) {
      out << "POINT_DATA " << (n[0] + 1) * (n[1] + 1) * (d == 3 ? n[2] + 1 : 1) << "\n";
      header = true;
    }
    out << "VECTORS " << name << " double\n";
    int nz = d == 3 ? n[2] + 1 : 1;
    for (int k3 = 0; k3 < nz; ++k3)
      for (int j = 0; j <= n[1]; ++j)
        for (int i = 0; i <= n[0]; ++i) {
          Idx3 c{i, j, k3};
          for (int m = 0; m < d - 1; ++m) c[m] %= vg.shape()[m];
          int v = vg.index(c);
          std::array<double, 3> x{0, 0, 0};
          for (int k = 0; k < d; ++k) x[k] = f.values[k * nv + v];
          out << x[0] << " " << x[1] << " " << x[2] << "\n";
        }
  }
}

// CSV (index, value) in storage order.
inline void write_csv(const std::string& path, const CellField& f) {
  check_layout(f);
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << std::setprecision(17) << "index,value\n";
  for (int i = 0; i < f.values.size(); ++i) out << i << "," << f.values[i] << "\n";
}

}  // namespace memhom
