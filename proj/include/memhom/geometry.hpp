#pragma once
/**
 * @file geometry.hpp
 * @brief Voxelized periodic reference cell Z = (0,1)^{d-1} x (-1,1) and the macro box.
 *
 * Axis d-1 is vertical. Lateral axes are periodic, the vertical axis is bounded
 * by S- (bottom) and S+ (top). Mask value 1 marks a solid voxel.
 * Internal voxel order: axis 0 fastest.
 */

#include <json.hpp>

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <memory>
#include <queue>
#include <sstream>
#include <string>
#include <vector>

#include "memhom/errors.hpp"

namespace memhom {

using Idx3 = std::array<int, 3>;

enum class Phase { Fluid, Solid };
enum class FaceTag { Interior, Gamma, SPlus, SMinus, LateralPeriodic };

inline const char* face_tag_name(FaceTag t) {
  switch (t) {
    case FaceTag::Interior: return "interior";
    case FaceTag::Gamma: return "Gamma";
    case FaceTag::SPlus: return "S+";
    case FaceTag::SMinus: return "S-";
    case FaceTag::LateralPeriodic: return "lateral-periodic";
  }
  return "?";
}

struct Violation {
  std::string code;  // e.g. "solid touches S+"
  std::string message;
  Idx3 witness{0, 0, 0};
};

struct AdmissibilityReport {
  std::vector<Violation> violations;
  std::vector<std::string> warnings;
  bool ok() const { return violations.empty(); }
  bool has(const std::string& code) const {
    for (auto& v : violations)
      if (v.code == code) return true;
    return false;
  }
  std::string text() const {
    std::ostringstream os;
    for (auto& v : violations)
      os << v.code << " at (" << v.witness[0] << "," << v.witness[1] << "," << v.witness[2]
         << "): " << v.message << "\n";
    for (auto& w : warnings) os << "warning: " << w << "\n";
    return os.str();
  }
};

class CellGeometry {
 public:
  CellGeometry(int dim, int resolution, std::vector<uint8_t> mask)
      : dim_(dim), N_(resolution), mask_(std::move(mask)) {
    if (dim != 2 && dim != 3) throw ConfigError("dim must be 2 or 3");
    if (resolution < 4) throw ConfigError("resolution must be >= 4");
    n_ = {1, 1, 1};
    for (int k = 0; k < dim - 1; ++k) n_[k] = N_;
    n_[dim - 1] = 2 * N_;
    if (static_cast<int>(mask_.size()) != num_voxels())
      throw FormatError("mask size does not match resolution");
  }

  int dim() const { return dim_; }
  int resolution() const { return N_; }
  double h() const { return 1.0 / N_; }
  const Idx3& shape() const { return n_; }
  int num_voxels() const { return n_[0] * n_[1] * n_[2]; }
  const std::vector<uint8_t>& mask() const { return mask_; }

  int index(const Idx3& c) const { return c[0] + n_[0] * (c[1] + n_[1] * c[2]); }
  Idx3 coords(int v) const { return {v % n_[0], (v / n_[0]) % n_[1], v / (n_[0] * n_[1])}; }
  bool solid(int v) const { return mask_[v] != 0; }
  bool solid(const Idx3& c) const { return mask_[index(c)] != 0; }
  Phase phase(int v) const { return solid(v) ? Phase::Solid : Phase::Fluid; }

  // Neighbour across face (axis, dir=+-1); lateral wrap, -1 outside vertically.
  int neighbour(int v, int axis, int dir) const {
    Idx3 c = coords(v);
    c[axis] += dir;
    if (axis == dim_ - 1) {
      if (c[axis] < 0 || c[axis] >= n_[axis]) return -1;
    } else {
      c[axis] = (c[axis] + n_[axis]) % n_[axis];
    }
    return index(c);
  }

  // Coordinates of the voxel centre.
  std::array<double, 3> centre(int v) const {
    Idx3 c = coords(v);
    std::array<double, 3> y{0, 0, 0};
    for (int k = 0; k < dim_; ++k) y[k] = (c[k] + 0.5) * h();
    y[dim_ - 1] -= 1.0;
    return y;
  }

  // Tag of face (axis, dir) of a fluid voxel.
  FaceTag face_tag(int v, int axis, int dir) const {
    Idx3 c = coords(v);
    int nb = neighbour(v, axis, dir);
    if (nb < 0) return dir > 0 ? FaceTag::SPlus : FaceTag::SMinus;
    if (solid(nb)) return FaceTag::Gamma;
    if (axis != dim_ - 1 && ((dir > 0 && c[axis] == n_[axis] - 1) || (dir < 0 && c[axis] == 0)))
      return FaceTag::LateralPeriodic;
    return FaceTag::Interior;
  }

  // Counts of tags over the faces of all fluid voxels (each face counted once per voxel).
  std::array<long, 5> tag_counts() const {
    std::array<long, 5> cnt{0, 0, 0, 0, 0};
    for (int v = 0; v < num_voxels(); ++v) {
      if (solid(v)) continue;
      for (int a = 0; a < dim_; ++a)
        for (int dir : {-1, 1}) cnt[static_cast<int>(face_tag(v, a, dir))]++;
    }
    return cnt;
  }

  long count(Phase p) const {
    long c = 0;
    for (auto m : mask_) c += (p == Phase::Solid) == (m != 0);
    return c;
  }

  std::string hash() const {
    // FNV-1a over dim, resolution and mask bytes.
    uint64_t hsh = 1469598103934665603ull;
    auto mix = [&](uint8_t b) { hsh = (hsh ^ b) * 1099511628211ull; };
    for (int x : {dim_, N_})
      for (int s = 0; s < 4; ++s) mix(static_cast<uint8_t>((x >> (8 * s)) & 0xff));
    for (auto m : mask_) mix(m);
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << hsh;
    return os.str();
  }

  // Lateral shift by s voxels along lateral axis k (periodic).
  CellGeometry shifted(int k, int s) const {
    std::vector<uint8_t> m(mask_.size());
    for (int v = 0; v < num_voxels(); ++v) {
      Idx3 c = coords(v);
      c[k] = ((c[k] + s) % n_[k] + n_[k]) % n_[k];
      m[index(c)] = mask_[v];
    }
    return CellGeometry(dim_, N_, std::move(m));
  }

  // Reflection y_d -> -y_d.
  CellGeometry reflected() const {
    std::vector<uint8_t> m(mask_.size());
    for (int v = 0; v < num_voxels(); ++v) {
      Idx3 c = coords(v);
      c[dim_ - 1] = n_[dim_ - 1] - 1 - c[dim_ - 1];
      m[index(c)] = mask_[v];
    }
    return CellGeometry(dim_, N_, std::move(m));
  }

 private:
  int dim_, N_;
  Idx3 n_;
  std::vector<uint8_t> mask_;
};

// ---------------------------------------------------------------- admissibility

inline int count_components(const CellGeometry& g, bool want_solid, int* second_witness) {
  std::vector<int> comp(g.num_voxels(), -1);
  int ncomp = 0;
  *second_witness = -1;
  for (int s = 0; s < g.num_voxels(); ++s) {
    if (g.solid(s) != want_solid || comp[s] >= 0) continue;
    if (ncomp == 1) *second_witness = s;
    std::queue<int> q;
    q.push(s);
    comp[s] = ncomp;
    while (!q.empty()) {
      int v = q.front();
      q.pop();
      for (int a = 0; a < g.dim(); ++a)
        for (int dir : {-1, 1}) {
          int nb = g.neighbour(v, a, dir);
          if (nb >= 0 && comp[nb] < 0 && g.solid(nb) == want_solid) {
            comp[nb] = ncomp;
            q.push(nb);
          }
        }
    }
    ++ncomp;
  }
  return ncomp;
}

inline AdmissibilityReport check_admissibility(const CellGeometry& g) {
  AdmissibilityReport r;
  int d = g.dim();
  const Idx3& n = g.shape();
  for (int v = 0; v < g.num_voxels(); ++v) {
    if (!g.solid(v)) continue;
    Idx3 c = g.coords(v);
    if (c[d - 1] == n[d - 1] - 1 && !r.has("solid touches S+"))
      r.violations.push_back({"solid touches S+", "solid voxel in the top layer", c});
    if (c[d - 1] == 0 && !r.has("solid touches S-"))
      r.violations.push_back({"solid touches S-", "solid voxel in the bottom layer", c});
  }
  long ns = g.count(Phase::Solid), nf = g.count(Phase::Fluid);
  if (ns == 0) r.violations.push_back({"solid phase empty", "no solid voxel", {0, 0, 0}});
  if (nf == 0) r.violations.push_back({"fluid phase empty", "no fluid voxel", {0, 0, 0}});
  int w = -1;
  if (ns > 0 && count_components(g, true, &w) > 1)
    r.violations.push_back({"solid not connected", "second solid component", g.coords(w)});
  if (nf > 0 && count_components(g, false, &w) > 1)
    r.violations.push_back({"fluid not connected", "second fluid component", g.coords(w)});

  // Diagonal pinches (two voxels sharing only an edge) are not Lipschitz.
  for (int v = 0; v < g.num_voxels(); ++v)
    for (int a = 0; a < d; ++a)
      for (int b = a + 1; b < d; ++b) {
        int va = g.neighbour(v, a, 1);
        if (va < 0) continue;
        int vb = g.neighbour(v, b, 1);
        if (vb < 0) continue;
        int vab = g.neighbour(va, b, 1);
        if (vab < 0) continue;
        bool s0 = g.solid(v), s1 = g.solid(va), s2 = g.solid(vb), s3 = g.solid(vab);
        if (s0 == s3 && s1 == s2 && s0 != s1) {
          Idx3 c = g.coords(v);
          std::ostringstream os;
          os << "diagonal pinch near voxel (" << c[0] << "," << c[1] << "," << c[2]
             << "); boundary may not be Lipschitz";
          r.warnings.push_back(os.str());
          return r;
        }
      }
  return r;
}

struct PhaseMeasure {
  double volume;        // |Z_phase|
  double fraction;      // volume / |Z|
  double gamma_area;    // |Gamma|
};

inline PhaseMeasure measure_phase(const CellGeometry& g, Phase p) {
  long nvox = g.count(p);
  long ntot = g.num_voxels();
  long faces = 0;
  for (int v = 0; v < g.num_voxels(); ++v) {
    if (g.solid(v)) continue;
    for (int a = 0; a < g.dim(); ++a)
      for (int dir : {-1, 1}) {
        int nb = g.neighbour(v, a, dir);
        if (nb >= 0 && g.solid(nb)) ++faces;
      }
  }
  // 2 * nvox / ntot is exact in the voxel measure since |Z| = 2.
  double volume = 2.0 * static_cast<double>(nvox) / static_cast<double>(ntot);
  return {volume, static_cast<double>(nvox) / static_cast<double>(ntot),
          faces * std::pow(g.h(), g.dim() - 1)};
}

// ---------------------------------------------------------------- descriptors

struct Shape {
  std::string type;  // ball | cylinder | box
  std::array<double, 3> centre{0, 0, 0};
  double radius = 0;
  std::array<double, 3> half{0, 0, 0};
  int axis = 0;            // cylinder axis
  double half_length = 1e9;

  bool inside(const std::array<double, 3>& y, int d) const {
    std::array<double, 3> r{0, 0, 0};
    for (int k = 0; k < d; ++k) {
      r[k] = y[k] - centre[k];
      if (k < d - 1) r[k] -= std::round(r[k]);  // periodic minimum image
    }
    if (type == "ball") {
      double s = 0;
      for (int k = 0; k < d; ++k) s += r[k] * r[k];
      return s < radius * radius;
    }
    if (type == "box") {
      for (int k = 0; k < d; ++k)
        if (std::abs(r[k]) >= half[k]) return false;
      return true;
    }
    if (type == "cylinder") {
      double s = 0;
      for (int k = 0; k < d; ++k)
        if (k != axis) s += r[k] * r[k];
      return s < radius * radius && std::abs(r[axis]) < half_length;
    }
    throw ConfigError("unknown shape type '" + type + "'");
  }
};

struct GeometryDescriptor {
  int dim = 3;
  int resolution = 16;
  std::vector<Shape> shapes;
  std::string mask_file;
  std::string mask_format = "binary";
};

inline std::array<double, 3> read_vec3(const nlohmann::json& j, int d, std::array<double, 3> def) {
  if (!j.is_array()) throw ConfigError("expected an array");
  if (static_cast<int>(j.size()) != d) throw ConfigError("vector has wrong length for dim");
  for (int k = 0; k < d; ++k) def[k] = j[k].get<double>();
  return def;
}

inline Shape parse_shape(const nlohmann::json& j, int d) {
  Shape s;
  s.type = j.at("type").get<std::string>();
  s.centre = {0.5, 0.5, 0.5};
  s.centre[d - 1] = 0.0;
  if (j.contains("center")) s.centre = read_vec3(j["center"], d, s.centre);
  if (j.contains("centre")) s.centre = read_vec3(j["centre"], d, s.centre);
  if (s.type == "ball" || s.type == "cylinder") s.radius = j.at("radius").get<double>();
  if (s.type == "box") s.half = read_vec3(j.at("half_extents"), d, s.half);
  if (s.type == "cylinder") {
    s.axis = j.value("axis", 0);
    if (s.axis < 0 || s.axis >= d) throw ConfigError("cylinder axis out of range");
    s.half_length = j.value("half_length", 1e9);
  }
  if (s.type != "ball" && s.type != "box" && s.type != "cylinder")
    throw ConfigError("unknown shape type '" + s.type + "'");
  return s;
}

inline GeometryDescriptor parse_geometry_descriptor(const nlohmann::json& j) {
  try {
    GeometryDescriptor g;
    g.dim = j.value("dim", 3);
    g.resolution = j.value("resolution", 16);
    if (j.contains("shape")) g.shapes.push_back(parse_shape(j["shape"], g.dim));
    if (j.contains("shapes"))
      for (auto& s : j["shapes"]) g.shapes.push_back(parse_shape(s, g.dim));
    g.mask_file = j.value("mask_file", std::string());
    g.mask_format = j.value("mask_format", std::string("binary"));
    if (g.shapes.empty() && g.mask_file.empty())
      throw ConfigError("geometry needs shapes or a mask_file");
    return g;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("geometry descriptor: ") + e.what());
  }
}

// Mask files store [nx][ny][nz] in C order (last axis fastest); header (dim,nx,ny,nz).
inline CellGeometry read_mask_file(const std::string& path, const std::string& format) {
  std::vector<int> hdr;
  std::vector<uint8_t> raw;
  if (format == "binary") {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open mask file " + path);
    int32_t h[4];
    if (!in.read(reinterpret_cast<char*>(h), sizeof h)) throw FormatError("truncated mask header");
    hdr.assign(h, h + 4);
    long n = static_cast<long>(hdr[1]) * hdr[2] * hdr[3];
    if (hdr[1] <= 0 || hdr[2] <= 0 || hdr[3] <= 0 || n > 200000000) throw FormatError("bad mask header");
    raw.resize(n);
    if (!in.read(reinterpret_cast<char*>(raw.data()), n)) throw FormatError("truncated mask data");
  } else if (format == "csv") {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open mask file " + path);
    std::string tok;
    std::vector<long> vals;
    std::string all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    for (char& c : all)
      if (c == ',' || c == '\n' || c == '\r' || c == ';' || c == '\t') c = ' ';
    std::istringstream is(all);
    while (is >> tok) {
      try {
        size_t pos;
        long v = std::stol(tok, &pos);
        if (pos != tok.size()) throw FormatError("bad token '" + tok + "'");
        vals.push_back(v);
      } catch (const std::logic_error&) {
        throw FormatError("bad token '" + tok + "' in mask csv");
      }
    }
    if (vals.size() < 4) throw FormatError("mask csv lacks header");
    hdr.assign(vals.begin(), vals.begin() + 4);
    if (hdr[1] <= 0 || hdr[2] <= 0 || hdr[3] <= 0) throw FormatError("bad mask header");
    long n = static_cast<long>(hdr[1]) * hdr[2] * hdr[3];
    if (static_cast<long>(vals.size()) != 4 + n) throw FormatError("mask csv has wrong value count");
    for (long i = 0; i < n; ++i) raw.push_back(static_cast<uint8_t>(vals[4 + i]));
  } else {
    throw ConfigError("unknown mask format " + format);
  }
  int d = hdr[0];
  if (d != 2 && d != 3) throw FormatError("mask dim must be 2 or 3");
  int nx = hdr[1], ny = hdr[2], nz = hdr[3];
  if (d == 2 && (nz != 1 || ny != 2 * nx)) throw FormatError("2D mask must be nx x 2nx x 1");
  if (d == 3 && (ny != nx || nz != 2 * nx)) throw FormatError("3D mask must be n x n x 2n");
  for (auto b : raw)
    if (b > 1) throw FormatError("mask labels must be 0 or 1");
  std::vector<uint8_t> m(raw.size());
  for (int i = 0; i < nx; ++i)
    for (int j = 0; j < ny; ++j)
      for (int k = 0; k < nz; ++k) m[i + nx * (j + ny * k)] = raw[(static_cast<long>(i) * ny + j) * nz + k];
  return CellGeometry(d, nx, std::move(m));
}

inline void write_mask_file(const CellGeometry& g, const std::string& path, const std::string& format) {
  const Idx3& n = g.shape();
  int hdr[4] = {g.dim(), n[0], n[1], n[2]};
  std::vector<uint8_t> raw(g.num_voxels());
  for (int i = 0; i < n[0]; ++i)
    for (int j = 0; j < n[1]; ++j)
      for (int k = 0; k < n[2]; ++k) raw[(static_cast<long>(i) * n[1] + j) * n[2] + k] = g.mask()[g.index({i, j, k})];
  if (format == "binary") {
    std::ofstream out(path, std::ios::binary);
    int32_t h[4] = {hdr[0], hdr[1], hdr[2], hdr[3]};
    out.write(reinterpret_cast<const char*>(h), sizeof h);
    out.write(reinterpret_cast<const char*>(raw.data()), static_cast<long>(raw.size()));
  } else {
    std::ofstream out(path);
    out << hdr[0] << "," << hdr[1] << "," << hdr[2] << "," << hdr[3] << "\n";
    for (size_t i = 0; i < raw.size(); ++i) out << int(raw[i]) << ((i + 1) % n[2] == 0 ? "\n" : ",");
  }
}

// Voxelize a descriptor without checking admissibility.
inline CellGeometry voxelize(const GeometryDescriptor& desc) {
  if (!desc.mask_file.empty()) return read_mask_file(desc.mask_file, desc.mask_format);
  if (desc.dim != 2 && desc.dim != 3) throw ConfigError("dim must be 2 or 3");
  if (desc.resolution < 4) throw ConfigError("resolution must be >= 4");
  int N = desc.resolution, d = desc.dim;
  long nv = static_cast<long>(N) * 2 * N * (d == 3 ? N : 1);
  CellGeometry probe(d, N, std::vector<uint8_t>(nv, 0));
  std::vector<uint8_t> m(nv, 0);
  for (int v = 0; v < nv; ++v) {
    auto y = probe.centre(v);
    for (auto& s : desc.shapes)
      if (s.inside(y, d)) { m[v] = 1; break; }
  }
  return CellGeometry(d, N, std::move(m));
}

inline std::shared_ptr<const CellGeometry> build_cell_geometry(const GeometryDescriptor& desc) {
  auto g = std::make_shared<const CellGeometry>(voxelize(desc));
  auto rep = check_admissibility(*g);
  if (!rep.ok()) throw AdmissibilityError(rep.text());
  return g;
}

// ---------------------------------------------------------------- macro domain

enum class MacroBoundary { Top, Bottom, Lateral, Sigma };

struct MacroDomain {
  int dim = 2;
  std::vector<int> a, b;  // Sigma = prod (a_k, b_k)
  double H = 1.0;
  int mesh_resolution = 8;

  void validate() const {
    if (dim != 2 && dim != 3) throw ConfigError("macro dim must be 2 or 3");
    if (static_cast<int>(a.size()) != dim - 1 || static_cast<int>(b.size()) != dim - 1)
      throw ConfigError("Sigma extent needs dim-1 components");
    for (int k = 0; k < dim - 1; ++k)
      if (!(a[k] < b[k])) throw ConfigError("Sigma extent requires a < b");
    if (!(H > 0)) throw ConfigError("H must be positive");
    if (mesh_resolution < 1) throw ConfigError("mesh_resolution must be positive");
  }
  int cells(int k) const { return (b[k] - a[k]) * mesh_resolution; }
  int vertical_cells() const { return std::max(2, static_cast<int>(std::lround(H * mesh_resolution))); }
  double hx() const { return 1.0 / mesh_resolution; }
  double hz() const { return H / vertical_cells(); }

  // Classify a boundary point of the closed box Sigma x [-H, H]; interface points are Sigma.
  MacroBoundary classify(const std::array<double, 3>& x) const {
    const double eps = 1e-12;
    for (int k = 0; k < dim - 1; ++k)
      if (std::abs(x[k] - a[k]) < eps || std::abs(x[k] - b[k]) < eps) return MacroBoundary::Lateral;
    double z = x[dim - 1];
    if (std::abs(z - H) < eps) return MacroBoundary::Top;
    if (std::abs(z + H) < eps) return MacroBoundary::Bottom;
    if (std::abs(z) < eps) return MacroBoundary::Sigma;
    throw ConfigError("point is not on the boundary or Sigma");
  }
};

inline MacroDomain parse_macro_domain(const nlohmann::json& j, int dim) {
  MacroDomain m;
  m.dim = dim;
  try {
    m.a = j.value("a", std::vector<int>(dim - 1, 0));
    m.b = j.value("b", std::vector<int>(dim - 1, 1));
    m.H = j.value("H", 1.0);
    m.mesh_resolution = j.value("mesh_resolution", 8);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("macro domain: ") + e.what());
  }
  m.validate();
  return m;
}

}  // namespace memhom
