// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "memhom/macro.hpp"
#include "memhom/verify.hpp"

using namespace memhom;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(int id, const std::string& name, const std::function<Outcome()>& fn) {
  auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = fn();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!o.pass) ++failures;
  std::printf("[%s] %2d %-28s %s (%.2f s)\n", o.pass ? "PASS" : "FAIL", id, name.c_str(), o.detail.c_str(), secs);
  std::fflush(stdout);
}

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::shared_ptr<const CellGeometry> ball(int dim, int N, double r) {
  GeometryDescriptor d;
  d.dim = dim;
  d.resolution = N;
  Shape s;
  s.type = "ball";
  s.centre = {0.5, dim == 3 ? 0.5 : 0.0, 0.0};
  s.radius = r;
  d.shapes.push_back(s);
  return build_cell_geometry(d);
}

std::shared_ptr<const CellGeometry> box(int dim, int N) {
  GeometryDescriptor d;
  d.dim = dim;
  d.resolution = N;
  Shape s;
  s.type = "box";
  s.centre = {0.5, dim == 3 ? 0.5 : 0.0, 0.0};
  s.half = {0.25, 0.25, dim == 3 ? 0.25 : 0.0};
  d.shapes.push_back(s);
  return build_cell_geometry(d);
}

// Crossed bars percolate laterally, so the membrane stiffness is nonzero.
std::shared_ptr<const CellGeometry> cross3(int N, double zc = 0.0) {
  GeometryDescriptor d;
  d.dim = 3;
  d.resolution = N;
  Shape a;
  a.type = "box";
  a.centre = {0.5, 0.5, zc};
  a.half = {0.5, 0.15, 0.2};
  Shape b = a;
  b.half = {0.15, 0.5, 0.2};
  d.shapes = {a, b};
  return build_cell_geometry(d);
}

const FluidInterfaceCoefficients& disc16() {
  static FluidInterfaceCoefficients c = assemble_fluid_coefficients(solve_stokes_cells(ball(2, 16, 0.3)));
  return c;
}

// 2D inclusions are isolated, so the surface tensors come from fixed values.
SurfaceTensors tensors2() {
  SurfaceTensors s;
  s.dim = 2;
  auto scalar = [](double v) {
    Tensor4 t(1);
    t(0, 0, 0, 0) = v;
    return t;
  };
  s.A = scalar(2.0);
  s.a = scalar(3.0);
  s.b = scalar(0.2);
  s.c = scalar(0.5);
  s.has_membrane = s.has_plate = true;
  return s;
}

MacroDomain domain2(int res) {
  MacroDomain d;
  d.dim = 2;
  d.a = {0};
  d.b = {1};
  d.H = 0.5;
  d.mesh_resolution = res;
  return d;
}

Forcing smooth_forcing() {
  return Forcing::expressions(2, {"sin(pi*x)*(1+z)", "-cos(pi*x)*(1-z) - 1"}, {"0.5*sin(2*pi*x)", "0"});
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// ------------------------------------------------------------------ criteria

Outcome completeness() {
  auto t0 = std::chrono::steady_clock::now();
  auto s = solve_stokes_cells(ball(2, 32, 0.3));
  double r = completeness_residual(s);
  double t = seconds_since(t0);
  return {r <= 1e-9 && t <= 10.0, fmt("residual=%.3e (tol 1e-9), runtime=%.2f s (limit 10 s)", r, t)};
}

Outcome coefficient_identities() {
  auto t0 = std::chrono::steady_clock::now();
  struct Case {
    const char* name;
    std::shared_ptr<const CellGeometry> g;
  };
  std::vector<Case> cases = {{"disc2d", ball(2, 32, 0.3)}, {"box2d", box(2, 32)},
                             {"ball3d", ball(3, 12, 0.3)}, {"box3d", box(3, 12)}};
  bool ok = true;
  double worst = 0;
  std::string bad;
  for (const auto& c : cases) {
    auto rep = identity_suite(assemble_fluid_coefficients(solve_stokes_cells(c.g)), 1e-9);
    for (const auto& chk : rep.checks) {
      if (chk.name.rfind("L_", 0) != 0 && chk.name.rfind("K_L", 0) != 0) continue;
      worst = std::max(worst, chk.scale > 0 ? chk.residual / chk.scale : chk.residual);
      if (!chk.pass) {
        ok = false;
        bad += std::string(" ") + c.name + ":" + chk.name;
      }
    }
  }
  double t = seconds_since(t0);
  ok = ok && t <= 120.0;
  return {ok, fmt("worst relative=%.3e (tol 1e-9), runtime=%.1f s (limit 120 s)", worst, t) + bad};
}

Outcome semidefinite() {
  bool ok = true;
  std::string d;
  for (int dim : {2, 3}) {
    auto c = dim == 2 ? disc16() : assemble_fluid_coefficients(solve_stokes_cells(ball(3, 8, 0.3)));
    auto p = probe_interface_form(c, 1000);
    ok = ok && p.min_random >= -1e-9 * p.scale && p.max_equal <= 1e-9 * p.scale;
    d += fmt("%gD: min random=%.3e max equal=%.3e scale=%.3e; ", dim, p.min_random, p.max_equal, p.scale);
  }
  return {ok, d + "tol 1e-9*scale"};
}

Outcome f1_chain() {
  std::vector<double> res;
  double worst_f1 = 0;
  for (int n : {8, 16, 32}) {
    MacroSystem M(domain2(n), disc16(), tensors2(), {1, 0.01, false});
    auto tr = solve_transient(M, smooth_forcing(), 0.05);
    for (size_t k = 1; k < tr.rows.size(); ++k) {
      const auto& R = tr.rows[k].residuals;
      worst_f1 = std::max(worst_f1, R.f1_scale > 0 ? R.f1 / R.f1_scale : R.f1);
    }
    res.push_back(tr.rows.back().residuals.normal_jump);
  }
  bool mono = res[1] < res[0] && res[2] < res[1];
  return {mono && worst_f1 <= 1e-8,
          fmt("jump residual %.3e > %.3e > %.3e, ", res[0], res[1], res[2]) +
              fmt("worst F1/scale=%.3e (tol 1e-8)", worst_f1)};
}

Outcome index_three() {
  auto s = solve_elastic_cells(cross3(8), MicroElasticTensor::isotropic(3, 1.2, 0.8));
  auto T = assemble_Astar(s);
  double scale = T.Astar.max_abs(), worst = 0;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k)
        for (int l = 0; l < 3; ++l)
          if (i == 2 || j == 2 || k == 2 || l == 2)
            worst = std::max({worst, std::abs(T.Astar(i, j, k, l)), std::abs(T.Astar_energy(i, j, k, l))});
  return {scale > 0 && worst <= 1e-9 * scale, fmt("max index-3 entry=%.3e, |A*|=%.3e (tol 1e-9 relative)", worst, scale)};
}

Outcome plate_jump_law() {
  std::vector<double> res;
  for (int n : {8, 16, 32}) {
    MacroSystem M(domain2(n), disc16(), tensors2(), {3, 0.01, false});
    res.push_back(solve_transient(M, smooth_forcing(), 0.05).rows.back().residuals.normal_jump);
  }
  double p1 = std::log2(res[0] / res[1]), p2 = std::log2(res[1] / res[2]);
  return {res[1] < res[0] && res[2] < res[1] && p2 >= 0.8,
          fmt("residual %.3e, %.3e, %.3e; orders %.2f ", res[0], res[1], res[2], p1) + fmt("%.2f (min 0.8)", p2)};
}

Outcome energy_stability() {
  bool ok = true;
  double worst = -1e300;
  for (int gamma : {1, 3})
    for (double dt : {1e-3, 1e-2, 1e-1}) {
      MacroSystem M(domain2(8), disc16(), tensors2(), {gamma, dt, false});
      // One step from random values gives admissible (divergence-free) data.
      MacroState s = M.step(M.random_state(42), Forcing::zero(2));
      double e = M.energy(s);
      if (!(e > 0)) ok = false;
      for (int n = 0; n < 200; ++n) {
        s = M.step(s, Forcing::zero(2));
        double en = M.energy(s);
        worst = std::max(worst, (en - e) / e);
        if (en > e * (1 + 1e-12)) ok = false;
        e = en;
      }
    }
  return {ok, fmt("largest relative step change=%.3e over 6 runs of 200 steps (must be <= 0)", worst)};
}

Outcome mass_exchange() {
  bool ok = true;
  std::string d;
  for (int gamma : {1, 3}) {
    MacroSystem M(domain2(8), disc16(), tensors2(), {gamma, 0.01, false});
    auto tr = solve_transient(M, Forcing::expressions(2, {"0", "-1"}, {"0", "0"}), 0.1);
    double imb = 0;
    for (const auto& r : tr.rows) imb = std::max(imb, r.flux.imbalance());
    double flux = std::abs(tr.rows.back().flux.sigma);
    ok = ok && flux >= 1e-6 && imb <= 1e-9;
    d += fmt("gamma=%g: |flux|=%.3e imbalance=%.3e; ", gamma, flux, imb);
  }
  return {ok, d + "need flux >= 1e-6, imbalance <= 1e-9"};
}

double mms_space(int n) {
  auto V = [](int k, const std::array<double, 3>& x) {
    return k == 0 ? std::sin(M_PI * x[0]) * std::cos(M_PI * x[1]) : -std::cos(M_PI * x[0]) * std::sin(M_PI * x[1]);
  };
  auto gradP = [](int k, const std::array<double, 3>& x) {
    return k == 0 ? -M_PI * std::sin(M_PI * x[0]) * std::cos(M_PI * x[1])
                  : -M_PI * std::cos(M_PI * x[0]) * std::sin(M_PI * x[1]);
  };
  FieldFn f = [&](int k, const std::array<double, 3>& x, double t) {
    return V(k, x) + t * M_PI * M_PI * V(k, x) + t * gradP(k, x);
  };
  FieldFn g = [&](int k, const std::array<double, 3>& x, double t) { return t * V(k, x); };
  BoxSides sides;
  for (auto& s : sides) s = {BoxSide::Dirichlet, BoxSide::Dirichlet};
  StokesBoxSolver S(BulkBox(2, {n, n, 1}, {1.0 / n, 1.0 / n, 1}, {0, 0, 0}, sides), 0.05);
  Vec v = Vec::Zero(S.box().grid().num_vel());
  double t = 0;
  for (int s = 0; s < 4; ++s) {
    t += 0.05;
    v = S.step(v, t, f, g).first;
  }
  double e = 0;
  for (int i = 0; i < v.size(); ++i) {
    double dv = v[i] - g(S.box().grid().vel_slot(i).first, S.box().grid().vel_position(i), t);
    e += S.box().mass()[i] * dv * dv;
  }
  return std::sqrt(e);
}

// Shear flow v = t^2 y e1 is exact in space, so only the time error remains.
double mms_time(double dt) {
  auto V = [](int k, const std::array<double, 3>& x) { return k == 0 ? x[1] : 0.0; };
  FieldFn f = [&](int k, const std::array<double, 3>& x, double t) { return 2 * t * V(k, x) + t * t; };
  FieldFn g = [&](int k, const std::array<double, 3>& x, double t) { return t * t * V(k, x); };
  BoxSides sides;
  for (auto& s : sides) s = {BoxSide::Dirichlet, BoxSide::Dirichlet};
  StokesBoxSolver S(BulkBox(2, {8, 8, 1}, {0.125, 0.125, 1}, {0, 0, 0}, sides), dt);
  Vec v = Vec::Zero(S.box().grid().num_vel());
  int steps = static_cast<int>(std::lround(1.0 / dt));
  for (int s = 1; s <= steps; ++s) v = S.step(v, s * dt, f, g).first;
  double e = 0;
  for (int i = 0; i < v.size(); ++i) {
    double dv = v[i] - g(S.box().grid().vel_slot(i).first, S.box().grid().vel_position(i), 1.0);
    e += S.box().mass()[i] * dv * dv;
  }
  return std::sqrt(e);
}

Outcome oracles_and_mms() {
  double worst = 0;
  for (auto g : {ball(2, 16, 0.3), ball(3, 8, 0.3)}) {
    auto s = solve_stokes_cells(g);
    for (const auto& r : compare_fluid_oracles(s, assemble_fluid_coefficients(s))) worst = std::max(worst, r.relative());
  }
  auto es = solve_elastic_cells(cross3(6, 1.0 / 6), MicroElasticTensor::isotropic(3, 1.2, 0.8));
  auto T = assemble_Astar(es);
  assemble_plate_tensors(es, T);
  for (const auto& r : compare_elastic_oracles(es, T)) worst = std::max(worst, r.relative());

  double s8 = mms_space(8), s16 = mms_space(16), s32 = mms_space(32);
  double ps = std::log2(s16 / s32), ps0 = std::log2(s8 / s16);
  double t1 = mms_time(0.2), t2 = mms_time(0.1), t3 = mms_time(0.05);
  double pt = std::log2(t2 / t3), pt0 = std::log2(t1 / t2);
  bool ok = worst <= 1e-12 && std::min(ps, ps0) >= 1.8 && std::abs(pt - 1.0) <= 0.15 && std::abs(pt0 - 1.0) <= 0.2;
  return {ok, fmt("oracle worst relative=%.3e (tol 1e-12); ", worst) +
                  fmt("space orders %.2f %.2f (min 1.8); time orders %.2f %.2f (1 +- 0.2)", ps0, ps, pt0, pt)};
}

Outcome determinism() {
  fs::path dir = fs::temp_directory_path() / ("memhom_accept_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  bool ok = true;
  std::string d;
  for (const char* cfg : {"disc2d.toml", "cross3d.toml"}) {
    std::string text[2];
    for (int k = 0; k < 2; ++k) {
      fs::path out = dir / (std::string(cfg) + std::to_string(k) + ".json");
      std::string cmd = "env MEMHOM_CACHE_DIR='" + (dir / ("cache" + std::to_string(k))).string() + "' '" MEMHOM_CLI
                        "' solve-cells '" MEMHOM_SOURCE_DIR "/configs/" + cfg + "' --out '" + out.string() +
                        "' >/dev/null 2>&1";
      int rc = std::system(cmd.c_str());
      text[k] = slurp(out);
      if (rc != 0 || text[k].empty()) ok = false;
    }
    bool same = !text[0].empty() && text[0] == text[1];
    ok = ok && same;
    d += std::string(cfg) + (same ? " identical (" + std::to_string(text[0].size()) + " bytes); " : " differs; ");
  }
  fs::remove_all(dir);
  return {ok, d + "two cold caches each"};
}

}  // namespace

int main() {
  report(1, "completeness", completeness);
  report(2, "coefficient identities", coefficient_identities);
  report(3, "interface form semidefinite", semidefinite);
  report(4, "normal stress chain gamma=1", f1_chain);
  report(5, "index-3 vanishing of A*", index_three);
  report(6, "jump law gamma=3", plate_jump_law);
  report(7, "energy stability", energy_stability);
  report(8, "mass exchange", mass_exchange);
  report(9, "oracles and manufactured", oracles_and_mms);
  report(10, "determinism", determinism);
  std::printf("%d of 10 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
