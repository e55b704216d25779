// memhom: command-line driver for the cell problems, effective coefficients,
// identity checks and the macroscopic membrane/plate transients.
//
// Exit codes: 0 ok, 1 inadmissible geometry or failed check, 2 bad or missing
// config, 3 solver failure.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "memhom/config.hpp"
#include "memhom/verify.hpp"

using namespace memhom;
namespace fs = std::filesystem;

namespace {

struct CommonArgs {
  std::string config;
  std::optional<int> dim, gamma, resolution;
  std::optional<double> tol;
  bool as_json = false;
  std::string out;

  RunConfig load() const {
    if (!fs::exists(config)) throw ConfigError("config file '" + config + "' not found");
    ConfigOverrides o;
    o.dim = dim;
    o.gamma = gamma;
    o.resolution = resolution;
    o.tol = tol;
    return load_run_config(config, o);
  }
};

void add_common(CLI::App* sub, CommonArgs& a) {
  sub->add_option("config", a.config, "TOML or JSON run configuration")->required();
  sub->add_option("--dim", a.dim, "cell dimension (2 or 3)")->check(CLI::IsMember({2, 3}));
  sub->add_option("--gamma", a.gamma, "membrane scaling (1 or 3)")->check(CLI::IsMember({1, 3}));
  sub->add_option("--resolution", a.resolution, "voxels per unit length")->check(CLI::PositiveNumber);
  sub->add_option("--tol", a.tol, "linear solver tolerance")->check(CLI::PositiveNumber);
  sub->add_flag("--json", a.as_json, "machine-readable output");
  sub->add_option("--out", a.out, "write the main document to this file instead of stdout");
}

void emit(const CommonArgs& a, const std::string& text) {
  if (a.out.empty()) {
    std::cout << text;
    return;
  }
  fs::path p(a.out);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream f(a.out, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot write '" + a.out + "'");
  f << text;
}

// ------------------------------------------------------------ cell pipeline

struct CellResults {
  std::shared_ptr<const CellGeometry> geom;
  StokesCellSolutionSet stokes;
  FluidInterfaceCoefficients fluid;
  std::optional<ElasticCellSolutionSet> elastic;
  std::optional<ElasticEffectiveTensors> tensors;
};

CellResults solve_cells(const RunConfig& cfg, const CellCache& cache, bool want_elastic) {
  CellResults r;
  r.geom = build_cell_geometry(cfg.geometry);
  if (auto s = cache.load_stokes(r.geom, cfg.solve)) {
    std::cerr << "cells: cache hit " << cache.stokes_key(*r.geom) << '\n';
    r.stokes = std::move(*s);
  } else {
    r.stokes = solve_stokes_cells(r.geom, cfg.solve);
    cache.store_stokes(r.stokes, cfg.solve);
    std::cerr << "cells: solved " << cache.stokes_key(*r.geom) << '\n';
  }
  r.fluid = assemble_fluid_coefficients(r.stokes);
  if (want_elastic && cfg.micro) {
    cfg.micro->check_geometry(*r.geom);
    if (auto e = cache.load_elastic(r.geom, *cfg.micro, cfg.bending, cfg.solve)) {
      std::cerr << "cells: cache hit " << cache.elastic_key(*r.geom, *cfg.micro, cfg.bending) << '\n';
      r.elastic = std::move(*e);
    } else {
      r.elastic = solve_elastic_cells(r.geom, *cfg.micro, cfg.bending, cfg.solve);
      cache.store_elastic(*r.elastic, cfg.bending, cfg.solve);
      std::cerr << "cells: solved " << cache.elastic_key(*r.geom, *cfg.micro, cfg.bending) << '\n';
    }
    r.tensors = assemble_Astar(*r.elastic);
    if (cfg.bending) assemble_plate_tensors(*r.elastic, *r.tensors);
  }
  return r;
}

std::string document_key(const RunConfig& cfg, const CellGeometry& g) {
  std::string k = "coefficients_" + g.hash();
  if (cfg.micro) k += "_" + micro_tensor_key(*cfg.micro) + (cfg.bending ? "_b" : "");
  return k + ".json";
}

json coefficient_document(const RunConfig& cfg, const CellResults& r) {
  json doc;
  const CellGeometry& g = *r.geom;
  doc["geometry"] = {{"dim", g.dim()},
                     {"resolution", g.resolution()},
                     {"hash", g.hash()},
                     {"solid_voxels", g.count(Phase::Solid)},
                     {"fluid_voxels", g.count(Phase::Fluid)}};
  doc["completeness_residual"] = completeness_residual(r.stokes);
  doc["fluid"] = fluid_json(r.fluid);
  if (r.tensors) {
    doc["elastic"] = elastic_json(*r.tensors);
    doc["elastic"]["stats"] = stats_json(r.elastic->stats);
    doc["elastic"]["micro_tensor_key"] = micro_tensor_key(*cfg.micro);
  }
  return doc;
}

// ---------------------------------------------------------------- commands

int cmd_check_geometry(const CommonArgs& a) {
  RunConfig cfg = a.load();
  CellGeometry g = voxelize(cfg.geometry);
  auto rep = check_admissibility(g);
  if (a.as_json) {
    json j;
    j["admissible"] = rep.ok();
    j["hash"] = g.hash();
    j["dim"] = g.dim();
    j["resolution"] = g.resolution();
    j["solid_voxels"] = g.count(Phase::Solid);
    j["fluid_voxels"] = g.count(Phase::Fluid);
    j["violations"] = json::array();
    for (const auto& v : rep.violations)
      j["violations"].push_back({{"code", v.code}, {"message", v.message}, {"witness", v.witness}});
    j["warnings"] = rep.warnings;
    emit(a, dump_document(j));
  } else {
    std::ostringstream os;
    os << "geometry " << g.hash() << " dim " << g.dim() << " resolution " << g.resolution() << '\n';
    os << "solid voxels " << g.count(Phase::Solid) << ", fluid voxels " << g.count(Phase::Fluid) << '\n';
    os << (rep.ok() ? "admissible\n" : "not admissible\n") << rep.text();
    emit(a, os.str());
  }
  return rep.ok() ? 0 : 1;
}

int cmd_solve_cells(const CommonArgs& a) {
  RunConfig cfg = a.load();
  CellCache cache = CellCache::resolve(cfg.cache_dir);
  CellResults r = solve_cells(cfg, cache, true);
  std::string text = dump_document(coefficient_document(cfg, r));
  if (cache.enabled()) {
    std::ofstream f(fs::path(cache.dir()) / document_key(cfg, *r.geom), std::ios::binary | std::ios::trunc);
    f << text;
  }
  emit(a, text);
  return 0;
}

int cmd_coefficients(const CommonArgs& a) {
  RunConfig cfg = a.load();
  CellCache cache = CellCache::resolve(cfg.cache_dir);
  if (!cache.enabled()) {
    std::cerr << "coefficients: no cache directory (set MEMHOM_CACHE_DIR or run.cache_dir)\n";
    return 1;
  }
  CellGeometry g = voxelize(cfg.geometry);
  fs::path p = fs::path(cache.dir()) / document_key(cfg, g);
  std::ifstream f(p, std::ios::binary);
  if (!f) {
    std::cerr << "coefficients: nothing cached for geometry " << g.hash() << "; run solve-cells first\n";
    return 1;
  }
  std::stringstream ss;
  ss << f.rdbuf();
  emit(a, ss.str());
  return 0;
}

int cmd_verify(const CommonArgs& a) {
  RunConfig cfg = a.load();
  CellCache cache = CellCache::resolve(cfg.cache_dir);
  CellResults r = solve_cells(cfg, cache, true);
  const double tol = 1e-9;
  IdentityReport rep = identity_suite(r.fluid, tol);
  auto probes = probe_interface_form(r.fluid);
  rep.checks.push_back({"form_equal_triples", probes.max_equal, probes.scale, tol, probes.max_equal <= tol * probes.scale});
  double comp = completeness_residual(r.stokes);
  rep.checks.push_back({"completeness", comp, 1.0, tol, comp <= tol});
  for (const auto& o : compare_fluid_oracles(r.stokes, r.fluid))
    rep.checks.push_back({"oracle_" + o.id, o.max_abs_diff, o.scale, 1e-12, o.relative() <= 1e-12});
  if (r.elastic)
    for (const auto& o : compare_elastic_oracles(*r.elastic, *r.tensors))
      rep.checks.push_back({"oracle_" + o.id, o.max_abs_diff, o.scale, 1e-12, o.relative() <= 1e-12});
  emit(a, a.as_json ? dump_document(rep.to_json()) : rep.to_text());
  return rep.all_pass() ? 0 : 1;
}

void write_snapshot(const MacroSystem& M, const MacroState& s, const fs::path& dir) {
  char name[64];
  std::snprintf(name, sizeof name, "snapshot_%06d.csv", s.step);
  std::ofstream f(dir / name, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot write snapshot " + (dir / name).string());
  f << "x,y,w,u3,r3,uh\n";
  f.precision(12);
  for (const auto& p : M.sigma_profile(s))
    f << p.x[0] << ',' << (M.dim() == 3 ? p.x[1] : 0.0) << ',' << p.w << ',' << p.u3 << ',' << p.r3 << ',' << p.uh
      << '\n';
}

int cmd_solve_macro(const CommonArgs& a) {
  RunConfig cfg = a.load();
  CellCache cache = CellCache::resolve(cfg.cache_dir);
  const bool need_elastic = !cfg.surface_override;
  if (need_elastic && !cfg.micro)
    throw MissingCoefficient("solve-macro needs [micro_tensor] or macro.elastic_override");
  CellResults r = solve_cells(cfg, cache, need_elastic);
  SurfaceTensors st = cfg.surface_override ? *cfg.surface_override : surface_tensors(*r.tensors);
  MacroOptions opt;
  opt.gamma = cfg.gamma;
  opt.dt = cfg.dt;
  opt.freeze_surface = cfg.freeze_surface;
  MacroSystem M(cfg.domain, r.fluid, st, opt);
  Forcing forcing = parse_forcing(cfg.forcing, cfg.geometry.dim);
  MacroState init = cfg.initial == "random" ? M.random_state(cfg.seed, cfg.amplitude) : M.zero_state();

  fs::path outdir = cfg.output_dir;
  fs::create_directories(outdir);
  auto on_step = [&](const MacroState& s) {
    if (cfg.snapshot_every > 0 && s.step % cfg.snapshot_every == 0) write_snapshot(M, s, outdir);
  };
  Trajectory tr = solve_transient(M, forcing, cfg.T, &init, on_step);
  {
    std::ofstream f(outdir / cfg.csv, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot write " + (outdir / cfg.csv).string());
    write_trajectory_csv(f, tr);
  }
  const auto& last = tr.rows.back();
  char line[512];
  std::snprintf(line, sizeof line,
                "final step=%d t=%.6g gamma=%d energy=%.12e sigma_flux=%.12e leaving_plus=%.12e "
                "entering_minus=%.12e max_deflection=%.12e\n",
                last.step, last.t, cfg.gamma, last.energy, last.flux.sigma, last.flux.leaving_plus,
                last.flux.entering_minus, last.max_deflection);
  if (a.as_json) {
    json j = {{"step", last.step},
              {"t", last.t},
              {"gamma", cfg.gamma},
              {"energy", last.energy},
              {"sigma_flux", last.flux.sigma},
              {"leaving_plus", last.flux.leaving_plus},
              {"entering_minus", last.flux.entering_minus},
              {"max_deflection", last.max_deflection},
              {"csv", (outdir / cfg.csv).string()}};
    emit(a, dump_document(j));
  } else {
    emit(a, line);
  }
  return 0;
}

int cmd_refine(const CommonArgs& a, const std::string& quantity, const std::vector<int>& resolutions) {
  RunConfig cfg = a.load();
  std::string q = quantity.empty() ? cfg.refine_quantity : quantity;
  std::vector<int> res = resolutions.empty() ? cfg.refine_resolutions : resolutions;
  const MicroElasticTensor* micro = cfg.micro ? &*cfg.micro : nullptr;
  RefinementTable t = refinement_study(cfg.geometry, res, q, micro, cfg.solve);
  emit(a, a.as_json ? dump_document(t.to_json()) : t.to_text());
  return 0;
}

int cmd_reconstruct(const CommonArgs& a) {
  RunConfig cfg = a.load();
  CellCache cache = CellCache::resolve(cfg.cache_dir);
  json rc = cfg.raw.value("reconstruct", json::object());
  const int d = cfg.geometry.dim;
  CellResults r = solve_cells(cfg, cache, rc.contains("strain") || rc.contains("hessian"));
  auto vec = [&](const char* k) {
    return rc.contains(k) ? detail::read_vector(rc[k], d, std::string("reconstruct.") + k) : Vec(Vec::Zero(d));
  };
  Vec dtu = vec("dtu"), vp = vec("vplus"), vm = vec("vminus");
  std::vector<std::pair<std::string, CellField>> fields;
  fields.emplace_back("v_membrane", reconstruct_membrane_velocity(r.stokes, dtu, vp, vm));
  fields.emplace_back("p_membrane", reconstruct_membrane_pressure(r.stokes, dtu, vp, vm));
  json summary;
  summary["geometry_hash"] = r.geom->hash();
  summary["v_membrane_max"] = fields[0].second.values.cwiseAbs().maxCoeff();
  summary["p_membrane_max"] = fields[1].second.values.cwiseAbs().maxCoeff();
  if (rc.contains("strain") || rc.contains("hessian")) {
    if (!r.elastic) throw MissingCoefficient("displacement correctors need [micro_tensor]");
    Mat E = rc.contains("strain") ? detail::read_matrix(rc["strain"], "reconstruct.strain") : Mat(Mat::Zero(d - 1, d - 1));
    fields.emplace_back("u1", reconstruct_u1(*r.elastic, E));
    summary["u1_max"] = fields.back().second.values.cwiseAbs().maxCoeff();
    if (rc.contains("hessian")) {
      if (!cfg.bending) throw ConfigError("reconstruct.hessian needs discretization.bending = true");
      Mat Hs = detail::read_matrix(rc["hessian"], "reconstruct.hessian");
      fields.emplace_back("u2", reconstruct_u2(*r.elastic, E, Hs));
      summary["u2_max"] = fields.back().second.values.cwiseAbs().maxCoeff();
    }
  }
  fs::path vtk = rc.contains("vtk") ? fs::path(rc["vtk"].get<std::string>()) : fs::path("reconstruct.vtk");
  if (vtk.is_relative()) vtk = fs::path(cfg.output_dir) / vtk;
  if (vtk.has_parent_path()) fs::create_directories(vtk.parent_path());
  write_vtk(vtk.string(), fields);
  summary["vtk"] = vtk.string();
  emit(a, dump_document(summary));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"memhom: homogenized membranes and plates between Stokes flows"};
  app.require_subcommand(1);
  CommonArgs args;
  std::string quantity;
  std::vector<int> resolutions;

  auto* geo = app.add_subcommand("check-geometry", "voxelize the cell and check admissibility");
  auto* cells = app.add_subcommand("solve-cells", "solve the cell problems and print the coefficient document");
  auto* coef = app.add_subcommand("coefficients", "print the cached coefficient document");
  auto* ver = app.add_subcommand("verify-identities", "run the identity suite and brute-force oracles");
  auto* mac = app.add_subcommand("solve-macro", "run the macroscopic transient");
  auto* ref = app.add_subcommand("refine-study", "coefficient convergence under cell refinement");
  auto* rec = app.add_subcommand("reconstruct", "reconstruct microscale fields at one interface point");
  for (auto* s : {geo, cells, coef, ver, mac, ref, rec}) add_common(s, args);
  ref->add_option("--quantity", quantity, "selector such as LG[0][0] or Astar[0][0][0][0]");
  ref->add_option("--resolutions", resolutions, "increasing cell resolutions")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*geo) return cmd_check_geometry(args);
    if (*cells) return cmd_solve_cells(args);
    if (*coef) return cmd_coefficients(args);
    if (*ver) return cmd_verify(args);
    if (*mac) return cmd_solve_macro(args);
    if (*ref) return cmd_refine(args, quantity, resolutions);
    if (*rec) return cmd_reconstruct(args);
  } catch (const AdmissibilityError& e) {
    std::cerr << "inadmissible geometry:\n" << e.what() << '\n';
    return 1;
  } catch (const NoConvergence& e) {
    std::cerr << "solver failure: " << e.what() << '\n';
    return 3;
  } catch (const SingularBlock& e) {
    std::cerr << "solver failure: " << e.what() << '\n';
    return 3;
  } catch (const BlowUp& e) {
    std::cerr << "solver failure: " << e.what() << '\n';
    return 3;
  } catch (const IncompatibleRHS& e) {
    std::cerr << "solver failure: " << e.what() << '\n';
    return 3;
  } catch (const Error& e) {
    // Config, format, shape and missing-input errors.
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const json::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  }
  return 0;
}
