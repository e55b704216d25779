#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "memhom/config.hpp"

using namespace memhom;
namespace fs = std::filesystem;

namespace {

struct CmdResult {
  int rc = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() / (std::string("memhom_cli_") + info->name() + "_" + std::to_string(::getpid()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  // Runs the tool with MEMHOM_CACHE_DIR set to cache (empty: unset).
  CmdResult run(const std::string& args, const std::string& cache = "") const {
    fs::path err = dir_ / "stderr.txt";
    std::string env = cache.empty() ? "env -u MEMHOM_CACHE_DIR " : "env MEMHOM_CACHE_DIR='" + cache + "' ";
    std::string cmd = env + "'" MEMHOM_CLI "' " + args + " 2>'" + err.string() + "'";
    CmdResult r;
    FILE* p = popen(cmd.c_str(), "r");
    if (!p) return r;
    std::array<char, 4096> buf;
    size_t n;
    while ((n = fread(buf.data(), 1, buf.size(), p)) > 0) r.out.append(buf.data(), n);
    int status = pclose(p);
    r.rc = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.err = slurp(err);
    return r;
  }

  fs::path write(const std::string& name, const std::string& text) const {
    fs::path p = dir_ / name;
    std::ofstream(p) << text;
    return p;
  }

  static std::string cfg(const std::string& name) { return std::string(MEMHOM_SOURCE_DIR) + "/configs/" + name; }

  fs::path dir_;
};

const char* kSmall3d = R"([geometry]
dim = 3
resolution = 6
[[geometry.shapes]]
type = "box"
centre = [0.5, 0.5, 0.0]
half_extents = [0.5, 0.2, 0.25]
[[geometry.shapes]]
type = "box"
centre = [0.5, 0.5, 0.0]
half_extents = [0.2, 0.5, 0.25]
[micro_tensor]
lambda = 1.0
mu = 1.0
[macro]
mesh_resolution = 3
H = 0.5
dt = 0.05
T = 0.1
)";

}  // namespace

// ------------------------------------------------------------------ config

TEST(Toml, ParsesTablesArraysAndInlineTables) {
  json j = TomlReader::parse(R"(
# comment
title = "memhom"   # trailing comment
[geometry]
dim = 3
scale = 1.5e-2
flags = [true, false]
matrix = [
  [1, 2],   # row one
  [3, 4],
]
[[geometry.shapes]]
type = "ball"
[[geometry.shapes]]
type = "box"
[macro.elastic_override]
A = { lambda = 1, mu = 2 }
"quoted key" = 'literal \n'
)");
  EXPECT_EQ(j["title"], "memhom");
  EXPECT_EQ(j["geometry"]["dim"].get<int>(), 3);
  EXPECT_DOUBLE_EQ(j["geometry"]["scale"].get<double>(), 1.5e-2);
  EXPECT_EQ(j["geometry"]["matrix"][1][0].get<int>(), 3);
  EXPECT_EQ(j["geometry"]["shapes"].size(), 2u);
  EXPECT_EQ(j["geometry"]["shapes"][1]["type"], "box");
  EXPECT_EQ(j["macro"]["elastic_override"]["A"]["mu"].get<int>(), 2);
  EXPECT_EQ(j["macro"]["elastic_override"]["quoted key"], "literal \\n");
}

TEST(Toml, RejectsMalformedInput) {
  EXPECT_THROW(TomlReader::parse("a = = 1\n"), ConfigError);
  EXPECT_THROW(TomlReader::parse("a = 1\na = 2\n"), ConfigError);
  EXPECT_THROW(TomlReader::parse("a = \"open\n"), ConfigError);
  EXPECT_THROW(TomlReader::parse("[t\n"), ConfigError);
  EXPECT_THROW(TomlReader::parse("a = 1 2\n"), ConfigError);
  EXPECT_THROW(parse_config_text("{\"a\": }"), ConfigError);
}

TEST(Config, TomlAndJsonGiveTheSameRun) {
  auto a = load_run_config(std::string(MEMHOM_SOURCE_DIR) + "/configs/disc2d.toml");
  EXPECT_EQ(a.geometry.dim, 2);
  EXPECT_EQ(a.geometry.resolution, 32);
  EXPECT_EQ(a.gamma, 1);
  ASSERT_TRUE(a.surface_override.has_value());
  EXPECT_DOUBLE_EQ(a.surface_override->A(0, 0, 0, 0), 2.0);
  json j = a.raw;
  auto b = parse_run_config(parse_config_text(j.dump()), a.base_dir);
  EXPECT_EQ(b.geometry.resolution, a.geometry.resolution);
  EXPECT_EQ(b.forcing, a.forcing);
  EXPECT_EQ(b.output_dir, a.output_dir);
}

TEST(Config, OverridesAndValidation) {
  json j = load_config_file(std::string(MEMHOM_SOURCE_DIR) + "/configs/disc2d.toml");
  ConfigOverrides o;
  o.resolution = 16;
  o.gamma = 3;
  o.tol = 1e-8;
  apply_overrides(j, o);
  auto c = parse_run_config(j);
  EXPECT_EQ(c.geometry.resolution, 16);
  EXPECT_EQ(c.gamma, 3);
  EXPECT_TRUE(c.bending);
  EXPECT_DOUBLE_EQ(c.solve.tol, 1e-8);

  json bad = j;
  bad["macro"]["gamma"] = 2;
  EXPECT_THROW(parse_run_config(bad), ConfigError);
  bad = j;
  bad["discretization"]["method"] = "magic";
  EXPECT_THROW(parse_run_config(bad), ConfigError);
  bad = j;
  bad["forcing"]["plus"] = json::array({"sin(", "0"});
  EXPECT_THROW(parse_run_config(bad), ConfigError);
  bad = j;
  bad.erase("geometry");
  EXPECT_THROW(parse_run_config(bad), ConfigError);
  bad = j;
  bad["micro_tensor"] = {{"type", "voigt"}, {"matrix", {{1.0, 0.0}, {0.0, 1.0}}}};
  EXPECT_THROW(parse_run_config(bad), ConfigError);
  bad = j;
  bad["micro_tensor"] = {{"lambda", 1.0}, {"mu", -1.0}};
  EXPECT_THROW(parse_run_config(bad), ConfigError);
  EXPECT_THROW(load_config_file("/nonexistent/config.toml"), ConfigError);
}

TEST(Config, SurfaceTensorForms) {
  Tensor4 s = detail::read_surface_tensor(json(2.5), 1, "A");
  EXPECT_DOUBLE_EQ(s(0, 0, 0, 0), 2.5);
  Tensor4 iso = detail::read_surface_tensor(json{{"lambda", 1.0}, {"mu", 2.0}}, 2, "A");
  EXPECT_DOUBLE_EQ(iso(0, 0, 0, 0), 5.0);
  EXPECT_DOUBLE_EQ(iso(0, 1, 0, 1), 2.0);
  Tensor4 v = detail::read_surface_tensor(json::parse("[[4,1,0],[1,4,0],[0,0,1.5]]"), 2, "A");
  EXPECT_DOUBLE_EQ(v(1, 0, 1, 0), 1.5);
  EXPECT_THROW(detail::read_surface_tensor(json(1.0), 2, "A"), ConfigError);
}

TEST(Cache, RoundTripsCellSolutions) {
  fs::path dir = fs::temp_directory_path() / ("memhom_cache_rt_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  CellCache cache(dir.string());
  GeometryDescriptor d;
  d.dim = 2;
  d.resolution = 8;
  Shape s;
  s.type = "ball";
  s.centre = {0.5, 0.0, 0};
  s.radius = 0.3;
  d.shapes.push_back(s);
  auto g = build_cell_geometry(d);
  CellSolveOptions o;
  EXPECT_FALSE(cache.load_stokes(g, o).has_value());
  auto sol = solve_stokes_cells(g, o);
  cache.store_stokes(sol, o);
  auto back = cache.load_stokes(g, o);
  ASSERT_TRUE(back.has_value());
  EXPECT_TRUE(back->complete());
  EXPECT_EQ((back->q3.values - sol.q3.values).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ((back->piG[1].values - sol.piG[1].values).cwiseAbs().maxCoeff(), 0.0);
  CellSolveOptions other = o;
  other.tol = 1e-6;
  EXPECT_FALSE(cache.load_stokes(g, other).has_value());

  auto A = MicroElasticTensor::isotropic(2, 1.0, 1.0);
  auto es = solve_elastic_cells(g, A, true, o);
  cache.store_elastic(es, true, o);
  auto eback = cache.load_elastic(g, A, true, o);
  ASSERT_TRUE(eback.has_value());
  EXPECT_EQ((eback->chiB_of(0, 0).values - es.chiB_of(0, 0).values).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_FALSE(cache.load_elastic(g, A, false, o).has_value());
  fs::remove_all(dir);
}

TEST(Documents, CoefficientRoundTrip) {
  FluidInterfaceCoefficients c;
  c.dim = 2;
  c.LG = Mat::Identity(2, 2);
  for (int a = 0; a < 2; ++a) {
    c.L[a] = -0.5 * Mat::Identity(2, 2);
    for (int b = 0; b < 2; ++b) c.B[a][b] = Mat::Constant(2, 2, 0.1 * (a + 2 * b + 1));
  }
  derive_K_M(c);
  auto back = fluid_from_json(fluid_json(c));
  EXPECT_EQ(back.B[1][0], c.B[1][0]);
  EXPECT_EQ(back.K[1], c.K[1]);
  EXPECT_THROW(fluid_from_json(json{{"dim", 2}}), FormatError);
}

// --------------------------------------------------------------- commands

TEST_F(Cli, CheckGeometryExitCodes) {
  auto ok = run("check-geometry " + cfg("disc2d.toml"));
  EXPECT_EQ(ok.rc, 0) << ok.err;
  EXPECT_NE(ok.out.find("admissible"), std::string::npos);
  auto bad = run("check-geometry " + cfg("slab_touching.toml"));
  EXPECT_EQ(bad.rc, 1);
  EXPECT_NE(bad.out.find("touches S-"), std::string::npos);
  auto js = run("check-geometry --json " + cfg("slab_touching.toml"));
  EXPECT_EQ(js.rc, 1);
  EXPECT_FALSE(json::parse(js.out)["admissible"].get<bool>());
  EXPECT_EQ(run("check-geometry " + (dir_ / "missing.toml").string()).rc, 2);
  EXPECT_EQ(run("check-geometry " + write("bad.toml", "[geometry\n").string()).rc, 2);
  EXPECT_EQ(run("check-geometry --dim 4 " + cfg("disc2d.toml")).rc, 2);
  EXPECT_EQ(run("no-such-command").rc, 2);
}

TEST_F(Cli, SolveCellsWarmCacheIsIdentical) {
  std::string cache = (dir_ / "cache").string();
  auto a = run("solve-cells " + cfg("disc2d.toml") + " --resolution 16", cache);
  ASSERT_EQ(a.rc, 0) << a.err;
  EXPECT_NE(a.err.find("solved"), std::string::npos);
  auto b = run("solve-cells " + cfg("disc2d.toml") + " --resolution 16", cache);
  ASSERT_EQ(b.rc, 0);
  EXPECT_NE(b.err.find("cache hit"), std::string::npos);
  EXPECT_EQ(b.err.find("solved"), std::string::npos);
  EXPECT_EQ(a.out, b.out);
  json doc = json::parse(a.out);
  for (const char* k : {"LG", "B", "L", "K", "M"}) EXPECT_TRUE(doc["fluid"].contains(k)) << k;
  EXPECT_LE(doc["completeness_residual"].get<double>(), 1e-9);

  auto c = run("coefficients " + cfg("disc2d.toml") + " --resolution 16", cache);
  EXPECT_EQ(c.rc, 0);
  EXPECT_EQ(c.out, a.out);
  EXPECT_EQ(run("coefficients " + cfg("disc2d.toml") + " --resolution 16", (dir_ / "empty").string()).rc, 1);
}

TEST_F(Cli, GammaSelectsPlateProblems) {
  fs::path c = write("small.toml", kSmall3d);
  auto m = run("solve-cells --gamma 1 " + c.string());
  ASSERT_EQ(m.rc, 0) << m.err;
  json dm = json::parse(m.out);
  EXPECT_TRUE(dm["elastic"].contains("Astar"));
  EXPECT_FALSE(dm["elastic"].contains("a"));
  auto p = run("solve-cells --gamma 3 " + c.string());
  ASSERT_EQ(p.rc, 0) << p.err;
  json dp = json::parse(p.out);
  for (const char* k : {"Astar", "Astar_voigt", "a", "b", "c"}) EXPECT_TRUE(dp["elastic"].contains(k)) << k;
}

TEST_F(Cli, ColdCacheRunsAreByteIdentical) {
  fs::path c = write("small.toml", kSmall3d);
  auto a = run("solve-cells --gamma 3 " + c.string() + " --out " + (dir_ / "a.json").string(), (dir_ / "c1").string());
  auto b = run("solve-cells --gamma 3 " + c.string() + " --out " + (dir_ / "b.json").string(), (dir_ / "c2").string());
  ASSERT_EQ(a.rc, 0) << a.err;
  ASSERT_EQ(b.rc, 0) << b.err;
  std::string ta = slurp(dir_ / "a.json"), tb = slurp(dir_ / "b.json");
  EXPECT_FALSE(ta.empty());
  EXPECT_EQ(ta, tb);
}

TEST_F(Cli, VerifyIdentities) {
  auto r = run("verify-identities --json " + cfg("disc2d.toml") + " --resolution 16");
  ASSERT_EQ(r.rc, 0) << r.err << r.out;
  json j = json::parse(r.out);
  EXPECT_TRUE(j["all_pass"].get<bool>());
  bool has_oracle = false;
  for (const auto& c : j["checks"])
    if (c["name"] == "oracle_LG") has_oracle = true;
  EXPECT_TRUE(has_oracle);
}

TEST_F(Cli, SolverFailureExitsThree) {
  fs::path c = write("nc.toml", R"([geometry]
dim = 2
resolution = 16
[[geometry.shapes]]
type = "ball"
centre = [0.5, 0.0]
radius = 0.3
[discretization]
method = "iterative"
max_iter = 3
)");
  auto r = run("solve-cells " + c.string());
  EXPECT_EQ(r.rc, 3);
  EXPECT_NE(r.err.find("no convergence"), std::string::npos);
}

TEST_F(Cli, SolveMacroZeroForcingStaysZero) {
  std::string text = slurp(cfg("disc2d.toml"));
  text = text.substr(0, text.find("# Downward push"));
  text += "[run]\noutput_dir = \"" + (dir_ / "out").string() + "\"\n";
  fs::path c = write("zero.toml", text);
  auto r = run("solve-macro " + c.string() + " --resolution 16");
  ASSERT_EQ(r.rc, 0) << r.err;
  EXPECT_NE(r.out.find("energy=0.000000000000e+00"), std::string::npos) << r.out;
  std::istringstream csv(slurp(dir_ / "out" / "trajectory.csv"));
  std::string line;
  std::getline(csv, line);
  int rows = 0;
  while (std::getline(csv, line)) {
    ++rows;
    std::istringstream ls(line);
    std::string cell;
    int col = 0;
    while (std::getline(ls, cell, ',')) {
      if (col >= 2) EXPECT_EQ(std::stod(cell), 0.0) << line;
      ++col;
    }
  }
  EXPECT_EQ(rows, 21);
}

TEST_F(Cli, SolveMacroForcedRunsReportFluxAndDeflection) {
  for (const char* name : {"disc2d.toml", "plate2d.toml"}) {
    std::string text = slurp(cfg(name));
    text = text.substr(0, text.find("[run]")) + "[run]\noutput_dir = \"" + (dir_ / name).string() +
           "\"\nsnapshot_every = 10\n";
    text.erase(text.find("[refine]") == std::string::npos ? text.size() : text.find("[refine]"));
    fs::path c = write(std::string("forced_") + name, text);
    auto r = run("solve-macro --json " + c.string() + " --resolution 16");
    ASSERT_EQ(r.rc, 0) << r.err;
    json j = json::parse(r.out);
    EXPECT_GE(std::abs(j["sigma_flux"].get<double>()), 1e-6) << name;
    EXPECT_NEAR(j["leaving_plus"].get<double>(), j["entering_minus"].get<double>(), 1e-9);
    EXPECT_GT(j["max_deflection"].get<double>(), 0.0);
    EXPECT_TRUE(fs::exists(dir_ / name / "snapshot_000010.csv"));
    EXPECT_TRUE(fs::exists(dir_ / name / "trajectory.csv"));
  }
}

TEST_F(Cli, SolveMacroNeedsSurfaceTensors) {
  std::string text = slurp(cfg("disc2d.toml"));
  size_t a = text.find("[macro.elastic_override]");
  text.erase(a, text.find("# Downward push") - a);
  fs::path c = write("noelastic.toml", text);
  EXPECT_EQ(run("solve-macro " + c.string() + " --resolution 16").rc, 2);
}

TEST_F(Cli, RefineStudyAndReconstruct) {
  auto r = run("refine-study --json " + cfg("disc2d.toml") + " --resolutions 8,16,32 --quantity LG[1][1]");
  ASSERT_EQ(r.rc, 0) << r.err;
  json j = json::parse(r.out);
  EXPECT_EQ(j["rows"].size(), 3u);
  EXPECT_EQ(j["quantity"], "LG[1][1]");
  EXPECT_EQ(run("refine-study " + cfg("disc2d.toml") + " --resolutions 8,16 --quantity LG[1][1]").rc, 2);
  EXPECT_EQ(run("refine-study " + cfg("disc2d.toml") + " --resolutions 8,16,32 --quantity QQ").rc, 2);

  std::string text = slurp(cfg("cross3d.toml"));
  text = text.substr(0, text.find("[run]")) + "[run]\noutput_dir = \"" + (dir_ / "rec").string() + "\"\n" +
         text.substr(text.find("[reconstruct]"));
  fs::path c = write("rec.toml", text);
  auto rec = run("reconstruct " + c.string() + " --resolution 4");
  ASSERT_EQ(rec.rc, 0) << rec.err;
  json s = json::parse(rec.out);
  EXPECT_GT(s["v_membrane_max"].get<double>(), 0.0);
  EXPECT_GT(s["u2_max"].get<double>(), 0.0);
  EXPECT_TRUE(fs::exists(dir_ / "rec" / "reconstruct.vtk"));
}
