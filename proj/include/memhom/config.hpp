#pragma once
/**
 * @file config.hpp
 * @brief Run configuration (JSON or a TOML subset), the on-disk cell cache and
 * the coefficient documents written by the command-line tool.
 *
 * Sections: [geometry] [micro_tensor] [discretization] [macro] [forcing] [run],
 * plus [refine] and [reconstruct] for the corresponding subcommands.
 */

#include <json.hpp>

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "memhom/cell_elastic.hpp"
#include "memhom/cell_stokes.hpp"
#include "memhom/errors.hpp"
#include "memhom/geometry.hpp"
#include "memhom/macro.hpp"

namespace memhom {

using json = nlohmann::json;

// ------------------------------------------------------------- TOML subset

// Tables, arrays of tables, dotted keys, strings, numbers, booleans, arrays
// (may span lines) and inline tables. Dates and multi-line strings are not supported.
class TomlReader {
 public:
  static json parse(const std::string& text) {
    TomlReader r(text);
    return r.document();
  }

 private:
  explicit TomlReader(const std::string& t) : s_(t) {}

  json document() {
    json root = json::object();
    json* table = &root;
    while (true) {
      skip_ws_lines();
      if (i_ >= s_.size()) break;
      if (s_[i_] == '[') {
        bool array = i_ + 1 < s_.size() && s_[i_ + 1] == '[';
        i_ += array ? 2 : 1;
        auto path = key_path();
        expect(']');
        if (array) expect(']');
        end_of_line();
        table = &root;
        for (size_t k = 0; k + 1 < path.size(); ++k) table = &descend(*table, path[k]);
        json& last = (*table)[path.back()];
        if (array) {
          if (last.is_null()) last = json::array();
          if (!last.is_array()) fail("'" + path.back() + "' is not an array of tables");
          last.push_back(json::object());
          table = &last.back();
        } else {
          if (last.is_null()) last = json::object();
          if (!last.is_object()) fail("'" + path.back() + "' redefined as a table");
          table = &last;
        }
        continue;
      }
      assign(*table);
      end_of_line();
    }
    return root;
  }

  json& descend(json& t, const std::string& k) {
    json& n = t[k];
    if (n.is_null()) n = json::object();
    if (n.is_array() && !n.empty() && n.back().is_object()) return n.back();
    if (!n.is_object()) fail("'" + k + "' is not a table");
    return n;
  }

  void assign(json& table) {
    auto path = key_path();
    expect('=');
    json* t = &table;
    for (size_t k = 0; k + 1 < path.size(); ++k) t = &descend(*t, path[k]);
    if (t->contains(path.back())) fail("duplicate key '" + path.back() + "'");
    (*t)[path.back()] = value();
  }

  std::vector<std::string> key_path() {
    std::vector<std::string> p;
    do {
      skip_blank();
      p.push_back(key());
      skip_blank();
    } while (eat('.'));
    return p;
  }

  std::string key() {
    if (i_ < s_.size() && (s_[i_] == '"' || s_[i_] == '\'')) return string_value();
    size_t j = i_;
    while (j < s_.size() && (std::isalnum(static_cast<unsigned char>(s_[j])) || s_[j] == '_' || s_[j] == '-')) ++j;
    if (j == i_) fail("expected a key");
    std::string k = s_.substr(i_, j - i_);
    i_ = j;
    return k;
  }

  json value() {
    skip_blank();
    if (i_ >= s_.size()) fail("expected a value");
    char c = s_[i_];
    if (c == '"' || c == '\'') return string_value();
    if (c == '[') {
      ++i_;
      json a = json::array();
      while (true) {
        skip_ws_lines();
        if (eat(']')) return a;
        a.push_back(value());
        skip_ws_lines();
        if (eat(']')) return a;
        expect(',');
      }
    }
    if (c == '{') {
      ++i_;
      json t = json::object();
      skip_blank();
      if (eat('}')) return t;
      while (true) {
        assign(t);
        skip_blank();
        if (eat('}')) return t;
        expect(',');
      }
    }
    size_t j = i_;
    while (j < s_.size() && !std::isspace(static_cast<unsigned char>(s_[j])) && s_[j] != ',' && s_[j] != ']' &&
           s_[j] != '}' && s_[j] != '#')
      ++j;
    std::string tok = s_.substr(i_, j - i_);
    i_ = j;
    if (tok == "true") return true;
    if (tok == "false") return false;
    std::string num;
    for (char ch : tok)
      if (ch != '_') num += ch;
    if (num == "inf" || num == "+inf") return std::numeric_limits<double>::infinity();
    if (num == "-inf") return -std::numeric_limits<double>::infinity();
    try {
      size_t used = 0;
      bool integral = num.find_first_of(".eE") == std::string::npos;
      if (integral) {
        long long v = std::stoll(num, &used, 10);
        if (used == num.size()) return v;
      } else {
        double v = std::stod(num, &used);
        if (used == num.size()) return v;
      }
    } catch (const std::exception&) {
    }
    fail("bad value '" + tok + "'");
  }

  std::string string_value() {
    char q = s_[i_++];
    std::string out;
    while (i_ < s_.size() && s_[i_] != q) {
      char c = s_[i_++];
      if (c == '\n') fail("unterminated string");
      if (q == '"' && c == '\\' && i_ < s_.size()) {
        char e = s_[i_++];
        switch (e) {
          case 'n': out += '\n'; break;
          case 't': out += '\t'; break;
          case '"': out += '"'; break;
          case '\\': out += '\\'; break;
          default: fail(std::string("unsupported escape \\") + e);
        }
        continue;
      }
      out += c;
    }
    if (i_ >= s_.size()) fail("unterminated string");
    ++i_;
    return out;
  }

  void skip_blank() {
    while (i_ < s_.size() && (s_[i_] == ' ' || s_[i_] == '\t')) ++i_;
  }
  void skip_comment() {
    if (i_ < s_.size() && s_[i_] == '#')
      while (i_ < s_.size() && s_[i_] != '\n') ++i_;
  }
  void skip_ws_lines() {
    while (true) {
      while (i_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[i_]))) ++i_;
      if (i_ < s_.size() && s_[i_] == '#') {
        skip_comment();
        continue;
      }
      return;
    }
  }
  void end_of_line() {
    skip_blank();
    skip_comment();
    if (i_ < s_.size() && s_[i_] == '\r') ++i_;
    if (i_ < s_.size() && s_[i_] != '\n') fail("unexpected text after value");
  }
  bool eat(char c) {
    skip_blank();
    if (i_ < s_.size() && s_[i_] == c) {
      ++i_;
      return true;
    }
    return false;
  }
  void expect(char c) {
    if (!eat(c)) fail(std::string("expected '") + c + "'");
  }
  [[noreturn]] void fail(const std::string& what) const {
    int line = 1 + static_cast<int>(std::count(s_.begin(), s_.begin() + std::min(i_, s_.size()), '\n'));
    throw ConfigError("toml line " + std::to_string(line) + ": " + what);
  }

  const std::string& s_;
  size_t i_ = 0;
};

// JSON if the first significant character is '{', otherwise the TOML subset.
inline json parse_config_text(const std::string& text) {
  size_t k = text.find_first_not_of(" \t\r\n");
  if (k != std::string::npos && text[k] == '{') {
    try {
      return json::parse(text);
    } catch (const json::exception& e) {
      throw ConfigError(std::string("json: ") + e.what());
    }
  }
  return TomlReader::parse(text);
}

inline json load_config_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  json j = parse_config_text(ss.str());
  if (!j.is_object()) throw ConfigError("config root must be a table");
  return j;
}

// ------------------------------------------------------------ typed config

struct RunConfig {
  json raw;
  std::string base_dir = ".";
  GeometryDescriptor geometry;
  std::optional<MicroElasticTensor> micro;
  CellSolveOptions solve;
  bool bending = false;
  int gamma = 1;
  MacroDomain domain;
  double dt = 1e-2, T = 0.1;
  bool freeze_surface = false;
  std::string initial = "zero";
  unsigned seed = 1;
  double amplitude = 1.0;
  std::optional<SurfaceTensors> surface_override;
  json forcing;
  std::string output_dir = ".";
  std::string csv = "trajectory.csv";
  int snapshot_every = 0;
  std::string cache_dir;
  std::vector<int> refine_resolutions;
  std::string refine_quantity = "LG[0][0]";
};

namespace detail {

inline Mat read_matrix(const json& j, const std::string& what) {
  if (!j.is_array() || j.empty() || !j[0].is_array()) throw ConfigError(what + " must be an array of rows");
  Mat M(j.size(), j[0].size());
  for (size_t r = 0; r < j.size(); ++r) {
    if (j[r].size() != j[0].size()) throw ConfigError(what + " rows have different lengths");
    for (size_t c = 0; c < j[r].size(); ++c) M(r, c) = j[r][c].get<double>();
  }
  return M;
}

inline Vec read_vector(const json& j, int n, const std::string& what) {
  if (!j.is_array() || static_cast<int>(j.size()) != n)
    throw ConfigError(what + " must have " + std::to_string(n) + " components");
  Vec v(n);
  for (int k = 0; k < n; ++k) v[k] = j[k].get<double>();
  return v;
}

// In-plane surface tensor of order m = dim - 1: a number (m = 1), a Voigt
// matrix, or {lambda, mu}.
inline Tensor4 read_surface_tensor(const json& j, int m, const std::string& what) {
  Tensor4 T(m);
  if (j.is_number()) {
    if (m != 1) throw ConfigError(what + ": a scalar only describes a one-dimensional surface");
    T(0, 0, 0, 0) = j.get<double>();
    return T;
  }
  if (j.is_object()) {
    double lam = j.at("lambda").get<double>(), mu = j.at("mu").get<double>();
    if (m == 1) {
      T(0, 0, 0, 0) = lam + 2 * mu;
      return T;
    }
    return isotropic_tensor(m, lam, mu);
  }
  Mat C = read_matrix(j, what);
  if (m == 1) {
    if (C.rows() != 1 || C.cols() != 1) throw ConfigError(what + ": expected a 1x1 matrix");
    T(0, 0, 0, 0) = C(0, 0);
    return T;
  }
  try {
    return tensor_from_voigt(m, C);
  } catch (const ShapeError& e) {
    throw ConfigError(what + ": " + e.what());
  }
}

inline MicroElasticTensor read_micro_tensor(const json& j, int dim, const std::string& base) {
  std::string type = j.value("type", std::string("isotropic"));
  MicroElasticTensor A;
  if (type == "isotropic") {
    A = MicroElasticTensor::isotropic(dim, j.at("lambda").get<double>(), j.at("mu").get<double>());
  } else if (type == "voigt") {
    try {
      A = MicroElasticTensor::from_voigt(dim, read_matrix(j.at("matrix"), "micro_tensor.matrix"));
    } catch (const ShapeError& e) {
      throw ConfigError(std::string("micro_tensor: ") + e.what());
    }
  } else if (type == "table") {
    std::filesystem::path p = j.at("file").get<std::string>();
    if (p.is_relative()) p = std::filesystem::path(base) / p;
    A = read_elastic_table(p.string());
  } else {
    throw ConfigError("micro_tensor.type must be isotropic, voigt or table");
  }
  A.validate();
  return A;
}

}  // namespace detail

// Command-line overrides, applied to the raw tree before typing.
struct ConfigOverrides {
  std::optional<int> dim, gamma, resolution;
  std::optional<double> tol;
};

inline void apply_overrides(json& j, const ConfigOverrides& o) {
  if (o.dim) j["geometry"]["dim"] = *o.dim;
  if (o.gamma) j["macro"]["gamma"] = *o.gamma;
  if (o.resolution) j["geometry"]["resolution"] = *o.resolution;
  if (o.tol) j["discretization"]["tol"] = *o.tol;
}

inline RunConfig parse_run_config(json j, const std::string& base_dir = ".") {
  RunConfig c;
  c.base_dir = base_dir;
  try {
    if (!j.contains("geometry")) throw ConfigError("config needs a [geometry] section");
    c.geometry = parse_geometry_descriptor(j["geometry"]);
    if (c.geometry.dim != 2 && c.geometry.dim != 3) throw ConfigError("geometry.dim must be 2 or 3");
    if (c.geometry.resolution < 2) throw ConfigError("geometry.resolution must be at least 2");
    if (!c.geometry.mask_file.empty() && std::filesystem::path(c.geometry.mask_file).is_relative())
      c.geometry.mask_file = (std::filesystem::path(base_dir) / c.geometry.mask_file).string();
    const int d = c.geometry.dim;

    if (j.contains("micro_tensor")) c.micro = detail::read_micro_tensor(j["micro_tensor"], d, base_dir);

    json macro = j.value("macro", json::object());
    c.gamma = macro.value("gamma", 1);
    if (c.gamma != 1 && c.gamma != 3) throw ConfigError("macro.gamma must be 1 or 3");

    json disc = j.value("discretization", json::object());
    c.solve.tol = disc.value("tol", 1e-10);
    c.solve.max_iter = disc.value("max_iter", 50000);
    std::string method = disc.value("method", std::string("auto"));
    if (method == "auto") c.solve.method = SaddleMethod::Auto;
    else if (method == "direct") c.solve.method = SaddleMethod::Direct;
    else if (method == "iterative") c.solve.method = SaddleMethod::Iterative;
    else throw ConfigError("discretization.method must be auto, direct or iterative");
    if (!(c.solve.tol > 0)) throw ConfigError("discretization.tol must be positive");
    c.bending = disc.value("bending", c.gamma == 3);

    c.domain = parse_macro_domain(macro, d);
    c.dt = macro.value("dt", 1e-2);
    c.T = macro.value("T", 0.1);
    if (!(c.dt > 0)) throw ConfigError("macro.dt must be positive");
    if (!(c.T >= 0)) throw ConfigError("macro.T must be non-negative");
    c.freeze_surface = macro.value("freeze_surface", false);
    c.initial = macro.value("initial", std::string("zero"));
    if (c.initial != "zero" && c.initial != "random") throw ConfigError("macro.initial must be zero or random");
    c.seed = macro.value("seed", 1u);
    c.amplitude = macro.value("amplitude", 1.0);
    if (macro.contains("elastic_override")) {
      const json& o = macro["elastic_override"];
      SurfaceTensors s;
      s.dim = d;
      if (o.contains("A")) {
        s.A = detail::read_surface_tensor(o["A"], d - 1, "elastic_override.A");
        s.has_membrane = true;
      }
      if (o.contains("a") || o.contains("b") || o.contains("c")) {
        s.a = detail::read_surface_tensor(o.at("a"), d - 1, "elastic_override.a");
        s.b = o.contains("b") ? detail::read_surface_tensor(o["b"], d - 1, "elastic_override.b") : Tensor4(d - 1);
        s.c = detail::read_surface_tensor(o.at("c"), d - 1, "elastic_override.c");
        s.has_plate = true;
      }
      c.surface_override = s;
    }
    c.forcing = j.value("forcing", json::object());
    parse_forcing(c.forcing, d);  // validate early

    json run = j.value("run", json::object());
    c.output_dir = run.value("output_dir", std::string("."));
    if (std::filesystem::path(c.output_dir).is_relative())
      c.output_dir = (std::filesystem::path(base_dir) / c.output_dir).lexically_normal().string();
    c.csv = run.value("csv", std::string("trajectory.csv"));
    c.snapshot_every = run.value("snapshot_every", 0);
    if (c.snapshot_every < 0) throw ConfigError("run.snapshot_every must be non-negative");
    c.cache_dir = run.value("cache_dir", std::string());

    json refine = j.value("refine", json::object());
    c.refine_resolutions = refine.value("resolutions", std::vector<int>{8, 16, 32});
    c.refine_quantity = refine.value("quantity", std::string("LG[0][0]"));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.raw = std::move(j);
  return c;
}

inline RunConfig load_run_config(const std::string& path, const ConfigOverrides& o = {}) {
  json j = load_config_file(path);
  apply_overrides(j, o);
  std::string base = std::filesystem::path(path).parent_path().string();
  return parse_run_config(std::move(j), base.empty() ? "." : base);
}

// ---------------------------------------------------------------- cache

inline std::string hex64(uint64_t h) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

inline uint64_t fnv1a(const void* data, size_t n, uint64_t h = 1469598103934665603ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) h = (h ^ p[i]) * 1099511628211ull;
  return h;
}

inline std::string micro_tensor_key(const MicroElasticTensor& A) {
  uint64_t h = 1469598103934665603ull;
  for (const auto& t : A.table()) h = fnv1a(t.data.data(), t.data.size() * sizeof(double), h);
  return hex64(h);
}

// Cell solutions on disk, keyed by geometry hash (mask, resolution, dim).
// Disabled when no directory is given.
class CellCache {
 public:
  explicit CellCache(std::string dir = {}) : dir_(std::move(dir)) {}

  // Directory from the config, else MEMHOM_CACHE_DIR, else disabled.
  static CellCache resolve(const std::string& configured) {
    if (!configured.empty()) return CellCache(configured);
    if (const char* e = std::getenv("MEMHOM_CACHE_DIR"); e && *e) return CellCache(e);
    return CellCache();
  }

  bool enabled() const { return !dir_.empty(); }
  const std::string& dir() const { return dir_; }

  std::string stokes_key(const CellGeometry& g) const { return "stokes_" + g.hash(); }
  std::string elastic_key(const CellGeometry& g, const MicroElasticTensor& A, bool bending) const {
    return "elastic_" + g.hash() + "_" + micro_tensor_key(A) + (bending ? "_b" : "");
  }

  std::optional<StokesCellSolutionSet> load_stokes(std::shared_ptr<const CellGeometry> g,
                                                   const CellSolveOptions& o) const {
    json hdr;
    std::vector<Vec> f;
    if (!read(stokes_key(*g), g->hash(), o, hdr, f)) return std::nullopt;
    const int d = g->dim();
    if (static_cast<int>(f.size()) != 2 * d + 4 * (d - 1) + 2) return std::nullopt;
    StokesCellSolutionSet s;
    s.geom = g;
    size_t k = 0;
    auto take = [&](FieldKind kind) {
      CellField c;
      c.kind = kind;
      c.geom = g;
      c.values = std::move(f[k++]);
      check_layout(c);
      return c;
    };
    for (int i = 0; i < d; ++i) s.qG.push_back(take(FieldKind::Velocity));
    for (int i = 0; i < d; ++i) s.piG.push_back(take(FieldKind::Pressure));
    for (int i = 0; i < d - 1; ++i) s.qP.push_back(take(FieldKind::Velocity));
    for (int i = 0; i < d - 1; ++i) s.piP.push_back(take(FieldKind::Pressure));
    for (int i = 0; i < d - 1; ++i) s.qM.push_back(take(FieldKind::Velocity));
    for (int i = 0; i < d - 1; ++i) s.piM.push_back(take(FieldKind::Pressure));
    s.q3 = take(FieldKind::Velocity);
    s.pi3 = take(FieldKind::Pressure);
    s.stats = stats_from(hdr);
    return s;
  }

  void store_stokes(const StokesCellSolutionSet& s, const CellSolveOptions& o) const {
    std::vector<const Vec*> f;
    for (auto* group : {&s.qG, &s.piG, &s.qP, &s.piP, &s.qM, &s.piM})
      for (const auto& c : *group) f.push_back(&c.values);
    f.push_back(&s.q3.values);
    f.push_back(&s.pi3.values);
    write(stokes_key(*s.geom), s.geom->hash(), o, s.stats, {}, f);
  }

  std::optional<ElasticCellSolutionSet> load_elastic(std::shared_ptr<const CellGeometry> g,
                                                     const MicroElasticTensor& A, bool bending,
                                                     const CellSolveOptions& o) const {
    json hdr;
    std::vector<Vec> f;
    if (!read(elastic_key(*g, A, bending), g->hash(), o, hdr, f)) return std::nullopt;
    const int d = g->dim();
    if (static_cast<int>(f.size()) != 2 * d * d) return std::nullopt;
    ElasticCellSolutionSet s;
    s.geom = g;
    s.tensor = A;
    s.num_rotations = hdr.value("num_rotations", 0);
    s.chi.resize(d * d);
    s.chiB.resize(d * d);
    for (int n = 0; n < 2 * d * d; ++n) {
      CellField c;
      c.kind = FieldKind::Displacement;
      c.geom = g;
      c.values = std::move(f[n]);
      if (c.values.size()) check_layout(c);
      (n < d * d ? s.chi[n] : s.chiB[n - d * d]) = std::move(c);
    }
    s.stats = stats_from(hdr);
    return s;
  }

  void store_elastic(const ElasticCellSolutionSet& s, bool bending, const CellSolveOptions& o) const {
    std::vector<const Vec*> f;
    Vec empty;
    const int d = s.dim();
    for (int n = 0; n < d * d; ++n) f.push_back(n < static_cast<int>(s.chi.size()) ? &s.chi[n].values : &empty);
    for (int n = 0; n < d * d; ++n) f.push_back(n < static_cast<int>(s.chiB.size()) ? &s.chiB[n].values : &empty);
    write(elastic_key(*s.geom, s.tensor, bending), s.geom->hash(), o, s.stats, {{"num_rotations", s.num_rotations}}, f);
  }

 private:
  static constexpr char kMagic[8] = {'M', 'E', 'M', 'H', 'O', 'M', 'C', '1'};

  std::string path(const std::string& key) const { return (std::filesystem::path(dir_) / (key + ".bin")).string(); }

  static json options_json(const CellSolveOptions& o) {
    return {{"tol", o.tol}, {"max_iter", o.max_iter}, {"method", static_cast<int>(o.method)}};
  }
  static SolveStats stats_from(const json& h) {
    SolveStats st;
    st.method = h.value("method", std::string());
    st.iterations = h.value("iterations", 0);
    st.residual = h.value("residual", 0.0);
    st.continuity_residual = h.value("continuity_residual", 0.0);
    return st;
  }

  bool read(const std::string& key, const std::string& hash, const CellSolveOptions& o, json& hdr,
            std::vector<Vec>& fields) const {
    if (!enabled()) return false;
    std::ifstream in(path(key), std::ios::binary);
    if (!in) return false;
    char magic[8];
    uint64_t len = 0;
    if (!in.read(magic, 8) || std::string(magic, 8) != std::string(kMagic, 8)) return false;
    if (!in.read(reinterpret_cast<char*>(&len), sizeof len) || len > (1u << 20)) return false;
    std::string text(len, '\0');
    if (!in.read(text.data(), static_cast<std::streamsize>(len))) return false;
    try {
      hdr = json::parse(text);
    } catch (const json::exception&) {
      return false;
    }
    if (hdr.value("hash", std::string()) != hash || hdr.value("options", json()) != options_json(o)) return false;
    uint64_t count = hdr.value("fields", 0ull);
    fields.assign(count, Vec());
    for (auto& v : fields) {
      uint64_t n = 0;
      if (!in.read(reinterpret_cast<char*>(&n), sizeof n) || n > (1ull << 34)) return false;
      v.resize(static_cast<Eigen::Index>(n));
      if (n && !in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double))))
        return false;
    }
    return true;
  }

  void write(const std::string& key, const std::string& hash, const CellSolveOptions& o, const SolveStats& st,
             json extra, const std::vector<const Vec*>& fields) const {
    if (!enabled()) return;
    std::error_code ec;
    std::filesystem::create_directories(dir_, ec);
    if (ec) throw Error("cannot create cache directory '" + dir_ + "': " + ec.message());
    json hdr = extra.is_null() ? json::object() : extra;
    hdr["hash"] = hash;
    hdr["options"] = options_json(o);
    hdr["fields"] = fields.size();
    hdr["method"] = st.method;
    hdr["iterations"] = st.iterations;
    hdr["residual"] = st.residual;
    hdr["continuity_residual"] = st.continuity_residual;
    std::string text = hdr.dump();
    uint64_t len = text.size();
    // Write then rename, so a concurrent reader never sees a partial file.
    std::string tmp = path(key) + ".tmp" + std::to_string(static_cast<long>(::getpid()));
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out) throw Error("cannot write cache file '" + tmp + "'");
      out.write(kMagic, 8);
      out.write(reinterpret_cast<const char*>(&len), sizeof len);
      out.write(text.data(), static_cast<std::streamsize>(len));
      for (const Vec* v : fields) {
        uint64_t n = static_cast<uint64_t>(v->size());
        out.write(reinterpret_cast<const char*>(&n), sizeof n);
        out.write(reinterpret_cast<const char*>(v->data()), static_cast<std::streamsize>(n * sizeof(double)));
      }
      if (!out) throw Error("short write to cache file '" + tmp + "'");
    }
    std::filesystem::rename(tmp, path(key), ec);
    if (ec) throw Error("cannot move cache file into place: " + ec.message());
  }

  std::string dir_;
};

// -------------------------------------------------------------- documents

inline json matrix_json(const Mat& M) {
  json a = json::array();
  for (int r = 0; r < M.rows(); ++r) {
    json row = json::array();
    for (int c = 0; c < M.cols(); ++c) row.push_back(M(r, c));
    a.push_back(row);
  }
  return a;
}

inline json tensor_json(const Tensor4& T) {
  json a = json::array();
  for (int i = 0; i < T.dim; ++i) {
    json ai = json::array();
    for (int j = 0; j < T.dim; ++j) {
      json aj = json::array();
      for (int k = 0; k < T.dim; ++k) {
        json ak = json::array();
        for (int l = 0; l < T.dim; ++l) ak.push_back(T(i, j, k, l));
        aj.push_back(ak);
      }
      ai.push_back(aj);
    }
    a.push_back(ai);
  }
  return a;
}

inline Mat matrix_from_json(const json& j) { return detail::read_matrix(j, "matrix"); }

inline Tensor4 tensor_from_json(const json& j) {
  Tensor4 T(static_cast<int>(j.size()));
  for (int i = 0; i < T.dim; ++i)
    for (int j2 = 0; j2 < T.dim; ++j2)
      for (int k = 0; k < T.dim; ++k)
        for (int l = 0; l < T.dim; ++l) T(i, j2, k, l) = j[i][j2][k][l].get<double>();
  return T;
}

inline json stats_json(const SolveStats& s) {
  return {{"method", s.method}, {"iterations", s.iterations}, {"residual", s.residual},
          {"continuity_residual", s.continuity_residual}};
}

inline json fluid_json(const FluidInterfaceCoefficients& c) {
  const char* sg[2] = {"+", "-"};
  json j;
  j["dim"] = c.dim;
  j["geometry_hash"] = c.geometry_hash;
  j["resolution"] = c.resolution;
  j["LG"] = matrix_json(c.LG);
  for (int a = 0; a < 2; ++a) {
    j["L"][sg[a]] = matrix_json(c.L[a]);
    j["K"][sg[a]] = matrix_json(c.K[a]);
    j["M"][sg[a]] = matrix_json(c.M[a]);
    for (int b = 0; b < 2; ++b) j["B"][std::string(sg[a]) + sg[b]] = matrix_json(c.B[a][b]);
  }
  j["stats"] = stats_json(c.stats);
  return j;
}

inline FluidInterfaceCoefficients fluid_from_json(const json& j) {
  const char* sg[2] = {"+", "-"};
  FluidInterfaceCoefficients c;
  try {
    c.dim = j.at("dim").get<int>();
    c.geometry_hash = j.value("geometry_hash", std::string());
    c.resolution = j.value("resolution", 0);
    c.LG = matrix_from_json(j.at("LG"));
    for (int a = 0; a < 2; ++a) {
      c.L[a] = matrix_from_json(j.at("L").at(sg[a]));
      for (int b = 0; b < 2; ++b) c.B[a][b] = matrix_from_json(j.at("B").at(std::string(sg[a]) + sg[b]));
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("fluid coefficient document: ") + e.what());
  }
  derive_K_M(c);
  return c;
}

inline json elastic_json(const ElasticEffectiveTensors& T) {
  json j;
  j["dim"] = T.dim;
  j["solid_volume"] = T.solid_volume;
  j["Astar"] = tensor_json(T.Astar);
  j["Astar_voigt"] = matrix_json(voigt_matrix(T.Astar));
  j["Astar_energy"] = tensor_json(T.Astar_energy);
  if (T.has_plate) {
    j["a"] = tensor_json(T.a);
    j["b"] = tensor_json(T.b);
    j["c"] = tensor_json(T.c);
  }
  return j;
}

inline ElasticEffectiveTensors elastic_from_json(const json& j) {
  ElasticEffectiveTensors T;
  try {
    T.dim = j.at("dim").get<int>();
    T.solid_volume = j.value("solid_volume", 0.0);
    T.Astar = tensor_from_json(j.at("Astar"));
    T.Astar_energy = tensor_from_json(j.at("Astar_energy"));
    if (j.contains("a")) {
      T.a = tensor_from_json(j["a"]);
      T.b = tensor_from_json(j.at("b"));
      T.c = tensor_from_json(j.at("c"));
      T.has_plate = true;
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("elastic tensor document: ") + e.what());
  }
  return T;
}

// Deterministic text form: fixed key order (nlohmann sorts object keys) and
// shortest round-trip doubles.
inline std::string dump_document(const json& j) { return j.dump(2) + "\n"; }

}  // namespace memhom
