#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <ostream>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "bladca/errors.hpp"
#include "bladca/spectra.hpp"
#include "bladca/textdoc.hpp"

namespace bladca {

// ---------------------------------------------------------------------------
// Linear FRF entries
// ---------------------------------------------------------------------------

/// Frequency response entry of the linear interconnect (A/M/B entries,
/// package S-entries, pre/post dynamics inside a block). Tables interpolate
/// linearly on real and imaginary parts and are rejected outside their span.
struct FrfSpec {
  enum class Kind { constant, lowpass1, table };
  Kind kind = Kind::constant;
  Complex gain{0.0, 0.0};
  double fc_hz = 0.0;            // lowpass1 corner
  std::vector<double> freqs;     // table support (strictly increasing)
  std::vector<Complex> vals;

  static FrfSpec constant(Complex g) { return FrfSpec{Kind::constant, g, 0.0, {}, {}}; }
  static FrfSpec lowpass(double fc_hz, Complex g = {1.0, 0.0}) {
    if (!(fc_hz > 0.0)) throw ValidationError("frf: lowpass corner must be positive");
    return FrfSpec{Kind::lowpass1, g, fc_hz, {}, {}};
  }
  static FrfSpec table(std::vector<double> f, std::vector<Complex> v) {
    if (f.size() != v.size() || f.size() < 2) throw ValidationError("frf: table needs >= 2 rows");
    for (std::size_t i = 0; i + 1 < f.size(); ++i)
      if (!(f[i] < f[i + 1])) throw ValidationError("frf: table frequencies must be strictly increasing");
    return FrfSpec{Kind::table, {1.0, 0.0}, 0.0, std::move(f), std::move(v)};
  }

  bool is_zero() const { return kind == Kind::constant && gain == Complex(0.0, 0.0); }

  Complex eval(double f_hz) const {
    switch (kind) {
      case Kind::constant: return gain;
      case Kind::lowpass1: return gain / Complex(1.0, f_hz / fc_hz);
      case Kind::table: {
        if (f_hz < freqs.front() || f_hz > freqs.back())
          throw ValidationError("frf: frequency " + std::to_string(f_hz) +
                                " Hz outside table span [" + std::to_string(freqs.front()) + ", " +
                                std::to_string(freqs.back()) + "]");
        auto it = std::upper_bound(freqs.begin(), freqs.end(), f_hz);
        if (it == freqs.begin()) return vals.front();
        if (it == freqs.end()) return vals.back();
        std::size_t hi = static_cast<std::size_t>(it - freqs.begin());
        std::size_t lo = hi - 1;
        double t = (f_hz - freqs[lo]) / (freqs[hi] - freqs[lo]);
        return vals[lo] + t * (vals[hi] - vals[lo]);
      }
    }
    return {};
  }
};

// ---------------------------------------------------------------------------
// Static maps and block relations
// ---------------------------------------------------------------------------

/// Memoryless single-valued map, evaluated on real time samples.
struct StaticMap {
  enum class Kind { polynomial, exponential, logarithm, saturation };
  Kind kind = Kind::polynomial;
  std::vector<double> coeffs; // polynomial: coeffs[i] multiplies u^(i+1)
  double scale = 1.0;         // exponential: exp(scale*u); logarithm: log(u)/scale
  double limit = 1.0;         // saturation clip level

  double eval(double u) const {
    switch (kind) {
      case Kind::polynomial: {
        double acc = 0.0, p = 1.0;
        for (double c : coeffs) { p *= u; acc += c * p; }
        return acc;
      }
      case Kind::exponential: return std::exp(scale * u);
      case Kind::logarithm:
        if (!(u > 0.0)) throw NumericalError("static log: nonpositive argument");
        return std::log(u) / scale;
      case Kind::saturation: return std::clamp(u, -limit, limit);
    }
    return 0.0;
  }

  /// Small-signal slope at u (used by linearization oracles in tests/tools).
  double derivative(double u) const {
    switch (kind) {
      case Kind::polynomial: {
        double acc = 0.0, p = 1.0;
        for (std::size_t i = 0; i < coeffs.size(); ++i) {
          acc += coeffs[i] * static_cast<double>(i + 1) * p;
          p *= u;
        }
        return acc;
      }
      case Kind::exponential: return scale * std::exp(scale * u);
      case Kind::logarithm: return 1.0 / (scale * u);
      case Kind::saturation: return std::abs(u) < limit ? 1.0 : 0.0;
    }
    return 0.0;
  }
};

/// One input->output path inside a block: post(static(pre(u))). pre/post are
/// linear dynamics applied spectrally; the static core runs on time samples.
/// A relation without a static core is purely linear.
struct Relation {
  std::optional<FrfSpec> pre;
  std::optional<StaticMap> staticmap;
  std::optional<FrfSpec> post;

  bool is_linear() const { return !staticmap.has_value(); }
  bool is_pure_static() const { return staticmap && !pre && !post; }

  Complex linear_eval(double f_hz) const {
    Complex g(1.0, 0.0);
    if (pre) g *= pre->eval(f_hz);
    if (post) g *= post->eval(f_hz);
    return g;
  }
};

/// PISPO nonlinear block: SISO (ports=1) or a p-port wave fixture where
/// rel[i][j] maps the incident wave at port j+1 into the reflected wave at
/// port i+1, entries summing per output port.
struct NonlinearBlock {
  std::string name;
  int ports = 1;
  std::vector<std::vector<std::optional<Relation>>> rel;

  static NonlinearBlock siso(std::string name, Relation r) {
    NonlinearBlock b;
    b.name = std::move(name);
    b.ports = 1;
    b.rel = {{std::move(r)}};
    return b;
  }
  static NonlinearBlock multiport(std::string name, int ports) {
    NonlinearBlock b;
    b.name = std::move(name);
    b.ports = ports;
    b.rel.assign(static_cast<std::size_t>(ports),
                 std::vector<std::optional<Relation>>(static_cast<std::size_t>(ports)));
    return b;
  }

  void validate() const {
    if (ports < 1) throw ValidationError("block '" + name + "': needs at least one port");
    if (rel.size() != static_cast<std::size_t>(ports))
      throw ValidationError("block '" + name + "': relation rows must match port count");
    for (const auto& row : rel)
      if (row.size() != static_cast<std::size_t>(ports))
        throw ValidationError("block '" + name + "': relation columns must match port count");
  }

  bool is_linear() const {
    for (const auto& row : rel)
      for (const auto& r : row)
        if (r && !r->is_linear()) return false;
    return true;
  }

  const Relation& single_relation() const {
    if (ports != 1 || !rel[0][0])
      throw ValidationError("block '" + name + "': not a single-relation SISO block");
    return *rel[0][0];
  }
};

/// Pointwise evaluation of a static SISO block.
inline double eval_static(const NonlinearBlock& block, double u) {
  const Relation& r = block.single_relation();
  if (!r.is_pure_static())
    throw ValidationError("eval_static: block '" + block.name + "' is not purely static");
  return r.staticmap->eval(u);
}

// ---------------------------------------------------------------------------
// Networks
// ---------------------------------------------------------------------------

struct AnalysisGrid {
  Rational f0{1};
  std::int64_t kmin = 1;
  std::int64_t kmax = 1;
};

/// N SISO nonlinear blocks in a linear feedback structure. Per frequency bin
/// the interconnect is U = A*R - M*Y, Y_t = B*Y, with A (Nx1), M (NxN) and
/// B (1xN) given by FRF entries.
struct SisoFeedbackNetwork {
  std::vector<NonlinearBlock> blocks;
  std::vector<FrfSpec> input_map;                 // A
  std::vector<std::vector<FrfSpec>> feedback_map; // M
  std::vector<FrfSpec> output_map;                // B

  int n() const { return static_cast<int>(blocks.size()); }

  void validate() const {
    if (blocks.empty()) throw ValidationError("siso network: needs at least one block");
    const std::size_t N = blocks.size();
    for (const auto& b : blocks) {
      b.validate();
      if (b.ports != 1) throw ValidationError("siso network: block '" + b.name + "' is not SISO");
    }
    if (input_map.size() != N || output_map.size() != N || feedback_map.size() != N)
      throw ValidationError("siso network: A/M/B dimensions inconsistent with block count");
    for (const auto& row : feedback_map)
      if (row.size() != N) throw ValidationError("siso network: M must be NxN");
  }

  int block_index(const std::string& name) const {
    for (std::size_t i = 0; i < blocks.size(); ++i)
      if (blocks[i].name == name) return static_cast<int>(i);
    throw ValidationError("siso network: unknown block '" + name + "'");
  }

  Eigen::VectorXcd a_at(double f_hz) const {
    Eigen::VectorXcd v(n());
    for (int i = 0; i < n(); ++i) v(i) = input_map[static_cast<std::size_t>(i)].eval(f_hz);
    return v;
  }
  Eigen::MatrixXcd m_at(double f_hz) const {
    Eigen::MatrixXcd m(n(), n());
    for (int i = 0; i < n(); ++i)
      for (int j = 0; j < n(); ++j)
        m(i, j) = feedback_map[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)].eval(f_hz);
    return m;
  }
  Eigen::RowVectorXcd b_at(double f_hz) const {
    Eigen::RowVectorXcd v(n());
    for (int i = 0; i < n(); ++i) v(i) = output_map[static_cast<std::size_t>(i)].eval(f_hz);
    return v;
  }

  /// Open-loop chain wiring: u1 = r, u_{i+1} = y_i, y_t = y_N.
  static SisoFeedbackNetwork chain(std::vector<NonlinearBlock> blocks) {
    SisoFeedbackNetwork net;
    net.blocks = std::move(blocks);
    const std::size_t N = net.blocks.size();
    net.input_map.assign(N, FrfSpec::constant({0.0, 0.0}));
    net.output_map.assign(N, FrfSpec::constant({0.0, 0.0}));
    net.feedback_map.assign(N, std::vector<FrfSpec>(N, FrfSpec::constant({0.0, 0.0})));
    net.input_map[0] = FrfSpec::constant({1.0, 0.0});
    net.output_map[N - 1] = FrfSpec::constant({1.0, 0.0});
    for (std::size_t i = 1; i < N; ++i)
      net.feedback_map[i][i - 1] = FrfSpec::constant({-1.0, 0.0}); // u_i = -M*y = +y_{i-1}
    net.validate();
    return net;
  }
};

/// N multi-port nonlinear sub-circuits embedded in a linear package with
/// source/load reflections. The package has P+2 ports for P = sum of
/// sub-circuit ports: port 1 faces the source, port 2 the load, ports 3..P+2
/// face the sub-circuit ports in declaration order.
struct PortNetwork {
  std::vector<NonlinearBlock> subckts;
  std::vector<std::vector<FrfSpec>> package; // (P+2) x (P+2)
  FrfSpec gamma_in = FrfSpec::constant({0.0, 0.0});
  FrfSpec gamma_out = FrfSpec::constant({0.0, 0.0});
  double z0 = 50.0;

  int total_ports() const {
    int p = 0;
    for (const auto& s : subckts) p += s.ports;
    return p;
  }

  void validate() const {
    if (subckts.empty()) throw ValidationError("port network: needs at least one sub-circuit");
    for (const auto& s : subckts) s.validate();
    const std::size_t dim = static_cast<std::size_t>(total_ports() + 2);
    if (package.size() != dim)
      throw ValidationError("port network: package must be (P+2)x(P+2), got " +
                            std::to_string(package.size()) + " rows for P = " +
                            std::to_string(total_ports()));
    for (const auto& row : package)
      if (row.size() != dim) throw ValidationError("port network: package rows must be square");
    if (!(z0 > 0.0)) throw ValidationError("port network: z0 must be positive");
  }

  int subckt_index(const std::string& name) const {
    for (std::size_t i = 0; i < subckts.size(); ++i)
      if (subckts[i].name == name) return static_cast<int>(i);
    throw ValidationError("port network: unknown sub-circuit '" + name + "'");
  }

  /// First global port index (0-based) of sub-circuit n.
  int port_offset(int n) const {
    int off = 0;
    for (int i = 0; i < n; ++i) off += subckts[static_cast<std::size_t>(i)].ports;
    return off;
  }

  Eigen::MatrixXcd package_at(double f_hz) const {
    const int dim = total_ports() + 2;
    Eigen::MatrixXcd p(dim, dim);
    for (int i = 0; i < dim; ++i)
      for (int j = 0; j < dim; ++j)
        p(i, j) = package[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)].eval(f_hz);
    return p;
  }

  /// Routing package for a cascade of matched 2-ports: source -> block 1 ->
  /// ... -> block N -> load, unit reciprocal through-connections.
  static std::vector<std::vector<FrfSpec>> chain_package(int n_blocks) {
    const int P = 2 * n_blocks;
    const int dim = P + 2;
    std::vector<std::vector<FrfSpec>> pkg(static_cast<std::size_t>(dim),
                                          std::vector<FrfSpec>(static_cast<std::size_t>(dim),
                                                               FrfSpec::constant({0.0, 0.0})));
    auto connect = [&](int i, int j) {
      pkg[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = FrfSpec::constant({1.0, 0.0});
      pkg[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)] = FrfSpec::constant({1.0, 0.0});
    };
    connect(0, 2);                      // source side -> block 1 port 1
    for (int b = 0; b + 1 < n_blocks; ++b)
      connect(2 + 2 * b + 1, 2 + 2 * b + 2); // block b port 2 -> block b+1 port 1
    connect(1, 2 + P - 1);              // block N port 2 -> load side
    return pkg;
  }
};

using Network = std::variant<SisoFeedbackNetwork, PortNetwork>;

struct ParsedNetwork {
  AnalysisGrid grid;
  Network net;

  const SisoFeedbackNetwork& siso() const {
    if (!std::holds_alternative<SisoFeedbackNetwork>(net))
      throw ValidationError("network is not a SISO feedback network");
    return std::get<SisoFeedbackNetwork>(net);
  }
  const PortNetwork& wave() const {
    if (!std::holds_alternative<PortNetwork>(net))
      throw ValidationError("network is not a port network");
    return std::get<PortNetwork>(net);
  }
};

// ---------------------------------------------------------------------------
// Netlist parsing
// ---------------------------------------------------------------------------

namespace detail {

inline FrfSpec parse_frf_tokens(const TextDoc& doc, const std::vector<std::string>& toks, int line,
                                const std::vector<FrfSpec>& tables) {
  try {
    if (toks.empty()) doc.fail(line, "empty FRF value");
    if (toks[0] == "const") {
      if (toks.size() == 2) return FrfSpec::constant({std::stod(toks[1]), 0.0});
      if (toks.size() == 3) return FrfSpec::constant({std::stod(toks[1]), std::stod(toks[2])});
    } else if (toks[0] == "lowpass") {
      if (toks.size() == 2) return FrfSpec::lowpass(std::stod(toks[1]));
      if (toks.size() == 3) return FrfSpec::lowpass(std::stod(toks[1]), {std::stod(toks[2]), 0.0});
      if (toks.size() == 4)
        return FrfSpec::lowpass(std::stod(toks[1]), {std::stod(toks[2]), std::stod(toks[3])});
    } else if (toks[0] == "tableref") {
      if (toks.size() == 2) {
        std::size_t id = static_cast<std::size_t>(std::stoll(toks[1]));
        if (id >= tables.size()) doc.fail(line, "tableref " + toks[1] + " has no matching [frftable]");
        return tables[id];
      }
    } else {
      if (toks.size() == 1) return FrfSpec::constant({std::stod(toks[0]), 0.0});
      if (toks.size() == 2) return FrfSpec::constant({std::stod(toks[0]), std::stod(toks[1])});
    }
  } catch (const std::logic_error&) {
  }
  doc.fail(line, "cannot parse FRF value (expected 'const re [im]', 'lowpass fc [re im]', 'tableref n' or 're [im]')");
}

inline FrfSpec parse_frf_value(const TextDoc& doc, const DocSection& sec, std::string_view key,
                               const std::vector<FrfSpec>& tables) {
  const DocEntry* e = sec.find(key);
  if (!e) doc.fail_missing(sec, key);
  return parse_frf_tokens(doc, split_ws(e->value), e->line, tables);
}

inline StaticMap parse_static(const TextDoc& doc, const DocSection& sec, const std::string& kind,
                              int line) {
  StaticMap m;
  if (kind == "polynomial") {
    m.kind = StaticMap::Kind::polynomial;
    m.coeffs = doc.get_doubles(sec, "coeffs");
    if (m.coeffs.empty()) doc.fail(line, "polynomial needs 'coeffs'");
  } else if (kind == "exp") {
    m.kind = StaticMap::Kind::exponential;
    m.scale = doc.get_double(sec, "scale", 1.0);
  } else if (kind == "log") {
    m.kind = StaticMap::Kind::logarithm;
    m.scale = doc.get_double(sec, "scale", 1.0);
  } else if (kind == "saturation") {
    m.kind = StaticMap::Kind::saturation;
    m.limit = doc.get_double(sec, "limit");
    if (!(m.limit > 0.0)) doc.fail(line, "saturation needs a positive 'limit'");
  } else {
    doc.fail(line, "unknown block kind '" + kind + "'");
  }
  return m;
}

inline Relation parse_relation(const TextDoc& doc, const DocSection& sec,
                               const std::vector<FrfSpec>& tables) {
  Relation r;
  const std::string kind = doc.require(sec, "kind");
  const int line = sec.find("kind")->line;
  if (kind == "linear") {
    r.pre = parse_frf_value(doc, sec, "frf", tables);
  } else if (kind == "composed") {
    r.staticmap = parse_static(doc, sec, doc.require(sec, "static"), line);
  } else {
    r.staticmap = parse_static(doc, sec, kind, line);
  }
  if (kind != "linear") {
    if (sec.has("pre")) r.pre = parse_frf_value(doc, sec, "pre", tables);
    if (sec.has("post")) r.post = parse_frf_value(doc, sec, "post", tables);
  }
  return r;
}

inline std::vector<FrfSpec> parse_frf_tables(const TextDoc& doc) {
  std::vector<FrfSpec> tables;
  for (const DocSection* sec : doc.sections_named("frftable")) {
    std::vector<double> f;
    std::vector<Complex> v;
    for (const auto& e : sec->entries) {
      if (e.key != "row") doc.fail(e.line, "expected 'row: f_hz re im' in [frftable]");
      auto toks = split_ws(e.value);
      if (toks.size() != 3) doc.fail(e.line, "expected 'row: f_hz re im'");
      f.push_back(std::stod(toks[0]));
      v.emplace_back(std::stod(toks[1]), std::stod(toks[2]));
    }
    if (f.size() < 2) doc.fail(sec->line, "[frftable] needs at least two rows");
    tables.push_back(FrfSpec::table(std::move(f), std::move(v)));
  }
  return tables;
}

} // namespace detail

/// S-matrix tabulation file: 'ports' and 'z0' header keys, then per-frequency
/// rows with column-major complex entries.
struct SMatrixTable {
  int ports = 0;
  double z0 = 50.0;
  std::vector<double> freqs;
  std::vector<Eigen::MatrixXcd> matrices;

  Eigen::MatrixXcd at(double f_hz) const {
    if (freqs.empty()) throw ValidationError("smat: empty table");
    if (f_hz < freqs.front() || f_hz > freqs.back())
      throw ValidationError("smat: frequency outside tabulated span");
    auto it = std::upper_bound(freqs.begin(), freqs.end(), f_hz);
    if (it == freqs.begin()) return matrices.front();
    if (it == freqs.end()) return matrices.back();
    std::size_t hi = static_cast<std::size_t>(it - freqs.begin());
    std::size_t lo = hi - 1;
    double t = (f_hz - freqs[lo]) / (freqs[hi] - freqs[lo]);
    return matrices[lo] + t * (matrices[hi] - matrices[lo]);
  }
};

inline SMatrixTable parse_smatrix_table(const TextDoc& doc) {
  SMatrixTable tab;
  const DocSection& top = doc.top();
  tab.ports = static_cast<int>(doc.get_int(top, "ports"));
  if (tab.ports < 1) throw ValidationError(doc.source_name + ": smat needs ports >= 1");
  tab.z0 = doc.get_double(top, "z0", 50.0);
  const int n = tab.ports;
  for (const auto& e : top.entries) {
    if (e.key != "row") continue;
    auto toks = detail::split_ws(e.value);
    if (static_cast<int>(toks.size()) != 1 + 2 * n * n)
      doc.fail(e.line, "expected f_hz plus " + std::to_string(2 * n * n) + " numbers (column-major re im)");
    tab.freqs.push_back(std::stod(toks[0]));
    Eigen::MatrixXcd m(n, n);
    std::size_t t = 1;
    for (int j = 0; j < n; ++j)
      for (int i = 0; i < n; ++i) {
        m(i, j) = Complex(std::stod(toks[t]), std::stod(toks[t + 1]));
        t += 2;
      }
    tab.matrices.push_back(std::move(m));
  }
  if (tab.freqs.size() < 1) throw ValidationError(doc.source_name + ": smat has no rows");
  for (std::size_t i = 0; i + 1 < tab.freqs.size(); ++i)
    if (!(tab.freqs[i] < tab.freqs[i + 1]))
      throw ValidationError(doc.source_name + ": smat frequencies must be strictly increasing");
  return tab;
}

inline void write_smatrix_table(std::ostream& out, const SMatrixTable& tab) {
  out << "# smat v1 (column-major re im pairs)\n";
  out << "ports: " << tab.ports << "\n";
  out << "z0: " << detail::fmt17(tab.z0) << "\n";
  for (std::size_t r = 0; r < tab.freqs.size(); ++r) {
    out << "row: " << detail::fmt17(tab.freqs[r]);
    for (int j = 0; j < tab.ports; ++j)
      for (int i = 0; i < tab.ports; ++i)
        out << ' ' << detail::fmt17(tab.matrices[r](i, j).real()) << ' '
            << detail::fmt17(tab.matrices[r](i, j).imag());
    out << "\n";
  }
}

inline ParsedNetwork parse_network(const TextDoc& doc) {
  ParsedNetwork out;
  const DocSection& top = doc.top();
  const std::string view = doc.require(top, "view");
  if (view != "siso" && view != "wave")
    doc.fail(top.find("view")->line, "view must be 'siso' or 'wave'");

  const DocSection* grid = doc.unique_section("grid");
  if (!grid) throw ValidationError(doc.source_name + ": missing [grid] section");
  out.grid.f0 = doc.get_rational(*grid, "f0_hz");
  out.grid.kmin = doc.get_int(*grid, "kmin", 1);
  out.grid.kmax = doc.get_int(*grid, "kmax");
  if (out.grid.f0.num() <= 0) doc.fail(grid->line, "f0_hz must be positive");
  if (out.grid.kmin < 0 || out.grid.kmax < out.grid.kmin) doc.fail(grid->line, "bad kmin/kmax range");

  const auto tables = detail::parse_frf_tables(doc);

  if (view == "siso") {
    SisoFeedbackNetwork net;
    for (const DocSection* sec : doc.sections_named("block")) {
      if (sec->header.size() != 2) doc.fail(sec->line, "expected [block <name>]");
      net.blocks.push_back(NonlinearBlock::siso(sec->header[1], detail::parse_relation(doc, *sec, tables)));
    }
    if (net.blocks.empty()) throw ValidationError(doc.source_name + ": no [block] sections");

    const std::size_t N = net.blocks.size();
    net.input_map.assign(N, FrfSpec::constant({0.0, 0.0}));
    net.output_map.assign(N, FrfSpec::constant({0.0, 0.0}));
    net.feedback_map.assign(N, std::vector<FrfSpec>(N, FrfSpec::constant({0.0, 0.0})));

    const DocSection* wiring = doc.unique_section("wiring");
    if (!wiring) throw ValidationError(doc.source_name + ": missing [wiring] section");
    for (const auto& e : wiring->entries) {
      auto key = detail::split_ws(e.key);
      auto idx = [&](const std::string& name) -> std::size_t {
        try {
          return static_cast<std::size_t>(net.block_index(name));
        } catch (const ValidationError&) {
          doc.fail(e.line, "unknown block '" + name + "' in wiring");
        }
      };
      if (key.size() == 1 && key[0] == "chain") {
        auto names = detail::split_ws(e.value);
        if (names.empty()) doc.fail(e.line, "chain needs block names");
        net.input_map[idx(names[0])] = FrfSpec::constant({1.0, 0.0});
        net.output_map[idx(names.back())] = FrfSpec::constant({1.0, 0.0});
        for (std::size_t i = 1; i < names.size(); ++i)
          net.feedback_map[idx(names[i])][idx(names[i - 1])] = FrfSpec::constant({-1.0, 0.0});
      } else if (key.size() == 2 && (key[0] == "a" || key[0] == "b")) {
        auto frf = detail::parse_frf_tokens(doc, detail::split_ws(e.value), e.line, tables);
        (key[0] == "a" ? net.input_map : net.output_map)[idx(key[1])] = frf;
      } else if (key.size() == 3 && key[0] == "m") {
        net.feedback_map[idx(key[1])][idx(key[2])] =
            detail::parse_frf_tokens(doc, detail::split_ws(e.value), e.line, tables);
      } else {
        doc.fail(e.line, "expected 'chain:', 'a <block>:', 'b <block>:' or 'm <row> <col>:'");
      }
    }
    net.validate();
    out.net = std::move(net);
    return out;
  }

  PortNetwork net;
  for (const DocSection* sec : doc.sections_named("subckt")) {
    if (sec->header.size() != 2) doc.fail(sec->line, "expected [subckt <name>]");
    int ports = static_cast<int>(doc.get_int(*sec, "ports"));
    if (ports < 1) doc.fail(sec->line, "subckt needs ports >= 1");
    net.subckts.push_back(NonlinearBlock::multiport(sec->header[1], ports));
  }
  if (net.subckts.empty()) throw ValidationError(doc.source_name + ": no [subckt] sections");
  for (const DocSection* sec : doc.sections_named("rel")) {
    if (sec->header.size() != 4) doc.fail(sec->line, "expected [rel <subckt> <out-port> <in-port>]");
    int n;
    try {
      n = net.subckt_index(sec->header[1]);
    } catch (const ValidationError&) {
      doc.fail(sec->line, "unknown sub-circuit '" + sec->header[1] + "'");
    }
    auto& blk = net.subckts[static_cast<std::size_t>(n)];
    int i = std::stoi(sec->header[2]), j = std::stoi(sec->header[3]);
    if (i < 1 || i > blk.ports || j < 1 || j > blk.ports)
      doc.fail(sec->line, "port index out of range for sub-circuit '" + blk.name + "'");
    blk.rel[static_cast<std::size_t>(i - 1)][static_cast<std::size_t>(j - 1)] =
        detail::parse_relation(doc, *sec, tables);
  }

  const DocSection* term = doc.unique_section("terminations");
  if (term) {
    if (term->has("gamma_in")) net.gamma_in = detail::parse_frf_value(doc, *term, "gamma_in", tables);
    if (term->has("gamma_out")) net.gamma_out = detail::parse_frf_value(doc, *term, "gamma_out", tables);
    net.z0 = doc.get_double(*term, "z0", 50.0);
  }

  const DocSection* pkg = doc.unique_section("package");
  if (!pkg) throw ValidationError(doc.source_name + ": missing [package] section");
  const std::string pkind = doc.require(*pkg, "kind");
  const int P = net.total_ports();
  if (pkind == "chain") {
    for (const auto& s : net.subckts)
      if (s.ports != 2) doc.fail(pkg->line, "chain package requires 2-port sub-circuits");
    net.package = PortNetwork::chain_package(static_cast<int>(net.subckts.size()));
  } else if (pkind == "inline") {
    const int dim = P + 2;
    net.package.assign(static_cast<std::size_t>(dim),
                       std::vector<FrfSpec>(static_cast<std::size_t>(dim), FrfSpec::constant({0.0, 0.0})));
    for (const auto& e : pkg->entries) {
      if (e.key == "kind") continue;
      auto key = detail::split_ws(e.key);
      if (key.size() != 3 || key[0] != "s") doc.fail(e.line, "expected 's <i> <j>: <frf>'");
      int i = std::stoi(key[1]), j = std::stoi(key[2]);
      if (i < 1 || i > dim || j < 1 || j > dim)
        doc.fail(e.line, "package index out of range (dimension is " + std::to_string(dim) + ")");
      net.package[static_cast<std::size_t>(i - 1)][static_cast<std::size_t>(j - 1)] =
          detail::parse_frf_tokens(doc, detail::split_ws(e.value), e.line, tables);
    }
  } else if (pkind == "file") {
    const std::string path = doc.require(*pkg, "path");
    SMatrixTable tab = parse_smatrix_table(TextDoc::parse_file(path));
    if (tab.ports != P + 2)
      doc.fail(pkg->line, "package file has " + std::to_string(tab.ports) + " ports, expected " +
                              std::to_string(P + 2));
    const int dim = P + 2;
    net.package.assign(static_cast<std::size_t>(dim), {});
    for (int i = 0; i < dim; ++i) {
      net.package[static_cast<std::size_t>(i)].clear();
      for (int j = 0; j < dim; ++j) {
        std::vector<Complex> vals;
        vals.reserve(tab.freqs.size());
        for (const auto& m : tab.matrices) vals.push_back(m(i, j));
        if (tab.freqs.size() == 1)
          net.package[static_cast<std::size_t>(i)].push_back(FrfSpec::constant(vals[0]));
        else
          net.package[static_cast<std::size_t>(i)].push_back(FrfSpec::table(tab.freqs, std::move(vals)));
      }
    }
  } else {
    doc.fail(pkg->line, "package kind must be 'chain', 'inline' or 'file'");
  }
  net.validate();

  // Tables must cover the analysis band; the solver re-checks against the
  // wider retained band when it evaluates them.
  const double fmax = (out.grid.f0 * out.grid.kmax).value();
  for (const auto& t : tables)
    if (t.kind == FrfSpec::Kind::table && (t.freqs.front() > out.grid.f0.value() * out.grid.kmin ||
                                           t.freqs.back() < fmax))
      throw ValidationError(doc.source_name + ": FRF table does not cover the analysis grid");

  out.net = std::move(net);
  return out;
}

inline ParsedNetwork parse_network_file(const std::string& path) {
  return parse_network(TextDoc::parse_file(path));
}

// ---------------------------------------------------------------------------
// Netlist serialization (canonical form; round-trips semantically)
// ---------------------------------------------------------------------------

namespace detail {

struct FrfWriter {
  std::vector<const FrfSpec*> tables;

  std::string value(const FrfSpec& f) {
    switch (f.kind) {
      case FrfSpec::Kind::constant:
        return "const " + fmt17(f.gain.real()) + " " + fmt17(f.gain.imag());
      case FrfSpec::Kind::lowpass1:
        return "lowpass " + fmt17(f.fc_hz) + " " + fmt17(f.gain.real()) + " " + fmt17(f.gain.imag());
      case FrfSpec::Kind::table: {
        tables.push_back(&f);
        return "tableref " + std::to_string(tables.size() - 1);
      }
    }
    return {};
  }

  void emit_tables(std::ostream& out) const {
    for (std::size_t id = 0; id < tables.size(); ++id) {
      out << "[frftable " << id << "]\n";
      for (std::size_t r = 0; r < tables[id]->freqs.size(); ++r)
        out << "row: " << fmt17(tables[id]->freqs[r]) << ' ' << fmt17(tables[id]->vals[r].real())
            << ' ' << fmt17(tables[id]->vals[r].imag()) << "\n";
    }
  }
};

inline void write_relation(std::ostream& out, const Relation& r, FrfWriter& fw) {
  if (r.is_linear()) {
    FrfSpec combined = r.pre ? *r.pre : FrfSpec::constant({1.0, 0.0});
    if (r.post) {
      if (combined.kind == FrfSpec::Kind::constant && r.post->kind == FrfSpec::Kind::constant)
        combined = FrfSpec::constant(combined.gain * r.post->gain);
      else if (combined.kind == FrfSpec::Kind::constant && combined.gain == Complex(1.0, 0.0))
        combined = *r.post;
      else
        throw ValidationError("serialize: linear relations must carry a single FRF");
    }
    out << "kind: linear\nfrf: " << fw.value(combined) << "\n";
    return;
  }
  const StaticMap& m = *r.staticmap;
  switch (m.kind) {
    case StaticMap::Kind::polynomial: {
      out << "kind: polynomial\ncoeffs:";
      for (double c : m.coeffs) out << ' ' << fmt17(c);
      out << "\n";
      break;
    }
    case StaticMap::Kind::exponential: out << "kind: exp\nscale: " << fmt17(m.scale) << "\n"; break;
    case StaticMap::Kind::logarithm: out << "kind: log\nscale: " << fmt17(m.scale) << "\n"; break;
    case StaticMap::Kind::saturation: out << "kind: saturation\nlimit: " << fmt17(m.limit) << "\n"; break;
  }
  if (r.pre) out << "pre: " << fw.value(*r.pre) << "\n";
  if (r.post) out << "post: " << fw.value(*r.post) << "\n";
}

} // namespace detail

inline void write_network(std::ostream& out, const ParsedNetwork& pn) {
  detail::FrfWriter fw;
  std::ostringstream body;
  const bool siso = std::holds_alternative<SisoFeedbackNetwork>(pn.net);
  body << "[grid]\nf0_hz: " << pn.grid.f0.str() << "\nkmin: " << pn.grid.kmin
       << "\nkmax: " << pn.grid.kmax << "\n";
  if (siso) {
    const auto& net = pn.siso();
    for (const auto& b : net.blocks) {
      body << "[block " << b.name << "]\n";
      detail::write_relation(body, b.single_relation(), fw);
    }
    body << "[wiring]\n";
    for (int i = 0; i < net.n(); ++i) {
      const auto si = static_cast<std::size_t>(i);
      if (!net.input_map[si].is_zero())
        body << "a " << net.blocks[si].name << ": " << fw.value(net.input_map[si]) << "\n";
      if (!net.output_map[si].is_zero())
        body << "b " << net.blocks[si].name << ": " << fw.value(net.output_map[si]) << "\n";
      for (int j = 0; j < net.n(); ++j) {
        const auto sj = static_cast<std::size_t>(j);
        if (!net.feedback_map[si][sj].is_zero())
          body << "m " << net.blocks[si].name << ' ' << net.blocks[sj].name << ": "
               << fw.value(net.feedback_map[si][sj]) << "\n";
      }
    }
  } else {
    const auto& net = pn.wave();
    for (const auto& s : net.subckts) {
      body << "[subckt " << s.name << "]\nports: " << s.ports << "\n";
    }
    for (const auto& s : net.subckts)
      for (int i = 0; i < s.ports; ++i)
        for (int j = 0; j < s.ports; ++j)
          if (s.rel[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]) {
            body << "[rel " << s.name << ' ' << (i + 1) << ' ' << (j + 1) << "]\n";
            detail::write_relation(body, *s.rel[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)], fw);
          }
    body << "[terminations]\ngamma_in: " << fw.value(net.gamma_in)
         << "\ngamma_out: " << fw.value(net.gamma_out) << "\nz0: " << detail::fmt17(net.z0) << "\n";
    body << "[package]\nkind: inline\n";
    const int dim = net.total_ports() + 2;
    for (int i = 0; i < dim; ++i)
      for (int j = 0; j < dim; ++j)
        if (!net.package[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)].is_zero())
          body << "s " << (i + 1) << ' ' << (j + 1) << ": "
               << fw.value(net.package[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]) << "\n";
  }
  out << "# netlist v1\nview: " << (siso ? "siso" : "wave") << "\n";
  out << body.str();
  fw.emit_tables(out);
}

} // namespace bladca
