// Pipeline driver: design -> simulate -> estimate -> dca / validate -> report.
// Every stage reads and writes the documented text formats, so stages can be
// re-run and cached independently; a JSON manifest records content hashes,
// seeds and config snapshots per stage.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "bladca/bladca.hpp"
#include "bladca/hashing.hpp"
#include "bladca/manifest.hpp"
#include "bladca/records_io.hpp"

namespace fs = std::filesystem;
using namespace bladca;

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitNumerical = 3;
constexpr int kExitNonAttained = 4;

struct SolverFlags {
  double tol = -1, damping = -1, oversample = -1, ts = -1;
  int max_iter = -1, periods = -1, threads = -1;
  std::int64_t order = -1;
  std::string mode, tickler_mode;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--tol", tol, "fixed-point relative residual tolerance");
    cmd->add_option("--max-iter", max_iter, "fixed-point sweep limit");
    cmd->add_option("--order", order, "retained harmonics of f0 (default 3x highest excited bin)");
    cmd->add_option("--damping", damping, "fixed-point damping factor");
    cmd->add_option("--oversample", oversample, "time-sampling factor for static maps");
    cmd->add_option("--mode", mode, "solver mode: freq|time")->check(CLI::IsMember({"freq", "time"}));
    cmd->add_option("--ts", ts, "time step for --mode time [s]");
    cmd->add_option("--periods", periods, "periods simulated in --mode time");
    cmd->add_option("--tickler-mode", tickler_mode, "simultaneous|sequential")
        ->check(CLI::IsMember({"simultaneous", "sequential"}));
    cmd->add_option("--threads", threads, "parallel realizations (default 1)");
  }

  SolveConfig resolve() const {
    SolveConfig cfg;
    // defaults from the config file named by BLADCA_CONFIG, if any
    if (const char* path = std::getenv("BLADCA_CONFIG")) {
      TextDoc doc = TextDoc::parse_file(path);
      const DocSection& top = doc.top();
      cfg.tol = doc.get_double(top, "tol", cfg.tol);
      cfg.max_iter = static_cast<int>(doc.get_int(top, "max_iter", cfg.max_iter));
      cfg.harmonic_order = doc.get_int(top, "harmonic_order", cfg.harmonic_order);
      cfg.damping = doc.get_double(top, "damping", cfg.damping);
      cfg.oversample = doc.get_double(top, "oversample", cfg.oversample);
      cfg.ts = doc.get_double(top, "ts", cfg.ts);
      cfg.periods = static_cast<int>(doc.get_int(top, "periods", cfg.periods));
      cfg.threads = static_cast<int>(doc.get_int(top, "threads", cfg.threads));
      if (top.has("mode"))
        cfg.mode = doc.require(top, "mode") == "time" ? SolveConfig::Mode::time : SolveConfig::Mode::freq;
      if (top.has("tickler_mode"))
        cfg.tickler_mode = doc.require(top, "tickler_mode") == "sequential"
                               ? SolveConfig::TicklerMode::sequential
                               : SolveConfig::TicklerMode::simultaneous;
    }
    if (tol > 0) cfg.tol = tol;
    if (max_iter > 0) cfg.max_iter = max_iter;
    if (order > 0) cfg.harmonic_order = order;
    if (damping > 0) cfg.damping = damping;
    if (oversample > 0) cfg.oversample = oversample;
    if (!mode.empty()) cfg.mode = mode == "time" ? SolveConfig::Mode::time : SolveConfig::Mode::freq;
    if (ts > 0) cfg.ts = ts;
    if (periods > 0) cfg.periods = periods;
    if (!tickler_mode.empty())
      cfg.tickler_mode = tickler_mode == "sequential" ? SolveConfig::TicklerMode::sequential
                                                      : SolveConfig::TicklerMode::simultaneous;
    if (threads > 0) cfg.threads = threads;
    return cfg;
  }

  nlohmann::json snapshot(const SolveConfig& cfg) const {
    nlohmann::json j;
    j["tol"] = cfg.tol;
    j["max_iter"] = cfg.max_iter;
    j["harmonic_order"] = cfg.harmonic_order;
    j["damping"] = cfg.damping;
    j["oversample"] = cfg.oversample;
    j["mode"] = cfg.mode == SolveConfig::Mode::time ? "time" : "freq";
    j["ts"] = cfg.ts;
    j["periods"] = cfg.periods;
    j["tickler_mode"] =
        cfg.tickler_mode == SolveConfig::TicklerMode::sequential ? "sequential" : "simultaneous";
    j["threads"] = cfg.threads;
    return j;
  }
};

void write_text_file(const std::string& path, const std::string& body) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write " + path);
  out << body;
}

void stage_manifest(const std::string& manifest_path, const std::string& stage, std::uint64_t seed,
                    const std::map<std::string, std::string>& input_files,
                    const std::map<std::string, std::string>& output_files,
                    const nlohmann::json& config) {
  auto manifest = PipelineManifest::load_or_create(manifest_path);
  std::map<std::string, std::string> in_h, out_h;
  for (const auto& [k, p] : input_files) in_h[k + ":" + p] = hash_file(p);
  for (const auto& [k, p] : output_files) out_h[k + ":" + p] = hash_file(p);
  manifest.add_stage(stage, seed, in_h, out_h, config);
  manifest.save();
}

// ---------------------------------------------------------------------------
// design
// ---------------------------------------------------------------------------

int cmd_design(const std::string& spec_path, const std::string& tickler_of, const std::string& f_eps,
               double tickler_rms, std::optional<std::uint64_t> seed_override,
               const std::string& out_path, std::string manifest_path) {
  MultisineSpec spec;
  std::map<std::string, std::string> inputs;
  if (!tickler_of.empty()) {
    MultisineSpec main = parse_multisine_design(TextDoc::parse_file(tickler_of));
    inputs["main-design"] = tickler_of;
    if (f_eps.empty()) throw ValidationError("design: --tickler-of requires --f-eps");
    std::uint64_t seed = seed_override.value_or(main.seed + 1);
    spec = design_tickler(main, Rational::parse(f_eps), tickler_rms, seed);
  } else {
    if (spec_path.empty()) throw ValidationError("design: need --spec or --tickler-of");
    TextDoc doc = TextDoc::parse_file(spec_path);
    inputs["spec"] = spec_path;
    spec = parse_multisine_spec(doc, seed_override); // --seed overrides the file seed
  }
  std::ostringstream body;
  write_multisine_design(body, spec);
  write_text_file(out_path, body.str());
  if (manifest_path.empty()) manifest_path = out_path + ".manifest.json";
  nlohmann::json cfg;
  cfg["kind"] = to_string(spec.kind);
  cfg["rms"] = spec.rms_target;
  stage_manifest(manifest_path, "design", spec.seed, inputs, {{"design", out_path}}, cfg);
  std::size_t excited = spec.excited_indices().size();
  std::cout << "wrote " << out_path << " (" << spec.grid.size() << " lines, " << excited
            << " excited)\n";
  return 0;
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

int cmd_simulate(const std::string& net_path, const std::string& design_path,
                 const std::vector<std::string>& tickler_paths, int m_count, std::uint64_t seed,
                 const SolverFlags& flags, const std::string& out_dir, double target_sigma,
                 int batch, int max_m) {
  if (m_count < 1 && target_sigma <= 0) throw ValidationError("simulate: need --m >= 1");
  ParsedNetwork pn = parse_network_file(net_path);
  MultisineSpec main = parse_multisine_design(TextDoc::parse_file(design_path));
  if (!(main.grid.f0() == pn.grid.f0))
    throw ValidationError("simulate: design f0 (" + main.grid.f0().str() +
                          ") does not match the netlist analysis grid (" + pn.grid.f0.str() + ")");
  std::vector<MultisineSpec> ticklers;
  for (const auto& p : tickler_paths) ticklers.push_back(parse_multisine_design(TextDoc::parse_file(p)));
  SolveConfig cfg = flags.resolve();

  bool attained = true;
  std::vector<SteadyStateRecord> records;
  if (target_sigma > 0) {
    // realization budget: grow M in batches until the output-BLA uncertainty
    // reaches the target or max_m is exhausted
    if (batch < 2) batch = 16;
    if (max_m < batch) max_m = 8 * batch;
    const std::string out_name =
        std::holds_alternative<SisoFeedbackNetwork>(pn.net) ? "y_t" : "b_t";
    auto res = realization_budget(
        [&](int m_total) {
          int start = static_cast<int>(records.size());
          run_experiment_streaming(pn.net, main, ticklers, m_total, seed, cfg,
                                   [&](SteadyStateRecord&& r) {
                                     if (r.m >= start) records.push_back(std::move(r));
                                   });
          // streaming restarts from m=0; keep only the new tail
          auto est = estimate_simo(records, "r", {out_name});
          double worst = 0;
          for (const auto& c : est.cov) worst = std::max(worst, std::sqrt(c(0, 0).real()));
          return worst;
        },
        target_sigma, batch, max_m);
    attained = res.attained;
    std::cout << "budget: M = " << res.m_used << ", max sigma = " << res.sigma_max
              << (attained ? " (attained)" : " (NOT attained)") << "\n";
  } else {
    records = run_experiment(pn.net, main, ticklers, m_count, seed, cfg);
  }

  records_io::save(out_dir, records);
  std::map<std::string, std::string> inputs{{"netlist", net_path}, {"design", design_path}};
  for (std::size_t i = 0; i < tickler_paths.size(); ++i)
    inputs["tickler" + std::to_string(i + 1)] = tickler_paths[i];
  stage_manifest((fs::path(out_dir) / "manifest.json").string(), "simulate", seed, inputs,
                 {{"experiment", (fs::path(out_dir) / "experiment.json").string()}},
                 flags.snapshot(cfg));
  std::cout << "wrote " << records.size() << " records to " << out_dir << "\n";
  return attained ? 0 : kExitNonAttained;
}

// ---------------------------------------------------------------------------
// estimate
// ---------------------------------------------------------------------------

int infer_ports(const std::vector<SteadyStateRecord>& records, const std::string& subckt) {
  int p = 0;
  while (records[0].has_signal("a." + subckt + "." + std::to_string(p + 1))) ++p;
  if (p == 0) throw ValidationError("estimate: records carry no waves for sub-circuit '" + subckt + "'");
  return p;
}

void write_siso_estimate(const std::string& path, const SisoBlaEstimate& est,
                         const std::string& block, const std::string& archive_hash) {
  std::ostringstream out;
  out << "# bla estimate v1\nkind: siso\nblock: " << block << "\nm_used: " << est.m_used
      << "\nf0_hz: " << est.grid.f0().str() << "\noffset_hz: " << est.grid.offset().str()
      << "\nprovenance: " << est.provenance << "\nrecord_archive: " << archive_hash << "\n[bins]\n";
  for (std::size_t b = 0; b < est.g_bla.size(); ++b)
    out << "row: " << est.grid.bins()[b] << ' ' << detail::fmt17(est.grid.freq_hz(b)) << ' '
        << detail::fmt17(est.g_bla[b].real()) << ' ' << detail::fmt17(est.g_bla[b].imag()) << ' '
        << detail::fmt17(est.variance[b]) << ' ' << (est.valid[b] ? 1 : 0) << "\n";
  write_text_file(path, out.str());
}

void write_mimo_estimate(const std::string& path, const MimoBlaEstimate& est,
                         const std::vector<std::string>& refs, const std::string& archive_hash) {
  std::ostringstream out;
  out << "# bla estimate v1\nkind: mimo\nsubckt: " << est.subckt << "\nports: " << est.ports
      << "\nm_used: " << est.m_used << "\ncond_threshold: " << detail::fmt17(est.cond_threshold)
      << "\nf0_hz: " << est.grid.f0().str() << "\nrecord_archive: " << archive_hash << "\nreferences:";
  for (const auto& r : refs) out << ' ' << r;
  out << "\n";
  for (const auto& o : est.overrides) out << "override: " << o << "\n";
  out << "[bins]\n";
  for (std::size_t b = 0; b < est.s_bla.size(); ++b) {
    out << "row: " << est.grid.bins()[b] << ' ' << detail::fmt17(est.grid.freq_hz(b)) << ' '
        << detail::fmt17(est.cond[b]) << ' ' << (est.valid[b] ? 1 : 0);
    for (int j = 0; j < est.ports; ++j)
      for (int i = 0; i < est.ports; ++i)
        out << ' ' << detail::fmt17(est.s_bla[b](i, j).real()) << ' '
            << detail::fmt17(est.s_bla[b](i, j).imag());
    out << "\n";
  }
  out << "[cov]\n";
  const int pp = est.ports * est.ports;
  for (std::size_t b = 0; b < est.cov_vec.size(); ++b)
    for (int i = 0; i < pp; ++i)
      for (int j = 0; j < pp; ++j)
        out << "row: " << est.grid.bins()[b] << ' ' << i << ' ' << j << ' '
            << detail::fmt17(est.cov_vec[b](i, j).real()) << ' '
            << detail::fmt17(est.cov_vec[b](i, j).imag()) << "\n";
  write_text_file(path, out.str());
}

int cmd_estimate(const std::string& records_dir, const std::string& block, const std::string& subckt,
                 std::vector<std::string> refs, double cond_threshold, const std::string& out_path) {
  auto records = records_io::load(records_dir);
  const std::string archive_hash = hash_file((fs::path(records_dir) / "experiment.json").string());
  nlohmann::json cfg;
  if (!block.empty()) {
    auto siso = simo_to_siso(estimate_simo(records, "r", {"y." + block, "u." + block}), 0, 1);
    write_siso_estimate(out_path, siso, block, archive_hash);
    cfg["block"] = block;
  } else if (!subckt.empty()) {
    if (refs.empty())
      for (const auto& src : records[0].grid.sources) refs.push_back(src.name);
    int ports = infer_ports(records, subckt);
    auto mimo = estimate_mimo(records, subckt, ports, refs, cond_threshold);
    write_mimo_estimate(out_path, mimo, refs, archive_hash);
    cfg["subckt"] = subckt;
    cfg["references"] = refs;
    cfg["cond_threshold"] = cond_threshold;
  } else {
    throw ValidationError("estimate: need --block (SISO view) or --subckt (wave view)");
  }
  stage_manifest(out_path + ".manifest.json", "estimate", 0,
                 {{"experiment", (fs::path(records_dir) / "experiment.json").string()}},
                 {{"estimate", out_path}}, cfg);
  std::cout << "wrote " << out_path << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// dca and validate
// ---------------------------------------------------------------------------

std::map<std::string, SMatrixTable> parse_smallsignal_args(const std::vector<std::string>& args,
                                                           const PortNetwork& net) {
  std::map<std::string, SMatrixTable> tables;
  for (const auto& a : args) {
    auto eq = a.find('=');
    std::string name = eq == std::string::npos ? "" : a.substr(0, eq);
    std::string path = eq == std::string::npos ? a : a.substr(eq + 1);
    if (name.empty()) {
      if (net.subckts.size() != 1)
        throw ValidationError("--smallsignal needs name=file with several sub-circuits");
      name = net.subckts[0].name;
    }
    SMatrixTable tab = parse_smatrix_table(TextDoc::parse_file(path));
    int idx = net.subckt_index(name);
    if (tab.ports != net.subckts[static_cast<std::size_t>(idx)].ports)
      throw ValidationError("--smallsignal " + name + ": port count mismatch");
    tables[name] = std::move(tab);
  }
  return tables;
}

BlaMatrixSet smallsignal_set(const PortNetwork& net, const std::map<std::string, SMatrixTable>& tabs,
                             const SolveGrid& grid, const std::vector<std::int64_t>& bins) {
  return bla_set_wave_smallsignal(
      net,
      [&](int idx, double f) {
        const auto& name = net.subckts[static_cast<std::size_t>(idx)].name;
        auto it = tabs.find(name);
        if (it == tabs.end())
          throw ValidationError("no small-signal S supplied for sub-circuit '" + name + "'");
        return it->second.at(f);
      },
      grid, bins);
}

int cmd_dca(const std::string& records_dir, const std::string& net_path, const std::string& group_by,
            const std::string& hierarchy, const std::string& bins_mode,
            const std::vector<std::string>& smallsignal, double cond_threshold,
            const std::string& out_path, const std::string& csv_path) {
  auto records = records_io::load(records_dir);
  ParsedNetwork pn = parse_network_file(net_path);
  auto bins = analysis_bins(records[0].grid,
                            bins_mode == "inband" ? AnalysisBins::inband : AnalysisBins::excited);

  ContributionReport rep;
  DistortionCovariance cd;
  if (std::holds_alternative<SisoFeedbackNetwork>(pn.net)) {
    const auto& net = pn.siso();
    std::vector<SisoBlaEstimate> blas;
    for (const auto& blk : net.blocks)
      blas.push_back(
          simo_to_siso(estimate_simo(records, "r", {"y." + blk.name, "u." + blk.name}), 0, 1));
    auto set = bla_set_siso(net, blas, records[0].grid, bins);
    cd = build_cd(records, set);
    rep = decompose(cd, tout_siso(net, set));
  } else {
    const auto& net = pn.wave();
    BlaMatrixSet set;
    if (!smallsignal.empty()) {
      auto tabs = parse_smallsignal_args(smallsignal, net);
      set = smallsignal_set(net, tabs, records[0].grid, bins);
      set.m_used = static_cast<int>(records.size());
    } else {
      std::vector<std::string> refs;
      for (const auto& src : records[0].grid.sources) refs.push_back(src.name);
      std::vector<MimoBlaEstimate> blas;
      for (const auto& blk : net.subckts)
        blas.push_back(estimate_mimo(records, blk.name, blk.ports, refs, cond_threshold));
      set = bla_set_wave(net, blas, records[0].grid, bins);
    }
    cd = build_cd(records, set);
    rep = decompose(cd, tout_wave(net, set));

    if (group_by == "stage" || !hierarchy.empty()) {
      auto [part, labels] = group_by_block(cd);
      if (!hierarchy.empty()) {
        // "<stage>:split" keeps that stage per-port while others aggregate
        auto colon = hierarchy.find(':');
        if (colon == std::string::npos || hierarchy.substr(colon + 1) != "split")
          throw ValidationError("--hierarchy expects <stage>:split");
        const std::string target = hierarchy.substr(0, colon);
        int idx = pn.wave().subckt_index(target); // validates the name
        std::vector<std::vector<int>> part2;
        std::vector<std::string> labels2;
        for (std::size_t g = 0; g < part.size(); ++g) {
          if (static_cast<int>(g) == idx) {
            for (int src : part[g]) {
              part2.push_back({src});
              labels2.push_back(cd.source_labels[static_cast<std::size_t>(src)]);
            }
          } else {
            part2.push_back(part[g]);
            labels2.push_back(labels[g]);
          }
        }
        rep = aggregate(rep, part2, labels2);
      } else {
        rep = aggregate(rep, part, labels);
      }
    }
  }

  std::ostringstream txt;
  write_contribution_report(txt, rep);
  write_text_file(out_path, txt.str());
  std::map<std::string, std::string> outs{{"report", out_path}};
  if (!csv_path.empty()) {
    std::ostringstream csv;
    write_contribution_report(csv, rep, true);
    write_text_file(csv_path, csv.str());
    outs["csv"] = csv_path;
  }
  nlohmann::json cfg;
  cfg["group_by"] = group_by;
  cfg["bins"] = bins_mode;
  cfg["provenance"] = rep.provenance;
  stage_manifest(out_path + ".manifest.json", "dca", 0,
                 {{"experiment", (fs::path(records_dir) / "experiment.json").string()},
                  {"netlist", net_path}},
                 outs, cfg);
  std::cout << "wrote " << out_path << " (" << rep.bins.size() << " bins, " << rep.n_groups()
            << " groups";
  if (!rep.excluded_bins.empty()) std::cout << ", " << rep.excluded_bins.size() << " bins excluded";
  std::cout << ")\n";
  return 0;
}

int cmd_validate(const std::string& records_dir, const std::string& net_path,
                 const std::vector<std::string>& smallsignal, double factor,
                 const std::string& out_path) {
  auto records = records_io::load(records_dir);
  ParsedNetwork pn = parse_network_file(net_path);
  const auto& net = pn.wave();
  auto tabs = parse_smallsignal_args(smallsignal, net);
  auto bins = analysis_bins(records[0].grid, AnalysisBins::excited);
  auto set = smallsignal_set(net, tabs, records[0].grid, bins);
  auto v = smallsignal_validity(net, set, records, factor);

  std::ostringstream out;
  out << "# small-signal validity verdict v1\n# factor: " << factor << "\n# waves:";
  for (const auto& w : v.waves) out << ' ' << w;
  out << "\nbin f_hz valid worst_wave diff_power dist_power\n";
  for (std::size_t b = 0; b < v.bins.size(); ++b) {
    double worst = -1;
    std::size_t worst_w = 0;
    for (std::size_t w = 0; w < v.waves.size(); ++w) {
      const double margin = v.diff_power[b][w] - factor * v.dist_power[b][w];
      if (margin > worst) {
        worst = margin;
        worst_w = w;
      }
    }
    out << v.bins[b] << ' ' << detail::fmt17(v.freq_hz[b]) << ' ' << (v.bin_valid[b] ? 1 : 0) << ' '
        << v.waves[worst_w] << ' ' << detail::fmt17(v.diff_power[b][worst_w]) << ' '
        << detail::fmt17(v.dist_power[b][worst_w]) << "\n";
  }
  write_text_file(out_path, out.str());
  nlohmann::json cfg;
  cfg["factor"] = factor;
  stage_manifest(out_path + ".manifest.json", "validate", 0,
                 {{"experiment", (fs::path(records_dir) / "experiment.json").string()},
                  {"netlist", net_path}},
                 {{"verdict", out_path}}, cfg);
  std::cout << "small-signal representation valid on " << 100.0 * v.valid_fraction()
            << "% of bins; wrote " << out_path << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

int cmd_report(const std::string& in_path, const std::string& format, std::int64_t bin,
               bool percent, int top, const std::string& out_path) {
  std::ifstream in(in_path);
  if (!in) throw ValidationError("cannot open " + in_path);
  ContributionReport rep = read_contribution_report(in, in_path);
  std::ostringstream out;
  if (format == "csv") {
    write_contribution_report(out, rep, true);
  } else if (bin >= 0) {
    auto it = std::find(rep.bins.begin(), rep.bins.end(), bin);
    if (it == rep.bins.end()) throw ValidationError("report: bin " + std::to_string(bin) + " not in report");
    render_ranked(out, rep, static_cast<std::size_t>(it - rep.bins.begin()), percent);
  } else {
    const std::size_t n = std::min<std::size_t>(rep.bins.size(), top > 0 ? static_cast<std::size_t>(top)
                                                                         : rep.bins.size());
    for (std::size_t b = 0; b < n; ++b) render_ranked(out, rep, b, percent);
  }
  if (out_path.empty())
    std::cout << out.str();
  else
    write_text_file(out_path, out.str());
  return 0;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"best-linear-approximation distortion contribution analysis toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", version_string);

  // design
  auto* design = app.add_subcommand("design", "draw a multisine excitation design");
  std::string d_spec, d_tickler_of, d_feps, d_out, d_manifest;
  double d_rms = 1e-4;
  std::optional<std::uint64_t> d_seed;
  std::uint64_t d_seed_raw = 0;
  design->add_option("--spec", d_spec, "multisine spec file");
  design->add_option("--tickler-of", d_tickler_of, "derive a zippered tickler from a main design");
  design->add_option("--f-eps", d_feps, "tickler offset in Hz (rational, e.g. 1000/3)");
  design->add_option("--rms", d_rms, "tickler RMS");
  auto* d_seed_opt = design->add_option("--seed", d_seed_raw, "override the file seed");
  design->add_option("--out", d_out, "output design file")->required();
  design->add_option("--manifest", d_manifest, "manifest path");

  // simulate
  auto* sim = app.add_subcommand("simulate", "steady-state experiment over M phase realizations");
  std::string s_net, s_design, s_out;
  std::vector<std::string> s_ticklers;
  int s_m = 0, s_batch = 0, s_max_m = 0;
  std::uint64_t s_seed = 1;
  double s_target_sigma = 0;
  SolverFlags s_flags;
  sim->add_option("--net", s_net, "netlist")->required();
  sim->add_option("--design", s_design, "main excitation design")->required();
  sim->add_option("--tickler", s_ticklers, "tickler design file (repeatable)");
  sim->add_option("--m", s_m, "number of phase realizations");
  sim->add_option("--seed", s_seed, "experiment seed");
  sim->add_option("--target-sigma", s_target_sigma,
                  "grow M until the output-BLA uncertainty reaches this level");
  sim->add_option("--batch", s_batch, "budget batch size");
  sim->add_option("--max-m", s_max_m, "budget cap");
  sim->add_option("--out", s_out, "output record directory")->required();
  s_flags.add_to(sim);

  // estimate
  auto* est = app.add_subcommand("estimate", "BLA estimation from a record archive");
  std::string e_records, e_block, e_subckt, e_out;
  std::vector<std::string> e_refs;
  double e_cond = 1e8;
  est->add_option("--records", e_records, "record directory")->required();
  est->add_option("--block", e_block, "SISO block name");
  est->add_option("--subckt", e_subckt, "sub-circuit name (wave view)");
  est->add_option("--refs", e_refs, "reference names (default: all sources)")->delimiter(',');
  est->add_option("--cond-threshold", e_cond, "conditioning threshold for G_{R->A}");
  est->add_option("--out", e_out, "output estimate file")->required();

  // dca
  auto* dca = app.add_subcommand("dca", "distortion contribution analysis");
  std::string c_records, c_net, c_group = "port", c_hier, c_bins = "excited", c_out, c_csv;
  std::vector<std::string> c_smallsignal;
  double c_cond = 1e8;
  dca->add_option("--records", c_records, "record directory")->required();
  dca->add_option("--net", c_net, "netlist")->required();
  dca->add_option("--group-by", c_group, "port|stage")->check(CLI::IsMember({"port", "stage"}));
  dca->add_option("--hierarchy", c_hier, "<stage>:split to expand one stage into ports");
  dca->add_option("--bins", c_bins, "excited|inband")->check(CLI::IsMember({"excited", "inband"}));
  dca->add_option("--smallsignal", c_smallsignal, "[name=]smat file for weakly nonlinear sub-circuits");
  dca->add_option("--cond-threshold", c_cond, "conditioning threshold for MIMO estimation");
  dca->add_option("--out", c_out, "report file")->required();
  dca->add_option("--csv", c_csv, "wide-format CSV output");

  // validate
  auto* val = app.add_subcommand("validate", "small-signal validity test");
  std::string v_records, v_net, v_out;
  std::vector<std::string> v_smallsignal;
  double v_factor = 1.0;
  val->add_option("--records", v_records, "record directory")->required();
  val->add_option("--net", v_net, "netlist (wave view)")->required();
  val->add_option("--smallsignal", v_smallsignal, "[name=]smat file")->required();
  val->add_option("--factor", v_factor, "allowed |difference|^2 / distortion-level ratio");
  val->add_option("--out", v_out, "verdict file")->required();

  // report
  auto* repc = app.add_subcommand("report", "render a contribution report");
  std::string r_in, r_format = "txt", r_out;
  std::int64_t r_bin = -1;
  int r_top = 0;
  bool r_percent = false;
  repc->add_option("--in", r_in, "report file")->required();
  repc->add_option("--format", r_format, "txt|csv")->check(CLI::IsMember({"txt", "csv"}));
  repc->add_option("--bin", r_bin, "render one bin");
  repc->add_option("--top", r_top, "render only the first N bins");
  repc->add_flag("--percent", r_percent, "show signed percentages");
  repc->add_option("--out", r_out, "output path (default stdout)");

  try {
    app.parse(argc, argv);
    if (*d_seed_opt) d_seed = d_seed_raw;
    if (design->parsed())
      return cmd_design(d_spec, d_tickler_of, d_feps, d_rms, d_seed, d_out, d_manifest);
    if (sim->parsed())
      return cmd_simulate(s_net, s_design, s_ticklers, s_m, s_seed, s_flags, s_out, s_target_sigma,
                          s_batch, s_max_m);
    if (est->parsed()) return cmd_estimate(e_records, e_block, e_subckt, e_refs, e_cond, e_out);
    if (dca->parsed())
      return cmd_dca(c_records, c_net, c_group, c_hier, c_bins, c_smallsignal, c_cond, c_out, c_csv);
    if (val->parsed()) return cmd_validate(v_records, v_net, v_smallsignal, v_factor, v_out);
    if (repc->parsed()) return cmd_report(r_in, r_format, r_bin, r_percent, r_top, r_out);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : kExitValidation;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kExitNumerical;
  }
  return 0;
}
