#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include "bladca/blaest.hpp"
#include "bladca/errors.hpp"
#include "bladca/netmodel.hpp"
#include "bladca/solver.hpp"

namespace bladca {

// ---------------------------------------------------------------------------
// Analysis bins and BLA matrix sets
// ---------------------------------------------------------------------------

enum class AnalysisBins { excited, inband };

/// Micro-grid bins the DCA runs on: the main reference's excited bins, or
/// every main-residue bin inside the excited band (BLAs interpolated there).
inline std::vector<std::int64_t> analysis_bins(const SolveGrid& grid, AnalysisBins mode) {
  const auto& main = grid.sources.at(0);
  if (mode == AnalysisBins::excited) return main.excited;
  std::vector<std::int64_t> out;
  if (main.excited.empty()) return out;
  for (std::int64_t b = main.excited.front(); b <= main.excited.back(); b += main.step)
    out.push_back(b);
  return out;
}

/// Per-bin BLA matrix of all distortion sources: diagonal for the SISO view,
/// block diagonal (one block per sub-circuit) for the wave view. Carries the
/// signal stacking and source lineage used by the covariance builder.
struct BlaMatrixSet {
  std::vector<std::string> out_signals; // length P
  std::vector<std::string> in_signals;  // length P
  std::vector<std::string> source_labels;
  std::vector<int> source_block;
  std::vector<std::string> block_names;
  std::vector<std::int64_t> bins;
  std::vector<double> freq_hz;
  std::vector<Eigen::MatrixXcd> g; // P x P per bin
  std::vector<bool> valid;
  int m_used = 0;
  std::string provenance;

  int n_sources() const { return static_cast<int>(out_signals.size()); }
};

inline BlaMatrixSet bla_set_siso(const SisoFeedbackNetwork& net,
                                 const std::vector<SisoBlaEstimate>& blas, const SolveGrid& grid,
                                 const std::vector<std::int64_t>& bins) {
  const int N = net.n();
  if (static_cast<int>(blas.size()) != N)
    throw ValidationError("bla_set: need one SISO estimate per block");
  BlaMatrixSet set;
  set.bins = bins;
  set.m_used = blas.empty() ? 0 : blas[0].m_used;
  set.provenance = "diagonal SISO BLA set (raw-signal distortion covariance)";
  for (int n = 0; n < N; ++n) {
    const std::string& nm = net.blocks[static_cast<std::size_t>(n)].name;
    set.out_signals.push_back("y." + nm);
    set.in_signals.push_back("u." + nm);
    set.source_labels.push_back(nm);
    set.source_block.push_back(n);
    set.block_names.push_back(nm);
  }
  const std::int64_t step = grid.sources.at(0).step;
  for (std::int64_t b : bins) {
    set.freq_hz.push_back(grid.freq_hz(b));
    Eigen::MatrixXcd g = Eigen::MatrixXcd::Zero(N, N);
    bool ok = true;
    for (int n = 0; n < N; ++n) {
      const auto& est = blas[static_cast<std::size_t>(n)];
      bool direct = false;
      if (b % step == 0) {
        std::int64_t k = b / step;
        const auto& kb = est.grid.bins();
        auto it = std::lower_bound(kb.begin(), kb.end(), k);
        if (it != kb.end() && *it == k) {
          std::size_t i = static_cast<std::size_t>(it - kb.begin());
          if (!est.valid[i]) ok = false;
          g(n, n) = est.g_bla[i];
          direct = true;
        }
      }
      if (!direct) g(n, n) = eval_siso_bla(est, grid.freq_hz(b));
    }
    set.g.push_back(std::move(g));
    set.valid.push_back(ok);
  }
  return set;
}

inline BlaMatrixSet bla_set_wave(const PortNetwork& net, const std::vector<MimoBlaEstimate>& blas,
                                 const SolveGrid& grid, const std::vector<std::int64_t>& bins) {
  const int NB = static_cast<int>(net.subckts.size());
  if (static_cast<int>(blas.size()) != NB)
    throw ValidationError("bla_set: need one MIMO estimate per sub-circuit");
  const int P = net.total_ports();
  BlaMatrixSet set;
  set.bins = bins;
  set.m_used = blas.empty() ? 0 : blas[0].m_used;
  set.provenance = "block-diagonal wave BLA set (raw-signal distortion covariance)";
  for (int n = 0; n < NB; ++n) {
    const auto& blk = net.subckts[static_cast<std::size_t>(n)];
    if (blas[static_cast<std::size_t>(n)].ports != blk.ports)
      throw ValidationError("bla_set: estimate port count mismatch for '" + blk.name + "'");
    set.block_names.push_back(blk.name);
    for (int p = 1; p <= blk.ports; ++p) {
      set.out_signals.push_back("b." + blk.name + "." + std::to_string(p));
      set.in_signals.push_back("a." + blk.name + "." + std::to_string(p));
      set.source_labels.push_back(blk.name + "." + std::to_string(p));
      set.source_block.push_back(n);
    }
  }
  const std::int64_t step = grid.sources.at(0).step;
  for (std::int64_t b : bins) {
    const double f = grid.freq_hz(b);
    set.freq_hz.push_back(f);
    Eigen::MatrixXcd g = Eigen::MatrixXcd::Zero(P, P);
    bool ok = true;
    for (int n = 0; n < NB; ++n) {
      const auto& est = blas[static_cast<std::size_t>(n)];
      const int off = net.port_offset(n);
      bool direct = false;
      if (b % step == 0) {
        std::int64_t k = b / step;
        const auto& kb = est.grid.bins();
        auto it = std::lower_bound(kb.begin(), kb.end(), k);
        if (it != kb.end() && *it == k) {
          std::size_t i = static_cast<std::size_t>(it - kb.begin());
          if (!est.valid[i]) ok = false;
          g.block(off, off, est.ports, est.ports) = est.s_bla[i];
          direct = true;
        }
      }
      if (!direct) g.block(off, off, est.ports, est.ports) = est.at(f);
    }
    set.g.push_back(std::move(g));
    set.valid.push_back(ok);
  }
  return set;
}

/// Wave BLA set from supplied small-signal S-matrices (one callback per
/// sub-circuit index, evaluated on the analysis bins).
inline BlaMatrixSet bla_set_wave_smallsignal(
    const PortNetwork& net, const std::function<Eigen::MatrixXcd(int subckt, double f_hz)>& s_of,
    const SolveGrid& grid, const std::vector<std::int64_t>& bins) {
  const int NB = static_cast<int>(net.subckts.size());
  const int P = net.total_ports();
  BlaMatrixSet set;
  set.bins = bins;
  set.provenance = "block-diagonal small-signal S set";
  for (int n = 0; n < NB; ++n) {
    const auto& blk = net.subckts[static_cast<std::size_t>(n)];
    set.block_names.push_back(blk.name);
    for (int p = 1; p <= blk.ports; ++p) {
      set.out_signals.push_back("b." + blk.name + "." + std::to_string(p));
      set.in_signals.push_back("a." + blk.name + "." + std::to_string(p));
      set.source_labels.push_back(blk.name + "." + std::to_string(p));
      set.source_block.push_back(n);
    }
  }
  for (std::int64_t b : bins) {
    const double f = grid.freq_hz(b);
    set.freq_hz.push_back(f);
    Eigen::MatrixXcd g = Eigen::MatrixXcd::Zero(P, P);
    for (int n = 0; n < NB; ++n) {
      Eigen::MatrixXcd s = s_of(n, f);
      const int pn = net.subckts[static_cast<std::size_t>(n)].ports;
      if (s.rows() != pn || s.cols() != pn)
        throw ValidationError("small-signal S has wrong dimension for sub-circuit " + std::to_string(n));
      g.block(net.port_offset(n), net.port_offset(n), pn, pn) = s;
    }
    set.g.push_back(std::move(g));
    set.valid.push_back(true);
  }
  return set;
}

// ---------------------------------------------------------------------------
// Distortion covariance
// ---------------------------------------------------------------------------

/// Hermitian distortion-source covariance per analysis bin:
///   C_D = M [I, -G] C_Z [I, -G]^H
/// with C_Z the raw-signal stacked covariance ([outputs; inputs], no reference
/// normalization) so that non-excited bins are well defined. The raw variant
/// is the one under which the referred output power equals the directly
/// measured output distortion power; see the provenance string.
struct DistortionCovariance {
  std::vector<std::int64_t> bins;
  std::vector<double> freq_hz;
  std::vector<std::string> source_labels;
  std::vector<int> source_block;
  std::vector<std::string> block_names;
  std::vector<Eigen::MatrixXcd> cd;
  std::vector<double> eig_floor; // most negative eigenvalue per bin (reported, never clipped)
  std::vector<bool> valid;
  int m_used = 0;
  std::string provenance;
};

inline DistortionCovariance build_cd(const std::vector<SteadyStateRecord>& records,
                                     const BlaMatrixSet& set) {
  const int P = set.n_sources();
  const std::size_t M = records.size();
  if (static_cast<int>(M) < 2 * P)
    throw ValidationError("build_cd: full-rank C_D needs at least 2N phase realizations (N = " +
                          std::to_string(P) + " sources, got M = " + std::to_string(M) + ")");

  std::vector<const std::vector<Complex>*> outs(M * static_cast<std::size_t>(P));
  std::vector<const std::vector<Complex>*> ins(M * static_cast<std::size_t>(P));
  for (std::size_t m = 0; m < M; ++m)
    for (int s = 0; s < P; ++s) {
      outs[m * static_cast<std::size_t>(P) + static_cast<std::size_t>(s)] =
          &records[m].signal(set.out_signals[static_cast<std::size_t>(s)]);
      ins[m * static_cast<std::size_t>(P) + static_cast<std::size_t>(s)] =
          &records[m].signal(set.in_signals[static_cast<std::size_t>(s)]);
    }

  DistortionCovariance out;
  out.bins = set.bins;
  out.freq_hz = set.freq_hz;
  out.source_labels = set.source_labels;
  out.source_block = set.source_block;
  out.block_names = set.block_names;
  out.valid = set.valid;
  out.m_used = static_cast<int>(M);
  out.provenance = "C_D = M [I,-G] C_Z [I,-G]^H with raw-signal C_Z (no reference normalization), "
                   "accumulated on the projected residuals D = Y - G U; " +
                   set.provenance;
  out.cd.reserve(set.bins.size());
  out.eig_floor.reserve(set.bins.size());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> eig;
  for (std::size_t b = 0; b < set.bins.size(); ++b) {
    const std::size_t bin = static_cast<std::size_t>(set.bins[b]);
    // Projected residual of one realization: D = Y_stack - G U_stack. Forming
    // it before the outer products keeps the signal part cancelling exactly;
    // M [I,-G] C_Z [I,-G]^H is the same matrix up to that rounding.
    auto d_of = [&](std::size_t m) {
      Eigen::VectorXcd y(P), u(P);
      for (int s = 0; s < P; ++s) {
        y(s) = (*outs[m * static_cast<std::size_t>(P) + static_cast<std::size_t>(s)])[bin];
        u(s) = (*ins[m * static_cast<std::size_t>(P) + static_cast<std::size_t>(s)])[bin];
      }
      return Eigen::VectorXcd(y - set.g[b] * u);
    };
    Eigen::VectorXcd mean =
        pairwise_sum<Eigen::VectorXcd>(0, M, [&](std::size_t m) { return d_of(m); }) /
        static_cast<double>(M);
    Eigen::MatrixXcd cd = pairwise_sum<Eigen::MatrixXcd>(0, M, [&](std::size_t m) {
      Eigen::VectorXcd r = d_of(m) - mean;
      return Eigen::MatrixXcd(r * r.adjoint());
    });
    cd /= static_cast<double>(M - 1);
    cd = ((cd + cd.adjoint()) / 2.0).eval();
    eig.compute(cd, Eigen::EigenvaluesOnly);
    out.eig_floor.push_back(eig.eigenvalues().minCoeff());
    out.cd.push_back(std::move(cd));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Output referral
// ---------------------------------------------------------------------------

struct OutputReferral {
  enum class View { siso, wave };
  View view = View::siso;
  std::vector<std::int64_t> bins;
  std::vector<double> freq_hz;
  std::vector<Eigen::RowVectorXcd> t; // per bin, length = source count
  std::vector<bool> valid;
  std::vector<Complex> g_ref_to_out;  // composed reference-to-output BLA
};

/// SISO view: t_out = B (I_N + G M)^{-1}; the composed reference-to-output
/// BLA t_out * G * A is returned alongside for reporting.
inline OutputReferral tout_siso(const SisoFeedbackNetwork& net, const BlaMatrixSet& set) {
  net.validate();
  const int N = net.n();
  if (set.n_sources() != N) throw ValidationError("tout_siso: BLA set does not match block count");
  OutputReferral out;
  out.view = OutputReferral::View::siso;
  out.bins = set.bins;
  out.freq_hz = set.freq_hz;
  for (std::size_t b = 0; b < set.bins.size(); ++b) {
    const double f = set.freq_hz[b];
    Eigen::MatrixXcd loop = Eigen::MatrixXcd::Identity(N, N) + set.g[b] * net.m_at(f);
    Eigen::FullPivLU<Eigen::MatrixXcd> lu(loop);
    if (!lu.isInvertible() || !set.valid[b]) {
      out.t.emplace_back(Eigen::RowVectorXcd::Zero(N));
      out.g_ref_to_out.push_back({0.0, 0.0});
      out.valid.push_back(false);
      continue;
    }
    Eigen::RowVectorXcd t = net.b_at(f) * lu.inverse();
    out.g_ref_to_out.push_back((t * set.g[b] * net.a_at(f))(0, 0));
    out.t.push_back(std::move(t));
    out.valid.push_back(true);
  }
  return out;
}

namespace detail {

/// Full wave-balance matrix W = C - T over the component ports
/// [gamma_in, gamma_out, package(P+2), sub-circuits(P)].
inline Eigen::MatrixXcd wave_balance(const PortNetwork& net, const Eigen::MatrixXcd& s_bla,
                                     double f_hz) {
  const int P = net.total_ports();
  const int dim = 2 * P + 4;
  Eigen::MatrixXcd c = Eigen::MatrixXcd::Zero(dim, dim);
  c(0, 2) = c(2, 0) = 1.0;
  c(1, 3) = c(3, 1) = 1.0;
  for (int p = 0; p < P; ++p) {
    c(4 + p, P + 4 + p) = 1.0;
    c(P + 4 + p, 4 + p) = 1.0;
  }
  Eigen::MatrixXcd t = Eigen::MatrixXcd::Zero(dim, dim);
  t(0, 0) = net.gamma_in.eval(f_hz);
  t(1, 1) = net.gamma_out.eval(f_hz);
  for (int r = 0; r < P + 2; ++r)
    for (int cc = 0; cc < P + 2; ++cc)
      t(2 + r, 2 + cc) = net.package[static_cast<std::size_t>(r)][static_cast<std::size_t>(cc)].eval(f_hz);
  t.block(P + 4, P + 4, P, P) = s_bla;
  return c - t;
}

} // namespace detail

/// Wave view: with W = C - T and T = blockdiag(gamma_in, gamma_out, package,
/// S^BLA), the referral row is the load-incident row of W^{-1} restricted to
/// the distortion-source columns (the last P).
inline OutputReferral tout_wave(const PortNetwork& net, const BlaMatrixSet& set) {
  net.validate();
  const int P = net.total_ports();
  if (set.n_sources() != P) throw ValidationError("tout_wave: BLA set does not match port count");
  OutputReferral out;
  out.view = OutputReferral::View::wave;
  out.bins = set.bins;
  out.freq_hz = set.freq_hz;
  const double scale = 1.0 / (2.0 * std::sqrt(net.z0));
  for (std::size_t b = 0; b < set.bins.size(); ++b) {
    const double f = set.freq_hz[b];
    Eigen::MatrixXcd w = detail::wave_balance(net, set.g[b], f);
    Eigen::FullPivLU<Eigen::MatrixXcd> lu(w);
    if (!lu.isInvertible() || !set.valid[b]) {
      out.t.emplace_back(Eigen::RowVectorXcd::Zero(P));
      out.g_ref_to_out.push_back({0.0, 0.0});
      out.valid.push_back(false);
      continue;
    }
    Eigen::MatrixXcd winv = lu.inverse();
    out.t.push_back(winv.row(1).segment(P + 4, P));
    out.g_ref_to_out.push_back(winv(1, 0) * (Complex(1.0, 0.0) - net.gamma_in.eval(f)) * scale);
    out.valid.push_back(true);
  }
  return out;
}

/// Reference-to-wave FRFs predicted from a BLA (or small-signal) set: the
/// source vector holds (1-Gamma_S)/(2 sqrt z0) at the reference port; the
/// solved incident-wave vector yields the sub-circuit a-waves at the last P
/// rows and their b-waves at the package-internal rows 5..P+4.
struct ReferencePrediction {
  std::vector<std::int64_t> bins;
  std::vector<double> freq_hz;
  std::vector<Eigen::VectorXcd> a_frf; // per bin, length P
  std::vector<Eigen::VectorXcd> b_frf;
  std::vector<Complex> out_frf; // reference -> load-incident wave
  std::vector<bool> valid;
};

inline ReferencePrediction predict_reference_frf(const PortNetwork& net, const BlaMatrixSet& set,
                                                 std::optional<Complex> gamma_s = std::nullopt) {
  net.validate();
  const int P = net.total_ports();
  if (set.n_sources() != P) throw ValidationError("predict_reference_frf: BLA set does not match ports");
  ReferencePrediction out;
  out.bins = set.bins;
  out.freq_hz = set.freq_hz;
  for (std::size_t b = 0; b < set.bins.size(); ++b) {
    const double f = set.freq_hz[b];
    const Complex gs = gamma_s ? *gamma_s : net.gamma_in.eval(f);
    Eigen::MatrixXcd w = detail::wave_balance(net, set.g[b], f);
    Eigen::FullPivLU<Eigen::MatrixXcd> lu(w);
    if (!lu.isInvertible() || !set.valid[b]) {
      out.a_frf.emplace_back(Eigen::VectorXcd::Zero(P));
      out.b_frf.emplace_back(Eigen::VectorXcd::Zero(P));
      out.out_frf.push_back({0.0, 0.0});
      out.valid.push_back(false);
      continue;
    }
    Eigen::VectorXcd n = Eigen::VectorXcd::Zero(2 * P + 4);
    n(0) = (Complex(1.0, 0.0) - gs) / (2.0 * std::sqrt(net.z0));
    Eigen::VectorXcd x = lu.solve(n);
    out.a_frf.push_back(x.segment(P + 4, P));
    out.b_frf.push_back(x.segment(4, P));
    out.out_frf.push_back(x(1));
    out.valid.push_back(true);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Decomposition and aggregation
// ---------------------------------------------------------------------------

struct ContributionReport {
  std::vector<std::int64_t> bins; // included bins only
  std::vector<double> freq_hz;
  std::vector<std::string> group_labels;
  std::vector<std::vector<int>> group_members; // original source indices
  std::vector<std::pair<int, int>> pairs;      // (i, j) with i > j
  std::vector<double> total;                   // per bin, real >= 0 up to noise
  std::vector<std::vector<double>> direct;     // [bin][group]
  std::vector<std::vector<double>> corr;       // [bin][pair]
  std::vector<std::int64_t> excluded_bins;
  int m_used = 0;
  std::string provenance;

  int n_groups() const { return static_cast<int>(group_labels.size()); }
  int pair_index(int i, int j) const {
    if (i < j) std::swap(i, j);
    for (std::size_t k = 0; k < pairs.size(); ++k)
      if (pairs[k].first == i && pairs[k].second == j) return static_cast<int>(k);
    throw ValidationError("report: no such contribution pair");
  }
};

/// Direct and correlation contributions per bin:
///   C_i = [C_D]_ii |T_i|^2,  C_ij = 2 Re{ [C_D]_ij T_i T_j^H }  (i > j)
/// and their sum reproduces T C_D T^H exactly; the identity is checked at
/// every included bin.
inline ContributionReport decompose(const DistortionCovariance& cd, const OutputReferral& t) {
  if (cd.bins != t.bins) throw ValidationError("decompose: covariance and referral bins differ");
  const int P = static_cast<int>(cd.source_labels.size());
  ContributionReport rep;
  rep.group_labels = cd.source_labels;
  rep.group_members.resize(static_cast<std::size_t>(P));
  for (int i = 0; i < P; ++i) rep.group_members[static_cast<std::size_t>(i)] = {i};
  for (int i = 1; i < P; ++i)
    for (int j = 0; j < i; ++j) rep.pairs.emplace_back(i, j);
  rep.m_used = cd.m_used;
  rep.provenance = cd.provenance;

  for (std::size_t b = 0; b < cd.bins.size(); ++b) {
    if (!cd.valid[b] || !t.valid[b]) {
      rep.excluded_bins.push_back(cd.bins[b]);
      continue;
    }
    const Eigen::MatrixXcd& c = cd.cd[b];
    const Eigen::RowVectorXcd& row = t.t[b];
    std::vector<double> direct(static_cast<std::size_t>(P));
    for (int i = 0; i < P; ++i) direct[static_cast<std::size_t>(i)] = c(i, i).real() * std::norm(row(i));
    std::vector<double> corr;
    corr.reserve(rep.pairs.size());
    for (const auto& [i, j] : rep.pairs)
      corr.push_back(2.0 * (c(i, j) * row(i) * std::conj(row(j))).real());
    const double total = (row * c * row.adjoint())(0, 0).real();
    double sum = std::accumulate(direct.begin(), direct.end(), 0.0) +
                 std::accumulate(corr.begin(), corr.end(), 0.0);
    double mag = std::abs(total);
    for (double v : direct) mag += std::abs(v);
    for (double v : corr) mag += std::abs(v);
    if (std::abs(sum - total) > 1e-9 * (mag + 1e-300))
      throw NumericalError("decompose: contribution sum does not reproduce the referred power");
    rep.bins.push_back(cd.bins[b]);
    rep.freq_hz.push_back(cd.freq_hz[b]);
    rep.total.push_back(total);
    rep.direct.push_back(std::move(direct));
    rep.corr.push_back(std::move(corr));
  }
  return rep;
}

/// Combine groups: a combined group's direct contribution absorbs its
/// intra-group correlations; cross-group correlations add up; the total is
/// preserved exactly. Applying this hierarchically (coarser and coarser
/// partitions) is associative.
inline ContributionReport aggregate(const ContributionReport& rep,
                                    const std::vector<std::vector<int>>& partition,
                                    const std::vector<std::string>& labels) {
  const int G = static_cast<int>(partition.size());
  if (labels.size() != partition.size())
    throw ValidationError("aggregate: one label per group required");
  std::vector<int> owner(static_cast<std::size_t>(rep.n_groups()), -1);
  for (int g = 0; g < G; ++g)
    for (int i : partition[static_cast<std::size_t>(g)]) {
      if (i < 0 || i >= rep.n_groups() || owner[static_cast<std::size_t>(i)] != -1)
        throw ValidationError("aggregate: grouping is not a partition of the sources");
      owner[static_cast<std::size_t>(i)] = g;
    }
  for (int o : owner)
    if (o == -1) throw ValidationError("aggregate: grouping is not a partition of the sources");

  ContributionReport out;
  out.bins = rep.bins;
  out.freq_hz = rep.freq_hz;
  out.group_labels = labels;
  out.excluded_bins = rep.excluded_bins;
  out.total = rep.total;
  out.m_used = rep.m_used;
  out.provenance = rep.provenance + "; aggregated";
  out.group_members.resize(static_cast<std::size_t>(G));
  for (int g = 0; g < G; ++g)
    for (int i : partition[static_cast<std::size_t>(g)])
      for (int src : rep.group_members[static_cast<std::size_t>(i)])
        out.group_members[static_cast<std::size_t>(g)].push_back(src);
  for (int i = 1; i < G; ++i)
    for (int j = 0; j < i; ++j) out.pairs.emplace_back(i, j);

  for (std::size_t b = 0; b < rep.bins.size(); ++b) {
    std::vector<double> direct(static_cast<std::size_t>(G), 0.0);
    std::vector<double> corr(out.pairs.size(), 0.0);
    for (int i = 0; i < rep.n_groups(); ++i)
      direct[static_cast<std::size_t>(owner[static_cast<std::size_t>(i)])] += rep.direct[b][static_cast<std::size_t>(i)];
    for (std::size_t k = 0; k < rep.pairs.size(); ++k) {
      const int gi = owner[static_cast<std::size_t>(rep.pairs[k].first)];
      const int gj = owner[static_cast<std::size_t>(rep.pairs[k].second)];
      if (gi == gj) {
        direct[static_cast<std::size_t>(gi)] += rep.corr[b][k];
      } else {
        int a = std::max(gi, gj), c = std::min(gi, gj);
        for (std::size_t kk = 0; kk < out.pairs.size(); ++kk)
          if (out.pairs[kk].first == a && out.pairs[kk].second == c) {
            corr[kk] += rep.corr[b][k];
            break;
          }
      }
    }
    out.direct.push_back(std::move(direct));
    out.corr.push_back(std::move(corr));
  }
  return out;
}

/// Partition helper: one group per block, in block order.
inline std::pair<std::vector<std::vector<int>>, std::vector<std::string>>
group_by_block(const DistortionCovariance& cd) {
  std::vector<std::vector<int>> part(cd.block_names.size());
  for (std::size_t i = 0; i < cd.source_block.size(); ++i)
    part[static_cast<std::size_t>(cd.source_block[i])].push_back(static_cast<int>(i));
  return {part, cd.block_names};
}

// ---------------------------------------------------------------------------
// Small-signal validity test
// ---------------------------------------------------------------------------

struct ValidityVerdict {
  std::vector<std::int64_t> bins;
  std::vector<double> freq_hz;
  std::vector<std::string> waves;
  std::vector<std::vector<double>> diff_power; // [bin][wave]
  std::vector<std::vector<double>> dist_power; // [bin][wave], per unit reference
  std::vector<std::vector<bool>> wave_valid;
  std::vector<bool> bin_valid;
  double factor = 1.0;

  double valid_fraction() const {
    if (bin_valid.empty()) return 1.0;
    double n = 0;
    for (bool v : bin_valid) n += v ? 1.0 : 0.0;
    return n / static_cast<double>(bin_valid.size());
  }
};

/// Compares the reference-to-wave FRFs predicted from supplied small-signal
/// S-matrices against the directly estimated BLAs. A wave is valid at a bin
/// when the squared difference stays below factor times the estimated
/// distortion power (both per unit reference).
inline ValidityVerdict smallsignal_validity(const PortNetwork& net, const BlaMatrixSet& smallsignal,
                                            const std::vector<SteadyStateRecord>& records,
                                            double factor = 1.0) {
  const int P = net.total_ports();
  std::vector<std::string> stack = smallsignal.out_signals;
  stack.insert(stack.end(), smallsignal.in_signals.begin(), smallsignal.in_signals.end());
  SimoBlaEstimate est = estimate_simo(records, "r", stack);

  // The prediction must live on the estimation bins.
  const auto& main = records[0].grid.sources.at(0);
  if (smallsignal.bins != main.excited)
    throw ValidationError("smallsignal_validity: supply the small-signal set on the main excited bins");
  ReferencePrediction pred = predict_reference_frf(net, smallsignal);

  ValidityVerdict v;
  v.bins = smallsignal.bins;
  v.freq_hz = smallsignal.freq_hz;
  v.waves = stack;
  v.factor = factor;
  const double m = static_cast<double>(est.m_used);
  for (std::size_t b = 0; b < v.bins.size(); ++b) {
    std::vector<double> dp(stack.size()), lv(stack.size());
    std::vector<bool> wv(stack.size());
    bool all = true;
    for (std::size_t w = 0; w < stack.size(); ++w) {
      const Complex got = est.mean[b](static_cast<Eigen::Index>(w));
      const Complex want = w < static_cast<std::size_t>(P)
                               ? pred.b_frf[b](static_cast<Eigen::Index>(w))
                               : pred.a_frf[b](static_cast<Eigen::Index>(w) - P);
      const double diff = std::norm(got - want);
      // M * C_Z diagonal = per-realization distortion power per unit reference.
      const double dist = m * est.cov[b](static_cast<Eigen::Index>(w), static_cast<Eigen::Index>(w)).real();
      const double floor = std::norm(1e-12 * (std::abs(got) + std::abs(want)));
      const bool ok = pred.valid[b] && diff <= factor * std::max(dist, floor);
      dp[w] = diff;
      lv[w] = dist;
      wv[w] = ok;
      all = all && ok;
    }
    v.diff_power.push_back(std::move(dp));
    v.dist_power.push_back(std::move(lv));
    v.wave_valid.push_back(std::move(wv));
    v.bin_valid.push_back(all);
  }
  return v;
}

// ---------------------------------------------------------------------------
// Report serialization
// ---------------------------------------------------------------------------

inline void write_contribution_report(std::ostream& out, const ContributionReport& rep,
                                      bool csv = false) {
  const char sep = csv ? ',' : ' ';
  if (!csv) {
    out << "# distortion contribution report v1\n";
    out << "# provenance: " << rep.provenance << "\n";
    out << "# realizations: " << rep.m_used << "\n";
    if (!rep.excluded_bins.empty()) {
      out << "# excluded bins:";
      for (std::int64_t b : rep.excluded_bins) out << ' ' << b;
      out << "\n";
    }
  }
  out << "bin" << sep << "f_hz" << sep << "total";
  for (const auto& l : rep.group_labels) out << sep << "C[" << l << "]";
  for (const auto& [i, j] : rep.pairs)
    out << sep << "C[" << rep.group_labels[static_cast<std::size_t>(i)] << ","
        << rep.group_labels[static_cast<std::size_t>(j)] << "]";
  out << "\n";
  for (std::size_t b = 0; b < rep.bins.size(); ++b) {
    out << rep.bins[b] << sep << detail::fmt17(rep.freq_hz[b]) << sep << detail::fmt17(rep.total[b]);
    for (double v : rep.direct[b]) out << sep << detail::fmt17(v);
    for (double v : rep.corr[b]) out << sep << detail::fmt17(v);
    out << "\n";
  }
}

inline ContributionReport read_contribution_report(std::istream& in,
                                                   const std::string& source = "<stream>") {
  ContributionReport rep;
  std::string line;
  int lineno = 0;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++lineno;
    std::string s = detail::strip(line);
    if (s.empty()) continue;
    if (s[0] == '#') {
      if (s.find("# excluded bins:") == 0) {
        auto toks = detail::split_ws(s.substr(16));
        for (const auto& t : toks) rep.excluded_bins.push_back(std::stoll(t));
      } else if (s.find("# realizations:") == 0) {
        rep.m_used = std::stoi(detail::strip(s.substr(15)));
      } else if (s.find("# provenance:") == 0) {
        rep.provenance = detail::strip(s.substr(13));
      }
      continue;
    }
    auto toks = detail::split_ws(s);
    if (!header_seen) {
      if (toks.size() < 3 || toks[0] != "bin")
        throw ValidationError(source + ":" + std::to_string(lineno) + ": expected report column header");
      for (std::size_t c = 3; c < toks.size(); ++c) {
        const std::string& t = toks[c];
        if (t.size() < 4 || t.substr(0, 2) != "C[" || t.back() != ']')
          throw ValidationError(source + ":" + std::to_string(lineno) + ": bad contribution column '" + t + "'");
        std::string body = t.substr(2, t.size() - 3);
        auto comma = body.find(',');
        if (comma == std::string::npos) {
          rep.group_labels.push_back(body);
          rep.group_members.push_back({static_cast<int>(rep.group_labels.size()) - 1});
        } else {
          auto find_label = [&](const std::string& l) {
            for (std::size_t g = 0; g < rep.group_labels.size(); ++g)
              if (rep.group_labels[g] == l) return static_cast<int>(g);
            throw ValidationError(source + ":" + std::to_string(lineno) + ": pair references unknown group '" + l + "'");
          };
          rep.pairs.emplace_back(find_label(body.substr(0, comma)), find_label(body.substr(comma + 1)));
        }
      }
      header_seen = true;
      continue;
    }
    const std::size_t want = 3 + rep.group_labels.size() + rep.pairs.size();
    if (toks.size() != want)
      throw ValidationError(source + ":" + std::to_string(lineno) + ": expected " + std::to_string(want) + " columns");
    rep.bins.push_back(std::stoll(toks[0]));
    rep.freq_hz.push_back(std::stod(toks[1]));
    rep.total.push_back(std::stod(toks[2]));
    std::vector<double> d, c;
    std::size_t t = 3;
    for (std::size_t g = 0; g < rep.group_labels.size(); ++g) d.push_back(std::stod(toks[t++]));
    for (std::size_t p = 0; p < rep.pairs.size(); ++p) c.push_back(std::stod(toks[t++]));
    rep.direct.push_back(std::move(d));
    rep.corr.push_back(std::move(c));
  }
  if (!header_seen) throw ValidationError(source + ": not a contribution report");
  return rep;
}

/// Ranked per-frequency table with signed percentages. Percentages are
/// suppressed when the total is so close to zero that they lose meaning
/// (strong cancellation), in which case absolute values still print.
inline void render_ranked(std::ostream& out, const ContributionReport& rep, std::size_t bin_index,
                          bool percentages = true) {
  if (bin_index >= rep.bins.size()) throw ValidationError("render_ranked: bin index out of range");
  struct Row {
    std::string label;
    double value;
  };
  std::vector<Row> rows;
  for (std::size_t g = 0; g < rep.group_labels.size(); ++g)
    rows.push_back({"C[" + rep.group_labels[g] + "]", rep.direct[bin_index][g]});
  for (std::size_t k = 0; k < rep.pairs.size(); ++k)
    rows.push_back({"C[" + rep.group_labels[static_cast<std::size_t>(rep.pairs[k].first)] + "," +
                        rep.group_labels[static_cast<std::size_t>(rep.pairs[k].second)] + "]",
                    rep.corr[bin_index][k]});
  std::sort(rows.begin(), rows.end(),
            [](const Row& a, const Row& b) { return std::abs(a.value) > std::abs(b.value); });
  double source_power = 0.0;
  for (double v : rep.direct[bin_index]) source_power += v;
  const double total = rep.total[bin_index];
  const bool show_pct = percentages && std::abs(total) >= 1e-12 * source_power;
  out << "bin " << rep.bins[bin_index] << "  f = " << detail::fmt17(rep.freq_hz[bin_index])
      << " Hz  total = " << detail::fmt17(total) << "\n";
  for (const auto& r : rows) {
    out << "  " << r.label << " = " << detail::fmt17(r.value);
    if (show_pct) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%+.1f%%", 100.0 * r.value / total);
      out << "  (" << buf << ")";
    }
    out << "\n";
  }
}

} // namespace bladca
