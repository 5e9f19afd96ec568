#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <future>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "bladca/errors.hpp"
#include "bladca/excitation.hpp"
#include "bladca/fft.hpp"
#include "bladca/netmodel.hpp"
#include "bladca/rng.hpp"
#include "bladca/spectra.hpp"

namespace bladca {

struct SolveConfig {
  double tol = 1e-10;
  int max_iter = 200;
  std::int64_t harmonic_order = 0; // retained harmonics of the main f0; 0 = 3x highest excited bin
  double damping = 1.0;
  double oversample = 8.0;
  enum class Mode { freq, time } mode = Mode::freq;
  double ts = 0.0;   // time-domain step
  int periods = 16;  // time-domain periods simulated
  enum class TicklerMode { simultaneous, sequential } tickler_mode = TicklerMode::simultaneous;
  double warp_ts = 0.0; // >0: evaluate linear FRFs at trapezoidal-warped frequencies
  int threads = 1;
  std::int64_t max_union_bins = 1 << 20;
  double settle_tol = 1e-8;
};

/// Dense union grid in exact micro-fundamental units: bin i sits at i*micro.
/// The main grid occupies the residue class 0 of main_step; each tickler
/// occupies its own residue class, so responses never collide.
struct SolveGrid {
  Rational micro{1};
  std::int64_t bin_count = 0;
  std::int64_t main_step = 1;

  struct Source {
    std::string name;
    std::int64_t step = 1;
    std::int64_t offset = 0;                // micro offset of the residue class
    std::vector<std::int64_t> excited;      // excited micro indices
    double rms = 0.0;
  };
  std::vector<Source> sources; // [0] is the main reference

  double freq_hz(std::int64_t i) const { return (micro * i).value(); }

  /// Source owning bin i by residue class, or -1.
  int owner(std::int64_t i) const {
    for (std::size_t s = 0; s < sources.size(); ++s) {
      std::int64_t r = (i - sources[s].offset) % sources[s].step;
      if (r < 0) r += sources[s].step;
      if (r == 0) return static_cast<int>(s);
    }
    return -1;
  }
};

struct SolveDiagnostics {
  int iterations = 0;
  double residual = 0.0;
  double alias_peak = 0.0;   // spectral magnitude pushed past the retained band
  double settle_error = 0.0; // time-domain last-two-period discrepancy
};

/// Periodic steady state of one experiment realization: every signal as a
/// dense one-sided spectrum over the union grid.
struct SteadyStateRecord {
  int m = 0;
  SolveGrid grid;
  double ts = 0.0; // >0 when produced by the time-domain path (warped frequencies)
  std::vector<std::pair<std::string, std::vector<Complex>>> signals;
  SolveDiagnostics diag;

  const std::vector<Complex>& signal(const std::string& name) const {
    for (const auto& [n, v] : signals)
      if (n == name) return v;
    throw ValidationError("record: no signal named '" + name + "'");
  }
  bool has_signal(const std::string& name) const {
    for (const auto& [n, v] : signals)
      if (n == name) return true;
    return false;
  }
};

namespace detail {

/// One-sided spectra imply conjugate symmetry; at DC only the real part of a
/// complex frequency-flat entry survives.
inline Complex frf_at(const FrfSpec& f, double f_hz, bool dc, double warp_ts) {
  Complex v = f.eval(warp_ts > 0.0 && !dc ? warp_frequency(f_hz, warp_ts) : f_hz);
  return dc ? Complex(v.real(), 0.0) : v;
}

struct RelationEvalCtx {
  HarmonicTransform transform;
  int nfft = 0;
  std::int64_t bins = 0; // retained bins
  std::vector<double> freq_hz;
  double warp_ts = 0.0;
  double alias_peak = 0.0;

  std::vector<Complex> linear_apply(const FrfSpec& f, const std::vector<Complex>& in) {
    std::vector<Complex> out(in.size());
    for (std::size_t i = 0; i < in.size(); ++i)
      out[i] = frf_at(f, freq_hz[i], i == 0, warp_ts) * in[i];
    return out;
  }

  std::vector<double> to_time(const std::vector<Complex>& spec) {
    if (std::abs(spec[0].imag()) > 1e-9 * (1.0 + std::abs(spec[0].real())))
      throw NumericalError("solver: static map fed a spectrum with complex DC (non-real signal)");
    std::vector<Complex> fixed(spec);
    fixed[0] = Complex(spec[0].real(), 0.0);
    return transform.synthesize(fixed, nfft);
  }

  std::vector<Complex> to_freq(const std::vector<double>& time) {
    auto out = transform.analyze(time, static_cast<int>(bins - 1));
    alias_peak = std::max(alias_peak, transform.tail_peak(static_cast<int>(bins - 1)));
    return out;
  }

  std::vector<Complex> eval(const Relation& rel, const std::vector<Complex>& in) {
    if (rel.is_linear()) {
      std::vector<Complex> out(in);
      if (rel.pre) out = linear_apply(*rel.pre, out);
      if (rel.post) out = linear_apply(*rel.post, out);
      return out;
    }
    std::vector<Complex> cur(in);
    if (rel.pre) cur = linear_apply(*rel.pre, cur);
    std::vector<double> t = to_time(cur);
    const StaticMap& m = *rel.staticmap;
    for (std::size_t i = 0; i < t.size(); ++i) {
      try {
        t[i] = m.eval(t[i]);
      } catch (const NumericalError& e) {
        throw NumericalError(std::string(e.what()) + " at time sample " + std::to_string(i));
      }
    }
    cur = to_freq(t);
    if (rel.post) cur = linear_apply(*rel.post, cur);
    return cur;
  }
};

inline double rel_change(const std::vector<Complex>& now, const std::vector<Complex>& before) {
  double dn = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < now.size(); ++i) {
    dn += std::norm(now[i] - before[i]);
    nn += std::norm(now[i]);
  }
  // overflowing or NaN iterates mean divergence, never convergence
  if (!std::isfinite(dn) || !std::isfinite(nn) || nn > 1e200)
    return std::numeric_limits<double>::infinity();
  return std::sqrt(dn) / (std::sqrt(nn) + 1e-300);
}

struct ExcitationSet {
  const MultisineSpec* main = nullptr;
  std::vector<const MultisineSpec*> ticklers;
  std::vector<const Realization*> reals; // aligned: [main, ticklers...]
};

inline SolveGrid build_solve_grid(const ExcitationSet& ex, const SolveConfig& cfg) {
  const Rational f0 = ex.main->grid.f0();
  Rational micro = f0;
  for (const auto* t : ex.ticklers) micro = Rational::gcd(micro, t->grid.offset().abs());
  const std::int64_t q = Rational::exact_ratio(f0, micro);

  std::int64_t kmax = 0;
  for (std::size_t i : ex.main->excited_indices())
    kmax = std::max(kmax, ex.main->grid.bins()[i]);
  const std::int64_t order = cfg.harmonic_order > 0 ? cfg.harmonic_order : 3 * kmax;

  SolveGrid grid;
  grid.micro = micro;
  grid.main_step = q;
  grid.bin_count = q * (order + 1);
  if (grid.bin_count > cfg.max_union_bins)
    throw ValidationError("solver: union grid needs " + std::to_string(grid.bin_count) +
                          " bins (micro-fundamental " + micro.str() +
                          " Hz); raise max_union_bins or choose rational tickler offsets");

  auto add_source = [&](const std::string& name, const MultisineSpec& spec) {
    SolveGrid::Source src;
    src.name = name;
    src.step = q;
    src.offset = Rational::exact_ratio(spec.grid.offset(), micro);
    src.rms = spec.rms_target;
    for (std::size_t i : spec.excited_indices())
      src.excited.push_back(q * spec.grid.bins()[i] + src.offset);
    grid.sources.push_back(std::move(src));
  };
  add_source("r", *ex.main);
  for (std::size_t i = 0; i < ex.ticklers.size(); ++i)
    add_source("r.t" + std::to_string(i + 1), *ex.ticklers[i]);

  for (std::size_t a = 1; a < grid.sources.size(); ++a) {
    std::int64_t ra = ((grid.sources[a].offset % q) + q) % q;
    if (ra == 0) throw ValidationError("solver: tickler offset collides with the main grid");
    for (std::size_t b = 1; b < a; ++b) {
      std::int64_t rb = ((grid.sources[b].offset % q) + q) % q;
      if (ra == rb) throw ValidationError("solver: tickler offsets must be pairwise distinct");
    }
  }
  return grid;
}

/// Dense reference spectrum of one source on the union grid.
inline std::vector<Complex> reference_on_grid(const SolveGrid& grid, std::size_t source_idx,
                                              const MultisineSpec& spec, const Realization& real) {
  std::vector<Complex> out(static_cast<std::size_t>(grid.bin_count), Complex(0.0, 0.0));
  const auto& src = grid.sources[source_idx];
  auto excited = spec.excited_indices();
  for (std::size_t i = 0; i < excited.size(); ++i) {
    std::int64_t bin = src.excited[i];
    if (bin < grid.bin_count)
      out[static_cast<std::size_t>(bin)] = real.spectrum.values[excited[i]];
  }
  return out;
}

// ---------------------------------------------------------------------------
// SISO feedback network, frequency domain
// ---------------------------------------------------------------------------

inline bool siso_all_linear(const SisoFeedbackNetwork& net) {
  for (const auto& b : net.blocks)
    if (!b.is_linear()) return false;
  return true;
}

inline SteadyStateRecord solve_siso_freq(const SisoFeedbackNetwork& net, const ExcitationSet& ex,
                                         const SolveConfig& cfg) {
  if (!ex.ticklers.empty())
    throw ValidationError("solver: tickler sources apply to port networks only");
  net.validate();
  SolveGrid grid = build_solve_grid(ex, cfg);
  const std::size_t bins = static_cast<std::size_t>(grid.bin_count);
  const int N = net.n();

  RelationEvalCtx ctx;
  ctx.bins = grid.bin_count;
  ctx.nfft = HarmonicTransform::next_pow2(
      std::max<std::int64_t>(static_cast<std::int64_t>(cfg.oversample * static_cast<double>(grid.bin_count)),
                             2 * grid.bin_count));
  ctx.warp_ts = cfg.warp_ts;
  ctx.freq_hz.resize(bins);
  for (std::size_t i = 0; i < bins; ++i) ctx.freq_hz[i] = grid.freq_hz(static_cast<std::int64_t>(i));

  std::vector<Complex> r = reference_on_grid(grid, 0, *ex.main, *ex.reals[0]);
  std::vector<std::vector<Complex>> y(static_cast<std::size_t>(N),
                                      std::vector<Complex>(bins, Complex(0.0, 0.0)));
  std::vector<std::vector<Complex>> u(static_cast<std::size_t>(N),
                                      std::vector<Complex>(bins, Complex(0.0, 0.0)));

  auto compute_u = [&](int n) {
    auto& un = u[static_cast<std::size_t>(n)];
    for (std::size_t i = 0; i < bins; ++i)
      un[i] = frf_at(net.input_map[static_cast<std::size_t>(n)], ctx.freq_hz[i], i == 0, cfg.warp_ts) * r[i];
    for (int j = 0; j < N; ++j) {
      const FrfSpec& mij = net.feedback_map[static_cast<std::size_t>(n)][static_cast<std::size_t>(j)];
      if (mij.is_zero()) continue;
      for (std::size_t i = 0; i < bins; ++i)
        un[i] -= frf_at(mij, ctx.freq_hz[i], i == 0, cfg.warp_ts) * y[static_cast<std::size_t>(j)][i];
    }
  };

  SolveDiagnostics diag;
  if (siso_all_linear(net)) {
    // Per-bin dense solve: y = (I + G M)^{-1} G A r, exact in one pass.
    for (std::size_t i = 0; i < bins; ++i) {
      const bool dc = i == 0;
      const double f = ctx.freq_hz[i];
      Eigen::VectorXcd g(N);
      for (int n = 0; n < N; ++n) {
        const Relation& rel = net.blocks[static_cast<std::size_t>(n)].single_relation();
        Complex gn(1.0, 0.0);
        if (rel.pre) gn *= frf_at(*rel.pre, f, dc, cfg.warp_ts);
        if (rel.post) gn *= frf_at(*rel.post, f, dc, cfg.warp_ts);
        g(n) = gn;
      }
      Eigen::MatrixXcd m(N, N);
      Eigen::VectorXcd a(N);
      for (int n = 0; n < N; ++n) {
        a(n) = frf_at(net.input_map[static_cast<std::size_t>(n)], f, dc, cfg.warp_ts);
        for (int j = 0; j < N; ++j)
          m(n, j) = frf_at(net.feedback_map[static_cast<std::size_t>(n)][static_cast<std::size_t>(j)], f,
                           dc, cfg.warp_ts);
      }
      Eigen::MatrixXcd loop = Eigen::MatrixXcd::Identity(N, N) + g.asDiagonal() * m;
      Eigen::VectorXcd yv = loop.partialPivLu().solve(g.asDiagonal() * a * r[i]);
      for (int n = 0; n < N; ++n) y[static_cast<std::size_t>(n)][i] = yv(n);
    }
    diag.iterations = 1;
    diag.residual = 0.0;
    for (int n = 0; n < N; ++n) compute_u(n);
  } else {
    // Damped Gauss-Seidel sweeps: blocks updated in declaration order so that
    // feedforward chains are exact after the first sweep.
    bool converged = false;
    for (int it = 1; it <= cfg.max_iter; ++it) {
      double worst = 0.0;
      for (int n = 0; n < N; ++n) {
        compute_u(n);
        auto ynew = ctx.eval(net.blocks[static_cast<std::size_t>(n)].single_relation(),
                             u[static_cast<std::size_t>(n)]);
        auto& yn = y[static_cast<std::size_t>(n)];
        if (cfg.damping != 1.0)
          for (std::size_t i = 0; i < bins; ++i)
            ynew[i] = yn[i] + cfg.damping * (ynew[i] - yn[i]);
        worst = std::max(worst, rel_change(ynew, yn));
        yn = std::move(ynew);
      }
      diag.iterations = it;
      diag.residual = worst;
      if (worst < cfg.tol) { converged = true; break; }
      if (std::isinf(worst)) break; // diverged; no point iterating further
    }
    if (!converged)
      throw NumericalError("solver: fixed-point iteration did not converge (residual " +
                           std::to_string(diag.residual) + " after " +
                           std::to_string(diag.iterations) + " sweeps)");
    for (int n = 0; n < N; ++n) compute_u(n);
  }
  diag.alias_peak = ctx.alias_peak;

  std::vector<Complex> yt(bins, Complex(0.0, 0.0));
  for (int n = 0; n < N; ++n)
    for (std::size_t i = 0; i < bins; ++i)
      yt[i] += frf_at(net.output_map[static_cast<std::size_t>(n)], ctx.freq_hz[i], i == 0, cfg.warp_ts) *
               y[static_cast<std::size_t>(n)][i];

  SteadyStateRecord rec;
  rec.m = ex.reals[0]->index;
  rec.grid = std::move(grid);
  rec.diag = diag;
  rec.signals.emplace_back("r", std::move(r));
  for (int n = 0; n < N; ++n) {
    rec.signals.emplace_back("u." + net.blocks[static_cast<std::size_t>(n)].name,
                             std::move(u[static_cast<std::size_t>(n)]));
    rec.signals.emplace_back("y." + net.blocks[static_cast<std::size_t>(n)].name,
                             std::move(y[static_cast<std::size_t>(n)]));
  }
  rec.signals.emplace_back("y_t", std::move(yt));
  return rec;
}

// ---------------------------------------------------------------------------
// Port network, frequency domain
// ---------------------------------------------------------------------------

/// Linear sub-network of the wave balance: terminations and package. Global
/// port order is [gamma_in, gamma_out, package ports 1..P+2]; the package's
/// internal ports 3..P+2 face the sub-circuit ports in declaration order.
struct WaveLinearPart {
  int P = 0;
  // Per retained bin: factorization of (I - C_LL T_L) and the pieces needed
  // to propagate sub-circuit waves.
  std::vector<Eigen::PartialPivLU<Eigen::MatrixXcd>> lu;
  std::vector<Eigen::MatrixXcd> t_lin; // T_L per bin
};

inline WaveLinearPart build_wave_linear(const PortNetwork& net, const std::vector<double>& freq_hz,
                                        double warp_ts) {
  WaveLinearPart lin;
  lin.P = net.total_ports();
  const int dim = lin.P + 4;
  lin.lu.reserve(freq_hz.size());
  lin.t_lin.reserve(freq_hz.size());
  Eigen::MatrixXcd cll = Eigen::MatrixXcd::Zero(dim, dim);
  cll(0, 2) = cll(2, 0) = 1.0; // source termination <-> package external 1
  cll(1, 3) = cll(3, 1) = 1.0; // load termination  <-> package external 2
  for (std::size_t i = 0; i < freq_hz.size(); ++i) {
    const bool dc = i == 0;
    const double f = freq_hz[i];
    Eigen::MatrixXcd t = Eigen::MatrixXcd::Zero(dim, dim);
    t(0, 0) = frf_at(net.gamma_in, f, dc, warp_ts);
    t(1, 1) = frf_at(net.gamma_out, f, dc, warp_ts);
    for (int r = 0; r < lin.P + 2; ++r)
      for (int c = 0; c < lin.P + 2; ++c)
        t(2 + r, 2 + c) = frf_at(net.package[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)],
                                 f, dc, warp_ts);
    lin.lu.emplace_back(Eigen::MatrixXcd::Identity(dim, dim) - cll * t);
    lin.t_lin.push_back(std::move(t));
  }
  return lin;
}

inline SteadyStateRecord solve_wave_freq(const PortNetwork& net, const ExcitationSet& ex,
                                         const SolveConfig& cfg) {
  net.validate();
  SolveGrid grid = build_solve_grid(ex, cfg);
  const std::size_t bins = static_cast<std::size_t>(grid.bin_count);
  const int P = net.total_ports();
  const int NB = static_cast<int>(net.subckts.size());
  const double root_z0 = std::sqrt(net.z0);

  RelationEvalCtx ctx;
  ctx.bins = grid.bin_count;
  ctx.nfft = HarmonicTransform::next_pow2(
      std::max<std::int64_t>(static_cast<std::int64_t>(cfg.oversample * static_cast<double>(grid.bin_count)),
                             2 * grid.bin_count));
  ctx.warp_ts = cfg.warp_ts;
  ctx.freq_hz.resize(bins);
  for (std::size_t i = 0; i < bins; ++i) ctx.freq_hz[i] = grid.freq_hz(static_cast<std::int64_t>(i));

  WaveLinearPart lin = build_wave_linear(net, ctx.freq_hz, cfg.warp_ts);

  // Source emissions: the reference source emits (1 - gamma_in)/(2 sqrt z0) * R
  // at the input termination; every tickler emits the same way at the load.
  std::vector<std::vector<Complex>> refs;
  refs.push_back(reference_on_grid(grid, 0, *ex.main, *ex.reals[0]));
  for (std::size_t t = 0; t < ex.ticklers.size(); ++t)
    refs.push_back(reference_on_grid(grid, t + 1, *ex.ticklers[t], *ex.reals[t + 1]));

  std::vector<std::vector<Complex>> b_sub(static_cast<std::size_t>(P),
                                          std::vector<Complex>(bins, Complex(0.0, 0.0)));
  std::vector<std::vector<Complex>> a_sub(static_cast<std::size_t>(P),
                                          std::vector<Complex>(bins, Complex(0.0, 0.0)));
  std::vector<Complex> b_out(bins, Complex(0.0, 0.0));

  const int dim = P + 4;
  // Propagates the current sub-circuit outgoing waves through the linear part.
  auto linear_pass = [&]() {
    Eigen::VectorXcd rhs(dim), n_l(dim), a_l(dim), b_l(dim);
    for (std::size_t i = 0; i < bins; ++i) {
      const bool dc = i == 0;
      n_l.setZero();
      Complex g_in = frf_at(net.gamma_in, ctx.freq_hz[i], dc, cfg.warp_ts);
      Complex g_out = frf_at(net.gamma_out, ctx.freq_hz[i], dc, cfg.warp_ts);
      n_l(0) = (Complex(1.0, 0.0) - g_in) / (2.0 * root_z0) * refs[0][i];
      for (std::size_t t = 1; t < refs.size(); ++t)
        n_l(1) += (Complex(1.0, 0.0) - g_out) / (2.0 * root_z0) * refs[t][i];
      // rhs = C_LL n_L + C_LS b_S
      rhs.setZero();
      rhs(2) = n_l(0);
      rhs(3) = n_l(1);
      for (int p = 0; p < P; ++p) rhs(4 + p) += b_sub[static_cast<std::size_t>(p)][i];
      a_l = lin.lu[i].solve(rhs);
      b_l = lin.t_lin[i] * a_l + n_l;
      for (int p = 0; p < P; ++p) a_sub[static_cast<std::size_t>(p)][i] = b_l(4 + p);
      b_out[i] = b_l(3); // wave leaving package external port 2, incident on the load
    }
  };

  SolveDiagnostics diag;
  bool all_linear = true;
  for (const auto& s : net.subckts) all_linear = all_linear && s.is_linear();

  if (all_linear) {
    // Direct per-bin solve of the full wave balance (C - T) a = N with
    // T = blockdiag(gamma_in, gamma_out, package, S): exact in one pass.
    const int full = 2 * P + 4;
    Eigen::MatrixXcd c = Eigen::MatrixXcd::Zero(full, full);
    c(0, 2) = c(2, 0) = 1.0;
    c(1, 3) = c(3, 1) = 1.0;
    for (int p = 0; p < P; ++p) {
      c(4 + p, P + 4 + p) = 1.0;
      c(P + 4 + p, 4 + p) = 1.0;
    }
    Eigen::VectorXcd n_vec(full), a_all(full), b_all(full);
    for (std::size_t i = 0; i < bins; ++i) {
      const bool dc = i == 0;
      const double f = ctx.freq_hz[i];
      Eigen::MatrixXcd t = Eigen::MatrixXcd::Zero(full, full);
      Complex g_in = frf_at(net.gamma_in, f, dc, cfg.warp_ts);
      Complex g_out = frf_at(net.gamma_out, f, dc, cfg.warp_ts);
      t(0, 0) = g_in;
      t(1, 1) = g_out;
      for (int r = 0; r < P + 2; ++r)
        for (int cc = 0; cc < P + 2; ++cc)
          t(2 + r, 2 + cc) = frf_at(net.package[static_cast<std::size_t>(r)][static_cast<std::size_t>(cc)],
                                    f, dc, cfg.warp_ts);
      for (int nb = 0; nb < NB; ++nb) {
        const auto& blk = net.subckts[static_cast<std::size_t>(nb)];
        const int off = net.port_offset(nb);
        for (int r = 0; r < blk.ports; ++r)
          for (int cc = 0; cc < blk.ports; ++cc) {
            const auto& rel = blk.rel[static_cast<std::size_t>(r)][static_cast<std::size_t>(cc)];
            if (!rel) continue;
            Complex g(1.0, 0.0);
            if (rel->pre) g *= frf_at(*rel->pre, f, dc, cfg.warp_ts);
            if (rel->post) g *= frf_at(*rel->post, f, dc, cfg.warp_ts);
            t(P + 4 + off + r, P + 4 + off + cc) = g;
          }
      }
      n_vec.setZero();
      n_vec(0) = (Complex(1.0, 0.0) - g_in) / (2.0 * root_z0) * refs[0][i];
      for (std::size_t tk = 1; tk < refs.size(); ++tk)
        n_vec(1) += (Complex(1.0, 0.0) - g_out) / (2.0 * root_z0) * refs[tk][i];
      a_all = (c - t).partialPivLu().solve(n_vec);
      b_all = c * a_all;
      for (int p = 0; p < P; ++p) {
        a_sub[static_cast<std::size_t>(p)][i] = a_all(P + 4 + p);
        b_sub[static_cast<std::size_t>(p)][i] = b_all(P + 4 + p);
      }
      b_out[i] = a_all(1);
    }
    diag.iterations = 1;
    diag.residual = 0.0;
  } else {
    bool converged = false;
    for (int it = 1; it <= cfg.max_iter; ++it) {
      linear_pass();
      double worst = 0.0;
      for (int n = 0; n < NB; ++n) {
        const auto& blk = net.subckts[static_cast<std::size_t>(n)];
        const int off = net.port_offset(n);
        for (int i = 0; i < blk.ports; ++i) {
          std::vector<Complex> bnew(bins, Complex(0.0, 0.0));
          for (int j = 0; j < blk.ports; ++j) {
            const auto& rel = blk.rel[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
            if (!rel) continue;
            auto term = ctx.eval(*rel, a_sub[static_cast<std::size_t>(off + j)]);
            for (std::size_t k = 0; k < bins; ++k) bnew[k] += term[k];
          }
          auto& bcur = b_sub[static_cast<std::size_t>(off + i)];
          if (cfg.damping != 1.0)
            for (std::size_t k = 0; k < bins; ++k) bnew[k] = bcur[k] + cfg.damping * (bnew[k] - bcur[k]);
          worst = std::max(worst, rel_change(bnew, bcur));
          bcur = std::move(bnew);
        }
      }
      diag.iterations = it;
      diag.residual = worst;
      if (worst < cfg.tol && it >= 2) { converged = true; break; }
      if (std::isinf(worst)) break; // diverged
    }
    if (!converged)
      throw NumericalError("solver: wave fixed-point iteration did not converge (residual " +
                           std::to_string(diag.residual) + " after " + std::to_string(diag.iterations) +
                           " sweeps)");
    linear_pass();
  }
  diag.alias_peak = ctx.alias_peak;

  SteadyStateRecord rec;
  rec.m = ex.reals[0]->index;
  rec.grid = std::move(grid);
  rec.diag = diag;
  rec.signals.emplace_back("r", std::move(refs[0]));
  for (std::size_t t = 1; t < refs.size(); ++t)
    rec.signals.emplace_back("r.t" + std::to_string(t), std::move(refs[t]));
  for (int n = 0; n < NB; ++n) {
    const auto& blk = net.subckts[static_cast<std::size_t>(n)];
    const int off = net.port_offset(n);
    for (int p = 0; p < blk.ports; ++p) {
      rec.signals.emplace_back("a." + blk.name + "." + std::to_string(p + 1),
                               std::move(a_sub[static_cast<std::size_t>(off + p)]));
      rec.signals.emplace_back("b." + blk.name + "." + std::to_string(p + 1),
                               std::move(b_sub[static_cast<std::size_t>(off + p)]));
    }
  }
  rec.signals.emplace_back("b_t", std::move(b_out));
  return rec;
}

} // namespace detail

/// Steady state of one realization set (main first, then ticklers), computed
/// with the alternating frequency/time projection described in the config.
inline SteadyStateRecord solve_frequency_domain(const Network& network,
                                                const std::vector<const MultisineSpec*>& specs,
                                                const std::vector<const Realization*>& reals,
                                                const SolveConfig& cfg = {}) {
  if (specs.empty() || specs.size() != reals.size())
    throw ValidationError("solver: need aligned specs and realizations (main first)");
  detail::ExcitationSet ex;
  ex.main = specs[0];
  ex.reals = reals;
  for (std::size_t i = 1; i < specs.size(); ++i) {
    if (specs[i]->grid.offset().is_zero())
      throw ValidationError("solver: auxiliary excitations must be zippered ticklers");
    ex.ticklers.push_back(specs[i]);
  }
  if (std::holds_alternative<SisoFeedbackNetwork>(network))
    return detail::solve_siso_freq(std::get<SisoFeedbackNetwork>(network), ex, cfg);
  return detail::solve_wave_freq(std::get<PortNetwork>(network), ex, cfg);
}

// ---------------------------------------------------------------------------
// Time domain (trapezoidal, fixed step)
// ---------------------------------------------------------------------------

namespace detail {

/// Streaming application of an FRF in the time domain. Constants multiply;
/// one-pole lowpasses integrate trapezoidally, so the discrete-time response
/// sits exactly on the tan-warped frequency grid. Anything else has no
/// state-space form here.
struct TimeFilter {
  bool is_const = true;
  double gain = 1.0;
  double a = 0.0, b = 0.0; // y[n] = a*y[n-1] + b*(x[n] + x[n-1])
  double xm = 0.0, ym = 0.0;

  static TimeFilter make(const FrfSpec& f, double ts) {
    TimeFilter tf;
    if (f.kind == FrfSpec::Kind::constant) {
      if (std::abs(f.gain.imag()) > 0.0)
        throw ValidationError("time-domain solver: complex constant gains have no causal realization");
      tf.gain = f.gain.real();
      return tf;
    }
    if (f.kind == FrfSpec::Kind::lowpass1) {
      if (std::abs(f.gain.imag()) > 0.0)
        throw ValidationError("time-domain solver: complex lowpass gain not supported");
      // Trapezoidal step of y' = wc (g*x - y).
      const double wc = 2.0 * M_PI * f.fc_hz;
      const double h = wc * ts / 2.0;
      tf.is_const = false;
      tf.gain = f.gain.real();
      tf.a = (1.0 - h) / (1.0 + h);
      tf.b = h / (1.0 + h);
      return tf;
    }
    throw ValidationError("time-domain solver: FRF tables are not state-space representable");
  }

  double step(double x) {
    if (is_const) return gain * x;
    double y = a * ym + b * gain * (x + xm);
    xm = x;
    ym = y;
    return y;
  }
};

} // namespace detail

/// Trapezoidal fixed-step simulation of a feedforward SISO network. Simulates
/// `periods` periods, requires the last two to agree, DFTs the last one. The
/// record carries ts so consumers apply warp_grid when mixing with
/// continuous-frequency data.
inline SteadyStateRecord solve_time_domain(const Network& network, const MultisineSpec& spec,
                                           const Realization& real, double ts, int periods,
                                           const SolveConfig& cfg = {}) {
  if (!std::holds_alternative<SisoFeedbackNetwork>(network))
    throw ValidationError("time-domain solver: only SISO feedback networks are supported");
  const auto& net = std::get<SisoFeedbackNetwork>(network);
  net.validate();
  if (!(ts > 0.0)) throw ValidationError("time-domain solver: ts must be positive");
  if (periods < 2) throw ValidationError("time-domain solver: need at least two periods");
  const int N = net.n();
  for (int i = 0; i < N; ++i)
    for (int j = i; j < N; ++j)
      if (!net.feedback_map[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)].is_zero())
        throw ValidationError("time-domain solver: algebraic feedback loops are not supported "
                              "(M must be strictly lower triangular)");

  const double f0 = spec.grid.f0().value();
  const double n_samp_f = 1.0 / (f0 * ts);
  const std::int64_t n_samp = static_cast<std::int64_t>(std::llround(n_samp_f));
  if (std::abs(n_samp_f - static_cast<double>(n_samp)) > 1e-9 * n_samp_f)
    throw ValidationError("time-domain solver: ts must give an integer number of samples per period");

  std::int64_t kmax = 0;
  for (std::size_t i : spec.excited_indices()) kmax = std::max(kmax, spec.grid.bins()[i]);
  if (2 * kmax + 2 > n_samp)
    throw ValidationError("time-domain solver: sample rate below Nyquist for the excited band");

  // Reference samples, exact sum of sines.
  const std::int64_t total = n_samp * periods;
  std::vector<double> r(static_cast<std::size_t>(total), 0.0);
  {
    auto excited = spec.excited_indices();
    for (std::size_t ii = 0; ii < excited.size(); ++ii) {
      const double a = spec.amplitudes[excited[ii]];
      const double w = 2.0 * M_PI * f0 * static_cast<double>(spec.grid.bins()[excited[ii]]);
      const double ph = real.phases[ii];
      for (std::int64_t t = 0; t < total; ++t)
        r[static_cast<std::size_t>(t)] += a * std::sin(w * static_cast<double>(t) * ts + ph);
    }
  }

  auto filter_signal = [&](const FrfSpec& f, const std::vector<double>& x) {
    detail::TimeFilter tf = detail::TimeFilter::make(f, ts);
    std::vector<double> y(x.size());
    for (std::size_t t = 0; t < x.size(); ++t) y[t] = tf.step(x[t]);
    return y;
  };

  std::vector<std::vector<double>> y(static_cast<std::size_t>(N));
  std::vector<std::vector<double>> u(static_cast<std::size_t>(N));
  for (int n = 0; n < N; ++n) {
    const auto sn = static_cast<std::size_t>(n);
    std::vector<double> un(static_cast<std::size_t>(total), 0.0);
    if (!net.input_map[sn].is_zero()) {
      auto t = filter_signal(net.input_map[sn], r);
      for (std::size_t i = 0; i < un.size(); ++i) un[i] += t[i];
    }
    for (int j = 0; j < n; ++j) {
      const auto& mij = net.feedback_map[sn][static_cast<std::size_t>(j)];
      if (mij.is_zero()) continue;
      auto t = filter_signal(mij, y[static_cast<std::size_t>(j)]);
      for (std::size_t i = 0; i < un.size(); ++i) un[i] -= t[i];
    }
    const Relation& rel = net.blocks[sn].single_relation();
    std::vector<double> cur = rel.pre ? filter_signal(*rel.pre, un) : un;
    if (rel.staticmap) {
      for (std::size_t i = 0; i < cur.size(); ++i) {
        try {
          cur[i] = rel.staticmap->eval(cur[i]);
        } catch (const NumericalError& e) {
          throw NumericalError(std::string(e.what()) + " at time sample " + std::to_string(i));
        }
      }
    }
    if (rel.post) cur = filter_signal(*rel.post, cur);
    u[sn] = std::move(un);
    y[sn] = std::move(cur);
  }
  std::vector<double> yt(static_cast<std::size_t>(total), 0.0);
  for (int n = 0; n < N; ++n) {
    if (net.output_map[static_cast<std::size_t>(n)].is_zero()) continue;
    auto t = filter_signal(net.output_map[static_cast<std::size_t>(n)], y[static_cast<std::size_t>(n)]);
    for (std::size_t i = 0; i < yt.size(); ++i) yt[i] += t[i];
  }

  // Transient settled? Compare the last two periods of y_t.
  double dn = 0.0, nn = 0.0;
  for (std::int64_t t = 0; t < n_samp; ++t) {
    double last = yt[static_cast<std::size_t>(total - n_samp + t)];
    double prev = yt[static_cast<std::size_t>(total - 2 * n_samp + t)];
    dn += (last - prev) * (last - prev);
    nn += last * last;
  }
  const double settle = std::sqrt(dn) / (std::sqrt(nn) + 1e-300);
  if (settle > cfg.settle_tol)
    throw NumericalError("time-domain solver: transient not settled (last-two-period discrepancy " +
                         std::to_string(settle) + ")");

  SolveGrid grid;
  grid.micro = spec.grid.f0();
  grid.main_step = 1;
  std::int64_t order = cfg.harmonic_order > 0 ? cfg.harmonic_order : 3 * kmax;
  grid.bin_count = std::min<std::int64_t>(order + 1, n_samp / 2 + 1);
  SolveGrid::Source src;
  src.name = "r";
  src.step = 1;
  src.offset = 0;
  src.rms = spec.rms_target;
  for (std::size_t i : spec.excited_indices()) src.excited.push_back(spec.grid.bins()[i]);
  grid.sources.push_back(std::move(src));

  HarmonicTransform ht;
  Eigen::FFT<double> raw;
  auto analyze_last = [&](const std::vector<double>& x) {
    std::vector<double> last(x.end() - n_samp, x.end());
    std::vector<Complex> spec_full;
    raw.fwd(spec_full, last);
    std::vector<Complex> out(static_cast<std::size_t>(grid.bin_count));
    for (std::int64_t k = 0; k < grid.bin_count; ++k)
      out[static_cast<std::size_t>(k)] = spec_full[static_cast<std::size_t>(k)] / static_cast<double>(n_samp);
    return out;
  };

  SteadyStateRecord rec;
  rec.m = real.index;
  rec.grid = std::move(grid);
  rec.ts = ts;
  rec.diag.iterations = periods;
  rec.diag.settle_error = settle;
  rec.signals.emplace_back("r", analyze_last(r));
  for (int n = 0; n < N; ++n) {
    rec.signals.emplace_back("u." + net.blocks[static_cast<std::size_t>(n)].name,
                             analyze_last(u[static_cast<std::size_t>(n)]));
    rec.signals.emplace_back("y." + net.blocks[static_cast<std::size_t>(n)].name,
                             analyze_last(y[static_cast<std::size_t>(n)]));
  }
  rec.signals.emplace_back("y_t", analyze_last(yt));
  return rec;
}

// ---------------------------------------------------------------------------
// Experiments
// ---------------------------------------------------------------------------

namespace detail {

inline SteadyStateRecord solve_one_realization(const Network& network, const MultisineSpec& main,
                                               const std::vector<MultisineSpec>& ticklers, int m,
                                               std::uint64_t seed, const SolveConfig& cfg) {
  Realization main_real = draw_realization(main, m, derive_seed(seed, "src", 0));
  std::vector<Realization> tick_reals;
  tick_reals.reserve(ticklers.size());
  for (std::size_t t = 0; t < ticklers.size(); ++t)
    tick_reals.push_back(draw_realization(ticklers[t], m, derive_seed(seed, "src", t + 1)));

  if (cfg.mode == SolveConfig::Mode::time) {
    if (!ticklers.empty())
      throw ValidationError("solver: time-domain path does not support ticklers");
    return solve_time_domain(network, main, main_real, cfg.ts, cfg.periods, cfg);
  }

  auto solve_with = [&](const std::vector<std::size_t>& tick_idx) {
    std::vector<const MultisineSpec*> specs{&main};
    std::vector<const Realization*> reals{&main_real};
    for (std::size_t t : tick_idx) {
      specs.push_back(&ticklers[t]);
      reals.push_back(&tick_reals[t]);
    }
    return solve_frequency_domain(network, specs, reals, cfg);
  };

  if (ticklers.empty() || cfg.tickler_mode == SolveConfig::TicklerMode::simultaneous) {
    std::vector<std::size_t> all(ticklers.size());
    for (std::size_t t = 0; t < ticklers.size(); ++t) all[t] = t;
    return solve_with(all);
  }

  // Sequential: one solve per tickler with the main multisine still active.
  // Each partial solve lives on its own (coarser) micro grid; its bins remap
  // exactly onto the full union grid. Bins of tickler t's residue class come
  // from solve t, every other bin from solve 0.
  SolveGrid full;
  {
    detail::ExcitationSet ex;
    ex.main = &main;
    for (const auto& t : ticklers) ex.ticklers.push_back(&t);
    full = detail::build_solve_grid(ex, cfg);
  }
  SteadyStateRecord merged;
  merged.m = m;
  merged.grid = full;
  merged.signals.emplace_back("r", std::vector<Complex>(static_cast<std::size_t>(full.bin_count)));
  // u/y or a/b signal slots are created lazily from the first partial solve.
  auto merged_slot = [&](const std::string& name) -> std::vector<Complex>& {
    for (auto& [n, v] : merged.signals)
      if (n == name) return v;
    merged.signals.emplace_back(name,
                                std::vector<Complex>(static_cast<std::size_t>(full.bin_count)));
    return merged.signals.back().second;
  };

  for (std::size_t t = 0; t < ticklers.size(); ++t) {
    SteadyStateRecord part = solve_with({t});
    const std::int64_t ratio = Rational::exact_ratio(part.grid.micro, full.micro);
    auto remap = [&](const std::string& from, const std::string& to, bool residue_only) {
      const auto& pv = part.signal(from);
      auto& mv = merged_slot(to);
      if (residue_only) {
        const auto& src = full.sources[t + 1];
        for (std::int64_t i = src.offset; i < full.bin_count; i += src.step) {
          if (i < 0 || i % ratio != 0) continue;
          std::int64_t j = i / ratio;
          if (j < part.grid.bin_count) mv[static_cast<std::size_t>(i)] = pv[static_cast<std::size_t>(j)];
        }
      } else {
        for (std::int64_t j = 0; j < part.grid.bin_count; ++j) {
          std::int64_t i = j * ratio;
          if (i < full.bin_count) mv[static_cast<std::size_t>(i)] = pv[static_cast<std::size_t>(j)];
        }
      }
    };
    if (t == 0) {
      for (const auto& [name, vals] : part.signals)
        if (name != "r.t1") remap(name, name, false);
      merged.diag = part.diag;
    } else {
      for (const auto& [name, vals] : part.signals)
        if (name != "r.t1" && name != "r") remap(name, name, true);
      merged.diag.iterations = std::max(merged.diag.iterations, part.diag.iterations);
      merged.diag.residual = std::max(merged.diag.residual, part.diag.residual);
      merged.diag.alias_peak = std::max(merged.diag.alias_peak, part.diag.alias_peak);
    }
    remap("r.t1", "r.t" + std::to_string(t + 1), true);
  }
  return merged;
}

} // namespace detail

/// M steady-state records, main + ticklers active per config. Deterministic
/// given the seed: each record is a pure function of (network, specs, m, seed),
/// so the batch may run on any number of threads.
inline void run_experiment_streaming(const Network& network, const MultisineSpec& main,
                                     const std::vector<MultisineSpec>& ticklers, int count,
                                     std::uint64_t seed, const SolveConfig& cfg,
                                     const std::function<void(SteadyStateRecord&&)>& sink) {
  if (count < 1) throw ValidationError("run_experiment: need M >= 1");
  for (std::size_t a = 0; a < ticklers.size(); ++a)
    for (std::size_t b = 0; b < a; ++b)
      if (ticklers[a].grid.offset() == ticklers[b].grid.offset())
        throw ValidationError("run_experiment: tickler offsets must be pairwise distinct");

  auto solve_m = [&](int m) {
    try {
      return detail::solve_one_realization(network, main, ticklers, m, seed, cfg);
    } catch (const NumericalError& e) {
      throw NumericalError("realization m=" + std::to_string(m) + ": " + e.what());
    }
  };

  const int threads = std::max(1, cfg.threads);
  if (threads == 1) {
    for (int m = 0; m < count; ++m) sink(solve_m(m));
    return;
  }
  std::deque<std::future<SteadyStateRecord>> window;
  int next = 0;
  while (next < count || !window.empty()) {
    while (next < count && static_cast<int>(window.size()) < threads)
      window.push_back(std::async(std::launch::async, solve_m, next++));
    sink(window.front().get());
    window.pop_front();
  }
}

inline std::vector<SteadyStateRecord> run_experiment(const Network& network, const MultisineSpec& main,
                                                     const std::vector<MultisineSpec>& ticklers,
                                                     int count, std::uint64_t seed,
                                                     const SolveConfig& cfg = {}) {
  std::vector<SteadyStateRecord> out;
  out.reserve(static_cast<std::size_t>(count));
  run_experiment_streaming(network, main, ticklers, count, seed, cfg,
                           [&](SteadyStateRecord&& r) { out.push_back(std::move(r)); });
  return out;
}

} // namespace bladca
