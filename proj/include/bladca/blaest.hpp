#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SVD>

#include "bladca/errors.hpp"
#include "bladca/reduce.hpp"
#include "bladca/solver.hpp"
#include "bladca/spectra.hpp"

namespace bladca {

namespace detail {

inline std::size_t source_index(const SolveGrid& grid, const std::string& name) {
  for (std::size_t s = 0; s < grid.sources.size(); ++s)
    if (grid.sources[s].name == name) return s;
  throw ValidationError("records carry no reference named '" + name + "'");
}

/// Linear interpolation on real and imaginary parts, nearest-neighbour hold
/// beyond the endpoints.
inline Complex interp_complex(const std::vector<double>& x, const std::vector<Complex>& y, double xq) {
  if (x.empty()) throw ValidationError("interpolation: empty support");
  if (xq <= x.front()) return y.front();
  if (xq >= x.back()) return y.back();
  auto it = std::upper_bound(x.begin(), x.end(), xq);
  std::size_t hi = static_cast<std::size_t>(it - x.begin());
  std::size_t lo = hi - 1;
  double t = (xq - x[lo]) / (x[hi] - x[lo]);
  return y[lo] + t * (y[hi] - y[lo]);
}

} // namespace detail

/// Reference grid of one record source, reconstructed in exact arithmetic.
inline FrequencyGrid reference_grid(const SolveGrid& grid, const std::string& reference) {
  const auto& src = grid.sources[detail::source_index(grid, reference)];
  Rational f0 = grid.micro * src.step;
  Rational offset = grid.micro * src.offset;
  std::vector<std::int64_t> bins;
  bins.reserve(src.excited.size());
  for (std::int64_t i : src.excited) bins.push_back((i - src.offset) / src.step);
  std::vector<BinLabel> labels(bins.size(), BinLabel::excited);
  return FrequencyGrid(f0, offset, std::move(bins), std::move(labels));
}

/// Robust-method SIMO estimate: per reference bin the stacked signal vector is
/// normalized by the reference and averaged over realizations; the sample
/// covariance of the mean expresses the uncertainty.
struct SimoBlaEstimate {
  FrequencyGrid grid;                    // the reference's excited bins
  std::vector<std::string> signal_names; // stacking order of Z
  std::vector<Eigen::VectorXcd> mean;    // Z(j w_k)
  std::vector<Eigen::MatrixXcd> cov;     // C_Z(j w_k), Hermitian
  int m_used = 0;
  std::string reference;

  std::size_t n_signals() const { return signal_names.size(); }
};

/// Mean and Eq.-5-style covariance of a stacked signal vector on arbitrary
/// union-grid bins; `normalize` divides by the named reference realization by
/// realization (the BLA path), otherwise raw signal statistics are formed
/// (the distortion-power path). Accumulation is pairwise for schedule-stable
/// rounding.
struct StackedStats {
  std::vector<std::int64_t> bins; // micro indices
  std::vector<double> freq_hz;
  std::vector<std::string> signal_names;
  std::vector<Eigen::VectorXcd> mean;
  std::vector<Eigen::MatrixXcd> cov; // covariance of the mean: sum r r^H / (M(M-1))
  bool normalized = false;
  int m_used = 0;
};

inline StackedStats stacked_stats(const std::vector<SteadyStateRecord>& records,
                                  const std::vector<std::string>& signal_names,
                                  const std::vector<std::int64_t>& bins,
                                  const std::optional<std::string>& normalize_reference) {
  if (records.size() < 2) throw ValidationError("estimation: needs M >= 2 realizations");
  const std::size_t M = records.size();
  const std::size_t S = signal_names.size();
  const std::size_t B = bins.size();

  StackedStats out;
  out.bins = bins;
  out.signal_names = signal_names;
  out.normalized = normalize_reference.has_value();
  out.m_used = static_cast<int>(M);
  out.freq_hz.reserve(B);
  for (std::int64_t b : bins) out.freq_hz.push_back(records[0].grid.freq_hz(b));

  std::vector<const std::vector<Complex>*> ref(M, nullptr);
  if (normalize_reference)
    for (std::size_t m = 0; m < M; ++m) ref[m] = &records[m].signal(*normalize_reference);
  std::vector<std::vector<const std::vector<Complex>*>> sig(M);
  for (std::size_t m = 0; m < M; ++m) {
    sig[m].reserve(S);
    for (const auto& name : signal_names) sig[m].push_back(&records[m].signal(name));
  }

  auto z_of = [&](std::size_t m, std::size_t bi) {
    Eigen::VectorXcd z(S);
    const std::size_t bin = static_cast<std::size_t>(bins[bi]);
    for (std::size_t s = 0; s < S; ++s) z(s) = (*sig[m][s])[bin];
    if (normalize_reference) {
      Complex r = (*ref[m])[bin];
      if (r == Complex(0.0, 0.0))
        throw ValidationError("estimation: zero reference bin (m=" + std::to_string(records[m].m) +
                              ", micro bin k=" + std::to_string(bins[bi]) + ")");
      z /= r;
    }
    return z;
  };

  out.mean.reserve(B);
  out.cov.reserve(B);
  for (std::size_t bi = 0; bi < B; ++bi) {
    Eigen::VectorXcd mean =
        pairwise_sum<Eigen::VectorXcd>(0, M, [&](std::size_t m) { return z_of(m, bi); }) /
        static_cast<double>(M);
    Eigen::MatrixXcd acc = pairwise_sum<Eigen::MatrixXcd>(0, M, [&](std::size_t m) {
      Eigen::VectorXcd r = z_of(m, bi) - mean;
      return Eigen::MatrixXcd(r * r.adjoint());
    });
    acc /= static_cast<double>(M) * static_cast<double>(M - 1);
    acc = ((acc + acc.adjoint()) / 2.0).eval(); // keep exactly Hermitian
    out.mean.push_back(std::move(mean));
    out.cov.push_back(std::move(acc));
  }
  return out;
}

inline SimoBlaEstimate estimate_simo(const std::vector<SteadyStateRecord>& records,
                                     const std::string& reference,
                                     const std::vector<std::string>& signal_names) {
  if (records.size() < 2) throw ValidationError("estimate_simo: the covariance needs M >= 2");
  const SolveGrid& grid = records[0].grid;
  const auto& src = grid.sources[detail::source_index(grid, reference)];
  StackedStats st = stacked_stats(records, signal_names, src.excited, reference);
  SimoBlaEstimate est;
  est.grid = reference_grid(grid, reference);
  est.signal_names = signal_names;
  est.mean = std::move(st.mean);
  est.cov = std::move(st.cov);
  est.m_used = st.m_used;
  est.reference = reference;
  return est;
}

/// SISO BLA with variance from a SIMO estimate:
///   G = Z[out]/Z[in],  sigma^2 = |1/Z[in]|^2 * V C V^H,  V = [1, -G]
/// restricted to the chosen (out, in) sub-block. Vanishing denominators flag
/// the bin instead of failing.
struct SisoBlaEstimate {
  FrequencyGrid grid;
  std::vector<Complex> g_bla;
  std::vector<double> variance;
  std::vector<bool> valid;
  int m_used = 0;
  std::string provenance;
};

inline SisoBlaEstimate simo_to_siso(const SimoBlaEstimate& simo, std::size_t out_index,
                                    std::size_t in_index) {
  if (out_index >= simo.n_signals() || in_index >= simo.n_signals() || out_index == in_index)
    throw ValidationError("simo_to_siso: bad signal indices");
  SisoBlaEstimate est;
  est.grid = simo.grid;
  est.m_used = simo.m_used;
  est.provenance = "ratio " + simo.signal_names[out_index] + " / " + simo.signal_names[in_index] +
                   " of SIMO BLA from " + simo.reference;
  const std::size_t B = simo.mean.size();
  est.g_bla.resize(B);
  est.variance.resize(B);
  est.valid.resize(B);
  for (std::size_t b = 0; b < B; ++b) {
    const Complex num = simo.mean[b](static_cast<Eigen::Index>(out_index));
    const Complex den = simo.mean[b](static_cast<Eigen::Index>(in_index));
    const double scale = simo.mean[b].cwiseAbs().maxCoeff();
    if (std::abs(den) <= 1e-14 * scale) {
      est.g_bla[b] = Complex(0.0, 0.0);
      est.variance[b] = 0.0;
      est.valid[b] = false;
      continue;
    }
    const Complex g = num / den;
    Eigen::RowVector2cd v(Complex(1.0, 0.0), -g);
    Eigen::Matrix2cd c;
    c << simo.cov[b](static_cast<Eigen::Index>(out_index), static_cast<Eigen::Index>(out_index)),
        simo.cov[b](static_cast<Eigen::Index>(out_index), static_cast<Eigen::Index>(in_index)),
        simo.cov[b](static_cast<Eigen::Index>(in_index), static_cast<Eigen::Index>(out_index)),
        simo.cov[b](static_cast<Eigen::Index>(in_index), static_cast<Eigen::Index>(in_index));
    est.g_bla[b] = g;
    est.variance[b] = std::max(0.0, (v * c * v.adjoint())(0, 0).real() / std::norm(den));
    est.valid[b] = true;
  }
  return est;
}

/// Evaluate a SISO estimate at an arbitrary frequency (linear interpolation on
/// real/imaginary parts between excited bins, endpoints held).
inline Complex eval_siso_bla(const SisoBlaEstimate& est, double f_hz) {
  std::vector<double> x;
  std::vector<Complex> y;
  x.reserve(est.g_bla.size());
  y.reserve(est.g_bla.size());
  for (std::size_t i = 0; i < est.g_bla.size(); ++i) {
    if (!est.valid[i]) continue;
    x.push_back(est.grid.freq_hz(i));
    y.push_back(est.g_bla[i]);
  }
  return detail::interp_complex(x, y, f_hz);
}

// ---------------------------------------------------------------------------
// MIMO BLA via zippered references
// ---------------------------------------------------------------------------

struct MimoBlaEstimate {
  FrequencyGrid grid; // the main reference's excited bins
  int ports = 0;
  std::vector<Eigen::MatrixXcd> s_bla;   // p x p per bin
  std::vector<Eigen::MatrixXcd> cov_vec; // p^2 x p^2 covariance of vec(S), column-major
  std::vector<double> cond;              // condition number of G_{R->A}
  std::vector<bool> valid;               // cond below threshold and inversion succeeded
  double cond_threshold = 1e8;
  int m_used = 0;
  std::string subckt;
  std::vector<std::string> overrides; // provenance of pinned entries

  /// Variance of one S entry: the matching diagonal element of cov_vec
  /// (column-major vec, so S(i,j) sits at index (j-1)*p + (i-1)).
  double entry_variance(std::size_t bin, int out_port, int in_port) const {
    Eigen::Index idx = static_cast<Eigen::Index>((in_port - 1) * ports + (out_port - 1));
    return cov_vec[bin](idx, idx).real();
  }

  Eigen::MatrixXcd at(double f_hz) const {
    std::vector<double> x;
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < s_bla.size(); ++i)
      if (valid[i]) {
        x.push_back(grid.freq_hz(i));
        idx.push_back(i);
      }
    if (x.empty()) throw ValidationError("mimo bla: no valid bins");
    Eigen::MatrixXcd out(ports, ports);
    for (int r = 0; r < ports; ++r)
      for (int c = 0; c < ports; ++c) {
        std::vector<Complex> y;
        y.reserve(idx.size());
        for (std::size_t i : idx) y.push_back(s_bla[i](r, c));
        out(r, c) = detail::interp_complex(x, y, f_hz);
      }
    return out;
  }
};

/// S^BLA = G_{R->B} (G_{R->A})^-1 assembled per main-grid bin from one SIMO
/// estimate per reference; tickler-grid estimates (means and covariances) are
/// linearly interpolated to the main bins. The covariance of vec(S) follows
/// from the Kronecker transform T = ((G_{R->A})^-1)^T (x) [I, -S].
inline MimoBlaEstimate estimate_mimo(const std::vector<SteadyStateRecord>& records,
                                     const std::string& subckt_name, int ports,
                                     const std::vector<std::string>& references,
                                     double cond_threshold = 1e8) {
  const int p = ports;
  const int n_r = static_cast<int>(references.size());
  if (n_r < p)
    throw ValidationError("estimate_mimo: needs at least as many references as ports (" +
                          std::to_string(n_r) + " < " + std::to_string(p) + ")");

  std::vector<std::string> stack;
  for (int i = 1; i <= p; ++i) stack.push_back("b." + subckt_name + "." + std::to_string(i));
  for (int i = 1; i <= p; ++i) stack.push_back("a." + subckt_name + "." + std::to_string(i));

  std::vector<SimoBlaEstimate> simos;
  simos.reserve(static_cast<std::size_t>(n_r));
  for (const auto& ref : references) simos.push_back(estimate_simo(records, ref, stack));

  MimoBlaEstimate est;
  est.grid = simos[0].grid;
  est.ports = p;
  est.cond_threshold = cond_threshold;
  est.m_used = simos[0].m_used;
  est.subckt = subckt_name;

  const std::size_t B = est.grid.size();
  const int two_p = 2 * p;
  est.s_bla.reserve(B);
  est.cov_vec.reserve(B);

  // Per-reference support frequencies for interpolation.
  std::vector<std::vector<double>> support(static_cast<std::size_t>(n_r));
  for (int r = 0; r < n_r; ++r) {
    const auto& g = simos[static_cast<std::size_t>(r)].grid;
    for (std::size_t i = 0; i < g.size(); ++i) support[static_cast<std::size_t>(r)].push_back(g.freq_hz(i));
  }

  for (std::size_t b = 0; b < B; ++b) {
    const double f = est.grid.freq_hz(b);
    Eigen::MatrixXcd gz(two_p, n_r);
    Eigen::MatrixXcd cov_gz = Eigen::MatrixXcd::Zero(two_p * n_r, two_p * n_r);
    for (int r = 0; r < n_r; ++r) {
      const auto& simo = simos[static_cast<std::size_t>(r)];
      if (support[static_cast<std::size_t>(r)].size() == B &&
          std::abs(support[static_cast<std::size_t>(r)][b] - f) < 1e-12 * (1.0 + std::abs(f))) {
        gz.col(r) = simo.mean[b];
        cov_gz.block(r * two_p, r * two_p, two_p, two_p) = simo.cov[b];
      } else {
        for (int s = 0; s < two_p; ++s) {
          std::vector<Complex> y;
          y.reserve(simo.mean.size());
          for (const auto& m : simo.mean) y.push_back(m(s));
          gz(s, r) = detail::interp_complex(support[static_cast<std::size_t>(r)], y, f);
        }
        for (int s1 = 0; s1 < two_p; ++s1)
          for (int s2 = 0; s2 < two_p; ++s2) {
            std::vector<Complex> y;
            y.reserve(simo.cov.size());
            for (const auto& c : simo.cov) y.push_back(c(s1, s2));
            cov_gz(r * two_p + s1, r * two_p + s2) =
                detail::interp_complex(support[static_cast<std::size_t>(r)], y, f);
          }
      }
    }

    Eigen::MatrixXcd gb = gz.topRows(p);
    Eigen::MatrixXcd ga = gz.bottomRows(p);
    Eigen::JacobiSVD<Eigen::MatrixXcd> svd(ga, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const double smin = svd.singularValues()(p - 1);
    const double smax = svd.singularValues()(0);
    const double cond = smin > 0.0 ? smax / smin : std::numeric_limits<double>::infinity();

    Eigen::MatrixXcd ga_inv; // right pseudo-inverse (exact inverse when square)
    bool ok = smin > 0.0 && cond <= cond_threshold;
    if (ok) {
      ga_inv = svd.matrixV() * svd.singularValues().cwiseInverse().asDiagonal() *
               svd.matrixU().adjoint();
    } else {
      ga_inv = Eigen::MatrixXcd::Zero(n_r, p);
    }
    Eigen::MatrixXcd s = gb * ga_inv;

    Eigen::MatrixXcd iy_ms(p, two_p);
    iy_ms << Eigen::MatrixXcd::Identity(p, p), -s;
    Eigen::MatrixXcd t = Eigen::MatrixXcd::Zero(p * p, two_p * n_r);
    Eigen::MatrixXcd ga_inv_t = ga_inv.transpose(); // p x n_r
    for (int r = 0; r < n_r; ++r)
      for (int c = 0; c < p; ++c)
        t.block(c * p, r * two_p, p, two_p) = ga_inv_t(c, r) * iy_ms;

    est.s_bla.push_back(std::move(s));
    est.cov_vec.push_back((t * cov_gz * t.adjoint()).eval());
    est.cond.push_back(cond);
    est.valid.push_back(ok);
  }
  return est;
}

/// Pin selected S^BLA entries to externally supplied small-signal values
/// (used when a tiny reverse gain cannot be estimated reliably). Recorded in
/// the estimate's provenance.
inline void override_entry(MimoBlaEstimate& est, int out_port, int in_port,
                           const std::function<Complex(double f_hz)>& value,
                           const std::string& note = "small-signal") {
  if (out_port < 1 || out_port > est.ports || in_port < 1 || in_port > est.ports)
    throw ValidationError("override_entry: port index out of range");
  for (std::size_t b = 0; b < est.s_bla.size(); ++b)
    est.s_bla[b](out_port - 1, in_port - 1) = value(est.grid.freq_hz(b));
  est.overrides.push_back("S(" + std::to_string(out_port) + "," + std::to_string(in_port) +
                          ") pinned to " + note);
}

// ---------------------------------------------------------------------------
// Realization budget
// ---------------------------------------------------------------------------

struct BudgetResult {
  int m_used = 0;
  double sigma_max = 0.0;
  bool attained = false;
};

/// Grow the realization count in batches until the worst per-bin standard
/// deviation reaches the target or the budget is exhausted. Non-attainment is
/// reported, not thrown.
inline BudgetResult realization_budget(const std::function<double(int m_total)>& sigma_with_m,
                                       double target_sigma, int batch, int max_m) {
  if (!(target_sigma > 0.0)) throw ValidationError("realization_budget: target sigma must be positive");
  if (batch < 1 || max_m < 2) throw ValidationError("realization_budget: bad batch/max_m");
  BudgetResult res;
  int m = 0;
  while (m < max_m) {
    m = std::min(max_m, m + batch);
    if (m < 2) m = 2;
    res.m_used = m;
    res.sigma_max = sigma_with_m(m);
    if (res.sigma_max <= target_sigma) {
      res.attained = true;
      return res;
    }
  }
  return res;
}

} // namespace bladca
