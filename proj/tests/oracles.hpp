#pragma once

// Test-only oracles, kept independent of the implementation paths they check.

#include <Eigen/Dense>

#include "bladca/dca.hpp"
#include "bladca/netmodel.hpp"

namespace oracles {

using bladca::Complex;

/// Independent wave-referral oracle: solve the stacked component and
/// connection equations (b - T a = N, a - C b = 0) over [a; b] for a unit
/// source at each distortion port and read the load-incident wave. Dense
/// 2(2P+4) solve, no shared code with the W^{-1} extraction.
inline Eigen::RowVectorXcd brute_force_tout(const bladca::PortNetwork& net,
                                            const Eigen::MatrixXcd& s_bla, double f_hz) {
  const int P = net.total_ports();
  const int dim = 2 * P + 4;
  Eigen::MatrixXcd t = Eigen::MatrixXcd::Zero(dim, dim);
  t(0, 0) = net.gamma_in.eval(f_hz);
  t(1, 1) = net.gamma_out.eval(f_hz);
  for (int r = 0; r < P + 2; ++r)
    for (int c = 0; c < P + 2; ++c)
      t(2 + r, 2 + c) = net.package[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)].eval(f_hz);
  t.block(P + 4, P + 4, P, P) = s_bla;
  Eigen::MatrixXcd cm = Eigen::MatrixXcd::Zero(dim, dim);
  cm(0, 2) = cm(2, 0) = 1.0;
  cm(1, 3) = cm(3, 1) = 1.0;
  for (int p = 0; p < P; ++p) {
    cm(4 + p, P + 4 + p) = 1.0;
    cm(P + 4 + p, 4 + p) = 1.0;
  }
  Eigen::MatrixXcd sys = Eigen::MatrixXcd::Zero(2 * dim, 2 * dim);
  sys.block(0, 0, dim, dim) = -t;
  sys.block(0, dim, dim, dim) = Eigen::MatrixXcd::Identity(dim, dim);
  sys.block(dim, 0, dim, dim) = Eigen::MatrixXcd::Identity(dim, dim);
  sys.block(dim, dim, dim, dim) = -cm;
  Eigen::PartialPivLU<Eigen::MatrixXcd> lu(sys);
  Eigen::RowVectorXcd out(P);
  for (int p = 0; p < P; ++p) {
    Eigen::VectorXcd rhs = Eigen::VectorXcd::Zero(2 * dim);
    rhs(P + 4 + p) = 1.0;
    Eigen::VectorXcd x = lu.solve(rhs);
    out(p) = x(1);
  }
  return out;
}

/// BLA matrix set over explicit per-bin block-diagonal matrices.
inline bladca::BlaMatrixSet manual_wave_set(const bladca::PortNetwork& net,
                                            const std::vector<Eigen::MatrixXcd>& s,
                                            const std::vector<double>& freqs,
                                            const std::vector<std::int64_t>& bins = {}) {
  bladca::BlaMatrixSet set;
  for (int n = 0; n < static_cast<int>(net.subckts.size()); ++n) {
    const auto& blk = net.subckts[static_cast<std::size_t>(n)];
    set.block_names.push_back(blk.name);
    for (int p = 1; p <= blk.ports; ++p) {
      set.out_signals.push_back("b." + blk.name + "." + std::to_string(p));
      set.in_signals.push_back("a." + blk.name + "." + std::to_string(p));
      set.source_labels.push_back(blk.name + "." + std::to_string(p));
      set.source_block.push_back(n);
    }
  }
  for (std::size_t b = 0; b < s.size(); ++b) {
    set.bins.push_back(bins.empty() ? static_cast<std::int64_t>(b + 1) : bins[b]);
    set.freq_hz.push_back(freqs[b]);
    set.g.push_back(s[b]);
    set.valid.push_back(true);
  }
  set.m_used = 16;
  return set;
}

} // namespace oracles
