#pragma once

#include <complex>
#include <span>
#include <vector>

#include <unsupported/Eigen/FFT>

#include "bladca/errors.hpp"

namespace bladca {

using Complex = std::complex<double>;

/// One-sided spectral convention used project-wide: a real periodic signal is
///   x(t_i) = c[0] + sum_{k>=1} 2*Re( c[k] * exp(j*2*pi*k*i/n) )
/// so a tone A*sin(w t + phi) carries c = A*exp(j*phi)/(2j) and contributes
/// A^2/2 = 2*|c|^2 to the mean-square value. The inverse transform goes
/// through an explicit Hermitian extension (the library's packed c2r path has
/// a different normalization).
class HarmonicTransform {
public:
  /// Real time samples from one-sided coefficients (zero-padded up to nfft/2).
  std::vector<double> synthesize(std::span<const Complex> coeffs, int nfft) {
    if (nfft < 4 || (nfft & (nfft - 1)) != 0)
      throw ValidationError("fft: nfft must be a power of two >= 4");
    if (static_cast<int>(coeffs.size()) > nfft / 2)
      throw ValidationError("fft: coefficients reach the Nyquist bin");
    full_.assign(static_cast<std::size_t>(nfft), Complex(0.0, 0.0));
    const double n = static_cast<double>(nfft);
    full_[0] = Complex(coeffs.empty() ? 0.0 : coeffs[0].real(), 0.0) * n;
    for (std::size_t k = 1; k < coeffs.size(); ++k) {
      full_[k] = coeffs[k] * n;
      full_[static_cast<std::size_t>(nfft) - k] = std::conj(coeffs[k]) * n;
    }
    fft_.inv(ctime_, full_);
    std::vector<double> time(static_cast<std::size_t>(nfft));
    for (std::size_t i = 0; i < time.size(); ++i) time[i] = ctime_[i].real();
    return time;
  }

  /// One-sided coefficients c[0..kmax] of real time samples.
  std::vector<Complex> analyze(std::span<const double> time, int kmax) {
    const int n = static_cast<int>(time.size());
    if (kmax >= n / 2) throw ValidationError("fft: requested bin at or above Nyquist");
    rtime_.assign(time.begin(), time.end());
    fft_.fwd(full_, rtime_);
    std::vector<Complex> coeffs(static_cast<std::size_t>(kmax + 1));
    const double scale = 1.0 / n;
    for (int k = 0; k <= kmax; ++k) coeffs[static_cast<std::size_t>(k)] = full_[static_cast<std::size_t>(k)] * scale;
    return coeffs;
  }

  /// Largest coefficient magnitude in bins (kmax, n/2]: the energy the last
  /// analyzed nonlinear map pushed beyond the retained band.
  double tail_peak(int kmax) const {
    const std::size_t n = full_.size();
    double peak = 0.0;
    for (std::size_t k = static_cast<std::size_t>(kmax) + 1; k <= n / 2; ++k)
      peak = std::max(peak, std::abs(full_[k]));
    return peak / static_cast<double>(n);
  }

  static int next_pow2(std::int64_t n) {
    int p = 4;
    while (p < n) p <<= 1;
    return p;
  }

private:
  Eigen::FFT<double> fft_;
  std::vector<Complex> full_;
  std::vector<Complex> ctime_;
  std::vector<double> rtime_;
};

} // namespace bladca
