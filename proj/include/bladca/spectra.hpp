#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdio>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "bladca/errors.hpp"
#include "bladca/rational.hpp"
#include "bladca/textdoc.hpp"

namespace bladca {

using Complex = std::complex<double>;

enum class BinLabel { excited, detection, even_nonexcited, odd_nonexcited, out_of_band };

inline const char* to_string(BinLabel l) {
  switch (l) {
    case BinLabel::excited: return "excited";
    case BinLabel::detection: return "detection";
    case BinLabel::even_nonexcited: return "even";
    case BinLabel::odd_nonexcited: return "odd-nonexcited";
    case BinLabel::out_of_band: return "out-of-band";
  }
  return "?";
}

inline BinLabel bin_label_from_string(const std::string& s) {
  if (s == "excited") return BinLabel::excited;
  if (s == "detection") return BinLabel::detection;
  if (s == "even") return BinLabel::even_nonexcited;
  if (s == "odd-nonexcited") return BinLabel::odd_nonexcited;
  if (s == "out-of-band") return BinLabel::out_of_band;
  throw ValidationError("unknown bin label '" + s + "'");
}

/// Integer-indexed frequency grid: bin k sits at k*f0 + offset. Main grids
/// have offset 0; zippered tickler grids carry a nonzero offset in
/// ]-f0/2, f0/2[ so their bins interleave with (and never touch) main bins.
class FrequencyGrid {
public:
  FrequencyGrid() = default;
  FrequencyGrid(Rational f0, Rational offset, std::vector<std::int64_t> bins, std::vector<BinLabel> labels)
      : f0_(f0), offset_(offset), bins_(std::move(bins)), labels_(std::move(labels)) {
    if (f0_.num() <= 0) throw ValidationError("grid: f0 must be positive");
    if (!(offset_.abs() * 2 < f0_) && !offset_.is_zero())
      throw ValidationError("grid: |offset| must lie in ]0, f0/2[");
    if (labels_.size() != bins_.size()) throw ValidationError("grid: labels must cover every bin");
    for (std::size_t i = 0; i + 1 < bins_.size(); ++i)
      if (bins_[i] >= bins_[i + 1]) throw ValidationError("grid: bin indices must be strictly increasing");
    if (!bins_.empty() && bins_.front() < 0) throw ValidationError("grid: negative bin index");
  }

  const Rational& f0() const { return f0_; }
  const Rational& offset() const { return offset_; }
  const std::vector<std::int64_t>& bins() const { return bins_; }
  const std::vector<BinLabel>& labels() const { return labels_; }
  std::size_t size() const { return bins_.size(); }
  bool empty() const { return bins_.empty(); }

  Rational freq_exact(std::size_t i) const { return f0_ * bins_[i] + offset_; }
  double freq_hz(std::size_t i) const { return freq_exact(i).value(); }
  bool is_dc(std::size_t i) const { return bins_[i] == 0 && offset_.is_zero(); }

  std::vector<std::size_t> indices_with(BinLabel l) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < labels_.size(); ++i)
      if (labels_[i] == l) out.push_back(i);
    return out;
  }

  friend bool operator==(const FrequencyGrid& a, const FrequencyGrid& b) {
    return a.f0_ == b.f0_ && a.offset_ == b.offset_ && a.bins_ == b.bins_ && a.labels_ == b.labels_;
  }

private:
  Rational f0_{1};
  Rational offset_{0};
  std::vector<std::int64_t> bins_;
  std::vector<BinLabel> labels_;
};

enum class QuantityKind { voltage, current, incident_wave, reflected_wave, abstract };

inline const char* to_string(QuantityKind q) {
  switch (q) {
    case QuantityKind::voltage: return "voltage";
    case QuantityKind::current: return "current";
    case QuantityKind::incident_wave: return "incident_wave";
    case QuantityKind::reflected_wave: return "reflected_wave";
    case QuantityKind::abstract: return "abstract";
  }
  return "?";
}

inline QuantityKind quantity_from_string(const std::string& s) {
  if (s == "voltage") return QuantityKind::voltage;
  if (s == "current") return QuantityKind::current;
  if (s == "incident_wave") return QuantityKind::incident_wave;
  if (s == "reflected_wave") return QuantityKind::reflected_wave;
  if (s == "abstract") return QuantityKind::abstract;
  throw ValidationError("unknown quantity kind '" + s + "'");
}

/// Complex one-sided spectrum on a grid. Values follow the project-wide
/// convention x(t) = c0 + sum 2*Re(c_k e^{jwt}); a DC bin must be real.
struct Spectrum {
  FrequencyGrid grid;
  std::vector<Complex> values;
  QuantityKind kind = QuantityKind::abstract;

  Spectrum() = default;
  Spectrum(FrequencyGrid g, std::vector<Complex> v, QuantityKind q = QuantityKind::abstract)
      : grid(std::move(g)), values(std::move(v)), kind(q) {
    validate();
  }

  void validate() const {
    if (values.size() != grid.size())
      throw ValidationError("spectrum: value count does not match grid length");
    for (std::size_t i = 0; i < values.size(); ++i)
      if (grid.is_dc(i) && std::abs(values[i].imag()) > 1e-9 * (1.0 + std::abs(values[i].real())))
        throw ValidationError("spectrum: DC bin must be real");
  }

  /// Mean-square value of the underlying periodic signal.
  double mean_square() const {
    double acc = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i)
      acc += grid.is_dc(i) ? values[i].real() * values[i].real() : 2.0 * std::norm(values[i]);
    return acc;
  }
};

struct WavePair {
  Spectrum a; // incident
  Spectrum b; // reflected
  double z0 = 50.0;

  WavePair() = default;
  WavePair(Spectrum a_, Spectrum b_, double z0_) : a(std::move(a_)), b(std::move(b_)), z0(z0_) {
    if (!(z0 > 0.0)) throw ValidationError("wave pair: z0 must be positive and real");
    if (!(a.grid == b.grid)) throw ValidationError("wave pair: a and b must share one grid");
  }
};

/// Voltage/current to travelling waves at reference impedance z0:
///   a = (V + Z0 I) / (2 sqrt(Z0)),  b = (V - Z0 I) / (2 sqrt(Z0))
/// with I flowing into the port.
inline WavePair vi_to_waves(const Spectrum& v, const Spectrum& i, double z0 = 50.0) {
  if (!(v.grid == i.grid)) throw ValidationError("vi_to_waves: v and i on different grids");
  if (!(z0 > 0.0)) throw ValidationError("vi_to_waves: z0 must be positive");
  const double s = 2.0 * std::sqrt(z0);
  std::vector<Complex> a(v.values.size()), b(v.values.size());
  for (std::size_t k = 0; k < v.values.size(); ++k) {
    a[k] = (v.values[k] + z0 * i.values[k]) / s;
    b[k] = (v.values[k] - z0 * i.values[k]) / s;
  }
  return WavePair(Spectrum(v.grid, std::move(a), QuantityKind::incident_wave),
                  Spectrum(v.grid, std::move(b), QuantityKind::reflected_wave), z0);
}

inline std::pair<Spectrum, Spectrum> waves_to_vi(const WavePair& w) {
  const double sq = std::sqrt(w.z0);
  std::vector<Complex> v(w.a.values.size()), i(w.a.values.size());
  for (std::size_t k = 0; k < w.a.values.size(); ++k) {
    v[k] = (w.a.values[k] + w.b.values[k]) * sq;
    i[k] = (w.a.values[k] - w.b.values[k]) / sq;
  }
  return {Spectrum(w.a.grid, std::move(v), QuantityKind::voltage),
          Spectrum(w.a.grid, std::move(i), QuantityKind::current)};
}

inline double warp_frequency(double f_hz, double ts) {
  return std::tan(M_PI * f_hz * ts) / (M_PI * ts);
}

/// Frequency warping for trapezoidal time stepping: each grid frequency f maps
/// to tan(pi f ts)/(pi ts). Labels and indexing are preserved; the warped
/// frequencies are reported separately since they are no longer rational.
struct WarpedGrid {
  FrequencyGrid grid;
  double ts = 0.0;
  std::vector<double> warped_hz;
};

inline WarpedGrid warp_grid(const FrequencyGrid& grid, double ts) {
  if (!(ts > 0.0)) throw ValidationError("warp_grid: ts must be positive");
  WarpedGrid out{grid, ts, {}};
  out.warped_hz.reserve(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const double f = grid.freq_hz(i);
    if (!(f * ts < 0.5)) throw ValidationError("warp_grid: bin at or above Nyquist (f*ts >= 1/2)");
    out.warped_hz.push_back(warp_frequency(f, ts));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Columnar text serialization: k, f_hz, re, im, label (17 significant digits).
// ---------------------------------------------------------------------------

namespace detail {
inline std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}
} // namespace detail

inline void write_spectrum(std::ostream& out, const Spectrum& s) {
  out << "# spectrum v1\n";
  out << "# f0_hz: " << s.grid.f0().str() << "\n";
  out << "# offset_hz: " << s.grid.offset().str() << "\n";
  out << "# quantity: " << to_string(s.kind) << "\n";
  out << "k f_hz re im label\n";
  for (std::size_t i = 0; i < s.grid.size(); ++i) {
    out << s.grid.bins()[i] << ' ' << detail::fmt17(s.grid.freq_hz(i)) << ' '
        << detail::fmt17(s.values[i].real()) << ' ' << detail::fmt17(s.values[i].imag()) << ' '
        << to_string(s.grid.labels()[i]) << "\n";
  }
}

inline Spectrum read_spectrum(std::istream& in, const std::string& source = "<stream>") {
  Rational f0(1), offset(0);
  QuantityKind kind = QuantityKind::abstract;
  std::vector<std::int64_t> bins;
  std::vector<BinLabel> labels;
  std::vector<Complex> values;
  std::string line;
  int lineno = 0;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++lineno;
    std::string s = detail::strip(line);
    if (s.empty()) continue;
    if (s[0] == '#') {
      auto colon = s.find(':');
      if (colon != std::string::npos) {
        std::string key = detail::strip(s.substr(1, colon - 1));
        std::string val = detail::strip(s.substr(colon + 1));
        if (key == "f0_hz") f0 = Rational::parse(val);
        else if (key == "offset_hz") offset = Rational::parse(val);
        else if (key == "quantity") kind = quantity_from_string(val);
      }
      continue;
    }
    auto toks = detail::split_ws(s);
    if (!header_seen) {
      if (toks.size() < 5 || toks[0] != "k")
        throw ValidationError(source + ":" + std::to_string(lineno) + ": expected column header 'k f_hz re im label'");
      header_seen = true;
      continue;
    }
    if (toks.size() != 5)
      throw ValidationError(source + ":" + std::to_string(lineno) + ": expected 5 columns");
    bins.push_back(std::stoll(toks[0]));
    values.emplace_back(std::stod(toks[2]), std::stod(toks[3]));
    labels.push_back(bin_label_from_string(toks[4]));
  }
  return Spectrum(FrequencyGrid(f0, offset, std::move(bins), std::move(labels)), std::move(values), kind);
}

} // namespace bladca
