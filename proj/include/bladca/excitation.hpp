#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "bladca/errors.hpp"
#include "bladca/rng.hpp"
#include "bladca/spectra.hpp"
#include "bladca/textdoc.hpp"

namespace bladca {

enum class MultisineKind { full, odd, random_odd, tickler };

inline const char* to_string(MultisineKind k) {
  switch (k) {
    case MultisineKind::full: return "full";
    case MultisineKind::odd: return "odd";
    case MultisineKind::random_odd: return "random_odd";
    case MultisineKind::tickler: return "tickler";
  }
  return "?";
}

inline MultisineKind multisine_kind_from_string(const std::string& s) {
  if (s == "full") return MultisineKind::full;
  if (s == "odd") return MultisineKind::odd;
  if (s == "random_odd") return MultisineKind::random_odd;
  if (s == "tickler") return MultisineKind::tickler;
  throw ValidationError("unknown multisine kind '" + s + "'");
}

/// Excitation design: which lines are excited, with what amplitude. The grid
/// holds every candidate line; detection lines (random-odd designs) stay in
/// the grid with zero amplitude so downstream bookkeeping can find them.
///
/// RMS convention: the design is normalized so that sqrt(sum A_k^2 / 2)
/// equals rms_target, i.e. the RMS of the continuous-time periodic signal.
struct MultisineSpec {
  FrequencyGrid grid;
  std::vector<double> amplitudes; // per grid bin; 0 exactly on detection lines
  double rms_target = 0.0;
  MultisineKind kind = MultisineKind::full;
  int detection_group_size = 3;
  std::uint64_t seed = 0;

  std::vector<std::size_t> excited_indices() const { return grid.indices_with(BinLabel::excited); }

  void validate() const {
    if (amplitudes.size() != grid.size()) throw ValidationError("multisine: amplitude per bin required");
    double acc = 0.0;
    for (std::size_t i = 0; i < grid.size(); ++i) {
      const bool excited = grid.labels()[i] == BinLabel::excited;
      if (excited && !(amplitudes[i] > 0.0))
        throw ValidationError("multisine: excited line with nonpositive amplitude");
      if (!excited && amplitudes[i] != 0.0)
        throw ValidationError("multisine: non-excited line with nonzero amplitude");
      if ((kind == MultisineKind::odd || kind == MultisineKind::random_odd) && excited &&
          grid.bins()[i] % 2 == 0)
        throw ValidationError("multisine: even line excited in an odd design");
      acc += amplitudes[i] * amplitudes[i] / 2.0;
    }
    if (kind == MultisineKind::tickler && grid.offset().is_zero())
      throw ValidationError("multisine: tickler requires a nonzero grid offset");
    if (std::abs(std::sqrt(acc) - rms_target) > 1e-9 * rms_target)
      throw ValidationError("multisine: RMS identity violated");
  }
};

/// One drawn phase set. Phases are aligned with excited_indices() of the spec;
/// the spectrum lives on the spec grid and is nonzero exactly on excited bins.
struct Realization {
  int index = 0;
  std::vector<double> phases;
  Spectrum spectrum;
};

inline MultisineSpec design_multisine(Rational f0, Rational f_min, Rational f_max, double rms,
                                      MultisineKind kind, std::uint64_t seed,
                                      int detection_group_size = 3,
                                      const std::vector<double>& psd_mask = {}) {
  if (f0.num() <= 0) throw ValidationError("design_multisine: f0 must be positive");
  if (f_max < f_min) throw ValidationError("design_multisine: f_min must not exceed f_max");
  if (!(rms > 0.0)) throw ValidationError("design_multisine: rms must be positive");
  if (kind == MultisineKind::tickler)
    throw ValidationError("design_multisine: tickler designs come from design_tickler");
  const std::int64_t kmin = Rational::exact_ratio(f_min, f0);
  const std::int64_t kmax = Rational::exact_ratio(f_max, f0);
  if (kmin < 1) throw ValidationError("design_multisine: f_min must be at least f0 (DC is never excited)");

  std::vector<std::int64_t> bins;
  for (std::int64_t k = kmin; k <= kmax; ++k) {
    if (kind == MultisineKind::full) bins.push_back(k);
    else if (k % 2 != 0) bins.push_back(k);
  }
  if (bins.empty()) throw ValidationError("design_multisine: empty excitation grid");
  std::vector<BinLabel> labels(bins.size(), BinLabel::excited);

  if (kind == MultisineKind::random_odd) {
    if (detection_group_size < 2)
      throw ValidationError("design_multisine: detection_group_size must be >= 2");
    UniformStream rng(derive_seed(seed, "detection-lines", 0));
    const std::size_t g = static_cast<std::size_t>(detection_group_size);
    // One line removed per complete group; an incomplete trailing group keeps
    // all of its lines excited.
    for (std::size_t start = 0; start + g <= bins.size(); start += g) {
      std::size_t pick = start + static_cast<std::size_t>(rng.next_below(g));
      labels[pick] = BinLabel::detection;
    }
  }

  if (!psd_mask.empty() && psd_mask.size() != bins.size())
    throw ValidationError("design_multisine: psd_mask length must match the candidate line count");

  std::vector<double> amp(bins.size(), 0.0);
  double acc = 0.0;
  for (std::size_t i = 0; i < bins.size(); ++i) {
    if (labels[i] != BinLabel::excited) continue;
    double w = psd_mask.empty() ? 1.0 : psd_mask[i];
    if (!(w > 0.0)) throw ValidationError("design_multisine: psd_mask must be positive on excited lines");
    amp[i] = w;
    acc += w * w / 2.0;
  }
  const double scale = rms / std::sqrt(acc);
  for (auto& a : amp) a *= scale;

  MultisineSpec spec{FrequencyGrid(f0, Rational(0), std::move(bins), std::move(labels)),
                     std::move(amp), rms, kind, detection_group_size, seed};
  spec.validate();
  return spec;
}

/// Zippered auxiliary design: the main spec's excited bins shifted by f_eps,
/// flat amplitude. Offsets must be distinct across the ticklers of one
/// experiment; disjointness from the main grid is guaranteed by the offset.
inline MultisineSpec design_tickler(const MultisineSpec& main, Rational f_eps, double rms,
                                    std::uint64_t seed) {
  if (f_eps.is_zero() || !(f_eps.abs() * 2 < main.grid.f0()))
    throw ValidationError("design_tickler: |f_eps| must lie in ]0, f0/2[");
  if (!(rms > 0.0)) throw ValidationError("design_tickler: rms must be positive");
  std::vector<std::int64_t> bins;
  for (std::size_t i : main.excited_indices()) bins.push_back(main.grid.bins()[i]);
  std::vector<BinLabel> labels(bins.size(), BinLabel::excited);
  std::size_t n = bins.size();
  std::vector<double> amp(n, rms * std::sqrt(2.0 / static_cast<double>(n)));
  MultisineSpec spec{FrequencyGrid(main.grid.f0(), f_eps, std::move(bins), std::move(labels)),
                     std::move(amp), rms, MultisineKind::tickler, main.detection_group_size, seed};
  spec.validate();
  return spec;
}

/// Pure function of (spec, m, seed): batches can be drawn in parallel with an
/// output independent of scheduling.
inline Realization draw_realization(const MultisineSpec& spec, int m, std::uint64_t seed) {
  UniformStream rng(derive_seed(seed, "phases", static_cast<std::uint64_t>(m)));
  auto excited = spec.excited_indices();
  Realization r;
  r.index = m;
  r.phases.reserve(excited.size());
  std::vector<Complex> values(spec.grid.size(), Complex(0.0, 0.0));
  const Complex half_over_j(0.0, -0.5); // 1/(2j)
  for (std::size_t i : excited) {
    double phi = rng.next_phase();
    r.phases.push_back(phi);
    values[i] = spec.amplitudes[i] * std::polar(1.0, phi) * half_over_j;
  }
  r.spectrum = Spectrum(spec.grid, std::move(values), QuantityKind::voltage);
  return r;
}

inline std::vector<Realization> draw_realizations(const MultisineSpec& spec, int count,
                                                  std::uint64_t seed) {
  if (count < 1) throw ValidationError("draw_realizations: need at least one realization");
  std::vector<Realization> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int m = 0; m < count; ++m) out.push_back(draw_realization(spec, m, seed));
  return out;
}

// ---------------------------------------------------------------------------
// Spec files
// ---------------------------------------------------------------------------

inline MultisineSpec parse_multisine_spec(const TextDoc& doc,
                                           std::optional<std::uint64_t> seed_override = {}) {
  const DocSection& top = doc.top();
  Rational f0 = doc.get_rational(top, "f0_hz");
  Rational fmin = doc.get_rational(top, "fmin_hz");
  Rational fmax = doc.get_rational(top, "fmax_hz");
  MultisineKind kind = multisine_kind_from_string(doc.require(top, "kind"));
  double rms = doc.get_double(top, "rms");
  auto seed = seed_override.value_or(static_cast<std::uint64_t>(doc.get_int(top, "seed", 0)));
  int group = static_cast<int>(doc.get_int(top, "detection_group_size", 3));
  std::vector<double> mask;
  if (top.has("psd_mask")) mask = doc.get_doubles(top, "psd_mask");
  if (kind == MultisineKind::tickler) {
    Rational f_eps = doc.get_rational(top, "f_eps_hz");
    MultisineKind base = multisine_kind_from_string(doc.require(top, "base_kind"));
    MultisineSpec main = design_multisine(f0, fmin, fmax, 1.0, base, seed, group, mask);
    return design_tickler(main, f_eps, rms, seed);
  }
  return design_multisine(f0, fmin, fmax, rms, kind, seed, group, mask);
}

inline void write_multisine_design(std::ostream& out, const MultisineSpec& spec) {
  out << "# multisine design v1\n";
  out << "f0_hz: " << spec.grid.f0().str() << "\n";
  if (!spec.grid.offset().is_zero()) out << "f_eps_hz: " << spec.grid.offset().str() << "\n";
  out << "kind: " << to_string(spec.kind) << "\n";
  out << "rms: " << detail::fmt17(spec.rms_target) << "\n";
  out << "seed: " << spec.seed << "\n";
  out << "detection_group_size: " << spec.detection_group_size << "\n";
  out << "[lines]\n";
  for (std::size_t i = 0; i < spec.grid.size(); ++i)
    out << "line: " << spec.grid.bins()[i] << ' ' << detail::fmt17(spec.grid.freq_hz(i)) << ' '
        << detail::fmt17(spec.amplitudes[i]) << ' ' << to_string(spec.grid.labels()[i]) << "\n";
}

inline MultisineSpec parse_multisine_design(const TextDoc& doc) {
  const DocSection& top = doc.top();
  Rational f0 = doc.get_rational(top, "f0_hz");
  Rational f_eps = top.has("f_eps_hz") ? doc.get_rational(top, "f_eps_hz") : Rational(0);
  MultisineKind kind = multisine_kind_from_string(doc.require(top, "kind"));
  double rms = doc.get_double(top, "rms");
  auto seed = static_cast<std::uint64_t>(doc.get_int(top, "seed", 0));
  int group = static_cast<int>(doc.get_int(top, "detection_group_size", 3));
  const DocSection* lines = doc.unique_section("lines");
  if (!lines) throw ValidationError(doc.source_name + ": missing [lines] section");
  std::vector<std::int64_t> bins;
  std::vector<BinLabel> labels;
  std::vector<double> amp;
  for (const auto& e : lines->entries) {
    if (e.key != "line") doc.fail(e.line, "expected 'line: k f_hz amplitude label'");
    auto toks = detail::split_ws(e.value);
    if (toks.size() != 4) doc.fail(e.line, "expected 4 columns in line entry");
    bins.push_back(std::stoll(toks[0]));
    amp.push_back(std::stod(toks[2]));
    labels.push_back(bin_label_from_string(toks[3]));
  }
  MultisineSpec spec{FrequencyGrid(f0, f_eps, std::move(bins), std::move(labels)), std::move(amp),
                     rms, kind, group, seed};
  spec.validate();
  return spec;
}

} // namespace bladca
