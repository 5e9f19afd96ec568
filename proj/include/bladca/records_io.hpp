#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "bladca/errors.hpp"
#include "bladca/solver.hpp"
#include "bladca/spectra.hpp"

namespace bladca {

/// Record archives: experiment.json describes the union grid and sources;
/// each realization directory m#### holds one columnar spectrum file per
/// signal.
namespace records_io {

inline FrequencyGrid dense_grid(const SolveGrid& grid) {
  std::vector<std::int64_t> bins(static_cast<std::size_t>(grid.bin_count));
  std::vector<BinLabel> labels(static_cast<std::size_t>(grid.bin_count));
  for (std::int64_t i = 0; i < grid.bin_count; ++i) {
    bins[static_cast<std::size_t>(i)] = i;
    const int owner = grid.owner(i);
    BinLabel l = BinLabel::out_of_band;
    if (owner >= 0) {
      const auto& src = grid.sources[static_cast<std::size_t>(owner)];
      const bool excited = std::binary_search(src.excited.begin(), src.excited.end(), i);
      l = excited ? BinLabel::excited
                  : (((i / src.step) % 2 == 0) ? BinLabel::even_nonexcited : BinLabel::odd_nonexcited);
    }
    labels[static_cast<std::size_t>(i)] = l;
  }
  return FrequencyGrid(grid.micro, Rational(0), std::move(bins), std::move(labels));
}

inline std::string record_dir(int m) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "m%04d", m);
  return buf;
}

inline void save(const std::filesystem::path& dir, const std::vector<SteadyStateRecord>& records) {
  if (records.empty()) throw ValidationError("records_io: nothing to save");
  std::filesystem::create_directories(dir);
  const SolveGrid& grid = records[0].grid;
  nlohmann::json meta;
  meta["m"] = records.size();
  meta["ts"] = records[0].ts;
  meta["micro_hz"] = grid.micro.str();
  meta["bin_count"] = grid.bin_count;
  meta["main_step"] = grid.main_step;
  meta["signals"] = nlohmann::json::array();
  for (const auto& [name, vals] : records[0].signals) meta["signals"].push_back(name);
  meta["sources"] = nlohmann::json::array();
  for (const auto& src : grid.sources) {
    nlohmann::json s;
    s["name"] = src.name;
    s["step"] = src.step;
    s["offset"] = src.offset;
    s["rms"] = src.rms;
    s["excited"] = src.excited;
    meta["sources"].push_back(s);
  }
  meta["diagnostics"] = nlohmann::json::array();
  FrequencyGrid dense = dense_grid(grid);
  for (const auto& rec : records) {
    nlohmann::json d;
    d["m"] = rec.m;
    d["iterations"] = rec.diag.iterations;
    d["residual"] = rec.diag.residual;
    d["alias_peak"] = rec.diag.alias_peak;
    d["settle_error"] = rec.diag.settle_error;
    meta["diagnostics"].push_back(d);
    std::filesystem::path rd = dir / record_dir(rec.m);
    std::filesystem::create_directories(rd);
    for (const auto& [name, vals] : rec.signals) {
      std::ofstream out(rd / (name + ".sp"));
      if (!out) throw ValidationError("records_io: cannot write " + (rd / (name + ".sp")).string());
      write_spectrum(out, Spectrum(dense, vals, QuantityKind::abstract));
    }
  }
  std::ofstream out(dir / "experiment.json");
  if (!out) throw ValidationError("records_io: cannot write experiment.json");
  out << meta.dump(1) << "\n";
}

inline std::vector<SteadyStateRecord> load(const std::filesystem::path& dir) {
  std::ifstream meta_in(dir / "experiment.json");
  if (!meta_in) throw ValidationError("records_io: no experiment.json in " + dir.string());
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(meta_in);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("records_io: " + dir.string() + "/experiment.json: " + e.what());
  }
  SolveGrid grid;
  grid.micro = Rational::parse(meta.at("micro_hz").get<std::string>());
  grid.bin_count = meta.at("bin_count").get<std::int64_t>();
  grid.main_step = meta.at("main_step").get<std::int64_t>();
  for (const auto& s : meta.at("sources")) {
    SolveGrid::Source src;
    src.name = s.at("name").get<std::string>();
    src.step = s.at("step").get<std::int64_t>();
    src.offset = s.at("offset").get<std::int64_t>();
    src.rms = s.at("rms").get<double>();
    src.excited = s.at("excited").get<std::vector<std::int64_t>>();
    grid.sources.push_back(std::move(src));
  }
  const auto signals = meta.at("signals").get<std::vector<std::string>>();
  std::vector<SteadyStateRecord> out;
  for (const auto& d : meta.at("diagnostics")) {
    SteadyStateRecord rec;
    rec.m = d.at("m").get<int>();
    rec.grid = grid;
    rec.ts = meta.at("ts").get<double>();
    rec.diag.iterations = d.at("iterations").get<int>();
    rec.diag.residual = d.at("residual").get<double>();
    rec.diag.alias_peak = d.at("alias_peak").get<double>();
    rec.diag.settle_error = d.at("settle_error").get<double>();
    for (const auto& name : signals) {
      std::ifstream in(dir / record_dir(rec.m) / (name + ".sp"));
      if (!in)
        throw ValidationError("records_io: missing " +
                              (dir / record_dir(rec.m) / (name + ".sp")).string());
      Spectrum sp = read_spectrum(in, name);
      if (static_cast<std::int64_t>(sp.values.size()) != grid.bin_count)
        throw ValidationError("records_io: bin count mismatch in " + name);
      rec.signals.emplace_back(name, std::move(sp.values));
    }
    out.push_back(std::move(rec));
  }
  return out;
}

} // namespace records_io

} // namespace bladca
