#pragma once

#include <complex>
#include <fstream>
#include <istream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "bladca/errors.hpp"
#include "bladca/rational.hpp"

namespace bladca {

/// Line-based structured-text documents used for hand-written inputs
/// (excitation specs, netlists) and text artifacts. Grammar:
///
///   # comment
///   key: value
///   [section word word...]
///   key: value
///
/// The parser keeps line numbers so that semantic errors can point at the
/// offending line of the source document.
struct DocEntry {
  std::string key;
  std::string value;
  int line = 0;
};

struct DocSection {
  std::vector<std::string> header; // e.g. {"block", "stage1"}
  int line = 0;
  std::vector<DocEntry> entries;

  const std::string& name() const {
    static const std::string empty;
    return header.empty() ? empty : header.front();
  }

  const DocEntry* find(std::string_view key) const {
    for (const auto& e : entries)
      if (e.key == key) return &e;
    return nullptr;
  }
  bool has(std::string_view key) const { return find(key) != nullptr; }
};

namespace detail {
inline std::vector<std::string> split_ws(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream ss(s);
  std::string tok;
  while (ss >> tok) out.push_back(tok);
  return out;
}
inline std::string strip(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return {};
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}
} // namespace detail

class TextDoc {
public:
  std::string source_name = "<string>";
  std::vector<DocSection> sections; // sections[0] is the implicit top section

  static TextDoc parse(std::istream& in, const std::string& source_name) {
    TextDoc doc;
    doc.source_name = source_name;
    doc.sections.push_back(DocSection{{}, 0, {}});
    std::string raw;
    int line = 0;
    while (std::getline(in, raw)) {
      ++line;
      std::string s = detail::strip(raw);
      if (s.empty() || s[0] == '#') continue;
      if (s.front() == '[') {
        if (s.back() != ']')
          throw ValidationError(source_name + ":" + std::to_string(line) + ": unterminated section header");
        DocSection sec;
        sec.header = detail::split_ws(s.substr(1, s.size() - 2));
        sec.line = line;
        if (sec.header.empty())
          throw ValidationError(source_name + ":" + std::to_string(line) + ": empty section header");
        doc.sections.push_back(std::move(sec));
        continue;
      }
      auto colon = s.find(':');
      if (colon == std::string::npos)
        throw ValidationError(source_name + ":" + std::to_string(line) + ": expected 'key: value'");
      DocEntry e;
      e.key = detail::strip(s.substr(0, colon));
      e.value = detail::strip(s.substr(colon + 1));
      e.line = line;
      if (e.key.empty())
        throw ValidationError(source_name + ":" + std::to_string(line) + ": empty key");
      doc.sections.back().entries.push_back(std::move(e));
    }
    return doc;
  }

  static TextDoc parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open document: " + path);
    return parse(in, path);
  }

  std::string serialize() const {
    std::ostringstream out;
    for (const auto& sec : sections) {
      if (!sec.header.empty()) {
        out << '[';
        for (std::size_t i = 0; i < sec.header.size(); ++i)
          out << (i ? " " : "") << sec.header[i];
        out << "]\n";
      }
      for (const auto& e : sec.entries) out << e.key << ": " << e.value << "\n";
    }
    return out.str();
  }

  std::vector<const DocSection*> sections_named(std::string_view name) const {
    std::vector<const DocSection*> out;
    for (const auto& s : sections)
      if (!s.header.empty() && s.header.front() == name) out.push_back(&s);
    return out;
  }

  const DocSection* unique_section(std::string_view name) const {
    auto v = sections_named(name);
    if (v.empty()) return nullptr;
    if (v.size() > 1)
      throw ValidationError(source_name + ":" + std::to_string(v[1]->line) + ": duplicate section [" +
                            std::string(name) + "]");
    return v.front();
  }

  const DocSection& top() const { return sections.front(); }

  [[noreturn]] void fail(int line, const std::string& msg) const {
    throw ValidationError(source_name + ":" + std::to_string(line) + ": " + msg);
  }
  [[noreturn]] void fail_missing(const DocSection& sec, std::string_view key) const {
    int line = sec.line > 0 ? sec.line : 1;
    std::string where = sec.header.empty() ? "document" : "section [" + sec.name() + "]";
    throw ValidationError(source_name + ":" + std::to_string(line) + ": missing key '" + std::string(key) +
                          "' in " + where);
  }

  const std::string& require(const DocSection& sec, std::string_view key) const {
    const DocEntry* e = sec.find(key);
    if (!e) fail_missing(sec, key);
    return e->value;
  }

  double get_double(const DocSection& sec, std::string_view key) const {
    const DocEntry* e = sec.find(key);
    if (!e) fail_missing(sec, key);
    try {
      std::size_t pos = 0;
      double v = std::stod(e->value, &pos);
      if (pos != e->value.size()) throw std::invalid_argument("");
      return v;
    } catch (const std::logic_error&) {
      fail(e->line, "expected a number for '" + std::string(key) + "', got '" + e->value + "'");
    }
  }

  double get_double(const DocSection& sec, std::string_view key, double fallback) const {
    return sec.has(key) ? get_double(sec, key) : fallback;
  }

  std::int64_t get_int(const DocSection& sec, std::string_view key) const {
    const DocEntry* e = sec.find(key);
    if (!e) fail_missing(sec, key);
    try {
      std::size_t pos = 0;
      std::int64_t v = std::stoll(e->value, &pos);
      if (pos != e->value.size()) throw std::invalid_argument("");
      return v;
    } catch (const std::logic_error&) {
      fail(e->line, "expected an integer for '" + std::string(key) + "', got '" + e->value + "'");
    }
  }

  std::int64_t get_int(const DocSection& sec, std::string_view key, std::int64_t fallback) const {
    return sec.has(key) ? get_int(sec, key) : fallback;
  }

  Rational get_rational(const DocSection& sec, std::string_view key) const {
    const DocEntry* e = sec.find(key);
    if (!e) fail_missing(sec, key);
    try {
      return Rational::parse(e->value);
    } catch (const ValidationError&) {
      fail(e->line, "expected a rational (p, p/q or short decimal) for '" + std::string(key) + "'");
    }
  }

  /// "re [im]" pair.
  std::complex<double> get_complex(const DocSection& sec, std::string_view key) const {
    const DocEntry* e = sec.find(key);
    if (!e) fail_missing(sec, key);
    auto toks = detail::split_ws(e->value);
    try {
      if (toks.size() == 1) return {std::stod(toks[0]), 0.0};
      if (toks.size() == 2) return {std::stod(toks[0]), std::stod(toks[1])};
    } catch (const std::logic_error&) {
    }
    fail(e->line, "expected 're [im]' for '" + std::string(key) + "', got '" + e->value + "'");
  }

  std::vector<double> get_doubles(const DocSection& sec, std::string_view key) const {
    const DocEntry* e = sec.find(key);
    if (!e) fail_missing(sec, key);
    std::vector<double> out;
    for (const auto& t : detail::split_ws(e->value)) {
      try {
        out.push_back(std::stod(t));
      } catch (const std::logic_error&) {
        fail(e->line, "expected numbers for '" + std::string(key) + "', got '" + t + "'");
      }
    }
    return out;
  }
};

} // namespace bladca
