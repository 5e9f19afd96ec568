#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>

#include "bladca/errors.hpp"

namespace bladca {

/// FNV-1a 64-bit. Used for manifest content identity (determinism checks),
/// not for security.
inline std::uint64_t fnv1a64(std::string_view data, std::uint64_t h = 1469598103934665603ull) {
  for (char c : data) h = (h ^ static_cast<unsigned char>(c)) * 1099511628211ull;
  return h;
}

inline std::string hash_hex(std::uint64_t h) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) { out[i] = digits[h & 0xf]; h >>= 4; }
  return out;
}

inline std::string hash_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open file for hashing: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return hash_hex(fnv1a64(ss.str()));
}

} // namespace bladca
