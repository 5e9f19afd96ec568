#pragma once

#include <cstdint>
#include <numeric>
#include <string>

#include "bladca/errors.hpp"

namespace bladca {

/// Exact rational frequency value. Frequency grids are kept in integer
/// arithmetic so that zippered tickler bins (k*f0 + f_eps) and main bins
/// (k*f0) never collide or alias through rounding.
class Rational {
public:
  constexpr Rational() = default;
  Rational(std::int64_t num, std::int64_t den = 1) : num_(num), den_(den) {
    if (den_ == 0) throw ValidationError("rational: zero denominator");
    normalize();
  }

  static Rational parse(const std::string& text) {
    auto slash = text.find('/');
    try {
      if (slash == std::string::npos) {
        // Accept plain integers and decimal literals with a short mantissa.
        auto dot = text.find('.');
        if (dot == std::string::npos) return Rational(std::stoll(text));
        std::string digits = text.substr(0, dot) + text.substr(dot + 1);
        std::int64_t den = 1;
        for (std::size_t i = dot + 1; i < text.size(); ++i) den = mul_checked(den, 10);
        return Rational(std::stoll(digits), den);
      }
      return Rational(std::stoll(text.substr(0, slash)), std::stoll(text.substr(slash + 1)));
    } catch (const std::logic_error&) {
      throw ValidationError("rational: cannot parse '" + text + "'");
    }
  }

  std::int64_t num() const { return num_; }
  std::int64_t den() const { return den_; }
  double value() const { return static_cast<double>(num_) / static_cast<double>(den_); }
  bool is_zero() const { return num_ == 0; }

  std::string str() const {
    if (den_ == 1) return std::to_string(num_);
    return std::to_string(num_) + "/" + std::to_string(den_);
  }

  friend Rational operator+(const Rational& a, const Rational& b) {
    std::int64_t g = std::gcd(a.den_, b.den_);
    std::int64_t lhs = mul_checked(a.num_, b.den_ / g);
    std::int64_t rhs = mul_checked(b.num_, a.den_ / g);
    return Rational(add_checked(lhs, rhs), mul_checked(a.den_, b.den_ / g));
  }
  friend Rational operator-(const Rational& a, const Rational& b) { return a + Rational(-b.num_, b.den_); }
  friend Rational operator*(const Rational& a, const Rational& b) {
    std::int64_t g1 = std::gcd(std::abs(a.num_), b.den_);
    std::int64_t g2 = std::gcd(std::abs(b.num_), a.den_);
    return Rational(mul_checked(a.num_ / g1, b.num_ / g2), mul_checked(a.den_ / g2, b.den_ / g1));
  }
  friend Rational operator*(const Rational& a, std::int64_t k) { return a * Rational(k); }
  friend Rational operator*(std::int64_t k, const Rational& a) { return a * Rational(k); }
  friend Rational operator/(const Rational& a, const Rational& b) {
    if (b.num_ == 0) throw ValidationError("rational: division by zero");
    return a * Rational(b.den_, b.num_);
  }

  friend bool operator==(const Rational& a, const Rational& b) {
    return a.num_ == b.num_ && a.den_ == b.den_;
  }
  friend bool operator!=(const Rational& a, const Rational& b) { return !(a == b); }
  friend bool operator<(const Rational& a, const Rational& b) {
    return static_cast<__int128>(a.num_) * b.den_ < static_cast<__int128>(b.num_) * a.den_;
  }
  friend bool operator<=(const Rational& a, const Rational& b) { return a < b || a == b; }
  friend bool operator>(const Rational& a, const Rational& b) { return b < a; }
  friend bool operator>=(const Rational& a, const Rational& b) { return b <= a; }

  /// Largest rational dividing both arguments into integers:
  /// gcd(a/b, c/d) = gcd(a*d, c*b) / (b*d).
  static Rational gcd(const Rational& a, const Rational& b) {
    if (a.num_ == 0) return b.abs();
    if (b.num_ == 0) return a.abs();
    std::int64_t n = std::gcd(std::abs(mul_checked(a.num_, b.den_)), std::abs(mul_checked(b.num_, a.den_)));
    return Rational(n, mul_checked(a.den_, b.den_));
  }

  Rational abs() const { return num_ < 0 ? Rational(-num_, den_) : *this; }

  /// Exact quotient a / b when it is an integer; throws otherwise.
  static std::int64_t exact_ratio(const Rational& a, const Rational& b) {
    Rational q = a / b;
    if (q.den() != 1)
      throw ValidationError("rational: " + a.str() + " is not an integer multiple of " + b.str());
    return q.num();
  }

private:
  std::int64_t num_ = 0;
  std::int64_t den_ = 1;

  void normalize() {
    if (den_ < 0) { num_ = -num_; den_ = -den_; }
    std::int64_t g = std::gcd(std::abs(num_), den_);
    if (g > 1) { num_ /= g; den_ /= g; }
  }

  static std::int64_t mul_checked(std::int64_t a, std::int64_t b) {
    __int128 r = static_cast<__int128>(a) * b;
    if (r > INT64_MAX || r < INT64_MIN) throw ValidationError("rational: 64-bit overflow");
    return static_cast<std::int64_t>(r);
  }
  static std::int64_t add_checked(std::int64_t a, std::int64_t b) {
    __int128 r = static_cast<__int128>(a) + b;
    if (r > INT64_MAX || r < INT64_MIN) throw ValidationError("rational: 64-bit overflow");
    return static_cast<std::int64_t>(r);
  }
};

} // namespace bladca
