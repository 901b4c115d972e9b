#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <string>
#include <system_error>

namespace fbo {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// Raised for malformed inputs: bad dimensions, P > n, negative sigmas, unknown config keys.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A weighted Hessian that is not SPD or whose condition number exceeds the guard.
class SingularSystemError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite iterate or aggregate. `round` is -1 when raised outside the runner loop.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, long round = -1)
      : std::runtime_error(what), round_(round) {}
  long round() const noexcept { return round_; }

 private:
  long round_;
};

inline bool all_finite(const Vec& v) { return v.allFinite(); }

// ‖a−b‖ / max(‖a‖,‖b‖), zero when both vanish; NaN propagates so checks fail closed.
inline double relative_error(const Vec& a, const Vec& b) {
  const double diff = (a - b).norm();
  const double scale = std::max(a.norm(), b.norm());
  if (std::isnan(diff) || std::isnan(scale)) return std::numeric_limits<double>::quiet_NaN();
  if (scale == 0.0) return 0.0;
  return diff / scale;
}

// Shortest base-10 text that round-trips to the same double.
inline std::string format_double(double value) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), value);
  if (res.ec != std::errc{}) throw std::runtime_error("format_double: buffer too small");
  return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& text, const std::string& what) {
  std::size_t pos = 0;
  double value = 0.0;
  try {
    value = std::stod(text, &pos);
  } catch (const std::exception&) {
    throw ValidationError(what + ": expected a number, got '" + text + "'");
  }
  if (pos != text.size()) throw ValidationError(what + ": trailing characters in '" + text + "'");
  return value;
}

}  // namespace fbo
