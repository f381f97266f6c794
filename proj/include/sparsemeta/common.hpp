#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace sparsemeta {

// Shape/operand mismatch in a tensor operation. Message names the op.
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite values, bad arguments, violated preconditions.
struct ValueError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid user-facing configuration (CLI flags, config files).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<int>;

inline int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  out += ")";
  return out;
}

inline bool all_finite(std::span<const double> v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace sparsemeta
