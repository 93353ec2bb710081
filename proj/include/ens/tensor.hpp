#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "ens/rng.hpp"

namespace ens {

// Dense rank-4 array (n, c, h, w), row-major with w innermost.
struct Tensor {
  std::array<int, 4> shape{0, 0, 0, 0};
  std::vector<double> data;

  Tensor() = default;
  Tensor(int n, int c, int h, int w)
      : shape{n, c, h, w},
        data(static_cast<std::size_t>(n) * c * h * w, 0.0) {}

  static Tensor zeros(int n, int c, int h, int w) { return Tensor(n, c, h, w); }

  static Tensor full(int n, int c, int h, int w, double v) {
    Tensor t(n, c, h, w);
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }

  static Tensor scalar(double v) { return full(1, 1, 1, 1, v); }

  // Uniform in [-s, s] with s = sqrt(1 / fan_in).
  static Tensor uniform_init(int n, int c, int h, int w, int fan_in, Rng& rng) {
    Tensor t(n, c, h, w);
    double s = std::sqrt(1.0 / static_cast<double>(fan_in < 1 ? 1 : fan_in));
    for (double& v : t.data) v = rng.uniform(-s, s);
    return t;
  }

  int n() const { return shape[0]; }
  int c() const { return shape[1]; }
  int h() const { return shape[2]; }
  int w() const { return shape[3]; }

  std::size_t numel() const { return data.size(); }

  double& at(int n_, int c_, int h_, int w_) {
    return data[((static_cast<std::size_t>(n_) * shape[1] + c_) * shape[2] + h_) * shape[3] + w_];
  }
  double at(int n_, int c_, int h_, int w_) const {
    return data[((static_cast<std::size_t>(n_) * shape[1] + c_) * shape[2] + h_) * shape[3] + w_];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  std::string shape_str() const {
    return "(" + std::to_string(shape[0]) + "," + std::to_string(shape[1]) + "," +
           std::to_string(shape[2]) + "," + std::to_string(shape[3]) + ")";
  }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

// Thrown when tensor shapes do not satisfy an operation's contract.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Thrown on violated value-level contracts (non-scalar loss, delta <= 0, ...).
struct ContractError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Thrown on bad module configuration (head counts, weight orderings, ...).
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b))
    throw DimensionError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " +
                         b.shape_str());
}

}  // namespace ens
