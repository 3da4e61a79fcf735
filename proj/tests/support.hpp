#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "siblurry/autodiff.hpp"
#include "siblurry/rng.hpp"
#include "siblurry/types.hpp"

namespace siblurry::test {

inline Matrix random_matrix(Index rows, Index cols, Rng& rng, double scale = 1.0) {
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

/// Central differences of a scalar function of one matrix.
inline Matrix numeric_gradient(const std::function<double(const Matrix&)>& f, const Matrix& x, double h = 1e-5) {
  Matrix g(x.rows(), x.cols());
  Matrix probe = x;
  for (Index i = 0; i < x.size(); ++i) {
    const double saved = probe.data()[i];
    probe.data()[i] = saved + h;
    const double up = f(probe);
    probe.data()[i] = saved - h;
    const double down = f(probe);
    probe.data()[i] = saved;
    g.data()[i] = (up - down) / (2.0 * h);
  }
  return g;
}

/// ||a - b|| / max(||a||, ||b||); 0 when both vanish.
inline double relative_error(const Matrix& a, const Matrix& b) {
  const double scale = std::max(a.norm(), b.norm());
  return scale == 0.0 ? 0.0 : (a - b).norm() / scale;
}

/// Scratch directory removed on destruction.
class TempDir {
 public:
  TempDir() {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("siblurry_test_" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace siblurry::test

namespace siblurry::test {

/// Upper tail of the chi-square distribution (Wilson-Hilferty approximation).
inline double chi_square_sf(double x, double df) {
  const double z = (std::cbrt(x / df) - (1.0 - 2.0 / (9.0 * df))) / std::sqrt(2.0 / (9.0 * df));
  return 0.5 * std::erfc(z / std::sqrt(2.0));
}

}  // namespace siblurry::test
