#pragma once

#include <string>
#include <vector>

namespace siblurry {

struct CurvePoint {
  double x = 0.0;  // samples seen
  double y = 0.0;  // accuracy

  bool operator==(const CurvePoint&) const = default;
};

struct AccuracyCurve {
  std::vector<CurvePoint> points;

  /// Sorted, strictly increasing x; y in [0, 1].
  void validate() const;
};

/// Trapezoidal area normalized by the x-range. A single point yields its y.
double a_auc(const AccuracyCurve& curve);

/// Mean over classes of max(0, best - final). Classes whose best entry is NaN
/// (never evaluated) are skipped with a warning.
double forgetting(const std::vector<double>& per_class_best, const std::vector<double>& per_class_final);

/// Fraction of predictions equal to labels.
double accuracy(const std::vector<int>& predictions, const std::vector<int>& labels);

struct Aggregate {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 for a single value
  std::size_t n = 0;
};

Aggregate aggregate(const std::vector<double>& values);
/// "mean±std" in percent with two decimals.
std::string format_percent(const Aggregate& a);

/// Linear interpolation of a curve at x, clamped to its end values.
double interpolate(const AccuracyCurve& curve, double x);

}  // namespace siblurry
