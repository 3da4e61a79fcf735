#include "siblurry/metrics.hpp"

#include <cmath>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "siblurry/error.hpp"

namespace siblurry {

void AccuracyCurve::validate() const {
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (!(points[i].y >= 0.0 && points[i].y <= 1.0)) throw ContractError("accuracy curve: y outside [0, 1]");
    if (i > 0 && !(points[i].x > points[i - 1].x)) throw ContractError("accuracy curve: x not strictly increasing");
  }
}

double a_auc(const AccuracyCurve& curve) {
  if (curve.points.empty()) throw ContractError("a_auc: empty curve");
  curve.validate();
  const auto& p = curve.points;
  if (p.size() == 1) return p[0].y;
  double area = 0.0;
  for (std::size_t i = 1; i < p.size(); ++i) area += 0.5 * (p[i].y + p[i - 1].y) * (p[i].x - p[i - 1].x);
  return area / (p.back().x - p.front().x);
}

double forgetting(const std::vector<double>& per_class_best, const std::vector<double>& per_class_final) {
  if (per_class_best.size() != per_class_final.size()) throw ContractError("forgetting: vector lengths differ");
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t c = 0; c < per_class_best.size(); ++c) {
    if (std::isnan(per_class_best[c]) || std::isnan(per_class_final[c])) {
      spdlog::warn("forgetting: class {} was never evaluated and is excluded", c);
      continue;
    }
    total += std::max(0.0, per_class_best[c] - per_class_final[c]);
    ++n;
  }
  if (n == 0) throw ContractError("forgetting: no evaluated classes");
  return total / static_cast<double>(n);
}

double accuracy(const std::vector<int>& predictions, const std::vector<int>& labels) {
  if (predictions.size() != labels.size() || labels.empty()) throw ContractError("accuracy: size mismatch or empty");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += predictions[i] == labels[i];
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

Aggregate aggregate(const std::vector<double>& values) {
  if (values.empty()) throw ContractError("aggregate: no values");
  Aggregate a;
  a.n = values.size();
  for (double v : values) a.mean += v;
  a.mean /= static_cast<double>(a.n);
  if (a.n > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - a.mean) * (v - a.mean);
    a.std = std::sqrt(ss / static_cast<double>(a.n - 1));
  }
  return a;
}

std::string format_percent(const Aggregate& a) { return fmt::format("{:.2f}±{:.2f}", 100.0 * a.mean, 100.0 * a.std); }

double interpolate(const AccuracyCurve& curve, double x) {
  const auto& p = curve.points;
  if (p.empty()) throw ContractError("interpolate: empty curve");
  if (x <= p.front().x) return p.front().y;
  if (x >= p.back().x) return p.back().y;
  std::size_t i = 1;
  while (p[i].x < x) ++i;
  const double t = (x - p[i - 1].x) / (p[i].x - p[i - 1].x);
  return p[i - 1].y + t * (p[i].y - p[i - 1].y);
}

}  // namespace siblurry
