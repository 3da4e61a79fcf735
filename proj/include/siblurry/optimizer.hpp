#pragma once

#include <vector>

#include "siblurry/types.hpp"

namespace siblurry {

struct AdamConfig {
  double lr = 0.005;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Moment estimates for one parameter matrix.
struct AdamSlot {
  Matrix m;
  Matrix v;
  long step = 0;
};

/// One Adam update. When `columns` is non-empty, only columns c with
/// columns[c] set are touched (values and moments alike).
void adam_step(Matrix& param, const Matrix& grad, AdamSlot& slot, const AdamConfig& config,
               const std::vector<bool>& columns = {});

}  // namespace siblurry
