#include "siblurry/optimizer.hpp"

#include <cmath>

#include "siblurry/error.hpp"

namespace siblurry {

void adam_step(Matrix& param, const Matrix& grad, AdamSlot& slot, const AdamConfig& config,
               const std::vector<bool>& columns) {
  if (grad.rows() != param.rows() || grad.cols() != param.cols()) throw ContractError("adam: gradient shape mismatch");
  if (!columns.empty() && static_cast<Index>(columns.size()) != param.cols()) {
    throw ContractError("adam: column mask width mismatch");
  }
  if (slot.m.size() == 0) {
    slot.m = Matrix::Zero(param.rows(), param.cols());
    slot.v = Matrix::Zero(param.rows(), param.cols());
  }
  ++slot.step;
  const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(slot.step));
  const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(slot.step));
  for (Index j = 0; j < param.cols(); ++j) {
    if (!columns.empty() && !columns[static_cast<std::size_t>(j)]) continue;
    for (Index i = 0; i < param.rows(); ++i) {
      const double g = grad(i, j);
      double& m = slot.m(i, j);
      double& v = slot.v(i, j);
      m = config.beta1 * m + (1.0 - config.beta1) * g;
      v = config.beta2 * v + (1.0 - config.beta2) * g * g;
      param(i, j) -= config.lr * (m / c1) / (std::sqrt(v / c2) + config.eps);
    }
  }
}

}  // namespace siblurry
