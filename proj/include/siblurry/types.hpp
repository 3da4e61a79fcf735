#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Dense>

namespace siblurry {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;
using Index = Eigen::Index;

using SampleId = std::uint64_t;
using ClassId = int;
using Labels = std::vector<ClassId>;

}  // namespace siblurry
