#pragma once

#include <Eigen/Dense>

namespace pppn {

/// Row-major so that a row of a matrix matches one flattened spatial position.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

enum class RefineMode { naive, dynamic };

inline const char* to_string(RefineMode m) { return m == RefineMode::naive ? "naive" : "dynamic"; }

}  // namespace pppn
