#pragma once

#include <Eigen/Dense>

namespace smpbeam {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

// Cross-section rotation, constrained to SO(3): R^T R = I, det R = 1.
using Rotation = Eigen::Matrix3d;

using VecX = Eigen::VectorXd;
using MatX = Eigen::MatrixXd;

}  // namespace smpbeam
