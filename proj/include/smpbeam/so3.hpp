#pragma once

// Finite-rotation kernels: skew/axial maps, exponential map on SO(3), the
// right tangent (dexp) operator and its arc-length rate. These are the
// building blocks of the multiplicative rotation update R <- R*exp(dTheta~)
// and of the consistent curvature update.

#include <cmath>
#include <stdexcept>

#include "smpbeam/types.hpp"

namespace smpbeam::so3 {

// Angles below this use truncated Taylor branches (4th order), so all maps
// stay smooth through theta = 0.
inline constexpr double kSmallAngle = 1e-6;

inline Mat3 hat(const Vec3& v) {
  Mat3 m;
  m << 0.0, -v.z(), v.y(),
       v.z(), 0.0, -v.x(),
      -v.y(), v.x(), 0.0;
  return m;
}

// Inverse of hat(). Inputs must be skew-symmetric up to a relative 1e-10.
inline Vec3 axial(const Mat3& a) {
  const double sym = (a + a.transpose()).norm();
  if (sym > 1e-10 * std::max(a.norm(), 1e-300)) {
    throw std::invalid_argument("axial: matrix is not skew-symmetric");
  }
  return Vec3(0.5 * (a(2, 1) - a(1, 2)),
              0.5 * (a(0, 2) - a(2, 0)),
              0.5 * (a(1, 0) - a(0, 1)));
}

// Rodrigues formula, exp(theta~) = I + a(t)*theta~ + b(t)*theta~^2 with
// a = sin(t)/t, b = (1-cos(t))/t^2, t = |theta|.
inline Rotation exp(const Vec3& theta) {
  const double t2 = theta.squaredNorm();
  const double t = std::sqrt(t2);
  double a, b;
  if (t < kSmallAngle) {
    a = 1.0 - t2 / 6.0 + t2 * t2 / 120.0;
    b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0;
  } else {
    a = std::sin(t) / t;
    b = (1.0 - std::cos(t)) / t2;
  }
  const Mat3 th = hat(theta);
  return Mat3::Identity() + a * th + b * th * th;
}

// Rotation vector of R (principal branch, |theta| <= pi).
inline Vec3 log(const Rotation& r) {
  const double c = std::clamp(0.5 * (r.trace() - 1.0), -1.0, 1.0);
  const double t = std::acos(c);
  const Vec3 w(0.5 * (r(2, 1) - r(1, 2)),
               0.5 * (r(0, 2) - r(2, 0)),
               0.5 * (r(1, 0) - r(0, 1)));  // = sin(t) * axis
  if (t < kSmallAngle) {
    return w;  // theta = w * (1 + t^2/6 + ...), error O(t^3)
  }
  if (t > M_PI - 1e-3) {
    // Near pi, sin(t) is tiny; recover the axis from the symmetric part:
    // R + R^T = 2*cos(t)*I + 2*(1-cos(t))*n*n^T.
    const Mat3 s = 0.5 * (r + r.transpose());
    Mat3 nnt = (s - c * Mat3::Identity()) / (1.0 - c);
    int k;
    nnt.diagonal().maxCoeff(&k);
    Vec3 n = nnt.col(k) / std::sqrt(nnt(k, k));
    if (n.dot(w) < 0.0) n = -n;
    return t * n;
  }
  return (t / std::sin(t)) * w;
}

// Right tangent operator T(theta): for a curve theta(s),
//   axial(exp(-theta~) * d/ds exp(theta~)) = T(theta) * theta,_s.
// Closed form: T = I - b(t)*theta~ + c(t)*theta~^2 with
// b = (1-cos t)/t^2, c = (t - sin t)/t^3.
inline Mat3 dexp_right(const Vec3& theta) {
  const double t2 = theta.squaredNorm();
  const double t = std::sqrt(t2);
  double b, c;
  if (t < kSmallAngle) {
    b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0;
    c = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0;
  } else {
    b = (1.0 - std::cos(t)) / t2;
    c = (t - std::sin(t)) / (t2 * t);
  }
  const Mat3 th = hat(theta);
  return Mat3::Identity() - b * th + c * th * th;
}

// Inverse of the right tangent operator:
// T^{-1}(theta) = I + theta~/2 + c(t) theta~^2,
// c = 1/t^2 - (1 + cos t)/(2 t sin t). The left inverse is its transpose.
inline Mat3 dexp_right_inv(const Vec3& theta) {
  const double t2 = theta.squaredNorm();
  const double t = std::sqrt(t2);
  double c;
  if (t < 1e-3) {
    c = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0;
  } else {
    c = 1.0 / t2 - (1.0 + std::cos(t)) / (2.0 * t * std::sin(t));
  }
  const Mat3 th = hat(theta);
  return Mat3::Identity() + 0.5 * th + c * th * th;
}

inline Mat3 dexp_left_inv(const Vec3& theta) {
  return dexp_right_inv(Vec3(-theta));
}

struct TangentRates {
  Vec3 w;    // T(theta) * theta,_s
  Vec3 w_s;  // d/ds [ T(theta(s)) * theta,_s(s) ]
};

// Rate form of dexp_right, used to update the curvature derivative after a
// multiplicative rotation increment. Differentiates T(theta(s))*theta,_s.
inline TangentRates tangent_rates(const Vec3& theta, const Vec3& theta_s,
                                  const Vec3& theta_ss) {
  const double t2 = theta.squaredNorm();
  const double t = std::sqrt(t2);
  double b, c, bp_t, cp_t;  // bp_t = b'(t)/t, cp_t = c'(t)/t
  if (t < 0.05) {
    b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0;
    c = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0;
    bp_t = -1.0 / 12.0 + t2 / 180.0 - t2 * t2 / 6720.0;
    cp_t = -1.0 / 60.0 + t2 / 1260.0 - t2 * t2 / 60480.0;
  } else {
    const double st = std::sin(t);
    const double ct = std::cos(t);
    b = (1.0 - ct) / t2;
    c = (t - st) / (t2 * t);
    bp_t = (t * st - 2.0 * (1.0 - ct)) / (t2 * t2);
    cp_t = (t * (1.0 - ct) - 3.0 * (t - st)) / (t2 * t2 * t);
  }
  const Mat3 th = hat(theta);
  const Mat3 th2 = th * th;
  const Mat3 dth = hat(theta_s);
  const double dot = theta.dot(theta_s);
  const Mat3 tmat = Mat3::Identity() - b * th + c * th2;
  const Mat3 dT = dot * (-bp_t * th + cp_t * th2) - b * dth +
                  c * (dth * th + th * dth);
  TangentRates out;
  out.w = tmat * theta_s;
  out.w_s = dT * theta_s + tmat * theta_ss;
  return out;
}

inline double orthonormality_drift(const Rotation& r) {
  return (r.transpose() * r - Mat3::Identity()).norm();
}

inline bool is_rotation(const Rotation& r, double tol = 1e-12) {
  return orthonormality_drift(r) <= tol && std::abs(r.determinant() - 1.0) <= tol;
}

// Closest rotation in the Frobenius sense (polar factor). Used only as a
// drift diagnostic/repair, not in the regular update path.
inline Rotation project(const Mat3& m) {
  Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 r = svd.matrixU() * svd.matrixV().transpose();
  if (r.determinant() < 0.0) {
    Mat3 d = Mat3::Identity();
    d(2, 2) = -1.0;
    r = svd.matrixU() * d * svd.matrixV().transpose();
  }
  return r;
}

}  // namespace smpbeam::so3
