#pragma once

// B-spline/NURBS curve machinery: basis functions and derivatives up to
// second order (Cox-de Boor recursion), Greville abscissae, exact knot
// insertion and Bezier degree elevation in homogeneous coordinates, and a
// constrained least-squares fit used for sampled wire shapes.

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "smpbeam/types.hpp"

namespace smpbeam::splines {

struct KnotVector {
  std::vector<double> u;

  int size() const { return static_cast<int>(u.size()); }

  // Number of basis functions for degree p.
  int basis_count(int p) const { return size() - p - 1; }

  // Open (clamped) uniform knot vector on [0,1] with n basis functions.
  static KnotVector clamped_uniform(int p, int n) {
    if (n < p + 1) throw std::invalid_argument("knot vector: need n >= p+1");
    KnotVector kv;
    kv.u.assign(n + p + 1, 0.0);
    const int spans = n - p;
    for (int i = 0; i <= p; ++i) kv.u[n + i] = 1.0;
    for (int i = 1; i < spans; ++i) kv.u[p + i] = double(i) / double(spans);
    return kv;
  }

  void validate(int p) const {
    const int n = basis_count(p);
    if (n < p + 1) throw std::invalid_argument("knot vector: too few knots");
    if (!std::is_sorted(u.begin(), u.end()))
      throw std::invalid_argument("knot vector: not nondecreasing");
    for (int i = 0; i <= p; ++i) {
      if (u[i] != u.front() || u[n + i] != u.back())
        throw std::invalid_argument("knot vector: ends not clamped");
    }
    if (u.front() != 0.0 || u.back() != 1.0)
      throw std::invalid_argument("knot vector: domain must be [0,1]");
  }

  // Index i of the span [u_i, u_{i+1}) containing t; the last span is closed.
  int find_span(int p, double t) const {
    const int n = basis_count(p);
    if (t >= u[n]) return n - 1;
    if (t <= u[p]) return p;
    int lo = p, hi = n;
    while (hi - lo > 1) {
      const int mid = (lo + hi) / 2;
      (t < u[mid] ? hi : lo) = mid;
    }
    return lo;
  }
};

// Nonzero B-spline basis functions and u-derivatives at t (Piegl-Tiller
// A2.3). Row k holds the k-th derivative of the p+1 active functions.
inline MatX bspline_basis_ders(const KnotVector& kv, int p, double t,
                               int max_deriv) {
  const int span = kv.find_span(p, t);
  const std::vector<double>& U = kv.u;
  MatX ndu = MatX::Zero(p + 1, p + 1);
  std::vector<double> left(p + 1), right(p + 1);
  ndu(0, 0) = 1.0;
  for (int j = 1; j <= p; ++j) {
    left[j] = t - U[span + 1 - j];
    right[j] = U[span + j] - t;
    double saved = 0.0;
    for (int r = 0; r < j; ++r) {
      ndu(j, r) = right[r + 1] + left[j - r];
      const double temp = ndu(r, j - 1) / ndu(j, r);
      ndu(r, j) = saved + right[r + 1] * temp;
      saved = left[j - r] * temp;
    }
    ndu(j, j) = saved;
  }
  MatX ders = MatX::Zero(max_deriv + 1, p + 1);
  for (int j = 0; j <= p; ++j) ders(0, j) = ndu(j, p);
  MatX a = MatX::Zero(2, p + 1);
  for (int r = 0; r <= p; ++r) {
    int s1 = 0, s2 = 1;
    a(0, 0) = 1.0;
    for (int k = 1; k <= max_deriv; ++k) {
      double d = 0.0;
      const int rk = r - k, pk = p - k;
      if (r >= k) {
        a(s2, 0) = a(s1, 0) / ndu(pk + 1, rk);
        d = a(s2, 0) * ndu(rk, pk);
      }
      const int j1 = (rk >= -1) ? 1 : -rk;
      const int j2 = (r - 1 <= pk) ? k - 1 : p - r;
      for (int j = j1; j <= j2; ++j) {
        a(s2, j) = (a(s1, j) - a(s1, j - 1)) / ndu(pk + 1, rk + j);
        d += a(s2, j) * ndu(rk + j, pk);
      }
      if (r <= pk) {
        a(s2, k) = -a(s1, k - 1) / ndu(pk + 1, r);
        d += a(s2, k) * ndu(r, pk);
      }
      ders(k, r) = d;
      std::swap(s1, s2);
    }
  }
  double fac = p;
  for (int k = 1; k <= max_deriv; ++k) {
    for (int j = 0; j <= p; ++j) ders(k, j) *= fac;
    fac *= (p - k);
  }
  return ders;
}

struct SplinePatch {
  int degree = 2;
  KnotVector knots;
  Eigen::Matrix3Xd ctrl;  // control points, one per column [m]
  VecX weights;           // strictly positive; all-ones = plain B-spline

  int num_ctrl() const { return static_cast<int>(ctrl.cols()); }

  void validate() const {
    if (degree < 1) throw std::invalid_argument("patch: degree must be >= 1");
    knots.validate(degree);
    if (knots.basis_count(degree) != num_ctrl())
      throw std::invalid_argument("patch: control point count mismatch");
    if (weights.size() != num_ctrl())
      throw std::invalid_argument("patch: weight count mismatch");
    if ((weights.array() <= 0.0).any())
      throw std::invalid_argument("patch: weights must be positive");
  }

  bool is_rational() const {
    return (weights.array() != weights[0]).any() || weights[0] != 1.0;
  }
};

struct BasisTable {
  int first = 0;  // index of the first active basis function
  MatX der;       // (max_deriv+1) x (p+1) rational basis values/derivatives
};

// Rational (NURBS) basis values and u-derivatives of the p+1 active
// functions at u. Rows of der sum to 1, 0, 0.
inline BasisTable basis_eval(const SplinePatch& patch, double u,
                             int max_deriv) {
  if (u < 0.0 || u > 1.0)
    throw std::invalid_argument("basis_eval: u outside [0,1]");
  if (max_deriv < 0 || max_deriv > 2)
    throw std::invalid_argument("basis_eval: max_deriv must be 0..2");
  const int p = patch.degree;
  const int span = patch.knots.find_span(p, u);
  MatX nd = bspline_basis_ders(patch.knots, p, u, max_deriv);
  BasisTable out;
  out.first = span - p;
  out.der = MatX::Zero(max_deriv + 1, p + 1);
  // Quotient rule on A_j = w_j N_j and W = sum A_j.
  VecX w(p + 1);
  for (int j = 0; j <= p; ++j) w[j] = patch.weights[out.first + j];
  VecX wsum(max_deriv + 1);
  for (int k = 0; k <= max_deriv; ++k)
    wsum[k] = (nd.row(k).transpose().array() * w.array()).sum();
  const double W = wsum[0];
  for (int j = 0; j <= p; ++j) {
    const double a0 = w[j] * nd(0, j);
    out.der(0, j) = a0 / W;
    if (max_deriv >= 1) {
      const double a1 = w[j] * nd(1, j);
      out.der(1, j) = (a1 - out.der(0, j) * wsum[1]) / W;
    }
    if (max_deriv >= 2) {
      const double a2 = w[j] * nd(2, j);
      out.der(2, j) =
          (a2 - 2.0 * out.der(1, j) * wsum[1] - out.der(0, j) * wsum[2]) / W;
    }
  }
  return out;
}

// Greville abscissae (knot averages), one per basis function.
inline std::vector<double> greville(const SplinePatch& patch) {
  const int p = patch.degree;
  const int n = patch.num_ctrl();
  std::vector<double> g(n, 0.0);
  for (int j = 0; j < n; ++j) {
    double s = 0.0;
    for (int k = 1; k <= p; ++k) s += patch.knots.u[j + k];
    g[j] = s / p;
  }
  g.front() = 0.0;
  g.back() = 1.0;
  return g;
}

struct CurvePoint {
  Vec3 c = Vec3::Zero();
  Vec3 c_u = Vec3::Zero();
  Vec3 c_uu = Vec3::Zero();
};

inline CurvePoint curve_eval(const SplinePatch& patch, double u,
                             int max_deriv = 2) {
  const BasisTable b = basis_eval(patch, u, max_deriv);
  CurvePoint out;
  for (int j = 0; j <= patch.degree; ++j) {
    const Vec3 pj = patch.ctrl.col(b.first + j);
    out.c += b.der(0, j) * pj;
    if (max_deriv >= 1) out.c_u += b.der(1, j) * pj;
    if (max_deriv >= 2) out.c_uu += b.der(2, j) * pj;
  }
  return out;
}

namespace detail {

// Homogeneous (projective) control points, one 4-row column per point.
inline Eigen::Matrix4Xd to_homogeneous(const SplinePatch& p) {
  Eigen::Matrix4Xd h(4, p.num_ctrl());
  for (int j = 0; j < p.num_ctrl(); ++j) {
    h.col(j).head<3>() = p.ctrl.col(j) * p.weights[j];
    h(3, j) = p.weights[j];
  }
  return h;
}

inline SplinePatch from_homogeneous(int degree, const KnotVector& kv,
                                    const Eigen::Matrix4Xd& h) {
  SplinePatch p;
  p.degree = degree;
  p.knots = kv;
  p.ctrl.resize(3, h.cols());
  p.weights.resize(h.cols());
  for (int j = 0; j < h.cols(); ++j) {
    p.weights[j] = h(3, j);
    p.ctrl.col(j) = h.col(j).head<3>() / h(3, j);
  }
  return p;
}

}  // namespace detail

// Exact single-knot insertion (Boehm's algorithm) in homogeneous space;
// the evaluated curve is unchanged.
inline SplinePatch insert_knot(const SplinePatch& patch, double t) {
  if (t <= 0.0 || t >= 1.0)
    throw std::invalid_argument("insert_knot: t must be interior");
  const int p = patch.degree;
  const int span = patch.knots.find_span(p, t);
  Eigen::Matrix4Xd h = detail::to_homogeneous(patch);
  Eigen::Matrix4Xd q(4, h.cols() + 1);
  const auto& U = patch.knots.u;
  for (int j = 0; j <= span - p; ++j) q.col(j) = h.col(j);
  for (int j = span - p + 1; j <= span; ++j) {
    const double alpha = (t - U[j]) / (U[j + p] - U[j]);
    q.col(j) = alpha * h.col(j) + (1.0 - alpha) * h.col(j - 1);
  }
  for (int j = span + 1; j < q.cols(); ++j) q.col(j) = h.col(j - 1);
  KnotVector kv = patch.knots;
  kv.u.insert(kv.u.begin() + span + 1, t);
  return detail::from_homogeneous(p, kv, q);
}

// Degree elevation of a single-segment (Bezier) patch by one. Exact in
// homogeneous space.
inline SplinePatch elevate_bezier(const SplinePatch& patch) {
  const int p = patch.degree;
  if (patch.num_ctrl() != p + 1)
    throw std::invalid_argument("elevate_bezier: patch is not a single Bezier segment");
  Eigen::Matrix4Xd h = detail::to_homogeneous(patch);
  Eigen::Matrix4Xd q(4, p + 2);
  q.col(0) = h.col(0);
  q.col(p + 1) = h.col(p);
  for (int i = 1; i <= p; ++i) {
    const double a = double(i) / double(p + 1);
    q.col(i) = a * h.col(i - 1) + (1.0 - a) * h.col(i);
  }
  KnotVector kv = KnotVector::clamped_uniform(p + 1, p + 2);
  return detail::from_homogeneous(p + 1, kv, q);
}

// Raise a single-segment patch to the requested degree and insert uniform
// interior knots until it has n control points. Geometry is preserved
// exactly, so circular arcs stay circular at every (p, n).
inline SplinePatch refine_to(const SplinePatch& bezier, int p, int n) {
  SplinePatch out = bezier;
  while (out.degree < p) out = elevate_bezier(out);
  if (out.degree != p)
    throw std::invalid_argument("refine_to: requesting degree below source");
  const int spans = n - p;
  if (spans < 1) throw std::invalid_argument("refine_to: n too small for p");
  for (int i = 1; i < spans; ++i)
    out = insert_knot(out, double(i) / double(spans));
  out.validate();
  return out;
}

// Straight segment as a degree-p B-spline with control points at the
// Greville abscissae; by linear precision c(u) = a + u*(b-a) exactly.
inline SplinePatch line_patch(const Vec3& a, const Vec3& b, int p, int n) {
  SplinePatch patch;
  patch.degree = p;
  patch.knots = KnotVector::clamped_uniform(p, n);
  patch.weights = VecX::Ones(n);
  patch.ctrl.resize(3, n);
  const auto g = greville(patch);
  for (int j = 0; j < n; ++j) patch.ctrl.col(j) = a + g[j] * (b - a);
  patch.validate();
  return patch;
}

struct FitResult {
  SplinePatch patch;
  double residual = 0.0;  // max distance between samples and the fit [m]
};

// Least-squares degree-p B-spline through sampled points with chord-length
// parametrization. First/last control points interpolate the ends exactly.
inline FitResult fit_points(const std::vector<Vec3>& pts, int p, int n) {
  const int m = static_cast<int>(pts.size());
  if (m < n) throw std::invalid_argument("fit_points: need at least n samples");
  SplinePatch patch;
  patch.degree = p;
  patch.knots = KnotVector::clamped_uniform(p, n);
  patch.weights = VecX::Ones(n);
  // chord-length parameters
  VecX t(m);
  t[0] = 0.0;
  for (int i = 1; i < m; ++i)
    t[i] = t[i - 1] + (pts[i] - pts[i - 1]).norm();
  const double total = t[m - 1];
  if (total <= 0.0) throw std::invalid_argument("fit_points: degenerate samples");
  for (int i = 0; i < m; ++i) t[i] = std::clamp(t[i] / total, 0.0, 1.0);

  MatX A = MatX::Zero(m, n);
  for (int i = 0; i < m; ++i) {
    const int span = patch.knots.find_span(p, t[i]);
    MatX nd = bspline_basis_ders(patch.knots, p, t[i], 0);
    for (int j = 0; j <= p; ++j) A(i, span - p + j) = nd(0, j);
  }
  // Pin the end control points, solve the interior in least squares.
  MatX Ai = A.middleCols(1, n - 2);
  MatX rhs(m, 3);
  for (int i = 0; i < m; ++i)
    rhs.row(i) = (pts[i] - A(i, 0) * pts.front() - A(i, n - 1) * pts.back())
                     .transpose();
  MatX sol = Ai.colPivHouseholderQr().solve(rhs);
  patch.ctrl.resize(3, n);
  patch.ctrl.col(0) = pts.front();
  patch.ctrl.col(n - 1) = pts.back();
  for (int j = 0; j < n - 2; ++j) patch.ctrl.col(j + 1) = sol.row(j).transpose();
  patch.validate();

  FitResult out;
  out.patch = patch;
  for (int i = 0; i < m; ++i) {
    const Vec3 c = curve_eval(patch, t[i], 0).c;
    out.residual = std::max(out.residual, (c - pts[i]).norm());
  }
  return out;
}

}  // namespace smpbeam::splines
