#pragma once

// Initial configuration of a beam patch: centroid curve, cross-section frame
// R_0, material curvature K_0 = axial(R_0^T R_0,_s) and its arc-length rate,
// plus the Jacobian of the (fixed) arc-length parametrization. The frame for
// generic fitted curves is a rotation-minimizing frame propagated by the
// double-reflection scheme; arcs and straight segments use closed forms.

#include <functional>
#include <stdexcept>
#include <vector>

#include "smpbeam/so3.hpp"
#include "smpbeam/splines.hpp"

namespace smpbeam::geometry {

struct GeometryError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct FramePoint {
  double u = 0.0;
  Vec3 c0 = Vec3::Zero();
  Vec3 c0_u = Vec3::Zero();
  Vec3 c0_uu = Vec3::Zero();
  double jac = 1.0;    // J(u) = |c0,_u| [m]
  double jac_u = 0.0;  // dJ/du
  Vec3 c0_s = Vec3::Zero();   // unit tangent
  Vec3 c0_ss = Vec3::Zero();  // curvature vector of the centroid
  Rotation r0 = Rotation::Identity();
  Vec3 k0 = Vec3::Zero();    // [1/m]
  Vec3 k0_s = Vec3::Zero();  // [1/m^2]
  Vec3 gamma0 = Vec3::UnitZ();    // R0^T c0,_s (= e3 for tangent frames)
  Vec3 gamma0_s = Vec3::Zero();
};

struct InitialConfig {
  splines::SplinePatch patch;
  std::vector<double> coll;      // Greville abscissae
  std::vector<FramePoint> pts;   // one per collocation point
  double fit_residual = 0.0;     // geometry fit residual, 0 for exact shapes

  int num_points() const { return static_cast<int>(pts.size()); }
};

// f,_s = f,_u / J and f,_ss = f,_uu / J^2 - f,_u J,_u / J^3 for the fixed
// initial-geometry Jacobian.
template <typename T>
T arc_length_d1(const T& f_u, double jac) {
  return f_u / jac;
}
template <typename T>
T arc_length_d2(const T& f_u, const T& f_uu, double jac, double jac_u) {
  return f_uu / (jac * jac) - f_u * (jac_u / (jac * jac * jac));
}

namespace detail {

inline FramePoint curve_data(const splines::SplinePatch& patch, double u) {
  FramePoint f;
  f.u = u;
  const auto cp = splines::curve_eval(patch, u, 2);
  f.c0 = cp.c;
  f.c0_u = cp.c_u;
  f.c0_uu = cp.c_uu;
  f.jac = cp.c_u.norm();
  if (f.jac < 1e-12)
    throw GeometryError("degenerate tangent: |c0,_u| vanishes");
  f.jac_u = cp.c_u.dot(cp.c_uu) / f.jac;
  f.c0_s = arc_length_d1(cp.c_u, f.jac);
  f.c0_ss = arc_length_d2(cp.c_u, cp.c_uu, f.jac, f.jac_u);
  return f;
}

inline void finish_frame(FramePoint& f) {
  f.gamma0 = f.r0.transpose() * f.c0_s;
  f.gamma0_s = f.r0.transpose() * f.c0_ss - f.k0.cross(f.gamma0);
}

}  // namespace detail

// Frame provider interface: r0 plus material curvature and its rate at u.
struct FrameData {
  Rotation r0;
  Vec3 k0;
  Vec3 k0_s;
};
using FrameDataFn = std::function<FrameData(double)>;

inline InitialConfig build_initial_config(const splines::SplinePatch& patch,
                                          const FrameDataFn& frame,
                                          double fit_residual = 0.0) {
  patch.validate();
  InitialConfig cfg;
  cfg.patch = patch;
  cfg.coll = splines::greville(patch);
  cfg.fit_residual = fit_residual;
  cfg.pts.reserve(cfg.coll.size());
  for (double u : cfg.coll) {
    FramePoint f = detail::curve_data(patch, u);
    const FrameData fd = frame(u);
    f.r0 = fd.r0;
    f.k0 = fd.k0;
    f.k0_s = fd.k0_s;
    if ((f.r0.col(2) - f.c0_s).norm() > 1e-10)
      throw GeometryError("frame: d3 is not aligned with the tangent");
    detail::finish_frame(f);
    cfg.pts.push_back(f);
  }
  return cfg;
}

// Rotation-minimizing frame along a regular spline curve, propagated on a
// fine grid with the double-reflection scheme and re-propagated locally for
// arbitrary u. K_0 follows from zero twist; K_0,_s by central differences
// on the grid spacing (the initial geometry is fixed data, so this is not
// part of any linearization).
class RotationMinimizingFrame {
 public:
  RotationMinimizingFrame(const splines::SplinePatch& patch, const Vec3& ref,
                          int grid_n = 0)
      : patch_(patch) {
    n_ = grid_n > 0 ? grid_n : std::max(1024, 16 * patch.num_ctrl());
    d1_.resize(n_ + 1);
    Vec3 d3 = tangent(0.0);
    Vec3 d1 = ref - ref.dot(d3) * d3;
    if (d1.norm() < 1e-8) {
      int k;
      d3.cwiseAbs().minCoeff(&k);
      d1 = Vec3::Unit(k) - d3[k] * d3;
    }
    d1_[0] = d1.normalized();
    for (int i = 0; i < n_; ++i) {
      const double u0 = double(i) / n_;
      const double u1 = double(i + 1) / n_;
      d1_[i + 1] = reflect_step(u0, d1_[i], u1);
      const Rotation a = assemble(u0, d1_[i]);
      const Rotation b = assemble(u1, d1_[i + 1]);
      if (so3::log(Rotation(a.transpose() * b)).norm() > M_PI / 2.0)
        throw GeometryError("frame flip: successive frames differ by >= pi/2");
    }
  }

  Rotation at(double u) const {
    const int i = std::min(static_cast<int>(u * n_), n_ - 1);
    const double ui = double(i) / n_;
    if (u == ui) return assemble(ui, d1_[i]);
    return assemble(u, reflect_step(ui, d1_[i], u));
  }

  FrameData frame_data(double u) const {
    FrameData fd;
    fd.r0 = at(u);
    fd.k0 = curvature(u, fd.r0);
    const double du = 1.0 / n_;
    const auto at_k0 = [this](double v) {
      const Rotation r = at(v);
      return curvature(v, r);
    };
    double lo = u - du, hi = u + du;
    if (lo < 0.0) { lo = 0.0; hi = 2.0 * du; }
    if (hi > 1.0) { hi = 1.0; lo = 1.0 - 2.0 * du; }
    const Vec3 dk_du = (at_k0(hi) - at_k0(lo)) / (hi - lo);
    fd.k0_s = dk_du / detail::curve_data(patch_, u).jac;
    return fd;
  }

 private:
  Vec3 tangent(double u) const { return detail::curve_data(patch_, u).c0_s; }

  Rotation assemble(double u, const Vec3& d1) const {
    const Vec3 d3 = tangent(u);
    Rotation r;
    r.col(0) = d1;
    r.col(1) = d3.cross(d1);
    r.col(2) = d3;
    return r;
  }

  // Double reflection (Wang et al.): transports d1 from u0 to u1.
  Vec3 reflect_step(double u0, const Vec3& d1, double u1) const {
    const auto a = detail::curve_data(patch_, u0);
    const auto b = detail::curve_data(patch_, u1);
    const Vec3 v1 = b.c0 - a.c0;
    const double c1 = v1.squaredNorm();
    if (c1 < 1e-28) return d1;
    const Vec3 rl = d1 - (2.0 / c1) * v1.dot(d1) * v1;
    const Vec3 tl = a.c0_s - (2.0 / c1) * v1.dot(a.c0_s) * v1;
    const Vec3 v2 = b.c0_s - tl;
    const double c2 = v2.squaredNorm();
    Vec3 out = (c2 < 1e-28) ? rl : Vec3(rl - (2.0 / c2) * v2.dot(rl) * v2);
    out -= out.dot(b.c0_s) * b.c0_s;  // keep exactly orthogonal to d3
    return out.normalized();
  }

  // Twist-free curvature: K = (-t,_s . d2, t,_s . d1, 0).
  Vec3 curvature(double u, const Rotation& r) const {
    const auto f = detail::curve_data(patch_, u);
    return Vec3(-f.c0_ss.dot(r.col(1)), f.c0_ss.dot(r.col(0)), 0.0);
  }

  splines::SplinePatch patch_;
  int n_ = 0;
  std::vector<Vec3> d1_;
};

// Generic builder: rotation-minimizing frame seeded from a reference
// direction at u = 0.
inline InitialConfig frame_along_curve(const splines::SplinePatch& patch,
                                       const Vec3& ref = Vec3::UnitZ(),
                                       double fit_residual = 0.0) {
  RotationMinimizingFrame rmf(patch, ref);
  return build_initial_config(
      patch, [&rmf](double u) { return rmf.frame_data(u); }, fit_residual);
}

// Straight segment with a constant frame.
inline InitialConfig build_straight_beam(const Vec3& start, const Vec3& end,
                                         int p, int n,
                                         const Vec3& ref = Vec3::UnitZ()) {
  const auto patch = splines::line_patch(start, end, p, n);
  Vec3 d3 = (end - start).normalized();
  Vec3 d1 = ref - ref.dot(d3) * d3;
  if (d1.norm() < 1e-8) {
    int k;
    d3.cwiseAbs().minCoeff(&k);
    d1 = (Vec3::Unit(k) - d3[k] * d3);
  }
  d1.normalize();
  Rotation r;
  r.col(0) = d1;
  r.col(1) = d3.cross(d1);
  r.col(2) = d3;
  return build_initial_config(patch, [r](double) {
    return FrameData{r, Vec3::Zero(), Vec3::Zero()};
  });
}

// Rigid motion of an initial configuration: control points map by q, b; the
// frame rotates by q; material curvature data is invariant.
inline InitialConfig transform(const InitialConfig& cfg, const Rotation& q,
                               const Vec3& b) {
  splines::SplinePatch patch = cfg.patch;
  for (int j = 0; j < patch.num_ctrl(); ++j)
    patch.ctrl.col(j) = q * patch.ctrl.col(j) + b;
  InitialConfig out;
  out.patch = patch;
  out.coll = cfg.coll;
  out.fit_residual = cfg.fit_residual;
  for (size_t i = 0; i < cfg.coll.size(); ++i) {
    FramePoint f = detail::curve_data(patch, cfg.coll[i]);
    f.r0 = q * cfg.pts[i].r0;
    f.k0 = cfg.pts[i].k0;
    f.k0_s = cfg.pts[i].k0_s;
    detail::finish_frame(f);
    out.pts.push_back(f);
  }
  return out;
}

// Planar circular arch in the (x1,x2) plane: clamped end at the origin,
// initial tangent +x1, centre at (0, radius, 0). Exact rational geometry at
// any degree/refinement; the frame keeps d2 = e3, so K_0 = (0, 1/R, 0).
inline InitialConfig build_arch(double radius, double sweep, int p, int n) {
  if (radius <= 0.0) throw std::invalid_argument("arch: radius must be positive");
  if (sweep <= 0.0 || sweep >= M_PI)
    throw std::invalid_argument("arch: sweep must be in (0, pi)");
  splines::SplinePatch bez;
  bez.degree = 2;
  bez.knots.u = {0, 0, 0, 1, 1, 1};
  bez.ctrl.resize(3, 3);
  bez.ctrl.col(0) = Vec3::Zero();
  bez.ctrl.col(1) = Vec3(radius * std::tan(sweep / 2.0), 0, 0);
  bez.ctrl.col(2) = Vec3(radius * std::sin(sweep), radius * (1.0 - std::cos(sweep)), 0);
  bez.weights.resize(3);
  bez.weights << 1.0, std::cos(sweep / 2.0), 1.0;
  const auto patch = splines::refine_to(bez, p, n);

  auto frame = [&patch, radius](double u) {
    const auto f = detail::curve_data(patch, u);
    Rotation r;
    r.col(2) = f.c0_s;
    r.col(1) = Vec3::UnitZ();
    r.col(0) = r.col(1).cross(r.col(2));
    return FrameData{r, Vec3(0.0, 1.0 / radius, 0.0), Vec3::Zero()};
  };
  return build_initial_config(patch, frame);
}

}  // namespace smpbeam::geometry
