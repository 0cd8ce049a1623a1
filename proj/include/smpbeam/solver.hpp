#pragma once

// Strong-form isogeometric collocation solver for quasi-static,
// geometrically exact viscoelastic beams. The time-discretized, linearized
// balance equations are collocated at the interior Greville points; patch
// ends carry boundary, symmetry, or interface rows, giving a square system
// in the incremental control translations and rotations. Updates follow
// the multiplicative rule R <- R exp(dTheta~) with the matching consistent
// curvature transport, so the assembled Jacobian is the exact derivative
// of the discrete residual.

#include <Eigen/Sparse>
#include <Eigen/SparseLU>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <vector>

#include "smpbeam/geometry.hpp"
#include "smpbeam/material.hpp"
#include "smpbeam/schedule.hpp"
#include "smpbeam/so3.hpp"

namespace smpbeam::solver {

struct SolverError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NewtonOptions {
  double tol_residual = 1e-8;   // |residual|_inf, problem units
  double tol_increment = 1e-10; // |increment|_inf
  int max_iterations = 25;
  int max_bisections = 4;       // local step halving on failure
  double drift_repair = 1e-10;  // re-orthonormalize R beyond this drift
  // Last-resort stabilization: when a step fails even after bisection, the
  // step is retried with a fictitious drag force -k (c - c_n)/h against the
  // step displacement, with k escalated from this base factor (relative to
  // the axial stiffness). Quasi-static equilibria are recovered wherever
  // the structure comes to rest; snap-throughs pass to the next stable
  // branch instead of aborting. 0 disables.
  double stabilization = 0.0;
};

// ---------------------------------------------------------------------------
// Per-collocation-point context and row builders
// ---------------------------------------------------------------------------

struct PointContext {
  Rotation r = Rotation::Identity();
  Vec3 k = Vec3::Zero();      // total material curvature
  Vec3 k_s = Vec3::Zero();
  Vec3 gam = Vec3::Zero();    // Gamma_N and its arc-length rate
  Vec3 gam_s = Vec3::Zero();
  Vec3 km = Vec3::Zero();     // K_M = K - K_0
  Vec3 km_s = Vec3::Zero();
  Vec3 c_s = Vec3::Zero();    // current centroid derivatives
  Vec3 c_ss = Vec3::Zero();
  Vec3 cbar_n = Vec3::Zero(); // effective stiffness diagonals for the step
  Vec3 cbar_m = Vec3::Zero();
  Vec3 nh = Vec3::Zero();     // frozen history offsets and rates
  Vec3 nh_s = Vec3::Zero();
  Vec3 mh = Vec3::Zero();
  Vec3 mh_s = Vec3::Zero();
  Vec3 load_n = Vec3::Zero(); // distributed loads at t^{n+1} (spatial)
  Vec3 load_m = Vec3::Zero();
  double stab_k = 0.0;            // drag stiffness [N/m^2], 0 when inactive
  Vec3 stab_disp = Vec3::Zero();  // c - c_n at the point
};

inline Vec3 stress_n(const PointContext& pc) {
  return pc.cbar_n.cwiseProduct(pc.gam) - pc.nh;
}
inline Vec3 stress_m(const PointContext& pc) {
  return pc.cbar_m.cwiseProduct(pc.km) - pc.mh;
}

// Linearized force balance at a collocation point: coefficient blocks on
// dTheta,_s, dTheta, deta,_ss, deta,_s and the residual.
struct ForceRow {
  Mat3 d_theta_s, d_theta, d_eta_ss, d_eta_s;
  Mat3 d_eta = Mat3::Zero();  // nonzero only under step stabilization
  Vec3 residual;
};

inline ForceRow assemble_row_force(const PointContext& pc) {
  const Mat3 cn = pc.cbar_n.asDiagonal();
  const Mat3 rt = pc.r.transpose();
  const Vec3 v = rt * pc.c_s;
  const Vec3 n = stress_n(pc);
  const Mat3 kt = so3::hat(pc.k);
  const Mat3 vt = so3::hat(v);
  const Mat3 nt = so3::hat(n);
  const Vec3 load_eff = pc.load_n - pc.stab_k * pc.stab_disp;
  const Vec3 rn = rt * load_eff;
  ForceRow row;
  row.d_theta_s = cn * vt - nt;
  row.d_theta = kt * cn * vt - cn * so3::hat(pc.k.cross(v)) +
                cn * so3::hat(Vec3(rt * pc.c_ss)) + so3::hat(rn) - nt * kt;
  row.d_eta_ss = cn * rt;
  row.d_eta_s = kt * cn * rt - cn * kt * rt;
  if (pc.stab_k != 0.0) row.d_eta = -pc.stab_k * rt;
  row.residual = pc.k.cross(n) + pc.cbar_n.cwiseProduct(pc.gam_s) - pc.nh_s + rn;
  return row;
}

// Linearized moment balance: blocks on dTheta,_ss, dTheta,_s, dTheta,
// deta,_s and the residual.
struct MomentRow {
  Mat3 d_theta_ss, d_theta_s, d_theta, d_eta_s;
  Vec3 residual;
};

inline MomentRow assemble_row_moment(const PointContext& pc) {
  const Mat3 cn = pc.cbar_n.asDiagonal();
  const Mat3 cm = pc.cbar_m.asDiagonal();
  const Mat3 rt = pc.r.transpose();
  const Vec3 v = rt * pc.c_s;
  const Vec3 n = stress_n(pc);
  const Vec3 m = stress_m(pc);
  const Mat3 kt = so3::hat(pc.k);
  const Mat3 vt = so3::hat(v);
  const Mat3 nt = so3::hat(n);
  const Mat3 mt = so3::hat(m);
  const Vec3 rm = rt * pc.load_m;
  MomentRow row;
  row.d_theta_ss = cm;
  row.d_theta_s = cm * kt + kt * cm - mt;
  row.d_theta = kt * cm * kt - mt * kt + cm * so3::hat(pc.k_s) + so3::hat(rm) +
                (vt * cn - nt) * vt;
  row.d_eta_s = (vt * cn - nt) * rt;
  row.residual = pc.k.cross(m) + pc.cbar_m.cwiseProduct(pc.km_s) - pc.mh_s +
                 v.cross(n) + rm;
  return row;
}

// Material-form Neumann end rows. sign = -1 at u=0 and +1 at u=1 so that
// `force`/`moment` are the applied external end loads (spatial, dead).
struct NeumannRows {
  Mat3 t_dtheta, t_deta_s;
  Vec3 t_rhs;
  Mat3 r_dtheta, r_dtheta_s;
  Vec3 r_rhs;
};

inline NeumannRows assemble_neumann_rows(const PointContext& pc,
                                         const Vec3& force, const Vec3& moment,
                                         double sign) {
  const Mat3 cn = pc.cbar_n.asDiagonal();
  const Mat3 cm = pc.cbar_m.asDiagonal();
  const Mat3 rt = pc.r.transpose();
  const Vec3 v = rt * pc.c_s;
  const Vec3 fn = sign * (rt * force);
  const Vec3 fm = sign * (rt * moment);
  NeumannRows out;
  out.t_dtheta = cn * so3::hat(v) - so3::hat(fn);
  out.t_deta_s = cn * rt;
  out.t_rhs = fn - stress_n(pc);
  out.r_dtheta_s = cm;
  out.r_dtheta = cm * so3::hat(pc.k) - so3::hat(fm);
  out.r_rhs = fm - stress_m(pc);
  return out;
}

// Spatial internal force/moment and their linearization blocks, used for
// joint balance and symmetry projections: d(R N) = R[(CN v~ - N~) dTheta +
// CN R^T deta,_s], d(R M) = R[(CM K~ - M~) dTheta + CM dTheta,_s].
struct SpatialStress {
  Vec3 force, moment;
  Mat3 f_dtheta, f_deta_s;
  Mat3 m_dtheta, m_dtheta_s;
};

inline SpatialStress spatial_stress(const PointContext& pc) {
  const Mat3 cn = pc.cbar_n.asDiagonal();
  const Mat3 cm = pc.cbar_m.asDiagonal();
  const Vec3 v = pc.r.transpose() * pc.c_s;
  const Vec3 n = stress_n(pc);
  const Vec3 m = stress_m(pc);
  SpatialStress out;
  out.force = pc.r * n;
  out.moment = pc.r * m;
  out.f_dtheta = pc.r * (cn * so3::hat(v) - so3::hat(n));
  out.f_deta_s = pc.r * cn * pc.r.transpose();
  out.m_dtheta = pc.r * (cm * so3::hat(pc.k) - so3::hat(m));
  out.m_dtheta_s = pc.r * cm;
  return out;
}

// Relative discrete L2 error between two sampled vector fields.
inline double l2_error(const std::vector<Vec3>& field,
                       const std::vector<Vec3>& ref) {
  if (field.size() != ref.size())
    throw std::invalid_argument("l2_error: grid size mismatch");
  double num = 0.0, den = 0.0;
  for (size_t i = 0; i < field.size(); ++i) {
    num += (field[i] - ref[i]).squaredNorm();
    den += ref[i].squaredNorm();
  }
  if (den == 0.0) throw std::domain_error("l2_error: zero reference norm");
  return std::sqrt(num / den);
}

// ---------------------------------------------------------------------------
// Model description
// ---------------------------------------------------------------------------

struct EndLoad {
  Vec3 force = Vec3::Zero();   // applied end force at unit scale [N]
  Vec3 moment = Vec3::Zero();  // applied end couple [N m]
  int channel = -1;            // schedule channel scaling both
};

struct EndBC {
  enum class Kind { Free, Clamped, Symmetry };
  Kind kind = Kind::Free;
  EndLoad load;                 // Free
  Vec3 motion = Vec3::Zero();   // Clamped: imposed translation at unit scale
  int motion_channel = -1;
  Vec3 normal = Vec3::UnitZ();  // Symmetry plane normal
  // In-plane translation pins (at most two), used to remove rigid modes
  // left over after a Dirichlet -> Neumann program switch. Each pin holds
  // dir . c = value.
  struct Pin {
    Vec3 dir = Vec3::UnitX();
    double value = 0.0;
  };
  std::vector<Pin> pins;
};

struct MemberEnd {
  int patch = 0;
  int end = 0;  // 0: u=0, 1: u=1
};

struct Joint {
  std::vector<MemberEnd> ends;  // ends[0] is the master
  bool driven = false;          // translations prescribed toward target
  Vec3 pos_start = Vec3::Zero();
  Vec3 pos_target = Vec3::Zero();
  int ramp_channel = -1;        // channel in [0,1] blending start -> target
  bool clamp_rotations = false; // also freeze master rotation while driven
  Vec3 force = Vec3::Zero();    // applied nodal loads (balance mode)
  Vec3 moment = Vec3::Zero();
  int load_channel = -1;
};

struct PatchDef {
  geometry::InitialConfig config;
  material::StiffnessTensors tensors;
  Vec3 dist_force = Vec3::Zero();   // distributed loads at unit scale
  Vec3 dist_moment = Vec3::Zero();
  int dist_channel = -1;
  EndBC bc[2];
};

// ---------------------------------------------------------------------------
// Simulation state
// ---------------------------------------------------------------------------

struct PointState {
  Rotation r = Rotation::Identity();
  Vec3 k = Vec3::Zero(), k_s = Vec3::Zero();
  Vec3 c = Vec3::Zero();      // centroid position at the point
  Vec3 c_ref = Vec3::Zero();  // position at the step start (drag reference)
  Vec3 c_s = Vec3::Zero(), c_ss = Vec3::Zero();
  Vec3 gam = Vec3::Zero(), gam_s = Vec3::Zero();
  std::vector<Vec3> gv, gv_s, kv, kv_s;          // per-branch viscous strains
  std::vector<Vec3> psi_g, psi_g_s, psi_k, psi_k_s;  // frozen step vectors
  Vec3 nh = Vec3::Zero(), nh_s = Vec3::Zero();   // frozen stress offsets
  Vec3 mh = Vec3::Zero(), mh_s = Vec3::Zero();
};

class Simulation {
 public:
  NewtonOptions options;
  schedule::Schedule sched;
  material::PronySeries prony;

  int add_patch(PatchDef def) {
    Patch p;
    p.def = std::move(def);
    patches_.push_back(std::move(p));
    return static_cast<int>(patches_.size()) - 1;
  }

  int add_joint(Joint j) {
    joints_.push_back(std::move(j));
    return static_cast<int>(joints_.size()) - 1;
  }

  void initialize() {
    prony.validate();
    const int m = prony.num_branches();
    int base = 0;
    for (auto& p : patches_) {
      const auto& cfg = p.def.config;
      const int n = cfg.num_points();
      p.dof_base = base;
      base += 6 * n;
      p.basis.resize(n);
      p.pts.assign(n, PointState{});
      p.ctrl = cfg.patch.ctrl;
      for (int i = 0; i < n; ++i) {
        const auto bt = splines::basis_eval(cfg.patch, cfg.coll[i], 2);
        const auto& fp = cfg.pts[i];
        PointBasis& pb = p.basis[i];
        pb.first = bt.first;
        const int cols = cfg.patch.degree + 1;
        pb.val.resize(cols);
        pb.d1.resize(cols);
        pb.d2.resize(cols);
        for (int j = 0; j < cols; ++j) {
          pb.val[j] = bt.der(0, j);
          pb.d1[j] = geometry::arc_length_d1(bt.der(1, j), fp.jac);
          pb.d2[j] = geometry::arc_length_d2(bt.der(1, j), bt.der(2, j), fp.jac,
                                             fp.jac_u);
        }
        PointState& ps = p.pts[i];
        ps.r = fp.r0;
        ps.k = fp.k0;
        ps.k_s = fp.k0_s;
        ps.gv.assign(m, Vec3::Zero());
        ps.gv_s.assign(m, Vec3::Zero());
        ps.kv.assign(m, Vec3::Zero());
        ps.kv_s.assign(m, Vec3::Zero());
        ps.psi_g.assign(m, Vec3::Zero());
        ps.psi_g_s.assign(m, Vec3::Zero());
        ps.psi_k.assign(m, Vec3::Zero());
        ps.psi_k_s.assign(m, Vec3::Zero());
      }
      p.end_joint[0] = p.end_joint[1] = -1;
      double len = 0.0;
      for (int i = 1; i < n; ++i)
        len += (cfg.pts[i].c0 - cfg.pts[i - 1].c0).norm();
      p.length = std::max(len, 1e-9);
    }
    dof_count_ = base;
    for (int j = 0; j < static_cast<int>(joints_.size()); ++j) {
      for (const auto& e : joints_[j].ends) {
        patches_.at(e.patch).end_joint[e.end] = j;
      }
    }
    refresh_geometry();
    t_ = 0.0;
    step_open_ = false;
  }

  double time() const { return t_; }
  int dof_count() const { return dof_count_; }
  int num_patches() const { return static_cast<int>(patches_.size()); }

  Joint& joint(int i) { return joints_.at(i); }
  const Joint& joint(int i) const { return joints_.at(i); }
  int num_joints() const { return static_cast<int>(joints_.size()); }
  EndBC& end_bc(int patch, int end) { return patches_.at(patch).def.bc[end]; }

  const PointState& point_state(int patch, int i) const {
    return patches_.at(patch).pts.at(i);
  }
  const geometry::InitialConfig& config(int patch) const {
    return patches_.at(patch).def.config;
  }

  Vec3 position(int patch, double u) const {
    const auto& p = patches_.at(patch);
    const auto bt = splines::basis_eval(p.def.config.patch, u, 0);
    Vec3 c = Vec3::Zero();
    for (int j = 0; j <= p.def.config.patch.degree; ++j)
      c += bt.der(0, j) * p.ctrl.col(bt.first + j);
    return c;
  }

  Vec3 displacement(int patch, double u) const {
    return position(patch, u) - splines::curve_eval(
        patches_.at(patch).def.config.patch, u, 0).c;
  }

  Vec3 joint_position(int j) const {
    const auto& e = joints_.at(j).ends.front();
    return position(e.patch, e.end == 0 ? 0.0 : 1.0);
  }

  // -------------------------------------------------------------------------
  // Step machinery
  // -------------------------------------------------------------------------

  // Freeze the step context at t_next: relaxation times at both ends of the
  // step, history vectors Psi from the converged state, effective stiffness
  // and history stress offsets.
  void begin_step(double t_next) {
    if (t_next <= t_) throw std::invalid_argument("begin_step: t must advance");
    h_ = t_next - t_;
    t_next_ = t_next;
    const auto tau_n = material::relaxation_times(prony, sched.temperature(t_));
    const auto tau_p = material::relaxation_times(prony, sched.temperature(t_next));
    const int m = prony.num_branches();
    coeffs_.resize(m);
    for (int a = 0; a < m; ++a)
      coeffs_[a] = material::branch_coeffs(tau_n[a], tau_p[a], h_);
    for (auto& p : patches_) {
      p.cbar_n = material::effective_stiffness(p.def.tensors.cn_inf,
                                               p.def.tensors.cn_branch, coeffs_);
      p.cbar_m = material::effective_stiffness(p.def.tensors.cm_inf,
                                               p.def.tensors.cm_branch, coeffs_);
      for (int i = 0; i < p.num_points(); ++i) {
        PointState& ps = p.pts[i];
        ps.c_ref = ps.c;
        const auto& fp = p.def.config.pts[i];
        const Vec3 km = ps.k - fp.k0;
        const Vec3 km_s = ps.k_s - fp.k0_s;
        ps.nh.setZero();
        ps.nh_s.setZero();
        ps.mh.setZero();
        ps.mh_s.setZero();
        for (int a = 0; a < m; ++a) {
          ps.psi_g[a] = material::history_vector(ps.gam, ps.gv[a], coeffs_[a]);
          ps.psi_g_s[a] =
              material::history_vector(ps.gam_s, ps.gv_s[a], coeffs_[a]);
          ps.psi_k[a] = material::history_vector(km, ps.kv[a], coeffs_[a]);
          ps.psi_k_s[a] =
              material::history_vector(km_s, ps.kv_s[a], coeffs_[a]);
          const double w = coeffs_[a].upd_hist;
          ps.nh += w * p.def.tensors.cn_branch[a].cwiseProduct(ps.psi_g[a]);
          ps.nh_s += w * p.def.tensors.cn_branch[a].cwiseProduct(ps.psi_g_s[a]);
          ps.mh += w * p.def.tensors.cm_branch[a].cwiseProduct(ps.psi_k[a]);
          ps.mh_s += w * p.def.tensors.cm_branch[a].cwiseProduct(ps.psi_k_s[a]);
        }
      }
    }
    step_open_ = true;
    refresh_viscous();
  }

  struct Assembled {
    Eigen::SparseMatrix<double> jac;
    VecX rhs;  // -residual
  };

  Assembled assemble() const {
    if (!step_open_) throw std::logic_error("assemble: no open step");
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(static_cast<size_t>(dof_count_) * 24);
    VecX rhs = VecX::Zero(dof_count_);

    for (int q = 0; q < num_patches(); ++q) {
      const Patch& p = patches_[q];
      const int n = p.num_points();
      for (int i = 1; i + 1 < n; ++i) {
        const PointContext pc = point_context(q, i);
        const int row = p.dof_base + 6 * i;
        const ForceRow f = assemble_row_force(pc);
        scatter_theta(trip, row, q, i, f.d_theta, f.d_theta_s, Mat3::Zero());
        scatter_eta(trip, row, q, i, f.d_eta, f.d_eta_s, f.d_eta_ss);
        rhs.segment<3>(row) = -f.residual;
        const MomentRow mr = assemble_row_moment(pc);
        scatter_theta(trip, row + 3, q, i, mr.d_theta, mr.d_theta_s,
                      mr.d_theta_ss);
        scatter_eta(trip, row + 3, q, i, Mat3::Zero(), mr.d_eta_s, Mat3::Zero());
        rhs.segment<3>(row + 3) = -mr.residual;
      }
      for (int e = 0; e < 2; ++e) {
        if (p.end_joint[e] >= 0) continue;  // joint rows handled below
        assemble_end(trip, rhs, q, e);
      }
    }
    for (const auto& j : joints_) assemble_joint(trip, rhs, j);

    Assembled out;
    out.jac.resize(dof_count_, dof_count_);
    out.jac.setFromTriplets(trip.begin(), trip.end());
    out.rhs = std::move(rhs);
    return out;
  }

  // Multiplicative/additive incremental update of the configuration and the
  // consistent transport of K and K,_s.
  void apply_increment(const VecX& d) {
    for (auto& p : patches_) {
      const int n = p.num_points();
      for (int i = 0; i < n; ++i) {
        const auto& pb = p.basis[i];
        Vec3 th = Vec3::Zero(), th_s = Vec3::Zero(), th_ss = Vec3::Zero();
        for (int j = 0; j < pb.val.size(); ++j) {
          const auto seg = d.segment<3>(p.dof_base + 6 * (pb.first + j) + 3);
          th += pb.val[j] * seg;
          th_s += pb.d1[j] * seg;
          th_ss += pb.d2[j] * seg;
        }
        PointState& ps = p.pts[i];
        const Rotation qrot = so3::exp(th);
        const auto rates = so3::tangent_rates(th, th_s, th_ss);
        const Vec3 kq = qrot.transpose() * ps.k;
        ps.r = ps.r * qrot;
        if (so3::orthonormality_drift(ps.r) > options.drift_repair) {
          ps.r = so3::project(ps.r);
          ++drift_repairs_;
        }
        ps.k = kq + rates.w;
        ps.k_s = qrot.transpose() * ps.k_s - rates.w.cross(kq) + rates.w_s;
      }
      for (int j = 0; j < p.ctrl.cols(); ++j)
        p.ctrl.col(j) += d.segment<3>(p.dof_base + 6 * j);
    }
    refresh_geometry();
    refresh_viscous();
  }

  struct NewtonReport {
    bool converged = false;
    int iterations = 0;
    double residual = 0.0;
    std::vector<double> history;  // residual norm per assembled iterate
  };

  // Newton iteration, globalized by a non-monotone line search: full steps
  // are taken whenever they reduce the residual, a short streak of growing
  // full steps is tolerated (Newton overshoot in strongly nonlinear regions
  // recovers quadratically), and only persistent growth triggers
  // backtracking on the squared-norm merit, for which the Newton direction
  // is a descent direction. Converged states are unchanged.
  NewtonReport run_newton() {
    NewtonReport rep;
    Assembled sys = assemble();
    int growth_streak = 0;
    for (int it = 0; it <= options.max_iterations; ++it) {
      if (!sys.rhs.allFinite()) break;
      rep.residual = sys.rhs.lpNorm<Eigen::Infinity>();
      rep.history.push_back(rep.residual);
      if (rep.residual <= options.tol_residual) {
        rep.converged = true;
        rep.iterations = it;
        return rep;
      }
      if (it == options.max_iterations) break;
      VecX d;
      try {
        d = solve_sparse(sys);
      } catch (const SolverError&) {
        break;  // let the caller bisect the step
      }
      if (!d.allFinite()) break;
      ++newton_total_;
      // merit scaled by the current row norms, so rows with different
      // physical units compare meaningfully
      const VecX rscale = row_scales(sys.jac);
      const double merit = sys.rhs.cwiseQuotient(rscale).squaredNorm();
      const SavedState before = save();
      bool accepted = false;
      double alpha = 1.0;
      for (int trial = 0; trial < 13 && !accepted; ++trial, alpha *= 0.5) {
        apply_increment(alpha * d);
        Assembled next = assemble();
        const double merit_next =
            next.rhs.allFinite()
                ? next.rhs.cwiseQuotient(rscale).squaredNorm()
                : std::numeric_limits<double>::infinity();
        const double inc = alpha * d.lpNorm<Eigen::Infinity>();
        bool ok = false;
        if (std::isfinite(merit_next)) {
          if (inc <= options.tol_increment) {
            ok = true;
          } else if (merit_next <= merit * (1.0 - 1e-4 * alpha)) {
            ok = true;
            growth_streak = 0;
          } else if (trial == 0 && growth_streak < 2 &&
                     merit_next < merit * 1e6) {
            ok = true;  // tolerated overshoot at the full step
            ++growth_streak;
          }
        }
        if (ok) {
          accepted = true;
          sys = std::move(next);
          if (inc <= options.tol_increment) {
            rep.converged = true;
            rep.iterations = it + 1;
            return rep;
          }
        } else {
          restore(before);
        }
      }
      if (!accepted) break;  // no productive direction: bisect the step
    }
    rep.iterations = options.max_iterations;
    return rep;
  }

  struct StepReport {
    int substeps = 0;
    int iterations = 0;
    int bisections = 0;
  };

  // Advance to t_next, recursively halving the step on Newton failure and,
  // as a last resort, escalating the stabilization drag.
  StepReport advance_to(double t_next) {
    StepReport rep;
    if (options.stabilization <= 0.0) {
      advance_impl(t_next, 0, rep);
      return rep;
    }
    double factor = 0.0;
    for (int level = 0; level <= 4; ++level) {
      stab_factor_ = factor;
      try {
        advance_impl(t_next, 0, rep);
        stab_factor_ = 0.0;
        if (level > 0) ++stabilized_steps_;
        return rep;
      } catch (const SolverError&) {
        if (level == 4) {
          stab_factor_ = 0.0;
          throw;
        }
        factor = (factor == 0.0) ? options.stabilization : 10.0 * factor;
      }
    }
    return rep;  // unreachable
  }

  void set_stabilization_factor(double f) { stab_factor_ = f; }
  int stabilized_steps() const { return stabilized_steps_; }

  struct SavedState {
    double t;
    std::vector<Eigen::Matrix3Xd> ctrl;
    std::vector<std::vector<PointState>> pts;
  };

  SavedState save() const {
    SavedState s;
    s.t = t_;
    for (const auto& p : patches_) {
      s.ctrl.push_back(p.ctrl);
      s.pts.push_back(p.pts);
    }
    return s;
  }

  // Restores configuration and history; an open step context stays valid
  // (coefficients and effective stiffness are untouched), so the restored
  // state can be re-probed or the step re-begun.
  void restore(const SavedState& s) {
    t_ = s.t;
    for (size_t q = 0; q < patches_.size(); ++q) {
      patches_[q].ctrl = s.ctrl[q];
      patches_[q].pts = s.pts[q];
    }
  }

  // Material stress resultants (N, M) at a collocation point under the
  // current step context.
  std::pair<Vec3, Vec3> stress_at(int patch, int i) const {
    const PointContext pc = point_context(patch, i);
    return {stress_n(pc), stress_m(pc)};
  }

  // Net spatial force/moment imbalance at a joint, i.e. the nodal loads a
  // balance row would have to carry at the current state. Applying the
  // negative as external loads leaves the state in equilibrium.
  std::pair<Vec3, Vec3> joint_imbalance(int j) const {
    Vec3 f = Vec3::Zero(), m = Vec3::Zero();
    for (const auto& e : joints_.at(j).ends) {
      const Patch& p = patches_[e.patch];
      const int i = (e.end == 0) ? 0 : p.num_points() - 1;
      const double sign = (e.end == 0) ? 1.0 : -1.0;
      const SpatialStress sp = spatial_stress(point_context(e.patch, i));
      f += sign * sp.force;
      m += sign * sp.moment;
    }
    return {f, m};
  }

  int newton_iterations_total() const { return newton_total_; }
  int drift_repairs() const { return drift_repairs_; }

  // Exposed for linearization tests: the full nonlinear residual vector at
  // the current state within the open step (rhs = -G).
  VecX residual_vector() const { return -assemble().rhs; }

 private:
  struct PointBasis {
    int first = 0;
    VecX val, d1, d2;  // value and arc-length derivative rows
  };

  struct Patch {
    PatchDef def;
    std::vector<PointBasis> basis;
    Eigen::Matrix3Xd ctrl;
    std::vector<PointState> pts;
    Vec3 cbar_n = Vec3::Zero(), cbar_m = Vec3::Zero();
    double length = 1.0;  // initial arc length, sets the drag scale
    int dof_base = 0;
    int end_joint[2] = {-1, -1};

    int num_points() const { return static_cast<int>(pts.size()); }
  };

  void refresh_geometry() {
    for (auto& p : patches_) {
      for (int i = 0; i < p.num_points(); ++i) {
        const auto& pb = p.basis[i];
        PointState& ps = p.pts[i];
        ps.c.setZero();
        ps.c_s.setZero();
        ps.c_ss.setZero();
        for (int j = 0; j < pb.val.size(); ++j) {
          ps.c += pb.val[j] * p.ctrl.col(pb.first + j);
          ps.c_s += pb.d1[j] * p.ctrl.col(pb.first + j);
          ps.c_ss += pb.d2[j] * p.ctrl.col(pb.first + j);
        }
        const auto& fp = p.def.config.pts[i];
        const Vec3 v = ps.r.transpose() * ps.c_s;
        ps.gam = v - fp.gamma0;
        ps.gam_s = ps.r.transpose() * ps.c_ss - ps.k.cross(v) - fp.gamma0_s;
      }
    }
  }

  void refresh_viscous() {
    if (!step_open_) return;
    const int m = prony.num_branches();
    for (auto& p : patches_) {
      for (int i = 0; i < p.num_points(); ++i) {
        PointState& ps = p.pts[i];
        const auto& fp = p.def.config.pts[i];
        const Vec3 km = ps.k - fp.k0;
        const Vec3 km_s = ps.k_s - fp.k0_s;
        for (int a = 0; a < m; ++a) {
          ps.gv[a] = material::update_viscous_strain(ps.gam, ps.psi_g[a], coeffs_[a]);
          ps.gv_s[a] =
              material::update_viscous_strain(ps.gam_s, ps.psi_g_s[a], coeffs_[a]);
          ps.kv[a] = material::update_viscous_strain(km, ps.psi_k[a], coeffs_[a]);
          ps.kv_s[a] =
              material::update_viscous_strain(km_s, ps.psi_k_s[a], coeffs_[a]);
        }
      }
    }
  }

  PointContext point_context(int q, int i) const {
    const Patch& p = patches_[q];
    const PointState& ps = p.pts[i];
    const auto& fp = p.def.config.pts[i];
    PointContext pc;
    pc.r = ps.r;
    pc.k = ps.k;
    pc.k_s = ps.k_s;
    pc.gam = ps.gam;
    pc.gam_s = ps.gam_s;
    pc.km = ps.k - fp.k0;
    pc.km_s = ps.k_s - fp.k0_s;
    pc.c_s = ps.c_s;
    pc.c_ss = ps.c_ss;
    pc.cbar_n = p.cbar_n;
    pc.cbar_m = p.cbar_m;
    pc.nh = ps.nh;
    pc.nh_s = ps.nh_s;
    pc.mh = ps.mh;
    pc.mh_s = ps.mh_s;
    const double scale = sched.channel_value(p.def.dist_channel, t_next_);
    pc.load_n = scale * p.def.dist_force;
    pc.load_m = scale * p.def.dist_moment;
    if (stab_factor_ > 0.0) {
      pc.stab_k = stab_factor_ * p.cbar_n.maxCoeff() / (p.length * p.length);
      pc.stab_disp = ps.c - ps.c_ref;
    }
    return pc;
  }

  void scatter_block(std::vector<Eigen::Triplet<double>>& trip, int row,
                     int col, const Mat3& b) const {
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c)
        if (b(r, c) != 0.0) trip.emplace_back(row + r, col + c, b(r, c));
  }

  // scatter a 3-row block acting on the rotation increment field of (q, i)
  void scatter_theta(std::vector<Eigen::Triplet<double>>& trip, int row, int q,
                     int i, const Mat3& b_val, const Mat3& b_d1,
                     const Mat3& b_d2) const {
    const Patch& p = patches_[q];
    const auto& pb = p.basis[i];
    for (int j = 0; j < pb.val.size(); ++j) {
      const Mat3 blk = pb.val[j] * b_val + pb.d1[j] * b_d1 + pb.d2[j] * b_d2;
      scatter_block(trip, row, p.dof_base + 6 * (pb.first + j) + 3, blk);
    }
  }

  void scatter_eta(std::vector<Eigen::Triplet<double>>& trip, int row, int q,
                   int i, const Mat3& b_val, const Mat3& b_d1,
                   const Mat3& b_d2) const {
    const Patch& p = patches_[q];
    const auto& pb = p.basis[i];
    for (int j = 0; j < pb.val.size(); ++j) {
      const Mat3 blk = pb.val[j] * b_val + pb.d1[j] * b_d1 + pb.d2[j] * b_d2;
      scatter_block(trip, row, p.dof_base + 6 * (pb.first + j), blk);
    }
  }

  static void plane_basis(const Vec3& e, Vec3& a1, Vec3& a2) {
    const Vec3 g = (std::abs(e.x()) < 0.9) ? Vec3::UnitX() : Vec3::UnitY();
    a1 = (g - g.dot(e) * e).normalized();
    a2 = e.cross(a1);
  }

  Vec3 end_position(int q, int e) const {
    const Patch& p = patches_[q];
    return e == 0 ? Vec3(p.ctrl.col(0)) : Vec3(p.ctrl.col(p.ctrl.cols() - 1));
  }

  Vec3 end_initial_position(int q, int e) const {
    const auto& c = patches_[q].def.config.patch.ctrl;
    return e == 0 ? Vec3(c.col(0)) : Vec3(c.col(c.cols() - 1));
  }

  void assemble_end(std::vector<Eigen::Triplet<double>>& trip, VecX& rhs,
                    int q, int e) const {
    const Patch& p = patches_[q];
    const int i = (e == 0) ? 0 : p.num_points() - 1;
    const int row = p.dof_base + 6 * i;
    const PointContext pc = point_context(q, i);
    const EndBC& bc = p.def.bc[e];
    const double sign = (e == 0) ? -1.0 : 1.0;

    switch (bc.kind) {
      case EndBC::Kind::Free: {
        const double s = sched.channel_value(bc.load.channel, t_next_);
        const NeumannRows nr = assemble_neumann_rows(pc, s * bc.load.force,
                                                     s * bc.load.moment, sign);
        scatter_theta(trip, row, q, i, nr.t_dtheta, Mat3::Zero(), Mat3::Zero());
        scatter_eta(trip, row, q, i, Mat3::Zero(), nr.t_deta_s, Mat3::Zero());
        rhs.segment<3>(row) = nr.t_rhs;
        scatter_theta(trip, row + 3, q, i, nr.r_dtheta, nr.r_dtheta_s,
                      Mat3::Zero());
        rhs.segment<3>(row + 3) = nr.r_rhs;
        break;
      }
      case EndBC::Kind::Clamped: {
        const double s = sched.channel_value(bc.motion_channel, t_next_);
        const Vec3 target = end_initial_position(q, e) + s * bc.motion;
        scatter_eta(trip, row, q, i, Mat3::Identity(), Mat3::Zero(), Mat3::Zero());
        rhs.segment<3>(row) = target - end_position(q, e);
        // rotation pinned to the initial frame
        const Rotation r0 = p.def.config.pts[i].r0;
        const Vec3 psi = so3::log(Rotation(pc.r.transpose() * r0));
        scatter_theta(trip, row + 3, q, i, so3::dexp_left_inv(psi),
                      Mat3::Zero(), Mat3::Zero());
        rhs.segment<3>(row + 3) = psi;
        break;
      }
      case EndBC::Kind::Symmetry: {
        const Vec3 e_n = bc.normal;
        if (bc.pins.size() > 2)
          throw std::invalid_argument("symmetry end: at most two pins");
        const SpatialStress sp = spatial_stress(pc);
        // translations: plane Dirichlet along e_n, pins, then zero in-plane
        // force components on the remaining directions
        int r = row;
        emit_scalar_eta(trip, rhs, r++, q, i, e_n,
                        e_n.dot(end_initial_position(q, e) - end_position(q, e)));
        for (const auto& pin : bc.pins)
          emit_scalar_eta(trip, rhs, r++, q, i, pin.dir,
                          pin.value - pin.dir.dot(end_position(q, e)));
        if (bc.pins.empty()) {
          Vec3 a1, a2;
          plane_basis(e_n, a1, a2);
          emit_scalar_force(trip, rhs, r++, q, i, a1, sp, sign);
          emit_scalar_force(trip, rhs, r++, q, i, a2, sp, sign);
        } else if (bc.pins.size() == 1) {
          emit_scalar_force(trip, rhs, r++, q, i,
                            e_n.cross(bc.pins[0].dir).normalized(), sp, sign);
        }
        // rotations: in-plane spatial rotation components vanish
        Vec3 a1, a2;
        plane_basis(e_n, a1, a2);
        const Vec3 phi =
            so3::log(Rotation(pc.r * p.def.config.pts[i].r0.transpose()));
        const Mat3 block = so3::dexp_left_inv(phi) * pc.r;
        emit_scalar_rot_dirichlet(trip, rhs, row + 3, q, i, a1, block, phi);
        emit_scalar_rot_dirichlet(trip, rhs, row + 4, q, i, a2, block, phi);
        emit_scalar_moment(trip, rhs, row + 5, q, i, e_n, sp, sign);
        break;
      }
    }
  }

  void emit_scalar_eta(std::vector<Eigen::Triplet<double>>& trip, VecX& rhs,
                       int row, int q, int i, const Vec3& dir,
                       double value) const {
    const Patch& p = patches_[q];
    const auto& pb = p.basis[i];
    for (int j = 0; j < pb.val.size(); ++j) {
      for (int c = 0; c < 3; ++c) {
        const double v = pb.val[j] * dir[c];
        if (v != 0.0)
          trip.emplace_back(row, p.dof_base + 6 * (pb.first + j) + c, v);
      }
    }
    rhs[row] = value;
  }

  void emit_scalar_force(std::vector<Eigen::Triplet<double>>& trip, VecX& rhs,
                         int row, int q, int i, const Vec3& dir,
                         const SpatialStress& sp, double sign) const {
    const Patch& p = patches_[q];
    const auto& pb = p.basis[i];
    const Eigen::RowVector3d th = sign * dir.transpose() * sp.f_dtheta;
    const Eigen::RowVector3d et = sign * dir.transpose() * sp.f_deta_s;
    for (int j = 0; j < pb.val.size(); ++j) {
      for (int c = 0; c < 3; ++c) {
        const double vt = pb.val[j] * th[c];
        if (vt != 0.0)
          trip.emplace_back(row, p.dof_base + 6 * (pb.first + j) + 3 + c, vt);
        const double ve = pb.d1[j] * et[c];
        if (ve != 0.0)
          trip.emplace_back(row, p.dof_base + 6 * (pb.first + j) + c, ve);
      }
    }
    rhs[row] = -sign * dir.dot(sp.force);
  }

  void emit_scalar_moment(std::vector<Eigen::Triplet<double>>& trip, VecX& rhs,
                          int row, int q, int i, const Vec3& dir,
                          const SpatialStress& sp, double sign) const {
    const Patch& p = patches_[q];
    const auto& pb = p.basis[i];
    const Eigen::RowVector3d th = sign * dir.transpose() * sp.m_dtheta;
    const Eigen::RowVector3d th1 = sign * dir.transpose() * sp.m_dtheta_s;
    for (int j = 0; j < pb.val.size(); ++j) {
      for (int c = 0; c < 3; ++c) {
        const double v = pb.val[j] * th[c] + pb.d1[j] * th1[c];
        if (v != 0.0)
          trip.emplace_back(row, p.dof_base + 6 * (pb.first + j) + 3 + c, v);
      }
    }
    rhs[row] = -sign * dir.dot(sp.moment);
  }

  void emit_scalar_rot_dirichlet(std::vector<Eigen::Triplet<double>>& trip,
                                 VecX& rhs, int row, int q, int i,
                                 const Vec3& dir, const Mat3& block,
                                 const Vec3& phi) const {
    const Patch& p = patches_[q];
    const auto& pb = p.basis[i];
    const Eigen::RowVector3d th = dir.transpose() * block;
    for (int j = 0; j < pb.val.size(); ++j) {
      for (int c = 0; c < 3; ++c) {
        const double v = pb.val[j] * th[c];
        if (v != 0.0)
          trip.emplace_back(row, p.dof_base + 6 * (pb.first + j) + 3 + c, v);
      }
    }
    rhs[row] = -dir.dot(phi);
  }

  void assemble_joint(std::vector<Eigen::Triplet<double>>& trip, VecX& rhs,
                      const Joint& jt) const {
    const MemberEnd& master = jt.ends.front();
    const Patch& mp = patches_[master.patch];
    const int mi = (master.end == 0) ? 0 : mp.num_points() - 1;
    const int mrow = mp.dof_base + 6 * mi;
    const PointContext mpc = point_context(master.patch, mi);

    // slave tying rows: shared translational and rotational increments
    for (size_t s = 1; s < jt.ends.size(); ++s) {
      const MemberEnd& se = jt.ends[s];
      const Patch& sp = patches_[se.patch];
      const int si = (se.end == 0) ? 0 : sp.num_points() - 1;
      const int srow = sp.dof_base + 6 * si;
      // translations
      scatter_eta(trip, srow, se.patch, si, Mat3::Identity(), Mat3::Zero(),
                  Mat3::Zero());
      scatter_eta(trip, srow, master.patch, mi, -Mat3::Identity(), Mat3::Zero(),
                  Mat3::Zero());
      rhs.segment<3>(srow) = end_position(master.patch, master.end) -
                             end_position(se.patch, se.end);
      // rotations: equal spatial increments, drift-corrected through the
      // log of the relative rotation
      const Rotation rs = sp.pts[si].r;
      const Rotation rm = mp.pts[mi].r;
      const Rotation phi_s = rs * sp.def.config.pts[si].r0.transpose();
      const Rotation phi_m = rm * mp.def.config.pts[mi].r0.transpose();
      const Vec3 xi = so3::log(Rotation(phi_m * phi_s.transpose()));
      scatter_theta(trip, srow + 3, se.patch, si,
                    Mat3(so3::dexp_right_inv(xi) * rs), Mat3::Zero(),
                    Mat3::Zero());
      scatter_theta(trip, srow + 3, master.patch, mi,
                    Mat3(-so3::dexp_left_inv(xi) * rm), Mat3::Zero(),
                    Mat3::Zero());
      rhs.segment<3>(srow + 3) = xi;
    }

    // master rows
    const double ls = sched.channel_value(jt.load_channel, t_next_);
    if (jt.driven) {
      const double s = sched.channel_value(jt.ramp_channel, t_next_);
      const Vec3 target = jt.pos_start + s * (jt.pos_target - jt.pos_start);
      scatter_eta(trip, mrow, master.patch, mi, Mat3::Identity(), Mat3::Zero(),
                  Mat3::Zero());
      rhs.segment<3>(mrow) = target - end_position(master.patch, master.end);
    } else {
      force_balance_rows(trip, rhs, jt, mrow, ls * jt.force);
    }
    if (jt.driven && jt.clamp_rotations) {
      const Rotation r0 = mp.def.config.pts[mi].r0;
      scatter_theta(trip, mrow + 3, master.patch, mi, Mat3::Identity(),
                    Mat3::Zero(), Mat3::Zero());
      rhs.segment<3>(mrow + 3) =
          so3::log(Rotation(mp.pts[mi].r.transpose() * r0));
    } else {
      moment_balance_rows(trip, rhs, jt, mrow + 3, ls * jt.moment);
    }
  }

  void force_balance_rows(std::vector<Eigen::Triplet<double>>& trip, VecX& rhs,
                          const Joint& jt, int row, const Vec3& applied) const {
    Vec3 res = applied;
    for (const auto& e : jt.ends) {
      const Patch& p = patches_[e.patch];
      const int i = (e.end == 0) ? 0 : p.num_points() - 1;
      const double sign = (e.end == 0) ? 1.0 : -1.0;
      const SpatialStress sp = spatial_stress(point_context(e.patch, i));
      res += sign * sp.force;
      scatter_theta(trip, row, e.patch, i, Mat3(sign * sp.f_dtheta),
                    Mat3::Zero(), Mat3::Zero());
      scatter_eta(trip, row, e.patch, i, Mat3::Zero(), Mat3(sign * sp.f_deta_s),
                  Mat3::Zero());
    }
    rhs.segment<3>(row) = -res;
  }

  void moment_balance_rows(std::vector<Eigen::Triplet<double>>& trip, VecX& rhs,
                           const Joint& jt, int row, const Vec3& applied) const {
    Vec3 res = applied;
    for (const auto& e : jt.ends) {
      const Patch& p = patches_[e.patch];
      const int i = (e.end == 0) ? 0 : p.num_points() - 1;
      const double sign = (e.end == 0) ? 1.0 : -1.0;
      const SpatialStress sp = spatial_stress(point_context(e.patch, i));
      res += sign * sp.moment;
      scatter_theta(trip, row, e.patch, i, Mat3(sign * sp.m_dtheta),
                    Mat3(sign * sp.m_dtheta_s), Mat3::Zero());
    }
    rhs.segment<3>(row) = -res;
  }

  static VecX row_scales(const Eigen::SparseMatrix<double>& a) {
    VecX rscale = VecX::Zero(a.rows());
    for (int k = 0; k < a.outerSize(); ++k)
      for (Eigen::SparseMatrix<double>::InnerIterator it(a, k); it; ++it)
        rscale[it.row()] = std::max(rscale[it.row()], std::abs(it.value()));
    for (int i = 0; i < a.rows(); ++i)
      if (rscale[i] == 0.0) rscale[i] = 1.0;
    return rscale;
  }

  VecX solve_sparse(const Assembled& sys) const {
    Eigen::SparseMatrix<double> a = sys.jac;
    const int n = a.rows();
    VecX cscale = VecX::Zero(n);
    const VecX rscale = row_scales(a);
    for (int k = 0; k < a.outerSize(); ++k)
      for (Eigen::SparseMatrix<double>::InnerIterator it(a, k); it; ++it) {
        it.valueRef() /= rscale[it.row()];
        cscale[it.col()] = std::max(cscale[it.col()], std::abs(it.value()));
      }
    for (int i = 0; i < n; ++i)
      cscale[i] = (cscale[i] == 0.0) ? 1.0 : cscale[i];
    for (int k = 0; k < a.outerSize(); ++k)
      for (Eigen::SparseMatrix<double>::InnerIterator it(a, k); it; ++it)
        it.valueRef() /= cscale[it.col()];

    Eigen::SparseLU<Eigen::SparseMatrix<double>> lu;
    lu.analyzePattern(a);
    lu.factorize(a);
    if (lu.info() != Eigen::Success) {
      std::ostringstream msg;
      msg << "linear solve failed (" << lu.lastErrorMessage()
          << "); row scale range [" << rscale.minCoeff() << ", "
          << rscale.maxCoeff() << "]";
      throw SolverError(msg.str());
    }
    const VecX b = sys.rhs.cwiseQuotient(rscale);
    VecX y = lu.solve(b);
    return y.cwiseQuotient(cscale);
  }

  void advance_impl(double t_next, int depth, StepReport& rep) {
    const SavedState saved = save();
    begin_step(t_next);
    const NewtonReport nr = run_newton();
    if (nr.converged) {
      t_ = t_next;
      step_open_ = false;
      ++rep.substeps;
      rep.iterations += nr.iterations;
      return;
    }
    restore(saved);
    if (depth >= options.max_bisections) {
      std::ostringstream msg;
      msg << "Newton failed at t=" << t_next << " after "
          << options.max_iterations << " iterations (residual " << nr.residual
          << "), bisection depth exhausted";
      throw SolverError(msg.str());
    }
    ++rep.bisections;
    const double mid = 0.5 * (t_ + t_next);
    advance_impl(mid, depth + 1, rep);
    advance_impl(t_next, depth + 1, rep);
  }

  std::vector<Patch> patches_;
  std::vector<Joint> joints_;
  std::vector<material::BranchCoeffs> coeffs_;
  double t_ = 0.0, t_next_ = 0.0, h_ = 0.0;
  double stab_factor_ = 0.0;
  int stabilized_steps_ = 0;
  int dof_count_ = 0;
  bool step_open_ = false;
  int newton_total_ = 0;
  mutable int drift_repairs_ = 0;
};

}  // namespace smpbeam::solver
