#pragma once

// Temperature-dependent generalized Maxwell constitutive layer for beam
// stress resultants: WLF shift factor, per-branch relaxation times, the
// trapezoidal-rule history vectors and viscous-strain updates, and the
// effective stiffness tensors entering the time-discretized equations.
//
// All branch coefficients are written in terms of x = h/tau so that deeply
// glassy branches (tau -> inf) degrade to exact elastic limits instead of
// overflowing.

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "smpbeam/types.hpp"

namespace smpbeam::material {

struct WlfParams {
  double c1 = 0.0;   // [-]
  double c2 = 0.0;   // [K]
  double t_g = 0.0;  // [deg C], also the reference temperature

  void validate() const {
    if (c2 <= 0.0) throw std::invalid_argument("WLF: C2 must be positive");
  }
};

// log10 shift factor a_T(T) = -C1 (T - T_G) / (C2 + T - T_G).
inline double shift_factor(const WlfParams& wlf, double temp_c) {
  const double den = wlf.c2 + temp_c - wlf.t_g;
  if (den <= 0.0)
    throw std::domain_error("WLF: temperature outside validity range (C2 + T - T_G <= 0)");
  return -wlf.c1 * (temp_c - wlf.t_g) / den;
}

struct MaxwellBranch {
  double modulus = 0.0;   // E_alpha [Pa]
  double tau_ref = 1.0;   // relaxation time at T_G [s]
};

struct PronySeries {
  double modulus_inf = 0.0;  // equilibrium spring E_inf [Pa]
  std::vector<MaxwellBranch> branches;
  WlfParams wlf;

  int num_branches() const { return static_cast<int>(branches.size()); }

  void validate() const {
    wlf.validate();
    if (modulus_inf < 0.0)
      throw std::invalid_argument("prony: E_inf must be nonnegative");
    for (const auto& b : branches) {
      if (b.modulus < 0.0) throw std::invalid_argument("prony: E_alpha < 0");
      if (b.tau_ref <= 0.0) throw std::invalid_argument("prony: tau <= 0");
    }
  }
};

// tau_alpha(T) = tau_alpha(T_G) * 10^{a_T}. May overflow to +inf for deeply
// glassy states; downstream coefficients handle that limit exactly.
inline double relaxation_time(const MaxwellBranch& branch, const WlfParams& wlf,
                              double temp_c) {
  return branch.tau_ref * std::pow(10.0, shift_factor(wlf, temp_c));
}

inline std::vector<double> relaxation_times(const PronySeries& prony,
                                            double temp_c) {
  const double mult = std::pow(10.0, shift_factor(prony.wlf, temp_c));
  std::vector<double> taus(prony.branches.size());
  for (size_t a = 0; a < prony.branches.size(); ++a)
    taus[a] = prony.branches[a].tau_ref * mult;
  return taus;
}

struct SectionProperties {
  double area = 0.0;      // [m^2]
  double inertia_1 = 0.0; // [m^4]
  double inertia_2 = 0.0; // [m^4]
  double torsion = 0.0;   // [m^4]
  double kappa = 1.0;     // shear correction [-]
  double nu = 0.0;        // Poisson ratio [-]

  static SectionProperties circular(double diameter, double nu,
                                    double kappa = 1.0) {
    if (diameter <= 0.0)
      throw std::invalid_argument("section: diameter must be positive");
    SectionProperties s;
    const double d2 = diameter * diameter;
    s.area = M_PI * d2 / 4.0;
    s.inertia_1 = s.inertia_2 = M_PI * d2 * d2 / 64.0;
    s.torsion = M_PI * d2 * d2 / 32.0;
    s.kappa = kappa;
    s.nu = nu;
    return s;
  }
};

// Diagonal force/moment stiffness tensors. Ordering: shear-shear-axial for
// the force block and bending-bending-torsion for the moment block, local
// axis 3 being the tangent.
struct StiffnessTensors {
  Vec3 cn_inf = Vec3::Zero();           // [N]
  Vec3 cm_inf = Vec3::Zero();           // [N m^2]
  std::vector<Vec3> cn_branch;          // per Maxwell branch
  std::vector<Vec3> cm_branch;

  int num_branches() const { return static_cast<int>(cn_branch.size()); }

  Vec3 cn_instant() const {
    Vec3 c = cn_inf;
    for (const auto& b : cn_branch) c += b;
    return c;
  }
  Vec3 cm_instant() const {
    Vec3 c = cm_inf;
    for (const auto& b : cm_branch) c += b;
    return c;
  }
};

inline StiffnessTensors build_section_tensors(const PronySeries& prony,
                                              const SectionProperties& sec) {
  auto cn_of = [&sec](double e) {
    const double g = e / (2.0 * (1.0 + sec.nu));
    return Vec3(g * sec.kappa * sec.area, g * sec.kappa * sec.area,
                e * sec.area);
  };
  auto cm_of = [&sec](double e) {
    const double g = e / (2.0 * (1.0 + sec.nu));
    return Vec3(e * sec.inertia_1, e * sec.inertia_2, g * sec.torsion);
  };
  StiffnessTensors t;
  t.cn_inf = cn_of(prony.modulus_inf);
  t.cm_inf = cm_of(prony.modulus_inf);
  for (const auto& b : prony.branches) {
    t.cn_branch.push_back(cn_of(b.modulus));
    t.cm_branch.push_back(cm_of(b.modulus));
  }
  return t;
}

// Per-branch scalar coefficients of the trapezoidal scheme for one time
// step, parametrized by x = h/tau (0 in the glassy limit).
struct BranchCoeffs {
  double hist_total = 0.0;  // h/tau^n            (Psi = a*Gam + b*Gam_a)
  double hist_visc = 2.0;   // (2 tau^n - h)/tau^n
  double upd_total = 0.0;   // h/(2 tau^{n+1} + h)
  double upd_hist = 0.5;    // tau^{n+1}/(2 tau^{n+1} + h)
};

inline BranchCoeffs branch_coeffs(double tau_n, double tau_np1, double h) {
  if (h <= 0.0) throw std::invalid_argument("branch_coeffs: h must be positive");
  BranchCoeffs c;
  const double xn = h / tau_n;      // 0 if tau_n = inf
  const double xp = h / tau_np1;
  c.hist_total = xn;
  c.hist_visc = 2.0 - xn;
  c.upd_total = xp / (2.0 + xp);
  c.upd_hist = 1.0 / (2.0 + xp);
  return c;
}

// Psi_alpha^n = (h/tau^n) Gam^n + ((2 tau^n - h)/tau^n) Gam_alpha^n; frozen
// across the Newton iterations of the following step.
inline Vec3 history_vector(const Vec3& strain_n, const Vec3& visc_n,
                           const BranchCoeffs& c) {
  return c.hist_total * strain_n + c.hist_visc * visc_n;
}

// Gam_alpha^{n+1} = h/(2 tau + h) Gam^{n+1} + tau/(2 tau + h) Psi^n.
inline Vec3 update_viscous_strain(const Vec3& strain_np1, const Vec3& psi,
                                  const BranchCoeffs& c) {
  return c.upd_total * strain_np1 + c.upd_hist * psi;
}

// Effective stiffness diagonal: Cbar = C0 - sum_a C_a h/(2 tau_a + h).
inline Vec3 effective_stiffness(const Vec3& c_inf,
                                const std::vector<Vec3>& c_branch,
                                const std::vector<BranchCoeffs>& coeffs) {
  Vec3 c = c_inf;
  for (size_t a = 0; a < c_branch.size(); ++a)
    c += (1.0 - coeffs[a].upd_total) * c_branch[a];
  return c;
}

// History stress offset: sum_a C_a tau/(2 tau + h) Psi_a. The resultant in
// the effective form is N = Cbar*Gam - offset.
inline Vec3 history_offset(const std::vector<Vec3>& c_branch,
                           const std::vector<BranchCoeffs>& coeffs,
                           const std::vector<Vec3>& psi) {
  Vec3 s = Vec3::Zero();
  for (size_t a = 0; a < c_branch.size(); ++a)
    s += coeffs[a].upd_hist * c_branch[a].cwiseProduct(psi[a]);
  return s;
}

// Direct Prony form: N = C_inf Gam + sum_a C_a (Gam - Gam_a).
inline Vec3 stress_direct(const Vec3& c_inf, const std::vector<Vec3>& c_branch,
                          const Vec3& strain, const std::vector<Vec3>& visc) {
  Vec3 n = c_inf.cwiseProduct(strain);
  for (size_t a = 0; a < c_branch.size(); ++a)
    n += c_branch[a].cwiseProduct(strain - visc[a]);
  return n;
}

// Built-in PLA characterization: 15-branch Prony series with the matching
// WLF triple (moduli in MPa converted to Pa).
inline PronySeries pla_van_manen() {
  PronySeries p;
  p.modulus_inf = 80.59e6;
  const double mpa = 1e6;
  p.branches = {
      {20.12 * mpa, 1e-10}, {50.31 * mpa, 1e-9}, {81.37 * mpa, 1e-8},
      {97.02 * mpa, 1e-7},  {173.70 * mpa, 1e-6}, {225.60 * mpa, 1e-5},
      {292.64 * mpa, 1e-4}, {474.56 * mpa, 1e-3}, {449.43 * mpa, 1e-2},
      {237.98 * mpa, 1e-1}, {114.16 * mpa, 1e0},  {51.82 * mpa, 1e1},
      {29.98 * mpa, 1e2},   {14.40 * mpa, 1e3},   {0.72 * mpa, 1e5},
  };
  p.wlf = WlfParams{14.59, 48.43, 70.0};
  return p;
}

inline PronySeries named_material(const std::string& name) {
  if (name == "PLA-vanManen") return pla_van_manen();
  throw std::invalid_argument("unknown material name: " + name);
}

}  // namespace smpbeam::material
