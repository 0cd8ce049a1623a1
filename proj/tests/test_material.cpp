#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <vector>

#include "smpbeam/material.hpp"

using namespace smpbeam;
using namespace smpbeam::material;

TEST_CASE("shift factor: vanishes at T_G, Table values elsewhere") {
  const WlfParams row1{14.59, 48.43, 70.0};
  const WlfParams row2{17.44, 51.60, 66.9};

  CHECK(shift_factor(row1, 70.0) == 0.0);
  CHECK(std::pow(10.0, shift_factor(row1, 70.0)) == 1.0);

  // direct evaluation: -14.59*20/68.43
  const double at90 = shift_factor(row1, 90.0);
  CHECK(at90 == Catch::Approx(-4.2642).margin(1e-3));
  CHECK(std::pow(10.0, at90) == Catch::Approx(5.44e-5).epsilon(0.01));

  // cold PLA is effectively elastic
  const double at37 = shift_factor(row2, 37.0);
  CHECK(at37 == Catch::Approx(24.0).margin(0.1));

  CHECK_THROWS_AS(shift_factor(row1, 70.0 - 48.43), std::domain_error);
  CHECK_THROWS_AS(shift_factor(row1, 0.0), std::domain_error);
}

TEST_CASE("relaxation time: WLF scaling of Table branches") {
  const WlfParams row1{14.59, 48.43, 70.0};
  const MaxwellBranch b{114.16e6, 1.0};  // tau_G = 1 s
  CHECK(relaxation_time(b, row1, 70.0) == Catch::Approx(1.0));
  CHECK(relaxation_time(b, row1, 90.0) == Catch::Approx(5.44e-5).epsilon(0.01));
  // continuous across T_G
  CHECK(relaxation_time(b, row1, 70.0 + 1e-9) ==
        Catch::Approx(relaxation_time(b, row1, 70.0 - 1e-9)).epsilon(1e-6));
}

TEST_CASE("effective stiffness: elastic and limit cases") {
  const Vec3 c_inf(2.0, 2.0, 5.0);
  SECTION("no branches") {
    CHECK(effective_stiffness(c_inf, {}, {}).isApprox(c_inf));
  }
  SECTION("infinitely slow branches recover the instantaneous tensor") {
    const std::vector<Vec3> cb{Vec3(1, 1, 3), Vec3(0.5, 0.5, 1)};
    std::vector<BranchCoeffs> cc{branch_coeffs(1e308, 1e308, 1e-3),
                                 branch_coeffs(1e308, 1e308, 1e-3)};
    const Vec3 c0 = c_inf + cb[0] + cb[1];
    CHECK(effective_stiffness(c_inf, cb, cc).isApprox(c0, 1e-12));
  }
  SECTION("one branch with h = 2 tau drops half the branch") {
    const std::vector<Vec3> cb{Vec3(1, 1, 3)};
    std::vector<BranchCoeffs> cc{branch_coeffs(0.5, 0.5, 1.0)};
    const Vec3 expect = c_inf + cb[0] - 0.5 * cb[0];
    CHECK(effective_stiffness(c_inf, cb, cc).isApprox(expect, 1e-14));
  }
}

TEST_CASE("history vector: closed-form special cases") {
  const double tau = 0.3, h = 0.05;
  const auto c = branch_coeffs(tau, tau, h);
  const Vec3 gstar(0.1, -0.2, 0.4);
  // steady state: Psi = 2 Gamma*
  CHECK(history_vector(gstar, gstar, c).isApprox(2.0 * gstar, 1e-14));
  // zero total strain: Psi = (2 tau - h)/tau * visc
  const Vec3 g0(0.3, 0.0, -0.1);
  CHECK(history_vector(Vec3::Zero(), g0, c)
            .isApprox(((2.0 * tau - h) / tau) * g0, 1e-14));
  CHECK(history_vector(Vec3::Zero(), Vec3::Zero(), c).isZero(0.0));
}

TEST_CASE("viscous update: fixed point, relaxation ratio, h -> 0") {
  const Vec3 gstar(0.2, 0.1, -0.3);
  SECTION("fixed point") {
    const auto c = branch_coeffs(0.7, 0.7, 0.01);
    const Vec3 psi = history_vector(gstar, gstar, c);
    CHECK(update_viscous_strain(gstar, psi, c).isApprox(gstar, 1e-14));
  }
  SECTION("pure relaxation with h = tau contracts by 1/3 per step") {
    const double tau = 0.2;
    const auto c = branch_coeffs(tau, tau, tau);
    Vec3 visc(1.0, -2.0, 0.5);
    const Vec3 psi = history_vector(Vec3::Zero(), visc, c);
    const Vec3 next = update_viscous_strain(Vec3::Zero(), psi, c);
    CHECK(next.isApprox(visc / 3.0, 1e-14));
  }
  SECTION("h -> 0 leaves the viscous strain unchanged") {
    const double tau = 0.2;
    const Vec3 visc(1.0, -2.0, 0.5);
    const auto c = branch_coeffs(tau, tau, 1e-12);
    const Vec3 psi = history_vector(Vec3(0.4, 0, 0), visc, c);
    CHECK((update_viscous_strain(Vec3(0.4, 0, 0), psi, c) - visc).norm() < 1e-10);
  }
}

TEST_CASE("stress resultants: limits and dual-form equivalence") {
  const Vec3 c_inf(2.0, 2.0, 5.0);
  const std::vector<Vec3> cb{Vec3(1, 1, 3), Vec3(4, 4, 9), Vec3(0.2, 0.2, 0.6)};

  SECTION("zero strains and history give zero stress") {
    std::vector<Vec3> visc(3, Vec3::Zero());
    CHECK(stress_direct(c_inf, cb, Vec3::Zero(), visc).isZero(0.0));
  }
  SECTION("fully relaxed branches leave the rubbery modulus") {
    const Vec3 g(0.1, 0.0, 0.02);
    std::vector<Vec3> visc(3, g);
    CHECK(stress_direct(c_inf, cb, g, visc).isApprox(c_inf.cwiseProduct(g), 1e-14));
  }
  SECTION("virgin sudden strain sees the near-glassy modulus") {
    const double h = 1e-6;  // much smaller than every tau below
    std::vector<double> taus{0.1, 1.0, 10.0};
    std::vector<BranchCoeffs> cc;
    std::vector<Vec3> psi(3, Vec3::Zero()), visc(3);
    for (int a = 0; a < 3; ++a) cc.push_back(branch_coeffs(taus[a], taus[a], h));
    const Vec3 g(0.01, 0, 0.03);
    for (int a = 0; a < 3; ++a) visc[a] = update_viscous_strain(g, psi[a], cc[a]);
    const Vec3 n = stress_direct(c_inf, cb, g, visc);
    const Vec3 c0 = c_inf + cb[0] + cb[1] + cb[2];
    CHECK((n - c0.cwiseProduct(g)).norm() < 1e-4 * c0.cwiseProduct(g).norm());
  }
  SECTION("direct Prony sum equals the effective/history form") {
    std::mt19937 rng(33);
    std::uniform_real_distribution<double> d(-1.0, 1.0);
    std::uniform_real_distribution<double> taud(-3.0, 3.0);
    for (int rep = 0; rep < 100; ++rep) {
      const double h = std::pow(10.0, taud(rng));
      std::vector<BranchCoeffs> cc;
      std::vector<Vec3> psi, visc;
      const Vec3 g_n(d(rng), d(rng), d(rng));
      const Vec3 g_np1(d(rng), d(rng), d(rng));
      for (int a = 0; a < 3; ++a) {
        const double tau_n = std::pow(10.0, taud(rng));
        const double tau_np1 = std::pow(10.0, taud(rng));
        cc.push_back(branch_coeffs(tau_n, tau_np1, h));
        const Vec3 visc_n(d(rng), d(rng), d(rng));
        psi.push_back(history_vector(g_n, visc_n, cc[a]));
        visc.push_back(update_viscous_strain(g_np1, psi[a], cc[a]));
      }
      const Vec3 direct = stress_direct(c_inf, cb, g_np1, visc);
      const Vec3 eff = effective_stiffness(c_inf, cb, cc).cwiseProduct(g_np1) -
                       history_offset(cb, cc, psi);
      CHECK((direct - eff).norm() <= 1e-12 * (1.0 + direct.norm()));
    }
  }
}

TEST_CASE("trapezoidal branch update is A-stable and dissipative") {
  std::mt19937 rng(37);
  std::uniform_real_distribution<double> d(-6.0, 6.0);
  for (int rep = 0; rep < 200; ++rep) {
    const double tau = std::pow(10.0, d(rng));
    const double h = std::pow(10.0, d(rng));
    const auto c = branch_coeffs(tau, tau, h);
    // residual strain factor (2 tau - h)/(2 tau + h)
    const double factor = c.upd_hist * c.hist_visc;
    CHECK(std::abs(factor) < 1.0);
  }
  // constant total strain: |Gam - Gam_a| non-increasing step by step
  const double tau = 0.05, h = 0.02;
  const Vec3 g(0.3, -0.1, 0.2);
  Vec3 visc = Vec3::Zero();
  double gap = (g - visc).norm();
  for (int step = 0; step < 100; ++step) {
    const auto c = branch_coeffs(tau, tau, h);
    visc = update_viscous_strain(g, history_vector(g, visc, c), c);
    const double next_gap = (g - visc).norm();
    CHECK(next_gap <= gap + 1e-15);
    gap = next_gap;
  }
}

TEST_CASE("section tensors: circular section arithmetic") {
  const auto sec = SectionProperties::circular(0.05, 0.33, 1.0);
  CHECK(sec.area == Catch::Approx(1.9635e-3).epsilon(1e-4));
  PronySeries p;
  p.modulus_inf = 1e6;  // 1 MPa
  p.wlf = WlfParams{14.59, 48.43, 70.0};
  const auto t = build_section_tensors(p, sec);
  CHECK(t.cn_inf[2] == Catch::Approx(1963.5).epsilon(1e-4));
  CHECK(t.cm_inf[0] == t.cm_inf[1]);
  CHECK(t.num_branches() == 0);

  // zero-modulus branch contributes nothing
  p.branches.push_back({0.0, 1.0});
  const auto t2 = build_section_tensors(p, sec);
  CHECK(t2.cn_branch[0].isZero(0.0));
  CHECK(t2.cm_branch[0].isZero(0.0));
}

TEST_CASE("material point relaxation matches the analytic Prony series") {
  // Strain step at t=0, constant temperature T = T_G; resolved branches only.
  PronySeries p;
  p.modulus_inf = 80.59e6;
  p.branches = {{237.98e6, 0.1}, {114.16e6, 1.0}, {51.82e6, 10.0}};
  p.wlf = WlfParams{14.59, 48.43, 70.0};
  const auto sec = SectionProperties::circular(0.05, 0.33);
  const auto tens = build_section_tensors(p, sec);

  const double h = 0.01;  // min(tau)/10
  const double eps = 1e-3;
  const Vec3 strain(0, 0, eps);
  const auto taus = relaxation_times(p, 70.0);

  std::vector<Vec3> visc(3, Vec3::Zero());
  std::vector<Vec3> psi(3);
  double t = 0.0;
  double worst = 0.0;
  std::vector<BranchCoeffs> cc;
  for (int a = 0; a < 3; ++a) cc.push_back(branch_coeffs(taus[a], taus[a], h));
  for (int step = 0; step < 3000; ++step) {
    for (int a = 0; a < 3; ++a) {
      psi[a] = history_vector(strain, visc[a], cc[a]);
      visc[a] = update_viscous_strain(strain, psi[a], cc[a]);
    }
    t += h;
    const double n3 = stress_direct(tens.cn_inf, tens.cn_branch, strain, visc)[2];
    double analytic = p.modulus_inf;
    for (int a = 0; a < 3; ++a)
      analytic += p.branches[a].modulus * std::exp(-t / taus[a]);
    analytic *= sec.area * eps;
    worst = std::max(worst, std::abs(n3 - analytic) / analytic);
  }
  CHECK(worst < 0.01);
}
