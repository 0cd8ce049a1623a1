#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>

#include "smpbeam/stents.hpp"

using namespace smpbeam;
using namespace smpbeam::stents;

namespace {

StentLayout small_layout(int crowns) {
  StentLayout lay;
  lay.crown_count = crowns;
  lay.degree = 3;
  lay.ctrl_n = 8;
  return lay;
}

Vec3 end_pos(const geometry::InitialConfig& cfg, int end) {
  const auto& c = cfg.patch.ctrl;
  return end == 0 ? Vec3(c.col(0)) : Vec3(c.col(c.cols() - 1));
}

}  // namespace

TEST_CASE("reference crown: appendix wire formula") {
  StentLayout lay = small_layout(1);
  const auto patches = build_crown(lay);
  REQUIRE(patches.size() == 24);  // two patches per wire, n_w = 12

  const double r = lay.crown_radius, h = lay.half_height;
  // first patch spans theta in [0, pi/12]
  CHECK((patches[0].ctrl.col(0) - Vec3(r, 0, 0)).norm() < 1e-14);
  const Vec3 crest(r * std::cos(M_PI / 12), r * std::sin(M_PI / 12), h);
  CHECK((end_pos({patches[0], {}, {}, 0.0}, 1) - crest).norm() < 1e-12);

  // closed loop: last end returns to the first start
  const auto& last = patches.back();
  CHECK((last.ctrl.col(last.num_ctrl() - 1) - patches[0].ctrl.col(0)).norm() <
        1e-12);

  // oscillation extremes are +-h_c at alternating patch boundaries
  double zmax = -1e9, zmin = 1e9;
  for (const auto& p : patches) {
    zmax = std::max(zmax, p.ctrl.col(p.num_ctrl() - 1).z());
    zmin = std::min(zmin, p.ctrl.col(p.num_ctrl() - 1).z());
  }
  CHECK(zmax == Catch::Approx(h).margin(1e-12));
  CHECK(zmin == Catch::Approx(-h).margin(1e-12));
}

TEST_CASE("straight stent: crown spacing and bridge coincidence") {
  StentLayout lay = small_layout(6);
  const auto asmb = build_straight_stent(lay, false);

  // crown k occupies x1 in [k d_c - h_c, k d_c + h_c]; centers span 5 d_c
  const int per_crown = 2 * lay.wire_count;
  const double slack = 10.0 * asmb.max_fit_residual + 1e-9;
  for (int k = 0; k < 6; ++k) {
    for (int q = 0; q < per_crown; ++q) {
      const auto& patch = asmb.patches[k * per_crown + q].patch;
      for (int i = 0; i <= 10; ++i) {
        const double x = splines::curve_eval(patch, i / 10.0, 0).c.x();
        CHECK(x > k * lay.crown_spacing - lay.half_height - slack);
        CHECK(x < k * lay.crown_spacing + lay.half_height + slack);
      }
    }
  }
  CHECK(5 * lay.crown_spacing == Catch::Approx(0.075));

  // default 3 bridges per pair
  const int bridge_count = static_cast<int>(asmb.patches.size()) - 6 * per_crown;
  CHECK(bridge_count == 5 * 3);

  // every bridge endpoint coincides with a crown extremum node
  for (size_t b = 6 * per_crown; b < asmb.patches.size(); ++b) {
    for (int e = 0; e < 2; ++e) {
      const Vec3 pos = end_pos(asmb.patches[b], e);
      double best = 1e18;
      for (size_t c = 0; c < size_t(6 * per_crown); ++c) {
        best = std::min(best, (end_pos(asmb.patches[c], 0) - pos).norm());
        best = std::min(best, (end_pos(asmb.patches[c], 1) - pos).norm());
      }
      CHECK(best < 1e-12);
    }
  }
}

TEST_CASE("straight stent: interface-node table reciprocity") {
  StentLayout lay = small_layout(2);
  const auto asmb = build_straight_stent(lay, false);
  std::set<std::pair<int, int>> seen;
  for (const auto& j : asmb.joints) {
    CHECK(j.ends.size() >= 2);  // closed crowns: no free ends
    for (const auto& e : j.ends) {
      CHECK(seen.emplace(e.patch, e.end).second);  // each end in one joint
      CHECK((end_pos(asmb.patches[e.patch], e.end) - j.position).norm() < 1e-10);
    }
  }
  // every patch end is accounted for
  CHECK(seen.size() == 2 * asmb.patches.size());
}

TEST_CASE("straight stent quarter: quadrant, symmetry table, mirror nodes") {
  StentLayout lay = small_layout(2);
  const auto quarter = build_straight_stent(lay, true);
  const auto full = build_straight_stent(lay, false);

  for (const auto& cfg : quarter.patches) {
    CHECK(cfg.patch.ctrl.row(1).minCoeff() > -1e-9);  // x2 >= 0
    CHECK(cfg.patch.ctrl.row(2).minCoeff() > -1e-9);  // x3 >= 0
  }
  int on_z = 0, on_y = 0;
  for (const auto& s : quarter.symmetry) {
    const Vec3 pos = end_pos(quarter.patches[s.end.patch], s.end.end);
    if (s.normal.isApprox(Vec3::UnitZ())) {
      ++on_z;
      CHECK(std::abs(pos.z()) < 1e-12);
    } else {
      ++on_y;
      CHECK(std::abs(pos.y()) < 1e-12);
    }
  }
  CHECK(on_z == 2);  // one cut per crown per plane
  CHECK(on_y == 2);

  // quarter + mirrors reproduce the full crown node set
  auto key = [](const Vec3& v) {
    auto q = [](double x) { return std::llround(x * 1e7); };  // 0.1 um grid
    return std::array<long long, 3>{q(v.x()), q(v.y()), q(v.z())};
  };
  std::set<std::array<long long, 3>> full_nodes, mirrored;
  for (const auto& j : full.joints) full_nodes.insert(key(j.position));
  auto add_node = [&](const Vec3& v) {
    mirrored.insert(key(v));
    mirrored.insert(key(Vec3(v.x(), -v.y(), v.z())));
    mirrored.insert(key(Vec3(v.x(), v.y(), -v.z())));
    mirrored.insert(key(Vec3(v.x(), -v.y(), -v.z())));
  };
  for (const auto& j : quarter.joints) add_node(j.position);
  for (const auto& s : quarter.symmetry)
    add_node(end_pos(quarter.patches[s.end.patch], s.end.end));
  for (const auto& node : full_nodes) CHECK(mirrored.count(node) == 1);
}

TEST_CASE("straight stent: radial contraction targets") {
  StentLayout lay = small_layout(2);
  lay.delta_r = 0.015;
  const auto asmb = build_straight_stent(lay, true);
  for (const auto& j : asmb.joints) {
    const double rho = std::hypot(j.position.y(), j.position.z());
    const double rho_t = std::hypot(j.target.y(), j.target.z());
    CHECK(rho == Catch::Approx(lay.crown_radius).margin(1e-9));
    CHECK(rho_t == Catch::Approx(lay.crown_radius - lay.delta_r).margin(1e-9));
    CHECK(j.target.x() == Catch::Approx(j.position.x()).margin(1e-12));
  }
}

TEST_CASE("curved stent: crown placement on the circular axis") {
  StentLayout lay = small_layout(4);
  const auto asmb = build_curved_stent(lay, true);

  const double sector = lay.axis_sweep / 3.0;
  auto axis_point = [&](double psi) {
    return Vec3(lay.axis_center +
                lay.axis_radius * Vec3(std::cos(psi), 0, std::sin(psi)));
  };
  // crown centers lie on the axis circle
  for (int k = 0; k < 4; ++k) {
    const Vec3 c = axis_point(k * sector);
    CHECK((c - lay.axis_center).norm() ==
          Catch::Approx(lay.axis_radius).epsilon(1e-12));
  }
  // every crown node sits at distance R from its crown axis and its axial
  // offset is an oscillation extremum or the midline
  const int per_crown = lay.wire_count;  // half model
  for (const auto& j : asmb.joints) {
    const auto& e = j.ends.front();
    const int crown = e.patch / per_crown;
    if (crown >= 4) continue;  // bridge master ends are crown ends anyway
    const Vec3 t = Vec3(-std::sin(crown * sector), 0, std::cos(crown * sector));
    const Vec3 d = j.position - axis_point(crown * sector);
    const double axial = d.dot(t);
    const double radial = (d - axial * t).norm();
    CHECK(radial == Catch::Approx(lay.crown_radius).margin(1e-9));
    const double aa = std::abs(axial);
    CHECK((aa < 1e-9 || std::abs(aa - lay.half_height) < 1e-9));
  }
}

TEST_CASE("curved stent: sinusoidal bridge peak offset h_c/2") {
  StentLayout lay = small_layout(4);
  lay.ctrl_n = 12;
  const auto asmb = build_curved_stent(lay, true);
  const int crown_patches = 4 * lay.wire_count;
  REQUIRE(static_cast<int>(asmb.patches.size()) > crown_patches);
  for (size_t b = crown_patches; b < asmb.patches.size(); ++b) {
    const auto& patch = asmb.patches[b].patch;
    const Vec3 a = end_pos(asmb.patches[b], 0);
    const Vec3 c = end_pos(asmb.patches[b], 1);
    // peak of sin(2 pi xi) at xi = 1/4; chord-length parametrization of the
    // fit is close to xi there, so sample around it
    double peak = 0.0;
    for (int i = 0; i <= 100; ++i) {
      const Vec3 x = splines::curve_eval(patch, i / 100.0, 0).c;
      const Vec3 d = x - a;
      const Vec3 chord = (c - a).normalized();
      peak = std::max(peak, (d - d.dot(chord) * chord).norm());
    }
    CHECK(peak == Catch::Approx(lay.bridge_height).epsilon(0.02));
  }
}

TEST_CASE("curved stent: miniaturized targets on the straightened axis") {
  StentLayout lay = small_layout(4);
  const auto asmb = build_curved_stent(lay, true);
  const Vec3 origin = lay.axis_center + Vec3(lay.axis_radius, 0, 0);
  for (const auto& j : asmb.joints) {
    const Vec3 d = j.target - origin;
    const double radial = std::hypot(d.x(), d.y());
    CHECK(radial ==
          Catch::Approx(lay.crown_radius - lay.delta_r).margin(1e-9));
  }
}

TEST_CASE("stent layout validation") {
  StentLayout lay;
  lay.wire_count = 11;
  CHECK_THROWS_AS(lay.validate(), std::invalid_argument);
  lay = StentLayout{};
  lay.crown_radius = -1;
  CHECK_THROWS_AS(lay.validate(), std::invalid_argument);
}
