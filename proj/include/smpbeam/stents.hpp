#pragma once

// Parametric stent-like assemblies: sinusoidal crown wires on a cylinder,
// rectilinear or sinusoidal bridges between crests and troughs, straight
// multi-crown devices (optionally reduced to a quarter by symmetry) and
// curved devices placed along a circular axis. Builders also produce the
// interface-node table and, where a shape program is defined, the
// temporary-configuration target position of every interface node.

#include <cmath>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "smpbeam/geometry.hpp"

namespace smpbeam::stents {

struct StentLayout {
  double crown_radius = 0.020;    // R [m]
  double half_height = 0.005;     // h_c [m]
  int wire_count = 12;            // n_w, even
  double crown_spacing = 0.015;   // d_c [m]
  int crown_count = 6;
  double bridge_height = 0.0025;  // h_b [m], sinusoidal bridges only
  int bridges_per_pair = 3;       // full models; symmetric models use
                                  // mirror-consistent sets of 4
  double delta_r = 0.015;         // programmed radial contraction [m]
  int degree = 6;
  int ctrl_n = 20;
  // curved-axis data
  double axis_radius = 0.100;          // R_stent [m]
  Vec3 axis_center = Vec3(0, 0, -0.005);
  double axis_sweep = M_PI / 4.0;

  void validate() const {
    if (crown_radius <= 0 || half_height <= 0 || crown_spacing <= 0 ||
        bridge_height <= 0 || axis_radius <= 0)
      throw std::invalid_argument("stent layout: lengths must be positive");
    if (wire_count <= 0 || wire_count % 2 != 0)
      throw std::invalid_argument("stent layout: wire count must be even and positive");
    if (crown_count < 1) throw std::invalid_argument("stent layout: need crowns");
    if (degree < 2 || ctrl_n < degree + 1)
      throw std::invalid_argument("stent layout: invalid discretization");
  }
};

// Reference crown of the appendix construction: cylinder axis x3,
// c_w(theta) = [R cos(theta), R sin(theta), h_c sin(n_w theta / 2)].
// Each wire spans 2 pi / n_w and consists of two patches split at the
// oscillation extremum, so 2 n_w patches tile the full circle.
inline std::vector<splines::SplinePatch> build_crown(const StentLayout& lay) {
  lay.validate();
  const int n_w = lay.wire_count;
  const int patches = 2 * n_w;
  const double width = M_PI / n_w;
  std::vector<splines::SplinePatch> out;
  const int samples = std::max(200, 10 * lay.ctrl_n);
  for (int q = 0; q < patches; ++q) {
    std::vector<Vec3> pts;
    pts.reserve(samples + 1);
    for (int i = 0; i <= samples; ++i) {
      const double th = (q + double(i) / samples) * width;
      pts.emplace_back(lay.crown_radius * std::cos(th),
                       lay.crown_radius * std::sin(th),
                       lay.half_height * std::sin(0.5 * n_w * th));
    }
    out.push_back(splines::fit_points(pts, lay.degree, lay.ctrl_n).patch);
  }
  return out;
}

struct MemberEnd {
  int patch = 0;
  int end = 0;  // 0: u = 0, 1: u = 1
};

struct Joint {
  Vec3 position = Vec3::Zero();
  Vec3 target = Vec3::Zero();  // temporary-configuration position
  std::vector<MemberEnd> ends;
};

struct SymmetryEnd {
  MemberEnd end;
  Vec3 normal = Vec3::Zero();
};

struct StentAssembly {
  std::vector<geometry::InitialConfig> patches;
  std::vector<Joint> joints;
  std::vector<SymmetryEnd> symmetry;
  double max_fit_residual = 0.0;
  std::string notes;  // construction conventions, recorded in run metadata
};

namespace detail {

struct EndRecord {
  MemberEnd end;
  Vec3 pos;
};

inline Vec3 patch_end_pos(const splines::SplinePatch& p, int end) {
  return end == 0 ? Vec3(p.ctrl.col(0)) : Vec3(p.ctrl.col(p.num_ctrl() - 1));
}

// Group coincident patch ends into joints (exact constructions coincide to
// rounding; the tolerance only deduplicates).
inline std::vector<Joint> group_joints(const std::vector<EndRecord>& ends,
                                       double tol = 1e-10) {
  std::vector<Joint> joints;
  for (const auto& e : ends) {
    bool placed = false;
    for (auto& j : joints) {
      if ((j.position - e.pos).norm() < tol) {
        j.ends.push_back(e.end);
        placed = true;
        break;
      }
    }
    if (!placed) {
      Joint j;
      j.position = e.pos;
      j.ends.push_back(e.end);
      joints.push_back(j);
    }
  }
  return joints;
}

}  // namespace detail

// Straight device: crowns spaced along the x1-axis, every other crown
// twisted by pi/2, rectilinear bridges joining facing crests and troughs.
// The crown oscillation phase is anchored so that the (x1,x2) and (x1,x3)
// planes are exact mirror planes; with quarter=true only the patches in the
// quadrant x2 >= 0, x3 >= 0 are produced together with the symmetry-end
// table on both planes.
inline StentAssembly build_straight_stent(const StentLayout& lay,
                                          bool quarter = false) {
  lay.validate();
  const int n_w = lay.wire_count;
  const double width = M_PI / n_w;
  const int patches_per_crown = quarter ? n_w / 2 : 2 * n_w;
  const int samples = std::max(200, 10 * lay.ctrl_n);

  // oscillation of crown k (0-based) at angular coordinate theta; the
  // pi/2 twist between neighbours shows up as a phase shift.
  auto osc = [&](int k, double th) {
    return lay.half_height * std::cos(0.5 * n_w * (th - k * M_PI / 2.0));
  };
  auto point = [&](int k, double th, double radius) {
    return Vec3(k * lay.crown_spacing + osc(k, th), radius * std::cos(th),
                radius * std::sin(th));
  };

  StentAssembly asmb;
  std::vector<detail::EndRecord> ends;
  auto add_patch = [&](const splines::SplinePatch& p, double fit_res,
                       const Vec3& rmf_ref) {
    asmb.patches.push_back(geometry::frame_along_curve(p, rmf_ref, fit_res));
    asmb.max_fit_residual = std::max(asmb.max_fit_residual, fit_res);
    const int id = static_cast<int>(asmb.patches.size()) - 1;
    ends.push_back({{id, 0}, detail::patch_end_pos(p, 0)});
    ends.push_back({{id, 1}, detail::patch_end_pos(p, 1)});
  };

  for (int k = 0; k < lay.crown_count; ++k) {
    for (int q = 0; q < patches_per_crown; ++q) {
      std::vector<Vec3> pts;
      pts.reserve(samples + 1);
      for (int i = 0; i <= samples; ++i)
        pts.push_back(point(k, (q + double(i) / samples) * width,
                            lay.crown_radius));
      auto fit = splines::fit_points(pts, lay.degree, lay.ctrl_n);
      // radial seed for the frame
      const double th0 = (q + 0.5) * width;
      add_patch(fit.patch, fit.residual,
                Vec3(0.0, std::cos(th0), std::sin(th0)));
    }
  }

  // Bridge positions: angles where a forward extremum of crown k faces a
  // backward extremum of crown k+1 across the gap d_c - 2 h_c.
  std::ostringstream bridge_note;
  for (int k = 0; k + 1 < lay.crown_count; ++k) {
    std::vector<double> cand;
    for (int q = 0; q < 2 * n_w; ++q) {
      const double th = q * width;
      if (std::abs(osc(k, th) - lay.half_height) < 1e-9 * lay.half_height &&
          std::abs(osc(k + 1, th) + lay.half_height) < 1e-9 * lay.half_height)
        cand.push_back(th);
    }
    std::vector<double> chosen;
    if (quarter) {
      // mirror-consistent set: all off-plane candidates; the quadrant run
      // then keeps those strictly inside (0, pi/2)
      for (double th : cand) {
        const bool on_plane = std::abs(std::sin(th)) < 1e-9 ||
                              std::abs(std::cos(th)) < 1e-9;
        if (!on_plane && th > 0.0 && th < M_PI / 2.0) chosen.push_back(th);
      }
    } else {
      const int count = std::min<int>(lay.bridges_per_pair, cand.size());
      for (int i = 0; i < count; ++i)
        chosen.push_back(cand[(i * cand.size()) / count]);
    }
    for (double th : chosen) {
      bridge_note << " " << k + 1 << ":" << th * 180.0 / M_PI;
      const Vec3 a = point(k, th, lay.crown_radius);
      const Vec3 b = point(k + 1, th, lay.crown_radius);
      const auto p = splines::line_patch(a, b, lay.degree, lay.ctrl_n);
      add_patch(p, 0.0, Vec3(0.0, std::cos(th), std::sin(th)));
    }
  }

  // classify: single ends on a coordinate plane are symmetry cuts, groups
  // are interface joints
  auto joints = detail::group_joints(ends);
  const double tol = 1e-9 * lay.crown_radius;
  for (auto& j : joints) {
    if (j.ends.size() == 1 && quarter) {
      if (std::abs(j.position.z()) < tol) {
        asmb.symmetry.push_back({j.ends[0], Vec3::UnitZ()});
        continue;
      }
      if (std::abs(j.position.y()) < tol) {
        asmb.symmetry.push_back({j.ends[0], Vec3::UnitY()});
        continue;
      }
    }
    const double rho = std::hypot(j.position.y(), j.position.z());
    const double scale = (rho - lay.delta_r) / rho;
    j.target = Vec3(j.position.x(), j.position.y() * scale,
                    j.position.z() * scale);
    asmb.joints.push_back(j);
  }
  std::ostringstream note;
  note << "straight stent: crown oscillation phase cos(n_w*theta/2), twist "
          "pi/2 per crown; bridge angles [deg]" << bridge_note.str()
       << "; radial program delta_r=" << lay.delta_r;
  asmb.notes = note.str();
  return asmb;
}

// Curved device: four crowns on a circular axis of radius R_stent swept by
// axis_sweep, the 2nd and 4th crown pre-rotated by pi about x2, sinusoidal
// radially-oriented bridges of height h_c/2. Only the half x2 >= 0 is built
// when half=true. The temporary (miniaturized) configuration places the
// crowns on the straightened axis with radius R - delta_r; its node
// positions become the joint targets.
inline StentAssembly build_curved_stent(const StentLayout& lay,
                                        bool half = true) {
  lay.validate();
  const int n_w = lay.wire_count;
  const double width = M_PI / n_w;
  const int patches_per_crown = half ? n_w : 2 * n_w;
  const int samples = std::max(200, 10 * lay.ctrl_n);
  const int crowns = 4;
  const double sector = lay.axis_sweep / 3.0;

  // local crown point before placement (flip = pre-rotation by pi about x2)
  auto local_point = [&](int k, double th, double radius) {
    const double z = lay.half_height * std::cos(0.5 * n_w * th);
    Vec3 p(radius * std::cos(th), radius * std::sin(th), z);
    if (k % 2 == 1) p = Vec3(-p.x(), p.y(), -p.z());
    return p;
  };
  auto axis_point = [&](double psi) {
    return Vec3(lay.axis_center +
                lay.axis_radius * Vec3(std::cos(psi), 0.0, std::sin(psi)));
  };
  auto axis_rot = [&](double psi) {
    return Rotation(so3::exp(Vec3(0.0, -psi, 0.0)));
  };
  // actual placement on the curved axis
  auto place = [&](int k, double th) {
    const double psi = k * sector;
    return Vec3(axis_point(psi) +
                axis_rot(psi) * local_point(k, th, lay.crown_radius));
  };
  // temporary placement: straightened axis along the psi=0 tangent (+x3)
  auto place_temp = [&](int k, double th) {
    const double arc = lay.axis_radius * sector;
    return Vec3(axis_point(0.0) + Vec3(0.0, 0.0, k * arc) +
                local_point(k, th, lay.crown_radius - lay.delta_r));
  };

  StentAssembly asmb;
  std::vector<detail::EndRecord> ends;
  std::vector<detail::EndRecord> temp_ends;  // matched ordering
  auto add_patch = [&](const splines::SplinePatch& p, double fit_res,
                       const Vec3& rmf_ref, const Vec3& temp_a,
                       const Vec3& temp_b) {
    asmb.patches.push_back(geometry::frame_along_curve(p, rmf_ref, fit_res));
    asmb.max_fit_residual = std::max(asmb.max_fit_residual, fit_res);
    const int id = static_cast<int>(asmb.patches.size()) - 1;
    ends.push_back({{id, 0}, detail::patch_end_pos(p, 0)});
    ends.push_back({{id, 1}, detail::patch_end_pos(p, 1)});
    temp_ends.push_back({{id, 0}, temp_a});
    temp_ends.push_back({{id, 1}, temp_b});
  };

  for (int k = 0; k < crowns; ++k) {
    const Rotation rk = axis_rot(k * sector);
    for (int q = 0; q < patches_per_crown; ++q) {
      std::vector<Vec3> pts;
      pts.reserve(samples + 1);
      for (int i = 0; i <= samples; ++i)
        pts.push_back(place(k, (q + double(i) / samples) * width));
      auto fit = splines::fit_points(pts, lay.degree, lay.ctrl_n);
      const double th0 = (q + 0.5) * width;
      const Vec3 radial = rk * Vec3(std::cos(th0), std::sin(th0), 0.0);
      add_patch(fit.patch, fit.residual, radial, place_temp(k, q * width),
                place_temp(k, (q + 1) * width));
    }
  }

  // bridges: forward extremum of crown k facing backward extremum of k+1
  auto forward_z = [&](int k, double th) {
    const double z = lay.half_height * std::cos(0.5 * n_w * th);
    return (k % 2 == 1) ? -z : z;
  };
  std::ostringstream bridge_note;
  for (int k = 0; k + 1 < crowns; ++k) {
    std::vector<double> cand;
    for (int q = 0; q < 2 * n_w; ++q) {
      const double th = q * width;
      if (std::abs(forward_z(k, th) - lay.half_height) <
              1e-9 * lay.half_height &&
          std::abs(forward_z(k + 1, th) + lay.half_height) <
              1e-9 * lay.half_height)
        cand.push_back(th);
    }
    std::vector<double> chosen;
    for (double th : cand) {
      const bool on_plane = std::abs(std::sin(th)) < 1e-9;
      if (on_plane) continue;
      if (half && !(th > 0.0 && th < M_PI)) continue;
      // mirror-consistent pair per half: skip angles mapping onto the plane
      chosen.push_back(th);
    }
    if (half && chosen.size() > 2) {
      // keep the two angles closest to the crown flanks (60/120-type set)
      std::sort(chosen.begin(), chosen.end(), [](double a, double b) {
        return std::abs(a - M_PI / 2) > std::abs(b - M_PI / 2);
      });
      chosen.resize(2);
      std::sort(chosen.begin(), chosen.end());
    }
    for (double th : chosen) {
      bridge_note << " " << k + 1 << ":" << th * 180.0 / M_PI;
      const Vec3 a = place(k, th);
      const Vec3 b = place(k + 1, th);
      const Vec3 at = place_temp(k, th);
      const Vec3 bt = place_temp(k + 1, th);
      std::vector<Vec3> pts, tmp;
      const Vec3 chord_dir = (b - a).normalized();
      const Vec3 chord_dir_t = (bt - at).normalized();
      for (int i = 0; i <= samples; ++i) {
        const double xi = double(i) / samples;
        const Vec3 chord = a + xi * (b - a);
        // radially oriented offset, measured perpendicular to the chord
        const double psi = std::atan2(chord.z() - lay.axis_center.z(),
                                      chord.x() - lay.axis_center.x());
        Vec3 radial = chord - axis_point(psi);
        radial = (radial - radial.dot(chord_dir) * chord_dir).normalized();
        pts.push_back(chord + lay.bridge_height * std::sin(2.0 * M_PI * xi) *
                                  radial);
        const Vec3 chord_t = at + xi * (bt - at);
        Vec3 radial_t(chord_t.x() - axis_point(0.0).x(),
                      chord_t.y() - axis_point(0.0).y(), 0.0);
        radial_t =
            (radial_t - radial_t.dot(chord_dir_t) * chord_dir_t).normalized();
        tmp.push_back(chord_t + lay.bridge_height *
                                    std::sin(2.0 * M_PI * xi) * radial_t);
      }
      auto fit = splines::fit_points(pts, lay.degree, lay.ctrl_n);
      const Vec3 mid = 0.5 * (a + b);
      const double psi_m = std::atan2(mid.z() - lay.axis_center.z(),
                                      mid.x() - lay.axis_center.x());
      add_patch(fit.patch, fit.residual,
                (mid - axis_point(psi_m)).normalized(), tmp.front(),
                tmp.back());
    }
  }

  // joints and symmetry cuts (half model: plane x2 = 0)
  auto joints = detail::group_joints(ends);
  auto temp_joints = detail::group_joints(temp_ends);
  const double tol = 1e-9 * lay.crown_radius;
  for (auto& j : joints) {
    if (j.ends.size() == 1 && half && std::abs(j.position.y()) < tol) {
      asmb.symmetry.push_back({j.ends[0], Vec3::UnitY()});
      continue;
    }
    // matched temporary position: find the temp joint containing the same
    // member end
    const MemberEnd& e = j.ends.front();
    for (const auto& tj : temp_joints) {
      for (const auto& te : tj.ends) {
        if (te.patch == e.patch && te.end == e.end) {
          j.target = tj.position;
          break;
        }
      }
    }
    asmb.joints.push_back(j);
  }
  std::ostringstream note;
  note << "curved stent: 4 crowns on circular axis (sweep "
       << lay.axis_sweep * 180.0 / M_PI
       << " deg), crowns 2 and 4 flipped about x2; sinusoidal bridges of "
          "height h_c/2 at angles [deg]" << bridge_note.str()
       << "; miniaturized targets: straightened axis, radius R - delta_r, "
          "delta_r=" << lay.delta_r;
  asmb.notes = note.str();
  return asmb;
}

}  // namespace smpbeam::stents
