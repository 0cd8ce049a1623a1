#pragma once

// Piecewise-linear time functions for temperature, load scaling and imposed
// displacement ramps, plus the merged step grid of a run.

#include <algorithm>
#include <set>
#include <stdexcept>
#include <vector>

namespace smpbeam::schedule {

class PiecewiseLinear {
 public:
  PiecewiseLinear() = default;
  PiecewiseLinear(std::vector<double> t, std::vector<double> v)
      : t_(std::move(t)), v_(std::move(v)) {
    if (t_.size() != v_.size() || t_.empty())
      throw std::invalid_argument("schedule: breakpoint/value mismatch");
    if (!std::is_sorted(t_.begin(), t_.end()))
      throw std::invalid_argument("schedule: breakpoints must be sorted");
  }

  static PiecewiseLinear constant(double v) { return {{0.0}, {v}}; }

  // clamped at both ends
  double operator()(double t) const {
    if (t <= t_.front()) return v_.front();
    if (t >= t_.back()) return v_.back();
    const auto it = std::upper_bound(t_.begin(), t_.end(), t);
    const size_t i = it - t_.begin();
    const double w = (t - t_[i - 1]) / (t_[i] - t_[i - 1]);
    return (1.0 - w) * v_[i - 1] + w * v_[i];
  }

  const std::vector<double>& breakpoints() const { return t_; }

 private:
  std::vector<double> t_{0.0};
  std::vector<double> v_{0.0};
};

struct Schedule {
  PiecewiseLinear temperature = PiecewiseLinear::constant(20.0);  // [deg C]
  std::vector<PiecewiseLinear> channels;  // dimensionless scale factors

  double channel_value(int id, double t) const {
    if (id < 0) return 1.0;
    return channels.at(id)(t);
  }
};

// Time grid from 0 to t_total with base step h, refined so that every
// breakpoint/event time is hit exactly.
inline std::vector<double> step_grid(double t_total, double h,
                                     const Schedule& sched,
                                     const std::vector<double>& events) {
  if (h <= 0.0 || t_total <= 0.0)
    throw std::invalid_argument("step grid: need positive h and t_total");
  std::set<double> marks{0.0, t_total};
  auto add = [&](double t) {
    if (t > 0.0 && t < t_total) marks.insert(t);
  };
  for (double t : sched.temperature.breakpoints()) add(t);
  for (const auto& ch : sched.channels)
    for (double t : ch.breakpoints()) add(t);
  for (double t : events) add(t);

  std::vector<double> grid{0.0};
  double prev = 0.0;
  for (double m : marks) {
    if (m <= prev) continue;
    const int k = std::max(1, static_cast<int>(std::ceil((m - prev) / h - 1e-9)));
    for (int i = 1; i <= k; ++i) grid.push_back(prev + (m - prev) * i / k);
    grid.back() = m;
    prev = m;
  }
  return grid;
}

}  // namespace smpbeam::schedule
