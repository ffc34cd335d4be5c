#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace pkpd {

// Rate constants of the mammillary three-compartment model: central
// compartment 1 exchanges with peripheral compartments 2 and 3, elimination
// k10 from central. Units 1/min; v1 in litres.
struct PkRates {
  double k10 = 0.0;
  double k12 = 0.0;
  double k21 = 0.0;
  double k13 = 0.0;
  double k31 = 0.0;
  double v1 = 1.0;

  void validate() const {
    if (k10 < 0 || k12 < 0 || k21 < 0 || k13 < 0 || k31 < 0)
      throw std::invalid_argument("PkRates: rate constants must be >= 0");
    if (!(v1 > 0)) throw std::invalid_argument("PkRates: v1 must be > 0");
  }
};

// Hook for covariate-personalised rate constants (Marsh/White style). No
// formula is built in; callers supply their own.
using PkRateConstructor = std::function<PkRates(const Eigen::VectorXd& covariates)>;

// Piecewise-constant infusion: rates[i] applies on [breakpoints[i],
// breakpoints[i+1]), the last rate until `duration`.
struct InfusionSchedule {
  std::vector<double> breakpoints;  // minutes, strictly increasing, starts at 0
  std::vector<double> rates;        // mg/min, one per interval
  double duration = 0.0;            // minutes

  void validate() const {
    if (breakpoints.empty() || breakpoints.front() != 0.0)
      throw std::invalid_argument("InfusionSchedule: breakpoints must start at 0");
    if (breakpoints.size() != rates.size())
      throw std::invalid_argument("InfusionSchedule: one rate per breakpoint");
    for (std::size_t i = 1; i < breakpoints.size(); ++i)
      if (!(breakpoints[i] > breakpoints[i - 1]))
        throw std::invalid_argument("InfusionSchedule: breakpoints must be strictly increasing");
    for (double r : rates)
      if (r < 0) throw std::invalid_argument("InfusionSchedule: rates must be >= 0");
    if (duration < breakpoints.back())
      throw std::invalid_argument("InfusionSchedule: duration must cover all breakpoints");
  }

  double rate_at(double t) const {
    auto it = std::upper_bound(breakpoints.begin(), breakpoints.end(), t);
    const std::size_t idx = (it == breakpoints.begin())
                                ? 0
                                : static_cast<std::size_t>(it - breakpoints.begin() - 1);
    return rates[idx];
  }

  double total_dose() const {
    double dose = 0.0;
    for (std::size_t i = 0; i < rates.size(); ++i) {
      const double hi = (i + 1 < breakpoints.size()) ? breakpoints[i + 1] : duration;
      dose += rates[i] * (hi - breakpoints[i]);
    }
    return dose;
  }
};

// Central-compartment concentration sampled on a uniform grid; values[i] is
// c1 at time i*dt, starting at t=0.
struct ConcentrationSeries {
  double dt = 0.25;              // minutes
  Eigen::VectorXd values;        // mg/L

  Eigen::Index size() const { return values.size(); }
};

inline Eigen::Matrix3d build_rate_matrix(const PkRates& r) {
  r.validate();
  Eigen::Matrix3d a;
  a << -(r.k10 + r.k12 + r.k13), r.k21, r.k31,
        r.k12,                  -r.k21, 0.0,
        r.k13,                   0.0,  -r.k31;
  return a;
}

namespace detail {

// E = exp(A h) and Phi = integral_0^h exp(A s) ds, computed jointly by a
// truncated series on a scaled interval followed by doubling:
//   Phi(2h) = (I + E(h)) Phi(h),  E(2h) = E(h)^2.
// Phi is well defined for singular A (it equals A^{-1}(E - I) otherwise).
inline void expm_phi(const Eigen::Matrix3d& a, double h, Eigen::Matrix3d& e_out,
                     Eigen::Matrix3d& phi_out) {
  const double norm = (a * h).cwiseAbs().rowwise().sum().maxCoeff();
  int squarings = 0;
  double scale = 1.0;
  while (norm * scale > 0.25 && squarings < 64) {
    scale *= 0.5;
    ++squarings;
  }
  const double hs = h * scale;

  // Phi(hs) = hs * sum_n (A hs)^n / (n+1)!
  const Eigen::Matrix3d ah = a * hs;
  Eigen::Matrix3d term = Eigen::Matrix3d::Identity();
  Eigen::Matrix3d sum = term;
  for (int n = 1; n <= 24; ++n) {
    term = (term * ah) / static_cast<double>(n + 1);
    sum += term;
    if (term.cwiseAbs().maxCoeff() < 1e-20) break;
  }
  Eigen::Matrix3d phi = hs * sum;
  Eigen::Matrix3d e = Eigen::Matrix3d::Identity() + a * phi;

  for (int i = 0; i < squarings; ++i) {
    phi = (Eigen::Matrix3d::Identity() + e) * phi;
    e = e * e;
  }
  // Both factors are elementwise nonnegative for Metzler A; clip the tiny
  // negative round-off so concentrations stay in the physical cone.
  e_out = e.cwiseMax(0.0);
  phi_out = phi.cwiseMax(0.0);
}

}  // namespace detail

// Solves dc/dt = A c + e1 w(t)/v1 exactly on each constant-rate interval and
// returns c1 sampled at 0, dt, 2dt, ... while t <= duration.
inline ConcentrationSeries solve_pk(const PkRates& rates, const InfusionSchedule& schedule,
                                    double dt) {
  rates.validate();
  schedule.validate();
  if (!(dt > 0)) throw std::invalid_argument("solve_pk: dt must be > 0");
  if (schedule.duration < dt)
    throw std::invalid_argument("solve_pk: schedule duration must be >= dt");

  const Eigen::Matrix3d a = build_rate_matrix(rates);
  const Eigen::Index n_steps = static_cast<Eigen::Index>(
      std::floor(schedule.duration / dt + 1e-9));

  // One (E, Phi) pair per distinct sub-step length; schedules have few
  // breakpoints so this stays tiny.
  std::map<double, std::pair<Eigen::Matrix3d, Eigen::Matrix3d>> propagators;
  auto propagator = [&](double h) -> const std::pair<Eigen::Matrix3d, Eigen::Matrix3d>& {
    auto it = propagators.find(h);
    if (it == propagators.end()) {
      Eigen::Matrix3d e, phi;
      detail::expm_phi(a, h, e, phi);
      it = propagators.emplace(h, std::make_pair(e, phi)).first;
    }
    return it->second;
  };

  ConcentrationSeries out;
  out.dt = dt;
  out.values.resize(n_steps + 1);
  Eigen::Vector3d c = Eigen::Vector3d::Zero();
  out.values[0] = 0.0;

  for (Eigen::Index i = 0; i < n_steps; ++i) {
    double t = static_cast<double>(i) * dt;
    const double t_end = t + dt;
    // Split the step at any schedule breakpoints it straddles.
    while (t < t_end - 1e-12) {
      auto it = std::upper_bound(schedule.breakpoints.begin(), schedule.breakpoints.end(),
                                 t + 1e-12);
      double seg_end = (it == schedule.breakpoints.end()) ? t_end : std::min(*it, t_end);
      const double h = seg_end - t;
      const double w = schedule.rate_at(t + 1e-12);
      const auto& [e, phi] = propagator(h);
      c = e * c + phi.col(0) * (w / rates.v1);
      t = seg_end;
    }
    const double c1 = c[0];
    if (!std::isfinite(c1))
      throw std::runtime_error("solve_pk: non-finite concentration at t=" + std::to_string(t_end));
    out.values[i + 1] = c1;
  }
  return out;
}

}  // namespace pkpd
