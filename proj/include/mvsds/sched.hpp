#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "mvsds/core/tensor.hpp"

namespace mvsds::sched {

enum class ScheduleFamily { linear_beta, cosine };

inline std::string to_string(ScheduleFamily f) {
  return f == ScheduleFamily::linear_beta ? "linear_beta" : "cosine";
}

inline ScheduleFamily schedule_family_from_string(const std::string& s) {
  if (s == "linear_beta") return ScheduleFamily::linear_beta;
  if (s == "cosine") return ScheduleFamily::cosine;
  throw invalid_argument("unknown schedule family: " + s);
}

// Discrete noise schedule. alpha[t] is the signal scale and sigma[t] the
// noise scale at integer timestep t in [0, T); alpha^2 + sigma^2 = 1.
struct NoiseSchedule {
  int num_steps = 0;
  std::vector<double> alpha;
  std::vector<double> sigma;
  std::string derivation;

  double alpha_at(int t) const { return alpha[static_cast<size_t>(t)]; }
  double sigma_at(int t) const { return sigma[static_cast<size_t>(t)]; }
};

inline NoiseSchedule build_schedule(int num_steps,
                                    ScheduleFamily family = ScheduleFamily::linear_beta,
                                    double beta_start = 1e-4,
                                    double beta_end = 2e-2) {
  MVSDS_REQUIRE(num_steps >= 2, "schedule needs at least 2 steps, got ", num_steps);
  std::vector<double> beta(static_cast<size_t>(num_steps));
  if (family == ScheduleFamily::linear_beta) {
    for (int t = 0; t < num_steps; ++t)
      beta[t] = beta_start + (beta_end - beta_start) * t / (num_steps - 1);
  } else {
    // Squared-cosine signal curve turned into per-step betas (clipped), so
    // the signal scale stays strictly positive and strictly decreasing.
    const double s = 0.008;
    auto f = [s](double u) {
      double v = std::cos((u + s) / (1.0 + s) * M_PI / 2.0);
      return v * v;
    };
    double f0 = f(0.0);
    double prev = 1.0;
    for (int t = 0; t < num_steps; ++t) {
      double abar = f(static_cast<double>(t + 1) / num_steps) / f0;
      beta[t] = std::clamp(1.0 - abar / prev, 1e-8, 0.999);
      prev *= 1.0 - beta[t];
    }
  }
  NoiseSchedule out;
  out.num_steps = num_steps;
  out.alpha.resize(beta.size());
  out.sigma.resize(beta.size());
  double abar = 1.0;
  for (int t = 0; t < num_steps; ++t) {
    abar *= 1.0 - beta[t];
    out.alpha[t] = std::sqrt(abar);
    out.sigma[t] = std::sqrt(1.0 - abar);
  }
  out.derivation = to_string(family) + "(" + std::to_string(beta_start) + "," +
                   std::to_string(beta_end) + ")";
  return out;
}

template <typename T>
void check_timestep(const NoiseSchedule& sched, int t) {
  MVSDS_REQUIRE(t >= 0 && t < sched.num_steps, "timestep ", t,
                " outside [0,", sched.num_steps, ")");
}

// x_t = alpha_t * x + sigma_t * eps
template <typename T>
Tensor<T> add_noise(const Tensor<T>& x, const Tensor<T>& eps, int t,
                    const NoiseSchedule& sched) {
  MVSDS_REQUIRE(x.same_shape(eps), "add_noise: x/eps shape mismatch");
  check_timestep<T>(sched, t);
  const T a = static_cast<T>(sched.alpha_at(t));
  const T s = static_cast<T>(sched.sigma_at(t));
  Tensor<T> out(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) out[i] = a * x[i] + s * eps[i];
  return out;
}

// x0_hat = (x_t - sigma_t * eps_pred) / alpha_t
template <typename T>
Tensor<T> estimate_x0(const Tensor<T>& x_t, const Tensor<T>& eps_pred, int t,
                      const NoiseSchedule& sched) {
  MVSDS_REQUIRE(x_t.same_shape(eps_pred), "estimate_x0: shape mismatch");
  check_timestep<T>(sched, t);
  const double a = sched.alpha_at(t);
  if (a <= 0.0) throw std::domain_error("estimate_x0: alpha_t is zero");
  const T inv_a = static_cast<T>(1.0 / a);
  const T s = static_cast<T>(sched.sigma_at(t));
  Tensor<T> out(x_t.shape());
  for (int64_t i = 0; i < x_t.numel(); ++i) out[i] = (x_t[i] - s * eps_pred[i]) * inv_a;
  return out;
}

// Deterministic (eta = 0) update from t_from down to t_to.
template <typename T>
Tensor<T> ddim_step(const Tensor<T>& x_t, const Tensor<T>& eps_pred, int t_from,
                    int t_to, const NoiseSchedule& sched) {
  MVSDS_REQUIRE(t_to < t_from, "ddim_step: t_to (", t_to,
                ") must be below t_from (", t_from, ")");
  check_timestep<T>(sched, t_from);
  check_timestep<T>(sched, t_to);
  Tensor<T> x0 = estimate_x0(x_t, eps_pred, t_from, sched);
  const T a = static_cast<T>(sched.alpha_at(t_to));
  const T s = static_cast<T>(sched.sigma_at(t_to));
  Tensor<T> out(x_t.shape());
  for (int64_t i = 0; i < x_t.numel(); ++i) out[i] = a * x0[i] + s * eps_pred[i];
  return out;
}

// Linear annealing window over optimization steps, expressed as fractions of
// the schedule length. Both bounds start at the same fraction, so at step 0
// the sampling window collapses to a single timestep.
struct AnnealWindow {
  double t_max_start = 0.98;
  double t_max_end = 0.5;
  double t_min_start = 0.98;
  double t_min_end = 0.02;
  int anneal_steps = 8000;
};

// Integer (t_min, t_max) bounds at an optimization step.
inline std::pair<int, int> anneal_bounds(int step, const AnnealWindow& win,
                                         int num_steps) {
  MVSDS_REQUIRE(step >= 0, "anneal_bounds: negative step");
  double u = win.anneal_steps <= 0
                 ? 1.0
                 : std::min(1.0, static_cast<double>(step) / win.anneal_steps);
  double fmax = win.t_max_start + (win.t_max_end - win.t_max_start) * u;
  double fmin = win.t_min_start + (win.t_min_end - win.t_min_start) * u;
  int t_max = static_cast<int>(std::floor(fmax * num_steps));
  int t_min = static_cast<int>(std::floor(fmin * num_steps));
  t_max = std::clamp(t_max, 0, num_steps - 1);
  t_min = std::clamp(t_min, 0, t_max);
  return {t_min, t_max};
}

}  // namespace mvsds::sched
