#include "groundiff/diffusion.hpp"

#include <cmath>
#include <stdexcept>

namespace groundiff {

DiffusionSchedule build_cosine_schedule(int T, double s, double scale) {
  if (T < 1) throw std::invalid_argument("build_cosine_schedule: T < 1");
  if (!(s > 0.0 && s < 1.0))
    throw std::invalid_argument("build_cosine_schedule: s out of (0,1)");
  auto f = [&](double t) {
    double x = ((t / T + s) / (1.0 + s)) * M_PI / 2.0;
    double c = std::cos(x);
    return c * c;
  };
  DiffusionSchedule sched;
  sched.T = T;
  sched.s = s;
  sched.scale = scale;
  sched.alpha_bar.assign(static_cast<size_t>(T) + 1, 1.0);
  double f0 = f(0.0);
  // Raw alpha_bar, then clip per-step beta at 0.999 and rebuild.
  std::vector<double> raw(static_cast<size_t>(T) + 1);
  for (int t = 0; t <= T; ++t) raw[t] = f(static_cast<double>(t)) / f0;
  double acc = 1.0;
  sched.alpha_bar[0] = 1.0;
  for (int t = 1; t <= T; ++t) {
    double beta = 1.0 - raw[t] / raw[t - 1];
    if (beta > 0.999) beta = 0.999;
    acc *= 1.0 - beta;
    sched.alpha_bar[t] = acc;
  }
  return sched;
}

Box q_sample(const Box& b0, int t, const Box& noise,
             const DiffusionSchedule& sched) {
  if (t < 0 || t > sched.T)
    throw std::out_of_range("q_sample: t out of [0, T]");
  double a = sched.alpha_bar[t];
  double sa = std::sqrt(a);
  double sn = std::sqrt(1.0 - a);
  Box out;
  for (int i = 0; i < 4; ++i)
    out[i] = clamp(sa * b0[i] + sn * noise[i], -sched.scale, sched.scale);
  return out;
}

TimestepPlan make_timestep_plan(int n_steps, int T) {
  if (n_steps < 1)
    throw std::invalid_argument("make_timestep_plan: n_steps < 1");
  if (n_steps > T)
    throw std::invalid_argument("make_timestep_plan: n_steps > T");
  // times = reversed(linspace(-1, T-1, n_steps+1)), paired contiguously.
  std::vector<int> times(static_cast<size_t>(n_steps) + 1);
  for (int i = 0; i <= n_steps; ++i) {
    double v = -1.0 + (static_cast<double>(T) * i) / n_steps;
    times[n_steps - i] = static_cast<int>(std::lround(v));
  }
  TimestepPlan plan;
  plan.reserve(n_steps);
  for (int i = 0; i < n_steps; ++i)
    plan.emplace_back(times[i], times[i + 1]);
  return plan;
}

Box ddim_step(const Box& bt, const Box& b0_pred, int t_cur, int t_next,
              const DiffusionSchedule& sched) {
  if (t_next >= t_cur)
    throw std::invalid_argument("ddim_step: t_next >= t_cur");
  if (t_next < 0) return b0_pred;
  double a_cur = sched.alpha_bar[t_cur];
  double a_next = sched.alpha_bar[t_next];
  double sa_cur = std::sqrt(a_cur);
  double sn_cur = std::sqrt(1.0 - a_cur);
  double sa_next = std::sqrt(a_next);
  double sn_next = std::sqrt(1.0 - a_next);
  Box out;
  for (int i = 0; i < 4; ++i) {
    double eps = (bt[i] - sa_cur * b0_pred[i]) / sn_cur;
    out[i] = clamp(sa_next * b0_pred[i] + sn_next * eps, -sched.scale,
                   sched.scale);
  }
  return out;
}

Box ddpm_step(const Box& bt, const Box& b0_pred, int t_cur, int t_next,
              const DiffusionSchedule& sched, Rng& rng) {
  if (t_next >= t_cur)
    throw std::invalid_argument("ddpm_step: t_next >= t_cur");
  if (t_next < 0) return b0_pred;
  double a_cur = sched.alpha_bar[t_cur];
  double a_next = sched.alpha_bar[t_next];
  double sa_cur = std::sqrt(a_cur);
  double sn_cur = std::sqrt(1.0 - a_cur);
  // eta = 1: sigma^2 = (1 - a_next)/(1 - a_cur) * (1 - a_cur/a_next).
  double sigma2 = (1.0 - a_next) / (1.0 - a_cur) * (1.0 - a_cur / a_next);
  double sigma = std::sqrt(std::max(0.0, sigma2));
  double dir = std::sqrt(std::max(0.0, 1.0 - a_next - sigma * sigma));
  double sa_next = std::sqrt(a_next);
  Box out;
  for (int i = 0; i < 4; ++i) {
    double eps = (bt[i] - sa_cur * b0_pred[i]) / sn_cur;
    double z = rng.normal();
    out[i] = clamp(sa_next * b0_pred[i] + dir * eps + sigma * z, -sched.scale,
                   sched.scale);
  }
  return out;
}

}  // namespace groundiff
