#pragma once

#include <utility>
#include <vector>

#include "groundiff/geometry.hpp"
#include "groundiff/rng.hpp"

namespace groundiff {

// Cosine noise schedule. alpha_bar has T+1 entries (index 0..T) with
// alpha_bar[0] == 1 and a strict monotone decrease; per-step beta values are
// clipped to <= 0.999 and alpha_bar rebuilt from the clipped betas.
struct DiffusionSchedule {
  int T{0};
  double s{0.008};
  double scale{kSignalScale};
  std::vector<double> alpha_bar;  // size T+1
};

DiffusionSchedule build_cosine_schedule(int T, double s = 0.008,
                                        double scale = kSignalScale);

// Forward diffusion draw: sqrt(a)*b0 + sqrt(1-a)*noise, clamped to the
// signal range. `noise` is injected by the caller so tests can pin it.
Box q_sample(const Box& b0, int t, const Box& noise,
             const DiffusionSchedule& sched);

// (t_cur, t_next) pairs walked during reverse sampling; the final pair has
// t_next == -1, meaning "emit the clean estimate".
using TimestepPlan = std::vector<std::pair<int, int>>;

TimestepPlan make_timestep_plan(int n_steps, int T);

// Deterministic DDIM update (eta = 0). At t_next == -1 returns b0_pred.
Box ddim_step(const Box& bt, const Box& b0_pred, int t_cur, int t_next,
              const DiffusionSchedule& sched);

// Stochastic ancestral update, used only for the sampler ablation. At
// t_next == -1 returns b0_pred; otherwise adds sigma-scaled noise with
// sigma chosen as in eta = 1 DDIM.
Box ddpm_step(const Box& bt, const Box& b0_pred, int t_cur, int t_next,
              const DiffusionSchedule& sched, Rng& rng);

}  // namespace groundiff
