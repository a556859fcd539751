#pragma once

#include <string>

#include "groundiff/engine.hpp"

namespace groundiff {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Full run configuration, JSON sections {data, model, diffusion, train,
// infer, eval}. Every field has a default: parsing starts from the
// desk-scale setup of desk_default() (64-cell grid, D=32, 32 training
// proposals, 2000 training scenes), so a config file only lists overrides.
// The phrase dimension and channel count live in `data` only and are copied
// into the model, so the two can never disagree.
struct RunConfig {
  // data
  SceneConfig scene{};
  int n_train{2000};
  int n_eval{500};

  // model (d_t and channels mirror `scene`)
  ModelConfig model{};

  // diffusion
  int T{1000};
  double s{0.008};
  double scale{kSignalScale};

  // train
  TrainConfig train{};

  // infer
  InferOptions infer{};
  SelectMode select_mode{SelectMode::top1};
  double select_k_or_tau{1.0};

  // eval
  std::vector<double> zetas{0.35, 0.5, 0.6, 0.7, 0.9};

  DiffusionSchedule make_schedule() const { return build_cosine_schedule(T, s, scale); }
  EvalOptions make_eval_options() const;
  std::string to_json() const;  // canonical ordered serialization
  // FNV-1a hash of the canonical serialization, as 16 hex digits.
  std::string hash() const;
};

// Desk-scale defaults (identical to configs/desk.json): RunConfig{} struct
// values plus the tuned desk training recipe.
RunConfig desk_default();

// Parse from a JSON string. Missing keys keep defaults; unknown keys anywhere
// are rejected with the offending path in the message. parse_config is pure
// (no environment lookups) so stored configs, e.g. checkpoint metadata, can
// be reconstructed exactly. The load_* entry points additionally apply the
// GROUNDIFF_SEED override; use those for user-supplied config files.
RunConfig parse_config(const std::string& json_text);
RunConfig load_config(const std::string& path);
RunConfig load_config_or_default(const std::string& path);  // "" -> defaults

// Applies GROUNDIFF_SEED if present; returns true when an override happened.
bool apply_env_seed(RunConfig& cfg);

// Write text to a file atomically (temp file + rename).
void write_text_atomic(const std::string& path, const std::string& text);

// The git revision baked in at build time ("unknown" outside a checkout).
std::string git_revision();

}  // namespace groundiff
