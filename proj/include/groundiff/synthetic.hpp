#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "groundiff/geometry.hpp"
#include "groundiff/rng.hpp"
#include "groundiff/util.hpp"

namespace groundiff {

// Scene generation parameters. Channels include two trailing x/y ramp
// channels; the first (channels - 2) carry category prototypes.
struct SceneConfig {
  int grid{64};        // G: field is grid x grid cells
  int channels{8};     // C >= 3
  int vocab{16};       // category vocabulary size
  int d_t{16};         // phrase feature dimension
  int p_min{1};        // phrases per scene
  int p_max{3};
  int n_min{1};        // instances per phrase (n_min = n_max = 1 -> 1:1)
  int n_max{3};
  int min_cells{4};    // object side lengths, in cells
  int max_cells{22};
  double max_overlap{0.3};  // cap on intersection / smaller-object area
  int place_tries{64};
  double noise{0.02};        // per-cell stamp noise amplitude
  double feat_jitter{0.02};  // per-sample phrase feature jitter

  bool operator==(const SceneConfig&) const = default;
};

void validate(const SceneConfig& cfg);

// Intersection area over the smaller box's area (the placement measure).
double placement_overlap(const Box& a, const Box& b);

// One placed object, in integer cell units (exactly grid-aligned).
struct SceneObject {
  int phrase{0};  // index into the sample's phrase list
  int x0{0}, y0{0}, w{0}, h{0};
};

struct GroundingSample {
  uint64_t seed{0};
  std::vector<int> cats;             // P category ids
  std::vector<SceneObject> objects;  // stamp order (phrase-major)
  Mat phrase_feats;                  // P x d_t
  std::vector<std::vector<Box>> gt;  // per-phrase cxcywh boxes in [0,1]
  std::vector<double> field;         // grid*grid*channels, (y, x, ch) order
};

// Fixed prototype tables (independent of run seed): unit-norm rows.
Mat visual_prototypes(int vocab, int channels);
Mat phrase_prototypes(int vocab, int d_t);

// Deterministic field stamping for a fixed object list; later stamps win.
// Noise draws come from a substream of `seed`, so re-stamping reproduces
// the field bit-exactly.
std::vector<double> stamp_field(const SceneConfig& cfg,
                                const std::vector<SceneObject>& objects,
                                uint64_t seed);

// Thrown when an object cannot be placed within cfg.place_tries attempts.
struct PlacementError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

GroundingSample gen_scene(const SceneConfig& cfg, uint64_t seed);

// Retries gen_scene with derived seeds when placement fails; deterministic
// in (cfg, base_seed).
GroundingSample gen_scene_retry(const SceneConfig& cfg, uint64_t base_seed,
                                int attempts = 16);

// Scene i of a dataset depends only on (seed, offset + i), so disjoint
// train/eval splits come from disjoint offset ranges.
std::vector<GroundingSample> gen_dataset(const SceneConfig& cfg, int n,
                                         uint64_t seed, uint64_t offset = 0);

// Per-channel integral images for O(1) exact area-average pooling.
struct SceneFeatures {
  int G{0};
  int C{0};
  const std::vector<double>* field{nullptr};
  std::vector<double> integral;  // C planes of (G+1)*(G+1)
};

SceneFeatures build_scene_features(const std::vector<double>& field, int G,
                                   int C);

// Area-average pooling of each box over an R x R grid of sub-rectangles.
// Row layout per box: bin-major then channel, (ry*R + rx)*C + ch. Exact for
// the piecewise-constant field; the full-scene box yields channel means.
Mat roi_features(const SceneFeatures& f, const std::vector<Box>& boxes, int R);

// JSONL dataset: header line with the scene config, then one sample per
// line (placements + seeds; fields are re-stamped on load). A non-empty
// provenance_json (a JSON object) is embedded in the header untouched.
void save_dataset(const std::string& path, const SceneConfig& cfg,
                  const std::vector<GroundingSample>& samples,
                  const std::string& provenance_json = "");
std::pair<SceneConfig, std::vector<GroundingSample>> load_dataset(
    const std::string& path);

}  // namespace groundiff
