#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "groundiff/diffusion.hpp"
#include "groundiff/model.hpp"
#include "groundiff/objective.hpp"
#include "groundiff/proposals.hpp"
#include "groundiff/synthetic.hpp"

namespace groundiff {

struct EngineError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ----- Training -----

struct TrainConfig {
  int epochs{60};
  int batch_size{20};
  int n_hat{150};
  ProposalSchema schema{ProposalSchema::phrase_balanced};
  LossWeights weights{};
  double lr{1e-4};
  double min_lr{1e-7};
  double weight_decay{1e-4};
  double beta1{0.9};
  double beta2{0.999};
  double clip_norm{0.1};
  int warmup_epochs{5};
  // Per-phrase partitioned matching; false matches all GT against all slots
  // jointly (ablation path).
  bool partitioned{true};
  uint64_t seed{6};
};

struct LossRow {
  int epoch{0};
  int64_t step{0};
  double lr{0.0};
  LossBreakdown loss{};
};

// One optimizer update over `batch`. Per sample: pad proposals by schema,
// scale to signal space, draw one uniform t in [0, T), q_sample, denoise,
// match, composite loss; the batch loss is the sample mean. Phrases are
// padded to the batch maximum with a mask. Throws EngineError with a
// diagnostic dump if the loss turns non-finite.
LossBreakdown train_step(Denoiser& model, ad::AdamW& opt,
                         const DiffusionSchedule& sched,
                         const std::vector<const GroundingSample*>& batch,
                         const TrainConfig& cfg, Rng& rng, double lr_now);

struct FitResult {
  std::vector<LossRow> history;  // one row per optimizer step
  int64_t steps{0};
};

// Full training loop: deterministic shuffling, warmup+cosine learning rate,
// one history row per step. on_step may be empty.
FitResult fit(Denoiser& model, const DiffusionSchedule& sched,
              const std::vector<GroundingSample>& train,
              const TrainConfig& cfg,
              const std::function<void(const LossRow&)>& on_step = {});

// Constructs and initializes a model deterministically from the run seed.
Denoiser make_denoiser(const ModelConfig& cfg, uint64_t seed);

// ----- Inference -----

// A denoising oracle: fills b0_scaled (N x 4, signal space, unclamped) and
// shat (N x P) for the given noisy signal-space boxes at timestep t. The
// model-backed version extracts RoI features internally; tests substitute
// hand-built oracles.
using DenoiseFn =
    std::function<void(const Mat& noisy_scaled, int t, Mat& b0_scaled, Mat& shat)>;

// Wraps a trained model over one scene: builds the scene's pooling features
// once and extracts RoI features per call. `model` and `sample` must outlive
// the returned function.
DenoiseFn make_model_denoiser(Denoiser& model, const GroundingSample& sample,
                              std::vector<uint8_t> phrase_mask = {},
                              double scale = kSignalScale);

enum class Sampler { ddim, ddpm };
Sampler parse_sampler(const std::string& name);
std::string sampler_name(Sampler s);

struct InferOptions {
  int n_steps{5};
  int n_infer{32};
  bool ensemble{false};
  double nms_iou{0.5};
  Sampler sampler{Sampler::ddim};  // ddpm is the stochastic ablation arm
};

struct InferenceResult {
  // Candidate boxes in clamped [0,1] cxcywh: the final step's N boxes in
  // plain mode, every step's boxes pooled in ensemble mode.
  std::vector<Box> boxes;
  Mat scores;                    // candidates x P similarity
  std::vector<std::vector<Box>> trajectory;  // n_steps snapshots, [0,1] domain
  double infer_ms{0.0};
};

InferenceResult infer(const DenoiseFn& fn, const DiffusionSchedule& sched,
                      const InferOptions& opt, Rng& rng);

// ----- Selection -----

enum class SelectMode { top1, topk, threshold };

SelectMode parse_select_mode(const std::string& name);
std::string select_mode_name(SelectMode m);

// Greedy non-maximum suppression: visit by descending score (ties by lower
// index), keep a box iff its IoU with every kept box is <= iou_thresh.
// Returns kept indices in visit order.
std::vector<int> nms(const std::vector<Box>& boxes,
                     const std::vector<double>& scores, double iou_thresh);

// Per-phrase final predictions (indices into `boxes`, best first).
// top1: the argmax of the phrase's score column. topk: the k highest after
// greedy IoU dedup at dedup_iou. threshold: all with score >= k_or_tau
// after the same dedup.
std::vector<std::vector<int>> select_predictions(const std::vector<Box>& boxes,
                                                 const Mat& scores,
                                                 SelectMode mode,
                                                 double k_or_tau,
                                                 double dedup_iou = 0.5);

// ----- Evaluation -----

struct EvalOptions {
  std::vector<double> zetas{0.35, 0.5, 0.6, 0.7, 0.9};
  int n_steps{5};
  int n_infer{32};
  bool ensemble{false};
  double nms_iou{0.5};
  Sampler sampler{Sampler::ddim};
  uint64_t seed{6};
};

struct MetricsReport {
  std::vector<double> zetas;
  std::vector<double> acc;       // phrase-unit accuracy per zeta
  std::vector<double> acc_pair;  // (phrase, GT box) pair accuracy per zeta
  double one_to_many_rate{0.0};
  double mean_infer_ms{0.0};
  int n_steps{0};
  int n_infer{0};
  uint64_t seed{0};

  double acc_at(double zeta) const;
  // Ordered-key JSON; timing is omitted when include_timing is false so
  // reports can be compared for bitwise reproducibility.
  std::string to_json(bool include_timing = true) const;
};

// Scores one phrase: single-box phrases by top-1 IoU; multi-box phrases by
// top-k (k = GT count) selection, Hungarian matching on 1 - IoU and the
// ">= 50% of GT located" rule. Returns per-zeta {phrase_credit in {0,1},
// pair_credit in [0, GT count]}.
struct PhraseScore {
  std::vector<int> phrase_hits;  // per zeta
  std::vector<int> pair_hits;    // per zeta
};
PhraseScore score_phrase(const std::vector<Box>& cand_boxes, const Mat& scores,
                         int phrase, const std::vector<Box>& gt,
                         const std::vector<double>& zetas, double dedup_iou);

using DenoiserFactory = std::function<DenoiseFn(const GroundingSample&)>;

// Evaluation over a dataset with an arbitrary denoiser source (tests inject
// oracles). Per-sample RNG is derived from opt.seed and the sample index, so
// results are independent of evaluation order.
MetricsReport evaluate_with(const DenoiserFactory& factory,
                            const DiffusionSchedule& sched,
                            const std::vector<GroundingSample>& dataset,
                            const EvalOptions& opt);

MetricsReport evaluate(Denoiser& model, const DiffusionSchedule& sched,
                       const std::vector<GroundingSample>& dataset,
                       const EvalOptions& opt);

}  // namespace groundiff
