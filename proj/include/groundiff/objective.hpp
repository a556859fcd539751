#pragma once

#include <utility>
#include <vector>

#include "groundiff/autodiff.hpp"
#include "groundiff/geometry.hpp"
#include "groundiff/util.hpp"

namespace groundiff {

// Exact minimum-cost injective assignment of rows to columns (n <= m).
// Among equal-cost optima, returns the lexicographically smallest map
// (sigma(0), sigma(1), ...).
std::vector<int> hungarian(const Mat& cost);

inline constexpr std::array<double, 4> kCoordWeights{2.0, 2.0, 1.0, 1.0};

// Per-coordinate Huber (delta = 1), weighted and summed.
double smooth_l1(const Box& pred, const Box& gt,
                 const std::array<double, 4>& w = kCoordWeights);

// Matching cost: alpha * weighted-L1 + beta * (1 - giou).
double match_cost(const Box& pred, const Box& gt, double alpha = 2.0,
                  double beta = 5.0);

// nu[n][i] = max IoU between box n and any ground-truth box of phrase i.
// Boxes must already be in [0,1] cxcywh coordinates.
Mat similarity_targets(const std::vector<Box>& boxes,
                       const std::vector<std::vector<Box>>& gt_sets);

// Injective per-phrase matching of ground truth into proposal slots.
struct MatchAssignment {
  // (gt flat index, proposal slot) pairs; gt flat order is phrase-major.
  std::vector<std::pair<int, int>> pairs;
  int total() const { return static_cast<int>(pairs.size()); }
};

// Match each phrase's GT boxes into that phrase's proposal slots by minimal
// match_cost. With partitioned = false, matches all GT against all slots
// jointly (ablation path).
MatchAssignment match_proposals(const std::vector<Box>& preds,
                                const std::vector<int>& phrase_of,
                                const std::vector<std::vector<Box>>& gt_sets,
                                double alpha = 2.0, double beta = 5.0,
                                bool partitioned = true);

struct LossWeights {
  double alpha{2.0};   // smooth-l1 coefficient
  double beta{5.0};    // giou coefficient
  double lambda{1.0};  // similarity coefficient
};

struct LossBreakdown {
  double l1_term{0.0};
  double giou_term{0.0};
  double sim_term{0.0};
  double total{0.0};
};

// Differentiable composite loss assembled on `g`:
//   total = alpha * L1_box + beta * (1 - giou) + lambda * |S - nu| terms,
// box terms averaged over matched pairs, similarity averaged over the
// unmasked N x P entries. pred_node is N x 4 in [0,1] cxcywh (unclamped),
// shat_node is N x P. Returns the scalar node; fills `out` from the forward
// values. phrase_mask (size P, 1 = real) may be empty for all-real.
int composite_loss_node(ad::Graph& g, int pred_node, int shat_node,
                        const MatchAssignment& assign,
                        const std::vector<std::vector<Box>>& gt_sets,
                        const Mat& nu, const LossWeights& w,
                        const std::vector<uint8_t>& phrase_mask,
                        LossBreakdown* out);

// Non-differentiable convenience wrapper over the same graph assembly.
LossBreakdown composite_loss(const std::vector<Box>& preds, const Mat& shat,
                             const std::vector<std::vector<Box>>& gt_sets,
                             const Mat& nu, const MatchAssignment& assign,
                             const LossWeights& w,
                             const std::vector<uint8_t>& phrase_mask = {});

}  // namespace groundiff
