#pragma once

#include <vector>

#include "groundiff/geometry.hpp"
#include "groundiff/rng.hpp"

namespace groundiff {

enum class ProposalSchema { phrase_balanced, random_oversample, random_generation };

ProposalSchema parse_schema(const std::string& name);
std::string schema_name(ProposalSchema s);

// Fixed-size training box set: n_hat boxes, each tagged with the phrase it
// was drawn for.
struct ProposalSet {
  std::vector<Box> boxes;       // cxcywh in [0,1]
  std::vector<int> phrase_of;   // same length, values in [0, P)
  ProposalSchema schema{ProposalSchema::phrase_balanced};
};

// Pads per-phrase ground truth up to n_hat boxes so each phrase holds
// floor(n_hat/P) or ceil(n_hat/P) proposals; the remainder goes to the lowest
// phrase indices. Duplicates are drawn uniformly from the phrase with the
// smallest current count.
ProposalSet phrase_balanced_pad(const std::vector<std::vector<Box>>& gt,
                                int n_hat, Rng& rng);

// Pads by duplicating uniformly from the pooled ground truth (keeping each
// copy's phrase label).
ProposalSet random_oversample_pad(const std::vector<std::vector<Box>>& gt,
                                  int n_hat, Rng& rng);

// Keeps ground truth and fills the remainder with uniform random boxes whose
// phrase labels are assigned round-robin.
ProposalSet random_generation_pad(const std::vector<std::vector<Box>>& gt,
                                  int n_hat, Rng& rng);

ProposalSet make_proposals(ProposalSchema schema,
                           const std::vector<std::vector<Box>>& gt, int n_hat,
                           Rng& rng);

// Inference-time proposals: i.i.d. standard normal 4-vectors clamped to the
// signal range.
std::vector<Box> gaussian_proposals(int n_infer, Rng& rng,
                                    double scale = kSignalScale);

}  // namespace groundiff
