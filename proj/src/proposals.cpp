#include "groundiff/proposals.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

namespace groundiff {

ProposalSchema parse_schema(const std::string& name) {
  if (name == "phrase_balanced") return ProposalSchema::phrase_balanced;
  if (name == "random_oversample") return ProposalSchema::random_oversample;
  if (name == "random_generation") return ProposalSchema::random_generation;
  throw std::invalid_argument("unknown proposal schema: " + name);
}

std::string schema_name(ProposalSchema s) {
  switch (s) {
    case ProposalSchema::phrase_balanced: return "phrase_balanced";
    case ProposalSchema::random_oversample: return "random_oversample";
    case ProposalSchema::random_generation: return "random_generation";
  }
  return "?";
}

static void check_gt(const std::vector<std::vector<Box>>& gt, int n_hat) {
  if (gt.empty()) throw std::invalid_argument("proposals: empty phrase set");
  size_t total = 0;
  for (const auto& g : gt) {
    if (g.empty())
      throw std::invalid_argument("proposals: phrase with no ground truth");
    total += g.size();
  }
  if (static_cast<size_t>(n_hat) < total)
    throw std::invalid_argument("proposals: n_hat below total ground truth");
}

ProposalSet phrase_balanced_pad(const std::vector<std::vector<Box>>& gt,
                                int n_hat, Rng& rng) {
  check_gt(gt, n_hat);
  const int P = static_cast<int>(gt.size());
  // Start from ground truth, then top up the phrase with the smallest count
  // (ties to the lowest index). Since the target quotas are floor(n_hat/P)
  // with the remainder on the lowest indices — a nonincreasing sequence —
  // this lands every phrase exactly on its quota whenever reachable.
  std::vector<std::vector<Box>> pool(P);
  for (int p = 0; p < P; ++p) pool[p] = gt[p];
  int total = 0;
  for (int p = 0; p < P; ++p) total += static_cast<int>(pool[p].size());
  while (total < n_hat) {
    int pick = 0;
    size_t best = pool[0].size();
    for (int p = 1; p < P; ++p) {
      if (pool[p].size() < best) {
        best = pool[p].size();
        pick = p;
      }
    }
    const auto& src = gt[pick];
    pool[pick].push_back(src[rng.uniform_int(static_cast<int>(src.size()))]);
    ++total;
  }

  ProposalSet out;
  out.schema = ProposalSchema::phrase_balanced;
  for (int p = 0; p < P; ++p)
    for (const Box& b : pool[p]) {
      out.boxes.push_back(b);
      out.phrase_of.push_back(p);
    }
  return out;
}

ProposalSet random_oversample_pad(const std::vector<std::vector<Box>>& gt,
                                  int n_hat, Rng& rng) {
  check_gt(gt, n_hat);
  ProposalSet out;
  out.schema = ProposalSchema::random_oversample;
  std::vector<std::pair<Box, int>> pooled;
  for (size_t p = 0; p < gt.size(); ++p)
    for (const Box& b : gt[p]) pooled.emplace_back(b, static_cast<int>(p));
  for (const auto& [b, p] : pooled) {
    out.boxes.push_back(b);
    out.phrase_of.push_back(p);
  }
  while (static_cast<int>(out.boxes.size()) < n_hat) {
    const auto& [b, p] = pooled[rng.uniform_int(static_cast<int>(pooled.size()))];
    out.boxes.push_back(b);
    out.phrase_of.push_back(p);
  }
  return out;
}

ProposalSet random_generation_pad(const std::vector<std::vector<Box>>& gt,
                                  int n_hat, Rng& rng) {
  check_gt(gt, n_hat);
  ProposalSet out;
  out.schema = ProposalSchema::random_generation;
  for (size_t p = 0; p < gt.size(); ++p)
    for (const Box& b : gt[p]) {
      out.boxes.push_back(b);
      out.phrase_of.push_back(static_cast<int>(p));
    }
  const int P = static_cast<int>(gt.size());
  int next_phrase = 0;
  while (static_cast<int>(out.boxes.size()) < n_hat) {
    double w = rng.uniform(kBoxEps, 1.0);
    double h = rng.uniform(kBoxEps, 1.0);
    double cx = rng.uniform(w / 2.0, 1.0 - w / 2.0);
    double cy = rng.uniform(h / 2.0, 1.0 - h / 2.0);
    out.boxes.push_back({cx, cy, w, h});
    out.phrase_of.push_back(next_phrase);
    next_phrase = (next_phrase + 1) % P;
  }
  return out;
}

ProposalSet make_proposals(ProposalSchema schema,
                           const std::vector<std::vector<Box>>& gt, int n_hat,
                           Rng& rng) {
  switch (schema) {
    case ProposalSchema::phrase_balanced:
      return phrase_balanced_pad(gt, n_hat, rng);
    case ProposalSchema::random_oversample:
      return random_oversample_pad(gt, n_hat, rng);
    case ProposalSchema::random_generation:
      return random_generation_pad(gt, n_hat, rng);
  }
  throw std::logic_error("make_proposals: bad schema");
}

std::vector<Box> gaussian_proposals(int n_infer, Rng& rng, double scale) {
  if (n_infer < 1)
    throw std::invalid_argument("gaussian_proposals: n_infer < 1");
  std::vector<Box> out(static_cast<size_t>(n_infer));
  for (auto& b : out)
    for (int i = 0; i < 4; ++i) b[i] = clamp(rng.normal(), -scale, scale);
  return out;
}

}  // namespace groundiff
