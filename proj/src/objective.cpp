#include "groundiff/objective.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace groundiff {

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();

// Jonker-Volgenant shortest augmenting path solver (exact), 1-based arrays.
std::vector<int> solve_lap(const Mat& cost) {
  int n = cost.rows, m = cost.cols;
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<int> p(m + 1, 0), way(m + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(m + 1, kInf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      int i0 = p[j0], j1 = -1;
      double delta = kInf;
      for (int j = 1; j <= m; ++j)
        if (!used[j]) {
          double cur = cost.at(i0 - 1, j - 1) - u[i0] - v[j];
          if (cur < minv[j]) {
            minv[j] = cur;
            way[j] = j0;
          }
          if (minv[j] < delta) {
            delta = minv[j];
            j1 = j;
          }
        }
      for (int j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> row_to_col(n, -1);
  for (int j = 1; j <= m; ++j)
    if (p[j]) row_to_col[p[j] - 1] = j - 1;
  return row_to_col;
}

double assignment_cost(const Mat& cost, const std::vector<int>& a) {
  double s = 0.0;
  for (int r = 0; r < cost.rows; ++r) s += cost.at(r, a[r]);
  return s;
}
}  // namespace

std::vector<int> hungarian(const Mat& cost) {
  int n = cost.rows, m = cost.cols;
  if (n > m) throw std::invalid_argument("hungarian: more rows than columns");
  if (n == 0) return {};
  for (double c : cost.d)
    if (!std::isfinite(c))
      throw std::invalid_argument("hungarian: non-finite cost");

  std::vector<int> best = solve_lap(cost);
  double opt = assignment_cost(cost, best);
  double tol = 1e-9 * (1.0 + std::abs(opt));

  // Lexicographic refinement: fix rows one at a time to the smallest column
  // that still admits an optimal completion of the remaining rows.
  std::vector<int> fixed(n, -1);
  std::vector<char> col_taken(m, 0);
  double fixed_cost = 0.0;
  for (int r = 0; r < n; ++r) {
    int chosen = -1;
    for (int c = 0; c < m && chosen < 0; ++c) {
      if (col_taken[c]) continue;
      if (c == best[r]) {
        // The incumbent optimum already uses this column; no smaller column
        // admitted an optimal completion, so this is the lexicographic pick.
        chosen = c;
        break;
      }
      // Try fixing row r -> c and solve the reduced problem.
      int rn = n - r - 1;
      if (rn == 0) {
        if (fixed_cost + cost.at(r, c) <= opt + tol) chosen = c;
        continue;
      }
      std::vector<int> colmap;
      colmap.reserve(m);
      for (int cc = 0; cc < m; ++cc)
        if (!col_taken[cc] && cc != c) colmap.push_back(cc);
      Mat sub(rn, static_cast<int>(colmap.size()));
      for (int rr = 0; rr < rn; ++rr)
        for (size_t cc = 0; cc < colmap.size(); ++cc)
          sub.at(rr, static_cast<int>(cc)) = cost.at(r + 1 + rr, colmap[cc]);
      std::vector<int> suba = solve_lap(sub);
      double total = fixed_cost + cost.at(r, c) + assignment_cost(sub, suba);
      if (total <= opt + tol) {
        chosen = c;
        // Adopt the completion as the incumbent optimum for later rows.
        best[r] = c;
        for (int rr = 0; rr < rn; ++rr) best[r + 1 + rr] = colmap[suba[rr]];
      }
    }
    fixed[r] = chosen;
    col_taken[chosen] = 1;
    fixed_cost += cost.at(r, chosen);
  }
  return fixed;
}

double smooth_l1(const Box& pred, const Box& gt,
                 const std::array<double, 4>& w) {
  double s = 0.0;
  for (int i = 0; i < 4; ++i) {
    double x = pred[i] - gt[i];
    double h = std::abs(x) < 1.0 ? 0.5 * x * x : std::abs(x) - 0.5;
    s += w[i] * h;
  }
  return s;
}

double match_cost(const Box& pred, const Box& gt, double alpha, double beta) {
  double l1 = 0.0;
  for (int i = 0; i < 4; ++i)
    l1 += kCoordWeights[i] * std::abs(pred[i] - gt[i]);
  return alpha * l1 + beta * (1.0 - giou(pred, gt));
}

Mat similarity_targets(const std::vector<Box>& boxes,
                       const std::vector<std::vector<Box>>& gt_sets) {
  Mat nu(static_cast<int>(boxes.size()), static_cast<int>(gt_sets.size()));
  for (size_t n = 0; n < boxes.size(); ++n)
    for (size_t i = 0; i < gt_sets.size(); ++i) {
      double best = 0.0;
      for (const Box& b : gt_sets[i])
        best = std::max(best, iou(boxes[n], b));
      nu.at(static_cast<int>(n), static_cast<int>(i)) = best;
    }
  return nu;
}

MatchAssignment match_proposals(const std::vector<Box>& preds,
                                const std::vector<int>& phrase_of,
                                const std::vector<std::vector<Box>>& gt_sets,
                                double alpha, double beta, bool partitioned) {
  MatchAssignment out;
  const int P = static_cast<int>(gt_sets.size());
  // Flat phrase-major GT indexing.
  std::vector<int> gt_base(P, 0);
  for (int i = 1; i < P; ++i)
    gt_base[i] = gt_base[i - 1] + static_cast<int>(gt_sets[i - 1].size());

  if (partitioned) {
    for (int i = 0; i < P; ++i) {
      std::vector<int> slots;
      for (size_t s = 0; s < phrase_of.size(); ++s)
        if (phrase_of[s] == i) slots.push_back(static_cast<int>(s));
      const auto& gts = gt_sets[i];
      if (gts.empty()) continue;
      if (slots.size() < gts.size())
        throw std::invalid_argument(
            "match_proposals: fewer slots than ground truth for a phrase");
      Mat cost(static_cast<int>(gts.size()), static_cast<int>(slots.size()));
      for (size_t r = 0; r < gts.size(); ++r)
        for (size_t c = 0; c < slots.size(); ++c)
          cost.at(static_cast<int>(r), static_cast<int>(c)) =
              match_cost(preds[slots[c]], gts[r], alpha, beta);
      auto sigma = hungarian(cost);
      for (size_t r = 0; r < gts.size(); ++r)
        out.pairs.emplace_back(gt_base[i] + static_cast<int>(r),
                               slots[sigma[r]]);
    }
  } else {
    std::vector<const Box*> all_gt;
    for (const auto& g : gt_sets)
      for (const auto& b : g) all_gt.push_back(&b);
    if (all_gt.empty()) return out;
    if (preds.size() < all_gt.size())
      throw std::invalid_argument(
          "match_proposals: fewer slots than ground truth");
    Mat cost(static_cast<int>(all_gt.size()), static_cast<int>(preds.size()));
    for (size_t r = 0; r < all_gt.size(); ++r)
      for (size_t c = 0; c < preds.size(); ++c)
        cost.at(static_cast<int>(r), static_cast<int>(c)) =
            match_cost(preds[c], *all_gt[r], alpha, beta);
    auto sigma = hungarian(cost);
    for (size_t r = 0; r < all_gt.size(); ++r)
      out.pairs.emplace_back(static_cast<int>(r), sigma[r]);
  }
  std::sort(out.pairs.begin(), out.pairs.end());
  return out;
}

int composite_loss_node(ad::Graph& g, int pred_node, int shat_node,
                        const MatchAssignment& assign,
                        const std::vector<std::vector<Box>>& gt_sets,
                        const Mat& nu, const LossWeights& w,
                        const std::vector<uint8_t>& phrase_mask,
                        LossBreakdown* out) {
  const int P = static_cast<int>(gt_sets.size());
  const int N = g.rows(pred_node);

  // Flat phrase-major GT table.
  std::vector<Box> flat_gt;
  for (const auto& s : gt_sets)
    for (const Box& b : s) flat_gt.push_back(b);

  int l1_node = -1, giou_node = -1;
  int n_match = assign.total();
  if (n_match > 0) {
    std::vector<int> slot_idx;
    Mat gt_m(n_match, 4);
    Mat wts(n_match, 4);
    for (int k = 0; k < n_match; ++k) {
      const auto& [gi, slot] = assign.pairs[k];
      slot_idx.push_back(slot);
      for (int c = 0; c < 4; ++c) {
        gt_m.at(k, c) = flat_gt[gi][c];
        wts.at(k, c) = kCoordWeights[c];
      }
    }
    int matched = g.gather_rows(pred_node, slot_idx);
    int gts = g.input(gt_m);
    int diff = g.sub(matched, gts);
    int hub = g.huber_elem(diff);
    int weighted = g.mul(hub, g.input(wts));
    l1_node = g.affine(g.sum_all(weighted), 1.0 / n_match, 0.0);
    int gv = g.giou_pairs(matched, gts);
    // (1 - giou) summed / n_match  ==  1 - sum(giou)/n_match.
    giou_node = g.affine(g.sum_all(gv), -1.0 / n_match, 1.0);
  } else {
    l1_node = g.input_scalar(0.0);
    giou_node = g.input_scalar(0.0);
  }

  // Similarity term: |S - nu| over unmasked entries / (N * P_real).
  int sim_node = -1;
  int p_real = 0;
  for (int i = 0; i < P; ++i)
    if (phrase_mask.empty() || phrase_mask[i]) ++p_real;
  if (P > 0 && p_real > 0) {
    int nu_in = g.input(nu);
    int ad = g.abs_elem(g.sub(shat_node, nu_in));
    if (!phrase_mask.empty() && p_real != P) {
      Mat m(N, P, 0.0);
      for (int r = 0; r < N; ++r)
        for (int c = 0; c < P; ++c)
          if (phrase_mask[c]) m.at(r, c) = 1.0;
      ad = g.mul(ad, g.input(m));
    }
    sim_node = g.affine(g.sum_all(ad), 1.0 / (static_cast<double>(N) * p_real),
                        0.0);
  } else {
    sim_node = g.input_scalar(0.0);
  }

  int total = g.add(g.add(g.affine(l1_node, w.alpha, 0.0),
                          g.affine(giou_node, w.beta, 0.0)),
                    g.affine(sim_node, w.lambda, 0.0));
  if (out) {
    out->l1_term = g.value(l1_node);
    out->giou_term = g.value(giou_node);
    out->sim_term = g.value(sim_node);
    out->total = g.value(total);
  }
  return total;
}

LossBreakdown composite_loss(const std::vector<Box>& preds, const Mat& shat,
                             const std::vector<std::vector<Box>>& gt_sets,
                             const Mat& nu, const MatchAssignment& assign,
                             const LossWeights& w,
                             const std::vector<uint8_t>& phrase_mask) {
  ad::Graph g;
  Mat pm(static_cast<int>(preds.size()), 4);
  for (size_t r = 0; r < preds.size(); ++r)
    for (int c = 0; c < 4; ++c) pm.at(static_cast<int>(r), c) = preds[r][c];
  LossBreakdown out;
  composite_loss_node(g, g.input(pm), g.input(shat), assign, gt_sets, nu, w,
                      phrase_mask, &out);
  return out;
}

}  // namespace groundiff
