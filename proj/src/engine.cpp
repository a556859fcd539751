#include "groundiff/engine.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <memory>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace groundiff {

namespace {

// The scene grid size is implied by the stored field and the channel count.
int infer_grid(const GroundingSample& s, int channels) {
  const size_t cells = s.field.size() / static_cast<size_t>(channels);
  const int G = static_cast<int>(std::lround(std::sqrt(static_cast<double>(cells))));
  if (static_cast<size_t>(G) * G * channels != s.field.size())
    throw EngineError("engine: field size does not match the model's channel count");
  return G;
}

Box row_box(const Mat& m, int r) {
  return Box{m.at(r, 0), m.at(r, 1), m.at(r, 2), m.at(r, 3)};
}

void set_row(Mat& m, int r, const Box& b) {
  for (int c = 0; c < 4; ++c) m.at(r, c) = b[c];
}

}  // namespace

// ----- Training -----

LossBreakdown train_step(Denoiser& model, ad::AdamW& opt,
                         const DiffusionSchedule& sched,
                         const std::vector<const GroundingSample*>& batch,
                         const TrainConfig& cfg, Rng& rng, double lr_now) {
  if (batch.empty()) throw EngineError("train_step: empty batch");
  const ModelConfig& mc = model.config();

  int p_max = 0;
  for (const GroundingSample* s : batch)
    p_max = std::max(p_max, static_cast<int>(s->gt.size()));

  model.params().zero_grad();
  ad::Graph g(&model.params());
  int total_node = -1;
  LossBreakdown mean{};
  std::vector<int> ts;
  ts.reserve(batch.size());

  for (const GroundingSample* s : batch) {
    const int P = static_cast<int>(s->gt.size());
    ProposalSet props = make_proposals(cfg.schema, s->gt, cfg.n_hat, rng);
    const int N = static_cast<int>(props.boxes.size());
    const int t = rng.uniform_int(sched.T);
    ts.push_back(t);

    Mat noisy_scaled(N, 4);
    std::vector<Box> noisy01(N);
    for (int n = 0; n < N; ++n) {
      const Box b0s = signal_scale_box(props.boxes[n], sched.scale);
      const Box eps{rng.normal(), rng.normal(), rng.normal(), rng.normal()};
      const Box bt = q_sample(b0s, t, eps, sched);
      set_row(noisy_scaled, n, bt);
      noisy01[n] = clamp_box(signal_unscale_box(bt, sched.scale));
    }

    const SceneFeatures feats =
        build_scene_features(s->field, infer_grid(*s, mc.channels), mc.channels);
    const Mat roi = roi_features(feats, noisy01, mc.roi_r);

    Mat pf(p_max, s->phrase_feats.cols, 0.0);
    std::vector<uint8_t> mask(p_max, 0);
    for (int i = 0; i < P; ++i) {
      mask[i] = 1;
      for (int j = 0; j < pf.cols; ++j) pf.at(i, j) = s->phrase_feats.at(i, j);
    }

    const auto f = model.build(g, roi, noisy_scaled, pf, double(t), mask);
    const int pred01 = g.affine(f.b0_scaled, 1.0 / (2.0 * sched.scale), 0.5);

    const auto& pv = g.val(pred01);
    std::vector<Box> preds(N);
    for (int n = 0; n < N; ++n)
      preds[n] = clamp_box(Box{pv[n * 4 + 0], pv[n * 4 + 1], pv[n * 4 + 2], pv[n * 4 + 3]});
    const MatchAssignment assign =
        match_proposals(preds, props.phrase_of, s->gt, cfg.weights.alpha,
                        cfg.weights.beta, cfg.partitioned);

    const Mat nu_real = similarity_targets(noisy01, s->gt);
    Mat nu(N, p_max, 0.0);
    for (int n = 0; n < N; ++n)
      for (int i = 0; i < P; ++i) nu.at(n, i) = nu_real.at(n, i);

    LossBreakdown bd;
    const int loss = composite_loss_node(g, pred01, f.shat, assign, s->gt, nu,
                                         cfg.weights, mask, &bd);
    total_node = total_node < 0 ? loss : g.add(total_node, loss);
    mean.l1_term += bd.l1_term;
    mean.giou_term += bd.giou_term;
    mean.sim_term += bd.sim_term;
    mean.total += bd.total;
  }

  const double inv_b = 1.0 / static_cast<double>(batch.size());
  const int mean_node = g.affine(total_node, inv_b, 0.0);
  mean.l1_term *= inv_b;
  mean.giou_term *= inv_b;
  mean.sim_term *= inv_b;
  mean.total *= inv_b;

  const double loss_val = g.value(mean_node);
  if (!std::isfinite(loss_val) || !std::isfinite(mean.l1_term) ||
      !std::isfinite(mean.giou_term) || !std::isfinite(mean.sim_term)) {
    std::ostringstream d;
    d << "train_step: non-finite loss (total=" << loss_val
      << ", l1=" << mean.l1_term << ", giou=" << mean.giou_term
      << ", sim=" << mean.sim_term << "); t=[";
    for (size_t i = 0; i < ts.size(); ++i) d << (i ? "," : "") << ts[i];
    d << "]; sample seeds=[";
    for (size_t i = 0; i < batch.size(); ++i)
      d << (i ? "," : "") << batch[i]->seed;
    d << "]; lr=" << lr_now;
    throw EngineError(d.str());
  }

  g.backward(mean_node);
  const double gn = model.params().grad_norm();
  if (!std::isfinite(gn)) {
    std::ostringstream d;
    d << "train_step: non-finite gradient norm after backward (loss="
      << loss_val << ", lr=" << lr_now << ")";
    throw EngineError(d.str());
  }
  opt.step(model.params(), lr_now);
  return mean;
}

FitResult fit(Denoiser& model, const DiffusionSchedule& sched,
              const std::vector<GroundingSample>& train,
              const TrainConfig& cfg,
              const std::function<void(const LossRow&)>& on_step) {
  if (train.empty()) throw EngineError("fit: empty training set");
  if (cfg.epochs < 1 || cfg.batch_size < 1)
    throw EngineError("fit: epochs and batch_size must be positive");

  ad::AdamW opt;
  opt.lr = cfg.lr;
  opt.beta1 = cfg.beta1;
  opt.beta2 = cfg.beta2;
  opt.weight_decay = cfg.weight_decay;
  opt.clip_norm = cfg.clip_norm;

  Rng rng(substream(cfg.seed, 0x545241494eULL));
  const int n = static_cast<int>(train.size());
  const int64_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const int64_t total_steps = steps_per_epoch * cfg.epochs;
  const int64_t warmup_steps = steps_per_epoch * cfg.warmup_epochs;

  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);

  FitResult res;
  res.history.reserve(static_cast<size_t>(total_steps));
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (int i = n - 1; i > 0; --i)
      std::swap(order[i], order[rng.uniform_int(i + 1)]);
    for (int b = 0; b < n; b += cfg.batch_size) {
      std::vector<const GroundingSample*> batch;
      for (int i = b; i < std::min(n, b + cfg.batch_size); ++i)
        batch.push_back(&train[order[i]]);
      const double lr_now = ad::lr_schedule(res.steps, total_steps,
                                            warmup_steps, cfg.lr, cfg.min_lr);
      const LossBreakdown bd = train_step(model, opt, sched, batch, cfg, rng, lr_now);
      LossRow row{epoch, res.steps, lr_now, bd};
      res.history.push_back(row);
      if (on_step) on_step(row);
      ++res.steps;
    }
  }
  return res;
}

Denoiser make_denoiser(const ModelConfig& cfg, uint64_t seed) {
  Denoiser model(cfg);
  Rng rng(substream(seed, 0x494e4954ull));
  model.init_params(rng);
  return model;
}

// ----- Inference -----

DenoiseFn make_model_denoiser(Denoiser& model, const GroundingSample& sample,
                              std::vector<uint8_t> phrase_mask,
                              double scale) {
  struct State {
    SceneFeatures feats;
    Mat pf;
    std::vector<uint8_t> mask;
  };
  auto st = std::make_shared<State>();
  st->feats = build_scene_features(sample.field,
                                   infer_grid(sample, model.config().channels),
                                   model.config().channels);
  st->pf = sample.phrase_feats;
  st->mask = std::move(phrase_mask);
  return [&model, st, scale](const Mat& noisy_scaled, int t, Mat& b0, Mat& shat) {
    const int N = noisy_scaled.rows;
    std::vector<Box> b01(N);
    for (int n = 0; n < N; ++n)
      b01[n] = clamp_box(signal_unscale_box(row_box(noisy_scaled, n), scale));
    const Mat roi = roi_features(st->feats, b01, model.config().roi_r);
    ad::Graph g(&model.params());
    const auto f = model.build(g, roi, noisy_scaled, st->pf, double(t), st->mask);
    b0 = Mat(N, 4);
    std::copy(g.val(f.b0_scaled).begin(), g.val(f.b0_scaled).end(), b0.d.begin());
    shat = Mat(N, st->pf.rows);
    if (f.shat >= 0)
      std::copy(g.val(f.shat).begin(), g.val(f.shat).end(), shat.d.begin());
  };
}

InferenceResult infer(const DenoiseFn& fn, const DiffusionSchedule& sched,
                      const InferOptions& opt, Rng& rng) {
  if (opt.n_steps < 1) throw EngineError("infer: n_steps must be >= 1");
  if (opt.n_infer < 1) throw EngineError("infer: n_infer must be >= 1");
  const TimestepPlan plan = make_timestep_plan(opt.n_steps, sched.T);

  const std::vector<Box> init = gaussian_proposals(opt.n_infer, rng, sched.scale);
  Mat noisy(opt.n_infer, 4);
  for (int n = 0; n < opt.n_infer; ++n) set_row(noisy, n, init[n]);

  InferenceResult res;
  std::vector<double> pooled_scores;
  const auto clock0 = std::chrono::steady_clock::now();
  Mat b0, shat;
  std::vector<Box> step01(opt.n_infer);
  for (const auto& [t_cur, t_next] : plan) {
    fn(noisy, t_cur, b0, shat);
    if (b0.rows != opt.n_infer || b0.cols != 4)
      throw EngineError("infer: denoiser returned a bad b0 shape");
    for (int n = 0; n < opt.n_infer; ++n)
      step01[n] = clamp_box(signal_unscale_box(row_box(b0, n), sched.scale));
    res.trajectory.push_back(step01);
    if (opt.ensemble) {
      res.boxes.insert(res.boxes.end(), step01.begin(), step01.end());
      pooled_scores.insert(pooled_scores.end(), shat.d.begin(), shat.d.end());
    }
    for (int n = 0; n < opt.n_infer; ++n) {
      const Box b0c = clamp_signal_box(row_box(b0, n), sched.scale);
      const Box bt = row_box(noisy, n);
      set_row(noisy, n,
              opt.sampler == Sampler::ddim
                  ? ddim_step(bt, b0c, t_cur, t_next, sched)
                  : ddpm_step(bt, b0c, t_cur, t_next, sched, rng));
    }
  }
  const auto clock1 = std::chrono::steady_clock::now();
  res.infer_ms =
      std::chrono::duration<double, std::milli>(clock1 - clock0).count();

  if (opt.ensemble) {
    res.scores = Mat(static_cast<int>(res.boxes.size()), shat.cols);
    res.scores.d = std::move(pooled_scores);
  } else {
    res.boxes = step01;
    res.scores = shat;
  }
  return res;
}

// ----- Selection -----

Sampler parse_sampler(const std::string& name) {
  if (name == "ddim") return Sampler::ddim;
  if (name == "ddpm") return Sampler::ddpm;
  throw std::invalid_argument("unknown sampler: " + name);
}

std::string sampler_name(Sampler s) {
  return s == Sampler::ddim ? "ddim" : "ddpm";
}

SelectMode parse_select_mode(const std::string& name) {
  if (name == "top1") return SelectMode::top1;
  if (name == "topk") return SelectMode::topk;
  if (name == "threshold") return SelectMode::threshold;
  throw std::invalid_argument("unknown selection mode: " + name);
}

std::string select_mode_name(SelectMode m) {
  switch (m) {
    case SelectMode::top1: return "top1";
    case SelectMode::topk: return "topk";
    default: return "threshold";
  }
}

std::vector<int> nms(const std::vector<Box>& boxes,
                     const std::vector<double>& scores, double iou_thresh) {
  if (boxes.size() != scores.size())
    throw std::invalid_argument("nms: boxes/scores length mismatch");
  std::vector<int> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });
  std::vector<int> kept;
  for (int i : order) {
    bool keep = true;
    for (int j : kept) {
      if (iou(boxes[i], boxes[j]) > iou_thresh) {
        keep = false;
        break;
      }
    }
    if (keep) kept.push_back(i);
  }
  return kept;
}

std::vector<std::vector<int>> select_predictions(const std::vector<Box>& boxes,
                                                 const Mat& scores,
                                                 SelectMode mode, double k_or_tau,
                                                 double dedup_iou) {
  const int n = static_cast<int>(boxes.size());
  if (scores.rows != n)
    throw std::invalid_argument("select_predictions: score rows != box count");
  const int p = scores.cols;
  std::vector<std::vector<int>> out(p);
  std::vector<double> col(n);
  for (int i = 0; i < p; ++i) {
    for (int r = 0; r < n; ++r) col[r] = scores.at(r, i);
    if (mode == SelectMode::top1) {
      int best = 0;
      for (int r = 1; r < n; ++r)
        if (col[r] > col[best]) best = r;
      out[i] = {best};
      continue;
    }
    const std::vector<int> kept = nms(boxes, col, dedup_iou);
    if (mode == SelectMode::topk) {
      const int k = std::max(0, static_cast<int>(std::lround(k_or_tau)));
      for (int j : kept) {
        if (static_cast<int>(out[i].size()) == k) break;
        out[i].push_back(j);
      }
    } else {
      for (int j : kept)
        if (col[j] >= k_or_tau) out[i].push_back(j);
    }
  }
  return out;
}

// ----- Evaluation -----

PhraseScore score_phrase(const std::vector<Box>& cand_boxes, const Mat& scores,
                         int phrase, const std::vector<Box>& gt,
                         const std::vector<double>& zetas, double dedup_iou) {
  const int Z = static_cast<int>(zetas.size());
  const int Ni = static_cast<int>(gt.size());
  PhraseScore ps;
  ps.phrase_hits.assign(Z, 0);
  ps.pair_hits.assign(Z, 0);
  if (Ni == 1) {
    int best = 0;
    for (int r = 1; r < static_cast<int>(cand_boxes.size()); ++r)
      if (scores.at(r, phrase) > scores.at(best, phrase)) best = r;
    const double v = iou(cand_boxes[best], gt[0]);
    for (int z = 0; z < Z; ++z) {
      ps.phrase_hits[z] = v > zetas[z] ? 1 : 0;
      ps.pair_hits[z] = ps.phrase_hits[z];
    }
    return ps;
  }
  // One-to-many: top-k at the oracle count, Hungarian on 1 - IoU.
  std::vector<double> col(cand_boxes.size());
  for (size_t r = 0; r < cand_boxes.size(); ++r) col[r] = scores.at(static_cast<int>(r), phrase);
  std::vector<int> sel;
  for (int j : nms(cand_boxes, col, dedup_iou)) {
    if (static_cast<int>(sel.size()) == Ni) break;
    sel.push_back(j);
  }
  Mat cost(static_cast<int>(sel.size()), Ni);
  for (int r = 0; r < cost.rows; ++r)
    for (int c = 0; c < Ni; ++c)
      cost.at(r, c) = 1.0 - iou(cand_boxes[sel[r]], gt[c]);
  const std::vector<int> match = hungarian(cost);
  for (int r = 0; r < cost.rows; ++r) {
    const double v = iou(cand_boxes[sel[r]], gt[match[r]]);
    for (int z = 0; z < Z; ++z)
      if (v > zetas[z]) ++ps.pair_hits[z];
  }
  for (int z = 0; z < Z; ++z)
    ps.phrase_hits[z] = 2 * ps.pair_hits[z] >= Ni ? 1 : 0;
  return ps;
}

MetricsReport evaluate_with(const DenoiserFactory& factory,
                            const DiffusionSchedule& sched,
                            const std::vector<GroundingSample>& dataset,
                            const EvalOptions& opt) {
  if (dataset.empty()) throw EngineError("evaluate: empty dataset");
  if (opt.zetas.empty()) throw EngineError("evaluate: empty zeta list");
  for (double z : opt.zetas)
    if (!(z > 0.0 && z < 1.0))
      throw EngineError("evaluate: zeta values must lie in (0, 1)");

  const int Z = static_cast<int>(opt.zetas.size());
  std::vector<int64_t> phrase_hits(Z, 0), pair_hits(Z, 0);
  int64_t phrase_total = 0, pair_total = 0, one_to_many = 0;
  double ms_sum = 0.0;

  InferOptions io;
  io.n_steps = opt.n_steps;
  io.n_infer = opt.n_infer;
  io.ensemble = opt.ensemble;
  io.nms_iou = opt.nms_iou;
  io.sampler = opt.sampler;

  for (size_t i = 0; i < dataset.size(); ++i) {
    const GroundingSample& s = dataset[i];
    Rng rng(substream(opt.seed, 0x4556414cULL, static_cast<uint64_t>(i)));
    const DenoiseFn fn = factory(s);
    const InferenceResult res = infer(fn, sched, io, rng);
    ms_sum += res.infer_ms;
    for (size_t p = 0; p < s.gt.size(); ++p) {
      const int Ni = static_cast<int>(s.gt[p].size());
      const PhraseScore ps = score_phrase(res.boxes, res.scores,
                                          static_cast<int>(p), s.gt[p],
                                          opt.zetas, opt.nms_iou);
      for (int z = 0; z < Z; ++z) {
        phrase_hits[z] += ps.phrase_hits[z];
        pair_hits[z] += ps.pair_hits[z];
      }
      ++phrase_total;
      pair_total += Ni;
      if (Ni > 1) ++one_to_many;
    }
  }

  MetricsReport rep;
  rep.zetas = opt.zetas;
  rep.acc.resize(Z);
  rep.acc_pair.resize(Z);
  for (int z = 0; z < Z; ++z) {
    rep.acc[z] = double(phrase_hits[z]) / double(phrase_total);
    rep.acc_pair[z] = double(pair_hits[z]) / double(pair_total);
  }
  rep.one_to_many_rate = double(one_to_many) / double(phrase_total);
  rep.mean_infer_ms = ms_sum / double(dataset.size());
  rep.n_steps = opt.n_steps;
  rep.n_infer = opt.n_infer;
  rep.seed = opt.seed;
  return rep;
}

MetricsReport evaluate(Denoiser& model, const DiffusionSchedule& sched,
                       const std::vector<GroundingSample>& dataset,
                       const EvalOptions& opt) {
  return evaluate_with(
      [&model, &sched](const GroundingSample& s) {
        return make_model_denoiser(model, s, {}, sched.scale);
      },
      sched, dataset, opt);
}

double MetricsReport::acc_at(double zeta) const {
  for (size_t i = 0; i < zetas.size(); ++i)
    if (std::abs(zetas[i] - zeta) < 1e-12) return acc[i];
  throw std::invalid_argument("MetricsReport: zeta not evaluated");
}

std::string MetricsReport::to_json(bool include_timing) const {
  nlohmann::ordered_json j;
  char key[32];
  for (size_t i = 0; i < zetas.size(); ++i) {
    std::snprintf(key, sizeof key, "acc@%g", zetas[i]);
    j[key] = acc[i];
  }
  for (size_t i = 0; i < zetas.size(); ++i) {
    std::snprintf(key, sizeof key, "acc_pair@%g", zetas[i]);
    j[key] = acc_pair[i];
  }
  j["one_to_many_rate"] = one_to_many_rate;
  if (include_timing) j["mean_infer_ms"] = mean_infer_ms;
  j["n_steps"] = n_steps;
  j["n_hat_infer"] = n_infer;
  j["seed"] = seed;
  return j.dump();
}

}  // namespace groundiff
