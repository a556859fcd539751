// groundiff command-line driver: data generation, training, inference,
// evaluation, ablations and trajectory plots over one shared config format.
#include <cinttypes>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "groundiff/config.hpp"
#include "groundiff/engine.hpp"
#include "groundiff/model.hpp"
#include "groundiff/synthetic.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;
using namespace groundiff;

namespace {

// Provenance block embedded in every artifact this binary writes.
ordered_json provenance(const RunConfig& cfg) {
  ordered_json p;
  p["config_hash"] = cfg.hash();
  p["seed"] = cfg.train.seed;
  p["git"] = git_revision();
  return p;
}

std::vector<double> parse_zeta_csv(const std::string& csv) {
  std::vector<double> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    size_t used = 0;
    double z = std::stod(item, &used);
    if (used != item.size())
      throw std::runtime_error("bad --zeta entry: " + item);
    out.push_back(z);
  }
  if (out.empty()) throw std::runtime_error("--zeta list is empty");
  for (double z : out)
    if (!(z > 0.0 && z < 1.0))
      throw std::runtime_error("--zeta values must lie in (0, 1)");
  return out;
}

// A trained model plus everything needed to run it, rebuilt from checkpoint
// metadata so inference never depends on the caller's config file.
struct LoadedModel {
  RunConfig cfg;  // the exact config the model was trained with
  Denoiser model;
};

LoadedModel load_model(const std::string& ckpt_path) {
  const json meta = json::parse(peek_checkpoint_meta(ckpt_path));
  RunConfig cfg = parse_config(meta.at("config").dump());
  LoadedModel lm{cfg, Denoiser(cfg.model)};
  load_checkpoint(ckpt_path, lm.model.params());
  return lm;
}

std::vector<GroundingSample> load_matching_dataset(const std::string& path,
                                                   const SceneConfig& want,
                                                   const char* what) {
  auto [dcfg, samples] = load_dataset(path);
  if (!(dcfg == want))
    throw std::runtime_error(std::string(what) + ": dataset " + path +
                             " was generated with a different data config");
  if (samples.empty())
    throw std::runtime_error(std::string(what) + ": dataset " + path +
                             " holds no scenes");
  return samples;
}

// Flags shared by infer/eval that override the values stored in the
// checkpoint config. -1 / empty mean "keep".
struct InferOverrides {
  int steps{-1};
  int proposals{-1};
  std::string ensemble;  // "", "on", "off"
  std::string sampler;   // "", "ddim", "ddpm"
};

void apply_overrides(RunConfig& cfg, const InferOverrides& ov) {
  if (ov.steps > 0) cfg.infer.n_steps = ov.steps;
  if (ov.proposals > 0) cfg.infer.n_infer = ov.proposals;
  if (!ov.ensemble.empty()) {
    if (ov.ensemble != "on" && ov.ensemble != "off")
      throw std::runtime_error("--ensemble must be 'on' or 'off'");
    cfg.infer.ensemble = ov.ensemble == "on";
  }
  if (!ov.sampler.empty()) cfg.infer.sampler = parse_sampler(ov.sampler);
}

// ----- gen-data -----

int cmd_gen_data(const std::string& config_path, const std::string& out,
                 int n, int64_t offset) {
  RunConfig cfg = load_config_or_default(config_path);
  const int count = n > 0 ? n : cfg.n_train;
  const auto samples =
      gen_dataset(cfg.scene, count, cfg.train.seed, static_cast<uint64_t>(offset));
  save_dataset(out, cfg.scene, samples, provenance(cfg).dump());
  std::printf("gen-data: wrote %d scenes to %s (seed %" PRIu64
              ", offset %" PRIi64 ")\n",
              count, out.c_str(), cfg.train.seed, offset);
  return 0;
}

// ----- train -----

int cmd_train(const std::string& config_path, const std::string& data_path,
              const std::string& out_dir) {
  RunConfig cfg = load_config_or_default(config_path);
  const auto train_set =
      load_matching_dataset(data_path, cfg.scene, "train");
  fs::create_directories(out_dir);

  const DiffusionSchedule sched = cfg.make_schedule();
  Denoiser model = make_denoiser(cfg.model, cfg.train.seed);
  std::printf("train: %zu scenes, %d epochs, %zu parameters\n",
              train_set.size(), cfg.train.epochs, model.param_count());
  std::fflush(stdout);

  std::string csv = "epoch,step,lr,l1,giou,sim,total\n";
  int last_epoch = -1;
  const FitResult res =
      fit(model, sched, train_set, cfg.train, [&](const LossRow& r) {
        char line[256];
        std::snprintf(line, sizeof line,
                      "%d,%" PRIi64 ",%.10g,%.10g,%.10g,%.10g,%.10g\n",
                      r.epoch, r.step, r.lr, r.loss.l1_term, r.loss.giou_term,
                      r.loss.sim_term, r.loss.total);
        csv += line;
        if (r.epoch != last_epoch) {
          last_epoch = r.epoch;
          std::fprintf(stderr, "  epoch %3d  lr %.3g  loss %.4f\n", r.epoch,
                       r.lr, r.loss.total);
        }
      });

  const std::string ckpt = (fs::path(out_dir) / "model.ckpt").string();
  ordered_json meta;
  meta["config"] = ordered_json::parse(cfg.to_json());
  meta["config_hash"] = cfg.hash();
  meta["seed"] = cfg.train.seed;
  meta["git"] = git_revision();
  save_checkpoint(ckpt, model.params(), meta.dump());
  write_text_atomic((fs::path(out_dir) / "loss.csv").string(), csv);

  const double final_loss =
      res.history.empty() ? 0.0 : res.history.back().loss.total;
  std::printf("train: %" PRIi64 " steps, final loss %.6f -> %s\n", res.steps,
              final_loss, ckpt.c_str());
  return 0;
}

// ----- infer -----

int cmd_infer(const std::string& ckpt_path, const std::string& data_path,
              const InferOverrides& ov, const std::string& traj_out,
              const std::string& out_path, int limit) {
  LoadedModel lm = load_model(ckpt_path);
  apply_overrides(lm.cfg, ov);
  apply_env_seed(lm.cfg);
  auto samples = load_matching_dataset(data_path, lm.cfg.scene, "infer");
  if (limit > 0 && static_cast<size_t>(limit) < samples.size())
    samples.resize(limit);

  const DiffusionSchedule sched = lm.cfg.make_schedule();
  const InferOptions opt = lm.cfg.infer;

  ordered_json report;
  report["provenance"] = provenance(lm.cfg);
  report["n_steps"] = opt.n_steps;
  report["n_hat_infer"] = opt.n_infer;
  report["ensemble"] = opt.ensemble;
  report["sampler"] = sampler_name(opt.sampler);
  ordered_json recs = ordered_json::array();

  double total_ms = 0.0;
  for (size_t i = 0; i < samples.size(); ++i) {
    const GroundingSample& s = samples[i];
    const DenoiseFn fn = make_model_denoiser(lm.model, s, {}, sched.scale);
    Rng rng(substream(lm.cfg.train.seed, 0x4556414cULL, i));
    const InferenceResult r = infer(fn, sched, opt, rng);
    total_ms += r.infer_ms;
    const auto picks =
        select_predictions(r.boxes, r.scores, lm.cfg.select_mode,
                           lm.cfg.select_k_or_tau, opt.nms_iou);

    ordered_json rec;
    rec["index"] = i;
    ordered_json phrases = ordered_json::array();
    for (size_t p = 0; p < picks.size(); ++p) {
      ordered_json preds = ordered_json::array();
      for (int idx : picks[p]) {
        const Box& b = r.boxes[idx];
        preds.push_back({{"box", {b[0], b[1], b[2], b[3]}},
                         {"score", r.scores.at(idx, static_cast<int>(p))}});
      }
      phrases.push_back(preds);
    }
    rec["predictions"] = phrases;
    recs.push_back(rec);

    if (i == 0 && !traj_out.empty()) {
      ordered_json traj;
      traj["provenance"] = provenance(lm.cfg);
      traj["n_steps"] = opt.n_steps;
      traj["boxes_per_step"] = opt.n_infer;
      ordered_json gt = ordered_json::array();
      for (const auto& phrase_boxes : s.gt)
        for (const Box& b : phrase_boxes)
          gt.push_back({b[0], b[1], b[2], b[3]});
      traj["gt"] = gt;
      ordered_json steps = ordered_json::array();
      for (const auto& snap : r.trajectory) {
        ordered_json step = ordered_json::array();
        for (const Box& b : snap) step.push_back({b[0], b[1], b[2], b[3]});
        steps.push_back(step);
      }
      traj["steps"] = steps;
      write_text_atomic(traj_out, traj.dump(2) + "\n");
      std::printf("infer: wrote trajectory of scene 0 to %s\n",
                  traj_out.c_str());
    }
  }
  report["mean_infer_ms"] = total_ms / static_cast<double>(samples.size());
  report["samples"] = recs;

  if (!out_path.empty()) {
    write_text_atomic(out_path, report.dump(2) + "\n");
    std::printf("infer: wrote predictions for %zu scenes to %s\n",
                samples.size(), out_path.c_str());
  } else {
    std::printf("infer: %zu scenes, %d steps, mean %.2f ms/scene\n",
                samples.size(), opt.n_steps,
                total_ms / static_cast<double>(samples.size()));
  }
  return 0;
}

// ----- eval -----

int cmd_eval(const std::string& ckpt_path, const std::string& data_path,
             const std::string& zeta_csv, const std::string& report_path,
             const InferOverrides& ov) {
  LoadedModel lm = load_model(ckpt_path);
  apply_overrides(lm.cfg, ov);
  apply_env_seed(lm.cfg);
  if (!zeta_csv.empty()) lm.cfg.zetas = parse_zeta_csv(zeta_csv);
  const auto samples = load_matching_dataset(data_path, lm.cfg.scene, "eval");

  const DiffusionSchedule sched = lm.cfg.make_schedule();
  const MetricsReport rep =
      evaluate(lm.model, sched, samples, lm.cfg.make_eval_options());

  ordered_json out = ordered_json::parse(rep.to_json());
  out["config_hash"] = lm.cfg.hash();
  out["git"] = git_revision();
  write_text_atomic(report_path, out.dump(2) + "\n");

  for (size_t z = 0; z < rep.zetas.size(); ++z)
    std::printf("eval: acc@%g = %.4f  (pair %.4f)\n", rep.zetas[z],
                rep.acc[z], rep.acc_pair[z]);
  std::printf("eval: %zu scenes, mean %.2f ms/scene -> %s\n", samples.size(),
              rep.mean_infer_ms, report_path.c_str());
  return 0;
}

// ----- ablate -----

int cmd_ablate(const std::string& axis, const std::string& config_path,
               const std::string& report_path, const std::string& data_path,
               const std::string& eval_data_path) {
  RunConfig cfg = load_config_or_default(config_path);
  const DiffusionSchedule sched = cfg.make_schedule();

  // Training and held-out sets: loaded when given, generated from disjoint
  // offset ranges otherwise.
  std::vector<GroundingSample> train_set, eval_set;
  if (data_path.empty())
    train_set = gen_dataset(cfg.scene, cfg.n_train, cfg.train.seed, 0);
  else
    train_set = load_matching_dataset(data_path, cfg.scene, "ablate");
  if (eval_data_path.empty())
    eval_set = gen_dataset(cfg.scene, cfg.n_eval, cfg.train.seed,
                           static_cast<uint64_t>(cfg.n_train));
  else
    eval_set = load_matching_dataset(eval_data_path, cfg.scene, "ablate");

  const auto train_model = [&](const TrainConfig& tc) {
    Denoiser model = make_denoiser(cfg.model, tc.seed);
    fit(model, sched, train_set, tc);
    return model;
  };
  const auto eval_model = [&](Denoiser& model, const EvalOptions& eo) {
    return evaluate(model, sched, eval_set, eo);
  };
  const auto arm_json = [](const std::string& name, const MetricsReport& r) {
    ordered_json a;
    a["name"] = name;
    a["metrics"] = ordered_json::parse(r.to_json());
    return a;
  };

  ordered_json arms = ordered_json::array();
  if (axis == "schema") {
    for (ProposalSchema s : {ProposalSchema::phrase_balanced,
                             ProposalSchema::random_oversample,
                             ProposalSchema::random_generation}) {
      TrainConfig tc = cfg.train;
      tc.schema = s;
      std::fprintf(stderr, "ablate: training schema=%s\n",
                   schema_name(s).c_str());
      Denoiser model = train_model(tc);
      arms.push_back(arm_json(schema_name(s),
                              eval_model(model, cfg.make_eval_options())));
    }
  } else if (axis == "ddim") {
    Denoiser model = train_model(cfg.train);
    for (Sampler s : {Sampler::ddim, Sampler::ddpm}) {
      EvalOptions eo = cfg.make_eval_options();
      eo.sampler = s;
      arms.push_back(arm_json(sampler_name(s), eval_model(model, eo)));
    }
  } else if (axis == "simloss") {
    for (bool with_sim : {true, false}) {
      TrainConfig tc = cfg.train;
      if (!with_sim) tc.weights.lambda = 0.0;
      std::fprintf(stderr, "ablate: training lambda=%g\n", tc.weights.lambda);
      Denoiser model = train_model(tc);
      arms.push_back(arm_json(with_sim ? "with_sim" : "no_sim",
                              eval_model(model, cfg.make_eval_options())));
    }
  } else if (axis == "proposals") {
    Denoiser model = train_model(cfg.train);
    for (int n : {50, 100, 150, 200, 300, 800}) {
      EvalOptions eo = cfg.make_eval_options();
      eo.n_infer = n;
      const MetricsReport r = eval_model(model, eo);
      ordered_json a = arm_json("n_infer_" + std::to_string(n), r);
      a["n_infer"] = n;
      a["acc_0.5"] = r.acc_at(0.5);
      a["acc_0.7"] = r.acc_at(0.7);
      a["mean_infer_ms"] = r.mean_infer_ms;
      arms.push_back(a);
    }
  } else {
    throw std::runtime_error(
        "--axis must be one of schema, ddim, simloss, proposals");
  }

  ordered_json report;
  report["axis"] = axis;
  report["provenance"] = provenance(cfg);
  report["arms"] = arms;
  write_text_atomic(report_path, report.dump(2) + "\n");
  std::printf("ablate: axis %s, %zu arms -> %s\n", axis.c_str(), arms.size(),
              report_path.c_str());
  return 0;
}

// ----- plot -----

void svg_box(std::string& svg, double ox, double side, const ordered_json& b,
             const char* style) {
  const double cx = b.at(0), cy = b.at(1), w = b.at(2), h = b.at(3);
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "    <rect x=\"%.2f\" y=\"%.2f\" width=\"%.2f\" "
                "height=\"%.2f\" %s/>\n",
                ox + (cx - w / 2.0) * side, (cy - h / 2.0) * side, w * side,
                h * side, style);
  svg += buf;
}

int cmd_plot(const std::string& traj_path, const std::string& out_path) {
  std::ifstream f(traj_path);
  if (!f) throw std::runtime_error("plot: cannot open " + traj_path);
  std::stringstream ss;
  ss << f.rdbuf();
  const ordered_json traj = ordered_json::parse(ss.str());
  const ordered_json& steps = traj.at("steps");
  const ordered_json& gt = traj.at("gt");
  if (steps.empty()) throw std::runtime_error("plot: trajectory has no steps");

  // One square panel per denoising step; ground truth dashed on every panel.
  const double side = 180.0, pad = 14.0, label = 18.0;
  const int n = static_cast<int>(steps.size());
  const double width = pad + n * (side + pad);
  const double height = pad + side + label;

  std::string svg;
  char buf[256];
  svg += "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  std::snprintf(buf, sizeof buf,
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%.0f\" "
                "height=\"%.0f\" viewBox=\"0 0 %.0f %.0f\">\n",
                width, height, width, height);
  svg += buf;
  svg += "  <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";

  static const char* kPred =
      "fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.2\" opacity=\"0.75\"";
  static const char* kGt =
      "fill=\"none\" stroke=\"#d62728\" stroke-width=\"1.6\" "
      "stroke-dasharray=\"5,3\"";

  for (int k = 0; k < n; ++k) {
    const double ox = pad + k * (side + pad);
    std::snprintf(buf, sizeof buf,
                  "  <g transform=\"translate(%.2f,%.2f)\">\n", ox, pad);
    svg += buf;
    std::snprintf(buf, sizeof buf,
                  "    <rect x=\"0\" y=\"0\" width=\"%.0f\" height=\"%.0f\" "
                  "fill=\"#f7f7f7\" stroke=\"#999\" stroke-width=\"1\"/>\n",
                  side, side);
    svg += buf;
    for (const auto& b : steps.at(k)) svg_box(svg, 0.0, side, b, kPred);
    for (const auto& b : gt) svg_box(svg, 0.0, side, b, kGt);
    std::snprintf(buf, sizeof buf,
                  "    <text x=\"%.0f\" y=\"%.0f\" font-family=\"monospace\" "
                  "font-size=\"12\" text-anchor=\"middle\">step %d</text>\n",
                  side / 2.0, side + label - 4.0, k + 1);
    svg += buf;
    svg += "  </g>\n";
  }
  svg += "</svg>\n";
  write_text_atomic(out_path, svg);
  std::printf("plot: %d panels -> %s\n", n, out_path.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"groundiff: language-guided diffusion over bounding boxes"};
  app.require_subcommand(1);

  std::string config_path, data_path, eval_data_path, out_path, ckpt_path;
  std::string zeta_csv, report_path, traj_path, traj_out, axis;
  int n = -1, limit = -1;
  int64_t offset = 0;
  InferOverrides ov;
  int rc = 0;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  gen->add_option("--config", config_path, "Run config JSON (defaults apply)");
  gen->add_option("--out", out_path, "Output JSONL path")->required();
  gen->add_option("--n", n, "Scene count (default: n_train from config)");
  gen->add_option("--offset", offset,
                  "Scene index offset; disjoint offsets give disjoint splits");
  gen->callback([&] { rc = cmd_gen_data(config_path, out_path, n, offset); });

  auto* train = app.add_subcommand("train", "Train a denoiser");
  train->add_option("--config", config_path, "Run config JSON");
  train->add_option("--data", data_path, "Training dataset JSONL")->required();
  train->add_option("--out", out_path, "Output directory")->required();
  train->callback([&] { rc = cmd_train(config_path, data_path, out_path); });

  auto* infer = app.add_subcommand("infer", "Run grounding inference");
  infer->add_option("--ckpt", ckpt_path, "Checkpoint path")->required();
  infer->add_option("--data", data_path, "Dataset JSONL")->required();
  infer->add_option("--steps", ov.steps, "Denoising steps");
  infer->add_option("--proposals", ov.proposals, "Proposal count at inference");
  infer->add_option("--ensemble", ov.ensemble, "on|off");
  infer->add_option("--sampler", ov.sampler, "ddim|ddpm");
  infer->add_option("--traj-out", traj_out, "Write scene 0 trajectory JSON");
  infer->add_option("--out", out_path, "Write predictions JSON");
  infer->add_option("--limit", limit, "Only the first L scenes");
  infer->callback([&] {
    rc = cmd_infer(ckpt_path, data_path, ov, traj_out, out_path, limit);
  });

  auto* eval = app.add_subcommand("eval", "Evaluate grounding accuracy");
  eval->add_option("--ckpt", ckpt_path, "Checkpoint path")->required();
  eval->add_option("--data", data_path, "Held-out dataset JSONL")->required();
  eval->add_option("--zeta", zeta_csv, "IoU thresholds, comma separated");
  eval->add_option("--report", report_path, "Metrics JSON path")->required();
  eval->add_option("--steps", ov.steps, "Denoising steps");
  eval->add_option("--proposals", ov.proposals, "Proposal count at inference");
  eval->add_option("--ensemble", ov.ensemble, "on|off");
  eval->add_option("--sampler", ov.sampler, "ddim|ddpm");
  eval->callback(
      [&] { rc = cmd_eval(ckpt_path, data_path, zeta_csv, report_path, ov); });

  auto* ablate = app.add_subcommand("ablate", "Run one ablation axis");
  ablate->add_option("--axis", axis, "schema|ddim|simloss|proposals")
      ->required();
  ablate->add_option("--config", config_path, "Run config JSON");
  ablate->add_option("--report", report_path, "Report JSON path")->required();
  ablate->add_option("--data", data_path, "Training dataset (else generated)");
  ablate->add_option("--eval-data", eval_data_path,
                     "Held-out dataset (else generated)");
  ablate->callback([&] {
    rc = cmd_ablate(axis, config_path, report_path, data_path, eval_data_path);
  });

  auto* plot = app.add_subcommand("plot", "Render a trajectory as SVG");
  plot->add_option("--traj", traj_path, "Trajectory JSON from infer")
      ->required();
  plot->add_option("--out", out_path, "Output SVG path")->required();
  plot->callback([&] { rc = cmd_plot(traj_path, out_path); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return rc;
}
