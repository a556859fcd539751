#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <utility>

#include "json.hpp"

#include "groundiff/config.hpp"
#include "groundiff/diffusion.hpp"
#include "groundiff/engine.hpp"
#include "groundiff/geometry.hpp"
#include "groundiff/model.hpp"
#include "groundiff/objective.hpp"
#include "groundiff/proposals.hpp"
#include "groundiff/synthetic.hpp"

namespace py = pybind11;
using namespace groundiff;

namespace {

Mat mat_from_rows(const std::vector<std::vector<double>>& rows) {
  const int r = static_cast<int>(rows.size());
  const int c = r == 0 ? 0 : static_cast<int>(rows[0].size());
  Mat m(r, c);
  for (int i = 0; i < r; ++i) {
    if (static_cast<int>(rows[i].size()) != c)
      throw std::invalid_argument("ragged matrix rows");
    for (int j = 0; j < c; ++j) m.at(i, j) = rows[i][j];
  }
  return m;
}

std::vector<std::vector<double>> mat_to_rows(const Mat& m) {
  std::vector<std::vector<double>> out(m.rows, std::vector<double>(m.cols));
  for (int i = 0; i < m.rows; ++i)
    for (int j = 0; j < m.cols; ++j) out[i][j] = m.at(i, j);
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "groundiff core bindings";

  // ----- geometry -----
  m.def("iou", &iou, py::arg("a"), py::arg("b"),
        "IoU of two cxcywh boxes in [0,1] coordinates");
  m.def("giou", &giou, py::arg("a"), py::arg("b"),
        "Generalized IoU of two cxcywh boxes");
  m.def("cxcywh_to_xyxy", &cxcywh_to_xyxy, py::arg("box"));
  m.def("xyxy_to_cxcywh", &xyxy_to_cxcywh, py::arg("box"));
  m.def("clamp_box", &clamp_box, py::arg("box"));

  // ----- diffusion -----
  py::class_<DiffusionSchedule>(m, "DiffusionSchedule")
      .def_readonly("T", &DiffusionSchedule::T)
      .def_readonly("s", &DiffusionSchedule::s)
      .def_readonly("scale", &DiffusionSchedule::scale)
      .def_readonly("alpha_bar", &DiffusionSchedule::alpha_bar);
  m.def("build_cosine_schedule", &build_cosine_schedule, py::arg("T"),
        py::arg("s") = 0.008, py::arg("scale") = kSignalScale);
  m.def("q_sample", &q_sample, py::arg("b0"), py::arg("t"), py::arg("noise"),
        py::arg("sched"));
  m.def("make_timestep_plan", &make_timestep_plan, py::arg("n_steps"),
        py::arg("T"));
  m.def("ddim_step", &ddim_step, py::arg("bt"), py::arg("b0_pred"),
        py::arg("t_cur"), py::arg("t_next"), py::arg("sched"));

  // ----- matching -----
  m.def(
      "hungarian",
      [](const std::vector<std::vector<double>>& cost) {
        return hungarian(mat_from_rows(cost));
      },
      py::arg("cost"),
      "Minimum-cost assignment of rows to columns (rows <= cols); returns "
      "the column index per row");

  // ----- configuration -----
  py::class_<SceneConfig>(m, "SceneConfig")
      .def(py::init<>())
      .def_readwrite("grid", &SceneConfig::grid)
      .def_readwrite("channels", &SceneConfig::channels)
      .def_readwrite("vocab", &SceneConfig::vocab)
      .def_readwrite("d_t", &SceneConfig::d_t)
      .def_readwrite("p_min", &SceneConfig::p_min)
      .def_readwrite("p_max", &SceneConfig::p_max)
      .def_readwrite("n_min", &SceneConfig::n_min)
      .def_readwrite("n_max", &SceneConfig::n_max)
      .def_readwrite("min_cells", &SceneConfig::min_cells)
      .def_readwrite("max_cells", &SceneConfig::max_cells)
      .def_readwrite("max_overlap", &SceneConfig::max_overlap)
      .def_readwrite("place_tries", &SceneConfig::place_tries)
      .def_readwrite("noise", &SceneConfig::noise)
      .def_readwrite("feat_jitter", &SceneConfig::feat_jitter)
      .def("__eq__", [](const SceneConfig& a, const SceneConfig& b) {
        return a == b;
      });

  py::class_<RunConfig>(m, "RunConfig")
      .def(py::init<>())
      .def_readwrite("scene", &RunConfig::scene)
      .def_readwrite("n_train", &RunConfig::n_train)
      .def_readwrite("n_eval", &RunConfig::n_eval)
      .def_readwrite("T", &RunConfig::T)
      .def_readwrite("zetas", &RunConfig::zetas)
      .def_property(
          "seed", [](const RunConfig& c) { return c.train.seed; },
          [](RunConfig& c, uint64_t s) { c.train.seed = s; })
      .def_property(
          "epochs", [](const RunConfig& c) { return c.train.epochs; },
          [](RunConfig& c, int e) { c.train.epochs = e; })
      .def_property(
          "n_steps", [](const RunConfig& c) { return c.infer.n_steps; },
          [](RunConfig& c, int v) { c.infer.n_steps = v; })
      .def_property(
          "n_infer", [](const RunConfig& c) { return c.infer.n_infer; },
          [](RunConfig& c, int v) { c.infer.n_infer = v; })
      .def("hash", &RunConfig::hash)
      .def("to_json", &RunConfig::to_json);
  m.def("desk_default", &desk_default);
  m.def("parse_config", &parse_config, py::arg("json_text"),
        "Parse a run config from JSON text (unknown keys rejected)");

  // ----- synthetic scenes -----
  py::class_<GroundingSample>(m, "Sample")
      .def_readonly("seed", &GroundingSample::seed)
      .def_readonly("cats", &GroundingSample::cats)
      .def_readonly("gt", &GroundingSample::gt)
      .def_property_readonly(
          "phrase_feats",
          [](const GroundingSample& s) { return mat_to_rows(s.phrase_feats); })
      .def_property_readonly("phrases", [](const GroundingSample& s) {
        return s.phrase_feats.rows;
      });
  m.def(
      "gen_dataset",
      [](const RunConfig& cfg, int n, uint64_t offset) {
        return gen_dataset(cfg.scene, n, cfg.train.seed, offset);
      },
      py::arg("config"), py::arg("n"), py::arg("offset") = 0,
      "Scene i depends only on (config.seed, offset + i)");
  m.def(
      "save_dataset",
      [](const std::string& path, const RunConfig& cfg,
         const std::vector<GroundingSample>& samples) {
        save_dataset(path, cfg.scene, samples);
      },
      py::arg("path"), py::arg("config"), py::arg("samples"));
  m.def("load_dataset", &load_dataset, py::arg("path"),
        "Returns (scene_config, samples)");

  // ----- model / training / evaluation -----
  py::class_<Denoiser>(m, "Denoiser")
      .def(py::init([](const RunConfig& cfg) {
             return make_denoiser(cfg.model, cfg.train.seed);
           }),
           py::arg("config"),
           "Construct and deterministically initialize from config.seed")
      .def_property_readonly("param_count", &Denoiser::param_count)
      .def("save",
           [](const Denoiser& d, const std::string& path,
              const std::string& meta_json) {
             save_checkpoint(path, d.params(), meta_json);
           },
           py::arg("path"), py::arg("meta_json") = "{}");
  m.def(
      "load_model",
      [](const std::string& path) {
        const std::string meta = peek_checkpoint_meta(path);
        RunConfig cfg = parse_config(
            nlohmann::json::parse(meta).at("config").dump());
        Denoiser model(cfg.model);
        load_checkpoint(path, model.params());
        return std::make_pair(std::move(model), meta);
      },
      py::arg("path"),
      "Rebuild a model from a checkpoint written by `train`; returns "
      "(model, meta_json)");

  py::class_<LossRow>(m, "LossRow")
      .def_readonly("epoch", &LossRow::epoch)
      .def_readonly("step", &LossRow::step)
      .def_readonly("lr", &LossRow::lr)
      .def_property_readonly("total",
                             [](const LossRow& r) { return r.loss.total; })
      .def_property_readonly("l1",
                             [](const LossRow& r) { return r.loss.l1_term; })
      .def_property_readonly("giou",
                             [](const LossRow& r) { return r.loss.giou_term; })
      .def_property_readonly("sim",
                             [](const LossRow& r) { return r.loss.sim_term; });
  m.def(
      "fit",
      [](Denoiser& model, const RunConfig& cfg,
         const std::vector<GroundingSample>& train) {
        const DiffusionSchedule sched = cfg.make_schedule();
        return fit(model, sched, train, cfg.train).history;
      },
      py::arg("model"), py::arg("config"), py::arg("train"),
      "Train in place; returns the per-step loss history");
  m.def(
      "evaluate",
      [](Denoiser& model, const RunConfig& cfg,
         const std::vector<GroundingSample>& dataset, bool include_timing) {
        const DiffusionSchedule sched = cfg.make_schedule();
        const MetricsReport rep =
            evaluate(model, sched, dataset, cfg.make_eval_options());
        return rep.to_json(include_timing);
      },
      py::arg("model"), py::arg("config"), py::arg("dataset"),
      py::arg("include_timing") = true,
      "Grounding metrics over a dataset, as a JSON string");
  m.def(
      "infer_scene",
      [](Denoiser& model, const RunConfig& cfg, const GroundingSample& sample,
         uint64_t stream) {
        const DiffusionSchedule sched = cfg.make_schedule();
        const DenoiseFn fn = make_model_denoiser(model, sample, {}, sched.scale);
        Rng rng(substream(cfg.train.seed, 0x4556414cULL, stream));
        const InferenceResult r = infer(fn, sched, cfg.infer, rng);
        const auto picks = select_predictions(
            r.boxes, r.scores, cfg.select_mode, cfg.select_k_or_tau,
            cfg.infer.nms_iou);
        return std::make_tuple(r.boxes, mat_to_rows(r.scores), picks);
      },
      py::arg("model"), py::arg("config"), py::arg("sample"),
      py::arg("stream") = 0,
      "Returns (candidate boxes, candidates x P scores, per-phrase picks)");
}
