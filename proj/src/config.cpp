#include "groundiff/config.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "json.hpp"

#ifndef GROUNDIFF_GIT_REV
#define GROUNDIFF_GIT_REV "unknown"
#endif

namespace groundiff {

namespace {

using nlohmann::json;
using nlohmann::ordered_json;

[[noreturn]] void fail(const std::string& msg) { throw ConfigError(msg); }

void check_keys(const json& j, const std::string& path,
                std::initializer_list<const char*> allowed) {
  if (!j.is_object()) fail("config: " + path + " must be an object");
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const char* k : allowed)
      if (item.key() == k) ok = true;
    if (!ok) fail("config: unknown key " + path + "." + item.key());
  }
}

template <typename T>
void read(const json& j, const std::string& path, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    fail("config: bad value for " + path + "." + key);
  }
}

void read_string_enum(const json& j, const std::string& path, const char* key,
                      const std::function<void(const std::string&)>& apply) {
  if (!j.contains(key)) return;
  std::string s;
  read(j, path, key, s);
  try {
    apply(s);
  } catch (const std::invalid_argument& e) {
    fail("config: " + path + "." + std::string(key) + ": " + e.what());
  }
}

}  // namespace

RunConfig desk_default() {
  RunConfig r;
  // Scenes mix sparse and crowded phrases (up to 9 instances each) so the
  // similarity head learns to rank candidates in dense same-category groups;
  // the size cap drops to 18 cells to keep dense placements feasible under
  // the overlap limit.
  r.scene.n_max = 9;
  r.scene.max_cells = 18;
  r.model.box_hidden = 128;
  r.model.ffn_hidden = 128;
  r.train.epochs = 360;
  r.train.batch_size = 8;
  r.train.n_hat = 32;
  r.train.lr = 1e-3;
  r.train.clip_norm = 1.0;
  r.train.warmup_epochs = 3;
  // Top-1 ranking, not box regression, limits desk-scale accuracy, so the
  // similarity term carries extra weight.
  r.train.weights.lambda = 3.0;
  r.infer.n_infer = 200;
  return r;
}

EvalOptions RunConfig::make_eval_options() const {
  EvalOptions e;
  e.zetas = zetas;
  e.n_steps = infer.n_steps;
  e.n_infer = infer.n_infer;
  e.ensemble = infer.ensemble;
  e.nms_iou = infer.nms_iou;
  e.sampler = infer.sampler;
  e.seed = train.seed;
  return e;
}

std::string RunConfig::to_json() const {
  ordered_json j;
  auto& d = j["data"];
  d["grid"] = scene.grid;
  d["channels"] = scene.channels;
  d["vocab"] = scene.vocab;
  d["d_t"] = scene.d_t;
  d["p_min"] = scene.p_min;
  d["p_max"] = scene.p_max;
  d["n_min"] = scene.n_min;
  d["n_max"] = scene.n_max;
  d["min_cells"] = scene.min_cells;
  d["max_cells"] = scene.max_cells;
  d["max_overlap"] = scene.max_overlap;
  d["place_tries"] = scene.place_tries;
  d["noise"] = scene.noise;
  d["feat_jitter"] = scene.feat_jitter;
  d["n_train"] = n_train;
  d["n_eval"] = n_eval;
  auto& m = j["model"];
  m["d"] = model.D;
  m["heads"] = model.heads;
  m["roi_r"] = model.roi_r;
  m["box_hidden"] = model.box_hidden;
  m["ffn_hidden"] = model.ffn_hidden;
  m["blocks"] = model.blocks;
  auto& f = j["diffusion"];
  f["t"] = T;
  f["s"] = s;
  f["scale"] = scale;
  auto& t = j["train"];
  t["epochs"] = train.epochs;
  t["batch_size"] = train.batch_size;
  t["n_hat"] = train.n_hat;
  t["schema"] = schema_name(train.schema);
  t["alpha"] = train.weights.alpha;
  t["beta"] = train.weights.beta;
  t["lambda"] = train.weights.lambda;
  t["lr"] = train.lr;
  t["min_lr"] = train.min_lr;
  t["weight_decay"] = train.weight_decay;
  t["beta1"] = train.beta1;
  t["beta2"] = train.beta2;
  t["clip_norm"] = train.clip_norm;
  t["warmup_epochs"] = train.warmup_epochs;
  t["partitioned"] = train.partitioned;
  t["seed"] = train.seed;
  auto& i = j["infer"];
  i["n_steps"] = infer.n_steps;
  i["n_infer"] = infer.n_infer;
  i["ensemble"] = infer.ensemble;
  i["nms_iou"] = infer.nms_iou;
  i["sampler"] = sampler_name(infer.sampler);
  i["select"] = select_mode_name(select_mode);
  i["select_k_or_tau"] = select_k_or_tau;
  auto& e = j["eval"];
  e["zetas"] = zetas;
  return j.dump(2) + "\n";
}

std::string RunConfig::hash() const { return to_hex(fnv1a64(to_json())); }

RunConfig parse_config(const std::string& json_text) {
  json j = json::parse(json_text, nullptr, false);
  if (j.is_discarded()) fail("config: not valid JSON");
  check_keys(j, "<root>", {"data", "model", "diffusion", "train", "infer", "eval"});

  RunConfig r = desk_default();
  if (j.contains("data")) {
    const json& d = j["data"];
    check_keys(d, "data",
               {"grid", "channels", "vocab", "d_t", "p_min", "p_max", "n_min",
                "n_max", "min_cells", "max_cells", "max_overlap", "place_tries",
                "noise", "feat_jitter", "n_train", "n_eval"});
    read(d, "data", "grid", r.scene.grid);
    read(d, "data", "channels", r.scene.channels);
    read(d, "data", "vocab", r.scene.vocab);
    read(d, "data", "d_t", r.scene.d_t);
    read(d, "data", "p_min", r.scene.p_min);
    read(d, "data", "p_max", r.scene.p_max);
    read(d, "data", "n_min", r.scene.n_min);
    read(d, "data", "n_max", r.scene.n_max);
    read(d, "data", "min_cells", r.scene.min_cells);
    read(d, "data", "max_cells", r.scene.max_cells);
    read(d, "data", "max_overlap", r.scene.max_overlap);
    read(d, "data", "place_tries", r.scene.place_tries);
    read(d, "data", "noise", r.scene.noise);
    read(d, "data", "feat_jitter", r.scene.feat_jitter);
    read(d, "data", "n_train", r.n_train);
    read(d, "data", "n_eval", r.n_eval);
  }
  if (j.contains("model")) {
    const json& m = j["model"];
    check_keys(m, "model",
               {"d", "heads", "roi_r", "box_hidden", "ffn_hidden", "blocks"});
    read(m, "model", "d", r.model.D);
    read(m, "model", "heads", r.model.heads);
    read(m, "model", "roi_r", r.model.roi_r);
    read(m, "model", "box_hidden", r.model.box_hidden);
    read(m, "model", "ffn_hidden", r.model.ffn_hidden);
    read(m, "model", "blocks", r.model.blocks);
  }
  if (j.contains("diffusion")) {
    const json& f = j["diffusion"];
    check_keys(f, "diffusion", {"t", "s", "scale"});
    read(f, "diffusion", "t", r.T);
    read(f, "diffusion", "s", r.s);
    read(f, "diffusion", "scale", r.scale);
  }
  if (j.contains("train")) {
    const json& t = j["train"];
    check_keys(t, "train",
               {"epochs", "batch_size", "n_hat", "schema", "alpha", "beta",
                "lambda", "lr", "min_lr", "weight_decay", "beta1", "beta2",
                "clip_norm", "warmup_epochs", "partitioned", "seed"});
    read(t, "train", "epochs", r.train.epochs);
    read(t, "train", "batch_size", r.train.batch_size);
    read(t, "train", "n_hat", r.train.n_hat);
    read_string_enum(t, "train", "schema",
                     [&](const std::string& s2) { r.train.schema = parse_schema(s2); });
    read(t, "train", "alpha", r.train.weights.alpha);
    read(t, "train", "beta", r.train.weights.beta);
    read(t, "train", "lambda", r.train.weights.lambda);
    read(t, "train", "lr", r.train.lr);
    read(t, "train", "min_lr", r.train.min_lr);
    read(t, "train", "weight_decay", r.train.weight_decay);
    read(t, "train", "beta1", r.train.beta1);
    read(t, "train", "beta2", r.train.beta2);
    read(t, "train", "clip_norm", r.train.clip_norm);
    read(t, "train", "warmup_epochs", r.train.warmup_epochs);
    read(t, "train", "partitioned", r.train.partitioned);
    read(t, "train", "seed", r.train.seed);
  }
  if (j.contains("infer")) {
    const json& i = j["infer"];
    check_keys(i, "infer",
               {"n_steps", "n_infer", "ensemble", "nms_iou", "sampler",
                "select", "select_k_or_tau"});
    read(i, "infer", "n_steps", r.infer.n_steps);
    read(i, "infer", "n_infer", r.infer.n_infer);
    read(i, "infer", "ensemble", r.infer.ensemble);
    read(i, "infer", "nms_iou", r.infer.nms_iou);
    read_string_enum(i, "infer", "sampler",
                     [&](const std::string& s2) { r.infer.sampler = parse_sampler(s2); });
    read_string_enum(i, "infer", "select",
                     [&](const std::string& s2) { r.select_mode = parse_select_mode(s2); });
    read(i, "infer", "select_k_or_tau", r.select_k_or_tau);
  }
  if (j.contains("eval")) {
    const json& e = j["eval"];
    check_keys(e, "eval", {"zetas"});
    read(e, "eval", "zetas", r.zetas);
  }

  // The phrase dimension and channel count are owned by the data section.
  r.model.d_t = r.scene.d_t;
  r.model.channels = r.scene.channels;

  try {
    validate(r.scene);
    Denoiser probe(r.model);  // shape checks
    build_cosine_schedule(r.T, r.s, r.scale);
  } catch (const std::exception& e) {
    fail(std::string("config: ") + e.what());
  }
  if (r.n_train < 1 || r.n_eval < 1) fail("config: n_train/n_eval must be positive");
  if (r.zetas.empty()) fail("config: eval.zetas must not be empty");
  for (double z : r.zetas)
    if (!(z > 0.0 && z < 1.0)) fail("config: eval.zetas must lie in (0, 1)");
  return r;
}

RunConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) fail("config: cannot open " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  RunConfig r = parse_config(ss.str());
  apply_env_seed(r);
  return r;
}

RunConfig load_config_or_default(const std::string& path) {
  if (path.empty()) {
    RunConfig r = desk_default();
    apply_env_seed(r);
    return r;
  }
  return load_config(path);
}

bool apply_env_seed(RunConfig& cfg) {
  const char* env = std::getenv("GROUNDIFF_SEED");
  if (!env || !*env) return false;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(env, &end, 10);
  if (end == env || *end != '\0')
    fail(std::string("GROUNDIFF_SEED is not an unsigned integer: ") + env);
  cfg.train.seed = static_cast<uint64_t>(v);
  return true;
}

void write_text_atomic(const std::string& path, const std::string& text) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) fail("cannot open for writing: " + tmp);
    f.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!f) fail("write failed: " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    fail("rename failed: " + path);
}

std::string git_revision() { return GROUNDIFF_GIT_REV; }

}  // namespace groundiff
