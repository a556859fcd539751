#include "groundiff/synthetic.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace groundiff {

using nlohmann::json;

void validate(const SceneConfig& cfg) {
  auto bad = [](const std::string& why) {
    throw std::invalid_argument("SceneConfig: " + why);
  };
  if (cfg.grid < 4) bad("grid too small");
  if (cfg.channels < 3) bad("need at least 3 channels (1 proto + 2 ramps)");
  if (cfg.vocab < 1) bad("empty vocabulary");
  if (cfg.d_t < 1) bad("d_t < 1");
  if (cfg.p_min < 1 || cfg.p_max < cfg.p_min) bad("bad phrase count range");
  if (cfg.p_max > cfg.vocab) bad("more phrases than vocabulary entries");
  if (cfg.n_min < 1 || cfg.n_max < cfg.n_min) bad("bad instance count range");
  if (cfg.min_cells < 2) bad("min object side below 2 cells");
  if (cfg.max_cells < cfg.min_cells || cfg.max_cells > cfg.grid)
    bad("bad object side range");
  if (cfg.max_overlap < 0.0 || cfg.max_overlap > 1.0) bad("bad max_overlap");
  if (cfg.place_tries < 1) bad("place_tries < 1");
  if (cfg.noise < 0.0 || cfg.feat_jitter < 0.0) bad("negative noise");
}

namespace {
// Stream labels for per-sample substreams.
constexpr uint64_t kStampStream = 0xA11CE5ull;
constexpr uint64_t kJitterStream = 0xBEECEull;

Mat prototype_table(int rows, int cols, uint64_t table_seed) {
  Rng rng(table_seed);
  Mat m(rows, cols);
  for (int r = 0; r < rows; ++r) {
    double s = 0.0;
    for (int c = 0; c < cols; ++c) {
      double v = rng.normal();
      m.at(r, c) = v;
      s += v * v;
    }
    double norm = std::sqrt(s);
    if (norm < 1e-12) norm = 1.0;
    for (int c = 0; c < cols; ++c) m.at(r, c) /= norm;
  }
  return m;
}
}  // namespace

Mat visual_prototypes(int vocab, int channels) {
  return prototype_table(vocab, channels - 2, mix64(0x7669737561616cull));
}

Mat phrase_prototypes(int vocab, int d_t) {
  return prototype_table(vocab, d_t, mix64(0x706872617365ull));
}

std::vector<double> stamp_field(const SceneConfig& cfg,
                                const std::vector<SceneObject>& objects,
                                uint64_t seed) {
  const int G = cfg.grid, C = cfg.channels;
  const int cvis = C - 2;
  std::vector<double> field(static_cast<size_t>(G) * G * C, 0.0);
  Mat protos = visual_prototypes(cfg.vocab, C);
  Rng noise_rng(substream(seed, kStampStream));
  // Here SceneObject.phrase must already hold the *category id* (prototype
  // row); callers remap from phrase index before stamping.
  for (const SceneObject& o : objects) {
    for (int y = o.y0; y < o.y0 + o.h; ++y) {
      for (int x = o.x0; x < o.x0 + o.w; ++x) {
        double* cell = &field[(static_cast<size_t>(y) * G + x) * C];
        for (int ch = 0; ch < cvis; ++ch) {
          double v = protos.at(o.phrase, ch);
          if (cfg.noise > 0.0) v += cfg.noise * noise_rng.normal();
          cell[ch] = v;
        }
        cell[cvis] = (x + 0.5) / G;
        cell[cvis + 1] = (y + 0.5) / G;
      }
    }
  }
  return field;
}

// Pairwise overlap measure for placement: intersection over the smaller
// area. An IoU cap would still allow a small object to vanish entirely
// under a larger later stamp; this cap bounds occlusion of either object.
double placement_overlap(const Box& a, const Box& b) {
  Box ax = cxcywh_to_xyxy(a), bx = cxcywh_to_xyxy(b);
  double w = std::min(ax[2], bx[2]) - std::max(ax[0], bx[0]);
  double h = std::min(ax[3], bx[3]) - std::max(ax[1], bx[1]);
  double inter = std::max(0.0, w) * std::max(0.0, h);
  double small = std::min(a[2] * a[3], b[2] * b[3]);
  if (small < 1e-12) return 0.0;
  return inter / small;
}

GroundingSample gen_scene(const SceneConfig& cfg, uint64_t seed) {
  validate(cfg);
  const int G = cfg.grid;
  Rng rng(seed);
  GroundingSample s;
  s.seed = seed;

  int P = cfg.p_min + rng.uniform_int(cfg.p_max - cfg.p_min + 1);
  // Distinct categories via partial Fisher-Yates.
  std::vector<int> ids(cfg.vocab);
  for (int i = 0; i < cfg.vocab; ++i) ids[i] = i;
  for (int i = 0; i < P; ++i) {
    int j = i + rng.uniform_int(cfg.vocab - i);
    std::swap(ids[i], ids[j]);
    s.cats.push_back(ids[i]);
  }

  std::vector<int> counts(P);
  for (int i = 0; i < P; ++i)
    counts[i] = cfg.n_min + rng.uniform_int(cfg.n_max - cfg.n_min + 1);

  // Grid-aligned placement with a pairwise IoU cap.
  std::vector<Box> placed;
  s.gt.resize(P);
  for (int i = 0; i < P; ++i) {
    for (int k = 0; k < counts[i]; ++k) {
      bool ok = false;
      for (int attempt = 0; attempt < cfg.place_tries && !ok; ++attempt) {
        int w = cfg.min_cells + rng.uniform_int(cfg.max_cells - cfg.min_cells + 1);
        int h = cfg.min_cells + rng.uniform_int(cfg.max_cells - cfg.min_cells + 1);
        int x0 = rng.uniform_int(G - w + 1);
        int y0 = rng.uniform_int(G - h + 1);
        Box b{(x0 + w / 2.0) / G, (y0 + h / 2.0) / G,
              static_cast<double>(w) / G, static_cast<double>(h) / G};
        bool clash = false;
        for (const Box& q : placed)
          if (placement_overlap(b, q) > cfg.max_overlap) {
            clash = true;
            break;
          }
        if (clash) continue;
        placed.push_back(b);
        s.gt[i].push_back(b);
        SceneObject o;
        o.phrase = i;
        o.x0 = x0;
        o.y0 = y0;
        o.w = w;
        o.h = h;
        s.objects.push_back(o);
        ok = true;
      }
      if (!ok)
        throw PlacementError("gen_scene: cannot place object within " +
                             std::to_string(cfg.place_tries) + " tries");
    }
  }

  // Stamp prototypes by *category*: remap phrase index -> cat id for the
  // stamping pass, which reads SceneObject.phrase as a prototype row.
  std::vector<SceneObject> stamp_objs = s.objects;
  for (auto& o : stamp_objs) o.phrase = s.cats[o.phrase];
  s.field = stamp_field(cfg, stamp_objs, seed);

  // Phrase features: prototype + jitter.
  Mat pproto = phrase_prototypes(cfg.vocab, cfg.d_t);
  Rng jit(substream(seed, kJitterStream));
  s.phrase_feats = Mat(P, cfg.d_t);
  for (int i = 0; i < P; ++i)
    for (int c = 0; c < cfg.d_t; ++c)
      s.phrase_feats.at(i, c) =
          pproto.at(s.cats[i], c) + cfg.feat_jitter * jit.normal();
  return s;
}

GroundingSample gen_scene_retry(const SceneConfig& cfg, uint64_t base_seed,
                                int attempts) {
  for (int a = 0; a < attempts; ++a) {
    uint64_t seed = a == 0 ? base_seed : substream(base_seed, 0x7265747279ull,
                                                   static_cast<uint64_t>(a));
    try {
      return gen_scene(cfg, seed);
    } catch (const PlacementError&) {
      if (a + 1 == attempts) throw;
    }
  }
  throw PlacementError("gen_scene_retry: exhausted attempts");
}

std::vector<GroundingSample> gen_dataset(const SceneConfig& cfg, int n,
                                         uint64_t seed, uint64_t offset) {
  if (n < 0) throw std::invalid_argument("gen_dataset: n < 0");
  std::vector<GroundingSample> out;
  out.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i)
    out.push_back(gen_scene_retry(
        cfg, substream(seed, 0x64617461ull, offset + static_cast<uint64_t>(i))));
  return out;
}

SceneFeatures build_scene_features(const std::vector<double>& field, int G,
                                   int C) {
  SceneFeatures f;
  f.G = G;
  f.C = C;
  f.field = &field;
  const int W = G + 1;
  f.integral.assign(static_cast<size_t>(C) * W * W, 0.0);
  for (int ch = 0; ch < C; ++ch) {
    double* ii = &f.integral[static_cast<size_t>(ch) * W * W];
    for (int y = 0; y < G; ++y)
      for (int x = 0; x < G; ++x) {
        double cell = field[(static_cast<size_t>(y) * G + x) * C + ch];
        ii[static_cast<size_t>(y + 1) * W + (x + 1)] =
            cell + ii[static_cast<size_t>(y) * W + (x + 1)] +
            ii[static_cast<size_t>(y + 1) * W + x] -
            ii[static_cast<size_t>(y) * W + x];
      }
  }
  return f;
}

namespace {
// Continuous integral of one channel over [0,X) x [0,Y) in cell units.
double cont_integral(const SceneFeatures& f, int ch, double X, double Y) {
  const int G = f.G, W = G + 1;
  X = clamp(X, 0.0, static_cast<double>(G));
  Y = clamp(Y, 0.0, static_cast<double>(G));
  int i = static_cast<int>(X);
  double fx = X - i;
  if (i >= G) {
    i = G;
    fx = 0.0;
  }
  int j = static_cast<int>(Y);
  double fy = Y - j;
  if (j >= G) {
    j = G;
    fy = 0.0;
  }
  const double* ii = &f.integral[static_cast<size_t>(ch) * W * W];
  auto II = [&](int y, int x) { return ii[static_cast<size_t>(y) * W + x]; };
  double total = II(j, i);
  if (fx > 0.0) total += fx * (II(j, i + 1) - II(j, i));
  if (fy > 0.0) total += fy * (II(j + 1, i) - II(j, i));
  if (fx > 0.0 && fy > 0.0)
    total += fx * fy *
             (*f.field)[(static_cast<size_t>(j) * G + i) * f.C + ch];
  return total;
}
}  // namespace

Mat roi_features(const SceneFeatures& f, const std::vector<Box>& boxes,
                 int R) {
  if (R < 1) throw std::invalid_argument("roi_features: R < 1");
  const int G = f.G, C = f.C;
  Mat out(static_cast<int>(boxes.size()), R * R * C);
  for (size_t n = 0; n < boxes.size(); ++n) {
    Box xy = cxcywh_to_xyxy(boxes[n]);
    double X0 = clamp(xy[0], 0.0, 1.0) * G;
    double Y0 = clamp(xy[1], 0.0, 1.0) * G;
    double X1 = clamp(xy[2], 0.0, 1.0) * G;
    double Y1 = clamp(xy[3], 0.0, 1.0) * G;
    for (int ry = 0; ry < R; ++ry) {
      double v0 = Y0 + (Y1 - Y0) * ry / R;
      double v1 = Y0 + (Y1 - Y0) * (ry + 1) / R;
      for (int rx = 0; rx < R; ++rx) {
        double u0 = X0 + (X1 - X0) * rx / R;
        double u1 = X0 + (X1 - X0) * (rx + 1) / R;
        double area = (u1 - u0) * (v1 - v0);
        for (int ch = 0; ch < C; ++ch) {
          double val = 0.0;
          if (area > 1e-12) {
            double s = cont_integral(f, ch, u1, v1) -
                       cont_integral(f, ch, u0, v1) -
                       cont_integral(f, ch, u1, v0) +
                       cont_integral(f, ch, u0, v0);
            val = s / area;
          } else {
            // Degenerate sub-rect: read the nearest cell value.
            int cx = static_cast<int>(clamp((u0 + u1) / 2.0, 0.0, G - 1.0));
            int cy = static_cast<int>(clamp((v0 + v1) / 2.0, 0.0, G - 1.0));
            val = (*f.field)[(static_cast<size_t>(cy) * G + cx) * C + ch];
          }
          out.at(static_cast<int>(n), (ry * R + rx) * C + ch) = val;
        }
      }
    }
  }
  return out;
}

// ----- Dataset IO -----

namespace {
json config_to_json(const SceneConfig& c) {
  return json{{"grid", c.grid},
              {"channels", c.channels},
              {"vocab", c.vocab},
              {"d_t", c.d_t},
              {"p_min", c.p_min},
              {"p_max", c.p_max},
              {"n_min", c.n_min},
              {"n_max", c.n_max},
              {"min_cells", c.min_cells},
              {"max_cells", c.max_cells},
              {"max_overlap", c.max_overlap},
              {"place_tries", c.place_tries},
              {"noise", c.noise},
              {"feat_jitter", c.feat_jitter}};
}

SceneConfig config_from_json(const json& j) {
  SceneConfig c;
  c.grid = j.at("grid");
  c.channels = j.at("channels");
  c.vocab = j.at("vocab");
  c.d_t = j.at("d_t");
  c.p_min = j.at("p_min");
  c.p_max = j.at("p_max");
  c.n_min = j.at("n_min");
  c.n_max = j.at("n_max");
  c.min_cells = j.at("min_cells");
  c.max_cells = j.at("max_cells");
  c.max_overlap = j.at("max_overlap");
  c.place_tries = j.at("place_tries");
  c.noise = j.at("noise");
  c.feat_jitter = j.at("feat_jitter");
  return c;
}
}  // namespace

void save_dataset(const std::string& path, const SceneConfig& cfg,
                  const std::vector<GroundingSample>& samples,
                  const std::string& provenance_json) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out)
      throw std::runtime_error("save_dataset: cannot open " + tmp);
    json header{{"format", "groundiff-scenes-v1"},
                {"config", config_to_json(cfg)}};
    if (!provenance_json.empty())
      header["provenance"] = json::parse(provenance_json);
    out << header.dump() << "\n";
    for (const auto& s : samples) {
      json objs = json::array();
      for (const auto& o : s.objects)
        objs.push_back({{"p", o.phrase},
                        {"x0", o.x0},
                        {"y0", o.y0},
                        {"w", o.w},
                        {"h", o.h}});
      json feats = json::array();
      for (int r = 0; r < s.phrase_feats.rows; ++r) {
        json row = json::array();
        for (int c = 0; c < s.phrase_feats.cols; ++c)
          row.push_back(s.phrase_feats.at(r, c));
        feats.push_back(row);
      }
      json line{{"seed", s.seed},
                {"cats", s.cats},
                {"objects", objs},
                {"phrase_feats", feats}};
      out << line.dump() << "\n";
    }
    if (!out) throw std::runtime_error("save_dataset: write failed");
  }
  std::filesystem::rename(tmp, path);
}

std::pair<SceneConfig, std::vector<GroundingSample>> load_dataset(
    const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_dataset: cannot open " + path);
  std::string line;
  int line_no = 0;
  SceneConfig cfg;
  std::vector<GroundingSample> samples;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw std::runtime_error("load_dataset: malformed JSON at line " +
                               std::to_string(line_no) + ": " + e.what());
    }
    try {
      if (!have_header) {
        if (j.at("format") != "groundiff-scenes-v1")
          throw std::runtime_error("unknown format tag");
        cfg = config_from_json(j.at("config"));
        have_header = true;
        continue;
      }
      GroundingSample s;
      s.seed = j.at("seed").get<uint64_t>();
      s.cats = j.at("cats").get<std::vector<int>>();
      for (const auto& o : j.at("objects")) {
        SceneObject so;
        so.phrase = o.at("p");
        so.x0 = o.at("x0");
        so.y0 = o.at("y0");
        so.w = o.at("w");
        so.h = o.at("h");
        s.objects.push_back(so);
      }
      const auto& feats = j.at("phrase_feats");
      int P = static_cast<int>(s.cats.size());
      s.phrase_feats = Mat(P, cfg.d_t);
      for (int r = 0; r < P; ++r)
        for (int c = 0; c < cfg.d_t; ++c)
          s.phrase_feats.at(r, c) = feats.at(r).at(c).get<double>();
      // Rebuild derived fields: per-phrase GT and the stamped scene.
      s.gt.assign(P, {});
      for (const auto& o : s.objects)
        s.gt[o.phrase].push_back({(o.x0 + o.w / 2.0) / cfg.grid,
                                  (o.y0 + o.h / 2.0) / cfg.grid,
                                  static_cast<double>(o.w) / cfg.grid,
                                  static_cast<double>(o.h) / cfg.grid});
      std::vector<SceneObject> stamp_objs = s.objects;
      for (auto& o : stamp_objs) o.phrase = s.cats[o.phrase];
      s.field = stamp_field(cfg, stamp_objs, s.seed);
      samples.push_back(std::move(s));
    } catch (const json::exception& e) {
      throw std::runtime_error("load_dataset: bad record at line " +
                               std::to_string(line_no) + ": " + e.what());
    }
  }
  return {cfg, samples};
}

}  // namespace groundiff
