#include "groundiff/model.hpp"

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace groundiff {

namespace {

void require(bool ok, const char* msg) {
  if (!ok) throw std::invalid_argument(msg);
}

// x (n x in) * w (in x out) + b (1 x out)
int linear(ad::Graph& g, int x, int w, int b) {
  return g.add(g.matmul(x, w), b);
}

}  // namespace

Denoiser::Denoiser(const ModelConfig& cfg) : cfg_(cfg) {
  require(cfg.D >= 2 && cfg.heads >= 1 && cfg.D % cfg.heads == 0,
          "ModelConfig: heads must divide D");
  require(cfg.d_t >= 1 && cfg.roi_r >= 1 && cfg.channels >= 1,
          "ModelConfig: d_t, roi_r, channels must be positive");
  require(cfg.box_hidden >= 1 && cfg.ffn_hidden >= 1 && cfg.blocks >= 1,
          "ModelConfig: hidden widths and blocks must be positive");

  const int D = cfg.D;
  auto& s = store_;
  text_w_ = s.add("text_proj.w", cfg.d_t, D);
  text_b_ = s.add("text_proj.b", 1, D);
  box1_w_ = s.add("box_proj.w1", cfg.d_b(), cfg.box_hidden);
  box1_b_ = s.add("box_proj.b1", 1, cfg.box_hidden);
  box2_w_ = s.add("box_proj.w2", cfg.box_hidden, D);
  box2_b_ = s.add("box_proj.b2", 1, D);
  time1_w_ = s.add("time_mlp.w1", D, D);
  time1_b_ = s.add("time_mlp.b1", 1, D);
  time2_w_ = s.add("time_mlp.w2", D, D);
  time2_b_ = s.add("time_mlp.b2", 1, D);
  blocks_.resize(cfg.blocks);
  for (int m = 0; m < cfg.blocks; ++m) {
    auto& bl = blocks_[m];
    const std::string p = "blk" + std::to_string(m) + ".";
    bl.bq_w = s.add(p + "bq.w", D, D);
    bl.bq_b = s.add(p + "bq.b", 1, D);
    bl.bk_w = s.add(p + "bk.w", D, D);
    bl.bk_b = s.add(p + "bk.b", 1, D);
    bl.bv_w = s.add(p + "bv.w", D, D);
    bl.bv_b = s.add(p + "bv.b", 1, D);
    bl.pq_w = s.add(p + "pq.w", D, D);
    bl.pq_b = s.add(p + "pq.b", 1, D);
    bl.pk_w = s.add(p + "pk.w", D, D);
    bl.pk_b = s.add(p + "pk.b", 1, D);
    bl.pv_w = s.add(p + "pv.w", D, D);
    bl.pv_b = s.add(p + "pv.b", 1, D);
    bl.out_w = s.add(p + "out.w", D, D);
    bl.out_b = s.add(p + "out.b", 1, D);
    bl.ln1_g = s.add(p + "ln1.gamma", 1, D);
    bl.ln1_b = s.add(p + "ln1.beta", 1, D);
    bl.ffn1_w = s.add(p + "ffn.w1", D, cfg.ffn_hidden);
    bl.ffn1_b = s.add(p + "ffn.b1", 1, cfg.ffn_hidden);
    bl.ffn2_w = s.add(p + "ffn.w2", cfg.ffn_hidden, D);
    bl.ffn2_b = s.add(p + "ffn.b2", 1, D);
    bl.ln2_g = s.add(p + "ln2.gamma", 1, D);
    bl.ln2_b = s.add(p + "ln2.beta", 1, D);
  }
  scale_w_ = s.add("scale_map.w", D, D);
  scale_b_ = s.add("scale_map.b", 1, D);
  shift_w_ = s.add("shift_map.w", D, D);
  shift_b_ = s.add("shift_map.b", 1, D);
  reg1_w_ = s.add("reg.w1", D, D);
  reg1_b_ = s.add("reg.b1", 1, D);
  reg2_w_ = s.add("reg.w2", D, 4);
  reg2_b_ = s.add("reg.b2", 1, 4);
}

void Denoiser::init_params(Rng& rng) { ad::default_init(store_, rng); }

Denoiser::Forward Denoiser::build(ad::Graph& g, const Mat& roi,
                                  const Mat& noisy_scaled,
                                  const Mat& phrase_feats, double t,
                                  const std::vector<uint8_t>& phrase_mask) const {
  const int N = roi.rows;
  const int P = phrase_feats.rows;
  const int D = cfg_.D;
  require(N >= 1, "denoise: need at least one box");
  require(roi.cols == cfg_.roi_r * cfg_.roi_r * cfg_.channels,
          "denoise: roi feature width mismatch");
  require(noisy_scaled.rows == N && noisy_scaled.cols == 4,
          "denoise: noisy boxes must be N x 4");
  require(P == 0 || phrase_feats.cols == cfg_.d_t,
          "denoise: phrase feature width mismatch");
  require(phrase_mask.empty() || static_cast<int>(phrase_mask.size()) == P,
          "denoise: phrase mask size mismatch");

  // Projections into the common dimension.
  const int noisy_in = g.input(noisy_scaled);
  const int box_in = g.concat_cols({g.input(roi), noisy_in});
  const int fb = linear(g, g.relu(linear(g, box_in, g.param(box1_w_),
                                         g.param(box1_b_))),
                        g.param(box2_w_), g.param(box2_b_));
  int fq = -1;
  if (P > 0) {
    fq = linear(g, g.input(phrase_feats), g.param(text_w_), g.param(text_b_));
  }
  const std::vector<double> temb = ad::sinusoidal_embedding(t, D);
  const int ft = linear(
      g, g.relu(linear(g, g.input(1, D, temb.data()), g.param(time1_w_),
                       g.param(time1_b_))),
      g.param(time2_w_), g.param(time2_b_));

  // Attention-key validity: the N box tokens plus any unmasked phrases.
  std::vector<uint8_t> col_valid(static_cast<size_t>(N) + P, 1);
  if (!phrase_mask.empty()) {
    for (int j = 0; j < P; ++j) col_valid[static_cast<size_t>(N) + j] = phrase_mask[j];
  }

  const int dh = D / cfg_.heads;
  int fb_cur = fb;
  int fbv_last = -1;  // value-projected box features of the final block
  for (const auto& bl : blocks_) {
    const int q = linear(g, fb_cur, g.param(bl.bq_w), g.param(bl.bq_b));
    const int bk = linear(g, fb_cur, g.param(bl.bk_w), g.param(bl.bk_b));
    const int bv = linear(g, fb_cur, g.param(bl.bv_w), g.param(bl.bv_b));
    fbv_last = bv;
    int keys = bk, vals = bv;
    if (P > 0) {
      keys = g.concat_rows({bk, linear(g, fq, g.param(bl.pk_w), g.param(bl.pk_b))});
      vals = g.concat_rows({bv, linear(g, fq, g.param(bl.pv_w), g.param(bl.pv_b))});
    }
    std::vector<int> head_ctx;
    head_ctx.reserve(cfg_.heads);
    for (int h = 0; h < cfg_.heads; ++h) {
      const int qh = g.slice_cols(q, h * dh, (h + 1) * dh);
      const int kh = g.slice_cols(keys, h * dh, (h + 1) * dh);
      const int vh = g.slice_cols(vals, h * dh, (h + 1) * dh);
      const int scores = g.affine(g.matmul_nt(qh, kh), 1.0 / std::sqrt(double(dh)), 0.0);
      const int attn = g.softmax_rows(scores, P > 0 ? col_valid : std::vector<uint8_t>{});
      head_ctx.push_back(g.matmul(attn, vh));
    }
    const int ctx = cfg_.heads == 1 ? head_ctx[0] : g.concat_cols(head_ctx);
    const int attn_out = linear(g, ctx, g.param(bl.out_w), g.param(bl.out_b));
    const int res1 = g.layer_norm(g.add(fb_cur, attn_out), g.param(bl.ln1_g),
                                  g.param(bl.ln1_b));
    const int ffn = linear(g, g.relu(linear(g, res1, g.param(bl.ffn1_w),
                                            g.param(bl.ffn1_b))),
                           g.param(bl.ffn2_w), g.param(bl.ffn2_b));
    fb_cur = g.layer_norm(g.add(res1, ffn), g.param(bl.ln2_g), g.param(bl.ln2_b));
  }

  // Similarity between refined box features and query-projected phrases,
  // both row-normalized; padded phrase columns are forced to zero so they
  // influence neither the conditioning shift nor the loss.
  int shat = -1;
  int cond = -1;  // N x D phrase conditioning signal
  if (P > 0) {
    const auto& bl0 = blocks_.back();
    const int fqq = linear(g, fq, g.param(bl0.pq_w), g.param(bl0.pq_b));
    shat = g.matmul_nt(g.norm_rows(fb_cur), g.norm_rows(fqq));
    if (!phrase_mask.empty()) {
      Mat colmask(N, P, 0.0);
      for (int i = 0; i < N; ++i)
        for (int j = 0; j < P; ++j) colmask.at(i, j) = phrase_mask[j] ? 1.0 : 0.0;
      shat = g.mul(shat, g.input(colmask));
    }
    cond = g.matmul(shat, fq);
  } else {
    cond = g.input(Mat(N, D, 0.0));
  }

  // Text-conditioned regression on the value-projected box features:
  // F_B_v * (scale + 1) + shift, then a small head predicting coordinate
  // deltas added onto the noisy input.
  const int scale1 = g.affine(linear(g, ft, g.param(scale_w_), g.param(scale_b_)), 1.0, 1.0);
  const int shift = linear(g, cond, g.param(shift_w_), g.param(shift_b_));
  const int reg_in = g.add(g.mul(fbv_last, g.repeat_rows(scale1, N)), shift);
  const int deltas = linear(
      g, g.relu(linear(g, reg_in, g.param(reg1_w_), g.param(reg1_b_))),
      g.param(reg2_w_), g.param(reg2_b_));
  Forward f;
  f.b0_scaled = g.add(noisy_in, deltas);
  f.shat = shat;
  f.fq = fq;
  return f;
}

// ----- Checkpoint IO -----

namespace {

void put_le64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint64_t get_le64(const unsigned char* p) {
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const ad::ParamStore& store,
                     const std::string& meta_json) {
  nlohmann::json header;
  header["format"] = "groundiff-ckpt-v1";
  header["tensors"] = nlohmann::json::array();
  for (int i = 0; i < store.count(); ++i) {
    const auto& p = store.at(i);
    header["tensors"].push_back({{"name", p.name}, {"rows", p.rows}, {"cols", p.cols}});
  }
  header["meta"] = meta_json.empty() ? nlohmann::json::object()
                                     : nlohmann::json::parse(meta_json);
  std::string body = header.dump();
  body.push_back('\n');
  for (int i = 0; i < store.count(); ++i) {
    const auto& p = store.at(i);
    for (double x : p.w) {
      uint64_t bits;
      std::memcpy(&bits, &x, sizeof bits);
      put_le64(body, bits);
    }
  }
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("save_checkpoint: cannot open " + tmp);
    f.write(body.data(), static_cast<std::streamsize>(body.size()));
    if (!f) throw std::runtime_error("save_checkpoint: write failed: " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw std::runtime_error("save_checkpoint: rename failed: " + path);
}

namespace {

nlohmann::json read_header(std::ifstream& f, const std::string& path) {
  std::string line;
  if (!std::getline(f, line))
    throw std::runtime_error("checkpoint: missing header line: " + path);
  nlohmann::json header = nlohmann::json::parse(line, nullptr, false);
  if (header.is_discarded() || header.value("format", "") != "groundiff-ckpt-v1")
    throw std::runtime_error("checkpoint: bad header: " + path);
  return header;
}

}  // namespace

std::string load_checkpoint(const std::string& path, ad::ParamStore& store) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_checkpoint: cannot open " + path);
  nlohmann::json header = read_header(f, path);
  const auto& tensors = header.at("tensors");
  if (static_cast<int>(tensors.size()) != store.count())
    throw std::runtime_error("load_checkpoint: tensor count mismatch: " + path);
  for (int i = 0; i < store.count(); ++i) {
    auto& p = store.at(i);
    const auto& t = tensors[i];
    if (t.at("name").get<std::string>() != p.name ||
        t.at("rows").get<int>() != p.rows || t.at("cols").get<int>() != p.cols)
      throw std::runtime_error("load_checkpoint: tensor '" + p.name +
                               "' shape/name mismatch: " + path);
    std::vector<unsigned char> buf(p.size() * 8);
    f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!f) throw std::runtime_error("load_checkpoint: truncated data: " + path);
    for (size_t k = 0; k < p.size(); ++k) {
      const uint64_t bits = get_le64(buf.data() + k * 8);
      std::memcpy(&p.w[k], &bits, sizeof(double));
    }
  }
  return header.at("meta").dump();
}

std::string peek_checkpoint_meta(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("peek_checkpoint_meta: cannot open " + path);
  return read_header(f, path).at("meta").dump();
}

}  // namespace groundiff
