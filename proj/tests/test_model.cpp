#include "doctest.h"

#include <cstdio>
#include <fstream>
#include <sstream>
#include <vector>

#include "groundiff/model.hpp"

using namespace groundiff;

namespace {

ModelConfig toy_config() {
  ModelConfig cfg;
  cfg.D = 16;
  cfg.d_t = 5;
  cfg.heads = 4;
  cfg.roi_r = 2;
  cfg.channels = 3;
  cfg.box_hidden = 12;
  cfg.ffn_hidden = 12;
  cfg.blocks = 1;
  return cfg;
}

Mat random_mat(Rng& rng, int rows, int cols, double lo = -1.0, double hi = 1.0) {
  Mat m(rows, cols);
  for (double& v : m.d) v = rng.uniform(lo, hi);
  return m;
}

struct ToyInputs {
  Mat roi, noisy, phrases;
};

ToyInputs toy_inputs(const ModelConfig& cfg, int n, int p, uint64_t seed) {
  Rng rng(seed);
  ToyInputs in;
  in.roi = random_mat(rng, n, cfg.roi_r * cfg.roi_r * cfg.channels, 0.0, 1.0);
  in.noisy = random_mat(rng, n, 4, -kSignalScale, kSignalScale);
  in.phrases = random_mat(rng, p, cfg.d_t);
  return in;
}

void zero_param(ad::ParamStore& s, const std::string& name) {
  int i = s.find(name);
  REQUIRE(i >= 0);
  std::fill(s.at(i).w.begin(), s.at(i).w.end(), 0.0);
}

}  // namespace

TEST_CASE("denoiser config validation") {
  ModelConfig bad = toy_config();
  bad.heads = 5;  // does not divide D=16
  CHECK_THROWS_AS(Denoiser{bad}, std::invalid_argument);
  bad = toy_config();
  bad.blocks = 0;
  CHECK_THROWS_AS(Denoiser{bad}, std::invalid_argument);
}

TEST_CASE("parameter budget at full-scale configuration") {
  ModelConfig cfg;
  cfg.D = 256;
  cfg.d_t = 768;
  cfg.heads = 8;
  cfg.roi_r = 7;
  cfg.channels = 256;
  cfg.box_hidden = 512;
  cfg.ffn_hidden = 512;
  cfg.blocks = 1;
  Denoiser model(cfg);
  // Reference budget for this configuration; the pooled-feature input
  // carries 4 extra coordinate columns, so a small surplus is expected.
  const double reference = 7805444.0;
  const double count = static_cast<double>(model.param_count());
  CHECK(count == 7807748.0);
  CHECK(std::abs(count - reference) / reference < 0.05);
}

TEST_CASE("forward shape, determinism and output count") {
  ModelConfig cfg = toy_config();
  Denoiser model(cfg);
  Rng rng(11);
  model.init_params(rng);
  ToyInputs in = toy_inputs(cfg, 6, 2, 99);

  ad::Graph g1(&model.params());
  auto f1 = model.build(g1, in.roi, in.noisy, in.phrases, 37.0);
  CHECK(g1.rows(f1.b0_scaled) == 6);
  CHECK(g1.cols(f1.b0_scaled) == 4);
  CHECK(g1.rows(f1.shat) == 6);
  CHECK(g1.cols(f1.shat) == 2);

  ad::Graph g2(&model.params());
  auto f2 = model.build(g2, in.roi, in.noisy, in.phrases, 37.0);
  CHECK(g1.val(f1.b0_scaled) == g2.val(f2.b0_scaled));
  CHECK(g1.val(f1.shat) == g2.val(f2.shat));

  for (double v : g1.val(f1.shat)) {
    CHECK(v >= -1.0 - 1e-12);
    CHECK(v <= 1.0 + 1e-12);
  }
}

TEST_CASE("zero regression head predicts the input boxes") {
  ModelConfig cfg = toy_config();
  Denoiser model(cfg);
  Rng rng(3);
  model.init_params(rng);
  zero_param(model.params(), "reg.w2");
  zero_param(model.params(), "reg.b2");
  ToyInputs in = toy_inputs(cfg, 5, 3, 4);
  ad::Graph g(&model.params());
  auto f = model.build(g, in.roi, in.noisy, in.phrases, 10.0);
  const auto& b0 = g.val(f.b0_scaled);
  for (int i = 0; i < 5; ++i)
    for (int c = 0; c < 4; ++c) CHECK(b0[i * 4 + c] == in.noisy.at(i, c));
}

TEST_CASE("phrase features pass through the cross-modal block unchanged") {
  ModelConfig cfg = toy_config();
  Denoiser model(cfg);
  Rng rng(7);
  model.init_params(rng);
  ToyInputs in = toy_inputs(cfg, 4, 3, 21);
  ad::Graph g(&model.params());
  auto f = model.build(g, in.roi, in.noisy, in.phrases, 3.0);

  // The language stream must be exactly the text projection of the raw
  // features: no attention layer may write into it.
  const auto& s = model.params();
  const auto& w = s.at(s.find("text_proj.w"));
  const auto& b = s.at(s.find("text_proj.b"));
  const auto& fq = g.val(f.fq);
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < cfg.D; ++j) {
      double want = b.w[j];
      for (int k = 0; k < cfg.d_t; ++k)
        want += in.phrases.at(i, k) * w.w[k * cfg.D + j];
      CHECK(fq[i * cfg.D + j] == doctest::Approx(want).epsilon(1e-12));
    }
  }
}

TEST_CASE("box permutation permutes predictions and similarity rows") {
  ModelConfig cfg = toy_config();
  Denoiser model(cfg);
  Rng rng(13);
  model.init_params(rng);
  const int n = 7, p = 2;
  ToyInputs in = toy_inputs(cfg, n, p, 5);

  ad::Graph g(&model.params());
  auto f = model.build(g, in.roi, in.noisy, in.phrases, 100.0);

  const std::vector<int> perm = {3, 0, 6, 1, 5, 2, 4};
  Mat roi_p(n, in.roi.cols), noisy_p(n, 4);
  for (int i = 0; i < n; ++i) {
    for (int c = 0; c < in.roi.cols; ++c) roi_p.at(i, c) = in.roi.at(perm[i], c);
    for (int c = 0; c < 4; ++c) noisy_p.at(i, c) = in.noisy.at(perm[i], c);
  }
  ad::Graph gp(&model.params());
  auto fp = model.build(gp, roi_p, noisy_p, in.phrases, 100.0);

  const auto& b0 = g.val(f.b0_scaled);
  const auto& b0p = gp.val(fp.b0_scaled);
  const auto& sh = g.val(f.shat);
  const auto& shp = gp.val(fp.shat);
  for (int i = 0; i < n; ++i) {
    for (int c = 0; c < 4; ++c)
      CHECK(b0p[i * 4 + c] == doctest::Approx(b0[perm[i] * 4 + c]).epsilon(1e-10));
    for (int c = 0; c < p; ++c)
      CHECK(shp[i * p + c] == doctest::Approx(sh[perm[i] * p + c]).epsilon(1e-10));
  }
}

TEST_CASE("masked phrases change nothing and receive zero similarity") {
  ModelConfig cfg = toy_config();
  Denoiser model(cfg);
  Rng rng(29);
  model.init_params(rng);
  const int n = 5;
  ToyInputs in = toy_inputs(cfg, n, 2, 17);

  ad::Graph ga(&model.params());
  auto fa = model.build(ga, in.roi, in.noisy, in.phrases, 12.0);

  // Same two real phrases plus two junk rows that are masked out.
  Rng junk_rng(1234);
  Mat padded(4, cfg.d_t);
  for (int j = 0; j < cfg.d_t; ++j) {
    padded.at(0, j) = in.phrases.at(0, j);
    padded.at(1, j) = in.phrases.at(1, j);
    padded.at(2, j) = junk_rng.uniform(-5.0, 5.0);
    padded.at(3, j) = junk_rng.uniform(-5.0, 5.0);
  }
  const std::vector<uint8_t> mask = {1, 1, 0, 0};
  ad::Graph gb(&model.params());
  auto fb = model.build(gb, in.roi, in.noisy, padded, 12.0, mask);

  const auto& b0a = ga.val(fa.b0_scaled);
  const auto& b0b = gb.val(fb.b0_scaled);
  for (size_t i = 0; i < b0a.size(); ++i)
    CHECK(b0b[i] == doctest::Approx(b0a[i]).epsilon(1e-12));

  const auto& sa = ga.val(fa.shat);
  const auto& sb = gb.val(fb.shat);
  for (int i = 0; i < n; ++i) {
    CHECK(sb[i * 4 + 0] == doctest::Approx(sa[i * 2 + 0]).epsilon(1e-12));
    CHECK(sb[i * 4 + 1] == doctest::Approx(sa[i * 2 + 1]).epsilon(1e-12));
    CHECK(sb[i * 4 + 2] == 0.0);
    CHECK(sb[i * 4 + 3] == 0.0);
  }

  // Gradients: the masked run must produce the same parameter gradients as
  // the unpadded run, i.e. junk phrases contribute exactly nothing.
  model.params().zero_grad();
  ga.backward(ga.sum_all(fa.b0_scaled));
  std::vector<std::vector<double>> grads_a;
  for (int i = 0; i < model.params().count(); ++i)
    grads_a.push_back(model.params().at(i).g);

  model.params().zero_grad();
  gb.backward(gb.sum_all(fb.b0_scaled));
  for (int i = 0; i < model.params().count(); ++i) {
    const auto& gb_i = model.params().at(i).g;
    for (size_t j = 0; j < gb_i.size(); ++j)
      CHECK(gb_i[j] == doctest::Approx(grads_a[i][j]).epsilon(1e-10));
  }
}

TEST_CASE("no phrases reduces to box self-attention") {
  ModelConfig cfg = toy_config();
  Denoiser model(cfg);
  Rng rng(31);
  model.init_params(rng);
  ToyInputs in = toy_inputs(cfg, 4, 2, 8);

  ad::Graph g0(&model.params());
  auto f0 = model.build(g0, in.roi, in.noisy, Mat(0, cfg.d_t), 2.0);
  CHECK(f0.shat == -1);
  CHECK(f0.fq == -1);

  const std::vector<uint8_t> all_masked = {0, 0};
  ad::Graph gm(&model.params());
  auto fm = model.build(gm, in.roi, in.noisy, in.phrases, 2.0, all_masked);

  const auto& a = g0.val(f0.b0_scaled);
  const auto& b = gm.val(fm.b0_scaled);
  for (size_t i = 0; i < a.size(); ++i)
    CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
}

TEST_CASE("end-to-end gradients pass finite-difference checks") {
  ModelConfig cfg = toy_config();
  Denoiser model(cfg);
  Rng rng(41);
  model.init_params(rng);
  ToyInputs in = toy_inputs(cfg, 6, 2, 77);
  Rng wrng(555);
  const Mat wb = random_mat(wrng, 6, 4);
  const Mat ws = random_mat(wrng, 6, 2);

  SUBCASE("unmasked") {
    auto build = [&](ad::Graph& g) {
      auto f = model.build(g, in.roi, in.noisy, in.phrases, 25.0);
      return g.add(g.sum_all(g.mul(f.b0_scaled, g.input(wb))),
                   g.sum_all(g.mul(f.shat, g.input(ws))));
    };
    auto rep = ad::grad_check(model.params(), build);
    CAPTURE(rep.worst_param);
    CAPTURE(rep.worst_index);
    CHECK(rep.finite);
    CHECK(rep.max_rel < 1e-4);
  }

  SUBCASE("with a masked phrase") {
    const std::vector<uint8_t> mask = {1, 0};
    auto build = [&](ad::Graph& g) {
      auto f = model.build(g, in.roi, in.noisy, in.phrases, 25.0, mask);
      return g.add(g.sum_all(g.mul(f.b0_scaled, g.input(wb))),
                   g.sum_all(g.mul(f.shat, g.input(ws))));
    };
    auto rep = ad::grad_check(model.params(), build);
    CAPTURE(rep.worst_param);
    CHECK(rep.finite);
    CHECK(rep.max_rel < 1e-4);
  }
}

TEST_CASE("checkpoint round trip is bit exact") {
  ModelConfig cfg = toy_config();
  Denoiser model(cfg);
  Rng rng(91);
  model.init_params(rng);

  const std::string path = "test_model_ckpt.bin";
  save_checkpoint(path, model.params(), R"({"note":"toy","seed":91})");

  Denoiser loaded(cfg);
  std::string meta = load_checkpoint(path, loaded.params());
  CHECK(meta.find("\"seed\":91") != std::string::npos);
  CHECK(peek_checkpoint_meta(path) == meta);
  for (int i = 0; i < model.params().count(); ++i) {
    const auto& a = model.params().at(i);
    const auto& b = loaded.params().at(i);
    REQUIRE(a.name == b.name);
    CHECK(a.w == b.w);
  }

  // Saving the loaded copy reproduces the file byte for byte.
  const std::string path2 = "test_model_ckpt2.bin";
  save_checkpoint(path2, loaded.params(), meta);
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  std::stringstream s1, s2;
  s1 << f1.rdbuf();
  s2 << f2.rdbuf();
  CHECK(s1.str() == s2.str());
  CHECK(s1.str().size() ==
        s1.str().find('\n') + 1 + model.param_count() * 8);

  // Loading into a model of a different shape must fail loudly.
  ModelConfig other = toy_config();
  other.D = 32;
  Denoiser wrong(other);
  CHECK_THROWS_AS(load_checkpoint(path, wrong.params()), std::runtime_error);

  std::remove(path.c_str());
  std::remove(path2.c_str());
}

TEST_CASE("forward rejects inconsistent shapes") {
  ModelConfig cfg = toy_config();
  Denoiser model(cfg);
  Rng rng(1);
  model.init_params(rng);
  ToyInputs in = toy_inputs(cfg, 3, 2, 2);
  ad::Graph g(&model.params());

  Mat bad_roi(3, 5);
  CHECK_THROWS_AS(model.build(g, bad_roi, in.noisy, in.phrases, 1.0),
                  std::invalid_argument);
  Mat bad_noisy(2, 4);
  CHECK_THROWS_AS(model.build(g, in.roi, bad_noisy, in.phrases, 1.0),
                  std::invalid_argument);
  Mat bad_phrases(2, cfg.d_t + 1);
  CHECK_THROWS_AS(model.build(g, in.roi, in.noisy, bad_phrases, 1.0),
                  std::invalid_argument);
  CHECK_THROWS_AS(model.build(g, in.roi, in.noisy, in.phrases, 1.0, {1}),
                  std::invalid_argument);
}
