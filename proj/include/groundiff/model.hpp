#pragma once

#include <string>
#include <vector>

#include "groundiff/autodiff.hpp"
#include "groundiff/geometry.hpp"
#include "groundiff/util.hpp"

namespace groundiff {

struct ModelConfig {
  int D{32};           // common embedding dimension
  int d_t{16};         // raw phrase feature dimension
  int heads{4};        // attention heads (must divide D)
  int roi_r{4};        // RoI pooling grid R
  int channels{8};     // scene field channels C
  int box_hidden{64};  // box projection hidden width
  int ffn_hidden{64};  // feedforward hidden width
  int blocks{1};       // cross-modal transformer depth M

  // Box feature input: flattened R x R x C pooled grid plus the box's own
  // 4 signal-space coordinates (the pooled grid alone carries no global
  // position once a box sits on empty background).
  int d_b() const { return roi_r * roi_r * channels + 4; }
};

// The language-guided denoiser f_theta. Owns its parameters; forward passes
// assemble fresh autodiff graphs so training and inference share one code
// path.
class Denoiser {
 public:
  explicit Denoiser(const ModelConfig& cfg);

  void init_params(Rng& rng);

  const ModelConfig& config() const { return cfg_; }
  ad::ParamStore& params() { return store_; }
  const ad::ParamStore& params() const { return store_; }
  size_t param_count() const { return store_.scalar_count(); }

  struct Forward {
    int b0_scaled{-1};  // N x 4 node, signal-space prediction (unclamped)
    int shat{-1};       // N x P similarity node
    int fq{-1};         // P x D projected text node (passes through)
  };

  // Assemble the forward graph. `roi` is N x (R*R*C) pooled features for the
  // *clamped* noisy boxes, `noisy_scaled` the N x 4 signal-space boxes fed
  // as the residual base, `phrase_feats` P x d_t raw phrase features, t the
  // diffusion timestep. phrase_mask (size P, 1 = real) masks padded phrases
  // out of attention, similarity and conditioning; empty means all real.
  Forward build(ad::Graph& g, const Mat& roi, const Mat& noisy_scaled,
                const Mat& phrase_feats, double t,
                const std::vector<uint8_t>& phrase_mask = {}) const;

 private:
  struct Block {
    int bq_w, bq_b, bk_w, bk_b, bv_w, bv_b;  // box q/k/v
    int pq_w, pq_b, pk_w, pk_b, pv_w, pv_b;  // phrase q/k/v
    int out_w, out_b;
    int ln1_g, ln1_b;
    int ffn1_w, ffn1_b, ffn2_w, ffn2_b;
    int ln2_g, ln2_b;
  };

  ModelConfig cfg_;
  ad::ParamStore store_;
  int text_w_, text_b_;
  int box1_w_, box1_b_, box2_w_, box2_b_;
  int time1_w_, time1_b_, time2_w_, time2_b_;
  std::vector<Block> blocks_;
  int scale_w_, scale_b_, shift_w_, shift_b_;
  int reg1_w_, reg1_b_, reg2_w_, reg2_b_;
};

// Checkpoint: one JSON header line ({format, tensors: [{name, rows, cols}],
// meta}) followed by the raw little-endian f64 tensor data in header order.
// Round trips are bit-exact.
void save_checkpoint(const std::string& path, const ad::ParamStore& store,
                     const std::string& meta_json);
// Loads tensor data into `store`, which must already have matching tensor
// names/shapes (construct the Denoiser from the meta first). Returns meta.
std::string load_checkpoint(const std::string& path, ad::ParamStore& store);
// Reads only the meta JSON string from a checkpoint.
std::string peek_checkpoint_meta(const std::string& path);

}  // namespace groundiff
