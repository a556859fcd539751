#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "groundiff/rng.hpp"
#include "groundiff/util.hpp"

namespace groundiff::ad {

// One trainable tensor: values, gradient accumulator and AdamW moments.
struct Param {
  std::string name;
  int rows{0};
  int cols{0};
  std::vector<double> w;
  std::vector<double> g;
  std::vector<double> m;
  std::vector<double> v;
  size_t size() const { return w.size(); }
};

class ParamStore {
 public:
  int add(const std::string& name, int rows, int cols);
  Param& at(int i) { return ps_[i]; }
  const Param& at(int i) const { return ps_[i]; }
  int find(const std::string& name) const;  // -1 if absent
  int count() const { return static_cast<int>(ps_.size()); }
  size_t scalar_count() const;
  void zero_grad();
  double grad_norm() const;

 private:
  std::vector<Param> ps_;
};

// Xavier-uniform init for weights; zeros for biases (name suffix ".b",
// ".b1", ".b2" or ".beta"); ones for layer-norm gains (suffix ".gamma").
void default_init(ParamStore& store, Rng& rng);

enum class Op {
  leaf,
  input,
  add,
  add_bias,
  sub,
  mul,
  affine,
  matmul,
  matmul_nt,
  concat_cols,
  concat_rows,
  slice_cols,
  relu,
  abs_elem,
  huber_elem,
  softmax_rows,
  layer_norm,
  norm_rows,
  repeat_rows,
  gather_rows,
  sum_all,
  giou_pairs,
};

struct Node {
  Op op{Op::input};
  int rows{0};
  int cols{0};
  std::array<int, 3> p{-1, -1, -1};
  std::vector<int> many;        // concat parents
  int i0{0}, i1{0};             // slice column range
  double k0{0.0}, k1{0.0};      // affine coefficients
  std::vector<double> val;
  std::vector<double> grad;
  std::vector<double> aux;      // per-op caches (layer-norm mean/rstd)
  std::vector<uint8_t> mask;    // softmax column validity
  int param_id{-1};             // leaf binding
  bool requires_grad{false};
};

// Eagerly-evaluated reverse-mode graph. Nodes are appended after their
// parents, so reverse index order is a reverse topological order.
class Graph {
 public:
  explicit Graph(ParamStore* store = nullptr) : store_(store) {}

  // Leaves.
  int param(int pid);
  int input(const Mat& m);
  int input(int rows, int cols, const double* data);
  int input_scalar(double v);

  // Elementwise / structural ops.
  int add(int a, int b);        // same shape, or bias-add when b is 1 x cols
  int sub(int a, int b);
  int mul(int a, int b);
  int affine(int a, double k, double c);  // k*x + c
  int matmul(int a, int b);     // A (r x k) * B (k x c)
  int matmul_nt(int a, int b);  // A (r x k) * B^T (c x k)
  int concat_cols(const std::vector<int>& xs);
  int concat_rows(const std::vector<int>& xs);
  int slice_cols(int a, int c0, int c1);  // [c0, c1)
  int relu(int a);
  int abs_elem(int a);
  int huber_elem(int a);        // 0.5 x^2 for |x|<1 else |x|-0.5
  int softmax_rows(int a, const std::vector<uint8_t>& col_valid = {});
  int layer_norm(int x, int gamma, int beta);  // gamma/beta are 1 x cols
  int norm_rows(int a);         // L2-normalize each row
  int repeat_rows(int a, int n);  // 1 x c -> n x c
  int gather_rows(int a, const std::vector<int>& idx);
  int sum_all(int a);           // -> 1 x 1

  // giou(pred, target) per row; pred is n x 4 cxcywh with grad, target is a
  // constant n x 4. Output n x 1. Widths/heights are floored at kBoxEps
  // inside the node (zero gradient below the floor).
  int giou_pairs(int pred, int target);

  int rows(int id) const { return nodes_[id].rows; }
  int cols(int id) const { return nodes_[id].cols; }
  const std::vector<double>& val(int id) const { return nodes_[id].val; }
  const std::vector<double>& grad(int id) const { return nodes_[id].grad; }
  double value(int id) const;  // 1 x 1 nodes

  // Seeds d(root)=1 and accumulates parameter gradients into the store.
  void backward(int root);

  size_t node_count() const { return nodes_.size(); }

 private:
  int push(Node&& n);
  ParamStore* store_{nullptr};
  std::vector<Node> nodes_;
};

// ----- Optimizer -----

struct AdamW {
  double lr{1e-4};
  double beta1{0.9};
  double beta2{0.999};
  double eps{1e-8};
  double weight_decay{1e-4};
  double clip_norm{0.1};
  int64_t step_count{0};

  // Global-norm clip, then decoupled-weight-decay update with bias
  // correction. lr_now < 0 means "use this->lr".
  void step(ParamStore& store, double lr_now = -1.0);
};

// Linear warmup to base_lr, then cosine decay to min_lr.
double lr_schedule(int64_t step, int64_t total_steps, int64_t warmup_steps,
                   double base_lr, double min_lr);

// ----- Gradient verification -----

struct GradCheckReport {
  double max_rel{0.0};
  std::string worst_param;
  int worst_index{-1};
  bool finite{true};
};

// build(graph) must construct a scalar graph over `store` parameters and
// return the root id. Central differences at +-eps per parameter element;
// relative error uses denominator max(|analytic|, |fd|, 1e-3).
GradCheckReport grad_check(ParamStore& store,
                           const std::function<int(Graph&)>& build,
                           double eps = 1e-4);

// ----- Time embedding -----

// Sin/cos frequency bank: first dim/2 entries are sines, then cosines.
// t=0, dim=4 -> (0, 0, 1, 1).
std::vector<double> sinusoidal_embedding(double t, int dim);

}  // namespace groundiff::ad
