#include "groundiff/autodiff.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>

#include "groundiff/geometry.hpp"

namespace groundiff::ad {

using ERow =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<ERow>;
using ECMap = Eigen::Map<const ERow>;

// ----- ParamStore -----

int ParamStore::add(const std::string& name, int rows, int cols) {
  Param p;
  p.name = name;
  p.rows = rows;
  p.cols = cols;
  size_t n = static_cast<size_t>(rows) * cols;
  p.w.assign(n, 0.0);
  p.g.assign(n, 0.0);
  p.m.assign(n, 0.0);
  p.v.assign(n, 0.0);
  ps_.push_back(std::move(p));
  return static_cast<int>(ps_.size()) - 1;
}

int ParamStore::find(const std::string& name) const {
  for (size_t i = 0; i < ps_.size(); ++i)
    if (ps_[i].name == name) return static_cast<int>(i);
  return -1;
}

size_t ParamStore::scalar_count() const {
  size_t n = 0;
  for (const auto& p : ps_) n += p.size();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& p : ps_)
    std::fill(p.g.begin(), p.g.end(), 0.0);
}

double ParamStore::grad_norm() const {
  double s = 0.0;
  for (const auto& p : ps_)
    for (double g : p.g) s += g * g;
  return std::sqrt(s);
}

static bool ends_with(const std::string& s, const std::string& suf) {
  return s.size() >= suf.size() &&
         s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
}

void default_init(ParamStore& store, Rng& rng) {
  for (int i = 0; i < store.count(); ++i) {
    Param& p = store.at(i);
    if (ends_with(p.name, ".gamma")) {
      std::fill(p.w.begin(), p.w.end(), 1.0);
    } else if (ends_with(p.name, ".b") || ends_with(p.name, ".b1") ||
               ends_with(p.name, ".b2") || ends_with(p.name, ".beta")) {
      std::fill(p.w.begin(), p.w.end(), 0.0);
    } else {
      double limit = std::sqrt(6.0 / (p.rows + p.cols));
      for (double& w : p.w) w = rng.uniform(-limit, limit);
    }
  }
}

// ----- Graph -----

int Graph::push(Node&& n) {
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

static void fail(const std::string& op, const std::string& why) {
  throw std::invalid_argument("autodiff." + op + ": " + why);
}

int Graph::param(int pid) {
  if (!store_) fail("param", "graph has no parameter store");
  Param& p = store_->at(pid);
  Node n;
  n.op = Op::leaf;
  n.rows = p.rows;
  n.cols = p.cols;
  n.param_id = pid;
  n.val = p.w;
  n.grad.assign(n.val.size(), 0.0);
  n.requires_grad = true;
  return push(std::move(n));
}

int Graph::input(const Mat& m) { return input(m.rows, m.cols, m.d.data()); }

int Graph::input(int rows, int cols, const double* data) {
  Node n;
  n.op = Op::input;
  n.rows = rows;
  n.cols = cols;
  n.val.assign(data, data + static_cast<size_t>(rows) * cols);
  n.grad.assign(n.val.size(), 0.0);
  return push(std::move(n));
}

int Graph::input_scalar(double v) { return input(1, 1, &v); }

int Graph::add(int a, int b) {
  const Node& A = nodes_[a];
  const Node& B = nodes_[b];
  bool bias = (B.rows == 1 && A.rows != 1 && B.cols == A.cols);
  if (!bias && (A.rows != B.rows || A.cols != B.cols))
    fail("add", "shape mismatch");
  Node n;
  n.op = bias ? Op::add_bias : Op::add;
  n.rows = A.rows;
  n.cols = A.cols;
  n.p = {a, b, -1};
  n.requires_grad = A.requires_grad || B.requires_grad;
  n.val.resize(A.val.size());
  n.grad.assign(A.val.size(), 0.0);
  if (bias) {
    for (int r = 0; r < n.rows; ++r)
      for (int c = 0; c < n.cols; ++c)
        n.val[static_cast<size_t>(r) * n.cols + c] =
            A.val[static_cast<size_t>(r) * n.cols + c] + B.val[c];
  } else {
    for (size_t i = 0; i < n.val.size(); ++i) n.val[i] = A.val[i] + B.val[i];
  }
  return push(std::move(n));
}

int Graph::sub(int a, int b) {
  const Node& A = nodes_[a];
  const Node& B = nodes_[b];
  if (A.rows != B.rows || A.cols != B.cols) fail("sub", "shape mismatch");
  Node n;
  n.op = Op::sub;
  n.rows = A.rows;
  n.cols = A.cols;
  n.p = {a, b, -1};
  n.requires_grad = A.requires_grad || B.requires_grad;
  n.val.resize(A.val.size());
  n.grad.assign(A.val.size(), 0.0);
  for (size_t i = 0; i < n.val.size(); ++i) n.val[i] = A.val[i] - B.val[i];
  return push(std::move(n));
}

int Graph::mul(int a, int b) {
  const Node& A = nodes_[a];
  const Node& B = nodes_[b];
  if (A.rows != B.rows || A.cols != B.cols) fail("mul", "shape mismatch");
  Node n;
  n.op = Op::mul;
  n.rows = A.rows;
  n.cols = A.cols;
  n.p = {a, b, -1};
  n.requires_grad = A.requires_grad || B.requires_grad;
  n.val.resize(A.val.size());
  n.grad.assign(A.val.size(), 0.0);
  for (size_t i = 0; i < n.val.size(); ++i) n.val[i] = A.val[i] * B.val[i];
  return push(std::move(n));
}

int Graph::affine(int a, double k, double c) {
  const Node& A = nodes_[a];
  Node n;
  n.op = Op::affine;
  n.rows = A.rows;
  n.cols = A.cols;
  n.p = {a, -1, -1};
  n.k0 = k;
  n.k1 = c;
  n.requires_grad = A.requires_grad;
  n.val.resize(A.val.size());
  n.grad.assign(A.val.size(), 0.0);
  for (size_t i = 0; i < n.val.size(); ++i) n.val[i] = k * A.val[i] + c;
  return push(std::move(n));
}

int Graph::matmul(int a, int b) {
  const Node& A = nodes_[a];
  const Node& B = nodes_[b];
  if (A.cols != B.rows) fail("matmul", "inner dimension mismatch");
  Node n;
  n.op = Op::matmul;
  n.rows = A.rows;
  n.cols = B.cols;
  n.p = {a, b, -1};
  n.requires_grad = A.requires_grad || B.requires_grad;
  n.val.assign(static_cast<size_t>(n.rows) * n.cols, 0.0);
  n.grad.assign(n.val.size(), 0.0);
  ECMap ma(A.val.data(), A.rows, A.cols);
  ECMap mb(B.val.data(), B.rows, B.cols);
  EMap mo(n.val.data(), n.rows, n.cols);
  mo.noalias() = ma * mb;
  return push(std::move(n));
}

int Graph::matmul_nt(int a, int b) {
  const Node& A = nodes_[a];
  const Node& B = nodes_[b];
  if (A.cols != B.cols) fail("matmul_nt", "inner dimension mismatch");
  Node n;
  n.op = Op::matmul_nt;
  n.rows = A.rows;
  n.cols = B.rows;
  n.p = {a, b, -1};
  n.requires_grad = A.requires_grad || B.requires_grad;
  n.val.assign(static_cast<size_t>(n.rows) * n.cols, 0.0);
  n.grad.assign(n.val.size(), 0.0);
  ECMap ma(A.val.data(), A.rows, A.cols);
  ECMap mb(B.val.data(), B.rows, B.cols);
  EMap mo(n.val.data(), n.rows, n.cols);
  mo.noalias() = ma * mb.transpose();
  return push(std::move(n));
}

int Graph::concat_cols(const std::vector<int>& xs) {
  if (xs.empty()) fail("concat_cols", "empty input list");
  int rows = nodes_[xs[0]].rows;
  int cols = 0;
  bool rg = false;
  for (int x : xs) {
    if (nodes_[x].rows != rows) fail("concat_cols", "row mismatch");
    cols += nodes_[x].cols;
    rg = rg || nodes_[x].requires_grad;
  }
  Node n;
  n.op = Op::concat_cols;
  n.rows = rows;
  n.cols = cols;
  n.many = xs;
  n.requires_grad = rg;
  n.val.assign(static_cast<size_t>(rows) * cols, 0.0);
  n.grad.assign(n.val.size(), 0.0);
  int off = 0;
  for (int x : xs) {
    const Node& X = nodes_[x];
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < X.cols; ++c)
        n.val[static_cast<size_t>(r) * cols + off + c] =
            X.val[static_cast<size_t>(r) * X.cols + c];
    off += X.cols;
  }
  return push(std::move(n));
}

int Graph::concat_rows(const std::vector<int>& xs) {
  if (xs.empty()) fail("concat_rows", "empty input list");
  int cols = nodes_[xs[0]].cols;
  int rows = 0;
  bool rg = false;
  for (int x : xs) {
    if (nodes_[x].cols != cols) fail("concat_rows", "column mismatch");
    rows += nodes_[x].rows;
    rg = rg || nodes_[x].requires_grad;
  }
  Node n;
  n.op = Op::concat_rows;
  n.rows = rows;
  n.cols = cols;
  n.many = xs;
  n.requires_grad = rg;
  n.val.assign(static_cast<size_t>(rows) * cols, 0.0);
  n.grad.assign(n.val.size(), 0.0);
  size_t off = 0;
  for (int x : xs) {
    const Node& X = nodes_[x];
    std::copy(X.val.begin(), X.val.end(), n.val.begin() + off);
    off += X.val.size();
  }
  return push(std::move(n));
}

int Graph::slice_cols(int a, int c0, int c1) {
  const Node& A = nodes_[a];
  if (c0 < 0 || c1 > A.cols || c0 >= c1) fail("slice_cols", "bad range");
  Node n;
  n.op = Op::slice_cols;
  n.rows = A.rows;
  n.cols = c1 - c0;
  n.p = {a, -1, -1};
  n.i0 = c0;
  n.i1 = c1;
  n.requires_grad = A.requires_grad;
  n.val.assign(static_cast<size_t>(n.rows) * n.cols, 0.0);
  n.grad.assign(n.val.size(), 0.0);
  for (int r = 0; r < n.rows; ++r)
    for (int c = 0; c < n.cols; ++c)
      n.val[static_cast<size_t>(r) * n.cols + c] =
          A.val[static_cast<size_t>(r) * A.cols + c0 + c];
  return push(std::move(n));
}

int Graph::relu(int a) {
  const Node& A = nodes_[a];
  Node n;
  n.op = Op::relu;
  n.rows = A.rows;
  n.cols = A.cols;
  n.p = {a, -1, -1};
  n.requires_grad = A.requires_grad;
  n.val.resize(A.val.size());
  n.grad.assign(A.val.size(), 0.0);
  for (size_t i = 0; i < n.val.size(); ++i)
    n.val[i] = A.val[i] > 0.0 ? A.val[i] : 0.0;
  return push(std::move(n));
}

int Graph::abs_elem(int a) {
  const Node& A = nodes_[a];
  Node n;
  n.op = Op::abs_elem;
  n.rows = A.rows;
  n.cols = A.cols;
  n.p = {a, -1, -1};
  n.requires_grad = A.requires_grad;
  n.val.resize(A.val.size());
  n.grad.assign(A.val.size(), 0.0);
  for (size_t i = 0; i < n.val.size(); ++i) n.val[i] = std::abs(A.val[i]);
  return push(std::move(n));
}

int Graph::huber_elem(int a) {
  const Node& A = nodes_[a];
  Node n;
  n.op = Op::huber_elem;
  n.rows = A.rows;
  n.cols = A.cols;
  n.p = {a, -1, -1};
  n.requires_grad = A.requires_grad;
  n.val.resize(A.val.size());
  n.grad.assign(A.val.size(), 0.0);
  for (size_t i = 0; i < n.val.size(); ++i) {
    double x = A.val[i];
    n.val[i] = std::abs(x) < 1.0 ? 0.5 * x * x : std::abs(x) - 0.5;
  }
  return push(std::move(n));
}

int Graph::softmax_rows(int a, const std::vector<uint8_t>& col_valid) {
  const Node& A = nodes_[a];
  if (!col_valid.empty() && static_cast<int>(col_valid.size()) != A.cols)
    fail("softmax_rows", "mask length mismatch");
  Node n;
  n.op = Op::softmax_rows;
  n.rows = A.rows;
  n.cols = A.cols;
  n.p = {a, -1, -1};
  n.mask = col_valid;
  n.requires_grad = A.requires_grad;
  n.val.assign(A.val.size(), 0.0);
  n.grad.assign(A.val.size(), 0.0);
  for (int r = 0; r < n.rows; ++r) {
    const double* x = &A.val[static_cast<size_t>(r) * n.cols];
    double* y = &n.val[static_cast<size_t>(r) * n.cols];
    double mx = -1e300;
    for (int c = 0; c < n.cols; ++c)
      if (col_valid.empty() || col_valid[c]) mx = std::max(mx, x[c]);
    double z = 0.0;
    for (int c = 0; c < n.cols; ++c) {
      if (col_valid.empty() || col_valid[c]) {
        y[c] = std::exp(x[c] - mx);
        z += y[c];
      } else {
        y[c] = 0.0;
      }
    }
    if (z > 0.0)
      for (int c = 0; c < n.cols; ++c) y[c] /= z;
  }
  return push(std::move(n));
}

int Graph::layer_norm(int x, int gamma, int beta) {
  const Node& X = nodes_[x];
  const Node& G = nodes_[gamma];
  const Node& B = nodes_[beta];
  if (G.rows != 1 || B.rows != 1 || G.cols != X.cols || B.cols != X.cols)
    fail("layer_norm", "gamma/beta must be 1 x cols");
  Node n;
  n.op = Op::layer_norm;
  n.rows = X.rows;
  n.cols = X.cols;
  n.p = {x, gamma, beta};
  n.requires_grad = X.requires_grad || G.requires_grad || B.requires_grad;
  n.val.assign(X.val.size(), 0.0);
  n.grad.assign(X.val.size(), 0.0);
  n.aux.assign(static_cast<size_t>(n.rows) * 2, 0.0);  // mean, rstd per row
  constexpr double kLnEps = 1e-5;
  for (int r = 0; r < n.rows; ++r) {
    const double* xv = &X.val[static_cast<size_t>(r) * n.cols];
    double mean = 0.0;
    for (int c = 0; c < n.cols; ++c) mean += xv[c];
    mean /= n.cols;
    double var = 0.0;
    for (int c = 0; c < n.cols; ++c) var += (xv[c] - mean) * (xv[c] - mean);
    var /= n.cols;
    double rstd = 1.0 / std::sqrt(var + kLnEps);
    n.aux[static_cast<size_t>(r) * 2] = mean;
    n.aux[static_cast<size_t>(r) * 2 + 1] = rstd;
    double* y = &n.val[static_cast<size_t>(r) * n.cols];
    for (int c = 0; c < n.cols; ++c)
      y[c] = (xv[c] - mean) * rstd * G.val[c] + B.val[c];
  }
  return push(std::move(n));
}

int Graph::norm_rows(int a) {
  const Node& A = nodes_[a];
  Node n;
  n.op = Op::norm_rows;
  n.rows = A.rows;
  n.cols = A.cols;
  n.p = {a, -1, -1};
  n.requires_grad = A.requires_grad;
  n.val.assign(A.val.size(), 0.0);
  n.grad.assign(A.val.size(), 0.0);
  n.aux.assign(static_cast<size_t>(n.rows), 0.0);  // row norms
  for (int r = 0; r < n.rows; ++r) {
    const double* x = &A.val[static_cast<size_t>(r) * n.cols];
    double s = 0.0;
    for (int c = 0; c < n.cols; ++c) s += x[c] * x[c];
    double norm = std::sqrt(s);
    if (norm < 1e-12) norm = 1e-12;
    n.aux[r] = norm;
    double* y = &n.val[static_cast<size_t>(r) * n.cols];
    for (int c = 0; c < n.cols; ++c) y[c] = x[c] / norm;
  }
  return push(std::move(n));
}

int Graph::repeat_rows(int a, int nrep) {
  const Node& A = nodes_[a];
  if (A.rows != 1) fail("repeat_rows", "input must be 1 x cols");
  Node n;
  n.op = Op::repeat_rows;
  n.rows = nrep;
  n.cols = A.cols;
  n.p = {a, -1, -1};
  n.requires_grad = A.requires_grad;
  n.val.assign(static_cast<size_t>(nrep) * A.cols, 0.0);
  n.grad.assign(n.val.size(), 0.0);
  for (int r = 0; r < nrep; ++r)
    std::copy(A.val.begin(), A.val.end(),
              n.val.begin() + static_cast<size_t>(r) * A.cols);
  return push(std::move(n));
}

int Graph::gather_rows(int a, const std::vector<int>& idx) {
  const Node& A = nodes_[a];
  if (idx.empty()) fail("gather_rows", "empty index list");
  for (int r : idx)
    if (r < 0 || r >= A.rows) fail("gather_rows", "index out of range");
  Node n;
  n.op = Op::gather_rows;
  n.rows = static_cast<int>(idx.size());
  n.cols = A.cols;
  n.p = {a, -1, -1};
  n.many = idx;
  n.requires_grad = A.requires_grad;
  n.val.assign(static_cast<size_t>(n.rows) * n.cols, 0.0);
  n.grad.assign(n.val.size(), 0.0);
  for (int r = 0; r < n.rows; ++r)
    std::copy(A.val.begin() + static_cast<size_t>(idx[r]) * n.cols,
              A.val.begin() + static_cast<size_t>(idx[r] + 1) * n.cols,
              n.val.begin() + static_cast<size_t>(r) * n.cols);
  return push(std::move(n));
}

int Graph::sum_all(int a) {
  const Node& A = nodes_[a];
  Node n;
  n.op = Op::sum_all;
  n.rows = 1;
  n.cols = 1;
  n.p = {a, -1, -1};
  n.requires_grad = A.requires_grad;
  double s = 0.0;
  for (double v : A.val) s += v;
  n.val.assign(1, s);
  n.grad.assign(1, 0.0);
  return push(std::move(n));
}

// GIoU forward for one cxcywh pair with width/height flooring; also emits
// the partials needed by backward.
namespace {
struct GiouParts {
  double value;
  std::array<double, 4> d;  // d giou / d (cx, cy, w, h)
};

GiouParts giou_cxcywh(const double* p, const double* t) {
  double w = std::max(p[2], kBoxEps);
  double h = std::max(p[3], kBoxEps);
  double dw = p[2] > kBoxEps ? 1.0 : 0.0;
  double dh = p[3] > kBoxEps ? 1.0 : 0.0;
  double x0 = p[0] - w / 2, y0 = p[1] - h / 2;
  double x1 = p[0] + w / 2, y1 = p[1] + h / 2;
  double tw = std::max(t[2], kBoxEps);
  double th = std::max(t[3], kBoxEps);
  double tx0 = t[0] - tw / 2, ty0 = t[1] - th / 2;
  double tx1 = t[0] + tw / 2, ty1 = t[1] + th / 2;

  double iw = std::min(x1, tx1) - std::max(x0, tx0);
  double ih = std::min(y1, ty1) - std::max(y0, ty0);
  double inter = (iw > 0 && ih > 0) ? iw * ih : 0.0;
  double area_p = w * h;
  double area_t = tw * th;
  double uni = area_p + area_t - inter;

  // Partials in xyxy space: dI/d(x0,y0,x1,y1), dAp/d..., then chain.
  std::array<double, 4> dI{0, 0, 0, 0};
  if (inter > 0.0) {
    if (x0 > tx0) dI[0] = -ih;
    if (y0 > ty0) dI[1] = -iw;
    if (x1 < tx1) dI[2] = ih;
    if (y1 < ty1) dI[3] = iw;
  }
  std::array<double, 4> dAp{-(y1 - y0), -(x1 - x0), (y1 - y0), (x1 - x0)};

  double iou = 0.0;
  std::array<double, 4> dIou{0, 0, 0, 0};
  if (uni >= 1e-12) {
    iou = inter / uni;
    for (int i = 0; i < 4; ++i) {
      double dU = dAp[i] - dI[i];
      dIou[i] = (dI[i] * uni - inter * dU) / (uni * uni);
    }
  }

  double ex0 = std::min(x0, tx0), ey0 = std::min(y0, ty0);
  double ex1 = std::max(x1, tx1), ey1 = std::max(y1, ty1);
  double enc = (ex1 - ex0) * (ey1 - ey0);
  double value = iou;
  std::array<double, 4> dxyxy = dIou;
  if (enc >= 1e-12) {
    // giou = iou - 1 + uni/enc
    value = iou - (enc - uni) / enc;
    std::array<double, 4> dE{0, 0, 0, 0};
    if (x0 < tx0) dE[0] = -(ey1 - ey0);
    if (y0 < ty0) dE[1] = -(ex1 - ex0);
    if (x1 > tx1) dE[2] = (ey1 - ey0);
    if (y1 > ty1) dE[3] = (ex1 - ex0);
    for (int i = 0; i < 4; ++i) {
      double dU = dAp[i] - dI[i];
      dxyxy[i] += (dU * enc - uni * dE[i]) / (enc * enc);
    }
  }

  // Chain xyxy -> cxcywh (with the w/h floor gates).
  GiouParts out;
  out.value = value;
  out.d[0] = dxyxy[0] + dxyxy[2];
  out.d[1] = dxyxy[1] + dxyxy[3];
  out.d[2] = dw * (-dxyxy[0] / 2 + dxyxy[2] / 2);
  out.d[3] = dh * (-dxyxy[1] / 2 + dxyxy[3] / 2);
  return out;
}
}  // namespace

int Graph::giou_pairs(int pred, int target) {
  const Node& P = nodes_[pred];
  const Node& T = nodes_[target];
  if (P.cols != 4 || T.cols != 4 || P.rows != T.rows)
    fail("giou_pairs", "need matching n x 4 operands");
  Node n;
  n.op = Op::giou_pairs;
  n.rows = P.rows;
  n.cols = 1;
  n.p = {pred, target, -1};
  n.requires_grad = P.requires_grad;
  n.val.assign(static_cast<size_t>(P.rows), 0.0);
  n.grad.assign(n.val.size(), 0.0);
  for (int r = 0; r < P.rows; ++r)
    n.val[r] = giou_cxcywh(&P.val[static_cast<size_t>(r) * 4],
                           &T.val[static_cast<size_t>(r) * 4])
                   .value;
  return push(std::move(n));
}

double Graph::value(int id) const {
  const Node& n = nodes_[id];
  if (n.rows != 1 || n.cols != 1)
    throw std::logic_error("Graph::value on non-scalar node");
  return n.val[0];
}

void Graph::backward(int root) {
  Node& r = nodes_[root];
  if (r.rows != 1 || r.cols != 1)
    throw std::logic_error("Graph::backward: root must be scalar");
  r.grad[0] = 1.0;
  for (int id = root; id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.requires_grad) continue;
    bool any = false;
    for (double g : n.grad)
      if (g != 0.0) {
        any = true;
        break;
      }
    if (!any) continue;
    switch (n.op) {
      case Op::leaf:
      case Op::input:
        break;
      case Op::add: {
        Node& A = nodes_[n.p[0]];
        Node& B = nodes_[n.p[1]];
        for (size_t i = 0; i < n.grad.size(); ++i) {
          A.grad[i] += n.grad[i];
          B.grad[i] += n.grad[i];
        }
        break;
      }
      case Op::add_bias: {
        Node& A = nodes_[n.p[0]];
        Node& B = nodes_[n.p[1]];
        for (int rr = 0; rr < n.rows; ++rr)
          for (int c = 0; c < n.cols; ++c) {
            double g = n.grad[static_cast<size_t>(rr) * n.cols + c];
            A.grad[static_cast<size_t>(rr) * n.cols + c] += g;
            B.grad[c] += g;
          }
        break;
      }
      case Op::sub: {
        Node& A = nodes_[n.p[0]];
        Node& B = nodes_[n.p[1]];
        for (size_t i = 0; i < n.grad.size(); ++i) {
          A.grad[i] += n.grad[i];
          B.grad[i] -= n.grad[i];
        }
        break;
      }
      case Op::mul: {
        Node& A = nodes_[n.p[0]];
        Node& B = nodes_[n.p[1]];
        for (size_t i = 0; i < n.grad.size(); ++i) {
          A.grad[i] += n.grad[i] * B.val[i];
          B.grad[i] += n.grad[i] * A.val[i];
        }
        break;
      }
      case Op::affine: {
        Node& A = nodes_[n.p[0]];
        for (size_t i = 0; i < n.grad.size(); ++i)
          A.grad[i] += n.k0 * n.grad[i];
        break;
      }
      case Op::matmul: {
        Node& A = nodes_[n.p[0]];
        Node& B = nodes_[n.p[1]];
        ECMap g(n.grad.data(), n.rows, n.cols);
        ECMap av(A.val.data(), A.rows, A.cols);
        ECMap bv(B.val.data(), B.rows, B.cols);
        EMap ag(A.grad.data(), A.rows, A.cols);
        EMap bg(B.grad.data(), B.rows, B.cols);
        ag.noalias() += g * bv.transpose();
        bg.noalias() += av.transpose() * g;
        break;
      }
      case Op::matmul_nt: {
        Node& A = nodes_[n.p[0]];
        Node& B = nodes_[n.p[1]];
        ECMap g(n.grad.data(), n.rows, n.cols);
        ECMap av(A.val.data(), A.rows, A.cols);
        ECMap bv(B.val.data(), B.rows, B.cols);
        EMap ag(A.grad.data(), A.rows, A.cols);
        EMap bg(B.grad.data(), B.rows, B.cols);
        ag.noalias() += g * bv;
        bg.noalias() += g.transpose() * av;
        break;
      }
      case Op::concat_cols: {
        int off = 0;
        for (int x : n.many) {
          Node& X = nodes_[x];
          for (int rr = 0; rr < n.rows; ++rr)
            for (int c = 0; c < X.cols; ++c)
              X.grad[static_cast<size_t>(rr) * X.cols + c] +=
                  n.grad[static_cast<size_t>(rr) * n.cols + off + c];
          off += X.cols;
        }
        break;
      }
      case Op::concat_rows: {
        size_t off = 0;
        for (int x : n.many) {
          Node& X = nodes_[x];
          for (size_t i = 0; i < X.grad.size(); ++i)
            X.grad[i] += n.grad[off + i];
          off += X.grad.size();
        }
        break;
      }
      case Op::slice_cols: {
        Node& A = nodes_[n.p[0]];
        for (int rr = 0; rr < n.rows; ++rr)
          for (int c = 0; c < n.cols; ++c)
            A.grad[static_cast<size_t>(rr) * A.cols + n.i0 + c] +=
                n.grad[static_cast<size_t>(rr) * n.cols + c];
        break;
      }
      case Op::relu: {
        Node& A = nodes_[n.p[0]];
        for (size_t i = 0; i < n.grad.size(); ++i)
          if (A.val[i] > 0.0) A.grad[i] += n.grad[i];
        break;
      }
      case Op::abs_elem: {
        Node& A = nodes_[n.p[0]];
        for (size_t i = 0; i < n.grad.size(); ++i) {
          double s = A.val[i] > 0.0 ? 1.0 : (A.val[i] < 0.0 ? -1.0 : 0.0);
          A.grad[i] += s * n.grad[i];
        }
        break;
      }
      case Op::huber_elem: {
        Node& A = nodes_[n.p[0]];
        for (size_t i = 0; i < n.grad.size(); ++i)
          A.grad[i] += clamp(A.val[i], -1.0, 1.0) * n.grad[i];
        break;
      }
      case Op::softmax_rows: {
        Node& A = nodes_[n.p[0]];
        for (int rr = 0; rr < n.rows; ++rr) {
          const double* p = &n.val[static_cast<size_t>(rr) * n.cols];
          const double* g = &n.grad[static_cast<size_t>(rr) * n.cols];
          double dot = 0.0;
          for (int c = 0; c < n.cols; ++c) dot += g[c] * p[c];
          double* ag = &A.grad[static_cast<size_t>(rr) * n.cols];
          for (int c = 0; c < n.cols; ++c) ag[c] += p[c] * (g[c] - dot);
        }
        break;
      }
      case Op::layer_norm: {
        Node& X = nodes_[n.p[0]];
        Node& G = nodes_[n.p[1]];
        Node& B = nodes_[n.p[2]];
        int C = n.cols;
        for (int rr = 0; rr < n.rows; ++rr) {
          double mean = n.aux[static_cast<size_t>(rr) * 2];
          double rstd = n.aux[static_cast<size_t>(rr) * 2 + 1];
          const double* xv = &X.val[static_cast<size_t>(rr) * C];
          const double* g = &n.grad[static_cast<size_t>(rr) * C];
          double m1 = 0.0, m2 = 0.0;
          for (int c = 0; c < C; ++c) {
            double xhat = (xv[c] - mean) * rstd;
            double gy = g[c] * G.val[c];
            m1 += gy;
            m2 += gy * xhat;
            G.grad[c] += g[c] * xhat;
            B.grad[c] += g[c];
          }
          m1 /= C;
          m2 /= C;
          double* xg = &X.grad[static_cast<size_t>(rr) * C];
          for (int c = 0; c < C; ++c) {
            double xhat = (xv[c] - mean) * rstd;
            double gy = g[c] * G.val[c];
            xg[c] += rstd * (gy - m1 - xhat * m2);
          }
        }
        break;
      }
      case Op::norm_rows: {
        Node& A = nodes_[n.p[0]];
        for (int rr = 0; rr < n.rows; ++rr) {
          double norm = n.aux[rr];
          const double* y = &n.val[static_cast<size_t>(rr) * n.cols];
          const double* g = &n.grad[static_cast<size_t>(rr) * n.cols];
          double dot = 0.0;
          for (int c = 0; c < n.cols; ++c) dot += g[c] * y[c];
          double* ag = &A.grad[static_cast<size_t>(rr) * n.cols];
          for (int c = 0; c < n.cols; ++c)
            ag[c] += (g[c] - y[c] * dot) / norm;
        }
        break;
      }
      case Op::repeat_rows: {
        Node& A = nodes_[n.p[0]];
        for (int rr = 0; rr < n.rows; ++rr)
          for (int c = 0; c < n.cols; ++c)
            A.grad[c] += n.grad[static_cast<size_t>(rr) * n.cols + c];
        break;
      }
      case Op::gather_rows: {
        Node& A = nodes_[n.p[0]];
        for (int rr = 0; rr < n.rows; ++rr)
          for (int c = 0; c < n.cols; ++c)
            A.grad[static_cast<size_t>(n.many[rr]) * n.cols + c] +=
                n.grad[static_cast<size_t>(rr) * n.cols + c];
        break;
      }
      case Op::sum_all: {
        Node& A = nodes_[n.p[0]];
        double g = n.grad[0];
        for (double& ag : A.grad) ag += g;
        break;
      }
      case Op::giou_pairs: {
        Node& P = nodes_[n.p[0]];
        const Node& T = nodes_[n.p[1]];
        for (int rr = 0; rr < n.rows; ++rr) {
          GiouParts parts = giou_cxcywh(&P.val[static_cast<size_t>(rr) * 4],
                                        &T.val[static_cast<size_t>(rr) * 4]);
          double g = n.grad[rr];
          for (int c = 0; c < 4; ++c)
            P.grad[static_cast<size_t>(rr) * 4 + c] += g * parts.d[c];
        }
        break;
      }
    }
  }
  // Accumulate leaf gradients into the bound parameter store.
  if (store_) {
    for (const Node& n : nodes_) {
      if (n.op == Op::leaf && n.param_id >= 0) {
        Param& p = store_->at(n.param_id);
        for (size_t i = 0; i < n.grad.size(); ++i) p.g[i] += n.grad[i];
      }
    }
  }
}

// ----- AdamW -----

void AdamW::step(ParamStore& store, double lr_now) {
  double rate = lr_now >= 0.0 ? lr_now : lr;
  double norm = store.grad_norm();
  double scale = 1.0;
  if (clip_norm > 0.0 && norm > clip_norm) scale = clip_norm / norm;
  ++step_count;
  double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
  double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
  for (int i = 0; i < store.count(); ++i) {
    Param& p = store.at(i);
    for (size_t j = 0; j < p.size(); ++j) {
      double g = p.g[j] * scale;
      p.m[j] = beta1 * p.m[j] + (1.0 - beta1) * g;
      p.v[j] = beta2 * p.v[j] + (1.0 - beta2) * g * g;
      double mhat = p.m[j] / bc1;
      double vhat = p.v[j] / bc2;
      p.w[j] -= rate * (mhat / (std::sqrt(vhat) + eps) + weight_decay * p.w[j]);
    }
  }
}

double lr_schedule(int64_t step, int64_t total_steps, int64_t warmup_steps,
                   double base_lr, double min_lr) {
  if (warmup_steps > 0 && step < warmup_steps)
    return base_lr * static_cast<double>(step + 1) /
           static_cast<double>(warmup_steps);
  if (total_steps <= warmup_steps) return base_lr;
  double prog = static_cast<double>(step - warmup_steps) /
                static_cast<double>(total_steps - warmup_steps);
  prog = clamp(prog, 0.0, 1.0);
  return min_lr + (base_lr - min_lr) * 0.5 * (1.0 + std::cos(M_PI * prog));
}

// ----- Gradient verification -----

GradCheckReport grad_check(ParamStore& store,
                           const std::function<int(Graph&)>& build,
                           double eps) {
  store.zero_grad();
  {
    Graph g(&store);
    int root = build(g);
    g.backward(root);
  }
  GradCheckReport rep;
  for (int i = 0; i < store.count(); ++i) {
    Param& p = store.at(i);
    for (size_t j = 0; j < p.size(); ++j) {
      double keep = p.w[j];
      p.w[j] = keep + eps;
      double fp;
      {
        Graph g(&store);
        fp = g.value(build(g));
      }
      p.w[j] = keep - eps;
      double fm;
      {
        Graph g(&store);
        fm = g.value(build(g));
      }
      p.w[j] = keep;
      double fd = (fp - fm) / (2.0 * eps);
      double an = p.g[j];
      if (!std::isfinite(fd) || !std::isfinite(an)) rep.finite = false;
      double rel = std::abs(an - fd) /
                   std::max(std::max(std::abs(an), std::abs(fd)), 1e-3);
      if (rel > rep.max_rel) {
        rep.max_rel = rel;
        rep.worst_param = p.name;
        rep.worst_index = static_cast<int>(j);
      }
    }
  }
  return rep;
}

// ----- Time embedding -----

std::vector<double> sinusoidal_embedding(double t, int dim) {
  if (dim < 2 || dim % 2 != 0)
    throw std::invalid_argument("sinusoidal_embedding: dim must be even >= 2");
  int half = dim / 2;
  std::vector<double> out(static_cast<size_t>(dim));
  for (int i = 0; i < half; ++i) {
    double freq = std::pow(10000.0, -static_cast<double>(i) / half);
    out[i] = std::sin(t * freq);
    out[half + i] = std::cos(t * freq);
  }
  return out;
}

}  // namespace groundiff::ad
