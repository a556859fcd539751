#include "groundiff/geometry.hpp"

#include <algorithm>
#include <cmath>

namespace groundiff {

Box cxcywh_to_xyxy(const Box& b) {
  return {b[0] - b[2] / 2.0, b[1] - b[3] / 2.0, b[0] + b[2] / 2.0,
          b[1] + b[3] / 2.0};
}

Box xyxy_to_cxcywh(const Box& b) {
  return {(b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0, b[2] - b[0], b[3] - b[1]};
}

Box clamp_box(const Box& b) {
  Box xy = cxcywh_to_xyxy(b);
  for (double& v : xy) v = clamp(v, 0.0, 1.0);
  if (xy[2] < xy[0]) std::swap(xy[0], xy[2]);
  if (xy[3] < xy[1]) std::swap(xy[1], xy[3]);
  Box out = xyxy_to_cxcywh(xy);
  out[2] = std::max(out[2], kBoxEps);
  out[3] = std::max(out[3], kBoxEps);
  // Re-center so the floored box still fits in [0,1].
  out[0] = clamp(out[0], out[2] / 2.0, 1.0 - out[2] / 2.0);
  out[1] = clamp(out[1], out[3] / 2.0, 1.0 - out[3] / 2.0);
  return out;
}

static double rect_area(const Box& xyxy) {
  return std::max(0.0, xyxy[2] - xyxy[0]) * std::max(0.0, xyxy[3] - xyxy[1]);
}

static double intersect_area(const Box& a, const Box& b) {
  double w = std::min(a[2], b[2]) - std::max(a[0], b[0]);
  double h = std::min(a[3], b[3]) - std::max(a[1], b[1]);
  return std::max(0.0, w) * std::max(0.0, h);
}

double iou_xyxy(const Box& a, const Box& b) {
  double inter = intersect_area(a, b);
  double uni = rect_area(a) + rect_area(b) - inter;
  if (uni < 1e-12) return 0.0;
  return inter / uni;
}

double giou_xyxy(const Box& a, const Box& b) {
  double inter = intersect_area(a, b);
  double uni = rect_area(a) + rect_area(b) - inter;
  double iou_v = (uni < 1e-12) ? 0.0 : inter / uni;
  double ex0 = std::min(a[0], b[0]);
  double ey0 = std::min(a[1], b[1]);
  double ex1 = std::max(a[2], b[2]);
  double ey1 = std::max(a[3], b[3]);
  double enc = (ex1 - ex0) * (ey1 - ey0);
  if (enc < 1e-12) return iou_v;
  return iou_v - (enc - uni) / enc;
}

double iou(const Box& a, const Box& b) {
  return iou_xyxy(cxcywh_to_xyxy(a), cxcywh_to_xyxy(b));
}

double giou(const Box& a, const Box& b) {
  return giou_xyxy(cxcywh_to_xyxy(a), cxcywh_to_xyxy(b));
}

Mat pairwise_iou(const std::vector<Box>& a, const std::vector<Box>& b) {
  Mat m(static_cast<int>(a.size()), static_cast<int>(b.size()));
  std::vector<Box> ax(a.size()), bx(b.size());
  for (size_t i = 0; i < a.size(); ++i) ax[i] = cxcywh_to_xyxy(a[i]);
  for (size_t j = 0; j < b.size(); ++j) bx[j] = cxcywh_to_xyxy(b[j]);
  for (size_t i = 0; i < a.size(); ++i)
    for (size_t j = 0; j < b.size(); ++j)
      m.at(static_cast<int>(i), static_cast<int>(j)) = iou_xyxy(ax[i], bx[j]);
  return m;
}

Box signal_scale_box(const Box& b01, double scale) {
  return {signal_scale(b01[0], scale), signal_scale(b01[1], scale),
          signal_scale(b01[2], scale), signal_scale(b01[3], scale)};
}

Box signal_unscale_box(const Box& bsig, double scale) {
  return {signal_unscale(bsig[0], scale), signal_unscale(bsig[1], scale),
          signal_unscale(bsig[2], scale), signal_unscale(bsig[3], scale)};
}

Box clamp_signal_box(const Box& bsig, double scale) {
  return {clamp_signal(bsig[0], scale), clamp_signal(bsig[1], scale),
          clamp_signal(bsig[2], scale), clamp_signal(bsig[3], scale)};
}

}  // namespace groundiff
