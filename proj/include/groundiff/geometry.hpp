#pragma once

#include <array>
#include <vector>

#include "groundiff/util.hpp"

namespace groundiff {

// Boxes live in normalized image coordinates. Two layouts are used:
//   cxcywh: center x, center y, width, height   (storage/model layout)
//   xyxy:   x_min, y_min, x_max, y_max          (overlap computations)
using Box = std::array<double, 4>;

// Width/height floor applied when sanitizing predicted boxes.
inline constexpr double kBoxEps = 1e-4;

// Diffusion signal scale: coordinates in [0,1] are mapped to
// [-kSignalScale, kSignalScale] while being diffused.
inline constexpr double kSignalScale = 2.0;

Box cxcywh_to_xyxy(const Box& b);
Box xyxy_to_cxcywh(const Box& b);

// Clamp a cxcywh box so the xyxy corners lie in [0,1] and w,h >= kBoxEps.
Box clamp_box(const Box& b);

// IoU / generalized IoU of two xyxy boxes. Degenerate unions (area < 1e-12)
// yield iou = 0; giou's enclosing-box term is guarded the same way.
double iou_xyxy(const Box& a, const Box& b);
double giou_xyxy(const Box& a, const Box& b);

// Convenience overloads for cxcywh boxes.
double iou(const Box& a_cxcywh, const Box& b_cxcywh);
double giou(const Box& a_cxcywh, const Box& b_cxcywh);

// Pairwise IoU matrix: rows index `a`, cols index `b` (cxcywh inputs).
Mat pairwise_iou(const std::vector<Box>& a, const std::vector<Box>& b);

// [0,1] <-> signal-space maps used by the diffusion process.
inline double signal_scale(double v, double scale = kSignalScale) {
  return (2.0 * v - 1.0) * scale;
}
inline double signal_unscale(double x, double scale = kSignalScale) {
  return (x / scale + 1.0) / 2.0;
}
inline double clamp_signal(double x, double scale = kSignalScale) {
  return clamp(x, -scale, scale);
}

Box signal_scale_box(const Box& b01, double scale = kSignalScale);
Box signal_unscale_box(const Box& bsig, double scale = kSignalScale);
Box clamp_signal_box(const Box& bsig, double scale = kSignalScale);

}  // namespace groundiff
