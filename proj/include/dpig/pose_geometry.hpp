#pragma once

#include <torch/torch.h>

#include <array>
#include <utility>
#include <vector>

#include "dpig/core.hpp"

namespace dpig {

// Half-open pixel box [x0,x1) x [y0,y1).
struct RoiBox {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  int width() const { return x1 - x0; }
  int height() const { return y1 - y0; }
  bool contains(int px, int py) const {
    return px >= x0 && px < x1 && py >= y0 && py < y1;
  }
};

// The 7 body ROIs, in fixed output order: head, torso, right arm, left arm,
// right leg, left leg, whole body. A group with fewer than 2 visible keypoints
// degrades to the full-image box with valid = 0.
struct RoiSet {
  std::array<RoiBox, kNumRois> boxes{};
  std::array<uint8_t, kNumRois> valid{};
};

// 17 limb segments over the 18-keypoint convention
const std::array<std::pair<int, int>, 17>& skeleton_edges();
// keypoint indices feeding each of the 7 ROIs, same order as RoiSet
const std::array<std::vector<int>, kNumRois>& roi_keypoint_groups();

// normalized [-1,1] coords to pixel coords (align-corners)
inline std::pair<float, float> keypoint_pixel(const PoseAnnotation& pose, int i, int h, int w) {
  float u = (pose.x(i) + 1.f) * 0.5f * static_cast<float>(w - 1);
  float v = (pose.y(i) + 1.f) * 0.5f * static_cast<float>(h - 1);
  return {u, v};
}

// [18,H,W] float32; channel i is a unit-peak Gaussian centered on keypoint i's
// nearest pixel, all zeros when the keypoint is invisible.
torch::Tensor render_heatmaps(const PoseAnnotation& pose, int h, int w, double sigma);

// [H,W] float32 in {0,1}: union of radius-r disks at visible keypoints and
// radius-r capsules along skeleton edges whose both endpoints are visible.
torch::Tensor make_pose_mask(const PoseAnnotation& pose, int h, int w, int radius);

torch::Tensor inverse_mask(const torch::Tensor& mask);

RoiSet compute_body_rois(const PoseAnnotation& pose, int h, int w, double margin);

// Crops box from a [C,H,W] map and resamples to [C,out,out] with align-corners
// bilinear interpolation. Differentiable w.r.t. fmap; exact copy when the box
// already has size out x out.
torch::Tensor extract_roi_patch(const torch::Tensor& fmap, const RoiBox& box, int out_size);

}  // namespace dpig
