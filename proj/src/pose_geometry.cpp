#include "dpig/pose_geometry.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace dpig {

const std::array<std::pair<int, int>, 17>& skeleton_edges() {
  static const std::array<std::pair<int, int>, 17> edges = {{
      {1, 2}, {2, 3}, {3, 4},     // right arm chain
      {1, 5}, {5, 6}, {6, 7},     // left arm chain
      {1, 8}, {8, 9}, {9, 10},    // right leg chain
      {1, 11}, {11, 12}, {12, 13},// left leg chain
      {1, 0},                     // neck to nose
      {0, 14}, {14, 16},          // right eye, ear
      {0, 15}, {15, 17},          // left eye, ear
  }};
  return edges;
}

const std::array<std::vector<int>, kNumRois>& roi_keypoint_groups() {
  static const std::array<std::vector<int>, kNumRois> groups = {{
      {0, 1, 14, 15, 16, 17},                                       // head
      {1, 2, 5, 8, 11},                                             // torso
      {2, 3, 4},                                                    // right arm
      {5, 6, 7},                                                    // left arm
      {8, 9, 10},                                                   // right leg
      {11, 12, 13},                                                 // left leg
      {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17},  // whole body
  }};
  return groups;
}

namespace {

void check_dims(int h, int w) {
  if (h < 1 || w < 1) throw std::invalid_argument("image dims positive");
}

struct PixelKp {
  int u = 0, v = 0;
  bool vis = false;
};

std::array<PixelKp, kKeypoints> rounded_keypoints(const PoseAnnotation& pose, int h, int w) {
  std::array<PixelKp, kKeypoints> out;
  for (int i = 0; i < kKeypoints; ++i) {
    if (!pose.visible(i)) continue;
    auto [u, v] = keypoint_pixel(pose, i, h, w);
    out[i] = {static_cast<int>(std::lround(u)), static_cast<int>(std::lround(v)), true};
  }
  return out;
}

// squared distance from point p to segment a-b, all in pixel coords
double seg_dist2(double px, double py, double ax, double ay, double bx, double by) {
  double dx = bx - ax, dy = by - ay;
  double len2 = dx * dx + dy * dy;
  double t = 0.0;
  if (len2 > 0.0) t = std::clamp(((px - ax) * dx + (py - ay) * dy) / len2, 0.0, 1.0);
  double cx = ax + t * dx - px;
  double cy = ay + t * dy - py;
  return cx * cx + cy * cy;
}

}  // namespace

torch::Tensor render_heatmaps(const PoseAnnotation& pose, int h, int w, double sigma) {
  check_dims(h, w);
  if (!(sigma > 0)) throw std::invalid_argument("heatmap_sigma must be positive");
  validate_pose(pose);

  auto maps = torch::zeros({kKeypoints, h, w}, torch::kFloat32);
  auto acc = maps.accessor<float, 3>();
  double inv = 1.0 / (2.0 * sigma * sigma);
  auto kps = rounded_keypoints(pose, h, w);
  for (int i = 0; i < kKeypoints; ++i) {
    if (!kps[i].vis) continue;
    for (int y = 0; y < h; ++y) {
      double dy = y - kps[i].v;
      for (int x = 0; x < w; ++x) {
        double dx = x - kps[i].u;
        acc[i][y][x] = static_cast<float>(std::exp(-(dx * dx + dy * dy) * inv));
      }
    }
  }
  return maps;
}

torch::Tensor make_pose_mask(const PoseAnnotation& pose, int h, int w, int radius) {
  check_dims(h, w);
  if (radius < 1) throw std::invalid_argument("mask radius must be at least 1");
  validate_pose(pose);

  auto mask = torch::zeros({h, w}, torch::kFloat32);
  auto acc = mask.accessor<float, 2>();
  auto kps = rounded_keypoints(pose, h, w);
  double r2 = static_cast<double>(radius) * radius;

  auto paint_disk = [&](int cu, int cv) {
    int y0 = std::max(0, cv - radius), y1 = std::min(h - 1, cv + radius);
    int x0 = std::max(0, cu - radius), x1 = std::min(w - 1, cu + radius);
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        double dx = x - cu, dy = y - cv;
        if (dx * dx + dy * dy <= r2) acc[y][x] = 1.f;
      }
  };

  for (int i = 0; i < kKeypoints; ++i)
    if (kps[i].vis) paint_disk(kps[i].u, kps[i].v);

  for (auto [a, b] : skeleton_edges()) {
    if (!kps[a].vis || !kps[b].vis) continue;
    int y0 = std::max(0, std::min(kps[a].v, kps[b].v) - radius);
    int y1 = std::min(h - 1, std::max(kps[a].v, kps[b].v) + radius);
    int x0 = std::max(0, std::min(kps[a].u, kps[b].u) - radius);
    int x1 = std::min(w - 1, std::max(kps[a].u, kps[b].u) + radius);
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        if (acc[y][x] == 1.f) continue;
        if (seg_dist2(x, y, kps[a].u, kps[a].v, kps[b].u, kps[b].v) <= r2) acc[y][x] = 1.f;
      }
  }
  return mask;
}

torch::Tensor inverse_mask(const torch::Tensor& mask) {
  if (!mask.defined() || mask.dim() != 2)
    throw std::invalid_argument("mask must have shape [H,W]");
  auto ok = ((mask == 0) | (mask == 1)).all().item<bool>();
  if (!ok) throw std::invalid_argument("mask entries must be 0 or 1");
  return 1.f - mask;
}

RoiSet compute_body_rois(const PoseAnnotation& pose, int h, int w, double margin) {
  check_dims(h, w);
  if (margin < 0) throw std::invalid_argument("roi_margin must be non-negative");
  validate_pose(pose);

  auto kps = rounded_keypoints(pose, h, w);
  const auto& groups = roi_keypoint_groups();
  RoiSet rois;
  for (int g = 0; g < kNumRois; ++g) {
    int n = 0;
    int x0 = w, x1 = -1, y0 = h, y1 = -1;
    for (int i : groups[g]) {
      if (!kps[i].vis) continue;
      ++n;
      x0 = std::min(x0, kps[i].u);
      x1 = std::max(x1, kps[i].u);
      y0 = std::min(y0, kps[i].v);
      y1 = std::max(y1, kps[i].v);
    }
    if (n < 2) {
      rois.boxes[g] = {0, 0, w, h};
      rois.valid[g] = 0;
      continue;
    }
    ++x1;  // half-open
    ++y1;
    int mx = static_cast<int>(std::lround(margin * (x1 - x0)));
    int my = static_cast<int>(std::lround(margin * (y1 - y0)));
    RoiBox b{std::max(0, x0 - mx), std::max(0, y0 - my), std::min(w, x1 + mx),
             std::min(h, y1 + my)};
    // guarantee a usable patch even when all keypoints share a pixel row/column
    if (b.width() < 2) {
      b.x1 = std::min(w, b.x0 + 2);
      b.x0 = std::max(0, b.x1 - 2);
    }
    if (b.height() < 2) {
      b.y1 = std::min(h, b.y0 + 2);
      b.y0 = std::max(0, b.y1 - 2);
    }
    rois.boxes[g] = b;
    rois.valid[g] = 1;
  }
  return rois;
}

torch::Tensor extract_roi_patch(const torch::Tensor& fmap, const RoiBox& box, int out_size) {
  if (!fmap.defined() || fmap.dim() != 3)
    throw std::invalid_argument("feature map must have shape [C,H,W]");
  int64_t h = fmap.size(1), w = fmap.size(2);
  if (out_size < 1) throw std::invalid_argument("roi output size must be at least 1");
  if (box.x0 < 0 || box.y0 < 0 || box.x1 > w || box.y1 > h || box.width() < 1 ||
      box.height() < 1)
    throw std::invalid_argument("roi box is degenerate or out of bounds");

  auto crop = fmap.slice(1, box.y0, box.y1).slice(2, box.x0, box.x1);
  int64_t ch = crop.size(1), cw = crop.size(2);
  if (ch == out_size && cw == out_size) return crop.clone();

  auto opts64 = torch::TensorOptions().dtype(torch::kFloat64);
  auto resample = [&](torch::Tensor t, int64_t dim, int64_t in_len) {
    if (in_len == out_size) return t;
    // align-corners sample positions; out_size 1 picks position 0 like torch
    auto src = out_size > 1 ? torch::linspace(0, static_cast<double>(in_len - 1), out_size, opts64)
                            : torch::zeros({1}, opts64);
    auto i0 = src.floor().to(torch::kLong).clamp(0, in_len - 1);
    auto i1 = (i0 + 1).clamp(0, in_len - 1);
    auto frac = (src - i0.to(opts64)).to(t.scalar_type());
    std::vector<int64_t> shape = {1, 1, 1};
    shape[dim] = out_size;
    frac = frac.view(shape);
    auto g0 = t.index_select(dim, i0);
    auto g1 = t.index_select(dim, i1);
    return g0 + (g1 - g0) * frac;
  };

  auto rows = resample(crop, 1, ch);
  return resample(rows, 2, cw).contiguous();
}

}  // namespace dpig
