#include "dpig/pose_geometry.hpp"

#include "dpig/util.hpp"
#include "test_common.hpp"

#include <cmath>
#include <vector>

using namespace dpig;

namespace {

PoseAnnotation random_valid_pose(Rng& rng, double vis_prob = 0.8) {
  PoseAnnotation p;
  for (int i = 0; i < kKeypoints; ++i) {
    if (rng.bernoulli(vis_prob)) {
      p.set(i, static_cast<float>(rng.uniform(-1.0, 1.0)),
            static_cast<float>(rng.uniform(-1.0, 1.0)), true);
    } else {
      p.set(i, 0.f, 0.f, false);
    }
  }
  return p;
}

// brute-force oracle: pixels within `radius` of the keypoint's rounded pixel
int disk_popcount(float nx, float ny, int h, int w, int radius) {
  PoseAnnotation p;
  p.set(0, nx, ny, true);
  auto [uf, vf] = keypoint_pixel(p, 0, h, w);
  int cu = static_cast<int>(std::lround(uf));
  int cv = static_cast<int>(std::lround(vf));
  int n = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double dx = x - cu, dy = y - cv;
      if (dx * dx + dy * dy <= double(radius) * radius) ++n;
    }
  return n;
}

}  // namespace

TEST_SUITE("pose_geometry") {

TEST_CASE("keypoint_pixel maps the normalized corners onto pixel centers") {
  PoseAnnotation p;
  p.set(0, -1.f, -1.f, true);
  p.set(1, 1.f, 1.f, true);
  p.set(2, 0.f, 0.f, true);
  auto [x0, y0] = keypoint_pixel(p, 0, 33, 17);
  CHECK(x0 == doctest::Approx(0.0));
  CHECK(y0 == doctest::Approx(0.0));
  auto [x1, y1] = keypoint_pixel(p, 1, 33, 17);
  CHECK(x1 == doctest::Approx(16.0));
  CHECK(y1 == doctest::Approx(32.0));
  auto [x2, y2] = keypoint_pixel(p, 2, 33, 17);
  CHECK(x2 == doctest::Approx(8.0));
  CHECK(y2 == doctest::Approx(16.0));
}

TEST_CASE("render_heatmaps") {
  SUBCASE("all-invisible pose gives 18 zero channels") {
    PoseAnnotation p;
    auto maps = render_heatmaps(p, 16, 8, 6.0);
    REQUIRE(maps.sizes() == torch::IntArrayRef({18, 16, 8}));
    CHECK(maps.abs().sum().item<double>() == 0.0);
  }

  SUBCASE("center keypoint matches the Gaussian analytically") {
    PoseAnnotation p;
    p.set(0, 0.f, 0.f, true);  // pixel (16,16) on a 33x33 grid
    auto maps = render_heatmaps(p, 33, 33, 6.0);
    auto ch = maps[0];
    CHECK(ch[16][16].item<float>() == doctest::Approx(1.0));
    // exactly 6 px away, sigma 6: exp(-6^2 / (2*6^2)) = exp(-1/2)
    const double expect = std::exp(-0.5);  // 0.60653065971263342
    CHECK(ch[16][22].item<float>() == doctest::Approx(expect).epsilon(1e-6));
    CHECK(ch[22][16].item<float>() == doctest::Approx(expect).epsilon(1e-6));
    // (16+4,16+3) sits exactly 5 px away via the 3-4-5 triangle
    const double expect5 = std::exp(-25.0 / 72.0);
    CHECK(ch[20][19].item<float>() == doctest::Approx(expect5).epsilon(1e-6));
  }

  SUBCASE("visibility toggling only changes that channel") {
    Rng rng(31);
    PoseAnnotation a = random_valid_pose(rng, 1.0);
    PoseAnnotation b = a;
    b.set(3, 0.f, 0.f, false);
    auto ma = render_heatmaps(a, 32, 16, 3.0);
    auto mb = render_heatmaps(b, 32, 16, 3.0);
    for (int i = 0; i < kKeypoints; ++i) {
      bool same = torch::equal(ma[i], mb[i]);
      if (i == 3)
        CHECK_FALSE(same);
      else
        CHECK(same);
    }
    CHECK(mb[3].abs().sum().item<double>() == 0.0);
  }

  SUBCASE("each visible channel peaks at 1 on the nearest pixel, range [0,1]") {
    Rng rng(77);
    for (int trial = 0; trial < 25; ++trial) {
      PoseAnnotation p = random_valid_pose(rng);
      auto maps = render_heatmaps(p, 24, 12, 4.0);
      CHECK(maps.min().item<float>() >= 0.f);
      CHECK(maps.max().item<float>() <= 1.f);
      for (int i = 0; i < kKeypoints; ++i) {
        if (!p.visible(i)) {
          CHECK(maps[i].abs().sum().item<double>() == 0.0);
          continue;
        }
        auto [uf, vf] = keypoint_pixel(p, i, 24, 12);
        long flat = maps[i].argmax().item<long>();
        CHECK(flat / 12 == std::lround(vf));
        CHECK(flat % 12 == std::lround(uf));
        CHECK(maps[i].max().item<float>() == doctest::Approx(1.0));
      }
    }
  }

  SUBCASE("non-positive sigma is rejected") {
    PoseAnnotation p;
    p.set(0, 0.f, 0.f, true);
    CHECK_THROWS_AS(render_heatmaps(p, 16, 8, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(render_heatmaps(p, 16, 8, -1.0), std::invalid_argument);
  }
}

TEST_CASE("make_pose_mask") {
  SUBCASE("all-invisible pose gives an all-zero mask") {
    PoseAnnotation p;
    auto mask = make_pose_mask(p, 32, 16, 8);
    CHECK(mask.sum().item<double>() == 0.0);
  }

  SUBCASE("single centered keypoint paints exactly the radius-8 disk") {
    PoseAnnotation p;
    p.set(5, 0.f, 0.f, true);  // pixel (20,20) on 41x41
    auto mask = make_pose_mask(p, 41, 41, 8);
    // lattice points with dx^2+dy^2 <= 64, counted by hand per row:
    // 17 + 2*(15+15+15+13+13+11+7+1) = 197
    CHECK(mask.sum().item<double>() == 197.0);
    CHECK(mask.sum().item<double>() == double(disk_popcount(0.f, 0.f, 41, 41, 8)));
    auto acc = mask.accessor<float, 2>();
    for (int y = 0; y < 41; ++y)
      for (int x = 0; x < 41; ++x) {
        bool inside = (x - 20) * (x - 20) + (y - 20) * (y - 20) <= 64;
        CHECK(acc[y][x] == (inside ? 1.f : 0.f));
      }
  }

  SUBCASE("disk clips at the image border") {
    PoseAnnotation p;
    p.set(2, -1.f, -1.f, true);  // pixel (0,0)
    auto mask = make_pose_mask(p, 20, 20, 8);
    CHECK(mask.sum().item<double>() == double(disk_popcount(-1.f, -1.f, 20, 20, 8)));
    // quarter disk only
    CHECK(mask.sum().item<double>() < 197.0 * 0.3);
  }

  SUBCASE("two visible keypoints without a shared edge paint two disjoint disks") {
    PoseAnnotation p;
    p.set(4, -0.6f, -0.6f, true);  // right wrist
    p.set(10, 0.6f, 0.6f, true);   // right ankle; no skeleton edge joins 4 and 10
    auto mask = make_pose_mask(p, 61, 61, 5);
    int expect = disk_popcount(-0.6f, -0.6f, 61, 61, 5) + disk_popcount(0.6f, 0.6f, 61, 61, 5);
    CHECK(mask.sum().item<double>() == double(expect));
  }

  SUBCASE("a visible skeleton edge paints the capsule between its endpoints") {
    PoseAnnotation p;
    p.set(8, -0.5f, 0.f, true);  // right hip, pixel (10,20) on 41x41
    p.set(9, 0.5f, 0.f, true);   // right knee, pixel (30,20)
    int radius = 4;
    auto mask = make_pose_mask(p, 41, 41, radius);
    // oracle: distance from each pixel to the segment (10,20)-(30,20)
    auto acc = mask.accessor<float, 2>();
    for (int y = 0; y < 41; ++y)
      for (int x = 0; x < 41; ++x) {
        double t = std::clamp((x - 10.0) / 20.0, 0.0, 1.0);
        double cx = 10.0 + 20.0 * t - x;
        double cy = 20.0 - y;
        bool inside = cx * cx + cy * cy <= double(radius) * radius;
        CHECK(acc[y][x] == (inside ? 1.f : 0.f));
      }
  }

  SUBCASE("mask and inverse tile the image over random poses") {
    Rng rng(99);
    for (int trial = 0; trial < 30; ++trial) {
      PoseAnnotation p = random_valid_pose(rng);
      auto mask = make_pose_mask(p, 32, 16, 4);
      auto inv = inverse_mask(mask);
      CHECK(((mask == 0) | (mask == 1)).all().item<bool>());
      CHECK((mask + inv == 1).all().item<bool>());
      CHECK((mask * inv == 0).all().item<bool>());
    }
  }

  SUBCASE("radius below 1 is rejected") {
    PoseAnnotation p;
    CHECK_THROWS_AS(make_pose_mask(p, 16, 8, 0), std::invalid_argument);
  }
}

TEST_CASE("inverse_mask") {
  auto zeros = torch::zeros({4, 6});
  auto inv = inverse_mask(zeros);
  CHECK((inv == 1).all().item<bool>());
  CHECK(torch::equal(inverse_mask(inv), zeros));

  Rng rng(3);
  auto m = torch::zeros({8, 8});
  auto acc = m.accessor<float, 2>();
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) acc[y][x] = rng.bernoulli(0.5) ? 1.f : 0.f;
  CHECK(m.sum().item<double>() + inverse_mask(m).sum().item<double>() == 64.0);

  CHECK_THROWS_AS(inverse_mask(torch::full({4, 4}, 0.5f)), std::invalid_argument);
  CHECK_THROWS_AS(inverse_mask(torch::zeros({4})), std::invalid_argument);
}

TEST_CASE("compute_body_rois") {
  const int H = 64, W = 32;

  SUBCASE("fully visible spread pose yields 7 valid boxes containing their keypoints") {
    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
      PoseAnnotation p = random_valid_pose(rng, 1.0);
      RoiSet rois = compute_body_rois(p, H, W, 0.1);
      const auto& groups = roi_keypoint_groups();
      for (int g = 0; g < kNumRois; ++g) {
        CHECK(rois.valid[g] == 1);
        const RoiBox& b = rois.boxes[g];
        CHECK(b.x0 >= 0);
        CHECK(b.y0 >= 0);
        CHECK(b.x1 <= W);
        CHECK(b.y1 <= H);
        CHECK(b.width() >= 2);
        CHECK(b.height() >= 2);
        for (int i : groups[g]) {
          auto [uf, vf] = keypoint_pixel(p, i, H, W);
          CHECK(b.contains(static_cast<int>(std::lround(uf)),
                           static_cast<int>(std::lround(vf))));
        }
      }
    }
  }

  SUBCASE("only the right leg visible: right-leg and whole-body boxes valid") {
    PoseAnnotation p;
    p.set(8, -0.2f, 0.1f, true);
    p.set(9, -0.1f, 0.45f, true);
    p.set(10, -0.05f, 0.8f, true);
    RoiSet rois = compute_body_rois(p, H, W, 0.1);
    // order: head, torso, right arm, left arm, right leg, left leg, whole
    std::array<uint8_t, 7> expect_valid = {0, 0, 0, 0, 1, 0, 1};
    for (int g = 0; g < kNumRois; ++g) {
      CHECK(rois.valid[g] == expect_valid[g]);
      if (!expect_valid[g]) {
        CHECK(rois.boxes[g].x0 == 0);
        CHECK(rois.boxes[g].y0 == 0);
        CHECK(rois.boxes[g].x1 == W);
        CHECK(rois.boxes[g].y1 == H);
      }
    }
    // right leg and whole body see the same three keypoints here
    CHECK(rois.boxes[4].x0 == rois.boxes[6].x0);
    CHECK(rois.boxes[4].y1 == rois.boxes[6].y1);
  }

  SUBCASE("margin grows boxes monotonically") {
    Rng rng(13);
    for (int trial = 0; trial < 20; ++trial) {
      PoseAnnotation p = random_valid_pose(rng, 1.0);
      RoiSet tight = compute_body_rois(p, H, W, 0.0);
      RoiSet loose = compute_body_rois(p, H, W, 0.1);
      for (int g = 0; g < kNumRois; ++g) {
        CHECK(loose.boxes[g].x0 <= tight.boxes[g].x0);
        CHECK(loose.boxes[g].y0 <= tight.boxes[g].y0);
        CHECK(loose.boxes[g].x1 >= tight.boxes[g].x1);
        CHECK(loose.boxes[g].y1 >= tight.boxes[g].y1);
        CHECK(loose.boxes[g].width() >= tight.boxes[g].width());
        CHECK(loose.boxes[g].height() >= tight.boxes[g].height());
      }
    }
  }

  SUBCASE("coincident keypoints still produce a box of at least 2x2") {
    PoseAnnotation p;
    p.set(8, 0.5f, 0.5f, true);
    p.set(9, 0.5f, 0.5f, true);
    RoiSet rois = compute_body_rois(p, H, W, 0.0);
    CHECK(rois.valid[4] == 1);
    CHECK(rois.boxes[4].width() >= 2);
    CHECK(rois.boxes[4].height() >= 2);
  }

  SUBCASE("negative margin is rejected") {
    PoseAnnotation p;
    CHECK_THROWS_AS(compute_body_rois(p, H, W, -0.1), std::invalid_argument);
  }
}

TEST_CASE("extract_roi_patch") {
  SUBCASE("box matching the output size is an exact copy") {
    Rng rng(55);
    auto fmap = torch::randn({3, 48, 48});
    CHECK(torch::equal(extract_roi_patch(fmap, RoiBox{0, 0, 48, 48}, 48), fmap));
    auto sub = extract_roi_patch(torch::randn({2, 20, 20}), RoiBox{4, 3, 9, 8}, 5);
    REQUIRE(sub.sizes() == torch::IntArrayRef({2, 5, 5}));
  }

  SUBCASE("constant maps stay constant through resampling") {
    auto fmap = torch::full({4, 11, 7}, 0.37f);
    auto patch = extract_roi_patch(fmap, RoiBox{1, 2, 6, 9}, 16);
    REQUIRE(patch.sizes() == torch::IntArrayRef({4, 16, 16}));
    CHECK((patch - 0.37f).abs().max().item<float>() < 1e-6f);
  }

  SUBCASE("2x2 upsample to 4x4 matches the align-corners bilinear oracle") {
    auto fmap = torch::tensor({{{0.f, 1.f}, {2.f, 3.f}}});  // [1,2,2]
    auto patch = extract_roi_patch(fmap, RoiBox{0, 0, 2, 2}, 4);
    REQUIRE(patch.sizes() == torch::IntArrayRef({1, 4, 4}));
    auto acc = patch.accessor<float, 3>();
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) {
        // align-corners source positions are i/3, j/3 in the 2x2 grid; the
        // surface is the plane 2*y + x over it
        double fy = i / 3.0, fx = j / 3.0;
        double expect = (1 - fy) * ((1 - fx) * 0 + fx * 1) + fy * ((1 - fx) * 2 + fx * 3);
        CHECK(acc[0][i][j] == doctest::Approx(expect).epsilon(1e-6));
      }
    CHECK(acc[0][0][0] == doctest::Approx(0.0));
    CHECK(acc[0][0][3] == doctest::Approx(1.0));
    CHECK(acc[0][3][0] == doctest::Approx(2.0));
    CHECK(acc[0][3][3] == doctest::Approx(3.0));
  }

  SUBCASE("outputs stay inside the input range") {
    Rng rng(19);
    for (int trial = 0; trial < 20; ++trial) {
      auto fmap = torch::randn({2, 14, 10});
      int x0 = static_cast<int>(rng.uniform_int(8));
      int y0 = static_cast<int>(rng.uniform_int(12));
      RoiBox box{x0, y0, x0 + 1 + static_cast<int>(rng.uniform_int(10 - x0 - 1)),
                 y0 + 1 + static_cast<int>(rng.uniform_int(14 - y0 - 1))};
      auto patch = extract_roi_patch(fmap, box, 6);
      CHECK(patch.min().item<float>() >= fmap.min().item<float>() - 1e-6f);
      CHECK(patch.max().item<float>() <= fmap.max().item<float>() + 1e-6f);
    }
  }

  SUBCASE("gradients flow back to the feature map") {
    auto fmap = torch::randn({1, 9, 9}, torch::requires_grad());
    auto patch = extract_roi_patch(fmap, RoiBox{1, 1, 6, 7}, 4);
    patch.sum().backward();
    REQUIRE(fmap.grad().defined());
    CHECK(fmap.grad().abs().sum().item<double>() > 0.0);
    CHECK(fmap.grad().isfinite().all().item<bool>());
  }

  SUBCASE("degenerate or out-of-bounds boxes are rejected") {
    auto fmap = torch::zeros({1, 8, 8});
    CHECK_THROWS_AS(extract_roi_patch(fmap, RoiBox{2, 2, 2, 5}, 4), std::invalid_argument);
    CHECK_THROWS_AS(extract_roi_patch(fmap, RoiBox{0, 0, 9, 8}, 4), std::invalid_argument);
    CHECK_THROWS_AS(extract_roi_patch(fmap, RoiBox{-1, 0, 4, 4}, 4), std::invalid_argument);
  }
}

}  // TEST_SUITE
