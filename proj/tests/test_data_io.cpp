#include "dpig/data_io.hpp"

#include "dpig/image_io.hpp"
#include "test_common.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

using namespace dpig;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  fs::path dir = fs::temp_directory_path() / ("dpig_data_" + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

PoseAnnotation random_valid_pose(Rng& rng, double vis_prob = 0.85) {
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

bool message_contains(const std::exception& e, const std::string& needle) {
  return std::string(e.what()).find(needle) != std::string::npos;
}

uint64_t dir_fingerprint(const fs::path& root) {
  // order-stable hash over file names and contents
  std::vector<fs::path> files;
  for (const auto& ent : fs::recursive_directory_iterator(root))
    if (ent.is_regular_file()) files.push_back(ent.path());
  std::sort(files.begin(), files.end());
  uint64_t h = 0xCBF29CE484222325ull;
  for (const auto& f : files) {
    std::string rel = fs::relative(f, root).string();
    h = fnv1a64(rel.data(), rel.size(), h);
    std::ifstream in(f, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    h = fnv1a64(bytes.data(), bytes.size(), h);
  }
  return h;
}

// independent coverage oracle: the figure is the union of keypoint disks and
// skeleton-edge capsules, radii fixed by the config, distances measured from
// the continuous (un-rounded) pixel positions of the saved pose
torch::Tensor coverage_from_pose(const PoseAnnotation& pose, const SynthConfig& cfg) {
  const int h = cfg.image_h, w = cfg.image_w;
  auto mask = torch::zeros({h, w}, torch::kFloat32);
  auto acc = mask.accessor<float, 2>();

  auto dist2_to_seg = [](double px, double py, double ax, double ay, double bx, double by) {
    double dx = bx - ax, dy = by - ay;
    double len2 = dx * dx + dy * dy;
    double t = len2 > 0 ? std::clamp(((px - ax) * dx + (py - ay) * dy) / len2, 0.0, 1.0) : 0.0;
    double cx = ax + t * dx - px, cy = ay + t * dy - py;
    return cx * cx + cy * cy;
  };

  std::array<std::pair<double, double>, kKeypoints> px;
  for (int i = 0; i < kKeypoints; ++i) {
    auto [u, v] = keypoint_pixel(pose, i, h, w);
    px[i] = {u, v};
  }

  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      bool hit = false;
      for (int i = 0; i < kKeypoints && !hit; ++i) {
        if (!pose.visible(i)) continue;
        double r = (i == 0) ? cfg.head_radius() : cfg.limb_radius();
        double dx = x - px[i].first, dy = y - px[i].second;
        hit = dx * dx + dy * dy <= r * r;
      }
      const auto& edges = skeleton_edges();
      const auto& parts = edge_part_map();
      for (size_t e = 0; e < edges.size() && !hit; ++e) {
        auto [a, b] = edges[e];
        if (!pose.visible(a) || !pose.visible(b)) continue;
        double r = (parts[e] == BodyPart::Torso) ? cfg.torso_radius() : cfg.limb_radius();
        hit = dist2_to_seg(x, y, px[a].first, px[a].second, px[b].first, px[b].second) <=
              r * r;
      }
      acc[y][x] = hit ? 1.f : 0.f;
    }
  return mask;
}

}  // namespace

TEST_SUITE("data_io") {

TEST_CASE("pose file round trip is exact") {
  auto dir = temp_dir("pose");
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    PoseAnnotation p = random_valid_pose(rng);
    auto path = dir / ("p" + std::to_string(trial) + ".txt");
    write_pose_file(path, p);
    PoseAnnotation back = read_pose_file(path);
    CHECK(back.coords == p.coords);
    CHECK(back.visibility == p.visibility);
  }
}

TEST_CASE("pose file reader rejects malformed inputs") {
  auto dir = temp_dir("posebad");
  auto write_text = [&](const std::string& name, const std::string& text) {
    std::ofstream out(dir / name);
    out << text;
    return dir / name;
  };
  std::string valid_row = "0.1 0.2 1\n";

  SUBCASE("17 rows name the file and the count") {
    std::string text;
    for (int i = 0; i < 17; ++i) text += valid_row;
    try {
      read_pose_file(write_text("short.txt", text));
      FAIL("expected runtime_error");
    } catch (const std::runtime_error& e) {
      CHECK(message_contains(e, "short.txt"));
      CHECK(message_contains(e, "17 keypoints"));
    }
  }

  SUBCASE("junk row names its position") {
    std::string text = valid_row + "not a pose row\n";
    for (int i = 0; i < 16; ++i) text += valid_row;
    try {
      read_pose_file(write_text("junk.txt", text));
      FAIL("expected runtime_error");
    } catch (const std::runtime_error& e) {
      CHECK(message_contains(e, "row 2"));
    }
  }

  SUBCASE("visibility must be 0 or 1") {
    std::string text = "0.1 0.2 2\n";
    for (int i = 0; i < 17; ++i) text += valid_row;
    CHECK_THROWS_AS(read_pose_file(write_text("vis.txt", text)), std::runtime_error);
  }

  SUBCASE("invisible keypoints must sit on the origin sentinel") {
    std::string text = "0.1 0.2 0\n";
    for (int i = 0; i < 17; ++i) text += valid_row;
    try {
      read_pose_file(write_text("sentinel.txt", text));
      FAIL("expected runtime_error");
    } catch (const std::runtime_error& e) {
      CHECK(message_contains(e, "sentinel.txt"));
      CHECK(message_contains(e, "invisible"));
    }
  }

  SUBCASE("trailing fields are rejected") {
    std::string text = "0.1 0.2 1 9\n";
    for (int i = 0; i < 17; ++i) text += valid_row;
    CHECK_THROWS_AS(read_pose_file(write_text("trail.txt", text)), std::runtime_error);
  }
}

TEST_CASE("manifest round trip keeps order and optional fields") {
  auto dir = temp_dir("manifest");
  Rng rng(3);
  std::vector<DatasetRecord> records(3);
  for (int i = 0; i < 3; ++i) {
    auto& rec = records[i];
    rec.image_path = "img" + std::to_string(i) + ".png";
    rec.pose_path = "img" + std::to_string(i) + ".pose.txt";
    rec.mask_path = (i == 1) ? "img1_mask.png" : "";
    rec.identity = (i == 2) ? 7 : -1;
    rec.pose = random_valid_pose(rng);
    write_pose_file(dir / rec.pose_path, rec.pose);
  }
  write_manifest(dir, records);

  auto loaded = load_dataset(dir);
  REQUIRE(loaded.size() == 3);
  for (int i = 0; i < 3; ++i) {
    CHECK(loaded[i].image_path == records[i].image_path);
    CHECK(loaded[i].pose_path == records[i].pose_path);
    CHECK(loaded[i].mask_path == records[i].mask_path);
    CHECK(loaded[i].identity == records[i].identity);
    CHECK(loaded[i].pose.coords == records[i].pose.coords);
  }
}

TEST_CASE("manifest failure modes") {
  auto dir = temp_dir("manbad");

  SUBCASE("missing manifest names the path") {
    try {
      load_dataset(dir);
      FAIL("expected runtime_error");
    } catch (const std::runtime_error& e) {
      CHECK(message_contains(e, "manifest"));
    }
  }

  SUBCASE("header-only manifest is an empty dataset") {
    write_manifest(dir, {});
    CHECK(load_dataset(dir).empty());
  }

  SUBCASE("missing header is rejected") {
    std::ofstream(dir / "manifest.tsv") << "a.png\tb.txt\t-\t-\n";
    CHECK_THROWS_AS(load_dataset(dir), std::runtime_error);
  }

  SUBCASE("wrong column count names the row") {
    write_manifest(dir, {});
    std::ofstream(dir / "manifest.tsv", std::ios::app) << "a.png\tb.txt\t-\n";
    try {
      load_dataset(dir);
      FAIL("expected runtime_error");
    } catch (const std::runtime_error& e) {
      CHECK(message_contains(e, "row 2"));
      CHECK(message_contains(e, "3 columns"));
    }
  }

  SUBCASE("bad identity names the row") {
    write_manifest(dir, {});
    std::ofstream(dir / "manifest.tsv", std::ios::app) << "a.png\tb.txt\t-\tseven\n";
    try {
      load_dataset(dir);
      FAIL("expected runtime_error");
    } catch (const std::runtime_error& e) {
      CHECK(message_contains(e, "row 2"));
      CHECK(message_contains(e, "identity"));
    }
  }
}

TEST_CASE("synth sample rendering") {
  SynthConfig cfg;
  cfg.image_h = 64;
  cfg.image_w = 32;
  cfg.seed = 21;

  SUBCASE("deterministic in (seed, index) regardless of call order") {
    auto direct = render_synth_sample(cfg, 3);
    for (int i = 0; i < 3; ++i) render_synth_sample(cfg, i);
    auto again = render_synth_sample(cfg, 3);
    CHECK(torch::equal(direct.image, again.image));
    CHECK(torch::equal(direct.fg_mask, again.fg_mask));
    CHECK(direct.pose.coords == again.pose.coords);
  }

  SUBCASE("pixel values and masks stay in contract") {
    for (int i = 0; i < 8; ++i) {
      auto s = render_synth_sample(cfg, i);
      REQUIRE(s.image.sizes() == torch::IntArrayRef({3, 64, 32}));
      CHECK(s.image.min().item<float>() >= -1.f);
      CHECK(s.image.max().item<float>() <= 1.f);
      CHECK(((s.fg_mask == 0) | (s.fg_mask == 1)).all().item<bool>());
      CHECK_NOTHROW(validate_pose(s.pose));
    }
  }

  SUBCASE("visible keypoints land inside the image") {
    for (int i = 0; i < 30; ++i) {
      auto s = render_synth_sample(cfg, i);
      for (int k = 0; k < kKeypoints; ++k) {
        if (!s.pose.visible(k)) continue;
        auto [u, v] = keypoint_pixel(s.pose, k, cfg.image_h, cfg.image_w);
        CHECK(u >= 0.f);
        CHECK(u <= cfg.image_w - 1.f);
        CHECK(v >= 0.f);
        CHECK(v <= cfg.image_h - 1.f);
      }
    }
  }

  SUBCASE("emitted mask equals the recomputed capsule coverage exactly") {
    for (int i = 0; i < 6; ++i) {
      auto s = render_synth_sample(cfg, i);
      auto oracle = coverage_from_pose(s.pose, cfg);
      CHECK(torch::equal(s.fg_mask, oracle));
      // and the figure is really painted: interior pixels differ from any
      // pure-background rendering only inside the mask
      CHECK(s.fg_mask.sum().item<double>() > 0.0);
    }
  }

  SUBCASE("full occlusion produces an empty figure") {
    SynthConfig occluded = cfg;
    occluded.occlusion_prob = 1.0;
    auto s = render_synth_sample(occluded, 0);
    CHECK(s.pose.visible_count() == 0);
    CHECK(s.fg_mask.sum().item<double>() == 0.0);
  }

  SUBCASE("config validation") {
    SynthConfig bad = cfg;
    bad.image_h = 8;
    CHECK_THROWS_AS(validate_synth_config(bad), std::invalid_argument);
    bad = cfg;
    bad.occlusion_prob = 1.5;
    CHECK_THROWS_AS(validate_synth_config(bad), std::invalid_argument);
    bad = cfg;
    bad.n_images = -1;
    CHECK_THROWS_AS(validate_synth_config(bad), std::invalid_argument);
  }
}

TEST_CASE("synth_generate writes a deterministic, loadable dataset") {
  SynthConfig cfg;
  cfg.n_images = 6;
  cfg.image_h = 64;
  cfg.image_w = 32;
  cfg.seed = 77;

  auto a = temp_dir("synth_a");
  auto b = temp_dir("synth_b");
  synth_generate(cfg, a);
  synth_generate(cfg, b);

  SUBCASE("rerun with the same seed is bit-identical") {
    CHECK(dir_fingerprint(a) == dir_fingerprint(b));
    SynthConfig other = cfg;
    other.seed = 78;
    auto c = temp_dir("synth_c");
    synth_generate(other, c);
    CHECK(dir_fingerprint(a) != dir_fingerprint(c));
  }

  SUBCASE("the dataset loads back with masks and matching poses") {
    auto records = load_dataset(a);
    REQUIRE(records.size() == 6);
    for (int i = 0; i < 6; ++i) {
      CHECK(records[i].identity == -1);
      CHECK_FALSE(records[i].mask_path.empty());
      auto rendered = render_synth_sample(cfg, i);
      CHECK(records[i].pose.coords == rendered.pose.coords);
      CHECK(torch::equal(read_mask_png(a / records[i].mask_path), rendered.fg_mask));
      // the PNG stores 8-bit channels, so the float render survives only up
      // to one quantization step
      auto reread = read_image_png(a / records[i].image_path);
      CHECK((reread - rendered.image).abs().max().item<float>() <= 1.f / 127.5f + 1e-6f);
    }
  }

  SUBCASE("saved mask matches coverage recomputed from the saved pose file") {
    auto records = load_dataset(a);
    for (const auto& rec : records) {
      auto saved_mask = read_mask_png(a / rec.mask_path);
      CHECK(torch::equal(saved_mask, coverage_from_pose(rec.pose, cfg)));
    }
  }

  SUBCASE("zero images still writes a valid empty manifest") {
    SynthConfig empty = cfg;
    empty.n_images = 0;
    auto d = temp_dir("synth_empty");
    synth_generate(empty, d);
    CHECK(load_dataset(d).empty());
  }
}

TEST_CASE("load_training_set precomputes aligned tensors") {
  SynthConfig scfg;
  scfg.n_images = 5;
  scfg.image_h = 64;
  scfg.image_w = 32;
  scfg.seed = 5;
  auto dir = temp_dir("tset");
  synth_generate(scfg, dir);

  PipelineConfig cfg;
  cfg.image_h = 64;
  cfg.image_w = 32;
  cfg.n_blocks = 4;
  cfg.roi_size = 24;

  TrainingSet set = load_training_set(dir, cfg);
  REQUIRE(set.size() == 5);
  CHECK(set.images.sizes() == torch::IntArrayRef({5, 3, 64, 32}));
  CHECK(set.heatmaps.sizes() == torch::IntArrayRef({5, 18, 64, 32}));
  CHECK(set.masks.sizes() == torch::IntArrayRef({5, 64, 32}));
  CHECK(set.pose_vectors.sizes() == torch::IntArrayRef({5, 54}));
  CHECK(set.rois.size() == 5);
  CHECK(set.poses.size() == 5);
  CHECK(set.identities == std::vector<int>(5, -1));
  for (const auto& m : set.fg_masks) CHECK(m.defined());

  // per-record tensors agree with direct calls on the loaded pose
  auto hm = render_heatmaps(set.poses[2], 64, 32, scaled_sigma(cfg));
  CHECK(torch::equal(set.heatmaps[2], hm));
  auto pm = make_pose_mask(set.poses[2], 64, 32, scaled_mask_radius(cfg));
  CHECK(torch::equal(set.masks[2], pm));
  CHECK(torch::equal(set.pose_vectors[2],
                     pose_vector_to_tensor(pose_to_vector(set.poses[2]))));

  SUBCASE("config dims must match the stored images") {
    PipelineConfig wrong = cfg;
    wrong.image_w = 64;
    try {
      load_training_set(dir, wrong);
      FAIL("expected runtime_error");
    } catch (const std::runtime_error& e) {
      CHECK(message_contains(e, "config wants"));
    }
  }

  SUBCASE("empty dataset is rejected") {
    auto empty = temp_dir("tset_empty");
    write_manifest(empty, {});
    CHECK_THROWS_AS(load_training_set(empty, cfg), std::runtime_error);
  }
}

}  // TEST_SUITE
