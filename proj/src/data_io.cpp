#include "dpig/data_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "dpig/image_io.hpp"

namespace dpig {

namespace {

constexpr const char* kManifestHeader = "# image\tpose\tfg_mask\tidentity";

std::string fmt_coord(float v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(v));
  return std::string(buf);
}

}  // namespace

void write_pose_file(const std::filesystem::path& path, const PoseAnnotation& pose) {
  validate_pose(pose);
  if (!path.parent_path().empty()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open pose file for writing: " + path.string());
  for (int i = 0; i < kKeypoints; ++i)
    out << fmt_coord(pose.x(i)) << ' ' << fmt_coord(pose.y(i)) << ' '
        << (pose.visible(i) ? 1 : 0) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

PoseAnnotation read_pose_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open pose file: " + path.string());
  PoseAnnotation pose;
  std::string line;
  int row = 0;
  while (std::getline(in, line)) {
    std::string s = trim(line);
    if (s.empty()) continue;
    if (row >= kKeypoints)
      throw std::runtime_error("pose file " + path.string() + " has more than 18 keypoints");
    std::replace(s.begin(), s.end(), ',', ' ');
    std::istringstream ls(s);
    double x, y, v;
    if (!(ls >> x >> y >> v))
      throw std::runtime_error("pose file " + path.string() + " row " +
                               std::to_string(row + 1) + " is not 'x y visibility'");
    std::string extra;
    if (ls >> extra)
      throw std::runtime_error("pose file " + path.string() + " row " +
                               std::to_string(row + 1) + " has trailing fields");
    if (v != 0.0 && v != 1.0)
      throw std::runtime_error("pose file " + path.string() + " row " +
                               std::to_string(row + 1) + " visibility must be 0 or 1");
    pose.set(row, static_cast<float>(x), static_cast<float>(y), v != 0.0);
    ++row;
  }
  if (row != kKeypoints)
    throw std::runtime_error("pose file " + path.string() + " has " + std::to_string(row) +
                             " keypoints, expected 18");
  try {
    validate_pose(pose);
  } catch (const std::invalid_argument& e) {
    throw std::runtime_error("pose file " + path.string() + ": " + e.what());
  }
  return pose;
}

DatasetStream::DatasetStream(const std::filesystem::path& root) : root_(root) {
  auto manifest = root / "manifest.tsv";
  std::ifstream in(manifest);
  if (!in) throw std::runtime_error("cannot open manifest: " + manifest.string());
  std::string line;
  bool saw_header = false;
  while (std::getline(in, line)) {
    if (!saw_header) {
      if (trim(line) != kManifestHeader)
        throw std::runtime_error("manifest " + manifest.string() +
                                 " missing header line '" + kManifestHeader + "'");
      saw_header = true;
      continue;
    }
    if (!trim(line).empty()) lines_.push_back(line);
  }
  if (!saw_header)
    throw std::runtime_error("manifest " + manifest.string() + " is empty");
}

bool DatasetStream::next(DatasetRecord& out) {
  if (pos_ >= lines_.size()) return false;
  const std::string& line = lines_[pos_];
  size_t lineno = pos_ + 2;  // header is line 1
  ++pos_;

  auto cols = split(line, '\t');
  if (cols.size() != 4)
    throw std::runtime_error("manifest row " + std::to_string(lineno) + " has " +
                             std::to_string(cols.size()) + " columns, expected 4");
  DatasetRecord rec;
  rec.image_path = trim(cols[0]);
  rec.pose_path = trim(cols[1]);
  std::string mask = trim(cols[2]);
  rec.mask_path = (mask == "-") ? "" : mask;
  std::string ident = trim(cols[3]);
  if (ident == "-") {
    rec.identity = -1;
  } else {
    try {
      size_t used = 0;
      rec.identity = std::stoi(ident, &used);
      if (used != ident.size() || rec.identity < 0) throw std::invalid_argument(ident);
    } catch (const std::exception&) {
      throw std::runtime_error("manifest row " + std::to_string(lineno) +
                               " has bad identity: " + ident);
    }
  }
  if (rec.image_path.empty() || rec.pose_path.empty())
    throw std::runtime_error("manifest row " + std::to_string(lineno) + " has empty paths");
  rec.pose = read_pose_file(root_ / rec.pose_path);
  out = std::move(rec);
  return true;
}

std::vector<DatasetRecord> load_dataset(const std::filesystem::path& root) {
  DatasetStream stream(root);
  std::vector<DatasetRecord> records;
  DatasetRecord rec;
  while (stream.next(rec)) records.push_back(rec);
  return records;
}

void write_manifest(const std::filesystem::path& root,
                    const std::vector<DatasetRecord>& records) {
  std::filesystem::create_directories(root);
  auto path = root / "manifest.tsv";
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open manifest for writing: " + path.string());
  out << kManifestHeader << '\n';
  for (const auto& rec : records) {
    out << rec.image_path << '\t' << rec.pose_path << '\t'
        << (rec.mask_path.empty() ? "-" : rec.mask_path) << '\t';
    if (rec.identity < 0)
      out << '-';
    else
      out << rec.identity;
    out << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

int SynthConfig::limb_radius() const {
  return std::max(1, static_cast<int>(std::lround(limb_radius_frac * image_h)));
}
int SynthConfig::torso_radius() const {
  return std::max(1, static_cast<int>(std::lround(torso_radius_frac * image_h)));
}
int SynthConfig::head_radius() const {
  return std::max(1, static_cast<int>(std::lround(head_radius_frac * image_h)));
}

void validate_synth_config(const SynthConfig& cfg) {
  if (cfg.n_images < 0) throw std::invalid_argument("n_images must be non-negative");
  if (cfg.image_h < 16 || cfg.image_w < 16)
    throw std::invalid_argument("synth images must be at least 16x16");
  if (cfg.occlusion_prob < 0 || cfg.occlusion_prob > 1)
    throw std::invalid_argument("occlusion_prob must lie in [0,1]");
  if (cfg.bg_noise < 0 || cfg.bg_noise > 1)
    throw std::invalid_argument("bg_noise must lie in [0,1]");
  if (cfg.limb_radius_frac <= 0 || cfg.torso_radius_frac <= 0 || cfg.head_radius_frac <= 0)
    throw std::invalid_argument("capsule radius fractions must be positive");
}

const std::array<BodyPart, 17>& edge_part_map() {
  // same order as skeleton_edges()
  static const std::array<BodyPart, 17> parts = {{
      BodyPart::Torso, BodyPart::RightArm, BodyPart::RightArm,
      BodyPart::Torso, BodyPart::LeftArm, BodyPart::LeftArm,
      BodyPart::Torso, BodyPart::RightLeg, BodyPart::RightLeg,
      BodyPart::Torso, BodyPart::LeftLeg, BodyPart::LeftLeg,
      BodyPart::Head, BodyPart::Head, BodyPart::Head, BodyPart::Head, BodyPart::Head,
  }};
  return parts;
}

const std::array<BodyPart, kKeypoints>& keypoint_part_map() {
  static const std::array<BodyPart, kKeypoints> parts = {{
      BodyPart::Head, BodyPart::Torso,
      BodyPart::RightArm, BodyPart::RightArm, BodyPart::RightArm,
      BodyPart::LeftArm, BodyPart::LeftArm, BodyPart::LeftArm,
      BodyPart::RightLeg, BodyPart::RightLeg, BodyPart::RightLeg,
      BodyPart::LeftLeg, BodyPart::LeftLeg, BodyPart::LeftLeg,
      BodyPart::Head, BodyPart::Head, BodyPart::Head, BodyPart::Head,
  }};
  return parts;
}

namespace {

struct Vec2 {
  double x = 0, y = 0;
};

Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }
Vec2 dir(double angle) { return {std::cos(angle), std::sin(angle)}; }

// candidate base colors per part, RGB in [-1,1]; a small jitter is added per image
const std::array<std::array<std::array<float, 3>, 4>, 6>& part_palette() {
  static const std::array<std::array<std::array<float, 3>, 4>, 6> palette = {{
      // head: skin/hair tones
      {{{0.85f, 0.55f, 0.35f}, {0.65f, 0.35f, 0.15f}, {0.95f, 0.75f, 0.55f}, {0.45f, 0.20f, 0.05f}}},
      // torso: shirt colors
      {{{0.9f, -0.6f, -0.6f}, {-0.6f, -0.2f, 0.9f}, {-0.2f, 0.8f, -0.3f}, {0.9f, 0.8f, -0.5f}}},
      // right arm
      {{{0.8f, -0.4f, -0.5f}, {-0.5f, -0.1f, 0.8f}, {0.85f, 0.6f, 0.4f}, {-0.3f, 0.7f, 0.7f}}},
      // left arm
      {{{0.8f, -0.4f, -0.5f}, {-0.5f, -0.1f, 0.8f}, {0.85f, 0.6f, 0.4f}, {-0.3f, 0.7f, 0.7f}}},
      // right leg: pants
      {{{-0.7f, -0.7f, -0.2f}, {-0.8f, -0.8f, -0.8f}, {-0.1f, -0.5f, 0.6f}, {0.4f, 0.3f, -0.7f}}},
      // left leg
      {{{-0.7f, -0.7f, -0.2f}, {-0.8f, -0.8f, -0.8f}, {-0.1f, -0.5f, 0.6f}, {0.4f, 0.3f, -0.7f}}},
  }};
  return palette;
}

std::array<std::array<float, 3>, 6> sample_part_colors(Rng& rng) {
  std::array<std::array<float, 3>, 6> colors;
  const auto& palette = part_palette();
  for (int p = 0; p < 6; ++p) {
    int pick = static_cast<int>(rng.uniform_int(4));
    for (int c = 0; c < 3; ++c) {
      double v = palette[p][pick][c] + rng.uniform(-0.08, 0.08);
      colors[p][c] = static_cast<float>(std::clamp(v, -1.0, 1.0));
    }
  }
  return colors;
}

double seg_dist2(double px, double py, Vec2 a, Vec2 b) {
  double dx = b.x - a.x, dy = b.y - a.y;
  double len2 = dx * dx + dy * dy;
  double t = 0.0;
  if (len2 > 0.0) t = std::clamp(((px - a.x) * dx + (py - a.y) * dy) / len2, 0.0, 1.0);
  double cx = a.x + t * dx - px;
  double cy = a.y + t * dy - py;
  return cx * cx + cy * cy;
}

}  // namespace

PoseAnnotation sample_synth_pose(Rng& rng, const SynthConfig& cfg) {
  const double h = cfg.image_h, w = cfg.image_w;
  const double th = h * rng.uniform(0.62, 0.80);  // figure height budget
  const double down = M_PI / 2;                   // +y is down in pixel space

  const double head_len = 0.16 * th;
  const double torso_len = 0.30 * th;
  const double upper_arm = 0.16 * th, fore_arm = 0.15 * th;
  const double thigh = 0.22 * th, shin = 0.21 * th;
  const double shoulder_half = 0.11 * th * rng.uniform(0.9, 1.1);
  const double hip_half = 0.07 * th * rng.uniform(0.9, 1.1);

  std::array<Vec2, kKeypoints> pt{};
  Vec2 neck{w * 0.5, h * 0.3};

  double torso_angle = down + rng.uniform(-0.10, 0.10);
  Vec2 midhip = neck + torso_len * dir(torso_angle);
  Vec2 perp = dir(torso_angle - M_PI / 2);  // roughly +x

  pt[1] = neck;
  pt[2] = neck - shoulder_half * perp;  // right side sits at -x (camera facing)
  pt[5] = neck + shoulder_half * perp;
  pt[8] = midhip - hip_half * perp;
  pt[11] = midhip + hip_half * perp;

  // arms; positive relative angle swings the right side outward (-x)
  double ra = down + rng.uniform(-0.25, 1.1);
  pt[3] = pt[2] + upper_arm * dir(ra);
  pt[4] = pt[3] + fore_arm * dir(ra + rng.uniform(-0.4, 1.2));
  double la = down - rng.uniform(-0.25, 1.1);
  pt[6] = pt[5] + upper_arm * dir(la);
  pt[7] = pt[6] + fore_arm * dir(la - rng.uniform(-0.4, 1.2));

  // legs; knees bend backward
  double rt = down + rng.uniform(-0.06, 0.5);
  pt[9] = pt[8] + thigh * dir(rt);
  pt[10] = pt[9] + shin * dir(rt + rng.uniform(-0.75, 0.06));
  double lt = down - rng.uniform(-0.06, 0.5);
  pt[12] = pt[11] + thigh * dir(lt);
  pt[13] = pt[12] + shin * dir(lt - rng.uniform(-0.75, 0.06));

  // head: nose above the neck, eyes/ears around it
  double head_angle = -down + rng.uniform(-0.22, 0.22);
  pt[0] = neck + head_len * dir(head_angle);
  Vec2 hd = dir(head_angle);
  Vec2 hp{-hd.y, hd.x};
  pt[14] = pt[0] + 0.04 * th * hd - 0.030 * th * hp;
  pt[15] = pt[0] + 0.04 * th * hd + 0.030 * th * hp;
  pt[16] = pt[0] + 0.015 * th * hd - 0.060 * th * hp;
  pt[17] = pt[0] + 0.015 * th * hd + 0.060 * th * hp;

  // fit the figure (plus capsule padding) inside the frame, then place it
  double pad = cfg.head_radius() + 2.0;
  double x0 = pt[0].x, x1 = pt[0].x, y0 = pt[0].y, y1 = pt[0].y;
  for (const auto& v : pt) {
    x0 = std::min(x0, v.x);
    x1 = std::max(x1, v.x);
    y0 = std::min(y0, v.y);
    y1 = std::max(y1, v.y);
  }
  double avail_w = (w - 1) - 2 * pad, avail_h = (h - 1) - 2 * pad;
  if (avail_w < 4) avail_w = 4;
  if (avail_h < 4) avail_h = 4;
  double scale = std::min({1.0, avail_w / std::max(1e-6, x1 - x0),
                           avail_h / std::max(1e-6, y1 - y0)});
  Vec2 center{(x0 + x1) / 2, (y0 + y1) / 2};
  for (auto& v : pt) v = center + scale * (v - center);
  x0 = center.x + scale * (x0 - center.x);
  x1 = center.x + scale * (x1 - center.x);
  y0 = center.y + scale * (y0 - center.y);
  y1 = center.y + scale * (y1 - center.y);

  double tx_lo = pad - x0, tx_hi = (w - 1 - pad) - x1;
  double ty_lo = pad - y0, ty_hi = (h - 1 - pad) - y1;
  double tx = rng.uniform(std::min(tx_lo, tx_hi), std::max(tx_lo, tx_hi));
  double ty = rng.uniform(std::min(ty_lo, ty_hi), std::max(ty_lo, ty_hi));
  for (auto& v : pt) v = v + Vec2{tx, ty};

  PoseAnnotation pose;
  for (int i = 0; i < kKeypoints; ++i) {
    float nx = static_cast<float>(std::clamp(pt[i].x / (w - 1) * 2 - 1, -1.0, 1.0));
    float ny = static_cast<float>(std::clamp(pt[i].y / (h - 1) * 2 - 1, -1.0, 1.0));
    pose.set(i, nx, ny, true);
  }
  for (int i = 0; i < kKeypoints; ++i)
    if (rng.bernoulli(cfg.occlusion_prob)) pose.set(i, 0.f, 0.f, false);
  return pose;
}

SynthSample render_synth_sample(const SynthConfig& cfg, int index) {
  validate_synth_config(cfg);
  Rng rng = Rng(cfg.seed).fork(static_cast<uint64_t>(index));

  const int h = cfg.image_h, w = cfg.image_w;
  PoseAnnotation pose = sample_synth_pose(rng, cfg);
  auto colors = sample_part_colors(rng);

  // background: linear gradient between two colors plus per-pixel noise
  std::array<float, 3> c0, c1;
  for (int c = 0; c < 3; ++c) c0[c] = static_cast<float>(rng.uniform(-0.9, 0.9));
  for (int c = 0; c < 3; ++c) c1[c] = static_cast<float>(rng.uniform(-0.9, 0.9));
  double phi = rng.uniform(0, 2 * M_PI);
  double cphi = std::cos(phi), sphi = std::sin(phi);

  auto image = torch::empty({3, h, w}, torch::kFloat32);
  auto mask = torch::zeros({h, w}, torch::kFloat32);
  auto img = image.accessor<float, 3>();
  auto msk = mask.accessor<float, 2>();

  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double t = (x / double(w - 1) - 0.5) * cphi + (y / double(h - 1) - 0.5) * sphi + 0.5;
      t = std::clamp(t, 0.0, 1.0);
      for (int c = 0; c < 3; ++c) {
        double v = c0[c] + (c1[c] - c0[c]) * t + cfg.bg_noise * rng.uniform(-1.0, 1.0);
        img[c][y][x] = static_cast<float>(std::clamp(v, -1.0, 1.0));
      }
    }
  }

  // figure: keypoint disks first, then limb capsules; order fixed for determinism
  std::array<Vec2, kKeypoints> px;
  for (int i = 0; i < kKeypoints; ++i) {
    auto [u, v] = keypoint_pixel(pose, i, h, w);
    px[i] = {u, v};
  }

  auto paint = [&](double dist2_limit, Vec2 a, Vec2 b, const std::array<float, 3>& col) {
    double r = std::sqrt(dist2_limit);
    int yy0 = std::max(0, static_cast<int>(std::floor(std::min(a.y, b.y) - r)));
    int yy1 = std::min(h - 1, static_cast<int>(std::ceil(std::max(a.y, b.y) + r)));
    int xx0 = std::max(0, static_cast<int>(std::floor(std::min(a.x, b.x) - r)));
    int xx1 = std::min(w - 1, static_cast<int>(std::ceil(std::max(a.x, b.x) + r)));
    for (int y = yy0; y <= yy1; ++y)
      for (int x = xx0; x <= xx1; ++x) {
        if (seg_dist2(x, y, a, b) <= dist2_limit) {
          for (int c = 0; c < 3; ++c) img[c][y][x] = col[c];
          msk[y][x] = 1.f;
        }
      }
  };

  const auto& kp_parts = keypoint_part_map();
  for (int i = 0; i < kKeypoints; ++i) {
    if (!pose.visible(i)) continue;
    double r = (i == 0) ? cfg.head_radius() : cfg.limb_radius();
    paint(r * r, px[i], px[i], colors[static_cast<int>(kp_parts[i])]);
  }
  const auto& edges = skeleton_edges();
  const auto& edge_parts = edge_part_map();
  for (size_t e = 0; e < edges.size(); ++e) {
    auto [a, b] = edges[e];
    if (!pose.visible(a) || !pose.visible(b)) continue;
    double r = (edge_parts[e] == BodyPart::Torso) ? cfg.torso_radius() : cfg.limb_radius();
    paint(r * r, px[a], px[b], colors[static_cast<int>(edge_parts[e])]);
  }

  return {image, mask, pose};
}

void synth_generate(const SynthConfig& cfg, const std::filesystem::path& out_root) {
  validate_synth_config(cfg);
  std::filesystem::create_directories(out_root);
  std::vector<DatasetRecord> records;
  records.reserve(cfg.n_images);
  for (int i = 0; i < cfg.n_images; ++i) {
    SynthSample sample = render_synth_sample(cfg, i);
    char stem[32];
    std::snprintf(stem, sizeof(stem), "synth_%05d", i);
    DatasetRecord rec;
    rec.image_path = std::string(stem) + ".png";
    rec.pose_path = std::string(stem) + ".pose.txt";
    rec.mask_path = std::string(stem) + "_mask.png";
    rec.identity = -1;
    rec.pose = sample.pose;
    write_image_png(out_root / rec.image_path, sample.image);
    write_mask_png(out_root / rec.mask_path, sample.fg_mask);
    write_pose_file(out_root / rec.pose_path, sample.pose);
    records.push_back(std::move(rec));
  }
  write_manifest(out_root, records);
}

TrainingSet load_training_set(const std::filesystem::path& root, const PipelineConfig& cfg) {
  auto records = load_dataset(root);
  if (records.empty()) throw std::runtime_error("dataset at " + root.string() + " is empty");

  TrainingSet set;
  set.cfg = cfg;
  int64_t n = static_cast<int64_t>(records.size());
  set.images = torch::empty({n, 3, cfg.image_h, cfg.image_w}, torch::kFloat32);
  set.heatmaps = torch::empty({n, kKeypoints, cfg.image_h, cfg.image_w}, torch::kFloat32);
  set.masks = torch::empty({n, cfg.image_h, cfg.image_w}, torch::kFloat32);
  set.pose_vectors = torch::empty({n, kPoseVectorDim}, torch::kFloat32);
  set.rois.reserve(records.size());
  set.poses.reserve(records.size());
  set.fg_masks.reserve(records.size());
  set.identities.reserve(records.size());

  double sigma = scaled_sigma(cfg);
  int radius = scaled_mask_radius(cfg);
  for (int64_t i = 0; i < n; ++i) {
    const auto& rec = records[i];
    auto img = read_image_png(root / rec.image_path);
    if (img.size(1) != cfg.image_h || img.size(2) != cfg.image_w)
      throw std::runtime_error("image " + rec.image_path + " is " +
                               std::to_string(img.size(2)) + "x" + std::to_string(img.size(1)) +
                               ", config wants " + std::to_string(cfg.image_w) + "x" +
                               std::to_string(cfg.image_h));
    set.images[i] = img;
    set.heatmaps[i] = render_heatmaps(rec.pose, cfg.image_h, cfg.image_w, sigma);
    set.masks[i] = make_pose_mask(rec.pose, cfg.image_h, cfg.image_w, radius);
    set.pose_vectors[i] = pose_vector_to_tensor(pose_to_vector(rec.pose));
    set.rois.push_back(compute_body_rois(rec.pose, cfg.image_h, cfg.image_w, cfg.roi_margin));
    set.poses.push_back(rec.pose);
    set.fg_masks.push_back(rec.mask_path.empty() ? torch::Tensor()
                                                 : read_mask_png(root / rec.mask_path));
    set.identities.push_back(rec.identity);
  }
  return set;
}

}  // namespace dpig
