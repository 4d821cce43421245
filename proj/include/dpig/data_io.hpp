#pragma once

#include <torch/torch.h>

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dpig/core.hpp"
#include "dpig/pose_geometry.hpp"
#include "dpig/util.hpp"

namespace dpig {

// A dataset directory holds manifest.tsv plus one PNG, one pose text file and
// (optionally) one foreground-mask PNG per sample. The manifest is UTF-8 TSV:
//   # image<TAB>pose<TAB>fg_mask<TAB>identity
// with paths relative to the dataset root; fg_mask and identity may be "-".
// Pose files are 18 lines of "x y visibility" (normalized coords, %.9g).

struct DatasetRecord {
  std::string image_path;              // relative to root
  std::string pose_path;
  std::string mask_path;               // empty if none
  int identity = -1;                   // -1 if unlabeled
  PoseAnnotation pose;
};

// Streams manifest rows in order; pose files are parsed per record, images are
// not touched. Throws std::runtime_error naming the offending row/file.
class DatasetStream {
 public:
  explicit DatasetStream(const std::filesystem::path& root);
  bool next(DatasetRecord& out);
  const std::filesystem::path& root() const { return root_; }

 private:
  std::filesystem::path root_;
  std::vector<std::string> lines_;
  size_t pos_ = 0;
};

std::vector<DatasetRecord> load_dataset(const std::filesystem::path& root);

void write_pose_file(const std::filesystem::path& path, const PoseAnnotation& pose);
PoseAnnotation read_pose_file(const std::filesystem::path& path);

// manifest writing helper shared by synth and the virtual-dataset generator
void write_manifest(const std::filesystem::path& root,
                    const std::vector<DatasetRecord>& records);

// Synthetic stick-figure dataset: colored capsule figures over gradient-plus-
// noise backgrounds, with exact foreground masks and full pose annotations.
struct SynthConfig {
  int n_images = 200;
  int image_h = 128;
  int image_w = 64;
  double occlusion_prob = 0.05;
  double bg_noise = 0.03;
  uint64_t seed = 1;
  // capsule radii as fractions of image height, fixed per config so tests can
  // recompute exact pixel coverage from the saved pose file alone
  double limb_radius_frac = 0.030;
  double torso_radius_frac = 0.055;
  double head_radius_frac = 0.085;

  int limb_radius() const;
  int torso_radius() const;
  int head_radius() const;
};

void validate_synth_config(const SynthConfig& cfg);

// body part ids used by the renderer's palette
enum class BodyPart { Head = 0, Torso, RightArm, LeftArm, RightLeg, LeftLeg };
// part painted for each skeleton_edges() entry / each keypoint disk
const std::array<BodyPart, 17>& edge_part_map();
const std::array<BodyPart, kKeypoints>& keypoint_part_map();

// one figure pose drawn from the joint-angle prior, fitted inside the image
PoseAnnotation sample_synth_pose(Rng& rng, const SynthConfig& cfg);

struct SynthSample {
  torch::Tensor image;    // [3,H,W]
  torch::Tensor fg_mask;  // [H,W], exactly the painted pixels
  PoseAnnotation pose;
};

// deterministic in (cfg.seed, index) only, independent of call order
SynthSample render_synth_sample(const SynthConfig& cfg, int index);

// writes images/poses/masks plus manifest.tsv under out_root
void synth_generate(const SynthConfig& cfg, const std::filesystem::path& out_root);

// Everything stage-I training needs, precomputed once per dataset.
struct TrainingSet {
  PipelineConfig cfg;
  torch::Tensor images;        // [N,3,H,W]
  torch::Tensor heatmaps;      // [N,18,H,W]
  torch::Tensor masks;         // [N,H,W] pose masks
  torch::Tensor pose_vectors;  // [N,54]
  std::vector<RoiSet> rois;
  std::vector<PoseAnnotation> poses;
  std::vector<torch::Tensor> fg_masks;  // GT masks, undefined tensor where absent
  std::vector<int> identities;
  int64_t size() const { return images.defined() ? images.size(0) : 0; }
};

TrainingSet load_training_set(const std::filesystem::path& root, const PipelineConfig& cfg);

}  // namespace dpig
