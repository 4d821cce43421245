#pragma once

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>

namespace dpig {

constexpr int kKeypoints = 18;
constexpr int kPoseVectorDim = 3 * kKeypoints;  // 36 coords + 18 visibility flags
constexpr int kNumRois = 7;
constexpr double kRefImageHeight = 128.0;  // sigma / mask radius are quoted at this height

// Keypoint convention (18 joints): 0 nose, 1 neck, 2/3/4 right shoulder/elbow/wrist,
// 5/6/7 left shoulder/elbow/wrist, 8/9/10 right hip/knee/ankle, 11/12/13 left
// hip/knee/ankle, 14/15 right/left eye, 16/17 right/left ear.

enum class FactorKind { FG = 0, BG = 1, POSE = 2 };

const char* to_string(FactorKind kind);
FactorKind factor_kind_from_string(const std::string& name);

// Keypoint coordinates are normalized to [-1,1] per axis (align-corners: -1 and +1
// land on the outermost pixel centers). Invisible keypoints sit at the (0,0)
// sentinel; the visibility flag alone carries occlusion.
struct PoseAnnotation {
  std::array<float, 2 * kKeypoints> coords{};   // x0,y0,x1,y1,...
  std::array<uint8_t, kKeypoints> visibility{}; // 0 or 1

  float x(int i) const { return coords[2 * i]; }
  float y(int i) const { return coords[2 * i + 1]; }
  bool visible(int i) const { return visibility[i] != 0; }
  void set(int i, float px, float py, bool vis) {
    coords[2 * i] = px;
    coords[2 * i + 1] = py;
    visibility[i] = vis ? 1 : 0;
  }
  int visible_count() const {
    int n = 0;
    for (auto v : visibility) n += (v != 0);
    return n;
  }
};

// throws std::invalid_argument on non-finite / out-of-range coords or visibility
// flags outside {0,1}
void validate_pose(const PoseAnnotation& pose);

// Flat 54-dim pose state: 36 coords (x,y per keypoint, row-major) followed by the
// 18 visibility flags as floats. This is the pose autoencoder's in/out format.
struct PoseVector {
  std::array<float, kPoseVectorDim> values{};
};

PoseVector pose_to_vector(const PoseAnnotation& pose);
// Visibility entries binarize at >= 0.5; visible coords are clamped back to
// [-1,1], invisible ones reset to the (0,0) sentinel.
PoseAnnotation vector_to_pose(const PoseVector& v);

torch::Tensor pose_vector_to_tensor(const PoseVector& v);  // [54] float32
PoseVector tensor_to_pose_vector(const torch::Tensor& t);

struct PipelineConfig {
  // image geometry
  int image_h = 128;
  int image_w = 64;

  // conv net shape
  int n_blocks = 5;        // residual blocks per encoder/decoder path
  int base_channels = 32;  // width of block 0; block k has base*(k+1)

  // pose geometry
  int roi_size = 48;          // body ROIs are resampled to roi_size x roi_size
  double roi_margin = 0.10;   // fraction of box size added on each side
  double heatmap_sigma = 6.0; // px at the 128-px reference height
  int mask_radius = 8;        // px at the 128-px reference height

  // embedding dims
  int fg_dim = 224;   // 7 ROIs x 32; must stay divisible by 7
  int bg_dim = 128;
  int pose_dim = 32;  // pose autoencoder bottleneck; stage-II noise dim per kind
  int fc_hidden = 512;

  // losses / adversarial setup
  double l1_weight = 10.0;
  double clip_value = 0.01;
  int n_critic = 5;

  // optimization
  double adam_beta1 = 0.5;
  double adam_beta2 = 0.999;
  double learning_rate = 2e-5;         // stage-I GAN
  double pose_learning_rate = 1e-3;    // pose autoencoder
  double stage2_learning_rate = 2e-5;  // stage-II WGAN

  // schedule
  int batch_stage1 = 16;
  int batch_pose = 64;
  int batch_stage2 = 32;
  long iters_stage1 = 70000;
  long iters_pose = 30000;
  long iters_stage2 = 30000;
  long checkpoint_every = 1000;

  long rng_seed = 0;
};

// Returns the validated config (unchanged); throws std::invalid_argument with a
// message naming the offending field.
PipelineConfig validate_config(const PipelineConfig& cfg);

// Flat "key = value" text, '#' comments, blank lines ignored, unknown keys are
// errors, later duplicates win. parse/serialize round-trip exactly.
PipelineConfig parse_config(const std::string& text);
PipelineConfig load_config(const std::filesystem::path& path);
std::string config_to_text(const PipelineConfig& cfg);

int embedding_dim(FactorKind kind, const PipelineConfig& cfg);

// A factor embedding is a 1-D float vector tagged with which factor it encodes.
struct FactorEmbedding {
  FactorKind kind = FactorKind::FG;
  torch::Tensor values;  // [embedding_dim(kind, cfg)] float32
};

FactorEmbedding make_embedding(FactorKind kind, torch::Tensor values,
                               const PipelineConfig& cfg);
void check_embedding(const FactorEmbedding& e, const PipelineConfig& cfg);

// Images are [3,H,W] float32 in [-1,1]. Masks are [H,W] float32 in {0,1}.
// Heatmap stacks are [18,H,W] float32 in [0,1].
void check_image(const torch::Tensor& img, const PipelineConfig& cfg);
void check_mask(const torch::Tensor& mask, const PipelineConfig& cfg);

// effective values for this config's image height (linear in image_h)
double scaled_sigma(const PipelineConfig& cfg);
int scaled_mask_radius(const PipelineConfig& cfg);

}  // namespace dpig
