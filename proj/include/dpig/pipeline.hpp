#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dpig/core.hpp"
#include "dpig/stage1.hpp"
#include "dpig/stage2.hpp"

namespace dpig {

// Each factor of a generated image comes from one of three places: fresh
// Gaussian noise through the stage-II mapper, encoding a conditioning image,
// or an explicitly supplied embedding / raw pose.
enum class SourceMode { Sampled, Conditioned, Fixed };

const char* to_string(SourceMode mode);

struct FactorSource {
  SourceMode mode = SourceMode::Conditioned;
  std::optional<FactorEmbedding> fixed;      // Fixed via embedding
  std::optional<PoseAnnotation> fixed_pose;  // Fixed via raw keypoints (pose only)

  static FactorSource sampled() { return {SourceMode::Sampled, {}, {}}; }
  static FactorSource conditioned() { return {SourceMode::Conditioned, {}, {}}; }
  static FactorSource fixed_embedding(FactorEmbedding e) {
    return {SourceMode::Fixed, std::move(e), {}};
  }
  static FactorSource fixed_raw_pose(PoseAnnotation p) {
    return {SourceMode::Fixed, {}, std::move(p)};
  }
};

struct GenerationSources {
  FactorSource fg, bg, pose;
};

struct ConditioningInput {
  torch::Tensor image;  // [3,H,W]
  PoseAnnotation pose;
};

struct FactorProvenance {
  std::string mode;
  torch::Tensor z;          // defined only for sampled factors
  torch::Tensor embedding;  // fg/bg code, or the 54-d pose vector driving the heatmaps
  std::string embedding_hash;
};

struct GenerationResult {
  torch::Tensor image;
  FactorProvenance fg, bg, pose;
};

// fg and bg codes of one image in a single stem pass
struct EncodedFactors {
  FactorEmbedding fg, bg;
};
EncodedFactors encode_factors(Stage1Model& stage1, const torch::Tensor& image,
                              const PoseAnnotation& pose);

// decode explicit factors into an image (no sampling involved)
torch::Tensor compose(Stage1Model& stage1, const FactorEmbedding& fg,
                      const FactorEmbedding& bg, const PoseAnnotation& pose);

// Full generation: resolves each factor per its source (z draws in fixed
// fg/bg/pose order from gen), then composes. stage2 may be null when nothing
// is sampled; a conditioning input is required iff some factor is Conditioned.
GenerationResult generate(Stage1Model& stage1, Stage2Model* stage2,
                          const GenerationSources& sources,
                          const std::optional<ConditioningInput>& cond,
                          torch::Generator& gen);

// walks the chosen factor's noise from z1 to z2 in `steps` evenly spaced
// points (endpoints included); the other factors are resolved once and held
std::vector<GenerationResult> interpolate_between(
    Stage1Model& stage1, Stage2Model& stage2, FactorKind kind, const torch::Tensor& z1,
    const torch::Tensor& z2, int steps, const GenerationSources& base,
    const std::optional<ConditioningInput>& cond, torch::Generator& gen);

std::vector<GenerationResult> interpolate_gaussian(
    Stage1Model& stage1, Stage2Model& stage2, FactorKind kind, int steps,
    const GenerationSources& base, const std::optional<ConditioningInput>& cond,
    torch::Generator& gen);

struct InvertOptions {
  int steps = 1000;
  double lr = 1e-2;
  double mu = 1e-4;  // weight of the ||z||^2 prior
};

struct InversionResult {
  torch::Tensor z;
  double residual;  // ||mapper(z) - target|| / ||target||
  std::vector<double> residual_log;
};

// Adam on z minimizing ||mapper(z) - target||^2 + mu ||z||^2 from z = 0.
InversionResult invert_embedding(Stage2Model& stage2, const FactorEmbedding& target,
                                 const InvertOptions& opts = {});

struct InverseInterpolation {
  std::vector<GenerationResult> frames;
  InversionResult from, to;
};

// inverts the chosen factor of two real images and interpolates in z space;
// the remaining factors are conditioned on `a`
InverseInterpolation inverse_interpolate(Stage1Model& stage1, Stage2Model& stage2,
                                         FactorKind kind, const ConditioningInput& a,
                                         const ConditioningInput& b, int steps,
                                         const InvertOptions& opts = {});

// unit-norm fg code used as the re-ID descriptor
torch::Tensor extract_reid_feature(Stage1Model& stage1, const torch::Tensor& image,
                                   const PoseAnnotation& pose);
torch::Tensor extract_reid_features(Stage1Model& stage1, const TrainingSet& data);

struct VirtualDatasetSpec {
  int n_identities = 500;
  int images_per_identity = 24;
  std::vector<PoseAnnotation> pose_pool;
  uint64_t seed = 0;
};

// Samples one fg code per identity and fresh bg/pose per image, writes
// {identity:04d}_{index:02d}.png plus pose files, the standard manifest.tsv,
// and virtual_manifest.tsv with identity/file/fg hash/pose index/bg seed rows.
// Deterministic in (seed, identity, index) regardless of sharding.
void generate_virtual_dataset(Stage1Model& stage1, Stage2Model& stage2,
                              const VirtualDatasetSpec& spec,
                              const std::filesystem::path& out_root);

}  // namespace dpig
