#pragma once

// shared helpers for the model-level suites: small configs that keep CPU
// runtimes in check, plus in-memory training sets so tests skip the disk

#include "dpig/data_io.hpp"
#include "dpig/pose_geometry.hpp"

namespace dpig_test {

using namespace dpig;

// smallest config the block stack accepts; for gradient checks
inline PipelineConfig tiny_config() {
  PipelineConfig cfg;
  cfg.image_h = 16;
  cfg.image_w = 8;
  cfg.n_blocks = 2;
  cfg.base_channels = 4;
  cfg.roi_size = 8;
  cfg.fg_dim = 14;
  cfg.bg_dim = 8;
  cfg.pose_dim = 8;
  cfg.fc_hidden = 16;
  cfg.batch_stage1 = 2;
  cfg.batch_pose = 8;
  cfg.batch_stage2 = 4;
  return validate_config(cfg);
}

// small but trainable; for short optimization runs
inline PipelineConfig small_config() {
  PipelineConfig cfg;
  cfg.image_h = 32;
  cfg.image_w = 16;
  cfg.n_blocks = 3;
  cfg.base_channels = 8;
  cfg.roi_size = 12;
  cfg.fg_dim = 28;
  cfg.bg_dim = 16;
  cfg.pose_dim = 16;
  cfg.fc_hidden = 64;
  cfg.batch_stage1 = 4;
  cfg.batch_pose = 32;
  cfg.batch_stage2 = 16;
  cfg.learning_rate = 2e-4;
  cfg.stage2_learning_rate = 1e-4;
  return validate_config(cfg);
}

inline PoseAnnotation random_valid_pose(Rng& rng, double vis_prob = 0.85) {
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

inline void fill_derived(TrainingSet& set, int64_t i, const PoseAnnotation& pose) {
  const auto& cfg = set.cfg;
  set.heatmaps[i] = render_heatmaps(pose, cfg.image_h, cfg.image_w, scaled_sigma(cfg));
  set.masks[i] = make_pose_mask(pose, cfg.image_h, cfg.image_w, scaled_mask_radius(cfg));
  set.pose_vectors[i] = pose_vector_to_tensor(pose_to_vector(pose));
  set.rois.push_back(compute_body_rois(pose, cfg.image_h, cfg.image_w, cfg.roi_margin));
  set.poses.push_back(pose);
}

inline TrainingSet empty_training_set(const PipelineConfig& cfg, int n) {
  TrainingSet set;
  set.cfg = cfg;
  set.images = torch::empty({n, 3, cfg.image_h, cfg.image_w}, torch::kFloat32);
  set.heatmaps = torch::empty({n, kKeypoints, cfg.image_h, cfg.image_w}, torch::kFloat32);
  set.masks = torch::empty({n, cfg.image_h, cfg.image_w}, torch::kFloat32);
  set.pose_vectors = torch::empty({n, kPoseVectorDim}, torch::kFloat32);
  return set;
}

// unstructured images + random poses; enough for shape and gradient work
inline TrainingSet random_training_set(const PipelineConfig& cfg, int n, uint64_t seed) {
  TrainingSet set = empty_training_set(cfg, n);
  Rng rng(seed);
  torch::manual_seed(static_cast<int64_t>(seed) + 10007);
  for (int64_t i = 0; i < n; ++i) {
    set.images[i] = torch::rand({3, cfg.image_h, cfg.image_w}) * 2 - 1;
    fill_derived(set, i, random_valid_pose(rng));
    set.fg_masks.emplace_back();
    set.identities.push_back(-1);
  }
  return set;
}

// rendered stick figures with ground-truth FG masks, no disk round trip;
// requires cfg dims of at least 16x16
inline TrainingSet synth_training_set(const PipelineConfig& cfg, int n, uint64_t seed) {
  SynthConfig scfg;
  scfg.n_images = n;
  scfg.image_h = cfg.image_h;
  scfg.image_w = cfg.image_w;
  scfg.seed = seed;
  TrainingSet set = empty_training_set(cfg, n);
  for (int64_t i = 0; i < n; ++i) {
    SynthSample s = render_synth_sample(scfg, static_cast<int>(i));
    set.images[i] = s.image;
    fill_derived(set, i, s.pose);
    set.fg_masks.push_back(s.fg_mask);
    set.identities.push_back(-1);
  }
  return set;
}

}  // namespace dpig_test
