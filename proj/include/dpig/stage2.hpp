#pragma once

#include <torch/torch.h>

#include <array>
#include <filesystem>
#include <functional>
#include <vector>

#include "dpig/checkpoint.hpp"
#include "dpig/core.hpp"
#include "dpig/stage1.hpp"

namespace dpig {

// plain 4-layer MLP critic (no clipping here; the training loop clips)
struct FcCriticImpl : torch::nn::Module {
  FcCriticImpl(int in_dim, int hidden);
  torch::Tensor forward(torch::Tensor x);  // [B,K] -> [B]
  torch::nn::Linear fc1{nullptr}, fc2{nullptr}, fc3{nullptr}, head{nullptr};
};
TORCH_MODULE(FcCritic);

// Stage II: one Gaussian-noise-to-embedding mapper plus one Wasserstein critic
// per factor kind. Noise dim equals the embedding dim of the kind.
class Stage2Model {
 public:
  explicit Stage2Model(const PipelineConfig& cfg);

  const PipelineConfig& config() const { return cfg_; }

  FactorEmbedding map_noise(const torch::Tensor& z, FactorKind kind);
  double critic_embedding(const FactorEmbedding& e);

  torch::Tensor map_forward(const torch::Tensor& z, FactorKind kind);      // [B,K]->[B,K]
  torch::Tensor critic_forward(const torch::Tensor& e, FactorKind kind);   // [B,K]->[B]

  FcStack& mapper(FactorKind kind) { return mappers_[static_cast<int>(kind)]; }
  FcCritic& critic(FactorKind kind) { return critics_[static_cast<int>(kind)]; }

  bool is_trained(FactorKind kind) const { return trained_[static_cast<int>(kind)]; }
  void mark_trained(FactorKind kind) { trained_[static_cast<int>(kind)] = true; }

  NamedTensors named_parameters() const;

 private:
  PipelineConfig cfg_;
  std::vector<FcStack> mappers_;
  std::vector<FcCritic> critics_;
  std::array<bool, 3> trained_{};
};

struct Stage2History {
  std::vector<double> critic_value;  // Eq. 4 estimate after each critic cycle
  std::vector<double> mapper_value;  // mean critic score on mapped samples
};

struct TrainStage2Options {
  long iterations = -1;  // mapper updates; -1 means config value
  bool verbose = false;
  long log_every = 200;
  std::function<bool(long, const Stage2History&)> should_stop;
};

// WGAN with weight clipping: n_critic critic steps (each followed by clipping
// every critic parameter to [-c,c]), then one mapper step, per iteration.
Stage2History train_stage2(Stage2Model& model, const torch::Tensor& real_embeddings,
                           FactorKind kind, const TrainStage2Options& opts = {});

Checkpoint make_stage2_checkpoint(const Stage2Model& model, uint64_t iteration);
void save_stage2_model(const std::filesystem::path& path, const Stage2Model& model,
                       uint64_t iteration);
Stage2Model load_stage2_model(const std::filesystem::path& path);
Stage2Model stage2_from_checkpoint(const Checkpoint& ckpt);

}  // namespace dpig
