#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <functional>
#include <vector>

#include "dpig/checkpoint.hpp"
#include "dpig/core.hpp"
#include "dpig/data_io.hpp"
#include "dpig/pose_geometry.hpp"

namespace dpig {

// Building blocks. Convention throughout: ReLU after every layer except
// bottleneck/output heads; residual blocks are two stride-1 3x3 convs with an
// identity skip; stride-2 3x3 transition convs between blocks carry the channel
// increase (width grows linearly with block index: base * (k+1)).

struct ConvResBlockImpl : torch::nn::Module {
  explicit ConvResBlockImpl(int channels);
  torch::Tensor forward(torch::Tensor x);
  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr};
};
TORCH_MODULE(ConvResBlock);

struct ConvEncoderImpl : torch::nn::Module {
  ConvEncoderImpl(int in_channels, int in_h, int in_w, int n_blocks, int base_channels,
                  int out_dim);
  torch::Tensor forward(torch::Tensor x);  // [B,in,H,W] -> [B,out_dim]
  torch::nn::Conv2d entry{nullptr};
  torch::nn::ModuleList blocks, transitions;
  torch::nn::Linear head{nullptr};
};
TORCH_MODULE(ConvEncoder);

// full-resolution feature stem shared by the fg and bg branches
struct StemImpl : torch::nn::Module {
  explicit StemImpl(int base_channels);
  torch::Tensor forward(torch::Tensor x);  // [B,3,H,W] -> [B,base,H,W]
  torch::nn::Conv2d entry{nullptr};
  ConvResBlock block{nullptr};
};
TORCH_MODULE(Stem);

// U-Net over the tiled appearance + heatmap stack; skip connections live
// between this decoder's own down and up paths (none reach back to encoders).
struct UNetDecoderImpl : torch::nn::Module {
  UNetDecoderImpl(int in_channels, int n_blocks, int base_channels);
  torch::Tensor forward(torch::Tensor x);  // [B,in,H,W] -> [B,3,H,W] tanh
  torch::nn::Conv2d entry{nullptr}, out{nullptr};
  torch::nn::ModuleList down_blocks, down_convs, up_convs, fuse_convs, up_blocks;
  int n_blocks_;
};
TORCH_MODULE(UNetDecoder);

struct ImageCriticImpl : torch::nn::Module {
  ImageCriticImpl(int n_blocks, int base_channels, int in_h, int in_w);
  torch::Tensor forward(torch::Tensor x);  // [B,3,H,W] -> [B], strictly in (0,1)
  torch::nn::Conv2d entry{nullptr};
  torch::nn::ModuleList downs;
  torch::nn::Linear head{nullptr};
};
TORCH_MODULE(ImageCritic);

struct FcResBlockImpl : torch::nn::Module {
  explicit FcResBlockImpl(int width);
  torch::Tensor forward(torch::Tensor x);
  torch::nn::Linear fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(FcResBlock);

// entry linear (+ReLU), n_res residual blocks, output head with no activation
struct FcStackImpl : torch::nn::Module {
  FcStackImpl(int in_dim, int hidden, int out_dim, int n_res);
  torch::Tensor forward(torch::Tensor x);
  torch::nn::Linear entry{nullptr}, head{nullptr};
  torch::nn::ModuleList blocks;
};
TORCH_MODULE(FcStack);

torch::Tensor tile_appearance_batch(const torch::Tensor& fg, const torch::Tensor& bg,
                                    int h, int w);
// [fg_dim] + [bg_dim] -> [fg_dim+bg_dim, H, W], constant over space
torch::Tensor tile_appearance(const FactorEmbedding& fg, const FactorEmbedding& bg,
                              int h, int w);

// Stage-I model: shared stem, masked fg branch over 7 body ROIs with one
// weight-shared encoder, masked bg branch, U-Net decoder conditioned on pose
// heatmaps, sigmoid image discriminator, and the 54->32->54 pose autoencoder.
class Stage1Model {
 public:
  explicit Stage1Model(const PipelineConfig& cfg);

  const PipelineConfig& config() const { return cfg_; }

  // single-sample ops ([3,H,W] images)
  torch::Tensor stem_features(const torch::Tensor& image);
  FactorEmbedding fg_encode(const torch::Tensor& fmap, const torch::Tensor& mask,
                            const RoiSet& rois);
  FactorEmbedding bg_encode(const torch::Tensor& fmap, const torch::Tensor& inv_mask);
  torch::Tensor decode_image(const torch::Tensor& appearance, const torch::Tensor& heatmaps);
  torch::Tensor reconstruct(const torch::Tensor& image, const PoseAnnotation& pose);
  FactorEmbedding pose_encode(const PoseVector& v);
  PoseVector pose_decode(const FactorEmbedding& e);
  double critic_image(const torch::Tensor& image);

  // batched cores used by training and evaluation
  torch::Tensor stem_forward(const torch::Tensor& images);
  torch::Tensor fg_forward(const torch::Tensor& fmaps, const torch::Tensor& masks,
                           const std::vector<RoiSet>& rois);
  torch::Tensor bg_forward(const torch::Tensor& fmaps, const torch::Tensor& inv_masks);
  torch::Tensor decode_forward(const torch::Tensor& appearance, const torch::Tensor& heatmaps);
  torch::Tensor critic_forward(const torch::Tensor& images);
  torch::Tensor pose_ae_forward(const torch::Tensor& v);  // [B,54] -> [B,54]
  torch::Tensor pose_encode_forward(const torch::Tensor& v);  // [B,54] -> [B,pose_dim]
  torch::Tensor reconstruct_batch(const torch::Tensor& images, const torch::Tensor& heatmaps,
                                  const torch::Tensor& masks, const std::vector<RoiSet>& rois);

  std::vector<torch::Tensor> generator_parameters();  // stem + fg + bg + decoder
  std::vector<torch::Tensor> critic_parameters();
  std::vector<torch::Tensor> pose_parameters();
  NamedTensors named_parameters() const;

  Stem stem{nullptr};
  ConvEncoder fg_encoder{nullptr}, bg_encoder{nullptr};
  UNetDecoder decoder{nullptr};
  ImageCritic critic{nullptr};
  FcStack pose_encoder{nullptr}, pose_decoder{nullptr};

 private:
  PipelineConfig cfg_;
};

struct Stage1History {
  std::vector<double> d_value;     // Eq. 1 estimates
  std::vector<double> g_adv;       // mean log D(fake)
  std::vector<double> l1;          // raw mean absolute error
  std::vector<double> pose_loss;   // Eq. 3 estimates
};

struct TrainStage1Options {
  long iterations = -1;             // -1 means config value
  std::filesystem::path out_dir;    // empty: no checkpoints written
  long checkpoint_every = -1;       // -1 means config value
  bool verbose = false;
  long log_every = 100;
  // early-stop hook, checked once per iteration after bookkeeping
  std::function<bool(long, const Stage1History&)> should_stop;
  const Checkpoint* resume = nullptr;
};

// Alternates generator and discriminator Adam steps on reconstruction batches
// and runs the pose autoencoder on its own schedule. Throws std::runtime_error
// if any loss turns non-finite.
Stage1History train_stage1(Stage1Model& model, const TrainingSet& data,
                           const TrainStage1Options& opts = {});

Checkpoint make_stage1_checkpoint(const Stage1Model& model, uint64_t iteration);
void save_stage1_model(const std::filesystem::path& path, const Stage1Model& model,
                       uint64_t iteration);
Stage1Model load_stage1_model(const std::filesystem::path& path);
Stage1Model stage1_from_checkpoint(const Checkpoint& ckpt);

// no-grad dataset pass: [N, embedding_dim(kind)]
torch::Tensor extract_embeddings(Stage1Model& model, const TrainingSet& data, FactorKind kind);

}  // namespace dpig
