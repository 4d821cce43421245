#include "dpig/stage1.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "dpig/losses.hpp"
#include "dpig/util.hpp"

namespace dpig {

namespace {

namespace F = torch::nn::functional;

constexpr double kScoreEps = 1e-6;

int ceil_half(int v) { return (v + 1) / 2; }

// spatial size after the n_blocks-1 stride-2 transitions
std::pair<int, int> encoded_size(int h, int w, int n_blocks) {
  for (int k = 0; k + 1 < n_blocks; ++k) {
    h = ceil_half(h);
    w = ceil_half(w);
  }
  return {h, w};
}

torch::nn::Conv2d conv3x3(int in, int out, int stride) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).stride(stride).padding(1));
}

}  // namespace

ConvResBlockImpl::ConvResBlockImpl(int channels) {
  conv1 = register_module("conv1", conv3x3(channels, channels, 1));
  conv2 = register_module("conv2", conv3x3(channels, channels, 1));
}

torch::Tensor ConvResBlockImpl::forward(torch::Tensor x) {
  auto h = torch::relu(conv1->forward(x));
  h = conv2->forward(h);
  return torch::relu(x + h);
}

ConvEncoderImpl::ConvEncoderImpl(int in_channels, int in_h, int in_w, int n_blocks,
                                 int base_channels, int out_dim) {
  entry = register_module("entry", conv3x3(in_channels, base_channels, 1));
  blocks = register_module("blocks", torch::nn::ModuleList());
  transitions = register_module("transitions", torch::nn::ModuleList());
  for (int k = 0; k < n_blocks; ++k) {
    int ch = base_channels * (k + 1);
    blocks->push_back(ConvResBlock(ch));
    if (k + 1 < n_blocks) transitions->push_back(conv3x3(ch, base_channels * (k + 2), 2));
  }
  auto [eh, ew] = encoded_size(in_h, in_w, n_blocks);
  head = register_module(
      "head", torch::nn::Linear(base_channels * n_blocks * eh * ew, out_dim));
}

torch::Tensor ConvEncoderImpl::forward(torch::Tensor x) {
  x = torch::relu(entry->forward(x));
  for (size_t k = 0; k < blocks->size(); ++k) {
    x = blocks[k]->as<ConvResBlockImpl>()->forward(x);
    if (k < transitions->size())
      x = torch::relu(transitions[k]->as<torch::nn::Conv2dImpl>()->forward(x));
  }
  return head->forward(x.flatten(1));
}

StemImpl::StemImpl(int base_channels) {
  entry = register_module("entry", conv3x3(3, base_channels, 1));
  block = register_module("block", ConvResBlock(base_channels));
}

torch::Tensor StemImpl::forward(torch::Tensor x) {
  return block->forward(torch::relu(entry->forward(x)));
}

UNetDecoderImpl::UNetDecoderImpl(int in_channels, int n_blocks, int base_channels)
    : n_blocks_(n_blocks) {
  entry = register_module("entry", conv3x3(in_channels, base_channels, 1));
  down_blocks = register_module("down_blocks", torch::nn::ModuleList());
  down_convs = register_module("down_convs", torch::nn::ModuleList());
  up_convs = register_module("up_convs", torch::nn::ModuleList());
  fuse_convs = register_module("fuse_convs", torch::nn::ModuleList());
  up_blocks = register_module("up_blocks", torch::nn::ModuleList());
  for (int k = 0; k < n_blocks; ++k) {
    int ch = base_channels * (k + 1);
    down_blocks->push_back(ConvResBlock(ch));
    if (k + 1 < n_blocks) down_convs->push_back(conv3x3(ch, base_channels * (k + 2), 2));
  }
  for (int k = n_blocks - 2; k >= 0; --k) {
    int ch = base_channels * (k + 1);
    up_convs->push_back(conv3x3(base_channels * (k + 2), ch, 1));
    fuse_convs->push_back(conv3x3(2 * ch, ch, 1));
    up_blocks->push_back(ConvResBlock(ch));
  }
  out = register_module("out", conv3x3(base_channels, 3, 1));
}

torch::Tensor UNetDecoderImpl::forward(torch::Tensor x) {
  x = torch::relu(entry->forward(x));
  std::vector<torch::Tensor> skips;
  for (int k = 0; k < n_blocks_; ++k) {
    x = down_blocks[k]->as<ConvResBlockImpl>()->forward(x);
    if (k + 1 < n_blocks_) {
      skips.push_back(x);
      x = torch::relu(down_convs[k]->as<torch::nn::Conv2dImpl>()->forward(x));
    }
  }
  for (int i = 0; i < n_blocks_ - 1; ++i) {
    auto skip = skips[skips.size() - 1 - i];
    x = F::interpolate(x, F::InterpolateFuncOptions()
                              .size(std::vector<int64_t>{skip.size(2), skip.size(3)})
                              .mode(torch::kNearest));
    x = torch::relu(up_convs[i]->as<torch::nn::Conv2dImpl>()->forward(x));
    x = torch::cat({x, skip}, 1);
    x = torch::relu(fuse_convs[i]->as<torch::nn::Conv2dImpl>()->forward(x));
    x = up_blocks[i]->as<ConvResBlockImpl>()->forward(x);
  }
  return torch::tanh(out->forward(x));
}

ImageCriticImpl::ImageCriticImpl(int n_blocks, int base_channels, int in_h, int in_w) {
  entry = register_module("entry", conv3x3(3, base_channels, 1));
  downs = register_module("downs", torch::nn::ModuleList());
  for (int k = 0; k + 1 < n_blocks; ++k)
    downs->push_back(conv3x3(base_channels * (k + 1), base_channels * (k + 2), 2));
  auto [eh, ew] = encoded_size(in_h, in_w, n_blocks);
  head = register_module("head", torch::nn::Linear(base_channels * n_blocks * eh * ew, 1));
}

torch::Tensor ImageCriticImpl::forward(torch::Tensor x) {
  x = torch::relu(entry->forward(x));
  for (size_t k = 0; k < downs->size(); ++k)
    x = torch::relu(downs[k]->as<torch::nn::Conv2dImpl>()->forward(x));
  auto s = torch::sigmoid(head->forward(x.flatten(1))).squeeze(-1);
  return s.clamp(kScoreEps, 1.0 - kScoreEps);
}

FcResBlockImpl::FcResBlockImpl(int width) {
  fc1 = register_module("fc1", torch::nn::Linear(width, width));
  fc2 = register_module("fc2", torch::nn::Linear(width, width));
}

torch::Tensor FcResBlockImpl::forward(torch::Tensor x) {
  auto h = torch::relu(fc1->forward(x));
  h = fc2->forward(h);
  return torch::relu(x + h);
}

FcStackImpl::FcStackImpl(int in_dim, int hidden, int out_dim, int n_res) {
  entry = register_module("entry", torch::nn::Linear(in_dim, hidden));
  blocks = register_module("blocks", torch::nn::ModuleList());
  for (int i = 0; i < n_res; ++i) blocks->push_back(FcResBlock(hidden));
  head = register_module("head", torch::nn::Linear(hidden, out_dim));
}

torch::Tensor FcStackImpl::forward(torch::Tensor x) {
  x = torch::relu(entry->forward(x));
  for (size_t i = 0; i < blocks->size(); ++i)
    x = blocks[i]->as<FcResBlockImpl>()->forward(x);
  return head->forward(x);
}

torch::Tensor tile_appearance_batch(const torch::Tensor& fg, const torch::Tensor& bg,
                                    int h, int w) {
  if (fg.dim() != 2 || bg.dim() != 2 || fg.size(0) != bg.size(0))
    throw std::invalid_argument("tile_appearance expects [B,fg_dim] and [B,bg_dim]");
  auto app = torch::cat({fg, bg}, 1);
  return app.unsqueeze(-1).unsqueeze(-1).expand({app.size(0), app.size(1), h, w}).contiguous();
}

torch::Tensor tile_appearance(const FactorEmbedding& fg, const FactorEmbedding& bg,
                              int h, int w) {
  if (fg.kind != FactorKind::FG || bg.kind != FactorKind::BG)
    throw std::invalid_argument("tile_appearance expects an FG and a BG embedding");
  if (h < 1 || w < 1) throw std::invalid_argument("image dims positive");
  if (fg.values.dim() != 1 || bg.values.dim() != 1)
    throw std::invalid_argument("embeddings must be 1-D");
  return tile_appearance_batch(fg.values.unsqueeze(0), bg.values.unsqueeze(0), h, w)
      .squeeze(0);
}

Stage1Model::Stage1Model(const PipelineConfig& cfg) : cfg_(validate_config(cfg)) {
  stem = Stem(cfg_.base_channels);
  fg_encoder = ConvEncoder(cfg_.base_channels, cfg_.roi_size, cfg_.roi_size, cfg_.n_blocks,
                           cfg_.base_channels, cfg_.fg_dim / kNumRois);
  bg_encoder = ConvEncoder(cfg_.base_channels, cfg_.image_h, cfg_.image_w, cfg_.n_blocks,
                           cfg_.base_channels, cfg_.bg_dim);
  decoder = UNetDecoder(cfg_.fg_dim + cfg_.bg_dim + kKeypoints, cfg_.n_blocks,
                        cfg_.base_channels);
  critic = ImageCritic(cfg_.n_blocks, cfg_.base_channels, cfg_.image_h, cfg_.image_w);
  pose_encoder = FcStack(kPoseVectorDim, cfg_.fc_hidden, cfg_.pose_dim, 4);
  pose_decoder = FcStack(cfg_.pose_dim, cfg_.fc_hidden, kPoseVectorDim, 4);
}

torch::Tensor Stage1Model::stem_forward(const torch::Tensor& images) {
  if (images.dim() != 4 || images.size(1) != 3)
    throw std::invalid_argument("stem expects [B,3,H,W]");
  return stem->forward(images);
}

torch::Tensor Stage1Model::stem_features(const torch::Tensor& image) {
  check_image(image, cfg_);
  return stem_forward(image.unsqueeze(0)).squeeze(0);
}

torch::Tensor Stage1Model::fg_forward(const torch::Tensor& fmaps, const torch::Tensor& masks,
                                      const std::vector<RoiSet>& rois) {
  int64_t b = fmaps.size(0);
  if (masks.dim() != 3 || masks.size(0) != b)
    throw std::invalid_argument("fg branch expects per-sample masks");
  if (static_cast<int64_t>(rois.size()) != b)
    throw std::invalid_argument("fg branch expects one RoiSet per sample");
  auto masked = fmaps * masks.unsqueeze(1);
  std::vector<torch::Tensor> patches;
  patches.reserve(static_cast<size_t>(b) * kNumRois);
  for (int64_t i = 0; i < b; ++i)
    for (int r = 0; r < kNumRois; ++r)
      patches.push_back(extract_roi_patch(masked[i], rois[i].boxes[r], cfg_.roi_size));
  auto stack = torch::stack(patches);                     // [B*7, C, roi, roi]
  auto codes = fg_encoder->forward(stack);                // [B*7, fg_dim/7]
  return codes.view({b, cfg_.fg_dim});                    // ROI-major within sample
}

FactorEmbedding Stage1Model::fg_encode(const torch::Tensor& fmap, const torch::Tensor& mask,
                                       const RoiSet& rois) {
  if (fmap.dim() != 3) throw std::invalid_argument("fg_encode expects a [C,H,W] feature map");
  if (mask.dim() != 2 || mask.size(0) != fmap.size(1) || mask.size(1) != fmap.size(2))
    throw std::invalid_argument("fg_encode mask shape must match the feature map");
  auto values =
      fg_forward(fmap.unsqueeze(0), mask.unsqueeze(0), {rois}).squeeze(0);
  return {FactorKind::FG, values};
}

torch::Tensor Stage1Model::bg_forward(const torch::Tensor& fmaps,
                                      const torch::Tensor& inv_masks) {
  if (inv_masks.dim() != 3 || inv_masks.size(0) != fmaps.size(0))
    throw std::invalid_argument("bg branch expects per-sample masks");
  return bg_encoder->forward(fmaps * inv_masks.unsqueeze(1));
}

FactorEmbedding Stage1Model::bg_encode(const torch::Tensor& fmap,
                                       const torch::Tensor& inv_mask) {
  if (fmap.dim() != 3) throw std::invalid_argument("bg_encode expects a [C,H,W] feature map");
  if (inv_mask.dim() != 2 || inv_mask.size(0) != fmap.size(1) ||
      inv_mask.size(1) != fmap.size(2))
    throw std::invalid_argument("bg_encode mask shape must match the feature map");
  return {FactorKind::BG, bg_forward(fmap.unsqueeze(0), inv_mask.unsqueeze(0)).squeeze(0)};
}

torch::Tensor Stage1Model::decode_forward(const torch::Tensor& appearance,
                                          const torch::Tensor& heatmaps) {
  if (appearance.dim() != 4 || heatmaps.dim() != 4 ||
      appearance.size(0) != heatmaps.size(0))
    throw std::invalid_argument("decode expects batched appearance and heatmaps");
  if (appearance.size(1) != cfg_.fg_dim + cfg_.bg_dim)
    throw std::invalid_argument("appearance must have fg_dim+bg_dim channels");
  if (heatmaps.size(1) != kKeypoints)
    throw std::invalid_argument("heatmap stack must have 18 channels");
  return decoder->forward(torch::cat({appearance, heatmaps}, 1));
}

torch::Tensor Stage1Model::decode_image(const torch::Tensor& appearance,
                                        const torch::Tensor& heatmaps) {
  if (appearance.dim() != 3 || heatmaps.dim() != 3)
    throw std::invalid_argument("decode_image expects [C,H,W] inputs");
  return decode_forward(appearance.unsqueeze(0), heatmaps.unsqueeze(0)).squeeze(0);
}

torch::Tensor Stage1Model::reconstruct_batch(const torch::Tensor& images,
                                             const torch::Tensor& heatmaps,
                                             const torch::Tensor& masks,
                                             const std::vector<RoiSet>& rois) {
  auto fmaps = stem_forward(images);
  auto fg = fg_forward(fmaps, masks, rois);
  auto bg = bg_forward(fmaps, 1.f - masks);
  auto app = tile_appearance_batch(fg, bg, cfg_.image_h, cfg_.image_w);
  return decode_forward(app, heatmaps);
}

torch::Tensor Stage1Model::reconstruct(const torch::Tensor& image,
                                       const PoseAnnotation& pose) {
  check_image(image, cfg_);
  validate_pose(pose);
  auto heat =
      render_heatmaps(pose, cfg_.image_h, cfg_.image_w, scaled_sigma(cfg_)).unsqueeze(0);
  auto mask = make_pose_mask(pose, cfg_.image_h, cfg_.image_w, scaled_mask_radius(cfg_))
                  .unsqueeze(0);
  auto rois = compute_body_rois(pose, cfg_.image_h, cfg_.image_w, cfg_.roi_margin);
  return reconstruct_batch(image.unsqueeze(0), heat, mask, {rois}).squeeze(0);
}

torch::Tensor Stage1Model::critic_forward(const torch::Tensor& images) {
  if (images.dim() != 4 || images.size(1) != 3)
    throw std::invalid_argument("critic expects [B,3,H,W]");
  return critic->forward(images);
}

double Stage1Model::critic_image(const torch::Tensor& image) {
  check_image(image, cfg_);
  torch::NoGradGuard ng;
  return critic_forward(image.unsqueeze(0)).item<double>();
}

torch::Tensor Stage1Model::pose_encode_forward(const torch::Tensor& v) {
  if (v.dim() != 2 || v.size(1) != kPoseVectorDim)
    throw std::invalid_argument("pose encoder expects [B,54]");
  return pose_encoder->forward(v);
}

torch::Tensor Stage1Model::pose_ae_forward(const torch::Tensor& v) {
  return pose_decoder->forward(pose_encode_forward(v));
}

FactorEmbedding Stage1Model::pose_encode(const PoseVector& v) {
  torch::NoGradGuard ng;
  auto t = pose_vector_to_tensor(v).unsqueeze(0);
  return {FactorKind::POSE, pose_encoder->forward(t).squeeze(0)};
}

PoseVector Stage1Model::pose_decode(const FactorEmbedding& e) {
  if (e.kind != FactorKind::POSE)
    throw std::invalid_argument("pose_decode expects a POSE embedding");
  check_embedding(e, cfg_);
  torch::NoGradGuard ng;
  auto out = pose_decoder->forward(e.values.unsqueeze(0)).squeeze(0);
  return tensor_to_pose_vector(out);
}

namespace {

void collect(std::vector<torch::Tensor>& out, const std::vector<torch::Tensor>& params) {
  out.insert(out.end(), params.begin(), params.end());
}

void collect_named(NamedTensors& out, const std::string& prefix,
                   const std::shared_ptr<torch::nn::Module>& mod) {
  for (const auto& p : mod->named_parameters())
    out.emplace_back(prefix + "." + p.key(), p.value());
}

}  // namespace

std::vector<torch::Tensor> Stage1Model::generator_parameters() {
  std::vector<torch::Tensor> out;
  collect(out, stem->parameters());
  collect(out, fg_encoder->parameters());
  collect(out, bg_encoder->parameters());
  collect(out, decoder->parameters());
  return out;
}

std::vector<torch::Tensor> Stage1Model::critic_parameters() { return critic->parameters(); }

std::vector<torch::Tensor> Stage1Model::pose_parameters() {
  std::vector<torch::Tensor> out;
  collect(out, pose_encoder->parameters());
  collect(out, pose_decoder->parameters());
  return out;
}

NamedTensors Stage1Model::named_parameters() const {
  NamedTensors out;
  collect_named(out, "stem", stem.ptr());
  collect_named(out, "fg_encoder", fg_encoder.ptr());
  collect_named(out, "bg_encoder", bg_encoder.ptr());
  collect_named(out, "decoder", decoder.ptr());
  collect_named(out, "critic", critic.ptr());
  collect_named(out, "pose_encoder", pose_encoder.ptr());
  collect_named(out, "pose_decoder", pose_decoder.ptr());
  return out;
}

Checkpoint make_stage1_checkpoint(const Stage1Model& model, uint64_t iteration) {
  Checkpoint ckpt;
  ckpt.magic = "DPIG1";
  ckpt.iteration = iteration;
  ckpt.config_text = config_to_text(model.config());
  for (const auto& [name, param] : model.named_parameters())
    ckpt.arrays.emplace_back(name, param.detach().clone());
  return ckpt;
}

void save_stage1_model(const std::filesystem::path& path, const Stage1Model& model,
                       uint64_t iteration) {
  save_checkpoint(path, make_stage1_checkpoint(model, iteration));
}

Stage1Model stage1_from_checkpoint(const Checkpoint& ckpt) {
  auto cfg = parse_config(ckpt.config_text);
  Stage1Model model(cfg);
  torch::NoGradGuard ng;
  for (auto& [name, param] : model.named_parameters()) {
    const auto* src = ckpt.find(name);
    if (!src) throw std::runtime_error("checkpoint missing parameter " + name);
    if (!src->sizes().equals(param.sizes()))
      throw std::runtime_error("checkpoint parameter " + name + " has wrong shape");
    param.copy_(*src);
  }
  return model;
}

Stage1Model load_stage1_model(const std::filesystem::path& path) {
  return stage1_from_checkpoint(load_checkpoint(path, "DPIG1"));
}

Stage1History train_stage1(Stage1Model& model, const TrainingSet& data,
                           const TrainStage1Options& opts) {
  const auto& cfg = model.config();
  if (data.size() == 0) throw std::runtime_error("training set is empty");
  if (data.images.size(2) != cfg.image_h || data.images.size(3) != cfg.image_w)
    throw std::runtime_error("training set resolution does not match the config");

  long iters = opts.iterations >= 0 ? opts.iterations : cfg.iters_stage1;
  long ckpt_every = opts.checkpoint_every >= 1 ? opts.checkpoint_every : cfg.checkpoint_every;

  auto adam = [&](std::vector<torch::Tensor> params, double lr) {
    return torch::optim::Adam(std::move(params),
                              torch::optim::AdamOptions(lr).betas(
                                  std::make_tuple(cfg.adam_beta1, cfg.adam_beta2)));
  };
  auto opt_g = adam(model.generator_parameters(), cfg.learning_rate);
  auto opt_d = adam(model.critic_parameters(), cfg.learning_rate);
  auto opt_p = adam(model.pose_parameters(), cfg.pose_learning_rate);

  uint64_t start_iter = 0;
  if (opts.resume) {
    start_iter = opts.resume->iteration;
    restore_adam_state(opt_g, *opts.resume, model.named_parameters());
    restore_adam_state(opt_d, *opts.resume, model.named_parameters());
    restore_adam_state(opt_p, *opts.resume, model.named_parameters());
  }

  Rng rng(static_cast<uint64_t>(cfg.rng_seed) * 0x9E3779B9u + 17 + start_iter);
  int64_t n = data.size();
  Stage1History hist;

  auto pick_batch = [&](int batch) {
    std::vector<int64_t> idx(batch);
    for (auto& v : idx) v = rng.uniform_int(n);
    return idx;
  };

  auto save_ckpt = [&](uint64_t iter_done) {
    if (opts.out_dir.empty()) return;
    auto ckpt = make_stage1_checkpoint(model, iter_done);
    append_adam_state(ckpt.arrays, opt_g, model.named_parameters());
    append_adam_state(ckpt.arrays, opt_d, model.named_parameters());
    append_adam_state(ckpt.arrays, opt_p, model.named_parameters());
    save_checkpoint(opts.out_dir / "stage1.dpig", ckpt);
  };

  for (long it = static_cast<long>(start_iter); it < iters; ++it) {
    auto idx = pick_batch(cfg.batch_stage1);
    auto index = torch::tensor(idx, torch::kLong);
    auto x = data.images.index_select(0, index);
    auto heat = data.heatmaps.index_select(0, index);
    auto mask = data.masks.index_select(0, index);
    std::vector<RoiSet> rois;
    rois.reserve(idx.size());
    for (auto i : idx) rois.push_back(data.rois[static_cast<size_t>(i)]);

    // generator step (non-saturating adversarial term + weighted L1)
    auto x_hat = model.reconstruct_batch(x, heat, mask, rois);
    auto g_adv = recon_g_adv_value(model.critic_forward(x_hat));
    auto l1 = l1_error(x_hat, x);
    auto g_obj = -g_adv + cfg.l1_weight * l1;
    opt_g.zero_grad();
    g_obj.backward();
    opt_g.step();

    // discriminator step on the detached reconstruction
    auto s_real = model.critic_forward(x);
    auto s_fake = model.critic_forward(x_hat.detach());
    auto d_val = recon_d_value(s_real, s_fake);
    opt_d.zero_grad();
    (-d_val).backward();
    opt_d.step();

    // pose autoencoder step on its own batch
    auto pidx = torch::tensor(pick_batch(cfg.batch_pose), torch::kLong);
    auto v = data.pose_vectors.index_select(0, pidx);
    auto p_loss = pose_recon_value(model.pose_ae_forward(v), v);
    opt_p.zero_grad();
    p_loss.backward();
    opt_p.step();

    double dv = d_val.item<double>();
    double ga = g_adv.item<double>();
    double l1v = l1.item<double>();
    double pl = p_loss.item<double>();
    if (!std::isfinite(dv) || !std::isfinite(ga) || !std::isfinite(l1v) || !std::isfinite(pl))
      throw std::runtime_error(
          "stage-I training diverged at iteration " + std::to_string(it) + " (d=" +
          std::to_string(dv) + " g_adv=" + std::to_string(ga) + " l1=" + std::to_string(l1v) +
          " pose=" + std::to_string(pl) + ")");
    hist.d_value.push_back(dv);
    hist.g_adv.push_back(ga);
    hist.l1.push_back(l1v);
    hist.pose_loss.push_back(pl);

    if (opts.verbose && opts.log_every > 0 && (it + 1) % opts.log_every == 0)
      std::printf("stage1 iter %ld  d %.4f  g_adv %.4f  l1 %.4f  pose %.6f\n", it + 1, dv,
                  ga, l1v, pl);
    if ((it + 1) % ckpt_every == 0) save_ckpt(static_cast<uint64_t>(it + 1));
    if (opts.should_stop && opts.should_stop(it, hist)) {
      save_ckpt(static_cast<uint64_t>(it + 1));
      return hist;
    }
  }
  save_ckpt(static_cast<uint64_t>(iters));
  return hist;
}

torch::Tensor extract_embeddings(Stage1Model& model, const TrainingSet& data,
                                 FactorKind kind) {
  if (data.size() == 0) throw std::runtime_error("dataset is empty");
  torch::NoGradGuard ng;
  const auto& cfg = model.config();
  if (kind == FactorKind::POSE) return model.pose_encode_forward(data.pose_vectors);

  int64_t n = data.size();
  auto out = torch::empty({n, embedding_dim(kind, cfg)}, torch::kFloat32);
  const int64_t chunk = 16;
  for (int64_t i = 0; i < n; i += chunk) {
    int64_t j = std::min(n, i + chunk);
    auto images = data.images.slice(0, i, j);
    auto masks = data.masks.slice(0, i, j);
    auto fmaps = model.stem_forward(images);
    if (kind == FactorKind::FG) {
      std::vector<RoiSet> rois(data.rois.begin() + i, data.rois.begin() + j);
      out.slice(0, i, j) = model.fg_forward(fmaps, masks, rois);
    } else {
      out.slice(0, i, j) = model.bg_forward(fmaps, 1.f - masks);
    }
  }
  return out;
}

}  // namespace dpig
