#include "dpig/stage2.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "dpig/losses.hpp"
#include "dpig/util.hpp"

#include <ATen/CPUGeneratorImpl.h>

namespace dpig {

FcCriticImpl::FcCriticImpl(int in_dim, int hidden) {
  fc1 = register_module("fc1", torch::nn::Linear(in_dim, hidden));
  fc2 = register_module("fc2", torch::nn::Linear(hidden, hidden));
  fc3 = register_module("fc3", torch::nn::Linear(hidden, hidden));
  head = register_module("head", torch::nn::Linear(hidden, 1));
}

torch::Tensor FcCriticImpl::forward(torch::Tensor x) {
  x = torch::relu(fc1->forward(x));
  x = torch::relu(fc2->forward(x));
  x = torch::relu(fc3->forward(x));
  return head->forward(x).squeeze(-1);
}

namespace {

// mapper and critic weights start from small-variance Gaussians
void gaussian_init(torch::nn::Module& mod, double sigma) {
  torch::NoGradGuard ng;
  for (auto& p : mod.named_parameters()) {
    if (p.key().find("weight") != std::string::npos)
      p.value().normal_(0.0, sigma);
    else
      p.value().zero_();
  }
}

}  // namespace

Stage2Model::Stage2Model(const PipelineConfig& cfg) : cfg_(validate_config(cfg)) {
  for (int k = 0; k < 3; ++k) {
    int dim = embedding_dim(static_cast<FactorKind>(k), cfg_);
    mappers_.emplace_back(dim, cfg_.fc_hidden, dim, 4);
    critics_.emplace_back(dim, cfg_.fc_hidden);
    gaussian_init(*mappers_.back(), 0.02);
    gaussian_init(*critics_.back(), 0.02);
  }
}

torch::Tensor Stage2Model::map_forward(const torch::Tensor& z, FactorKind kind) {
  int dim = embedding_dim(kind, cfg_);
  if (z.dim() != 2 || z.size(1) != dim)
    throw std::invalid_argument(std::string("noise for kind ") + to_string(kind) +
                                " must have " + std::to_string(dim) + " columns");
  return mapper(kind)->forward(z);
}

FactorEmbedding Stage2Model::map_noise(const torch::Tensor& z, FactorKind kind) {
  int dim = embedding_dim(kind, cfg_);
  if (!z.defined() || z.dim() != 1 || z.size(0) != dim)
    throw std::invalid_argument(std::string("noise for kind ") + to_string(kind) +
                                " must have length " + std::to_string(dim));
  if (!torch::isfinite(z).all().item<bool>())
    throw std::invalid_argument("noise vector has non-finite entries");
  torch::NoGradGuard ng;
  return {kind, map_forward(z.unsqueeze(0).to(torch::kFloat32), kind).squeeze(0)};
}

torch::Tensor Stage2Model::critic_forward(const torch::Tensor& e, FactorKind kind) {
  int dim = embedding_dim(kind, cfg_);
  if (e.dim() != 2 || e.size(1) != dim)
    throw std::invalid_argument(std::string("embeddings for kind ") + to_string(kind) +
                                " must have " + std::to_string(dim) + " columns");
  return critic(kind)->forward(e);
}

double Stage2Model::critic_embedding(const FactorEmbedding& e) {
  check_embedding(e, cfg_);
  torch::NoGradGuard ng;
  return critic_forward(e.values.unsqueeze(0), e.kind).item<double>();
}

NamedTensors Stage2Model::named_parameters() const {
  NamedTensors out;
  for (int k = 0; k < 3; ++k) {
    std::string prefix = to_string(static_cast<FactorKind>(k));
    for (const auto& p : mappers_[k]->named_parameters())
      out.emplace_back(prefix + "/mapper." + p.key(), p.value());
    for (const auto& p : critics_[k]->named_parameters())
      out.emplace_back(prefix + "/critic." + p.key(), p.value());
  }
  return out;
}

Stage2History train_stage2(Stage2Model& model, const torch::Tensor& real_embeddings,
                           FactorKind kind, const TrainStage2Options& opts) {
  const auto& cfg = model.config();
  int dim = embedding_dim(kind, cfg);
  if (!real_embeddings.defined() || real_embeddings.dim() != 2 ||
      real_embeddings.size(0) == 0)
    throw std::runtime_error("stage-II training needs a non-empty [N,K] embedding set");
  if (real_embeddings.size(1) != dim)
    throw std::runtime_error("embedding set has dim " +
                             std::to_string(real_embeddings.size(1)) + ", kind " +
                             to_string(kind) + " wants " + std::to_string(dim));

  long iters = opts.iterations >= 0 ? opts.iterations : cfg.iters_stage2;
  auto real = real_embeddings.to(torch::kFloat32);
  int64_t n = real.size(0);

  auto adam = [&](std::vector<torch::Tensor> params) {
    return torch::optim::Adam(std::move(params),
                              torch::optim::AdamOptions(cfg.stage2_learning_rate)
                                  .betas(std::make_tuple(cfg.adam_beta1, cfg.adam_beta2)));
  };
  auto opt_c = adam(model.critic(kind)->parameters());
  auto opt_m = adam(model.mapper(kind)->parameters());

  uint64_t seed = static_cast<uint64_t>(cfg.rng_seed) ^
                  (0x51ED2701u + static_cast<uint64_t>(kind) * 0x9E3779B9u);
  auto gen = at::detail::createCPUGenerator(seed);
  Rng rng(seed ^ 0xA5A5A5A5u);
  float clip = static_cast<float>(cfg.clip_value);

  auto sample_real = [&]() {
    std::vector<int64_t> idx(cfg.batch_stage2);
    for (auto& v : idx) v = rng.uniform_int(n);
    return real.index_select(0, torch::tensor(idx, torch::kLong));
  };
  auto sample_noise = [&]() {
    return torch::randn({cfg.batch_stage2, dim}, gen,
                        torch::TensorOptions().dtype(torch::kFloat32));
  };

  Stage2History hist;
  for (long it = 0; it < iters; ++it) {
    double last_critic_value = 0.0;
    for (int j = 0; j < cfg.n_critic; ++j) {
      auto d_real = model.critic_forward(sample_real(), kind);
      auto d_fake = model.critic_forward(model.map_forward(sample_noise(), kind).detach(),
                                         kind);
      auto value = wgan_critic_value(d_real, d_fake);
      opt_c.zero_grad();
      (-value).backward();
      opt_c.step();
      {
        torch::NoGradGuard ng;
        for (auto& p : model.critic(kind)->parameters()) p.clamp_(-clip, clip);
      }
      last_critic_value = value.item<double>();
    }

    auto d_fake = model.critic_forward(model.map_forward(sample_noise(), kind), kind);
    auto m_value = wgan_mapper_value(d_fake);
    opt_m.zero_grad();
    (-m_value).backward();
    opt_m.step();

    double mv = m_value.item<double>();
    if (!std::isfinite(last_critic_value) || !std::isfinite(mv))
      throw std::runtime_error("stage-II training diverged at iteration " +
                               std::to_string(it));
    hist.critic_value.push_back(last_critic_value);
    hist.mapper_value.push_back(mv);

    if (opts.verbose && opts.log_every > 0 && (it + 1) % opts.log_every == 0)
      std::printf("stage2[%s] iter %ld  critic %.4f  mapper %.4f\n", to_string(kind), it + 1,
                  last_critic_value, mv);
    if (opts.should_stop && opts.should_stop(it, hist)) break;
  }
  model.mark_trained(kind);
  return hist;
}

Checkpoint make_stage2_checkpoint(const Stage2Model& model, uint64_t iteration) {
  Checkpoint ckpt;
  ckpt.magic = "DPIG2";
  ckpt.iteration = iteration;
  ckpt.config_text = config_to_text(model.config());
  std::string kinds;
  for (int k = 0; k < 3; ++k) {
    if (!model.is_trained(static_cast<FactorKind>(k))) continue;
    if (!kinds.empty()) kinds += ",";
    kinds += to_string(static_cast<FactorKind>(k));
  }
  ckpt.meta["trained_kinds"] = kinds;
  for (const auto& [name, param] : model.named_parameters())
    ckpt.arrays.emplace_back(name, param.detach().clone());
  return ckpt;
}

void save_stage2_model(const std::filesystem::path& path, const Stage2Model& model,
                       uint64_t iteration) {
  save_checkpoint(path, make_stage2_checkpoint(model, iteration));
}

Stage2Model stage2_from_checkpoint(const Checkpoint& ckpt) {
  auto cfg = parse_config(ckpt.config_text);
  Stage2Model model(cfg);
  torch::NoGradGuard ng;
  for (auto& [name, param] : model.named_parameters()) {
    const auto* src = ckpt.find(name);
    if (!src) throw std::runtime_error("checkpoint missing parameter " + name);
    if (!src->sizes().equals(param.sizes()))
      throw std::runtime_error("checkpoint parameter " + name + " has wrong shape");
    param.copy_(*src);
  }
  auto it = ckpt.meta.find("trained_kinds");
  if (it != ckpt.meta.end() && !it->second.empty())
    for (const auto& k : split(it->second, ','))
      model.mark_trained(factor_kind_from_string(trim(k)));
  return model;
}

Stage2Model load_stage2_model(const std::filesystem::path& path) {
  return stage2_from_checkpoint(load_checkpoint(path, "DPIG2"));
}

}  // namespace dpig
