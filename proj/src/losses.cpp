#include "dpig/losses.hpp"

#include <stdexcept>

#include "dpig/core.hpp"

namespace dpig {

namespace {

constexpr double kLogEps = 1e-7;

void check_scores(const torch::Tensor& s, const char* what) {
  if (!s.defined() || s.numel() == 0)
    throw std::invalid_argument(std::string(what) + " scores must be non-empty");
  if (!s.is_floating_point())
    throw std::invalid_argument(std::string(what) + " scores must be floating point");
  double lo = s.min().item<double>();
  double hi = s.max().item<double>();
  if (!std::isfinite(lo) || !std::isfinite(hi) || lo <= 0.0 || hi >= 1.0)
    throw std::invalid_argument(std::string(what) +
                                " scores must lie strictly inside (0,1)");
}

void check_finite(const torch::Tensor& t, const char* what) {
  if (!t.defined() || t.numel() == 0)
    throw std::invalid_argument(std::string(what) + " must be non-empty");
  if (!torch::isfinite(t).all().item<bool>())
    throw std::invalid_argument(std::string(what) + " has non-finite entries");
}

torch::Tensor safe_log(const torch::Tensor& t) { return torch::log(t.clamp_min(kLogEps)); }

}  // namespace

torch::Tensor recon_d_value(const torch::Tensor& score_real, const torch::Tensor& score_fake) {
  check_scores(score_real, "real");
  check_scores(score_fake, "fake");
  return safe_log(score_real).mean() + safe_log(1 - score_fake).mean();
}

torch::Tensor recon_g_adv_value(const torch::Tensor& score_fake) {
  check_scores(score_fake, "fake");
  return safe_log(score_fake).mean();
}

torch::Tensor l1_error(const torch::Tensor& x_hat, const torch::Tensor& x) {
  check_finite(x_hat, "reconstruction");
  check_finite(x, "target");
  if (!x_hat.sizes().equals(x.sizes()))
    throw std::invalid_argument("reconstruction and target shapes differ");
  return (x_hat - x).abs().mean();
}

torch::Tensor pose_recon_value(const torch::Tensor& v_hat, const torch::Tensor& v) {
  check_finite(v_hat, "pose reconstruction");
  check_finite(v, "pose target");
  if (!v_hat.sizes().equals(v.sizes()))
    throw std::invalid_argument("pose vector shapes differ");
  if (v.size(-1) != kPoseVectorDim)
    throw std::invalid_argument("pose vectors must have length 54");
  auto diff = v_hat - v;
  return diff.pow(2).sum(-1).mean();
}

torch::Tensor wgan_critic_value(const torch::Tensor& d_real, const torch::Tensor& d_fake) {
  check_finite(d_real, "critic real outputs");
  check_finite(d_fake, "critic fake outputs");
  return d_real.mean() - d_fake.mean();
}

torch::Tensor wgan_mapper_value(const torch::Tensor& d_fake) {
  check_finite(d_fake, "critic fake outputs");
  return d_fake.mean();
}

LossReport recon_d_loss(const torch::Tensor& score_real, const torch::Tensor& score_fake) {
  double value = recon_d_value(score_real, score_fake).item<double>();
  double log_real = safe_log(score_real).mean().item<double>();
  double log_one_minus_fake = safe_log(1 - score_fake).mean().item<double>();
  return {"recon_d",
          value,
          {{"log_real", log_real},
           {"log_one_minus_fake", log_one_minus_fake},
           {"d_min_objective", -value}}};
}

LossReport recon_g_loss(const torch::Tensor& score_fake, const torch::Tensor& x_hat,
                        const torch::Tensor& x, double l1_weight) {
  if (!(l1_weight > 0)) throw std::invalid_argument("l1_weight must be positive");
  double adv = recon_g_adv_value(score_fake).item<double>();
  double l1 = l1_error(x_hat, x).item<double>();
  double value = adv + l1_weight * l1;
  return {"recon_g",
          value,
          {{"adv", adv},
           {"l1_raw", l1},
           {"l1_weighted", l1_weight * l1},
           {"g_min_objective", -adv + l1_weight * l1}}};
}

LossReport pose_recon_loss(const torch::Tensor& v_hat, const torch::Tensor& v) {
  double value = pose_recon_value(v_hat, v).item<double>();
  return {"pose_recon", value, {{"squared_l2", value}}};
}

LossReport wgan_critic_loss(const torch::Tensor& d_real, const torch::Tensor& d_fake) {
  double mean_real = d_real.mean().item<double>();
  double mean_fake = d_fake.mean().item<double>();
  double value = wgan_critic_value(d_real, d_fake).item<double>();
  return {"wgan_critic",
          value,
          {{"mean_real", mean_real},
           {"mean_fake", mean_fake},
           {"critic_min_objective", -value}}};
}

LossReport wgan_mapper_loss(const torch::Tensor& d_fake) {
  double value = wgan_mapper_value(d_fake).item<double>();
  return {"wgan_mapper", value, {{"mean_fake", value}, {"mapper_min_objective", -value}}};
}

}  // namespace dpig
