#pragma once

#include <torch/torch.h>

#include <map>
#include <string>

namespace dpig {

// Every loss op reports its scalar value plus the named terms it decomposes
// into; value always equals the documented combination of components.
struct LossReport {
  std::string name;
  double value = 0.0;
  std::map<std::string, double> components;
};

// Differentiable cores, shared by the training loops and the gradient tests.
// Scores for the image discriminator must lie strictly inside (0,1); the logs
// clamp at 1e-7 only to guard float saturation, interior points are exact.

// mean log s_real + mean log(1 - s_fake)  (discriminator maximizes this)
torch::Tensor recon_d_value(const torch::Tensor& score_real, const torch::Tensor& score_fake);
// mean log s_fake  (generator's adversarial term, non-saturating form)
torch::Tensor recon_g_adv_value(const torch::Tensor& score_fake);
// mean absolute error between reconstruction and target
torch::Tensor l1_error(const torch::Tensor& x_hat, const torch::Tensor& x);
// mean over batch of squared L2 distance between 54-dim pose vectors
torch::Tensor pose_recon_value(const torch::Tensor& v_hat, const torch::Tensor& v);
// mean d_real - mean d_fake  (critic maximizes this under weight clipping)
torch::Tensor wgan_critic_value(const torch::Tensor& d_real, const torch::Tensor& d_fake);
// mean d_fake  (mapper maximizes the critic score on its samples)
torch::Tensor wgan_mapper_value(const torch::Tensor& d_fake);

// Report wrappers. recon_g's value is adv + l1_weight * mae; the minimized
// training objective (-adv + l1_weight * mae) is exposed as a component.
LossReport recon_d_loss(const torch::Tensor& score_real, const torch::Tensor& score_fake);
LossReport recon_g_loss(const torch::Tensor& score_fake, const torch::Tensor& x_hat,
                        const torch::Tensor& x, double l1_weight);
LossReport pose_recon_loss(const torch::Tensor& v_hat, const torch::Tensor& v);
LossReport wgan_critic_loss(const torch::Tensor& d_real, const torch::Tensor& d_fake);
LossReport wgan_mapper_loss(const torch::Tensor& d_fake);

}  // namespace dpig
