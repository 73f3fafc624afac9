#pragma once

#include <cstdint>

#include <torch/torch.h>

#include "core/diffusion.hpp"
#include "core/networks.hpp"

namespace ulfb::dmd2 {

/// Per-sample weight applied to the score difference.
enum class Weighting {
  PerSampleNormalized,  // 1 / (mean |s_real - s_fake| + 1e-8), the training default
  Unit,                 // raw expectation of grad KL at the sampled level
  InverseSignalPower,   // 1 / gamma^2: rescales each level to the data-level KL gradient for shift families
};

struct GradientOptions {
  Weighting weighting = Weighting::PerSampleNormalized;
};

struct Diffused {
  torch::Tensor u;
  torch::Tensor taus;  // int64 [B]
};

Diffused diffuse(const torch::Tensor& x, const diffusion::NoiseSchedule& schedule, std::uint64_t rng_seed);
/// Diffuses at caller-chosen levels.
Diffused diffuse_at(const torch::Tensor& x, const torch::Tensor& taus, const diffusion::NoiseSchedule& schedule,
                    std::uint64_t rng_seed);

/// -w * diff * gamma, where `diff` = s_real - s_fake and `gamma` broadcasts per sample.
torch::Tensor weight_score_difference(const torch::Tensor& diff, const torch::Tensor& gamma,
                                      const torch::Tensor& taus, const diffusion::NoiseSchedule& schedule,
                                      Weighting weighting);

/// Stop-gradient signal g on y_hat whose chain through the generator gives the
/// KL(p_fake,tau || p_real,tau) gradient. Same shape as `y_hat`.
torch::Tensor dmd2_generator_gradient(const diffusion::ScoreSource& teacher, const diffusion::ScoreSource& critic,
                                      const torch::Tensor& y_hat, std::uint64_t rng_seed,
                                      const GradientOptions& options = {});

/// mean(stop_grad(g) * y_hat): its gradient w.r.t. y_hat is g / numel.
torch::Tensor surrogate_loss(const torch::Tensor& y_hat, const torch::Tensor& g);

/// One DSM step on the fake critic using detached generator samples.
double update_critic(diffusion::ScoreModel& critic, torch::optim::Optimizer& opt, const torch::Tensor& generated,
                     std::uint64_t rng_seed);

struct AuxLosses {
  torch::Tensor discriminator_loss;
  torch::Tensor generator_loss;
};

/// Auxiliary classifier on critic trunk features of diffused real vs fake
/// samples. Both batches must share their levels (LevelMismatch otherwise).
/// The discriminator loss reaches only the head; the generator loss flows
/// through the trunk into the fake samples.
AuxLosses aux_gan_loss(nets::AuxClassifier& head, const diffusion::ScoreModel& critic, const Diffused& real,
                       const Diffused& fake);
torch::Tensor aux_discriminator_loss(nets::AuxClassifier& head, const diffusion::ScoreModel& critic,
                                     const Diffused& real, const Diffused& fake);
torch::Tensor aux_generator_loss(nets::AuxClassifier& head, const diffusion::ScoreModel& critic, const Diffused& fake);

enum class UpdatePlan { CriticOnly, All };

/// All iff step % n_critic == 0.
UpdatePlan ttur_plan(std::int64_t global_step, int n_critic);

}  // namespace ulfb::dmd2
