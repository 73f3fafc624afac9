#include "core/dmd2.hpp"

#include "core/error.hpp"
#include "core/rng.hpp"

namespace ulfb::dmd2 {

Diffused diffuse(const torch::Tensor& x, const diffusion::NoiseSchedule& schedule, std::uint64_t rng_seed) {
  auto gen = make_generator(rng_seed);
  auto taus = diffusion::sample_levels(x.size(0), gen, schedule);
  auto noise = at::randn(x.sizes(), gen, x.options());
  return {diffusion::forward_diffuse(x, taus, noise, schedule), taus};
}

Diffused diffuse_at(const torch::Tensor& x, const torch::Tensor& taus, const diffusion::NoiseSchedule& schedule,
                    std::uint64_t rng_seed) {
  auto gen = make_generator(rng_seed);
  auto noise = at::randn(x.sizes(), gen, x.options());
  return {diffusion::forward_diffuse(x, taus, noise, schedule), taus};
}

torch::Tensor weight_score_difference(const torch::Tensor& diff, const torch::Tensor& gamma,
                                      const torch::Tensor& taus, const diffusion::NoiseSchedule& schedule,
                                      Weighting weighting) {
  switch (weighting) {
    case Weighting::PerSampleNormalized: {
      std::vector<int64_t> shape(diff.dim(), 1);
      shape[0] = diff.size(0);
      auto scale = diff.abs().reshape({diff.size(0), -1}).mean(1).reshape(shape) + 1e-8;
      return -(diff / scale) * gamma;
    }
    case Weighting::Unit:
      return -diff * gamma;
    case Weighting::InverseSignalPower:
      return -diff * gamma / diffusion::gamma_at(schedule, taus, diff).pow(2);
  }
  fail(ErrorCode::InvalidConfig, "unknown weighting");
}

torch::Tensor dmd2_generator_gradient(const diffusion::ScoreSource& teacher, const diffusion::ScoreSource& critic,
                                      const torch::Tensor& y_hat, std::uint64_t rng_seed,
                                      const GradientOptions& options) {
  require(teacher.schedule() == critic.schedule(), ErrorCode::ScheduleMismatch,
          "teacher and critic use different noise schedules");
  if (const auto* m = dynamic_cast<const diffusion::ScoreModel*>(&teacher)) {
    require(m->frozen(), ErrorCode::InvalidModel, "teacher score model must be frozen");
  }
  require(y_hat.dim() >= 1 && y_hat.size(0) > 0, ErrorCode::EmptyBatch, "dmd2 gradient needs samples");
  torch::NoGradGuard no_grad;
  const auto& schedule = teacher.schedule();
  auto d = diffuse(y_hat.detach(), schedule, rng_seed);
  auto diff = teacher.score(d.u, d.taus) - critic.score(d.u, d.taus);
  auto gamma = diffusion::gamma_at(schedule, d.taus, diff);
  return weight_score_difference(diff, gamma, d.taus, schedule, options.weighting);
}

torch::Tensor surrogate_loss(const torch::Tensor& y_hat, const torch::Tensor& g) {
  require(y_hat.sizes() == g.sizes(), ErrorCode::ShapeError, "gradient signal shape differs from samples");
  return (g.detach() * y_hat).mean();
}

double update_critic(diffusion::ScoreModel& critic, torch::optim::Optimizer& opt, const torch::Tensor& generated,
                     std::uint64_t rng_seed) {
  critic.ensure_trainable();
  return diffusion::dsm_step(critic, opt, generated.detach(), rng_seed);
}

namespace {

torch::Tensor trunk_features(const diffusion::ScoreModel& critic, const Diffused& d) {
  auto frac = d.taus.to(d.u.scalar_type()) / static_cast<double>(critic.schedule().T);
  return critic.net().features(d.u, frac);
}

torch::Tensor logits(nets::AuxClassifier& head, const diffusion::ScoreModel& critic, const Diffused& d) {
  return head->forward(trunk_features(critic, d));
}

void check_levels_match(const Diffused& real, const Diffused& fake) {
  require(real.taus.sizes() == fake.taus.sizes() && torch::equal(real.taus, fake.taus), ErrorCode::LevelMismatch,
          "real and fake batches were diffused at different levels");
}

}  // namespace

torch::Tensor aux_discriminator_loss(nets::AuxClassifier& head, const diffusion::ScoreModel& critic,
                                     const Diffused& real, const Diffused& fake) {
  check_levels_match(real, fake);
  // The critic trunk is fitted by DSM alone; this loss only reaches the head.
  torch::Tensor fr, ff;
  {
    torch::NoGradGuard no_grad;
    fr = trunk_features(critic, real);
    ff = trunk_features(critic, fake);
  }
  auto lr = head->forward(fr);
  auto lf = head->forward(ff);
  return 0.5 * (torch::nn::functional::softplus(-lr).mean() + torch::nn::functional::softplus(lf).mean());
}

torch::Tensor aux_generator_loss(nets::AuxClassifier& head, const diffusion::ScoreModel& critic,
                                 const Diffused& fake) {
  return torch::nn::functional::softplus(-logits(head, critic, fake)).mean();
}

AuxLosses aux_gan_loss(nets::AuxClassifier& head, const diffusion::ScoreModel& critic, const Diffused& real,
                       const Diffused& fake) {
  return {aux_discriminator_loss(head, critic, real, fake), aux_generator_loss(head, critic, fake)};
}

UpdatePlan ttur_plan(std::int64_t global_step, int n_critic) {
  require(n_critic >= 1, ErrorCode::InvalidConfig, "n_critic must be >= 1");
  require(global_step >= 0, ErrorCode::InvalidConfig, "global_step must be >= 0");
  return global_step % n_critic == 0 ? UpdatePlan::All : UpdatePlan::CriticOnly;
}

}  // namespace ulfb::dmd2
