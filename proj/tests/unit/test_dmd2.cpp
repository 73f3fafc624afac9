#include <doctest.h>

#include <cmath>
#include <memory>
#include <numbers>

#include "core/dmd2.hpp"
#include "core/error.hpp"
#include "core/rng.hpp"
#include "core/synth_data.hpp"
#include "support/fixtures.hpp"
#include "support/reference.hpp"

using namespace ulfb;

namespace {

const auto kF64 = torch::TensorOptions().dtype(torch::kFloat64);

/// Independent cosine-schedule signal level, mirroring the documented VP grid.
double ref_gamma(int tau, int T) { return std::cos(0.5 * std::numbers::pi * 0.98 * tau / T); }

std::shared_ptr<nets::MlpEpsNet> mlp(int64_t dim, std::uint64_t seed) {
  torch::manual_seed(seed);
  auto net = std::make_shared<nets::MlpEpsNet>(dim, 32, 16);
  net->to(torch::kFloat64);
  return net;
}

}  // namespace

TEST_CASE("identical teacher and critic give an exactly zero gradient") {
  auto s = diffusion::make_noise_schedule();
  auto net = mlp(2, 1);
  diffusion::ScoreModel teacher(net, diffusion::Role::TeacherReal, s);
  teacher.freeze();
  auto copy = mlp(2, 2);
  {
    torch::NoGradGuard ng;
    auto src = net->parameters();
    auto dst = copy->parameters();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i].copy_(src[i]);
  }
  diffusion::ScoreModel critic(copy, diffusion::Role::CriticFake, s);
  for (int b = 0; b < 10; ++b) {
    auto y = torch::randn({32, 2}, kF64) * 3;
    for (auto w : {dmd2::Weighting::PerSampleNormalized, dmd2::Weighting::Unit, dmd2::Weighting::InverseSignalPower}) {
      auto g = dmd2::dmd2_generator_gradient(teacher, critic, y, b, {w});
      CHECK(torch::equal(g, torch::zeros_like(g)));
    }
  }
}

TEST_CASE("shift-family estimator against the analytic KL gradient") {
  auto s = diffusion::make_noise_schedule();
  synth::GmmScoreSource real(synth::GaussianMixture::isotropic({0.0}, 1.0), s);
  double mean_g2 = 0;
  for (int t = 2; t <= 62; ++t) mean_g2 += std::pow(ref_gamma(t, 64), 2);
  mean_g2 /= 61;
  for (double m : {0.25, 0.5, 1.0}) {
    synth::GmmScoreSource fake(synth::GaussianMixture::isotropic({m}, 1.0), s);
    auto y = at::randn({200000, 1}, make_generator(11), kF64) + m;
    const double est =
        dmd2::dmd2_generator_gradient(real, fake, y, 3, {dmd2::Weighting::InverseSignalPower}).mean().item<double>();
    CHECK(std::abs(est - m) / m <= 0.05);
    const double raw = dmd2::dmd2_generator_gradient(real, fake, y, 4, {dmd2::Weighting::Unit}).mean().item<double>();
    CHECK(std::abs(raw - mean_g2 * m) / (mean_g2 * m) <= 0.05);

    // Descending along g moves the shift toward the target.
    const double step = 0.1;
    const double m_next = m - step * est;
    CHECK(std::abs(m_next) < std::abs(m));
  }
}

TEST_CASE("normalized weighting keeps the direction under score-difference scaling") {
  auto s = diffusion::make_noise_schedule();
  auto diff = torch::randn({8, 3, 4, 4}, kF64);
  auto taus = torch::randint(2, 63, {8}, torch::kLong);
  auto gamma = diffusion::gamma_at(s, taus, diff);
  auto a = dmd2::weight_score_difference(diff, gamma, taus, s, dmd2::Weighting::PerSampleNormalized);
  auto b = dmd2::weight_score_difference(diff * 37.5, gamma, taus, s, dmd2::Weighting::PerSampleNormalized);
  auto cos = torch::nn::functional::cosine_similarity(a.flatten(), b.flatten(),
                                                      torch::nn::functional::CosineSimilarityFuncOptions().dim(0));
  CHECK(std::abs(cos.item<double>() - 1.0) < 1e-6);
}

TEST_CASE("surrogate loss gradient equals g / numel") {
  auto y = torch::randn({4, 5}, kF64).requires_grad_(true);
  auto g = torch::randn({4, 5}, kF64);
  auto loss = dmd2::surrogate_loss(y, g);
  loss.backward();
  CHECK((y.grad() - g / 20.0).abs().max().item<double>() < 1e-15);
  CHECK(fixtures::code_of([&] { dmd2::surrogate_loss(y, torch::zeros({3})); }) == ErrorCode::ShapeError);
}

TEST_CASE("gradient contract violations") {
  auto s = diffusion::make_noise_schedule(64);
  synth::GmmScoreSource real(synth::GaussianMixture::isotropic({0.0}, 1.0), s);
  synth::GmmScoreSource other(synth::GaussianMixture::isotropic({0.0}, 1.0), diffusion::make_noise_schedule(32));
  auto y = torch::randn({4, 1}, kF64);
  CHECK(fixtures::code_of([&] { dmd2::dmd2_generator_gradient(real, other, y, 0); }) == ErrorCode::ScheduleMismatch);
  CHECK(fixtures::code_of([&] { dmd2::dmd2_generator_gradient(real, real, torch::zeros({0, 1}, kF64), 0); }) ==
        ErrorCode::EmptyBatch);
  diffusion::ScoreModel unfrozen(mlp(1, 3), diffusion::Role::TeacherReal, s);
  CHECK(fixtures::code_of([&] { dmd2::dmd2_generator_gradient(unfrozen, real, y, 0); }) == ErrorCode::InvalidModel);
}

TEST_CASE("critic updates fit the generated pool and leave the generator alone") {
  auto s = diffusion::make_noise_schedule();
  diffusion::ScoreModel critic(mlp(2, 5), diffusion::Role::CriticFake, s);
  auto opt = critic.make_optimizer(2e-3);
  // A frozen identity "generator" applied to a fixed pool.
  auto pool = at::randn({256, 2}, make_generator(9), kF64) * 0.5 + 0.3;
  const auto before = pool.clone();
  double first = 0, last = 0;
  for (int i = 0; i < 200; ++i) {
    const double l = dmd2::update_critic(critic, *opt, pool, 100 + i % 10);
    if (i < 10) first += l;
    if (i >= 190) last += l;
  }
  CHECK(last < first);
  CHECK(torch::equal(pool, before));

  diffusion::ScoreModel frozen(mlp(2, 6), diffusion::Role::CriticFake, s);
  auto opt2 = frozen.make_optimizer(1e-3);
  frozen.freeze();
  CHECK(fixtures::code_of([&] { dmd2::update_critic(frozen, *opt2, pool, 0); }) == ErrorCode::FrozenModelError);
}

TEST_CASE("critic trained on a Gaussian output distribution approaches its analytic score") {
  auto s = diffusion::make_noise_schedule();
  diffusion::ScoreModel critic(mlp(2, 7), diffusion::Role::CriticFake, s);
  auto opt = critic.make_optimizer(2e-3);
  const double mu[2] = {0.4, -0.2};
  const double var = 0.25;
  for (int i = 0; i < 2500; ++i) {
    auto y = at::randn({512, 2}, make_generator(derive_seed(21, i)), kF64) * std::sqrt(var) +
             torch::tensor({mu[0], mu[1]}, kF64);
    dmd2::update_critic(critic, *opt, y, derive_seed(22, i));
  }
  torch::NoGradGuard ng;
  double num = 0, den = 0;
  for (int tau : {8, 20, 32, 44, 56}) {
    const double g = ref_gamma(tau, 64), vs = std::sqrt(1 - g * g);
    auto grid = torch::stack(torch::meshgrid({torch::linspace(-1, 1, 9, kF64), torch::linspace(-1, 1, 9, kF64)},
                                             "ij"),
                             -1)
                    .reshape({-1, 2});
    // Held-out grid at the diffused marginal's scale.
    const double sd = std::sqrt(g * g * var + vs * vs);
    auto u = grid * 2 * sd + torch::tensor({g * mu[0], g * mu[1]}, kF64);
    auto pred = critic.score(u, torch::full({u.size(0)}, tau, torch::kLong));
    auto ua = u.accessor<double, 2>();
    auto pa = pred.accessor<double, 2>();
    for (int64_t r = 0; r < u.size(0); ++r) {
      for (int c = 0; c < 2; ++c) {
        const double truth = ref::gaussian_vp_score(ua[r][c], mu[c], var, g, vs);
        num += std::pow(pa[r][c] - truth, 2);
        den += truth * truth;
      }
    }
  }
  CHECK(std::sqrt(num / den) <= 0.10);
}

TEST_CASE("aux GAN losses at balance and saturation") {
  auto s = diffusion::make_noise_schedule();
  auto feat = std::make_shared<fixtures::FnEpsNet>([](const torch::Tensor& u, const torch::Tensor&) { return u; });
  diffusion::ScoreModel critic(feat, diffusion::Role::CriticFake, s);

  nets::AuxClassifier head(2, false);
  head->to(torch::kFloat64);
  auto real = dmd2::diffuse_at(torch::full({16, 2}, 10.0, kF64), torch::full({16}, 2, torch::kLong), s, 1);
  auto fake = dmd2::diffuse_at(torch::full({16, 2}, -10.0, kF64), torch::full({16}, 2, torch::kLong), s, 2);
  {
    torch::NoGradGuard ng;
    for (auto& p : head->parameters()) p.zero_();
  }
  auto bal = dmd2::aux_gan_loss(head, critic, real, fake);
  CHECK(bal.discriminator_loss.item<double>() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(bal.generator_loss.item<double>() == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  {
    // Hidden unit h = leaky(u_0); logit = a h + b maps real (h~10) to ~+20 and fake (h~-2) to ~-20.
    torch::NoGradGuard ng;
    auto params = head->named_parameters();
    params["net.0.weight"].copy_(torch::tensor({{1.0, 0.0}}, kF64));
    params["net.2.weight"].fill_(40.0 / 12.0);
    params["net.2.bias"].fill_(20.0 - 400.0 / 12.0);
  }
  auto sat = dmd2::aux_gan_loss(head, critic, real, fake);
  CHECK(sat.discriminator_loss.item<double>() < 1e-8);

  auto shifted = dmd2::diffuse_at(torch::zeros({16, 2}, kF64), torch::full({16}, 3, torch::kLong), s, 3);
  CHECK(fixtures::code_of([&] { dmd2::aux_discriminator_loss(head, critic, real, shifted); }) ==
        ErrorCode::LevelMismatch);
}

TEST_CASE("aux generator loss gradient matches finite differences") {
  auto s = diffusion::make_noise_schedule();
  diffusion::ScoreModel critic(mlp(2, 8), diffusion::Role::CriticFake, s);
  nets::AuxClassifier head(critic.net().feature_channels(), false);
  head->to(torch::kFloat64);
  auto taus = torch::tensor({5, 20, 40, 60}, torch::kLong);
  auto noise = torch::randn({4, 2}, kF64);
  auto f = [&](const torch::Tensor& x) {
    dmd2::Diffused d{diffusion::forward_diffuse(x, taus, noise, s), taus};
    return dmd2::aux_generator_loss(head, critic, d);
  };
  CHECK(ref::gradcheck(f, torch::randn({4, 2}, kF64)) <= 1e-4);
}

TEST_CASE("aux discriminator loss trains only the head") {
  auto s = diffusion::make_noise_schedule();
  diffusion::ScoreModel critic(mlp(2, 9), diffusion::Role::CriticFake, s);
  nets::AuxClassifier head(critic.net().feature_channels(), false);
  head->to(torch::kFloat64);
  auto taus = torch::full({8}, 10, torch::kLong);
  auto real = dmd2::diffuse_at(torch::randn({8, 2}, kF64), taus, s, 1);
  auto fake = dmd2::diffuse_at(torch::randn({8, 2}, kF64), taus, s, 2);
  dmd2::aux_discriminator_loss(head, critic, real, fake).backward();
  for (const auto& p : critic.net().parameters()) CHECK_FALSE(p.grad().defined());
  bool head_grad = false;
  for (const auto& p : head->parameters()) head_grad |= p.grad().defined() && p.grad().abs().sum().item<double>() > 0;
  CHECK(head_grad);
}

TEST_CASE("TTUR plan") {
  for (int s = 0; s < 10; ++s) {
    CHECK((dmd2::ttur_plan(s, 5) == dmd2::UpdatePlan::All) == (s == 0 || s == 5));
    CHECK(dmd2::ttur_plan(s, 1) == dmd2::UpdatePlan::All);
  }
  int all = 0;
  for (int s = 0; s < 1000; ++s) all += dmd2::ttur_plan(s, 5) == dmd2::UpdatePlan::All;
  CHECK(all == 200);
  CHECK(fixtures::code_of([] { dmd2::ttur_plan(0, 0); }) == ErrorCode::InvalidConfig);
}
