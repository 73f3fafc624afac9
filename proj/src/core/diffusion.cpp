#include "core/diffusion.hpp"

#include <cmath>
#include <numbers>

#include "core/dataset.hpp"
#include "core/error.hpp"
#include "core/log.hpp"
#include "core/rng.hpp"

namespace ulfb::diffusion {

int NoiseSchedule::tau_min() const { return std::max(1, static_cast<int>(std::ceil(0.02 * T))); }
int NoiseSchedule::tau_max() const { return std::max(tau_min(), static_cast<int>(std::floor(0.98 * T))); }

NoiseSchedule make_noise_schedule(int T) {
  require(T >= 2, ErrorCode::InvalidConfig, "noise schedule needs T >= 2");
  NoiseSchedule s;
  s.T = T;
  s.gamma.resize(T + 1);
  s.varsigma.resize(T + 1);
  for (int tau = 0; tau <= T; ++tau) {
    const double angle = 0.5 * std::numbers::pi * (static_cast<double>(tau) / T) * 0.98;
    s.gamma[tau] = std::cos(angle);
    s.varsigma[tau] = std::sqrt(1.0 - s.gamma[tau] * s.gamma[tau]);
  }
  s.gamma[0] = 1.0;
  s.varsigma[0] = 0.0;
  return s;
}

namespace {

void check_levels(const NoiseSchedule& s, const torch::Tensor& taus) {
  require(taus.dim() == 1, ErrorCode::InvalidLevel, "levels must be a 1-D tensor");
  if (taus.numel() == 0) return;
  const auto lo = taus.min().item<int64_t>(), hi = taus.max().item<int64_t>();
  require(lo >= 0 && hi <= s.T, ErrorCode::InvalidLevel,
          "level out of range [0," + std::to_string(s.T) + "]: " + std::to_string(lo) + ".." + std::to_string(hi));
}

torch::Tensor lookup(const std::vector<double>& table, const torch::Tensor& taus, const torch::Tensor& like) {
  auto values = torch::tensor(table, torch::kFloat64).index_select(0, taus.to(torch::kLong)).to(like.scalar_type());
  std::vector<int64_t> shape(like.dim(), 1);
  shape[0] = taus.size(0);
  return values.reshape(shape);
}

}  // namespace

torch::Tensor gamma_at(const NoiseSchedule& s, const torch::Tensor& taus, const torch::Tensor& like) {
  check_levels(s, taus);
  return lookup(s.gamma, taus, like);
}

torch::Tensor varsigma_at(const NoiseSchedule& s, const torch::Tensor& taus, const torch::Tensor& like) {
  check_levels(s, taus);
  return lookup(s.varsigma, taus, like);
}

torch::Tensor forward_diffuse(const torch::Tensor& x, int tau, const torch::Tensor& noise, const NoiseSchedule& s) {
  require(tau >= 0 && tau <= s.T, ErrorCode::InvalidLevel, "level " + std::to_string(tau) + " outside [0,T]");
  require(noise.sizes() == x.sizes(), ErrorCode::ShapeError, "noise shape differs from sample shape");
  if (tau == 0) return x.clone();
  return x * s.gamma[tau] + noise * s.varsigma[tau];
}

torch::Tensor forward_diffuse(const torch::Tensor& x, const torch::Tensor& taus, const torch::Tensor& noise,
                              const NoiseSchedule& s) {
  require(noise.sizes() == x.sizes(), ErrorCode::ShapeError, "noise shape differs from sample shape");
  require(taus.dim() == 1 && taus.size(0) == x.size(0), ErrorCode::ShapeError, "one level per sample required");
  return x * gamma_at(s, taus, x) + noise * varsigma_at(s, taus, x);
}

torch::Tensor sample_levels(int64_t batch, at::Generator& gen, const NoiseSchedule& s) {
  return at::randint(s.tau_min(), s.tau_max() + 1, {batch}, gen, torch::TensorOptions().dtype(torch::kLong));
}

std::string to_string(Role r) { return r == Role::TeacherReal ? "teacher_real" : "critic_fake"; }

Role role_from_string(const std::string& s) {
  if (s == "teacher_real") return Role::TeacherReal;
  if (s == "critic_fake") return Role::CriticFake;
  fail(ErrorCode::InvalidModel, "unknown score model role '" + s + "'");
}

ScoreModel::ScoreModel(std::shared_ptr<nets::EpsNetBase> net, Role role, NoiseSchedule schedule)
    : net_(std::move(net)), role_(role), schedule_(std::move(schedule)) {
  require(net_ != nullptr, ErrorCode::InvalidModel, "score model needs a network");
}

torch::Tensor ScoreModel::eps(const torch::Tensor& u, const torch::Tensor& taus) const {
  check_levels(schedule_, taus);
  require(taus.size(0) == u.size(0), ErrorCode::ShapeError, "one level per sample required");
  auto frac = taus.to(u.scalar_type()) / static_cast<double>(schedule_.T);
  return net_->forward(u, frac);
}

torch::Tensor ScoreModel::score(const torch::Tensor& u, const torch::Tensor& taus) const {
  check_levels(schedule_, taus);
  require(taus.numel() == 0 || taus.min().item<int64_t>() >= 1, ErrorCode::UndefinedScore,
          "score is undefined at level 0 (varsigma = 0)");
  return -eps(u, taus) / varsigma_at(schedule_, taus, u);
}

void ScoreModel::freeze() {
  frozen_ = true;
  for (auto& p : net_->parameters()) p.set_requires_grad(false);
  net_->eval();
}

void ScoreModel::ensure_trainable() const {
  require(!frozen_, ErrorCode::FrozenModelError, "score model '" + to_string(role_) + "' is frozen");
}

std::unique_ptr<torch::optim::Adam> ScoreModel::make_optimizer(double lr) const {
  ensure_trainable();
  return std::make_unique<torch::optim::Adam>(net_->parameters(), torch::optim::AdamOptions(lr).betas({0.5, 0.999}));
}

torch::Tensor dsm_loss(const ScoreModel& model, const torch::Tensor& batch, std::uint64_t rng_seed) {
  require(batch.dim() >= 1 && batch.size(0) > 0, ErrorCode::EmptyBatch, "dsm_loss needs a nonempty batch");
  auto gen = make_generator(rng_seed);
  auto taus = sample_levels(batch.size(0), gen, model.schedule());
  auto noise = at::randn(batch.sizes(), gen, batch.options());
  auto u = forward_diffuse(batch, taus, noise, model.schedule());
  return (model.eps(u, taus) - noise).pow(2).mean();
}

double dsm_step(ScoreModel& model, torch::optim::Optimizer& opt, const torch::Tensor& batch, std::uint64_t rng_seed) {
  model.ensure_trainable();
  opt.zero_grad();
  auto loss = dsm_loss(model, batch, rng_seed);
  loss.backward();
  opt.step();
  return loss.item<double>();
}

ScoreModel train_teacher(const data::SliceSet& target, const TeacherConfig& config, TrainingLog* log) {
  require(target.size() > 0, ErrorCode::EmptyBatch, "teacher needs target-domain slices");
  for (std::size_t i = 0; i < target.cohorts.size(); ++i) {
    require(target.cohorts[i] == data::Cohort::TargetPool, ErrorCode::ContaminatedTeacherData,
            "slice from subject " + target.subjects[i] + " belongs to cohort " + data::to_string(target.cohorts[i]));
  }
  torch::manual_seed(derive_seed(config.seed, 0x7EAC));
  auto net = std::make_shared<nets::ConvEpsNet>(config.net, target.images.size(1));
  ScoreModel model(net, Role::TeacherReal, make_noise_schedule(config.levels));
  auto opt = model.make_optimizer(config.lr);

  const int64_t n = target.size();
  const int64_t per_epoch = std::max<int64_t>(1, n / config.batch);
  auto gen = make_generator(derive_seed(config.seed, 0xBA7C));
  double epoch_acc = 0.0;
  int epoch_count = 0;
  net->train();
  for (int step = 0; step < config.steps; ++step) {
    auto idx = at::randint(0, n, {std::min<int64_t>(config.batch, n)}, gen, torch::TensorOptions().dtype(torch::kLong));
    auto batch = target.images.index_select(0, idx);
    const double loss = dsm_step(model, *opt, batch, derive_seed(config.seed, 0xD5, step));
    if (!std::isfinite(loss)) fail(ErrorCode::NaNDetected, "teacher loss diverged at step " + std::to_string(step));
    epoch_acc += loss;
    ++epoch_count;
    if (log) log->step_loss.push_back(loss);
    if (epoch_count == per_epoch || step + 1 == config.steps) {
      if (log) log->epoch_loss.push_back(epoch_acc / epoch_count);
      log::debug("teacher epoch ", log ? log->epoch_loss.size() : 0, " loss ", epoch_acc / epoch_count);
      epoch_acc = 0.0;
      epoch_count = 0;
    }
  }
  model.freeze();
  return model;
}

void fit_score_model(ScoreModel& model, const std::function<torch::Tensor(int64_t, std::uint64_t)>& sampler,
                     const SamplerFitConfig& config, TrainingLog* log) {
  auto opt = model.make_optimizer(config.lr);
  for (int step = 0; step < config.steps; ++step) {
    const double progress = config.steps > 1 ? static_cast<double>(step) / (config.steps - 1) : 0.0;
    const double scale = config.final_lr_fraction + (1 - config.final_lr_fraction) * 0.5 * (1 + std::cos(M_PI * progress));
    for (auto& group : opt->param_groups()) static_cast<torch::optim::AdamOptions&>(group.options()).lr(config.lr * scale);
    auto batch = sampler(config.batch, derive_seed(config.seed, 0x5A, step));
    const double loss = dsm_step(model, *opt, batch, derive_seed(config.seed, 0xD5, step));
    if (log) log->step_loss.push_back(loss);
  }
}

}  // namespace ulfb::diffusion
