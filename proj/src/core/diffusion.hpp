#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "core/networks.hpp"

namespace ulfb::data {
struct SliceSet;
}

namespace ulfb::diffusion {

/// Variance-preserving discretization: u = gamma[tau] x + varsigma[tau] eps,
/// gamma^2 + varsigma^2 = 1, gamma[0] = 1.
struct NoiseSchedule {
  int T = 0;
  std::vector<double> gamma;
  std::vector<double> varsigma;

  int tau_min() const;  // ceil(0.02 T), at least 1
  int tau_max() const;  // floor(0.98 T)
  bool operator==(const NoiseSchedule&) const = default;
};

constexpr int kDefaultLevels = 64;

NoiseSchedule make_noise_schedule(int T = kDefaultLevels);

/// Per-sample coefficients broadcastable against `like` ([B, ...]).
torch::Tensor gamma_at(const NoiseSchedule& s, const torch::Tensor& taus, const torch::Tensor& like);
torch::Tensor varsigma_at(const NoiseSchedule& s, const torch::Tensor& taus, const torch::Tensor& like);

torch::Tensor forward_diffuse(const torch::Tensor& x, int tau, const torch::Tensor& noise, const NoiseSchedule& s);
/// Batched variant; `taus` is an int64 tensor of shape [B].
torch::Tensor forward_diffuse(const torch::Tensor& x, const torch::Tensor& taus, const torch::Tensor& noise,
                              const NoiseSchedule& s);

/// Uniform levels in [tau_min, tau_max], int64 [B].
torch::Tensor sample_levels(int64_t batch, at::Generator& gen, const NoiseSchedule& s);

/// Anything that can evaluate grad_u log p_tau(u).
class ScoreSource {
 public:
  virtual ~ScoreSource() = default;
  virtual torch::Tensor score(const torch::Tensor& u, const torch::Tensor& taus) const = 0;
  virtual const NoiseSchedule& schedule() const = 0;
};

enum class Role { TeacherReal, CriticFake };
std::string to_string(Role r);
Role role_from_string(const std::string& s);

/// Epsilon-parameterized score network: score = -eps_hat / varsigma[tau].
class ScoreModel : public ScoreSource {
 public:
  ScoreModel(std::shared_ptr<nets::EpsNetBase> net, Role role, NoiseSchedule schedule);

  torch::Tensor eps(const torch::Tensor& u, const torch::Tensor& taus) const;
  torch::Tensor score(const torch::Tensor& u, const torch::Tensor& taus) const override;
  const NoiseSchedule& schedule() const override { return schedule_; }

  Role role() const { return role_; }
  bool frozen() const { return frozen_; }
  void freeze();
  /// Throws FrozenModelError when frozen.
  void ensure_trainable() const;
  /// Adam over the network parameters; throws FrozenModelError when frozen.
  std::unique_ptr<torch::optim::Adam> make_optimizer(double lr) const;

  nets::EpsNetBase& net() const { return *net_; }
  std::shared_ptr<nets::EpsNetBase> net_ptr() const { return net_; }

 private:
  std::shared_ptr<nets::EpsNetBase> net_;
  Role role_;
  NoiseSchedule schedule_;
  bool frozen_ = false;
};

/// Denoising score matching: mean over batch and sampled levels of
/// ||eps_hat(u, tau) - eps||^2 per element. Differentiable in the model.
torch::Tensor dsm_loss(const ScoreModel& model, const torch::Tensor& batch, std::uint64_t rng_seed);

/// One Adam step of dsm_loss; returns the pre-step loss.
double dsm_step(ScoreModel& model, torch::optim::Optimizer& opt, const torch::Tensor& batch, std::uint64_t rng_seed);

struct TeacherConfig {
  int steps = 1500;
  int batch = 16;
  double lr = 2e-4;
  std::uint64_t seed = 0;
  nets::NetConfig net{16, 64};
  int levels = kDefaultLevels;
};

struct TrainingLog {
  std::vector<double> step_loss;
  std::vector<double> epoch_loss;  // mean over each pass through the data
};

/// Trains an image-domain score model on clean target-pool slices and freezes it.
/// Any slice tagged with a non-target cohort raises ContaminatedTeacherData.
ScoreModel train_teacher(const data::SliceSet& target, const TeacherConfig& config, TrainingLog* log = nullptr);

/// Generic DSM fit for low-dimensional testbeds: `sampler(batch, seed)` returns [B, dim].
struct SamplerFitConfig {
  int steps = 4000;
  int batch = 512;
  double lr = 2e-3;
  double final_lr_fraction = 0.01;  // cosine decay from lr to lr * final_lr_fraction; 1 keeps lr constant
  std::uint64_t seed = 0;
};
void fit_score_model(ScoreModel& model, const std::function<torch::Tensor(int64_t, std::uint64_t)>& sampler,
                     const SamplerFitConfig& config, TrainingLog* log = nullptr);

}  // namespace ulfb::diffusion
