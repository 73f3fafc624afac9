#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "core/asp.hpp"
#include "core/bridge.hpp"
#include "core/checkpoint.hpp"
#include "core/dataset.hpp"
#include "core/diffusion.hpp"
#include "core/networks.hpp"
#include "core/patchnce.hpp"

namespace ulfb::train {

struct TrainConfig {
  double lambda_dm = 1.0;
  double lambda_sb = 1.0;
  double lambda_reg = 1.0;
  double lambda_dmd2 = 1.0;  // inner weight of the DMD2 term inside the DM group
  bool use_aux_gan = true;
  /// When false, terms whose effective weight is zero are skipped and logged as 0.
  bool compute_zero_weight_terms = false;
  /// When false, critic-only steps skip the generator objective and log its terms as null.
  bool evaluate_every_step = false;

  int K = bridge::kDefaultSteps;
  double noise_scale = bridge::kDefaultNoiseScale;
  int n_critic = 5;

  double lr_generator = 1e-4;
  double lr_discriminator = 2e-4;
  double lr_critic = 2e-4;
  double lr_aux = 2e-4;

  int batch = 16;
  int steps = 2000;
  std::uint64_t seed = 0;
  int checkpoint_every = 500;  // 0 keeps only the final checkpoint

  int levels = diffusion::kDefaultLevels;
  nets::NetConfig generator{16, 64};
  asp::AspConfig asp;
  patchnce::PatchConfig patch;

  /// InvalidConfig on negative weights, empty batches or broken sub-configs.
  void validate() const;
  nlohmann::ordered_json to_json() const;
  /// Missing fields keep their defaults; unknown fields and wrong types raise InvalidConfig.
  static TrainConfig from_json(const nlohmann::json& j);
};

/// Unweighted per-step terms plus the weighted total.
struct LossBreakdown {
  double adv_g = 0, adv_d = 0, dmd2 = 0, aux_gan_g = 0, aux_gan_d = 0, sb = 0, patchnce = 0, asp_core = 0,
         asp_bg = 0, asp_boundary = 0, total = 0;
  bool generator_evaluated = true;  // false: generator-side fields and total were not computed

  /// The weighted sum the total must equal.
  double weighted_sum(const TrainConfig& c) const;
  nlohmann::ordered_json to_json() const;
};

/// Mean squared transport cost between a trajectory point and its endpoint prediction.
torch::Tensor sb_loss(const torch::Tensor& x_tk, const torch::Tensor& endpoint);

/// Trainable state. The teacher is borrowed and never modified.
struct Models {
  nets::Generator generator{nullptr};
  nets::Discriminator discriminator{nullptr};
  patchnce::Projector projector{nullptr};
  std::shared_ptr<diffusion::ScoreModel> critic;
  nets::AuxClassifier aux{nullptr};
  const diffusion::ScoreModel* teacher = nullptr;
};

/// Builds all trainable models with seeded initialization. The fake critic
/// starts as a copy of the teacher. ScheduleMismatch when config.levels
/// differs from the teacher's schedule.
Models make_models(const TrainConfig& config, const diffusion::ScoreModel& teacher);

/// Differentiable terms for one refinement step.
struct StepTerms {
  torch::Tensor adv_g, dmd2, aux_gan_g, sb, patchnce, asp_core, asp_bg, asp_boundary, total;
  LossBreakdown values() const;
};

/// Everything the generator objective needs at refinement step k.
struct StepInputs {
  torch::Tensor x0;       // original source batch
  torch::Tensor x_tk;     // trajectory point
  double t_k = 0.0;
  const asp::InputStructure* structure = nullptr;  // from x0; computed when null
  std::uint64_t seed = 0;
  torch::Tensor endpoint;  // precomputed G(x_tk, t_k) for evaluation-only calls; recomputed when undefined
};

/// Generator objective at step k (pre: k < K), composed per the LossBreakdown
/// identity. ASP and PatchNCE compare x0 against the endpoint prediction.
StepTerms total_step_loss(Models& models, const StepInputs& in, int k, const TrainConfig& config);

/// Step-level training driver. Randomness at global step s derives from
/// (seed, s) only, so a restored trainer continues an interrupted run exactly.
class Trainer {
 public:
  Trainer(TrainConfig config, const diffusion::ScoreModel& teacher);

  LossBreakdown step(const data::SliceSet& source, const data::SliceSet& target);

  int64_t global_step() const { return global_step_; }
  int64_t critic_updates() const { return critic_updates_; }
  int64_t generator_updates() const { return generator_updates_; }
  const TrainConfig& config() const { return config_; }
  Models& models() { return models_; }
  const bridge::BridgeSchedule& schedule() const { return schedule_; }

  ckpt::Checkpoint snapshot();
  /// IncompatibleCheckpoint when the checkpoint was written for another config.
  void restore(const ckpt::Checkpoint& c);

 private:
  TrainConfig config_;
  bridge::BridgeSchedule schedule_;
  Models models_;
  std::unique_ptr<torch::optim::Adam> opt_g_, opt_d_, opt_c_, opt_aux_;
  int64_t global_step_ = 0, critic_updates_ = 0, generator_updates_ = 0;
};

struct RunOptions {
  std::filesystem::path out_dir;                  // empty: nothing written
  std::optional<std::filesystem::path> resume;    // checkpoint to continue from
  int64_t stop_at = -1;                           // stop before this global step (simulated interruption)
  std::function<void(int64_t, const LossBreakdown&)> on_step;
};

struct RunResult {
  std::vector<LossBreakdown> log;  // steps run in this call
  int64_t critic_updates = 0, generator_updates = 0, global_step = 0;
  std::filesystem::path last_checkpoint;
};

/// Full loop: writes loss_log.jsonl, checkpoints and config.json to out_dir.
/// A non-finite loss raises NaNDetected naming the last good checkpoint.
RunResult train(const TrainConfig& config, const data::SliceSet& source, const data::SliceSet& target,
                const diffusion::ScoreModel& teacher, const RunOptions& options = {});

/// Generator plus schedule restored from a training checkpoint.
class Translator {
 public:
  explicit Translator(const ckpt::Checkpoint& c);
  Translator(nets::Generator generator, bridge::BridgeSchedule schedule);
  /// Deterministic K-step refinement of [B,3,H,W].
  torch::Tensor operator()(const torch::Tensor& x) const;
  const bridge::BridgeSchedule& schedule() const { return schedule_; }

 private:
  nets::Generator generator_{nullptr};
  bridge::BridgeSchedule schedule_;
};

/// 1-D shift testbed: generator y = z + b, z ~ N(0,1), target N(0,1); only the
/// DMD2 signal drives b.
struct ShiftTestbedConfig {
  double m0 = 1.0;
  int steps = 2000;
  int batch = 256;
  double lr = 0.01;
  bool learned_critic = false;  // analytic fake score when false
  int critic_steps_per_update = 5;
  std::uint64_t seed = 0;
};
std::vector<double> run_shift_testbed(const ShiftTestbedConfig& config);

}  // namespace ulfb::train
