#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include <torch/torch.h>

namespace ulfb::bridge {

/// Discretized bridge time grid with per-step interpolation weights and
/// noise scales. alpha[K-1] == 1 and sigma[K-1] == 0 always hold.
struct BridgeSchedule {
  int K = 0;
  std::vector<double> t;      // K+1 points, t[0]=0, t[K]=1
  std::vector<double> alpha;  // K
  std::vector<double> sigma;  // K
};

/// A trajectory point x_{t_k}. `x` is a single slice [C,H,W] or a batch [B,C,H,W].
struct BridgeState {
  torch::Tensor x;
  int k = 0;
  double t = 0.0;
};

enum class RolloutMode { TrainStochastic, InferDeterministic };

/// Endpoint predictor G(x, t) -> x_hat_1; must preserve the input shape.
using EndpointFn = std::function<torch::Tensor(const torch::Tensor& x, double t)>;

constexpr double kDefaultNoiseScale = 0.05;
constexpr int kDefaultSteps = 3;

/// Uniform grid when `grid` is empty; otherwise `grid` must have K+1 strictly
/// increasing finite entries from 0 to 1.
BridgeSchedule make_schedule(int K, double noise_scale, std::optional<std::vector<double>> grid = std::nullopt);

BridgeState initial_state(const torch::Tensor& x0, const BridgeSchedule& schedule);

torch::Tensor predict_endpoint(const EndpointFn& generator, const BridgeState& state, const BridgeSchedule& schedule);

/// x_{k+1} = (1-alpha_k) x_k + alpha_k endpoint + sigma_k noise. An undefined
/// `noise` tensor means zero noise. No clipping is applied.
BridgeState bridge_step(const BridgeState& state, const torch::Tensor& endpoint, const BridgeSchedule& schedule,
                        const torch::Tensor& noise = {});

struct Rollout {
  std::vector<BridgeState> trajectory;  // K+1 states
  std::vector<torch::Tensor> endpoints; // K predictions x_hat_1^{(k)}
  torch::Tensor y_hat;                  // endpoints.back()
};

Rollout rollout(const EndpointFn& generator, const torch::Tensor& x0, const BridgeSchedule& schedule, RolloutMode mode,
                std::uint64_t rng_seed);

}  // namespace ulfb::bridge
