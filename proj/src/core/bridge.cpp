#include "core/bridge.hpp"

#include <cmath>
#include <string>

#include "core/error.hpp"
#include "core/rng.hpp"

namespace ulfb::bridge {

BridgeSchedule make_schedule(int K, double noise_scale, std::optional<std::vector<double>> grid) {
  require(K >= 1, ErrorCode::InvalidSchedule, "K must be >= 1, got " + std::to_string(K));
  require(std::isfinite(noise_scale) && noise_scale >= 0.0, ErrorCode::InvalidSchedule,
          "noise_scale must be finite and nonnegative");

  BridgeSchedule s;
  s.K = K;
  if (grid && !grid->empty()) {
    require(static_cast<int>(grid->size()) == K + 1, ErrorCode::InvalidSchedule,
            "custom grid needs K+1 points, got " + std::to_string(grid->size()));
    s.t = *grid;
    require(s.t.front() == 0.0 && s.t.back() == 1.0, ErrorCode::InvalidSchedule, "grid must start at 0 and end at 1");
    for (int k = 0; k < K; ++k) {
      require(std::isfinite(s.t[k + 1]) && s.t[k + 1] > s.t[k], ErrorCode::InvalidSchedule,
              "grid must be strictly increasing at index " + std::to_string(k + 1));
    }
  } else {
    s.t.resize(K + 1);
    for (int k = 0; k <= K; ++k) s.t[k] = static_cast<double>(k) / K;
    s.t[K] = 1.0;
  }

  s.alpha.resize(K);
  s.sigma.resize(K);
  for (int k = 0; k < K; ++k) {
    s.alpha[k] = (s.t[k + 1] - s.t[k]) / (1.0 - s.t[k]);
    s.sigma[k] = noise_scale * std::sqrt(s.alpha[k] * (1.0 - s.alpha[k]));
  }
  // t[K] == 1 makes the last ratio exactly 1 already; pin both for clarity.
  s.alpha[K - 1] = 1.0;
  s.sigma[K - 1] = 0.0;
  return s;
}

BridgeState initial_state(const torch::Tensor& x0, const BridgeSchedule& schedule) {
  return BridgeState{x0, 0, schedule.t.at(0)};
}

torch::Tensor predict_endpoint(const EndpointFn& generator, const BridgeState& state, const BridgeSchedule& schedule) {
  require(state.k < schedule.K, ErrorCode::StepPastEnd, "no endpoint prediction at k == K");
  auto out = generator(state.x, state.t);
  require(out.sizes() == state.x.sizes(), ErrorCode::ShapeError, "generator changed the state shape");
  return out;
}

BridgeState bridge_step(const BridgeState& state, const torch::Tensor& endpoint, const BridgeSchedule& schedule,
                        const torch::Tensor& noise) {
  require(state.k < schedule.K, ErrorCode::StepPastEnd, "state is already at k == K");
  require(endpoint.sizes() == state.x.sizes(), ErrorCode::ShapeError, "endpoint shape differs from state");
  const double a = schedule.alpha[state.k];
  const double s = schedule.sigma[state.k];
  torch::Tensor next;
  if (a == 1.0) {
    next = endpoint;
  } else {
    // x + a (e - x) keeps x a bit-exact fixed point when e == x.
    next = state.x + (endpoint - state.x) * a;
  }
  if (noise.defined()) {
    require(noise.sizes() == state.x.sizes(), ErrorCode::ShapeError, "noise shape differs from state");
    if (s != 0.0) next = next + noise * s;
  }
  return BridgeState{next, state.k + 1, schedule.t[state.k + 1]};
}

Rollout rollout(const EndpointFn& generator, const torch::Tensor& x0, const BridgeSchedule& schedule, RolloutMode mode,
                std::uint64_t rng_seed) {
  Rollout r;
  r.trajectory.reserve(schedule.K + 1);
  r.endpoints.reserve(schedule.K);
  r.trajectory.push_back(initial_state(x0, schedule));
  auto gen = make_generator(rng_seed);
  for (int k = 0; k < schedule.K; ++k) {
    const auto& state = r.trajectory.back();
    auto endpoint = predict_endpoint(generator, state, schedule);
    torch::Tensor noise;
    if (mode == RolloutMode::TrainStochastic) noise = at::randn(state.x.sizes(), gen, state.x.options());
    r.endpoints.push_back(endpoint);
    r.trajectory.push_back(bridge_step(state, endpoint, schedule, noise));
  }
  r.y_hat = r.endpoints.back();
  return r;
}

}  // namespace ulfb::bridge
