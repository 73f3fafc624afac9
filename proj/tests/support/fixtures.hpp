#pragma once

#include <functional>
#include <string>
#include <utility>

#include <torch/torch.h>

#include "core/dataset.hpp"
#include "core/error.hpp"
#include "core/networks.hpp"
#include "core/synth_data.hpp"

namespace fixtures {

/// Epsilon "network" defined by a closure; carries one unused parameter so
/// optimizers have something to hold.
class FnEpsNet : public ulfb::nets::EpsNetBase {
 public:
  using Fn = std::function<torch::Tensor(const torch::Tensor& u, const torch::Tensor& tau_frac)>;
  explicit FnEpsNet(Fn fn) : fn_(std::move(fn)) { dummy_ = register_parameter("dummy", torch::zeros({1})); }
  torch::Tensor forward(const torch::Tensor& u, const torch::Tensor& tau_frac) override { return fn_(u, tau_frac); }
  torch::Tensor features(const torch::Tensor& u, const torch::Tensor&) override { return u; }
  int64_t feature_channels() const override { return 1; }
  bool spatial() const override { return false; }

 private:
  Fn fn_;
  torch::Tensor dummy_;
};

/// `n` phantom slices [n,3,size,size] tagged with one cohort.
inline ulfb::data::SliceSet phantom_set(int n, int size, ulfb::data::Cohort cohort, std::uint64_t seed = 0) {
  ulfb::data::SliceSet s;
  std::vector<torch::Tensor> rows;
  for (int i = 0; i < n; ++i) {
    auto p = ulfb::synth::make_phantom(seed * 1000 + i, size);
    rows.push_back(ulfb::synth::compose_channels(p.t1, p.t2));
    s.cohorts.push_back(cohort);
    s.subjects.push_back("s" + std::to_string(i));
    s.slice_index.push_back(0);
  }
  s.images = torch::stack(rows);
  return s;
}

/// Error code raised by `f`; UnknownSuite stands in for "nothing thrown".
template <typename F>
ulfb::ErrorCode code_of(F&& f) {
  try {
    f();
  } catch (const ulfb::Error& e) {
    return e.code();
  }
  return ulfb::ErrorCode::UnknownSuite;
}

}  // namespace fixtures
