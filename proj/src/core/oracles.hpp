#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

namespace ulfb::oracles {

struct CheckResult {
  std::string name;
  bool passed = false;
  double value = 0.0;      // measured error or statistic
  double tolerance = 0.0;  // pass iff value <= tolerance unless noted in detail
  std::string detail;
};

struct SuiteResult {
  std::string suite;
  std::vector<CheckResult> checks;
  bool passed() const;
  nlohmann::ordered_json to_json() const;
};

/// kl_grad, edt, schedule, gradcheck.
const std::vector<std::string>& suite_names();

/// One named suite or "all"; UnknownSuite otherwise.
std::vector<SuiteResult> run_suite(const std::string& name, std::uint64_t seed = 0);

/// Score-difference estimator vs the analytic KL gradient of a unit-variance shift family.
std::vector<CheckResult> kl_grad_checks(std::uint64_t seed, int64_t samples = 200000);
/// distance_transform vs O(n^2) search on random boundary sets.
std::vector<CheckResult> edt_checks(std::uint64_t seed, int trials = 100, int64_t size = 16);
/// Schedule endpoints, rollout determinism, identity fixed point.
std::vector<CheckResult> schedule_checks(std::uint64_t seed);
/// Autograd vs central differences in double precision on 8x8 inputs.
std::vector<CheckResult> gradcheck_checks(std::uint64_t seed);

/// DSM-trained MLP score vs analytic diffused scores of a 2-D Gaussian on a
/// held-out grid; value is the relative L2 error.
CheckResult teacher_fidelity_check(std::uint64_t seed, int steps = 6000, int batch = 4096);

/// Max over elements of |autograd - central difference|, relative to the larger
/// gradient norm. `f` maps a double tensor to a scalar.
double gradient_relative_error(const std::function<torch::Tensor(const torch::Tensor&)>& f, const torch::Tensor& x,
                               double h = 1e-6);

/// Exact distance by exhaustive search; kNoBoundaryDistance without boundary.
torch::Tensor brute_force_distance(const torch::Tensor& boundary);

}  // namespace ulfb::oracles
