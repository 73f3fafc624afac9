#include "core/oracles.hpp"

#include <chrono>
#include <cmath>
#include <sstream>

#include "core/asp.hpp"
#include "core/bridge.hpp"
#include "core/diffusion.hpp"
#include "core/dmd2.hpp"
#include "core/error.hpp"
#include "core/networks.hpp"
#include "core/patchnce.hpp"
#include "core/rng.hpp"
#include "core/synth_data.hpp"
#include "core/trainer.hpp"

namespace ulfb::oracles {

namespace {

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(6);
  os << v;
  return os.str();
}

CheckResult within(std::string name, double value, double tol, std::string detail = {}) {
  return {std::move(name), value <= tol, value, tol, std::move(detail)};
}

}  // namespace

bool SuiteResult::passed() const {
  for (const auto& c : checks)
    if (!c.passed) return false;
  return !checks.empty();
}

nlohmann::ordered_json SuiteResult::to_json() const {
  nlohmann::ordered_json j;
  j["suite"] = suite;
  j["passed"] = passed();
  j["checks"] = nlohmann::ordered_json::array();
  for (const auto& c : checks) {
    j["checks"].push_back(
        {{"name", c.name}, {"passed", c.passed}, {"value", c.value}, {"tolerance", c.tolerance}, {"detail", c.detail}});
  }
  return j;
}

const std::vector<std::string>& suite_names() {
  static const std::vector<std::string> names{"kl_grad", "edt", "schedule", "gradcheck"};
  return names;
}

std::vector<SuiteResult> run_suite(const std::string& name, std::uint64_t seed) {
  auto one = [seed](const std::string& n) -> SuiteResult {
    if (n == "kl_grad") return {n, kl_grad_checks(seed)};
    if (n == "edt") return {n, edt_checks(seed)};
    if (n == "schedule") return {n, schedule_checks(seed)};
    if (n == "gradcheck") return {n, gradcheck_checks(seed)};
    fail(ErrorCode::UnknownSuite, "unknown suite '" + n + "' (expected kl_grad, edt, schedule, gradcheck or all)");
  };
  if (name != "all") return {one(name)};
  std::vector<SuiteResult> out;
  for (const auto& n : suite_names()) out.push_back(one(n));
  return out;
}

std::vector<CheckResult> kl_grad_checks(std::uint64_t seed, int64_t samples) {
  const auto schedule = diffusion::make_noise_schedule();
  synth::GmmScoreSource real(synth::GaussianMixture::isotropic({0.0}, 1.0), schedule);
  double mean_gamma_sq = 0.0;
  for (int tau = schedule.tau_min(); tau <= schedule.tau_max(); ++tau) mean_gamma_sq += std::pow(schedule.gamma[tau], 2);
  mean_gamma_sq /= schedule.tau_max() - schedule.tau_min() + 1;

  std::vector<CheckResult> out;
  for (double m : {0.25, 0.5, 1.0}) {
    synth::GmmScoreSource fake(synth::GaussianMixture::isotropic({m}, 1.0), schedule);
    auto y = at::randn({samples, 1}, make_generator(derive_seed(seed, 0x6B1)), torch::kFloat64) + m;

    dmd2::GradientOptions opts;
    opts.weighting = dmd2::Weighting::InverseSignalPower;
    const double est = dmd2::dmd2_generator_gradient(real, fake, y, derive_seed(seed, 0x6B2), opts).mean().item<double>();
    const double expect = synth::analytic_kl_grad_shift(m);
    out.push_back(within("kl_grad m=" + fmt(m), std::abs(est - expect) / expect, 0.05,
                         "estimate " + fmt(est) + " vs " + fmt(expect)));

    opts.weighting = dmd2::Weighting::Unit;
    const double raw = dmd2::dmd2_generator_gradient(real, fake, y, derive_seed(seed, 0x6B3), opts).mean().item<double>();
    const double raw_expect = mean_gamma_sq * m;
    out.push_back(within("level-averaged grad m=" + fmt(m), std::abs(raw - raw_expect) / raw_expect, 0.05,
                         "estimate " + fmt(raw) + " vs E[gamma^2] m = " + fmt(raw_expect)));
  }
  return out;
}

torch::Tensor brute_force_distance(const torch::Tensor& boundary) {
  auto b = boundary.to(torch::kFloat64).contiguous();
  const int64_t h = b.size(0), w = b.size(1);
  auto out = torch::full({h, w}, asp::kNoBoundaryDistance, torch::kFloat64);
  auto bp = b.accessor<double, 2>();
  auto op = out.accessor<double, 2>();
  for (int64_t i = 0; i < h; ++i) {
    for (int64_t j = 0; j < w; ++j) {
      double best = -1;
      for (int64_t y = 0; y < h; ++y) {
        for (int64_t x = 0; x < w; ++x) {
          if (bp[y][x] == 0.0) continue;
          const double d2 = static_cast<double>((i - y) * (i - y) + (j - x) * (j - x));
          if (best < 0 || d2 < best) best = d2;
        }
      }
      if (best >= 0) op[i][j] = std::sqrt(best);
    }
  }
  return out;
}

std::vector<CheckResult> edt_checks(std::uint64_t seed, int trials, int64_t size) {
  auto gen = make_generator(derive_seed(seed, 0xED7));
  int exact = 0;
  double worst = 0.0;
  for (int i = 0; i < trials; ++i) {
    // Densities from sparse to dense; trial 0 has no boundary at all.
    const double p = i == 0 ? 0.0 : 0.01 + 0.3 * (i % 10) / 10.0;
    auto b = (at::rand({size, size}, gen, torch::kFloat64) < p).to(torch::kFloat64);
    auto got = asp::distance_transform(b);
    auto want = brute_force_distance(b);
    if (torch::equal(got, want)) ++exact;
    worst = std::max(worst, (got - want).abs().max().item<double>());
  }
  return {CheckResult{"edt exact on " + std::to_string(trials) + " random " + std::to_string(size) + "x" +
                          std::to_string(size) + " sets",
                      exact == trials, worst, 0.0, std::to_string(exact) + "/" + std::to_string(trials) + " exact"}};
}

std::vector<CheckResult> schedule_checks(std::uint64_t seed) {
  std::vector<CheckResult> out;
  double worst = 0.0;
  int count = 0;
  auto gen = make_generator(derive_seed(seed, 0x5C1));
  for (int K = 1; K <= 8; ++K) {
    for (double ns : {0.0, 0.05, 0.5, 2.0}) {
      auto s = bridge::make_schedule(K, ns);
      worst = std::max({worst, std::abs(s.alpha[K - 1] - 1.0), std::abs(s.sigma[K - 1])});
      ++count;
      // Random strictly increasing grid.
      auto cuts = std::get<0>(at::rand({K - 1}, gen, torch::kFloat64).sort());
      std::vector<double> grid{0.0};
      for (int i = 0; i < K - 1; ++i) grid.push_back(cuts[i].item<double>());
      grid.push_back(1.0);
      bool increasing = true;
      for (std::size_t i = 1; i < grid.size(); ++i) increasing = increasing && grid[i] > grid[i - 1];
      if (!increasing) continue;
      auto r = bridge::make_schedule(K, ns, grid);
      worst = std::max({worst, std::abs(r.alpha[K - 1] - 1.0), std::abs(r.sigma[K - 1])});
      ++count;
    }
  }
  out.push_back(
      within("alpha[K-1]=1, sigma[K-1]=0", worst, 0.0, std::to_string(count) + " schedules, max deviation " + fmt(worst)));

  torch::manual_seed(derive_seed(seed, 0x5C2));
  nets::Generator g(nets::NetConfig{8, 16});
  bridge::EndpointFn fn = [&g](const torch::Tensor& x, double t) { return g->forward(x, t); };
  auto x0 = at::rand({2, 3, 16, 16}, gen, torch::kFloat32) * 2 - 1;
  const auto sched = bridge::make_schedule(3, bridge::kDefaultNoiseScale);
  torch::NoGradGuard no_grad;
  auto a = bridge::rollout(fn, x0, sched, bridge::RolloutMode::InferDeterministic, 1).y_hat;
  auto b = bridge::rollout(fn, x0, sched, bridge::RolloutMode::InferDeterministic, 2).y_hat;
  out.push_back(CheckResult{"deterministic rollout bit-identical", torch::equal(a, b),
                            (a - b).abs().max().item<double>(), 0.0, "two runs, different rng seeds"});

  bridge::EndpointFn identity = [](const torch::Tensor& x, double) { return x.clone(); };
  auto r = bridge::rollout(identity, x0, sched, bridge::RolloutMode::InferDeterministic, 0);
  bool fixed = true;
  for (const auto& st : r.trajectory) fixed = fixed && torch::equal(st.x, x0);
  out.push_back(CheckResult{"identity generator is a fixed point", fixed && torch::equal(r.y_hat, x0),
                            (r.y_hat - x0).abs().max().item<double>(), 0.0, "all K+1 states equal x0"});
  return out;
}

double gradient_relative_error(const std::function<torch::Tensor(const torch::Tensor&)>& f, const torch::Tensor& x,
                               double h) {
  auto xa = x.detach().clone().to(torch::kFloat64).set_requires_grad(true);
  auto y = f(xa);
  auto grad = torch::autograd::grad({y}, {xa}, {}, false, false, true)[0];
  if (!grad.defined()) grad = torch::zeros_like(xa);
  torch::NoGradGuard no_grad;
  auto base = x.detach().clone().to(torch::kFloat64).contiguous();
  auto fd = torch::zeros_like(base);
  auto flat = base.view({-1});
  auto fd_flat = fd.view({-1});
  for (int64_t i = 0; i < flat.numel(); ++i) {
    const double v = flat[i].item<double>();
    flat[i] = v + h;
    const double up = f(base).item<double>();
    flat[i] = v - h;
    const double down = f(base).item<double>();
    flat[i] = v;
    fd_flat[i] = (up - down) / (2 * h);
  }
  const double scale = std::max({grad.norm().item<double>(), fd.norm().item<double>(), 1e-12});
  return (grad - fd).norm().item<double>() / scale;
}

std::vector<CheckResult> gradcheck_checks(std::uint64_t seed) {
  constexpr double kTol = 1e-4;
  auto gen = make_generator(derive_seed(seed, 0x6C0));
  auto opts = torch::TensorOptions().dtype(torch::kFloat64);
  std::vector<CheckResult> out;

  // Source with a bright centre square so the trimap has all three regions.
  auto x = torch::full({1, 3, 8, 8}, -0.9, opts);
  x.index_put_({torch::indexing::Slice(), torch::indexing::Slice(), torch::indexing::Slice(2, 6),
                torch::indexing::Slice(2, 6)},
               0.6);
  x = x + 0.05 * at::randn({1, 3, 8, 8}, gen, opts);
  asp::AspConfig acfg;
  const auto structure = asp::prepare_input(x, acfg);
  auto y0 = (x + 0.3 * at::randn({1, 3, 8, 8}, gen, opts)).clamp(-0.95, 0.95);
  out.push_back(within("asp_loss", gradient_relative_error(
                                       [&](const torch::Tensor& y) { return asp::asp_loss(structure, y, acfg).total(); }, y0),
                       kTol));

  auto src = torch::nn::functional::normalize(at::randn({2, 8, 16}, gen, opts),
                                              torch::nn::functional::NormalizeFuncOptions().dim(-1));
  auto feat = at::randn({2, 8, 16}, gen, opts);
  out.push_back(within("patchnce_loss",
                       gradient_relative_error(
                           [&](const torch::Tensor& f) {
                             auto fo = torch::nn::functional::normalize(
                                 f, torch::nn::functional::NormalizeFuncOptions().dim(-1));
                             return patchnce::patchnce_loss({src}, {fo}, 0.07);
                           },
                           feat),
                       kTol));

  auto xt = at::randn({1, 3, 8, 8}, gen, opts);
  out.push_back(within(
      "sb_loss",
      gradient_relative_error([&](const torch::Tensor& e) { return train::sb_loss(xt, e); },
                              at::randn({1, 3, 8, 8}, gen, opts)),
      kTol));

  torch::manual_seed(derive_seed(seed, 0x6C1));
  nets::Discriminator disc(nets::NetConfig{8, 16});
  disc->to(torch::kFloat64);
  out.push_back(within("adversarial g_loss",
                       gradient_relative_error(
                           [&](const torch::Tensor& fake) {
                             return torch::nn::functional::softplus(-disc->forward(fake, 0.5)).mean();
                           },
                           at::randn({1, 3, 8, 8}, gen, opts)),
                       kTol));
  return out;
}

CheckResult teacher_fidelity_check(std::uint64_t seed, int steps, int batch) {
  const auto schedule = diffusion::make_noise_schedule();
  synth::GaussianMixture gmm;
  gmm.weights = torch::ones({1}, torch::kFloat64);
  gmm.means = torch::tensor({0.5, -0.3}, torch::kFloat64).reshape({1, 2});
  gmm.covariances = torch::tensor({0.5, 0.2, 0.2, 0.3}, torch::kFloat64).reshape({1, 2, 2});
  synth::GmmScoreSource truth(gmm, schedule);

  torch::manual_seed(derive_seed(seed, 0x7EA));
  auto net = std::make_shared<nets::MlpEpsNet>(2);
  net->to(torch::kFloat64);
  diffusion::ScoreModel model(net, diffusion::Role::TeacherReal, schedule);
  diffusion::SamplerFitConfig fit;
  fit.steps = steps;
  fit.batch = batch;
  fit.seed = derive_seed(seed, 0x7EB);
  const auto start = std::chrono::steady_clock::now();
  diffusion::fit_score_model(
      model, [&gmm](int64_t n, std::uint64_t s) { return synth::sample(gmm, n, s); }, fit);
  model.freeze();
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  // Held-out grid: offsets from the mean not aligned with any training draw.
  auto axis = torch::linspace(-1.9, 1.9, 17, torch::kFloat64);
  auto grid = torch::stack(torch::meshgrid({axis, axis}, "ij"), -1).reshape({-1, 2});
  double num = 0.0, den = 0.0;
  torch::NoGradGuard no_grad;
  for (int tau = schedule.tau_min(); tau <= schedule.tau_max(); tau += 6) {
    const double g = schedule.gamma[tau], v = schedule.varsigma[tau];
    // Points within ~2 std of the diffused marginal.
    auto u = grid * std::sqrt(g * g * 0.5 + v * v) + g * gmm.means;
    auto taus = torch::full({u.size(0)}, tau, torch::kLong);
    auto want = truth.score(u, taus);
    auto got = model.score(u, taus);
    num += (got - want).pow(2).sum().item<double>();
    den += want.pow(2).sum().item<double>();
  }
  const double rel = std::sqrt(num / den);
  return within("teacher score fidelity (2-D Gaussian)", rel, 0.10,
                "relative L2 " + fmt(rel) + " after " + std::to_string(steps) + " DSM steps in " + fmt(secs) + " s");
}

}  // namespace ulfb::oracles
