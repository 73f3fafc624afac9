#include <doctest.h>

#include <cmath>

#include "core/error.hpp"
#include "core/metrics.hpp"
#include "core/rng.hpp"
#include "core/synth_data.hpp"
#include "support/fixtures.hpp"
#include "support/reference.hpp"

using namespace ulfb;

namespace {

const auto kF64 = torch::TensorOptions().dtype(torch::kFloat64);

double ref_ms_ssim(const torch::Tensor& a, const torch::Tensor& b, const metrics::MsSsimConfig& cfg) {
  auto to01 = [](const torch::Tensor& t) { return ref::from_tensor((t.to(torch::kFloat64).clamp(-1, 1) + 1) * 0.5); };
  return ref::ms_ssim_channel(to01(a), to01(b), cfg.weights, cfg.window, cfg.sigma, cfg.k1, cfg.k2);
}

}  // namespace

TEST_CASE("PSNR arithmetic") {
  auto a = torch::rand({32, 32}, kF64) * 1.6 - 0.8;
  CHECK(metrics::psnr(a, a) == 100.0);
  CHECK(std::abs(metrics::psnr(a, a + 0.2) - 20.0) < 1e-6);
  double prev = 1e9;
  for (double sigma : {0.02, 0.05, 0.1, 0.2}) {
    auto noise = at::randn({64, 64}, make_generator(5), kF64);
    const double p = metrics::psnr(a.repeat({2, 2}), a.repeat({2, 2}) + sigma * noise);
    CHECK(p < prev);
    prev = p;
  }
}

TEST_CASE("MS-SSIM identities and reference agreement") {
  auto a = torch::rand({32, 32}, kF64) * 2 - 1;
  CHECK(std::abs(metrics::ms_ssim(a, a) - 1.0) < 1e-6);
  auto c = torch::full({32, 32}, 0.3, kF64);
  CHECK(std::abs(metrics::ms_ssim(c, c) - 1.0) < 1e-6);

  auto cfg = metrics::MsSsimConfig::for_size(32);
  CHECK(cfg.scales == 3);
  CHECK(cfg.window == 7);
  double wsum = 0;
  for (double w : cfg.weights) wsum += w;
  CHECK(wsum == doctest::Approx(1.0).epsilon(1e-12));

  auto p = synth::make_phantom(3, 32).t1.to(torch::kFloat64);
  auto noisy = p + 0.05 * at::randn({32, 32}, make_generator(7), kF64);
  const double got = metrics::ms_ssim(p, noisy);
  CHECK(got > 0.90);
  CHECK(got < 1.0);
  CHECK(got == doctest::Approx(ref_ms_ssim(p, noisy, cfg)).epsilon(1e-9));

  // Full five-scale configuration at a size that fits it.
  auto big = torch::rand({176, 176}, kF64) * 2 - 1;
  auto big_b = (big + 0.1 * torch::randn({176, 176}, kF64)).clamp(-1, 1);
  metrics::MsSsimConfig standard;
  CHECK(metrics::MsSsimConfig::for_size(176).scales == 5);
  CHECK(metrics::ms_ssim(big, big_b, standard) == doctest::Approx(ref_ms_ssim(big, big_b, standard)).epsilon(1e-9));

  CHECK(fixtures::code_of([&] { metrics::ms_ssim(a, a, standard); }) == ErrorCode::TooSmall);
  CHECK(fixtures::code_of([&] { metrics::ms_ssim(a, c.slice(0, 0, 16)); }) == ErrorCode::ShapeError);
}

TEST_CASE("FID closed forms") {
  auto A = torch::randn({200, 4}, kF64);
  auto sa = metrics::feature_stats(A);
  CHECK(std::abs(metrics::fid(sa, sa)) < 1e-6);

  metrics::GaussianStats u0{Eigen::VectorXd::Constant(1, 0.0), Eigen::MatrixXd::Constant(1, 1, 1.0)};
  metrics::GaussianStats u1{Eigen::VectorXd::Constant(1, 1.0), Eigen::MatrixXd::Constant(1, 1, 1.0)};
  CHECK(std::abs(metrics::fid(u0, u1) - 1.0) < 1e-6);

  Eigen::VectorXd v(3);
  v << 1.0, -2.0, 0.5;
  metrics::GaussianStats z0{Eigen::VectorXd::Zero(3), Eigen::MatrixXd::Zero(3, 3)};
  metrics::GaussianStats z1{v, Eigen::MatrixXd::Zero(3, 3)};
  CHECK(metrics::fid(z0, z1) == doctest::Approx(v.squaredNorm()).epsilon(1e-12));

  std::vector<double> ma{0.1, 0.2, -0.3}, va{0.5, 1.5, 2.0}, mb{-0.2, 0.0, 0.4}, vb{1.0, 0.3, 0.7};
  metrics::GaussianStats da{Eigen::Map<Eigen::VectorXd>(ma.data(), 3), Eigen::Map<Eigen::VectorXd>(va.data(), 3).asDiagonal()};
  metrics::GaussianStats db{Eigen::Map<Eigen::VectorXd>(mb.data(), 3), Eigen::Map<Eigen::VectorXd>(vb.data(), 3).asDiagonal()};
  CHECK(metrics::fid(da, db) == doctest::Approx(ref::fid_diagonal(ma, va, mb, vb)).epsilon(1e-10));

  auto B = torch::randn({150, 4}, kF64) * 1.3 + 0.2;
  auto sb = metrics::feature_stats(B);
  CHECK(std::abs(metrics::fid(sa, sb) - metrics::fid(sb, sa)) < 1e-8);

  metrics::GaussianStats neg{Eigen::VectorXd::Zero(1), Eigen::MatrixXd::Constant(1, 1, -1.0)};
  CHECK(fixtures::code_of([&] { metrics::fid(neg, u0); }) == ErrorCode::NumericalError);
  CHECK(fixtures::code_of([] { metrics::feature_stats(torch::zeros({1, 3})); }) == ErrorCode::NeedSamples);
}

TEST_CASE("KID estimator properties") {
  CHECK(metrics::kid(torch::zeros({5, 3}, kF64), torch::zeros({7, 3}, kF64)) == doctest::Approx(0.0).epsilon(1e-14));

  std::vector<double> vals;
  for (int t = 0; t < 100; ++t) {
    auto a = at::randn({50, 8}, make_generator(derive_seed(1, t)), kF64);
    auto b = at::randn({50, 8}, make_generator(derive_seed(2, t)), kF64);
    vals.push_back(metrics::kid(a, b));
  }
  double mean = 0, var = 0;
  for (double v : vals) mean += v;
  mean /= vals.size();
  for (double v : vals) var += (v - mean) * (v - mean);
  const double se = std::sqrt(var / (vals.size() - 1) / vals.size());
  CHECK(std::abs(mean) <= 3 * se);

  auto near = at::randn({50, 8}, make_generator(3), kF64);
  auto far = at::randn({50, 8}, make_generator(4), kF64) + 5.0;
  CHECK(metrics::kid(near, far) > 0.0);
  CHECK(metrics::kid(near, far) > std::abs(mean) + 3 * se);

  auto perm = torch::randperm(50, torch::kLong);
  CHECK(std::abs(metrics::kid(near.index_select(0, perm), far) - metrics::kid(near, far)) < 1e-10);
  CHECK(fixtures::code_of([] { metrics::kid(torch::zeros({1, 2}), torch::zeros({3, 2})); }) == ErrorCode::NeedSamples);
}

TEST_CASE("subject-level aggregation") {
  auto r = metrics::subject_mean({20.0, 20.0, 30.0}, {"a", "a", "b"});
  CHECK(r.per_subject.at("a") == 20.0);
  CHECK(r.per_subject.at("b") == 30.0);
  CHECK(r.aggregate == 25.0);

  std::vector<double> v{10.0};
  std::vector<std::string> s{"one"};
  for (int i = 0; i < 100; ++i) {
    v.push_back(30.0);
    s.push_back("many");
  }
  CHECK(metrics::subject_mean(v, s).aggregate == 20.0);
}

TEST_CASE("feature encoder and cohort-level evaluation") {
  auto dir = ref::scratch_dir("metrics_eval");
  synth::CohortOptions o;
  o.n_subjects = 24;
  o.slices_per_subject = 4;
  o.split.paired_test_count = 4;
  o.seed = 3;
  auto m = synth::build_cohorts(dir, o);
  auto target = data::load_cohort(m, data::Cohort::TargetPool);

  metrics::EncoderConfig ec;
  ec.steps = 150;
  std::vector<double> losses;
  auto enc = metrics::train_feature_encoder(target, ec, &losses);
  REQUIRE(losses.size() == 150);
  CHECK(losses.back() < losses.front());
  CHECK(enc->frozen());
  auto f1 = metrics::extract_features(enc, target.images);
  CHECK(f1.size(1) == 64);
  CHECK(torch::equal(f1, metrics::extract_features(enc, target.images)));

  auto source = data::load_cohort(m, data::Cohort::SourcePool);
  CHECK(fixtures::code_of([&] { metrics::train_feature_encoder(source, ec); }) == ErrorCode::ContaminatedTeacherData);

  metrics::TranslateFn identity = [](const torch::Tensor& x) { return x.clone(); };
  auto clean_report = metrics::evaluate_paired(identity, m, {true});
  CHECK(clean_report["ms_ssim_t1"]["aggregate"].get<double>() == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(clean_report["psnr_t1"]["aggregate"].get<double>() == 100.0);
  CHECK(clean_report["psnr_t2"]["per_subject"].size() == 4);

  // Split-half self-FID of the target pool is the floor for any translation.
  const int64_t n = target.size();
  auto first = target.images.slice(0, 0, n / 2), second = target.images.slice(0, n / 2);
  const double floor = metrics::unpaired_report(enc, first, second)["fid"]["aggregate"].get<double>();
  auto copies = target.images.index_select(0, at::randint(0, n, {n / 2}, make_generator(4), torch::kLong));
  const double copied = metrics::unpaired_report(enc, copies, target.images)["fid"]["aggregate"].get<double>();
  auto acquired = metrics::evaluate_unpaired(identity, m, enc);
  const double degraded = acquired["fid"]["aggregate"].get<double>();
  CHECK(copied <= 2.0 * floor);
  CHECK(degraded > floor);
  CHECK(acquired.dump() == metrics::evaluate_unpaired(identity, m, enc).dump());
}
