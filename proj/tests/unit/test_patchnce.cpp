#include <doctest.h>

#include <cmath>

#include "core/error.hpp"
#include "core/patchnce.hpp"
#include "support/fixtures.hpp"
#include "support/reference.hpp"

using namespace ulfb;

namespace {

const auto kF64 = torch::TensorOptions().dtype(torch::kFloat64);

torch::Tensor unit_rows(const torch::Tensor& x) { return x / x.norm(2, -1, true); }

}  // namespace

TEST_CASE("sampled features are unit rows and reproducible") {
  patchnce::Projector proj(std::vector<int64_t>{4, 8}, 16);
  std::vector<torch::Tensor> maps{torch::randn({2, 4, 8, 8}), torch::randn({2, 8, 4, 4})};
  auto a = patchnce::sample_patch_features(maps, nullptr, 6, proj, 3);
  REQUIRE(a.features.size() == 2);
  for (const auto& f : a.features) {
    CHECK(f.sizes() == torch::IntArrayRef{2, 6, 16});
    CHECK((f.norm(2, -1) - 1).abs().max().item<double>() < 1e-6);
  }
  auto b = patchnce::sample_patch_features(maps, &a.ids, 6, proj, 99);
  for (std::size_t l = 0; l < 2; ++l) CHECK(torch::equal(a.features[l], b.features[l]));

  // Output maps equal to the source maps at shared locations give identical rows.
  std::vector<torch::Tensor> copies{maps[0].clone(), maps[1].clone()};
  auto c = patchnce::sample_patch_features(copies, &a.ids, 6, proj, 5);
  for (std::size_t l = 0; l < 2; ++l) CHECK(torch::equal(c.features[l], a.features[l]));

  CHECK(fixtures::code_of([&] { patchnce::sample_patch_features(maps, nullptr, 17, proj, 0); }) ==
        ErrorCode::TooManyPatches);
  CHECK(fixtures::code_of([&] { patchnce::sample_patch_features(maps, nullptr, 1, proj, 0); }) ==
        ErrorCode::NeedNegatives);
}

TEST_CASE("layer loss closed forms") {
  // All similarities equal: uniform softmax over N = 8 candidates.
  auto same = unit_rows(torch::ones({1, 8, 4}, kF64));
  CHECK(patchnce::layer_loss(same, same, 0.07).item<double>() == doctest::Approx(std::log(8.0)).epsilon(1e-12));

  // Orthonormal rows: positive similarity 1, negative 0, N = 2.
  auto eye = torch::eye(2, kF64).unsqueeze(0);
  const double expect = -std::log(std::exp(1 / 0.07) / (std::exp(1 / 0.07) + 1));
  CHECK(patchnce::layer_loss(eye, eye, 0.07).item<double>() == doctest::Approx(expect).epsilon(1e-6));

  auto distinct = unit_rows(torch::randn({2, 8, 16}, kF64));
  CHECK(patchnce::layer_loss(distinct, distinct, 0.07).item<double>() < std::log(8.0));
  CHECK(fixtures::code_of([] {
          patchnce::layer_loss(torch::ones({1, 1, 4}), torch::ones({1, 1, 4}), 0.07);
        }) == ErrorCode::NeedNegatives);
}

TEST_CASE("loss is invariant to negative order and row scale") {
  auto src = unit_rows(torch::randn({2, 6, 8}, kF64));
  auto out = unit_rows(torch::randn({2, 6, 8}, kF64));
  const double base = patchnce::layer_loss(src, out, 0.1).item<double>();
  // Permuting patch order jointly keeps every positive pair and permutes negatives.
  auto perm = torch::tensor({3, 0, 5, 1, 4, 2}, torch::kLong);
  const double permuted = patchnce::layer_loss(src.index_select(1, perm), out.index_select(1, perm), 0.1).item<double>();
  CHECK(std::abs(base - permuted) < 1e-10);

  auto raw = torch::randn({1, 5, 8}, kF64);
  auto scale = torch::rand({1, 5, 1}, kF64) * 10 + 0.1;
  auto o = unit_rows(torch::randn({1, 5, 8}, kF64));
  const double a = patchnce::layer_loss(unit_rows(raw), o, 0.1).item<double>();
  const double b = patchnce::layer_loss(unit_rows(raw * scale), o, 0.1).item<double>();
  CHECK(std::abs(a - b) < 1e-10);
}

TEST_CASE("patchnce gradient matches finite differences") {
  auto src = unit_rows(torch::randn({2, 8, 8}, kF64));
  auto f = [&](const torch::Tensor& out) {
    return patchnce::patchnce_loss({src}, {unit_rows(out)}, 0.07);
  };
  CHECK(ref::gradcheck(f, torch::randn({2, 8, 8}, kF64)) <= 1e-4);
}
