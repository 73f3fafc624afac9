#include <doctest.h>

#include <cmath>

#include "core/asp.hpp"
#include "core/error.hpp"
#include "core/synth_data.hpp"
#include "support/fixtures.hpp"
#include "support/reference.hpp"

using namespace ulfb;

namespace {

const auto kF64 = torch::TensorOptions().dtype(torch::kFloat64);

/// Disk of intensity 0.6 on a -1 background, shifted right by `dx`; [1,3,n,n].
torch::Tensor disk(int n, double radius, int dx = 0) {
  auto idx = torch::arange(n, kF64);
  auto yy = idx.reshape({n, 1}) - (n - 1) / 2.0;
  auto xx = idx.reshape({1, n}) - (n - 1) / 2.0 - dx;
  auto inside = (yy * yy + xx * xx) <= radius * radius;
  auto img = torch::where(inside, torch::full({n, n}, 0.6, kF64), torch::full({n, n}, -1.0, kF64));
  return img.unsqueeze(0).expand({3, n, n}).unsqueeze(0).clone();
}

}  // namespace

TEST_CASE("normalize01 and soft_mask examples") {
  auto x = torch::tensor({-1.0, 1.0, 3.0, 0.0}, kF64);
  auto n = asp::normalize01(x);
  CHECK(torch::allclose(n, torch::tensor({0.0, 1.0, 1.0, 0.5}, kF64)));

  asp::AspConfig c;
  CHECK(asp::soft_mask(torch::tensor({c.tau_m}, kF64), c.tau_m, c.s_m).item<double>() == doctest::Approx(0.5));
  CHECK(asp::soft_mask(torch::tensor({c.tau_m + c.s_m}, kF64), c.tau_m, c.s_m).item<double>() ==
        doctest::Approx(ref::sigmoid(1.0)).epsilon(1e-12));
  CHECK(asp::soft_mask(torch::tensor({1.0}, kF64), 0.1, 0.05).item<double>() ==
        doctest::Approx(ref::sigmoid(18.0)).epsilon(1e-14));
}

TEST_CASE("trimap thresholds") {
  auto t = asp::make_trimap(torch::full({4, 4}, 0.9, kF64), 0.7, 0.3);
  CHECK(torch::equal(t.core, torch::ones({4, 4}, kF64)));
  CHECK(torch::equal(t.bg, torch::zeros({4, 4}, kF64)));
  auto u = asp::make_trimap(torch::full({4, 4}, 0.5, kF64), 0.7, 0.3);
  CHECK(u.core.sum().item<double>() == 0.0);
  CHECK(u.bg.sum().item<double>() == 0.0);
  auto r = asp::make_trimap(torch::tensor({0.1, 0.5, 0.9}, kF64), 0.7, 0.3);
  CHECK(torch::equal(r.core, torch::tensor({0.0, 0.0, 1.0}, kF64)));
  CHECK(torch::equal(r.bg, torch::tensor({1.0, 0.0, 0.0}, kF64)));
}

TEST_CASE("masked BCE examples") {
  const double clamp = 1e-6;
  auto w = torch::ones({4, 4}, kF64);
  auto near = asp::masked_bce(torch::full({4, 4}, 1 - clamp, kF64), 1.0, w, clamp).item<double>();
  CHECK(near == doctest::Approx(-std::log(1 - clamp)).epsilon(1e-9));
  CHECK(near < 2e-6);
  CHECK(asp::masked_bce(torch::full({4, 4}, 0.5, kF64), 1.0, w, clamp).item<double>() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(asp::masked_bce(torch::full({4, 4}, 0.5, kF64), 1.0, torch::zeros({4, 4}, kF64), clamp).item<double>() == 0.0);
}

TEST_CASE("boundary_map examples") {
  CHECK(asp::boundary_map(torch::full({5, 5}, 0.7, kF64)).abs().max().item<double>() == 0.0);

  // Foreground on columns >= 3: the rim is column 3.
  auto half = torch::zeros({6, 6}, kF64);
  half.slice(1, 3).fill_(1.0);
  auto b = asp::boundary_map(half);
  auto expected = torch::zeros({6, 6}, kF64);
  expected.select(1, 3).fill_(1.0);
  CHECK(torch::equal(b, expected));

  auto ramp = torch::tensor({{0.0, 0.5, 1.0}, {0.0, 0.5, 1.0}, {0.0, 0.5, 1.0}}, kF64);
  auto rb = asp::boundary_map(ramp);
  CHECK(torch::allclose(rb.select(0, 1), torch::tensor({0.0, 0.5, 0.5}, kF64)));
}

TEST_CASE("distance transform examples and brute-force agreement") {
  auto row = asp::distance_transform(torch::tensor({{0.0, 1.0, 0.0}}, kF64));
  CHECK(torch::equal(row, torch::tensor({{1.0, 0.0, 1.0}}, kF64)));

  auto corner = torch::zeros({3, 3}, kF64);
  corner[0][0] = 1.0;
  CHECK(asp::distance_transform(corner)[2][2].item<double>() == doctest::Approx(2 * std::sqrt(2.0)).epsilon(1e-15));

  auto none = asp::distance_transform(torch::zeros({4, 4}, kF64));
  CHECK(torch::equal(none, torch::full({4, 4}, asp::kNoBoundaryDistance, kF64)));

  auto gen = torch::Generator(at::detail::createCPUGenerator(17));
  for (int trial = 0; trial < 100; ++trial) {
    const double density = 0.02 + 0.3 * (trial % 10) / 10.0;
    auto b = (torch::rand({16, 16}, gen, kF64) < density).to(torch::kFloat64);
    auto got = asp::distance_transform(b);
    std::vector<std::uint8_t> bits(256);
    auto acc = b.accessor<double, 2>();
    for (int i = 0; i < 16; ++i)
      for (int j = 0; j < 16; ++j) bits[i * 16 + j] = acc[i][j] != 0.0;
    auto want = ref::brute_edt(bits, 16, 16, asp::kNoBoundaryDistance);
    auto ga = got.accessor<double, 2>();
    int mismatches = 0;
    for (int i = 0; i < 16; ++i)
      for (int j = 0; j < 16; ++j) mismatches += ga[i][j] != want[i * 16 + j];
    CHECK(mismatches == 0);
  }

  auto batch = torch::stack({corner, torch::zeros({3, 3}, kF64)});
  auto bd = asp::distance_transform(batch);
  CHECK(torch::equal(bd[0], asp::distance_transform(corner)));
}

TEST_CASE("nsd_penalty examples") {
  auto b = torch::zeros({1, 5, 5}, kF64);
  b[0][2][2] = 1.0;
  CHECK(asp::nsd_penalty(b, torch::zeros({1, 5, 5}, kF64), 2.0, 0.5).item<double>() ==
        doctest::Approx(1 - ref::sigmoid(4.0)).epsilon(1e-12));
  CHECK(asp::nsd_penalty(b, torch::full({1, 5, 5}, 2.0, kF64), 2.0, 0.5).item<double>() ==
        doctest::Approx(0.5).epsilon(1e-12));
  CHECK(asp::nsd_penalty(torch::zeros({1, 5, 5}, kF64), torch::zeros({1, 5, 5}, kF64), 2.0, 0.5).item<double>() == 0.0);
}

TEST_CASE("structure preservation on phantoms") {
  asp::AspConfig c;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto p = synth::make_phantom(seed, 32);
    auto x = synth::compose_channels(p.t1, p.t2).unsqueeze(0).to(torch::kFloat64);
    auto t = asp::asp_loss(x, x, c);
    CHECK(t.total().item<double>() <= 0.05);
    for (const auto& term : {t.core_bce, t.bg_bce, t.boundary}) CHECK(term.item<double>() >= 0.0);
    CHECK(t.boundary.item<double>() <= 1.0);
  }

  auto x = disk(32, 9);
  const double base = asp::asp_loss(x, x, c).boundary.item<double>();
  CHECK(asp::asp_loss(x, disk(32, 9, 4), c).boundary.item<double>() > base);
  double prev = -1;
  for (int off : {0, 1, 2, 4, 8}) {
    const double v = asp::asp_loss(x, disk(32, 9, off), c).boundary.item<double>();
    CHECK(v >= prev);
    prev = v;
  }
  auto inv = asp::asp_loss(x, -x, c);
  CHECK((inv.core_bce + inv.bg_bce).item<double>() > 5.0);
}

TEST_CASE("asp_loss gradient matches finite differences on 8x8") {
  asp::AspConfig c;
  c.s_m = 0.2;  // a softer mask keeps the finite-difference regime smooth
  auto x = torch::rand({1, 3, 8, 8}, kF64) * 2 - 1;
  x.slice(2, 2, 6).slice(3, 2, 6).fill_(0.8);
  auto structure = asp::prepare_input(x, c);
  auto f = [&](const torch::Tensor& y) { return asp::asp_loss(structure, y, c).total(); };
  CHECK(ref::gradcheck(f, torch::rand({1, 3, 8, 8}, kF64) * 1.6 - 0.8) <= 1e-4);
}

TEST_CASE("config validation") {
  asp::AspConfig c;
  c.tau_bg = 0.8;
  CHECK(fixtures::code_of([&] { c.validate(); }) == ErrorCode::InvalidConfig);
  asp::AspConfig d;
  d.s_m = 0;
  CHECK(fixtures::code_of([&] { d.validate(); }) == ErrorCode::InvalidConfig);
  CHECK(fixtures::code_of([] { asp::boundary_map(torch::zeros({2, 2})); }) == ErrorCode::TooSmall);
}
