#include "core/asp.hpp"

#include <cmath>
#include <limits>
#include <vector>

#include "core/error.hpp"

namespace ulfb::asp {

namespace F = torch::nn::functional;

void AspConfig::validate() const {
  require(tau_m > 0 && tau_m < 1, ErrorCode::InvalidConfig, "tau_m must lie in (0,1)");
  require(s_m > 0, ErrorCode::InvalidConfig, "s_m must be positive");
  require(tau_fg > 0 && tau_fg < 1 && tau_bg > 0 && tau_bg < 1, ErrorCode::InvalidConfig,
          "trimap thresholds must lie in (0,1)");
  require(tau_bg < tau_fg, ErrorCode::InvalidConfig, "tau_bg must be below tau_fg");
  require(t_tol >= 0, ErrorCode::InvalidConfig, "t_tol must be nonnegative");
  require(gamma_soft > 0, ErrorCode::InvalidConfig, "gamma_soft must be positive");
  require(log_clamp > 0 && log_clamp < 0.5, ErrorCode::InvalidConfig, "log_clamp must lie in (0, 0.5)");
}

torch::Tensor normalize01(const torch::Tensor& x) { return (x.clamp(-1.0, 1.0) + 1.0) * 0.5; }

torch::Tensor soft_mask(const torch::Tensor& x01, double tau_m, double s_m) {
  require(s_m > 0, ErrorCode::InvalidConfig, "mask softness must be positive");
  return torch::sigmoid((x01 - tau_m) / s_m);
}

torch::Tensor slice_mask(const torch::Tensor& x, const AspConfig& cfg) {
  require(x.dim() == 3 || x.dim() == 4, ErrorCode::ShapeError, "expected [C,H,W] or [B,C,H,W]");
  return soft_mask(normalize01(x).mean(x.dim() - 3), cfg.tau_m, cfg.s_m);
}

Trimap make_trimap(const torch::Tensor& m_in, double tau_fg, double tau_bg) {
  require(tau_bg < tau_fg, ErrorCode::InvalidConfig, "tau_bg must be below tau_fg");
  auto m = m_in.detach();
  return {(m > tau_fg).to(m.scalar_type()), (m < tau_bg).to(m.scalar_type())};
}

namespace {

// View as [N, H, W]; a 1-D input becomes one row.
torch::Tensor as_planes(const torch::Tensor& t) {
  if (t.dim() == 1) return t.reshape({1, 1, t.size(0)});
  if (t.dim() == 2) return t.unsqueeze(0);
  return t.reshape({-1, t.size(-2), t.size(-1)});
}

}  // namespace

torch::Tensor masked_bce(const torch::Tensor& pred, double target, const torch::Tensor& weight, double log_clamp) {
  require(pred.sizes() == weight.sizes(), ErrorCode::ShapeError, "prediction and weight shapes differ");
  auto p = as_planes(pred).clamp(log_clamp, 1.0 - log_clamp);
  auto w = as_planes(weight).to(p.scalar_type());
  auto ll = target * torch::log(p) + (1.0 - target) * torch::log(1.0 - p);
  auto num = -(w * ll).sum({1, 2});
  auto den = w.sum({1, 2}).clamp_min(1.0);
  return (num / den).mean();
}

torch::Tensor boundary_map(const torch::Tensor& mask) {
  require(mask.dim() >= 2 && mask.size(-1) >= 3 && mask.size(-2) >= 3, ErrorCode::TooSmall,
          "boundary map needs at least 3x3 pixels, got " + c10::str(mask.sizes()));
  auto planes = as_planes(mask).unsqueeze(1);
  // max_pool pads with -inf, so the negated pool ignores outside pixels.
  auto eroded = -F::max_pool2d(-planes, F::MaxPool2dFuncOptions(3).stride(1).padding(1));
  return (planes - eroded).abs().squeeze(1).reshape(mask.sizes());
}

namespace {

// Squared 1-D distance transform of sampled function f (lower envelope of parabolas).
void edt_1d(const double* f, double* out, int n, std::vector<int>& v, std::vector<double>& z) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  int k = 0;
  v[0] = 0;
  z[0] = -inf;
  z[1] = inf;
  for (int q = 1; q < n; ++q) {
    if (f[q] == inf) continue;
    if (f[v[k]] == inf) {
      v[k] = q;
      continue;
    }
    double s;
    while (true) {
      const int r = v[k];
      s = ((f[q] + double(q) * q) - (f[r] + double(r) * r)) / (2.0 * q - 2.0 * r);
      if (s <= z[k] && k > 0) {
        --k;
        continue;
      }
      break;
    }
    if (s <= z[k]) {  // k == 0 and the new parabola dominates everywhere
      v[0] = q;
      continue;
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = inf;
  }
  if (f[v[0]] == inf) {
    for (int p = 0; p < n; ++p) out[p] = inf;
    return;
  }
  k = 0;
  for (int p = 0; p < n; ++p) {
    while (z[k + 1] < p) ++k;
    const double d = p - v[k];
    out[p] = d * d + f[v[k]];
  }
}

torch::Tensor edt_plane(const torch::Tensor& plane) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  const int h = static_cast<int>(plane.size(0)), w = static_cast<int>(plane.size(1));
  auto src = plane.to(torch::kFloat64).contiguous();
  auto out = torch::empty({h, w}, torch::kFloat64);
  const double* in = src.data_ptr<double>();
  double* d = out.data_ptr<double>();
  bool any = false;
  for (int i = 0; i < h * w; ++i) {
    d[i] = in[i] != 0.0 ? 0.0 : inf;
    any = any || in[i] != 0.0;
  }
  if (!any) return torch::full({h, w}, kNoBoundaryDistance, torch::kFloat64);

  const int n = std::max(h, w);
  std::vector<double> f(n), g(n), z(n + 1);
  std::vector<int> v(n);
  for (int j = 0; j < w; ++j) {
    for (int i = 0; i < h; ++i) f[i] = d[i * w + j];
    edt_1d(f.data(), g.data(), h, v, z);
    for (int i = 0; i < h; ++i) d[i * w + j] = g[i];
  }
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) f[j] = d[i * w + j];
    edt_1d(f.data(), g.data(), w, v, z);
    for (int j = 0; j < w; ++j) d[i * w + j] = std::sqrt(g[j]);
  }
  return out;
}

}  // namespace

torch::Tensor distance_transform(const torch::Tensor& boundary) {
  require(boundary.dim() == 2 || boundary.dim() == 3, ErrorCode::ShapeError, "expected [H,W] or [B,H,W]");
  if (boundary.dim() == 2) return edt_plane(boundary.detach());
  std::vector<torch::Tensor> planes;
  for (int64_t b = 0; b < boundary.size(0); ++b) planes.push_back(edt_plane(boundary[b].detach()));
  return torch::stack(planes);
}

torch::Tensor nsd_penalty(const torch::Tensor& b_out, const torch::Tensor& d, double t_tol, double gamma_soft) {
  require(b_out.sizes() == d.sizes(), ErrorCode::ShapeError, "boundary and distance shapes differ");
  require(gamma_soft > 0, ErrorCode::InvalidConfig, "gamma_soft must be positive");
  auto b = as_planes(b_out);
  auto gate = torch::sigmoid((t_tol - as_planes(d).to(b.scalar_type())) / gamma_soft);
  auto mass = b.sum({1, 2});
  auto inlier = (b * gate).sum({1, 2});
  auto empty = mass <= 0.0;
  auto ratio = inlier / torch::where(empty, torch::ones_like(mass), mass);
  return torch::where(empty, torch::zeros_like(ratio), 1.0 - ratio).mean();
}

InputStructure prepare_input(const torch::Tensor& x, const AspConfig& cfg) {
  cfg.validate();
  torch::NoGradGuard no_grad;
  InputStructure s;
  s.m_in = slice_mask(x.detach(), cfg);
  s.trimap = make_trimap(s.m_in, cfg.tau_fg, cfg.tau_bg);
  auto hard = (s.m_in > 0.5).to(s.m_in.scalar_type());
  auto rim = (boundary_map(hard) > 0.0).to(s.m_in.scalar_type());
  s.distance = distance_transform(rim).to(s.m_in.scalar_type());
  return s;
}

AspTerms asp_loss(const InputStructure& input, const torch::Tensor& y_hat, const AspConfig& cfg) {
  auto m_out = slice_mask(y_hat, cfg);
  require(m_out.sizes() == input.m_in.sizes(), ErrorCode::ShapeError, "output and input slices differ in shape");
  AspTerms t;
  t.core_bce = masked_bce(m_out, 1.0, input.trimap.core, cfg.log_clamp);
  t.bg_bce = masked_bce(m_out, 0.0, input.trimap.bg, cfg.log_clamp);
  t.boundary = nsd_penalty(boundary_map(m_out), input.distance, cfg.t_tol, cfg.gamma_soft);
  return t;
}

AspTerms asp_loss(const torch::Tensor& x, const torch::Tensor& y_hat, const AspConfig& cfg) {
  require(x.sizes() == y_hat.sizes(), ErrorCode::ShapeError, "x and y_hat shapes differ");
  return asp_loss(prepare_input(x, cfg), y_hat, cfg);
}

}  // namespace ulfb::asp
