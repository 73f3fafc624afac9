#pragma once

#include <torch/torch.h>

namespace ulfb::asp {

struct AspConfig {
  double tau_m = 0.15;     // soft-mask threshold on normalized intensity
  double s_m = 0.03;       // soft-mask temperature
  double tau_fg = 0.7;     // confident foreground above
  double tau_bg = 0.3;     // confident background below
  double t_tol = 2.0;      // boundary tolerance, pixels
  double gamma_soft = 0.5; // tolerance gate softness
  double log_clamp = 1e-6;

  /// Throws InvalidConfig on violated ranges or tau_bg >= tau_fg.
  void validate() const;
};

/// Distance used where the reference boundary is empty.
constexpr double kNoBoundaryDistance = 1e6;

struct Trimap {
  torch::Tensor core;  // 1 where confidently foreground
  torch::Tensor bg;    // 1 where confidently background
};

/// (clip(x, -1, 1) + 1) / 2
torch::Tensor normalize01(const torch::Tensor& x);

/// sigmoid((x01 - tau_m) / s_m), elementwise.
torch::Tensor soft_mask(const torch::Tensor& x01, double tau_m, double s_m);

/// One mask per slice from the channel mean of normalize01(x).
/// x: [B,C,H,W] -> [B,H,W], or [C,H,W] -> [H,W].
torch::Tensor slice_mask(const torch::Tensor& x, const AspConfig& cfg);

Trimap make_trimap(const torch::Tensor& m_in, double tau_fg, double tau_bg);

/// -sum w [t log p + (1-t) log(1-p)] / max(sum w, 1) over the last two dims
/// (a 1-D input is one sample), then mean over leading dims.
torch::Tensor masked_bce(const torch::Tensor& pred, double target, const torch::Tensor& weight, double log_clamp);

/// |m - minpool3x3(m)|; out-of-image neighbours are ignored. Needs H, W >= 3.
torch::Tensor boundary_map(const torch::Tensor& mask);

/// Exact Euclidean distance of every pixel to the nearest nonzero pixel of
/// `boundary` ([H,W] or [B,H,W]); kNoBoundaryDistance when there is none.
/// Returns float64.
torch::Tensor distance_transform(const torch::Tensor& boundary);

/// 1 - sum b sigmoid((t - d) / gamma) / sum b per sample, 0 for an empty b; batch mean.
torch::Tensor nsd_penalty(const torch::Tensor& b_out, const torch::Tensor& d, double t_tol, double gamma_soft);

/// Everything derived from the source slice alone.
struct InputStructure {
  torch::Tensor m_in;
  Trimap trimap;
  torch::Tensor distance;
};

InputStructure prepare_input(const torch::Tensor& x, const AspConfig& cfg);

struct AspTerms {
  torch::Tensor core_bce;
  torch::Tensor bg_bce;
  torch::Tensor boundary;
  torch::Tensor total() const { return core_bce + bg_bce + boundary; }
};

AspTerms asp_loss(const InputStructure& input, const torch::Tensor& y_hat, const AspConfig& cfg);
AspTerms asp_loss(const torch::Tensor& x, const torch::Tensor& y_hat, const AspConfig& cfg);

}  // namespace ulfb::asp
