#pragma once

#include <cstdint>
#include <filesystem>
#include <utility>

#include <torch/torch.h>

#include "core/dataset.hpp"
#include "core/diffusion.hpp"

namespace ulfb::synth {

/// Clean T1/T2 pair, each [size, size] in [-1, 1].
struct SlicePair {
  torch::Tensor t1;
  torch::Tensor t2;
};

/// Stand-in for low-field acquisition. Zero disables a stage; a zero
/// `down_up_factor` or `contrast_scale` is treated as "off" (factor 1, gain 1).
struct DegradationConfig {
  double blur_sigma = 1.2;      // Gaussian blur, pixels
  double noise_sigma = 0.08;    // additive Gaussian noise, intensity units
  int down_up_factor = 2;       // average-pool then bilinear upsample
  double bias_field_amp = 0.15; // peak relative amplitude of a smooth multiplicative field
  double contrast_scale = 0.7;  // gain on the background-referenced signal

  static DegradationConfig none() { return {0.0, 0.0, 0, 0.0, 0.0}; }
  std::string to_json() const;
};

/// Nested random ellipses: background, outer rim, grey/white "tissue",
/// ventricle-like inclusions. Deterministic per seed; size >= 32.
SlicePair make_phantom(std::uint64_t seed, int size);

/// Slice `index` of `count` through one subject: shared anatomy, per-slice
/// variation along the axial direction.
SlicePair make_subject_slice(std::uint64_t subject_seed, int index, int count, int size);

/// blur -> down/up -> bias field -> contrast -> noise, then clip to [-1, 1].
SlicePair degrade(const SlicePair& clean, const DegradationConfig& config, std::uint64_t seed);

/// [t1, t2, t1] stacked into [3, H, W].
torch::Tensor compose_channels(const torch::Tensor& t1, const torch::Tensor& t2);
SlicePair decompose_channels(const torch::Tensor& slice);

struct CohortSplit {
  double source_frac = 0.5;
  double target_frac = 0.5;
  int paired_test_count = 5;
};

struct CohortOptions {
  int n_subjects = 85;
  int slices_per_subject = 8;
  int size = 32;
  CohortSplit split{};
  std::uint64_t seed = 0;
  DegradationConfig degradation{};
};

/// Writes slice files and `manifest.json` under `out_dir`; returns the manifest.
data::DatasetManifest build_cohorts(const std::filesystem::path& out_dir, const CohortOptions& options);

/// Gaussian mixture with components over R^d (double precision).
struct GaussianMixture {
  torch::Tensor weights;      // [K]
  torch::Tensor means;        // [K, d]
  torch::Tensor covariances;  // [K, d, d]

  int64_t dim() const { return means.size(1); }
  static GaussianMixture isotropic(const std::vector<double>& mean, double variance);
};

/// Throws InvalidModel unless weights sum to one and covariances are symmetric PD.
void validate(const GaussianMixture& gmm);

/// Score of the VP-diffused mixture at level `tau`: component means scale by
/// gamma, covariances become gamma^2 Sigma + varsigma^2 I. `u` is [N, d].
torch::Tensor gmm_score(const GaussianMixture& gmm, const torch::Tensor& u, int tau,
                        const diffusion::NoiseSchedule& schedule);
torch::Tensor gmm_log_density(const GaussianMixture& gmm, const torch::Tensor& u, int tau,
                              const diffusion::NoiseSchedule& schedule);

torch::Tensor sample(const GaussianMixture& gmm, int64_t n, std::uint64_t seed);

/// Analytic score source over a mixture, usable wherever a trained score model is.
class GmmScoreSource : public diffusion::ScoreSource {
 public:
  GmmScoreSource(GaussianMixture gmm, diffusion::NoiseSchedule schedule);
  torch::Tensor score(const torch::Tensor& u, const torch::Tensor& taus) const override;
  const diffusion::NoiseSchedule& schedule() const override { return schedule_; }
  GaussianMixture& mixture() { return gmm_; }

 private:
  GaussianMixture gmm_;
  diffusion::NoiseSchedule schedule_;
};

/// d/dm KL(N(m,1) || N(0,1)) = m.
inline double analytic_kl_grad_shift(double m) { return m; }

}  // namespace ulfb::synth
