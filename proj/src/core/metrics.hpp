#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>
#include <torch/torch.h>

#include "core/dataset.hpp"

namespace ulfb::metrics {

constexpr double kMaxVal = 2.0;   // [-1, 1] data
constexpr double kPsnrCap = 100.0;

/// 20 log10(max_val) - 10 log10(MSE); `cap_db` when MSE == 0.
double psnr(const torch::Tensor& a, const torch::Tensor& b, double max_val = kMaxVal, double cap_db = kPsnrCap);

struct MsSsimConfig {
  int scales = 5;
  std::vector<double> weights{0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01, k2 = 0.03;

  /// Standard constants when they fit; otherwise fewer scales (min 3) with
  /// renormalized weights, then a smaller odd window.
  static MsSsimConfig for_size(int64_t min_side);
};

/// Inputs in [-1, 1] ([H,W] or [C,H,W]), remapped to [0, 1]; channels averaged.
/// TooSmall when the pyramid underflows the window.
double ms_ssim(const torch::Tensor& a, const torch::Tensor& b, const MsSsimConfig& cfg);
double ms_ssim(const torch::Tensor& a, const torch::Tensor& b);

struct GaussianStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

/// Mean and unbiased covariance of rows of `features` [N, D].
GaussianStats feature_stats(const torch::Tensor& features);

/// Frechet distance between Gaussians; symmetric PSD square roots with small
/// negative eigenvalues clamped to zero.
double fid(const GaussianStats& a, const GaussianStats& b);

/// Unbiased MMD^2 with kernel (x.y / dim + 1)^3.
double kid(const torch::Tensor& features_a, const torch::Tensor& features_b);

/// Reconstruction autoencoder whose 64-d bottleneck is the evaluation feature space.
class FeatureEncoderImpl : public torch::nn::Module {
 public:
  FeatureEncoderImpl(int64_t image_size, int64_t feature_dim = 64);
  torch::Tensor encode(const torch::Tensor& x);
  torch::Tensor decode(const torch::Tensor& z);
  torch::Tensor forward(const torch::Tensor& x) { return decode(encode(x)); }
  int64_t image_size() const { return size_; }
  int64_t feature_dim() const { return dim_; }
  bool frozen() const { return frozen_; }
  void freeze();

 private:
  int64_t size_, dim_, grid_;
  bool frozen_ = false;
  torch::nn::Sequential enc_{nullptr}, dec_{nullptr};
  torch::nn::Linear to_feat_{nullptr}, from_feat_{nullptr};
};
TORCH_MODULE(FeatureEncoder);

struct EncoderConfig {
  int steps = 800;
  int batch = 32;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  int64_t feature_dim = 64;
};

/// Trains on target-pool slices only (ContaminatedTeacherData otherwise) and freezes.
FeatureEncoder train_feature_encoder(const data::SliceSet& target, const EncoderConfig& config,
                                     std::vector<double>* loss_log = nullptr);

torch::Tensor extract_features(FeatureEncoder& encoder, const torch::Tensor& images, int64_t batch = 64);

/// Maps a batch [B,3,H,W] to translated outputs of the same shape.
using TranslateFn = std::function<torch::Tensor(const torch::Tensor&)>;

struct SubjectAggregate {
  std::map<std::string, double> per_subject;  // slice mean per subject
  double aggregate = 0.0;                     // mean over subjects
};

/// Slice mean within each subject, then the mean across subjects.
SubjectAggregate subject_mean(const std::vector<double>& values, const std::vector<std::string>& subjects);

struct PairedOptions {
  bool clean_inputs = false;  // translate the clean references instead of the acquired inputs
};

/// Per-contrast PSNR and MS-SSIM on the paired test cohort.
nlohmann::ordered_json evaluate_paired(const TranslateFn& translate, const data::DatasetManifest& manifest,
                                       const PairedOptions& options = {});

/// FID/KID of translated held-out inputs against the target pool in the encoder's feature space.
nlohmann::ordered_json evaluate_unpaired(const TranslateFn& translate, const data::DatasetManifest& manifest,
                                         FeatureEncoder& encoder);

/// Same, given precomputed pools.
nlohmann::ordered_json unpaired_report(FeatureEncoder& encoder, const torch::Tensor& translated,
                                       const torch::Tensor& reference);

}  // namespace ulfb::metrics
