#pragma once

#include <cstdint>
#include <vector>

#include <torch/torch.h>

namespace ulfb::patchnce {

struct PatchConfig {
  int num_patches = 64;
  double temperature = 0.07;
  int64_t proj_dim = 64;
};

/// Per-layer two-layer projection heads.
class ProjectorImpl : public torch::nn::Module {
 public:
  ProjectorImpl(const std::vector<int64_t>& in_channels, int64_t out_dim);
  torch::Tensor forward(std::size_t layer, const torch::Tensor& rows);
  std::size_t layers() const { return heads_.size(); }

 private:
  std::vector<torch::nn::Sequential> heads_;
};
TORCH_MODULE(Projector);

/// Per-layer spatial indices, int64 [P] each.
using PatchIds = std::vector<torch::Tensor>;

struct PatchFeatures {
  std::vector<torch::Tensor> features;  // per layer [B, P, D], unit-norm rows
  PatchIds ids;
};

/// Samples `num_patches` locations per layer (fresh when `ids` is null, else
/// the given ones), projects and L2-normalizes. Feature maps are [B, C, H, W].
PatchFeatures sample_patch_features(const std::vector<torch::Tensor>& feature_maps, const PatchIds* ids,
                                    int num_patches, Projector& projector, std::uint64_t rng_seed);

/// InfoNCE for one layer: queries `out` [B,P,D] against keys `src` [B,P,D];
/// positives on the diagonal, negatives are other locations of the same slice.
torch::Tensor layer_loss(const torch::Tensor& src, const torch::Tensor& out, double temperature);

/// Mean over layers of layer_loss.
torch::Tensor patchnce_loss(const std::vector<torch::Tensor>& feat_src, const std::vector<torch::Tensor>& feat_out,
                            double temperature);

}  // namespace ulfb::patchnce
