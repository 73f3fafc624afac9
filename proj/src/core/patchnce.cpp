#include "core/patchnce.hpp"

#include "core/error.hpp"
#include "core/rng.hpp"

namespace ulfb::patchnce {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

ProjectorImpl::ProjectorImpl(const std::vector<int64_t>& in_channels, int64_t out_dim) {
  for (std::size_t i = 0; i < in_channels.size(); ++i) {
    heads_.push_back(register_module("head" + std::to_string(i),
                                     nn::Sequential(nn::Linear(in_channels[i], out_dim), nn::ReLU(),
                                                    nn::Linear(out_dim, out_dim))));
  }
}

torch::Tensor ProjectorImpl::forward(std::size_t layer, const torch::Tensor& rows) {
  require(layer < heads_.size(), ErrorCode::ShapeError, "no projection head for layer " + std::to_string(layer));
  return heads_[layer]->forward(rows);
}

PatchFeatures sample_patch_features(const std::vector<torch::Tensor>& maps, const PatchIds* ids, int num_patches,
                                    Projector& projector, std::uint64_t rng_seed) {
  require(!maps.empty(), ErrorCode::ShapeError, "no feature layers given");
  require(num_patches >= 2, ErrorCode::NeedNegatives, "need at least 2 patches per layer");
  require(ids == nullptr || ids->size() == maps.size(), ErrorCode::ShapeError, "patch id layers mismatch");
  auto gen = make_generator(rng_seed);
  PatchFeatures out;
  for (std::size_t l = 0; l < maps.size(); ++l) {
    const auto& fm = maps[l];
    require(fm.dim() == 4, ErrorCode::ShapeError, "feature maps must be [B,C,H,W]");
    const int64_t positions = fm.size(2) * fm.size(3);
    torch::Tensor idx;
    if (ids) {
      idx = (*ids)[l];
    } else {
      require(num_patches <= positions, ErrorCode::TooManyPatches,
              std::to_string(num_patches) + " patches requested from " + std::to_string(positions) + " positions");
      idx = at::randperm(positions, gen, torch::TensorOptions().dtype(torch::kLong)).slice(0, 0, num_patches);
    }
    auto rows = fm.flatten(2).transpose(1, 2).index_select(1, idx);  // [B,P,C]
    auto proj = projector->forward(l, rows);
    out.features.push_back(F::normalize(proj, F::NormalizeFuncOptions().dim(-1).eps(1e-12)));
    out.ids.push_back(idx);
  }
  return out;
}

torch::Tensor layer_loss(const torch::Tensor& src, const torch::Tensor& out, double temperature) {
  require(temperature > 0, ErrorCode::InvalidConfig, "temperature must be positive");
  require(src.sizes() == out.sizes() && src.dim() == 3, ErrorCode::ShapeError, "features must be matching [B,P,D]");
  const int64_t p = src.size(1);
  require(p >= 2, ErrorCode::NeedNegatives, "a single patch has no negatives");
  auto q = F::normalize(out, F::NormalizeFuncOptions().dim(-1).eps(1e-12));
  auto k = F::normalize(src, F::NormalizeFuncOptions().dim(-1).eps(1e-12));
  auto logits = torch::bmm(q, k.transpose(1, 2)) / temperature;  // [B,P,P]
  auto target = torch::arange(p, torch::TensorOptions().dtype(torch::kLong)).repeat({src.size(0)});
  return F::cross_entropy(logits.reshape({-1, p}), target);
}

torch::Tensor patchnce_loss(const std::vector<torch::Tensor>& feat_src, const std::vector<torch::Tensor>& feat_out,
                            double temperature) {
  require(feat_src.size() == feat_out.size() && !feat_src.empty(), ErrorCode::ShapeError,
          "source and output layer lists differ");
  torch::Tensor total;
  for (std::size_t l = 0; l < feat_src.size(); ++l) {
    auto ll = layer_loss(feat_src[l], feat_out[l], temperature);
    total = total.defined() ? total + ll : ll;
  }
  return total / static_cast<double>(feat_src.size());
}

}  // namespace ulfb::patchnce
