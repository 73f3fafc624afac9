#pragma once

#include <cstdint>
#include <vector>

#include <torch/torch.h>

namespace ulfb::nets {

/// Sinusoidal embedding of scalar times in [0,1]; returns [B, dim].
torch::Tensor time_embedding(const torch::Tensor& t, int64_t dim);

struct NetConfig {
  int64_t base_width = 16;
  int64_t emb_dim = 64;
};

class ResBlockImpl : public torch::nn::Module {
 public:
  ResBlockImpl(int64_t channels, int64_t emb_dim);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& emb);

 private:
  torch::nn::GroupNorm norm1_{nullptr}, norm2_{nullptr};
  torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr};
  torch::nn::Linear emb_proj_{nullptr};
};
TORCH_MODULE(ResBlock);

/// Three-level residual encoder-decoder with additive time conditioning in
/// every residual block. Shared by the generator and the score backbones.
class EncoderDecoderImpl : public torch::nn::Module {
 public:
  EncoderDecoderImpl(int64_t in_channels, int64_t out_channels, NetConfig cfg);

  struct Output {
    torch::Tensor out;
    std::vector<torch::Tensor> taps;  // encoder activations at full, 1/2, 1/4 resolution
    torch::Tensor bottleneck;
  };

  Output forward(const torch::Tensor& x, const torch::Tensor& t, bool encode_only = false);
  int64_t bottleneck_channels() const { return 4 * cfg_.base_width; }
  std::vector<int64_t> tap_channels() const { return {cfg_.base_width, 2 * cfg_.base_width, 4 * cfg_.base_width}; }
  /// Zeroes the output convolution so the network starts as the zero map.
  void zero_head();

 private:
  NetConfig cfg_;
  torch::nn::Sequential time_mlp_{nullptr};
  torch::nn::Conv2d stem_{nullptr}, down1_{nullptr}, down2_{nullptr}, up2_{nullptr}, up1_{nullptr}, head_{nullptr};
  ResBlock enc1_{nullptr}, enc2_{nullptr}, enc3_{nullptr}, mid_{nullptr}, dec2_{nullptr}, dec1_{nullptr};
  torch::nn::GroupNorm head_norm_{nullptr};
};
TORCH_MODULE(EncoderDecoder);

/// Time-conditioned endpoint predictor G(x, t). Output is tanh-saturated and
/// residual in logit space, so it always lies in [-1, 1]. Starts at G(x) = 0.99 x.
class GeneratorImpl : public torch::nn::Module {
 public:
  explicit GeneratorImpl(NetConfig cfg = {});
  torch::Tensor forward(const torch::Tensor& x, double t);
  /// Encoder taps used by the patch contrastive loss.
  std::vector<torch::Tensor> encode(const torch::Tensor& x, double t);
  std::vector<int64_t> tap_channels() const { return body_->tap_channels(); }
  const NetConfig& config() const { return cfg_; }

 private:
  NetConfig cfg_;
  EncoderDecoder body_{nullptr};
};
TORCH_MODULE(Generator);

/// Strided patch discriminator; logit map is input size / 8.
class DiscriminatorImpl : public torch::nn::Module {
 public:
  explicit DiscriminatorImpl(NetConfig cfg = {});
  torch::Tensor forward(const torch::Tensor& x, double t);

 private:
  NetConfig cfg_;
  torch::nn::Conv2d c1_{nullptr}, c2_{nullptr}, c3_{nullptr}, c4_{nullptr};
  torch::nn::GroupNorm n2_{nullptr}, n3_{nullptr};
  torch::nn::Linear e1_{nullptr}, e2_{nullptr};
};
TORCH_MODULE(Discriminator);

struct GanLosses {
  torch::Tensor d_loss;
  torch::Tensor g_loss;
};

/// Non-saturating logistic GAN losses over the logit maps. d_loss uses
/// detached fakes; g_loss carries gradients back through `fake_batch`.
GanLosses adversarial_losses(Discriminator& disc, const torch::Tensor& real_batch, const torch::Tensor& fake_batch,
                             double t);

/// Same losses from precomputed logits.
GanLosses logistic_gan_losses(const torch::Tensor& real_logits, const torch::Tensor& fake_logits_detached,
                              const torch::Tensor& fake_logits);

/// Noise-level conditioned epsilon predictor. `tau_frac` is tau / T in [0,1], shape [B].
class EpsNetBase : public torch::nn::Module {
 public:
  virtual torch::Tensor forward(const torch::Tensor& u, const torch::Tensor& tau_frac) = 0;
  /// Trunk features consumed by the auxiliary classifier.
  virtual torch::Tensor features(const torch::Tensor& u, const torch::Tensor& tau_frac) = 0;
  virtual int64_t feature_channels() const = 0;
  virtual bool spatial() const = 0;
};

class ConvEpsNet : public EpsNetBase {
 public:
  explicit ConvEpsNet(NetConfig cfg = {}, int64_t channels = 3);
  torch::Tensor forward(const torch::Tensor& u, const torch::Tensor& tau_frac) override;
  torch::Tensor features(const torch::Tensor& u, const torch::Tensor& tau_frac) override;
  int64_t feature_channels() const override { return body_->bottleneck_channels(); }
  bool spatial() const override { return true; }
  const NetConfig& config() const { return cfg_; }

 private:
  NetConfig cfg_;
  EncoderDecoder body_{nullptr};
};

/// Small MLP epsilon predictor for low-dimensional analytic testbeds.
class MlpEpsNet : public EpsNetBase {
 public:
  MlpEpsNet(int64_t dim, int64_t hidden = 128, int64_t emb_dim = 32);
  torch::Tensor forward(const torch::Tensor& u, const torch::Tensor& tau_frac) override;
  torch::Tensor features(const torch::Tensor& u, const torch::Tensor& tau_frac) override;
  int64_t feature_channels() const override { return hidden_; }
  bool spatial() const override { return false; }

 private:
  int64_t dim_, hidden_, emb_dim_;
  torch::nn::Linear in_{nullptr}, mid_{nullptr}, out_{nullptr};
  torch::nn::Linear affine_{nullptr};  // time-conditioned [dim x dim] matrix and offset applied to u
};

/// Logit head on trunk features (conv for spatial trunks, linear otherwise).
class AuxClassifierImpl : public torch::nn::Module {
 public:
  AuxClassifierImpl(int64_t in_channels, bool spatial);
  torch::Tensor forward(const torch::Tensor& features);

 private:
  bool spatial_;
  torch::nn::Sequential net_{nullptr};
};
TORCH_MODULE(AuxClassifier);

int64_t parameter_count(const torch::nn::Module& m);

}  // namespace ulfb::nets
