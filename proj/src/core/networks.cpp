#include "core/networks.hpp"

#include <cmath>

#include "core/error.hpp"

namespace ulfb::nets {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

torch::Tensor time_embedding(const torch::Tensor& t, int64_t dim) {
  const int64_t half = dim / 2;
  auto freqs = torch::exp(torch::arange(half, t.options()) * (-std::log(10000.0) / std::max<int64_t>(half - 1, 1)));
  auto args = (t.reshape({-1, 1}) * 1000.0) * freqs.reshape({1, -1});
  return torch::cat({torch::sin(args), torch::cos(args)}, 1);
}

namespace {

nn::Conv2d conv3(int64_t in, int64_t out, int64_t stride = 1) {
  return nn::Conv2d(nn::Conv2dOptions(in, out, 3).stride(stride).padding(1));
}

int64_t groups_for(int64_t ch) { return ch % 8 == 0 ? 8 : 1; }

void check_image(const torch::Tensor& x, int64_t channels, const char* who) {
  require(x.dim() == 4 && x.size(1) == channels, ErrorCode::ShapeError,
          std::string(who) + " expects [B," + std::to_string(channels) + ",H,W], got " + c10::str(x.sizes()));
}

}  // namespace

ResBlockImpl::ResBlockImpl(int64_t ch, int64_t emb_dim)
    : norm1_(register_module("norm1", nn::GroupNorm(groups_for(ch), ch))),
      norm2_(register_module("norm2", nn::GroupNorm(groups_for(ch), ch))),
      conv1_(register_module("conv1", conv3(ch, ch))),
      conv2_(register_module("conv2", conv3(ch, ch))),
      emb_proj_(register_module("emb_proj", nn::Linear(emb_dim, ch))) {}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& emb) {
  auto h = conv1_(F::silu(norm1_(x)));
  h = h + emb_proj_(emb).unsqueeze(-1).unsqueeze(-1);
  h = conv2_(F::silu(norm2_(h)));
  return x + h;
}

EncoderDecoderImpl::EncoderDecoderImpl(int64_t in_ch, int64_t out_ch, NetConfig cfg) : cfg_(cfg) {
  const int64_t c = cfg.base_width, e = cfg.emb_dim;
  time_mlp_ = register_module("time_mlp", nn::Sequential(nn::Linear(e, e), nn::SiLU(), nn::Linear(e, e)));
  stem_ = register_module("stem", conv3(in_ch, c));
  enc1_ = register_module("enc1", ResBlock(c, e));
  down1_ = register_module("down1", conv3(c, 2 * c, 2));
  enc2_ = register_module("enc2", ResBlock(2 * c, e));
  down2_ = register_module("down2", conv3(2 * c, 4 * c, 2));
  enc3_ = register_module("enc3", ResBlock(4 * c, e));
  mid_ = register_module("mid", ResBlock(4 * c, e));
  up2_ = register_module("up2", conv3(4 * c, 2 * c));
  dec2_ = register_module("dec2", ResBlock(2 * c, e));
  up1_ = register_module("up1", conv3(2 * c, c));
  dec1_ = register_module("dec1", ResBlock(c, e));
  head_norm_ = register_module("head_norm", nn::GroupNorm(groups_for(c), c));
  head_ = register_module("head", conv3(c, out_ch));
}

EncoderDecoderImpl::Output EncoderDecoderImpl::forward(const torch::Tensor& x, const torch::Tensor& t,
                                                       bool encode_only) {
  require(x.size(2) % 4 == 0 && x.size(3) % 4 == 0, ErrorCode::ShapeError,
          "spatial size must be divisible by 4, got " + c10::str(x.sizes()));
  auto emb = time_mlp_->forward(time_embedding(t, cfg_.emb_dim));
  Output o;
  auto h1 = enc1_(stem_(x), emb);
  auto h2 = enc2_(down1_(F::silu(h1)), emb);
  auto h3 = enc3_(down2_(F::silu(h2)), emb);
  o.taps = {h1, h2, h3};
  if (encode_only) return o;
  auto m = mid_(h3, emb);
  o.bottleneck = m;
  auto up = F::interpolate(m, F::InterpolateFuncOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest));
  auto d2 = dec2_(up2_(up) + h2, emb);
  up = F::interpolate(d2, F::InterpolateFuncOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest));
  auto d1 = dec1_(up1_(up) + h1, emb);
  o.out = head_(F::silu(head_norm_(d1)));
  return o;
}

void EncoderDecoderImpl::zero_head() {
  torch::NoGradGuard no_grad;
  head_->weight.zero_();
  head_->bias.zero_();
}

GeneratorImpl::GeneratorImpl(NetConfig cfg) : cfg_(cfg) {
  body_ = register_module("body", EncoderDecoder(3, 3, cfg));
  body_->zero_head();
}

torch::Tensor GeneratorImpl::forward(const torch::Tensor& x, double t) {
  check_image(x, 3, "generator");
  auto tt = torch::full({x.size(0)}, t, x.options());
  auto delta = body_->forward(x, tt).out;
  // atanh(0.99) bounds the skip path so the identity is reachable without saturation.
  auto skip = torch::atanh(x.clamp(-1.0, 1.0) * 0.99);
  return torch::tanh(skip + delta);
}

std::vector<torch::Tensor> GeneratorImpl::encode(const torch::Tensor& x, double t) {
  check_image(x, 3, "generator");
  auto tt = torch::full({x.size(0)}, t, x.options());
  return body_->forward(x, tt, /*encode_only=*/true).taps;
}

DiscriminatorImpl::DiscriminatorImpl(NetConfig cfg) : cfg_(cfg) {
  const int64_t c = cfg.base_width;
  auto down = [](int64_t in, int64_t out) { return nn::Conv2d(nn::Conv2dOptions(in, out, 4).stride(2).padding(1)); };
  c1_ = register_module("c1", down(3, c));
  c2_ = register_module("c2", down(c, 2 * c));
  c3_ = register_module("c3", down(2 * c, 4 * c));
  c4_ = register_module("c4", conv3(4 * c, 1));
  n2_ = register_module("n2", nn::GroupNorm(groups_for(2 * c), 2 * c));
  n3_ = register_module("n3", nn::GroupNorm(groups_for(4 * c), 4 * c));
  e1_ = register_module("e1", nn::Linear(cfg.emb_dim, c));
  e2_ = register_module("e2", nn::Linear(cfg.emb_dim, 2 * c));
}

torch::Tensor DiscriminatorImpl::forward(const torch::Tensor& x, double t) {
  check_image(x, 3, "discriminator");
  require(x.size(2) % 8 == 0 && x.size(3) % 8 == 0, ErrorCode::ShapeError, "discriminator needs size divisible by 8");
  auto emb = time_embedding(torch::full({x.size(0)}, t, x.options()), cfg_.emb_dim);
  auto lrelu = [](const torch::Tensor& v) { return F::leaky_relu(v, F::LeakyReLUFuncOptions().negative_slope(0.2)); };
  auto h = lrelu(c1_(x) + e1_(emb).unsqueeze(-1).unsqueeze(-1));
  h = lrelu(n2_(c2_(h)) + e2_(emb).unsqueeze(-1).unsqueeze(-1));
  h = lrelu(n3_(c3_(h)));
  return c4_(h);
}

GanLosses logistic_gan_losses(const torch::Tensor& real_logits, const torch::Tensor& fake_logits_detached,
                              const torch::Tensor& fake_logits) {
  GanLosses l;
  l.d_loss = 0.5 * (F::softplus(-real_logits).mean() + F::softplus(fake_logits_detached).mean());
  l.g_loss = F::softplus(-fake_logits).mean();
  return l;
}

GanLosses adversarial_losses(Discriminator& disc, const torch::Tensor& real_batch, const torch::Tensor& fake_batch,
                             double t) {
  require(real_batch.numel() > 0 && fake_batch.numel() > 0, ErrorCode::EmptyBatch, "adversarial losses need samples");
  auto real_logits = disc->forward(real_batch, t);
  auto fake_logits = disc->forward(fake_batch, t);
  auto fake_detached = disc->forward(fake_batch.detach(), t);
  return logistic_gan_losses(real_logits, fake_detached, fake_logits);
}

ConvEpsNet::ConvEpsNet(NetConfig cfg, int64_t channels) : cfg_(cfg) {
  body_ = register_module("body", EncoderDecoder(channels, channels, cfg));
}

torch::Tensor ConvEpsNet::forward(const torch::Tensor& u, const torch::Tensor& tau_frac) {
  return body_->forward(u, tau_frac).out;
}

torch::Tensor ConvEpsNet::features(const torch::Tensor& u, const torch::Tensor& tau_frac) {
  return body_->forward(u, tau_frac).bottleneck;
}

MlpEpsNet::MlpEpsNet(int64_t dim, int64_t hidden, int64_t emb_dim) : dim_(dim), hidden_(hidden), emb_dim_(emb_dim) {
  in_ = register_module("in", nn::Linear(dim + emb_dim, hidden));
  mid_ = register_module("mid", nn::Linear(hidden, hidden));
  out_ = register_module("out", nn::Linear(hidden, dim));
  affine_ = register_module("affine", nn::Linear(emb_dim, dim * dim + dim));
}

torch::Tensor MlpEpsNet::features(const torch::Tensor& u, const torch::Tensor& tau_frac) {
  require(u.dim() == 2 && u.size(1) == dim_, ErrorCode::ShapeError, "mlp eps net expects [B," + std::to_string(dim_) + "]");
  // Low-frequency embedding; the 1000x scaling of time_embedding suits the image nets only.
  auto emb = time_embedding(tau_frac * 0.05, emb_dim_);
  auto h = F::silu(in_(torch::cat({u, emb}, 1)));
  return F::silu(mid_(h));
}

torch::Tensor MlpEpsNet::forward(const torch::Tensor& u, const torch::Tensor& tau_frac) {
  // Residual MLP on top of a per-level affine map of u.
  auto coeffs = affine_(time_embedding(tau_frac * 0.05, emb_dim_));
  auto A = coeffs.slice(1, 0, dim_ * dim_).reshape({-1, dim_, dim_});
  auto b = coeffs.slice(1, dim_ * dim_);
  return out_(features(u, tau_frac)) + torch::bmm(A, u.unsqueeze(2)).squeeze(2) + b;
}

AuxClassifierImpl::AuxClassifierImpl(int64_t in_channels, bool spatial) : spatial_(spatial) {
  if (spatial) {
    net_ = register_module("net", nn::Sequential(conv3(in_channels, in_channels / 2),
                                                 nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)),
                                                 nn::Conv2d(nn::Conv2dOptions(in_channels / 2, 1, 1))));
  } else {
    net_ = register_module("net", nn::Sequential(nn::Linear(in_channels, in_channels / 2),
                                                 nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)),
                                                 nn::Linear(in_channels / 2, 1)));
  }
}

torch::Tensor AuxClassifierImpl::forward(const torch::Tensor& features) { return net_->forward(features); }

int64_t parameter_count(const torch::nn::Module& m) {
  int64_t n = 0;
  for (const auto& p : m.parameters()) n += p.numel();
  return n;
}

}  // namespace ulfb::nets
