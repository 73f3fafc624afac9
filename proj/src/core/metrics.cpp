#include "core/metrics.hpp"

#include <cmath>
#include <numeric>

#include "core/error.hpp"
#include "core/log.hpp"
#include "core/rng.hpp"

namespace ulfb::metrics {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

double psnr(const torch::Tensor& a, const torch::Tensor& b, double max_val, double cap_db) {
  require(a.sizes() == b.sizes(), ErrorCode::ShapeError, "psnr inputs differ in shape");
  require(max_val > 0, ErrorCode::InvalidConfig, "max_val must be positive");
  const double mse = (a.to(torch::kFloat64) - b.to(torch::kFloat64)).pow(2).mean().item<double>();
  if (mse == 0.0) return cap_db;
  return 20.0 * std::log10(max_val) - 10.0 * std::log10(mse);
}

MsSsimConfig MsSsimConfig::for_size(int64_t min_side) {
  MsSsimConfig c;
  while (c.scales > 3 && (min_side >> (c.scales - 1)) < c.window) --c.scales;
  while (c.window > 3 && (min_side >> (c.scales - 1)) < c.window) c.window -= 2;
  c.weights.resize(c.scales);
  const double total = std::accumulate(c.weights.begin(), c.weights.end(), 0.0);
  for (auto& w : c.weights) w /= total;
  return c;
}

namespace {

torch::Tensor gaussian_window(int size, double sigma) {
  auto r = torch::arange(size, torch::kFloat64) - (size - 1) / 2.0;
  auto g = torch::exp(-(r * r) / (2.0 * sigma * sigma));
  g = g / g.sum();
  return g;
}

torch::Tensor blur_valid(const torch::Tensor& x, const torch::Tensor& g) {
  const int64_t k = g.size(0);
  auto y = F::conv2d(x, g.reshape({1, 1, 1, k}));
  return F::conv2d(y, g.reshape({1, 1, k, 1}));
}

}  // namespace

double ms_ssim(const torch::Tensor& a, const torch::Tensor& b, const MsSsimConfig& cfg) {
  require(a.sizes() == b.sizes(), ErrorCode::ShapeError, "ms_ssim inputs differ in shape");
  require(a.dim() == 2 || a.dim() == 3, ErrorCode::ShapeError, "ms_ssim expects [H,W] or [C,H,W]");
  require(cfg.scales >= 1 && static_cast<int>(cfg.weights.size()) == cfg.scales, ErrorCode::InvalidConfig,
          "one weight per scale required");
  const int64_t min_side = std::min(a.size(-1), a.size(-2));
  require((min_side >> (cfg.scales - 1)) >= cfg.window, ErrorCode::TooSmall,
          "image side " + std::to_string(min_side) + " too small for " + std::to_string(cfg.scales) +
              " scales with window " + std::to_string(cfg.window));

  auto x = ((a.to(torch::kFloat64).clamp(-1, 1) + 1.0) * 0.5).reshape({-1, 1, a.size(-2), a.size(-1)});
  auto y = ((b.to(torch::kFloat64).clamp(-1, 1) + 1.0) * 0.5).reshape({-1, 1, b.size(-2), b.size(-1)});
  const auto g = gaussian_window(cfg.window, cfg.sigma);
  const double c1 = std::pow(cfg.k1, 2), c2 = std::pow(cfg.k2, 2);

  auto result = torch::ones({x.size(0)}, torch::kFloat64);
  for (int s = 0; s < cfg.scales; ++s) {
    auto mx = blur_valid(x, g), my = blur_valid(y, g);
    auto sxx = blur_valid(x * x, g) - mx * mx;
    auto syy = blur_valid(y * y, g) - my * my;
    auto sxy = blur_valid(x * y, g) - mx * my;
    auto cs_map = (2.0 * sxy + c2) / (sxx + syy + c2);
    torch::Tensor term;
    if (s + 1 < cfg.scales) {
      term = cs_map.mean({1, 2, 3});
      x = F::avg_pool2d(x, F::AvgPool2dFuncOptions(2));
      y = F::avg_pool2d(y, F::AvgPool2dFuncOptions(2));
    } else {
      auto l_map = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
      term = (l_map * cs_map).mean({1, 2, 3});
    }
    result = result * torch::relu(term).pow(cfg.weights[s]);
  }
  return result.mean().item<double>();
}

double ms_ssim(const torch::Tensor& a, const torch::Tensor& b) {
  return ms_ssim(a, b, MsSsimConfig::for_size(std::min(a.size(-1), a.size(-2))));
}

GaussianStats feature_stats(const torch::Tensor& features) {
  require(features.dim() == 2 && features.size(0) >= 2, ErrorCode::NeedSamples, "need [N>=2, D] features");
  auto f = features.to(torch::kFloat64).contiguous();
  const int64_t n = f.size(0), d = f.size(1);
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> m(f.data_ptr<double>(), n,
                                                                                               d);
  GaussianStats s;
  s.mean = m.colwise().mean().transpose();
  Eigen::MatrixXd centered = m.rowwise() - s.mean.transpose();
  s.cov = (centered.transpose() * centered) / static_cast<double>(n - 1);
  return s;
}

namespace {

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& a) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (a + a.transpose()));
  require(es.info() == Eigen::Success, ErrorCode::NumericalError, "eigen decomposition failed");
  Eigen::VectorXd ev = es.eigenvalues();
  const double tol = 1e-8 * std::max(1.0, ev.cwiseAbs().maxCoeff());
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    require(ev(i) >= -tol, ErrorCode::NumericalError,
            "matrix is not PSD (eigenvalue " + std::to_string(ev(i)) + ")");
    ev(i) = std::sqrt(std::max(0.0, ev(i)));
  }
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double fid(const GaussianStats& a, const GaussianStats& b) {
  require(a.mean.size() == b.mean.size() && a.cov.rows() == b.cov.rows() && a.cov.rows() == a.mean.size(),
          ErrorCode::ShapeError, "feature statistics differ in dimension");
  // tr((A B)^{1/2}) = tr((A^{1/2} B A^{1/2})^{1/2}), which stays symmetric PSD.
  const Eigen::MatrixXd ra = psd_sqrt(a.cov);
  const Eigen::MatrixXd inner = ra * b.cov * ra;
  const double cross = psd_sqrt(inner).trace();
  const double value = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * cross;
  return std::max(0.0, value);
}

double kid(const torch::Tensor& features_a, const torch::Tensor& features_b) {
  require(features_a.dim() == 2 && features_b.dim() == 2 && features_a.size(1) == features_b.size(1),
          ErrorCode::ShapeError, "kid needs [N,D] feature sets of equal D");
  const int64_t m = features_a.size(0), n = features_b.size(0);
  require(m >= 2 && n >= 2, ErrorCode::NeedSamples, "kid needs at least 2 samples per set");
  const double d = static_cast<double>(features_a.size(1));
  auto x = features_a.to(torch::kFloat64), y = features_b.to(torch::kFloat64);
  auto kxx = (x.matmul(x.t()) / d + 1.0).pow(3);
  auto kyy = (y.matmul(y.t()) / d + 1.0).pow(3);
  auto kxy = (x.matmul(y.t()) / d + 1.0).pow(3);
  const double txx = (kxx.sum() - kxx.diagonal().sum()).item<double>() / (m * (m - 1.0));
  const double tyy = (kyy.sum() - kyy.diagonal().sum()).item<double>() / (n * (n - 1.0));
  const double txy = kxy.mean().item<double>();
  return txx + tyy - 2.0 * txy;
}

FeatureEncoderImpl::FeatureEncoderImpl(int64_t image_size, int64_t feature_dim)
    : size_(image_size), dim_(feature_dim), grid_(image_size / 8) {
  require(image_size >= 16 && image_size % 8 == 0, ErrorCode::ShapeError, "encoder needs size divisible by 8");
  auto down = [](int64_t i, int64_t o) { return nn::Conv2d(nn::Conv2dOptions(i, o, 3).stride(2).padding(1)); };
  auto conv = [](int64_t i, int64_t o) { return nn::Conv2d(nn::Conv2dOptions(i, o, 3).padding(1)); };
  enc_ = register_module("enc", nn::Sequential(down(3, 16), nn::SiLU(), down(16, 32), nn::SiLU(), down(32, 32),
                                               nn::SiLU(), nn::Flatten()));
  to_feat_ = register_module("to_feat", nn::Linear(32 * grid_ * grid_, feature_dim));
  from_feat_ = register_module("from_feat", nn::Linear(feature_dim, 32 * grid_ * grid_));
  auto up = [] {
    return nn::Upsample(nn::UpsampleOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest));
  };
  dec_ = register_module("dec", nn::Sequential(up(), conv(32, 32), nn::SiLU(), up(), conv(32, 16), nn::SiLU(), up(),
                                               conv(16, 3), nn::Tanh()));
}

torch::Tensor FeatureEncoderImpl::encode(const torch::Tensor& x) {
  require(x.dim() == 4 && x.size(1) == 3 && x.size(2) == size_ && x.size(3) == size_, ErrorCode::ShapeError,
          "encoder expects [B,3," + std::to_string(size_) + "," + std::to_string(size_) + "]");
  return to_feat_(enc_->forward(x));
}

torch::Tensor FeatureEncoderImpl::decode(const torch::Tensor& z) {
  return dec_->forward(F::silu(from_feat_(z)).reshape({-1, 32, grid_, grid_}));
}

void FeatureEncoderImpl::freeze() {
  frozen_ = true;
  for (auto& p : parameters()) p.set_requires_grad(false);
  eval();
}

FeatureEncoder train_feature_encoder(const data::SliceSet& target, const EncoderConfig& cfg,
                                     std::vector<double>* loss_log) {
  require(target.size() > 0, ErrorCode::EmptyBatch, "encoder needs target-domain slices");
  for (std::size_t i = 0; i < target.cohorts.size(); ++i) {
    require(target.cohorts[i] == data::Cohort::TargetPool, ErrorCode::ContaminatedTeacherData,
            "encoder data includes subject " + target.subjects[i] + " from " + data::to_string(target.cohorts[i]));
  }
  torch::manual_seed(derive_seed(cfg.seed, 0xE4C));
  FeatureEncoder enc(target.images.size(-1), cfg.feature_dim);
  torch::optim::Adam opt(enc->parameters(), torch::optim::AdamOptions(cfg.lr));
  auto gen = make_generator(derive_seed(cfg.seed, 0xE4D));
  const int64_t n = target.size();
  for (int step = 0; step < cfg.steps; ++step) {
    auto idx = at::randint(0, n, {std::min<int64_t>(cfg.batch, n)}, gen, torch::TensorOptions().dtype(torch::kLong));
    auto batch = target.images.index_select(0, idx);
    opt.zero_grad();
    auto loss = F::mse_loss(enc->forward(batch), batch);
    loss.backward();
    opt.step();
    if (loss_log) loss_log->push_back(loss.item<double>());
  }
  enc->freeze();
  return enc;
}

torch::Tensor extract_features(FeatureEncoder& encoder, const torch::Tensor& images, int64_t batch) {
  torch::NoGradGuard no_grad;
  std::vector<torch::Tensor> parts;
  for (int64_t i = 0; i < images.size(0); i += batch) {
    parts.push_back(encoder->encode(images.slice(0, i, std::min(i + batch, images.size(0)))));
  }
  return torch::cat(parts);
}

SubjectAggregate subject_mean(const std::vector<double>& values, const std::vector<std::string>& subjects) {
  require(values.size() == subjects.size() && !values.empty(), ErrorCode::ShapeError,
          "one subject id per value required");
  std::map<std::string, std::pair<double, int>> acc;
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto& [sum, count] = acc[subjects[i]];
    sum += values[i];
    ++count;
  }
  SubjectAggregate out;
  double total = 0.0;
  for (const auto& [id, sc] : acc) {
    out.per_subject[id] = sc.first / sc.second;
    total += out.per_subject[id];
  }
  out.aggregate = total / static_cast<double>(acc.size());
  return out;
}

namespace {

torch::Tensor translate_all(const TranslateFn& translate, const torch::Tensor& images, int64_t batch = 32) {
  torch::NoGradGuard no_grad;
  std::vector<torch::Tensor> parts;
  for (int64_t i = 0; i < images.size(0); i += batch) {
    auto in = images.slice(0, i, std::min(i + batch, images.size(0)));
    auto out = translate(in);
    require(out.sizes() == in.sizes(), ErrorCode::ShapeError, "translation changed the slice shape");
    parts.push_back(out);
  }
  return torch::cat(parts);
}

nlohmann::ordered_json to_json(const SubjectAggregate& a) {
  nlohmann::ordered_json per = nlohmann::ordered_json::object();
  for (const auto& [id, v] : a.per_subject) per[id] = v;
  return {{"per_subject", per}, {"aggregate", a.aggregate}};
}

}  // namespace

nlohmann::ordered_json evaluate_paired(const TranslateFn& translate, const data::DatasetManifest& manifest,
                                       const PairedOptions& options) {
  require(manifest.has(data::Cohort::PairedTest), ErrorCode::MissingCohort, "manifest has no paired_test cohort");
  auto refs = data::load_cohort(manifest, data::Cohort::PairedTest, data::Variant::Clean);
  auto inputs = options.clean_inputs ? refs : data::load_cohort(manifest, data::Cohort::PairedTest);
  auto out = translate_all(translate, inputs.images);

  std::vector<double> p1, p2, s1, s2;
  const auto cfg = MsSsimConfig::for_size(std::min(out.size(-1), out.size(-2)));
  for (int64_t i = 0; i < out.size(0); ++i) {
    // T1 occupies channels 0 and 2; a translated slice may disagree between them.
    auto t1 = 0.5 * (out[i][0] + out[i][2]);
    auto t2 = out[i][1];
    p1.push_back(psnr(t1, refs.images[i][0]));
    p2.push_back(psnr(t2, refs.images[i][1]));
    s1.push_back(ms_ssim(t1, refs.images[i][0], cfg));
    s2.push_back(ms_ssim(t2, refs.images[i][1], cfg));
  }
  nlohmann::ordered_json report;
  report["mode"] = "paired";
  report["inputs"] = options.clean_inputs ? "clean" : "acquired";
  report["subjects"] = manifest.cohorts.at(data::Cohort::PairedTest).size();
  report["slices"] = out.size(0);
  report["psnr_t1"] = to_json(subject_mean(p1, refs.subjects));
  report["psnr_t2"] = to_json(subject_mean(p2, refs.subjects));
  report["ms_ssim_t1"] = to_json(subject_mean(s1, refs.subjects));
  report["ms_ssim_t2"] = to_json(subject_mean(s2, refs.subjects));
  report["ms_ssim_config"] = {{"scales", cfg.scales}, {"window", cfg.window}, {"sigma", cfg.sigma},
                              {"weights", cfg.weights}};
  return report;
}

nlohmann::ordered_json unpaired_report(FeatureEncoder& encoder, const torch::Tensor& translated,
                                       const torch::Tensor& reference) {
  require(encoder->frozen(), ErrorCode::InvalidModel, "feature encoder must be frozen");
  auto fa = extract_features(encoder, translated);
  auto fb = extract_features(encoder, reference);
  nlohmann::ordered_json report;
  report["mode"] = "unpaired";
  report["n_translated"] = translated.size(0);
  report["n_reference"] = reference.size(0);
  report["feature_dim"] = encoder->feature_dim();
  report["fid"] = {{"aggregate", fid(feature_stats(fa), feature_stats(fb))}};
  report["kid"] = {{"aggregate", kid(fa, fb)}};
  return report;
}

nlohmann::ordered_json evaluate_unpaired(const TranslateFn& translate, const data::DatasetManifest& manifest,
                                         FeatureEncoder& encoder) {
  require(manifest.has(data::Cohort::PairedTest), ErrorCode::MissingCohort, "manifest has no held-out test cohort");
  require(manifest.has(data::Cohort::TargetPool), ErrorCode::MissingCohort, "manifest has no target_pool cohort");
  auto inputs = data::load_cohort(manifest, data::Cohort::PairedTest);
  auto reference = data::load_cohort(manifest, data::Cohort::TargetPool);
  return unpaired_report(encoder, translate_all(translate, inputs.images), reference.images);
}

}  // namespace ulfb::metrics
