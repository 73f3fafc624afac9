#include "core/synth_data.hpp"

#include <cmath>
#include <numbers>
#include <random>

#include <json.hpp>

#include "core/error.hpp"
#include "core/rng.hpp"
#include "core/tensor_io.hpp"

namespace ulfb::synth {

namespace F = torch::nn::functional;

std::string DegradationConfig::to_json() const {
  nlohmann::ordered_json j{{"blur_sigma", blur_sigma},
                           {"noise_sigma", noise_sigma},
                           {"down_up_factor", down_up_factor},
                           {"bias_field_amp", bias_field_amp},
                           {"contrast_scale", contrast_scale}};
  return j.dump();
}

namespace {

struct Ellipse {
  double cx, cy, a, b, theta;
  bool contains(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    const double c = std::cos(theta), s = std::sin(theta);
    const double xr = dx * c + dy * s, yr = -dx * s + dy * c;
    return (xr * xr) / (a * a) + (yr * yr) / (b * b) <= 1.0;
  }
  Ellipse scaled(double f) const { return {cx, cy, a * f, b * f, theta}; }
};

struct Tissue {
  double t1, t2;
};

struct Anatomy {
  Ellipse head{};
  double brain_frac = 0.88;
  double wm_frac = 0.66;
  Ellipse vent_left{}, vent_right{};
  std::vector<Ellipse> islands;  // grey-matter inclusions within white matter
  Tissue rim{}, gm{}, wm{}, csf{};
};

Anatomy sample_anatomy(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto U = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  Anatomy a;
  a.head = {U(-0.05, 0.05), U(-0.05, 0.05), U(0.70, 0.84), U(0.80, 0.92), U(-0.2, 0.2)};
  a.brain_frac = U(0.84, 0.9);
  a.wm_frac = U(0.58, 0.70);
  const double vdx = U(0.08, 0.14), vdy = U(-0.05, 0.05), va = U(0.05, 0.08), vb = U(0.13, 0.2), vt = U(0.1, 0.35);
  a.vent_left = {a.head.cx - vdx, a.head.cy + vdy, va, vb, vt};
  a.vent_right = {a.head.cx + vdx, a.head.cy + vdy + U(-0.02, 0.02), va * U(0.85, 1.15), vb * U(0.85, 1.15), -vt};
  const int n_islands = static_cast<int>(U(2.0, 5.0));
  for (int i = 0; i < n_islands; ++i) {
    const double r = U(0.25, 0.45), phi = U(0.0, 2.0 * std::numbers::pi);
    a.islands.push_back({a.head.cx + r * std::cos(phi), a.head.cy + r * std::sin(phi), U(0.05, 0.1), U(0.05, 0.1),
                         U(-1.0, 1.0)});
  }
  auto jitter = [&](Tissue t) { return Tissue{t.t1 + U(-0.05, 0.05), t.t2 + U(-0.05, 0.05)}; };
  a.rim = jitter({0.30, 0.10});
  a.gm = jitter({0.05, 0.35});
  a.wm = jitter({0.55, -0.15});
  a.csf = jitter({-0.55, 0.85});
  return a;
}

SlicePair render(const Anatomy& a, double z, int size) {
  const double head_f = std::sqrt(std::max(0.2, 1.0 - 0.8 * z * z));
  const double wm_f = std::sqrt(std::max(0.1, 1.0 - 1.2 * z * z));
  const double vent_f = std::max(0.0, 1.0 - 2.0 * std::abs(z));
  const Ellipse head = a.head.scaled(head_f);
  const Ellipse brain = head.scaled(a.brain_frac);
  const Ellipse wm = brain.scaled(a.wm_frac * wm_f);
  auto t1 = torch::full({size, size}, -1.0f);
  auto t2 = torch::full({size, size}, -1.0f);
  auto p1 = t1.accessor<float, 2>();
  auto p2 = t2.accessor<float, 2>();
  for (int i = 0; i < size; ++i) {
    const double y = (i + 0.5) / size * 2.0 - 1.0;
    for (int j = 0; j < size; ++j) {
      const double x = (j + 0.5) / size * 2.0 - 1.0;
      if (!head.contains(x, y)) continue;
      Tissue t = a.rim;
      if (brain.contains(x, y)) {
        t = a.gm;
        if (wm.contains(x, y)) {
          t = a.wm;
          for (const auto& isl : a.islands) {
            Ellipse e = isl;
            e.cx = head.cx + (isl.cx - a.head.cx) * head_f * a.brain_frac * a.wm_frac * wm_f / 0.6;
            e.cy = head.cy + (isl.cy - a.head.cy) * head_f * a.brain_frac * a.wm_frac * wm_f / 0.6;
            if (e.contains(x, y)) t = a.gm;
          }
        }
        if (vent_f > 0.0 && (a.vent_left.scaled(vent_f).contains(x, y) || a.vent_right.scaled(vent_f).contains(x, y)))
          t = a.csf;
      }
      p1[i][j] = static_cast<float>(std::clamp(t.t1, -1.0, 1.0));
      p2[i][j] = static_cast<float>(std::clamp(t.t2, -1.0, 1.0));
    }
  }
  return {t1, t2};
}

torch::Tensor gaussian_blur(const torch::Tensor& img, double sigma) {
  const int r = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * r + 1);
  double sum = 0.0;
  for (int i = -r; i <= r; ++i) sum += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= sum;
  auto kern = torch::tensor(k, img.options());
  auto x = F::pad(img, F::PadFuncOptions({r, r, r, r}).mode(torch::kReplicate));
  x = F::conv2d(x, kern.reshape({1, 1, 1, -1}).expand({img.size(1), 1, 1, 2 * r + 1}),
                F::Conv2dFuncOptions().groups(img.size(1)));
  x = F::conv2d(x, kern.reshape({1, 1, -1, 1}).expand({img.size(1), 1, 2 * r + 1, 1}),
                F::Conv2dFuncOptions().groups(img.size(1)));
  return x;
}

torch::Tensor bias_field(int h, int w, double amp, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> U(-1.0, 1.0);
  double c[5];
  for (auto& v : c) v = U(rng);
  auto ys = torch::linspace(-1.0, 1.0, h, torch::kFloat64).reshape({h, 1}).expand({h, w});
  auto xs = torch::linspace(-1.0, 1.0, w, torch::kFloat64).reshape({1, w}).expand({h, w});
  auto f = c[0] * xs + c[1] * ys + c[2] * xs * ys + c[3] * (xs * xs - 1.0 / 3.0) + c[4] * (ys * ys - 1.0 / 3.0);
  const double peak = f.abs().max().item<double>();
  if (peak > 0.0) f = f / peak;
  return 1.0 + amp * f;
}

}  // namespace

SlicePair make_phantom(std::uint64_t seed, int size) { return make_subject_slice(seed, 0, 1, size); }

SlicePair make_subject_slice(std::uint64_t subject_seed, int index, int count, int size) {
  require(size >= 32, ErrorCode::TooSmall, "phantom size must be >= 32, got " + std::to_string(size));
  require(count >= 1 && index >= 0 && index < count, ErrorCode::InvalidConfig, "slice index out of range");
  const double z = count == 1 ? 0.0 : -0.45 + 0.9 * static_cast<double>(index) / (count - 1);
  return render(sample_anatomy(subject_seed), z, size);
}

SlicePair degrade(const SlicePair& clean, const DegradationConfig& cfg, std::uint64_t seed) {
  require(clean.t1.sizes() == clean.t2.sizes() && clean.t1.dim() == 2, ErrorCode::ShapeError,
          "degrade expects two [H,W] arrays of equal shape");
  require(cfg.blur_sigma >= 0 && cfg.noise_sigma >= 0 && cfg.down_up_factor >= 0 && cfg.bias_field_amp >= 0 &&
              cfg.contrast_scale >= 0,
          ErrorCode::InvalidConfig, "degradation parameters must be nonnegative");
  const int64_t h = clean.t1.size(0), w = clean.t1.size(1);
  std::mt19937_64 rng(seed);
  // Work on the background-referenced signal s = x + 1 >= 0.
  auto s = torch::stack({clean.t1, clean.t2}).to(torch::kFloat64).unsqueeze(0) + 1.0;
  if (cfg.blur_sigma > 0.0) s = gaussian_blur(s, cfg.blur_sigma);
  if (cfg.down_up_factor > 1) {
    s = F::avg_pool2d(s, F::AvgPool2dFuncOptions(cfg.down_up_factor));
    s = F::interpolate(s, F::InterpolateFuncOptions()
                              .size(std::vector<int64_t>{h, w})
                              .mode(torch::kBilinear)
                              .align_corners(false));
  }
  if (cfg.bias_field_amp > 0.0) s = s * bias_field(h, w, cfg.bias_field_amp, rng);
  if (cfg.contrast_scale > 0.0) s = s * cfg.contrast_scale;
  if (cfg.noise_sigma > 0.0) {
    auto gen = make_generator(derive_seed(seed, 0x4015E));
    s = s + at::randn(s.sizes(), gen, s.options()) * cfg.noise_sigma;
  }
  auto x = (s - 1.0).clamp(-1.0, 1.0).to(torch::kFloat32).squeeze(0);
  return {x[0].contiguous(), x[1].contiguous()};
}

torch::Tensor compose_channels(const torch::Tensor& t1, const torch::Tensor& t2) {
  require(t1.sizes() == t2.sizes(), ErrorCode::ShapeError,
          "T1 and T2 shapes differ: " + c10::str(t1.sizes()) + " vs " + c10::str(t2.sizes()));
  return torch::stack({t1, t2, t1});
}

SlicePair decompose_channels(const torch::Tensor& slice) {
  require(slice.dim() == 3 && slice.size(0) == 3, ErrorCode::ShapeError, "expected [3,H,W]");
  return {slice[0], slice[1]};
}

data::DatasetManifest build_cohorts(const std::filesystem::path& out_dir, const CohortOptions& o) {
  require(o.n_subjects >= 1, ErrorCode::InvalidConfig, "need at least one subject");
  require(o.slices_per_subject >= 1, ErrorCode::InvalidConfig, "need at least one slice per subject");
  require(o.split.paired_test_count >= 0 && o.split.paired_test_count <= o.n_subjects, ErrorCode::InvalidConfig,
          "paired_test_count exceeds subject count");
  require(o.split.source_frac >= 0 && o.split.target_frac >= 0 &&
              std::abs(o.split.source_frac + o.split.target_frac - 1.0) < 1e-9,
          ErrorCode::InvalidConfig, "source_frac + target_frac must equal 1");
  const int pool = o.n_subjects - o.split.paired_test_count;
  const int n_source = static_cast<int>(std::lround(o.split.source_frac * pool));
  const int n_target = pool - n_source;

  data::DatasetManifest m;
  m.height = m.width = o.size;
  m.seed = o.seed;
  m.degradation_json = o.degradation.to_json();
  m.root = out_dir;

  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) fail(ErrorCode::IoError, "cannot create " + out_dir.string() + ": " + ec.message());

  for (int s = 0; s < o.n_subjects; ++s) {
    const data::Cohort cohort = s < n_source                ? data::Cohort::SourcePool
                                : s < n_source + n_target   ? data::Cohort::TargetPool
                                                            : data::Cohort::PairedTest;
    char id[32];
    std::snprintf(id, sizeof id, "sub-%04d", s);
    const std::uint64_t subject_seed = derive_seed(o.seed, 0x5B, s);
    std::vector<torch::Tensor> t1, t2, t1c, t2c;
    for (int k = 0; k < o.slices_per_subject; ++k) {
      auto clean = make_subject_slice(subject_seed, k, o.slices_per_subject, o.size);
      if (cohort != data::Cohort::TargetPool) {
        auto deg = degrade(clean, o.degradation, derive_seed(subject_seed, 0xDE, k));
        t1.push_back(deg.t1);
        t2.push_back(deg.t2);
      }
      if (cohort != data::Cohort::SourcePool) {
        t1c.push_back(clean.t1);
        t2c.push_back(clean.t2);
      }
    }
    const std::string dir = data::to_string(cohort);
    std::filesystem::create_directories(out_dir / dir, ec);
    if (ec) fail(ErrorCode::IoError, "cannot create " + (out_dir / dir).string());
    data::SubjectEntry e;
    e.subject_id = id;
    e.slices = o.slices_per_subject;
    auto put = [&](const std::vector<torch::Tensor>& v, const std::string& suffix) {
      const std::string rel = dir + "/" + id + "_" + suffix + ".f32";
      io::write_f32(out_dir / rel, torch::stack(v));
      return rel;
    };
    if (cohort == data::Cohort::TargetPool) {
      e.files.t1 = put(t1c, "t1");
      e.files.t2 = put(t2c, "t2");
    } else {
      e.files.t1 = put(t1, "t1");
      e.files.t2 = put(t2, "t2");
      if (cohort == data::Cohort::PairedTest) {
        e.files.t1_clean = put(t1c, "t1_clean");
        e.files.t2_clean = put(t2c, "t2_clean");
      }
    }
    m.cohorts[cohort].push_back(std::move(e));
  }
  data::check_disjoint(m);
  data::save_manifest(m, out_dir / "manifest.json");
  return m;
}

GaussianMixture GaussianMixture::isotropic(const std::vector<double>& mean, double variance) {
  const auto d = static_cast<int64_t>(mean.size());
  GaussianMixture g;
  g.weights = torch::ones({1}, torch::kFloat64);
  g.means = torch::tensor(mean, torch::kFloat64).reshape({1, d});
  g.covariances = (torch::eye(d, torch::kFloat64) * variance).unsqueeze(0);
  return g;
}

void validate(const GaussianMixture& g) {
  require(g.weights.dim() == 1 && g.means.dim() == 2 && g.covariances.dim() == 3, ErrorCode::InvalidModel,
          "mixture tensors have wrong rank");
  const int64_t k = g.weights.size(0), d = g.means.size(1);
  require(g.means.size(0) == k && g.covariances.size(0) == k && g.covariances.size(1) == d &&
              g.covariances.size(2) == d,
          ErrorCode::InvalidModel, "mixture tensors disagree on component count or dimension");
  require(std::abs(g.weights.sum().item<double>() - 1.0) < 1e-9 && g.weights.min().item<double>() >= 0.0,
          ErrorCode::InvalidModel, "mixture weights must be nonnegative and sum to 1");
  require(torch::allclose(g.covariances, g.covariances.transpose(1, 2), 0.0, 1e-12), ErrorCode::InvalidModel,
          "covariances must be symmetric");
  auto [chol, info] = torch::linalg_cholesky_ex(g.covariances.to(torch::kFloat64));
  require(info.max().item<int64_t>() == 0, ErrorCode::InvalidModel, "covariances must be positive definite");
}

namespace {

struct Diffused {
  torch::Tensor log_resp_unnorm;  // [N, K]
  torch::Tensor grads;            // [N, K, d]  -Sigma'^{-1}(u - mu')
};

Diffused diffused_terms(const GaussianMixture& g, const torch::Tensor& u, int tau,
                        const diffusion::NoiseSchedule& s) {
  validate(g);
  require(tau >= 0 && tau <= s.T, ErrorCode::InvalidLevel, "level out of range");
  require(u.dim() == 2 && u.size(1) == g.dim(), ErrorCode::ShapeError, "points must be [N, d]");
  const double gm = s.gamma[tau], vs = s.varsigma[tau];
  const int64_t d = g.dim();
  auto x = u.to(torch::kFloat64);
  auto cov = g.covariances * (gm * gm) + torch::eye(d, torch::kFloat64) * (vs * vs);  // [K,d,d]
  auto chol = torch::linalg_cholesky(cov);
  auto diff = x.unsqueeze(1) - (g.means * gm).unsqueeze(0);  // [N,K,d]
  auto prec = torch::cholesky_inverse(chol);                // [K,d,d]
  auto solved = torch::einsum("kij,nkj->nki", {prec, diff});
  auto maha = (diff * solved).sum(-1);                      // [N,K]
  auto logdet = 2.0 * torch::log(torch::diagonal(chol, 0, -2, -1)).sum(-1);  // [K]
  Diffused out;
  out.log_resp_unnorm = torch::log(g.weights).unsqueeze(0) - 0.5 * (maha + logdet.unsqueeze(0)) -
                        0.5 * d * std::log(2.0 * std::numbers::pi);
  out.grads = -solved;
  return out;
}

}  // namespace

torch::Tensor gmm_score(const GaussianMixture& g, const torch::Tensor& u, int tau, const diffusion::NoiseSchedule& s) {
  auto t = diffused_terms(g, u, tau, s);
  auto resp = torch::softmax(t.log_resp_unnorm, 1);
  return (resp.unsqueeze(-1) * t.grads).sum(1).to(u.scalar_type());
}

torch::Tensor gmm_log_density(const GaussianMixture& g, const torch::Tensor& u, int tau,
                              const diffusion::NoiseSchedule& s) {
  return torch::logsumexp(diffused_terms(g, u, tau, s).log_resp_unnorm, 1);
}

torch::Tensor sample(const GaussianMixture& g, int64_t n, std::uint64_t seed) {
  validate(g);
  auto gen = make_generator(seed);
  auto comp = at::multinomial(g.weights, n, true, gen);
  auto chol = torch::linalg_cholesky(g.covariances);
  auto z = at::randn({n, g.dim()}, gen, torch::TensorOptions().dtype(torch::kFloat64));
  auto l = chol.index_select(0, comp);  // [n,d,d]
  return g.means.index_select(0, comp) + torch::einsum("nij,nj->ni", {l, z});
}

GmmScoreSource::GmmScoreSource(GaussianMixture gmm, diffusion::NoiseSchedule schedule)
    : gmm_(std::move(gmm)), schedule_(std::move(schedule)) {
  validate(gmm_);
}

torch::Tensor GmmScoreSource::score(const torch::Tensor& u, const torch::Tensor& taus) const {
  require(taus.dim() == 1 && taus.size(0) == u.size(0), ErrorCode::ShapeError, "one level per sample required");
  auto flat = u.reshape({u.size(0), -1});
  auto out = torch::empty_like(flat);
  auto unique = std::get<0>(at::_unique(taus, /*sorted=*/true));
  for (int64_t i = 0; i < unique.size(0); ++i) {
    const auto tau = unique[i].item<int64_t>();
    auto rows = (taus == tau).nonzero().squeeze(1);
    out.index_copy_(0, rows, gmm_score(gmm_, flat.index_select(0, rows), static_cast<int>(tau), schedule_));
  }
  return out.reshape(u.sizes());
}

}  // namespace ulfb::synth
