#include "core/trainer.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "core/dmd2.hpp"
#include "core/error.hpp"
#include "core/log.hpp"
#include "core/rng.hpp"
#include "core/synth_data.hpp"
#include "core/tensor_io.hpp"

namespace ulfb::train {

namespace F = torch::nn::functional;
using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Config

void TrainConfig::validate() const {
  for (double l : {lambda_dm, lambda_sb, lambda_reg, lambda_dmd2}) {
    require(std::isfinite(l) && l >= 0, ErrorCode::InvalidConfig, "loss weights must be finite and nonnegative");
  }
  require(batch >= 1, ErrorCode::InvalidConfig, "batch must be at least 1");
  require(steps >= 0, ErrorCode::InvalidConfig, "steps must be nonnegative");
  require(K >= 1, ErrorCode::InvalidConfig, "K must be at least 1");
  require(noise_scale >= 0 && std::isfinite(noise_scale), ErrorCode::InvalidConfig, "noise_scale must be >= 0");
  require(n_critic >= 1, ErrorCode::InvalidConfig, "n_critic must be at least 1");
  for (double lr : {lr_generator, lr_discriminator, lr_critic, lr_aux}) {
    require(lr > 0 && std::isfinite(lr), ErrorCode::InvalidConfig, "learning rates must be positive");
  }
  require(checkpoint_every >= 0, ErrorCode::InvalidConfig, "checkpoint_every must be nonnegative");
  require(levels >= 2, ErrorCode::InvalidConfig, "levels must be at least 2");
  require(generator.base_width >= 4 && generator.base_width % 4 == 0, ErrorCode::InvalidConfig,
          "generator.base_width must be a positive multiple of 4");
  require(generator.emb_dim >= 2 && generator.emb_dim % 2 == 0, ErrorCode::InvalidConfig,
          "generator.emb_dim must be even");
  require(patch.num_patches >= 2, ErrorCode::InvalidConfig, "patch.num_patches must be at least 2");
  require(patch.temperature > 0, ErrorCode::InvalidConfig, "patch.temperature must be positive");
  require(patch.proj_dim >= 1, ErrorCode::InvalidConfig, "patch.proj_dim must be positive");
  asp.validate();
}

ojson TrainConfig::to_json() const {
  ojson j;
  j["lambda_dm"] = lambda_dm;
  j["lambda_sb"] = lambda_sb;
  j["lambda_reg"] = lambda_reg;
  j["lambda_dmd2"] = lambda_dmd2;
  j["use_aux_gan"] = use_aux_gan;
  j["compute_zero_weight_terms"] = compute_zero_weight_terms;
  j["evaluate_every_step"] = evaluate_every_step;
  j["K"] = K;
  j["noise_scale"] = noise_scale;
  j["n_critic"] = n_critic;
  j["lr_generator"] = lr_generator;
  j["lr_discriminator"] = lr_discriminator;
  j["lr_critic"] = lr_critic;
  j["lr_aux"] = lr_aux;
  j["batch"] = batch;
  j["steps"] = steps;
  j["seed"] = seed;
  j["checkpoint_every"] = checkpoint_every;
  j["levels"] = levels;
  j["generator"] = {{"base_width", generator.base_width}, {"emb_dim", generator.emb_dim}};
  j["asp"] = {{"tau_m", asp.tau_m},   {"s_m", asp.s_m},     {"tau_fg", asp.tau_fg},         {"tau_bg", asp.tau_bg},
              {"t_tol", asp.t_tol}, {"gamma_soft", asp.gamma_soft}, {"log_clamp", asp.log_clamp}};
  j["patch"] = {{"num_patches", patch.num_patches}, {"temperature", patch.temperature}, {"proj_dim", patch.proj_dim}};
  return j;
}

namespace {

/// Reads known keys with type checks and rejects anything else.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    require(j.is_object(), ErrorCode::InvalidConfig, where() + " must be an object");
  }

  void number(const char* key, double& out) {
    if (auto v = take(key)) {
      require(v->is_number(), ErrorCode::InvalidConfig, where(key) + " must be a number");
      out = v->get<double>();
    }
  }
  template <typename Int>
  void integer(const char* key, Int& out) {
    if (auto v = take(key)) {
      require(v->is_number_integer(), ErrorCode::InvalidConfig, where(key) + " must be an integer");
      if constexpr (std::is_unsigned_v<Int>) {
        require(v->is_number_unsigned() || v->get<int64_t>() >= 0, ErrorCode::InvalidConfig,
                where(key) + " must be nonnegative");
      }
      out = v->get<Int>();
    }
  }
  void boolean(const char* key, bool& out) {
    if (auto v = take(key)) {
      require(v->is_boolean(), ErrorCode::InvalidConfig, where(key) + " must be a boolean");
      out = v->get<bool>();
    }
  }
  const json* object(const char* key) { return take(key); }
  std::string child(const char* key) const { return where(key); }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      require(seen_.count(k), ErrorCode::InvalidConfig, "unknown field " + where(k.c_str()));
    }
  }

 private:
  const json* take(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }
  std::string where(const char* key = nullptr) const {
    std::string p = path_.empty() ? "config" : path_;
    return key ? p + "." + key : p;
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  Reader r(j, "");
  r.number("lambda_dm", c.lambda_dm);
  r.number("lambda_sb", c.lambda_sb);
  r.number("lambda_reg", c.lambda_reg);
  r.number("lambda_dmd2", c.lambda_dmd2);
  r.boolean("use_aux_gan", c.use_aux_gan);
  r.boolean("compute_zero_weight_terms", c.compute_zero_weight_terms);
  r.boolean("evaluate_every_step", c.evaluate_every_step);
  r.integer("K", c.K);
  r.number("noise_scale", c.noise_scale);
  r.integer("n_critic", c.n_critic);
  r.number("lr_generator", c.lr_generator);
  r.number("lr_discriminator", c.lr_discriminator);
  r.number("lr_critic", c.lr_critic);
  r.number("lr_aux", c.lr_aux);
  r.integer("batch", c.batch);
  r.integer("steps", c.steps);
  r.integer("seed", c.seed);
  r.integer("checkpoint_every", c.checkpoint_every);
  r.integer("levels", c.levels);
  if (const json* g = r.object("generator")) {
    Reader rg(*g, r.child("generator"));
    rg.integer("base_width", c.generator.base_width);
    rg.integer("emb_dim", c.generator.emb_dim);
    rg.finish();
  }
  if (const json* a = r.object("asp")) {
    Reader ra(*a, r.child("asp"));
    ra.number("tau_m", c.asp.tau_m);
    ra.number("s_m", c.asp.s_m);
    ra.number("tau_fg", c.asp.tau_fg);
    ra.number("tau_bg", c.asp.tau_bg);
    ra.number("t_tol", c.asp.t_tol);
    ra.number("gamma_soft", c.asp.gamma_soft);
    ra.number("log_clamp", c.asp.log_clamp);
    ra.finish();
  }
  if (const json* p = r.object("patch")) {
    Reader rp(*p, r.child("patch"));
    rp.integer("num_patches", c.patch.num_patches);
    rp.number("temperature", c.patch.temperature);
    rp.integer("proj_dim", c.patch.proj_dim);
    rp.finish();
  }
  r.finish();
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Losses

double LossBreakdown::weighted_sum(const TrainConfig& c) const {
  return c.lambda_dm * (adv_g + c.lambda_dmd2 * dmd2 + aux_gan_g) + c.lambda_sb * sb +
         c.lambda_reg * (patchnce + asp_core + asp_bg + asp_boundary);
}

ojson LossBreakdown::to_json() const {
  if (!generator_evaluated) {
    return {{"adv_g", nullptr},     {"adv_d", adv_d},   {"dmd2", nullptr},     {"aux_gan_g", nullptr},
            {"aux_gan_d", aux_gan_d}, {"sb", nullptr},  {"patchnce", nullptr}, {"asp_core", nullptr},
            {"asp_bg", nullptr},    {"asp_boundary", nullptr}, {"total", nullptr}};
  }
  return {{"adv_g", adv_g},         {"adv_d", adv_d},       {"dmd2", dmd2},     {"aux_gan_g", aux_gan_g},
          {"aux_gan_d", aux_gan_d}, {"sb", sb},             {"patchnce", patchnce}, {"asp_core", asp_core},
          {"asp_bg", asp_bg},       {"asp_boundary", asp_boundary}, {"total", total}};
}

LossBreakdown StepTerms::values() const {
  LossBreakdown b;
  b.adv_g = adv_g.item<double>();
  b.dmd2 = dmd2.item<double>();
  b.aux_gan_g = aux_gan_g.item<double>();
  b.sb = sb.item<double>();
  b.patchnce = patchnce.item<double>();
  b.asp_core = asp_core.item<double>();
  b.asp_bg = asp_bg.item<double>();
  b.asp_boundary = asp_boundary.item<double>();
  b.total = total.item<double>();
  return b;
}

torch::Tensor sb_loss(const torch::Tensor& x_tk, const torch::Tensor& endpoint) {
  require(x_tk.sizes() == endpoint.sizes(), ErrorCode::ShapeError, "sb_loss inputs differ in shape");
  return (endpoint - x_tk).pow(2).mean();
}

// ---------------------------------------------------------------------------
// Models

namespace {

enum Stream : std::uint64_t {
  kInitGenerator = 0x101,
  kInitDiscriminator,
  kInitProjector,
  kInitAux,
  kStep = 0x5EED,
  kBatch = 1,
  kRollout,
  kCritic,
  kAuxReal,
  kAuxFake,
  kTerms = 16,
};

void copy_parameters(torch::nn::Module& dst, const torch::nn::Module& src) {
  torch::NoGradGuard no_grad;
  auto s = src.named_parameters();
  for (auto& item : dst.named_parameters()) item.value().copy_(s[item.key()]);
}

std::uint64_t module_digest(const torch::nn::Module& m) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (const auto& p : m.parameters()) {
    auto c = p.detach().contiguous();
    h = ckpt::fnv1a64(c.data_ptr(), c.numel() * c.element_size(), h);
  }
  return h;
}

}  // namespace

Models make_models(const TrainConfig& config, const diffusion::ScoreModel& teacher) {
  config.validate();
  require(teacher.frozen(), ErrorCode::InvalidModel, "teacher must be frozen before training");
  require(teacher.schedule() == diffusion::make_noise_schedule(config.levels), ErrorCode::ScheduleMismatch,
          "config.levels does not match the teacher's noise schedule");
  const auto* teacher_net = dynamic_cast<const nets::ConvEpsNet*>(&teacher.net());
  require(teacher_net != nullptr, ErrorCode::InvalidModel, "image training needs a convolutional teacher");

  Models m;
  m.teacher = &teacher;
  torch::manual_seed(derive_seed(config.seed, kInitGenerator));
  m.generator = nets::Generator(config.generator);
  torch::manual_seed(derive_seed(config.seed, kInitDiscriminator));
  m.discriminator = nets::Discriminator(config.generator);
  torch::manual_seed(derive_seed(config.seed, kInitProjector));
  m.projector = patchnce::Projector(m.generator->tap_channels(), config.patch.proj_dim);

  auto critic_net = std::make_shared<nets::ConvEpsNet>(teacher_net->config());
  copy_parameters(*critic_net, *teacher_net);
  m.critic = std::make_shared<diffusion::ScoreModel>(critic_net, diffusion::Role::CriticFake, teacher.schedule());
  torch::manual_seed(derive_seed(config.seed, kInitAux));
  m.aux = nets::AuxClassifier(critic_net->feature_channels(), critic_net->spatial());
  return m;
}

StepTerms total_step_loss(Models& models, const StepInputs& in, int k, const TrainConfig& c) {
  require(k >= 0 && k < c.K, ErrorCode::StepPastEnd, "refinement step " + std::to_string(k) + " outside [0, K)");
  require(in.x0.sizes() == in.x_tk.sizes(), ErrorCode::ShapeError, "x0 and x_tk differ in shape");
  const bool all = c.compute_zero_weight_terms;
  auto need = [all](double w) { return all || w != 0.0; };

  auto y = in.endpoint.defined() ? in.endpoint : models.generator->forward(in.x_tk, in.t_k);
  auto zero = torch::zeros({}, y.options());
  StepTerms t;
  t.sb = need(c.lambda_sb) ? sb_loss(in.x_tk, y) : zero;

  t.adv_g = need(c.lambda_dm) ? F::softplus(-models.discriminator->forward(y, in.t_k)).mean() : zero;

  if (need(c.lambda_dm * c.lambda_dmd2)) {
    auto g = dmd2::dmd2_generator_gradient(*models.teacher, *models.critic, y.detach(), derive_seed(in.seed, 1));
    t.dmd2 = dmd2::surrogate_loss(y, g);
  } else {
    t.dmd2 = zero;
  }

  if (c.use_aux_gan && need(c.lambda_dm)) {
    auto fake = dmd2::diffuse(y, models.critic->schedule(), derive_seed(in.seed, 2));
    t.aux_gan_g = dmd2::aux_generator_loss(models.aux, *models.critic, fake);
  } else {
    t.aux_gan_g = zero;
  }

  if (need(c.lambda_reg)) {
    auto src = models.generator->encode(in.x0, in.t_k);
    auto out = models.generator->encode(y, in.t_k);
    auto fs = patchnce::sample_patch_features(src, nullptr, c.patch.num_patches, models.projector,
                                              derive_seed(in.seed, 3));
    auto fo = patchnce::sample_patch_features(out, &fs.ids, c.patch.num_patches, models.projector, 0);
    t.patchnce = patchnce::patchnce_loss(fs.features, fo.features, c.patch.temperature);

    asp::InputStructure local;
    if (!in.structure) local = asp::prepare_input(in.x0, c.asp);
    const auto& structure = in.structure ? *in.structure : local;
    auto a = asp::asp_loss(structure, y, c.asp);
    t.asp_core = a.core_bce;
    t.asp_bg = a.bg_bce;
    t.asp_boundary = a.boundary;
  } else {
    t.patchnce = t.asp_core = t.asp_bg = t.asp_boundary = zero;
  }

  t.total = c.lambda_dm * (t.adv_g + c.lambda_dmd2 * t.dmd2 + t.aux_gan_g) + c.lambda_sb * t.sb +
            c.lambda_reg * (t.patchnce + t.asp_core + t.asp_bg + t.asp_boundary);
  return t;
}

// ---------------------------------------------------------------------------
// Trainer

namespace {

std::vector<torch::Tensor> params_of(std::initializer_list<const torch::nn::Module*> mods) {
  std::vector<torch::Tensor> out;
  for (const auto* m : mods) {
    for (const auto& p : m->parameters()) out.push_back(p);
  }
  return out;
}

std::unique_ptr<torch::optim::Adam> adam(std::vector<torch::Tensor> params, double lr) {
  return std::make_unique<torch::optim::Adam>(std::move(params),
                                              torch::optim::AdamOptions(lr).betas(std::make_tuple(0.5, 0.999)));
}

void check_finite(double v, const char* what, int64_t step) {
  if (!std::isfinite(v)) {
    fail(ErrorCode::NaNDetected, std::string(what) + " is not finite at step " + std::to_string(step));
  }
}

ojson comparable(const TrainConfig& c) {
  auto j = c.to_json();
  j.erase("steps");
  j.erase("checkpoint_every");
  return j;
}

}  // namespace

Trainer::Trainer(TrainConfig config, const diffusion::ScoreModel& teacher)
    : config_(std::move(config)),
      schedule_(bridge::make_schedule(config_.K, config_.noise_scale)),
      models_(make_models(config_, teacher)) {
  opt_g_ = adam(params_of({models_.generator.get(), models_.projector.get()}), config_.lr_generator);
  opt_d_ = adam(params_of({models_.discriminator.get()}), config_.lr_discriminator);
  opt_c_ = adam(params_of({&models_.critic->net()}), config_.lr_critic);
  opt_aux_ = adam(params_of({models_.aux.get()}), config_.lr_aux);
}

LossBreakdown Trainer::step(const data::SliceSet& source, const data::SliceSet& target) {
  require(source.size() > 0 && target.size() > 0, ErrorCode::EmptyBatch, "training needs source and target slices");
  require(source.images.sizes().slice(1) == target.images.sizes().slice(1), ErrorCode::ShapeError,
          "source and target slices differ in shape");
  const int64_t s = global_step_;
  const std::uint64_t seed = derive_seed(config_.seed, kStep, static_cast<std::uint64_t>(s));
  const int K = config_.K;
  const int64_t B = config_.batch;
  const auto plan = dmd2::ttur_plan(s, config_.n_critic);

  auto gen = make_generator(derive_seed(seed, kBatch));
  auto long_opts = torch::TensorOptions().dtype(torch::kLong);
  auto x0 = source.images.index_select(0, at::randint(0, source.size(), {B}, gen, long_opts));
  auto real = target.images.index_select(0, at::randint(0, target.size(), {K * B}, gen, long_opts));

  auto& G = models_.generator;
  bridge::EndpointFn endpoint = [&G](const torch::Tensor& x, double t) { return G->forward(x, t); };
  bridge::Rollout path;
  {
    torch::NoGradGuard no_grad;
    path = bridge::rollout(endpoint, x0, schedule_, bridge::RolloutMode::TrainStochastic,
                           derive_seed(seed, kRollout));
  }
  // Critic and aux head see B of the K*B predictions, drawn across all steps.
  auto pick = at::randperm(K * B, gen, long_opts).slice(0, 0, B);
  auto fakes = torch::cat(path.endpoints).index_select(0, pick);

  LossBreakdown out;
  const double critic_loss = dmd2::update_critic(*models_.critic, *opt_c_, fakes, derive_seed(seed, kCritic));
  check_finite(critic_loss, "critic loss", s);
  ++critic_updates_;

  if (config_.use_aux_gan) {
    auto real_d = dmd2::diffuse(real.slice(0, 0, B), models_.critic->schedule(), derive_seed(seed, kAuxReal));
    auto fake_d = dmd2::diffuse_at(fakes, real_d.taus, models_.critic->schedule(), derive_seed(seed, kAuxFake));
    opt_aux_->zero_grad();
    auto d = dmd2::aux_discriminator_loss(models_.aux, *models_.critic, real_d, fake_d);
    out.aux_gan_d = d.item<double>();
    check_finite(out.aux_gan_d, "aux discriminator loss", s);
    d.backward();
    opt_aux_->step();
  }

  {
    opt_d_->zero_grad();
    torch::Tensor d_loss = torch::zeros({});
    for (int k = 0; k < K; ++k) {
      const double t_k = schedule_.t[k];
      auto real_logits = models_.discriminator->forward(real.slice(0, k * B, (k + 1) * B), t_k);
      auto fake_logits = models_.discriminator->forward(path.endpoints[k], t_k);
      d_loss = d_loss + nets::logistic_gan_losses(real_logits, fake_logits, fake_logits).d_loss;
    }
    d_loss = d_loss / K;
    out.adv_d = d_loss.item<double>();
    check_finite(out.adv_d, "discriminator loss", s);
    d_loss.backward();
    opt_d_->step();
  }

  const bool update_generator = plan == dmd2::UpdatePlan::All;
  if (!update_generator && !config_.evaluate_every_step) {
    out.generator_evaluated = false;
    ++global_step_;
    return out;
  }
  const auto structure = asp::prepare_input(x0, config_.asp);
  std::optional<torch::NoGradGuard> no_grad;
  if (!update_generator) no_grad.emplace();
  if (update_generator) opt_g_->zero_grad();

  torch::Tensor total;
  for (int k = 0; k < K; ++k) {
    StepInputs in{x0, path.trajectory[k].x, schedule_.t[k], &structure, derive_seed(seed, kTerms + k), {}};
    if (!update_generator) in.endpoint = path.endpoints[k];
    auto terms = total_step_loss(models_, in, k, config_);
    auto v = terms.values();
    out.adv_g += v.adv_g / K;
    out.dmd2 += v.dmd2 / K;
    out.aux_gan_g += v.aux_gan_g / K;
    out.sb += v.sb / K;
    out.patchnce += v.patchnce / K;
    out.asp_core += v.asp_core / K;
    out.asp_bg += v.asp_bg / K;
    out.asp_boundary += v.asp_boundary / K;
    total = total.defined() ? total + terms.total / K : terms.total / K;
  }
  out.total = total.item<double>();
  check_finite(out.total, "generator objective", s);
  if (update_generator) {
    total.backward();
    opt_g_->step();
    ++generator_updates_;
  }
  ++global_step_;
  return out;
}

ckpt::Checkpoint Trainer::snapshot() {
  ckpt::Checkpoint c;
  c.meta["kind"] = "train";
  c.meta["global_step"] = global_step_;
  c.meta["critic_updates"] = critic_updates_;
  c.meta["generator_updates"] = generator_updates_;
  c.meta["config"] = config_.to_json();
  // Every random draw at step s comes from derive_seed(seed, s), so the seed and
  // step fully determine the generator state.
  c.meta["rng"] = {{"seed", config_.seed}, {"next_step", global_step_}};
  c.meta["teacher_digest"] = module_digest(models_.teacher->net());
  ckpt::store_module(c, "generator", *models_.generator);
  ckpt::store_module(c, "discriminator", *models_.discriminator);
  ckpt::store_module(c, "projector", *models_.projector);
  ckpt::store_module(c, "critic", models_.critic->net());
  ckpt::store_module(c, "aux", *models_.aux);
  ckpt::store_adam(c, "opt_g", *opt_g_);
  ckpt::store_adam(c, "opt_d", *opt_d_);
  ckpt::store_adam(c, "opt_c", *opt_c_);
  ckpt::store_adam(c, "opt_aux", *opt_aux_);
  return c;
}

void Trainer::restore(const ckpt::Checkpoint& c) {
  require(c.meta.value("kind", "") == "train", ErrorCode::IncompatibleCheckpoint, "not a training checkpoint");
  auto stored = TrainConfig::from_json(c.meta.at("config"));
  require(comparable(stored) == comparable(config_), ErrorCode::IncompatibleCheckpoint,
          "checkpoint was written with a different training config");
  require(c.meta.at("teacher_digest").get<std::uint64_t>() == module_digest(models_.teacher->net()),
          ErrorCode::IncompatibleCheckpoint, "checkpoint was trained against a different teacher");
  ckpt::restore_module(c, "generator", *models_.generator);
  ckpt::restore_module(c, "discriminator", *models_.discriminator);
  ckpt::restore_module(c, "projector", *models_.projector);
  ckpt::restore_module(c, "critic", models_.critic->net());
  ckpt::restore_module(c, "aux", *models_.aux);
  ckpt::restore_adam(c, "opt_g", *opt_g_);
  ckpt::restore_adam(c, "opt_d", *opt_d_);
  ckpt::restore_adam(c, "opt_c", *opt_c_);
  ckpt::restore_adam(c, "opt_aux", *opt_aux_);
  global_step_ = c.meta.at("global_step").get<int64_t>();
  critic_updates_ = c.meta.at("critic_updates").get<int64_t>();
  generator_updates_ = c.meta.at("generator_updates").get<int64_t>();
}

// ---------------------------------------------------------------------------
// Loop

namespace {

std::string log_line(int64_t step, const Trainer& tr, const LossBreakdown& b) {
  ojson j;
  j["step"] = step;
  j["update"] = dmd2::ttur_plan(step, tr.config().n_critic) == dmd2::UpdatePlan::All ? "all" : "critic";
  const auto terms = b.to_json();
  for (const auto& [k, v] : terms.items()) j[k] = v;
  j["critic_updates"] = tr.critic_updates();
  j["generator_updates"] = tr.generator_updates();
  return j.dump() + "\n";
}

std::filesystem::path checkpoint_path(const std::filesystem::path& dir, int64_t step) {
  char name[32];
  std::snprintf(name, sizeof name, "step_%06lld.ulfb", static_cast<long long>(step));
  return dir / name;
}

}  // namespace

RunResult train(const TrainConfig& config, const data::SliceSet& source, const data::SliceSet& target,
                const diffusion::ScoreModel& teacher, const RunOptions& options) {
  for (auto c : source.cohorts) {
    require(c == data::Cohort::SourcePool, ErrorCode::SplitLeakage, "source batch contains " + data::to_string(c));
  }
  for (auto c : target.cohorts) {
    require(c == data::Cohort::TargetPool, ErrorCode::SplitLeakage, "target batch contains " + data::to_string(c));
  }
  Trainer trainer(config, teacher);
  RunResult result;
  if (options.resume) {
    trainer.restore(ckpt::load_checkpoint(*options.resume));
    result.last_checkpoint = *options.resume;
    log::info("resumed at step ", trainer.global_step());
  }

  const bool write = !options.out_dir.empty();
  std::ofstream log_file;
  if (write) {
    std::filesystem::create_directories(options.out_dir);
    io::write_text(options.out_dir / "config.json", config.to_json().dump(2) + "\n");
    const auto log_path = options.out_dir / "loss_log.jsonl";
    std::string kept;
    if (trainer.global_step() > 0 && std::filesystem::exists(log_path)) {
      // Keep exactly the lines written before the restored step.
      std::istringstream is(io::read_text(log_path));
      std::string line;
      for (int64_t i = 0; i < trainer.global_step() && std::getline(is, line); ++i) kept += line + "\n";
    }
    io::write_text(log_path, kept);
    log_file.open(log_path, std::ios::binary | std::ios::app);
    require(static_cast<bool>(log_file), ErrorCode::IoError, "cannot open " + log_path.string());
  }

  auto save = [&](const std::filesystem::path& path) {
    ckpt::save_checkpoint(trainer.snapshot(), path);
    result.last_checkpoint = path;
  };

  while (trainer.global_step() < config.steps && trainer.global_step() != options.stop_at) {
    const int64_t s = trainer.global_step();
    LossBreakdown b;
    try {
      b = trainer.step(source, target);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::NaNDetected) throw;
      const std::string last =
          result.last_checkpoint.empty() ? std::string("none") : result.last_checkpoint.string();
      fail(ErrorCode::NaNDetected, std::string(e.what()) + "; last good checkpoint: " + last);
    }
    result.log.push_back(b);
    if (write) {
      log_file << log_line(s, trainer, b);
      log_file.flush();
    }
    if (options.on_step) options.on_step(s, b);
    if (s % 100 == 0) log::debug("step ", s, " total ", b.total);
    if (write && config.checkpoint_every > 0 && trainer.global_step() % config.checkpoint_every == 0) {
      save(checkpoint_path(options.out_dir, trainer.global_step()));
    }
  }
  if (write && trainer.global_step() == config.steps) save(options.out_dir / "final.ulfb");
  result.critic_updates = trainer.critic_updates();
  result.generator_updates = trainer.generator_updates();
  result.global_step = trainer.global_step();
  return result;
}

// ---------------------------------------------------------------------------
// Inference

Translator::Translator(const ckpt::Checkpoint& c) {
  require(c.meta.value("kind", "") == "train", ErrorCode::IncompatibleCheckpoint, "not a training checkpoint");
  const auto cfg = TrainConfig::from_json(c.meta.at("config"));
  generator_ = nets::Generator(cfg.generator);
  ckpt::restore_module(c, "generator", *generator_);
  generator_->eval();
  schedule_ = bridge::make_schedule(cfg.K, cfg.noise_scale);
}

Translator::Translator(nets::Generator generator, bridge::BridgeSchedule schedule)
    : generator_(std::move(generator)), schedule_(std::move(schedule)) {}

torch::Tensor Translator::operator()(const torch::Tensor& x) const {
  torch::NoGradGuard no_grad;
  auto g = generator_;
  bridge::EndpointFn endpoint = [g](const torch::Tensor& in, double t) mutable { return g->forward(in, t); };
  return bridge::rollout(endpoint, x, schedule_, bridge::RolloutMode::InferDeterministic, 0).y_hat;
}

// ---------------------------------------------------------------------------
// Shift testbed

std::vector<double> run_shift_testbed(const ShiftTestbedConfig& cfg) {
  const auto schedule = diffusion::make_noise_schedule();
  synth::GmmScoreSource teacher(synth::GaussianMixture::isotropic({0.0}, 1.0), schedule);

  auto b = torch::full({1}, cfg.m0, torch::TensorOptions().dtype(torch::kFloat64).requires_grad(true));
  torch::optim::SGD opt({b}, torch::optim::SGDOptions(cfg.lr));

  std::shared_ptr<diffusion::ScoreModel> learned;
  std::unique_ptr<torch::optim::Adam> critic_opt;
  if (cfg.learned_critic) {
    torch::manual_seed(derive_seed(cfg.seed, 0xC1));
    auto net = std::make_shared<nets::MlpEpsNet>(1);
    net->to(torch::kFloat64);
    learned = std::make_shared<diffusion::ScoreModel>(net, diffusion::Role::CriticFake, schedule);
    auto sampler = [&cfg](int64_t n, std::uint64_t seed) {
      return at::randn({n, 1}, make_generator(seed), torch::kFloat64) + cfg.m0;
    };
    diffusion::SamplerFitConfig fit;
    fit.seed = derive_seed(cfg.seed, 0xC2);
    diffusion::fit_score_model(*learned, sampler, fit);
    critic_opt = learned->make_optimizer(1e-3);
  }

  dmd2::GradientOptions gopts;
  gopts.weighting = dmd2::Weighting::InverseSignalPower;
  std::vector<double> trace{cfg.m0};
  for (int step = 0; step < cfg.steps; ++step) {
    const auto seed = derive_seed(cfg.seed, 0x51F7, step);
    auto z = at::randn({cfg.batch, 1}, make_generator(derive_seed(seed, 1)), torch::kFloat64);
    auto y = z + b;
    torch::Tensor g;
    if (learned) {
      for (int i = 0; i < cfg.critic_steps_per_update; ++i) {
        dmd2::update_critic(*learned, *critic_opt, y.detach(), derive_seed(seed, 2, i));
      }
      g = dmd2::dmd2_generator_gradient(teacher, *learned, y.detach(), derive_seed(seed, 3), gopts);
    } else {
      synth::GmmScoreSource fake(synth::GaussianMixture::isotropic({b.item<double>()}, 1.0), schedule);
      g = dmd2::dmd2_generator_gradient(teacher, fake, y.detach(), derive_seed(seed, 3), gopts);
    }
    opt.zero_grad();
    // mean(g * y) has d/db = mean(g); the batch mean undoes the surrogate's 1/numel.
    dmd2::surrogate_loss(y, g).backward();
    opt.step();
    trace.push_back(b.item<double>());
  }
  return trace;
}

}  // namespace ulfb::train
