#include "core/pipeline.hpp"

#include <set>
#include <sstream>

#include "core/dataset.hpp"
#include "core/error.hpp"
#include "core/log.hpp"
#include "core/oracles.hpp"
#include "core/synth_data.hpp"
#include "core/tensor_io.hpp"
#include "core/trainer.hpp"

namespace ulfb::pipeline {

namespace fs = std::filesystem;
using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

namespace {

/// Typed option access; InvalidConfig on wrong types, missing required keys
/// and keys nobody asked for.
class Options {
 public:
  explicit Options(const json& j) : j_(j.is_null() ? json::object() : j) {
    require(j_.is_object(), ErrorCode::InvalidConfig, "options must be a JSON object");
  }

  template <typename T>
  T get(const std::string& key, T fallback) {
    seen_.insert(key);
    if (!j_.contains(key) || j_[key].is_null()) return fallback;
    return convert<T>(key);
  }

  template <typename T>
  T need(const std::string& key) {
    seen_.insert(key);
    require(j_.contains(key) && !j_[key].is_null(), ErrorCode::InvalidConfig, "missing option '" + key + "'");
    return convert<T>(key);
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) && !j_[key].is_null();
  }

  const json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      require(seen_.count(k), ErrorCode::InvalidConfig, "unknown option '" + k + "'");
    }
  }

 private:
  template <typename T>
  T convert(const std::string& key) {
    const auto& v = j_[key];
    if constexpr (std::is_same_v<T, bool>) {
      require(v.is_boolean(), ErrorCode::InvalidConfig, "option '" + key + "' must be a boolean");
    } else if constexpr (std::is_integral_v<T>) {
      require(v.is_number_integer(), ErrorCode::InvalidConfig, "option '" + key + "' must be an integer");
      if constexpr (std::is_unsigned_v<T>) {
        require(v.is_number_unsigned() || v.get<int64_t>() >= 0, ErrorCode::InvalidConfig,
                "option '" + key + "' must be nonnegative");
      }
    } else if constexpr (std::is_floating_point_v<T>) {
      require(v.is_number(), ErrorCode::InvalidConfig, "option '" + key + "' must be a number");
    } else {
      require(v.is_string(), ErrorCode::InvalidConfig, "option '" + key + "' must be a string");
    }
    return v.get<T>();
  }

  json j_;
  std::set<std::string> seen_;
};

void ensure_parent(const fs::path& file) {
  std::error_code ec;
  if (file.has_parent_path()) fs::create_directories(file.parent_path(), ec);
  require(!ec, ErrorCode::IoError, "cannot create " + file.parent_path().string() + ": " + ec.message());
}

metrics::TranslateFn make_translator(Options& o) {
  const bool identity = o.get<bool>("identity", false);
  const bool has_ckpt = o.has("ckpt");
  require(identity != has_ckpt, ErrorCode::InvalidConfig, "give exactly one of 'ckpt' and 'identity'");
  if (identity) return [](const torch::Tensor& x) { return x.clone(); };
  auto translator = std::make_shared<train::Translator>(ckpt::load_checkpoint(o.need<std::string>("ckpt")));
  return [translator](const torch::Tensor& x) { return (*translator)(x); };
}

}  // namespace

ckpt::Checkpoint teacher_checkpoint(const diffusion::ScoreModel& model, const diffusion::TeacherConfig& config) {
  const auto* net = dynamic_cast<const nets::ConvEpsNet*>(&model.net());
  require(net != nullptr, ErrorCode::InvalidModel, "only convolutional score models are checkpointed");
  ckpt::Checkpoint c;
  c.meta["kind"] = "score_model";
  c.meta["role"] = diffusion::to_string(model.role());
  c.meta["frozen"] = model.frozen();
  c.meta["net"] = {{"base_width", net->config().base_width}, {"emb_dim", net->config().emb_dim}};
  c.meta["levels"] = model.schedule().T;
  c.meta["train"] = {{"steps", config.steps}, {"batch", config.batch}, {"lr", config.lr}, {"seed", config.seed}};
  ckpt::store_module(c, "net", *net);
  return c;
}

diffusion::ScoreModel load_teacher(const fs::path& path) {
  auto c = ckpt::load_checkpoint(path);
  require(c.meta.value("kind", "") == "score_model", ErrorCode::IncompatibleCheckpoint,
          path.string() + " is not a score model checkpoint");
  require(c.meta.value("role", "") == diffusion::to_string(diffusion::Role::TeacherReal),
          ErrorCode::IncompatibleCheckpoint, path.string() + " does not hold a teacher_real model");
  nets::NetConfig cfg{c.meta.at("net").at("base_width").get<int64_t>(), c.meta.at("net").at("emb_dim").get<int64_t>()};
  auto net = std::make_shared<nets::ConvEpsNet>(cfg);
  ckpt::restore_module(c, "net", *net);
  diffusion::ScoreModel model(net, diffusion::Role::TeacherReal,
                              diffusion::make_noise_schedule(c.meta.at("levels").get<int>()));
  model.freeze();
  return model;
}

ckpt::Checkpoint encoder_checkpoint(metrics::FeatureEncoder& encoder, const metrics::EncoderConfig& config) {
  ckpt::Checkpoint c;
  c.meta["kind"] = "feature_encoder";
  c.meta["image_size"] = encoder->image_size();
  c.meta["feature_dim"] = encoder->feature_dim();
  c.meta["train"] = {{"steps", config.steps}, {"batch", config.batch}, {"lr", config.lr}, {"seed", config.seed}};
  ckpt::store_module(c, "encoder", *encoder);
  return c;
}

metrics::FeatureEncoder load_encoder(const fs::path& path) {
  auto c = ckpt::load_checkpoint(path);
  require(c.meta.value("kind", "") == "feature_encoder", ErrorCode::IncompatibleCheckpoint,
          path.string() + " is not a feature encoder checkpoint");
  metrics::FeatureEncoder enc(c.meta.at("image_size").get<int64_t>(), c.meta.at("feature_dim").get<int64_t>());
  ckpt::restore_module(c, "encoder", *enc);
  enc->freeze();
  return enc;
}

ojson make_data(const json& options) {
  Options o(options);
  synth::CohortOptions c;
  const fs::path out = o.need<std::string>("out");
  c.n_subjects = o.get<int>("subjects", c.n_subjects);
  c.slices_per_subject = o.get<int>("slices", c.slices_per_subject);
  c.size = o.get<int>("size", c.size);
  c.seed = o.get<std::uint64_t>("seed", c.seed);
  c.split.paired_test_count = o.get<int>("paired_test", c.split.paired_test_count);
  if (o.has("degradation")) {
    Options d(o.raw("degradation"));
    auto& g = c.degradation;
    g.blur_sigma = d.get<double>("blur_sigma", g.blur_sigma);
    g.noise_sigma = d.get<double>("noise_sigma", g.noise_sigma);
    g.down_up_factor = d.get<int>("down_up_factor", g.down_up_factor);
    g.bias_field_amp = d.get<double>("bias_field_amp", g.bias_field_amp);
    g.contrast_scale = d.get<double>("contrast_scale", g.contrast_scale);
    d.finish();
  }
  o.finish();
  require(c.n_subjects >= 1, ErrorCode::InvalidConfig, "subjects must be at least 1");
  require(c.slices_per_subject >= 1, ErrorCode::InvalidConfig, "slices must be at least 1");
  require(c.size >= 32, ErrorCode::InvalidConfig, "size must be at least 32");

  const auto m = synth::build_cohorts(out, c);
  ojson r;
  r["manifest"] = (out / "manifest.json").string();
  r["subjects"] = m.subject_count();
  r["slices_per_subject"] = c.slices_per_subject;
  r["cohorts"] = ojson::object();
  for (const auto& [cohort, entries] : m.cohorts) r["cohorts"][data::to_string(cohort)] = entries.size();
  return r;
}

ojson pretrain_teacher(const json& options) {
  Options o(options);
  diffusion::TeacherConfig cfg;
  const fs::path data_path = o.need<std::string>("data");
  const fs::path out = o.need<std::string>("out");
  cfg.steps = o.get<int>("steps", cfg.steps);
  cfg.batch = o.get<int>("batch", cfg.batch);
  cfg.lr = o.get<double>("lr", cfg.lr);
  cfg.seed = o.get<std::uint64_t>("seed", cfg.seed);
  cfg.net.base_width = o.get<int64_t>("base_width", cfg.net.base_width);
  cfg.levels = o.get<int>("levels", cfg.levels);
  o.finish();
  require(cfg.steps >= 1 && cfg.batch >= 1 && cfg.lr > 0, ErrorCode::InvalidConfig,
          "steps, batch and lr must be positive");
  require(cfg.net.base_width >= 4 && cfg.net.base_width % 4 == 0, ErrorCode::InvalidConfig,
          "base_width must be a positive multiple of 4");

  const auto manifest = data::load_manifest(data_path);
  require(manifest.has(data::Cohort::TargetPool), ErrorCode::MissingCohort, "manifest has no target_pool cohort");
  const auto target = data::load_cohort(manifest, data::Cohort::TargetPool);
  diffusion::TrainingLog log;
  auto model = diffusion::train_teacher(target, cfg, &log);
  ensure_parent(out);
  ckpt::save_checkpoint(teacher_checkpoint(model, cfg), out);
  ojson r;
  r["checkpoint"] = out.string();
  r["role"] = diffusion::to_string(model.role());
  r["final_loss"] = log.epoch_loss.empty() ? 0.0 : log.epoch_loss.back();
  r["epoch_loss"] = log.epoch_loss;
  return r;
}

ojson train_encoder(const json& options) {
  Options o(options);
  metrics::EncoderConfig cfg;
  const fs::path data_path = o.need<std::string>("data");
  const fs::path out = o.need<std::string>("out");
  cfg.steps = o.get<int>("steps", cfg.steps);
  cfg.batch = o.get<int>("batch", cfg.batch);
  cfg.lr = o.get<double>("lr", cfg.lr);
  cfg.seed = o.get<std::uint64_t>("seed", cfg.seed);
  o.finish();
  require(cfg.steps >= 1 && cfg.batch >= 1 && cfg.lr > 0, ErrorCode::InvalidConfig,
          "steps, batch and lr must be positive");

  const auto manifest = data::load_manifest(data_path);
  require(manifest.has(data::Cohort::TargetPool), ErrorCode::MissingCohort, "manifest has no target_pool cohort");
  std::vector<double> losses;
  auto enc = metrics::train_feature_encoder(data::load_cohort(manifest, data::Cohort::TargetPool), cfg, &losses);
  ensure_parent(out);
  ckpt::save_checkpoint(encoder_checkpoint(enc, cfg), out);
  return {{"checkpoint", out.string()}, {"final_loss", losses.empty() ? 0.0 : losses.back()}};
}

ojson train(const json& options) {
  Options o(options);
  const fs::path data_path = o.need<std::string>("data");
  const fs::path teacher_path = o.need<std::string>("teacher");
  train::RunOptions run;
  run.out_dir = o.need<std::string>("out");
  const auto config = train::TrainConfig::from_json(o.has("config") ? o.raw("config") : json::object());
  if (o.has("resume")) run.resume = o.need<std::string>("resume");
  run.stop_at = o.get<int64_t>("stop_at", -1);
  o.finish();

  const auto manifest = data::load_manifest(data_path);
  require(manifest.has(data::Cohort::SourcePool), ErrorCode::MissingCohort, "manifest has no source_pool cohort");
  require(manifest.has(data::Cohort::TargetPool), ErrorCode::MissingCohort, "manifest has no target_pool cohort");
  data::check_disjoint(manifest);
  const auto teacher = load_teacher(teacher_path);
  const auto source = data::load_cohort(manifest, data::Cohort::SourcePool);
  const auto target = data::load_cohort(manifest, data::Cohort::TargetPool);
  const auto result = train::train(config, source, target, teacher, run);

  ojson r;
  r["out"] = run.out_dir.string();
  r["last_checkpoint"] = result.last_checkpoint.string();
  r["global_step"] = result.global_step;
  r["critic_updates"] = result.critic_updates;
  r["generator_updates"] = result.generator_updates;
  r["completed"] = result.global_step == config.steps;
  if (!result.log.empty()) r["final_total"] = result.log.back().total;
  return r;
}

ojson translate(const json& options) {
  Options o(options);
  auto fn = make_translator(o);
  const std::string input = o.need<std::string>("input");
  const fs::path out = o.need<std::string>("out");
  const std::string cohort_name = o.get<std::string>("cohort", "paired_test");
  const int64_t size = o.get<int64_t>("size", 0);
  o.get<std::uint64_t>("seed", 0);
  o.finish();

  std::error_code ec;
  fs::create_directories(out, ec);
  require(!ec, ErrorCode::IoError, "cannot create " + out.string() + ": " + ec.message());

  auto run_batches = [&fn](const torch::Tensor& images) {
    std::vector<torch::Tensor> parts;
    for (int64_t i = 0; i < images.size(0); i += 32) {
      auto in = images.slice(0, i, std::min<int64_t>(i + 32, images.size(0)));
      auto y = fn(in);
      require(y.sizes() == in.sizes(), ErrorCode::ShapeError, "translation changed the slice shape");
      parts.push_back(y);
    }
    return torch::cat(parts);
  };

  ojson r;
  r["outputs"] = ojson::array();
  int64_t count = 0;
  if (fs::path(input).extension() == ".json") {
    const auto manifest = data::load_manifest(input);
    const auto cohort = data::cohort_from_string(cohort_name);
    require(manifest.has(cohort), ErrorCode::MissingCohort, "manifest has no " + cohort_name + " cohort");
    const auto set = data::load_cohort(manifest, cohort);
    const auto y = run_batches(set.images);
    fs::create_directories(out / cohort_name);
    int64_t row = 0;
    for (const auto& entry : manifest.cohorts.at(cohort)) {
      auto block = y.slice(0, row, row + entry.slices);
      row += entry.slices;
      // T1 is carried twice; the stored T1 is the mean of its two channels.
      auto t1 = (0.5 * (block.select(1, 0) + block.select(1, 2))).contiguous();
      auto t2 = block.select(1, 1).contiguous();
      const auto p1 = out / cohort_name / (entry.subject_id + "_t1.f32");
      const auto p2 = out / cohort_name / (entry.subject_id + "_t2.f32");
      io::write_f32(p1, t1);
      io::write_f32(p2, t2);
      r["outputs"].push_back({{"subject_id", entry.subject_id}, {"slices", entry.slices},
                              {"t1", p1.string()}, {"t2", p2.string()}});
    }
    count = y.size(0);
  } else {
    require(size > 0, ErrorCode::InvalidConfig, "'size' is required when translating raw slice files");
    std::stringstream ss(input);
    std::string file;
    while (std::getline(ss, file, ',')) {
      if (file.empty()) continue;
      const auto bytes = fs::file_size(file, ec);
      require(!ec, ErrorCode::IoError, "cannot stat " + file + ": " + ec.message());
      const int64_t per = 3 * size * size * 4;
      require(bytes % per == 0, ErrorCode::ShapeError, file + " does not hold [N,3," + std::to_string(size) + "," +
                                                           std::to_string(size) + "] float32 slices");
      const int64_t n = static_cast<int64_t>(bytes) / per;
      const auto y = run_batches(io::read_f32(file, {n, 3, size, size}));
      const auto target = out / fs::path(file).filename();
      io::write_f32(target, y.contiguous());
      r["outputs"].push_back({{"input", file}, {"output", target.string()}, {"slices", n}});
      count += n;
    }
  }
  r["count"] = count;
  return r;
}

ojson evaluate(const json& options) {
  Options o(options);
  auto fn = make_translator(o);
  const auto manifest = data::load_manifest(o.need<std::string>("data"));
  const std::string mode = o.need<std::string>("mode");
  const bool clean = o.get<bool>("clean_inputs", false);
  const std::string encoder_path = o.get<std::string>("encoder", "");
  const std::string out = o.get<std::string>("out", "");
  o.get<std::uint64_t>("seed", 0);
  o.finish();

  ojson report;
  if (mode == "paired") {
    metrics::PairedOptions po;
    po.clean_inputs = clean;
    report = metrics::evaluate_paired(fn, manifest, po);
  } else if (mode == "unpaired") {
    require(!encoder_path.empty(), ErrorCode::InvalidConfig, "unpaired mode needs a feature encoder");
    auto enc = load_encoder(encoder_path);
    report = metrics::evaluate_unpaired(fn, manifest, enc);
  } else {
    fail(ErrorCode::InvalidConfig, "mode must be 'paired' or 'unpaired', got '" + mode + "'");
  }
  if (!out.empty()) {
    ensure_parent(out);
    io::write_text(out, report.dump(2) + "\n");
  }
  return report;
}

ojson oracle_check(const json& options) {
  Options o(options);
  const auto suite = o.get<std::string>("suite", "all");
  const auto seed = o.get<std::uint64_t>("seed", 0);
  o.finish();
  ojson r;
  r["suites"] = ojson::array();
  bool passed = true;
  for (const auto& s : oracles::run_suite(suite, seed)) {
    passed = passed && s.passed();
    r["suites"].push_back(s.to_json());
  }
  r["passed"] = passed;
  return r;
}

}  // namespace ulfb::pipeline
