#include "ulfbridge/ulfbridge.h"

#include <cstring>
#include <filesystem>
#include <memory>
#include <string>

#include <json.hpp>
#include <torch/torch.h>

#include "core/checkpoint.hpp"
#include "core/error.hpp"
#include "core/log.hpp"
#include "core/metrics.hpp"
#include "core/pipeline.hpp"
#include "core/trainer.hpp"

struct ulfb_context {
  std::string error;
  std::string error_kind;
  std::string result;
};

struct ulfb_model {
  std::unique_ptr<ulfb::train::Translator> translator;
};

namespace {

using ulfb::ErrorCode;

ulfb_status status_of(ErrorCode c) {
  switch (c) {
    case ErrorCode::IoError:
    case ErrorCode::IncompatibleCheckpoint:
    case ErrorCode::CorruptCheckpoint:
      return ULFB_IO;
    case ErrorCode::InvalidConfig:
    case ErrorCode::InvalidSchedule:
    case ErrorCode::UnknownSuite:
    case ErrorCode::TooManyPatches:
    case ErrorCode::NeedNegatives:
      return ULFB_USAGE;
    case ErrorCode::MissingCohort:
    case ErrorCode::IncompleteCohort:
    case ErrorCode::SplitLeakage:
    case ErrorCode::ContaminatedTeacherData:
    case ErrorCode::ShapeError:
    case ErrorCode::TooSmall:
    case ErrorCode::EmptyBatch:
    case ErrorCode::NeedSamples:
    case ErrorCode::ScheduleMismatch:
    case ErrorCode::LevelMismatch:
    case ErrorCode::InvalidModel:
      return ULFB_DATA;
    case ErrorCode::NaNDetected:
    case ErrorCode::NumericalError:
    case ErrorCode::UndefinedScore:
      return ULFB_NUMERIC;
    case ErrorCode::StepPastEnd:
    case ErrorCode::InvalidLevel:
    case ErrorCode::FrozenModelError:
      return ULFB_ERROR;
  }
  return ULFB_ERROR;
}

/// Runs `body`, translating every exception into a status and message.
template <typename Body>
ulfb_status guarded(ulfb_context* ctx, Body&& body) {
  if (ctx == nullptr) return ULFB_USAGE;
  ctx->error.clear();
  ctx->error_kind.clear();
  try {
    body();
    return ULFB_OK;
  } catch (const ulfb::Error& e) {
    ctx->error = e.what();
    ctx->error_kind = std::string(ulfb::to_string(e.code()));
    return status_of(e.code());
  } catch (const nlohmann::json::exception& e) {
    ctx->error = std::string("malformed JSON: ") + e.what();
    ctx->error_kind = "InvalidConfig";
    return ULFB_USAGE;
  } catch (const std::filesystem::filesystem_error& e) {
    ctx->error = e.what();
    ctx->error_kind = "IoError";
    return ULFB_IO;
  } catch (const c10::Error& e) {
    ctx->error = e.what_without_backtrace();
    ctx->error_kind = "TensorError";
    return ULFB_ERROR;
  } catch (const std::exception& e) {
    ctx->error = e.what();
    ctx->error_kind = "InternalError";
    return ULFB_ERROR;
  } catch (...) {
    ctx->error = "unknown exception";
    ctx->error_kind = "InternalError";
    return ULFB_ERROR;
  }
}

void require_ptr(const void* p, const char* name) {
  ulfb::require(p != nullptr, ErrorCode::InvalidConfig, std::string(name) + " must not be null");
}

torch::Tensor wrap(const float* data, std::vector<int64_t> shape) {
  return torch::from_blob(const_cast<float*>(data), shape, torch::kFloat32).clone();
}

torch::Tensor wrap(const double* data, std::vector<int64_t> shape) {
  return torch::from_blob(const_cast<double*>(data), shape, torch::kFloat64).clone();
}

}  // namespace

extern "C" {

const char* ulfb_version(void) { return "0.1.0"; }

const char* ulfb_status_name(ulfb_status status) {
  switch (status) {
    case ULFB_OK: return "ok";
    case ULFB_ERROR: return "error";
    case ULFB_USAGE: return "usage";
    case ULFB_IO: return "io";
    case ULFB_DATA: return "data";
    case ULFB_NUMERIC: return "numeric";
  }
  return "unknown";
}

ulfb_status ulfb_context_create(ulfb_context** out) {
  if (out == nullptr) return ULFB_USAGE;
  try {
    *out = new ulfb_context();
    ulfb::log::init_from_env();
    return ULFB_OK;
  } catch (...) {
    *out = nullptr;
    return ULFB_ERROR;
  }
}

void ulfb_context_destroy(ulfb_context* ctx) { delete ctx; }

const char* ulfb_last_error(const ulfb_context* ctx) { return ctx ? ctx->error.c_str() : "null context"; }

const char* ulfb_last_error_kind(const ulfb_context* ctx) { return ctx ? ctx->error_kind.c_str() : ""; }

ulfb_status ulfb_set_log_level(ulfb_context* ctx, const char* level) {
  return guarded(ctx, [&] {
    require_ptr(level, "level");
    ulfb::log::Level parsed;
    ulfb::require(ulfb::log::parse_level(level, parsed), ErrorCode::InvalidConfig,
                  std::string("unknown log level '") + level + "'");
    ulfb::log::set_level(parsed);
  });
}

ulfb_status ulfb_run(ulfb_context* ctx, const char* command, const char* options_json) {
  bool oracle_failed = false;
  const auto st = guarded(ctx, [&] {
    require_ptr(command, "command");
    ctx->result.clear();
    const auto options = nlohmann::json::parse(options_json && *options_json ? options_json : "{}");
    const std::string cmd = command;
    nlohmann::ordered_json r;
    if (cmd == "make_data") r = ulfb::pipeline::make_data(options);
    else if (cmd == "pretrain_teacher") r = ulfb::pipeline::pretrain_teacher(options);
    else if (cmd == "train_encoder") r = ulfb::pipeline::train_encoder(options);
    else if (cmd == "train") r = ulfb::pipeline::train(options);
    else if (cmd == "translate") r = ulfb::pipeline::translate(options);
    else if (cmd == "evaluate") r = ulfb::pipeline::evaluate(options);
    else if (cmd == "oracle_check") {
      r = ulfb::pipeline::oracle_check(options);
      oracle_failed = !r.at("passed").get<bool>();
    } else {
      ulfb::fail(ErrorCode::InvalidConfig, "unknown command '" + cmd + "'");
    }
    ctx->result = r.dump(2);
  });
  if (st == ULFB_OK && oracle_failed) {
    ctx->error = "one or more oracle checks failed";
    return ULFB_ERROR;
  }
  return st;
}

const char* ulfb_result(const ulfb_context* ctx) { return ctx ? ctx->result.c_str() : ""; }

ulfb_status ulfb_model_load(ulfb_context* ctx, const char* checkpoint_path, ulfb_model** out) {
  return guarded(ctx, [&] {
    require_ptr(checkpoint_path, "checkpoint_path");
    require_ptr(out, "out");
    *out = nullptr;
    auto m = std::make_unique<ulfb_model>();
    m->translator = std::make_unique<ulfb::train::Translator>(ulfb::ckpt::load_checkpoint(checkpoint_path));
    *out = m.release();
  });
}

void ulfb_model_destroy(ulfb_model* model) { delete model; }

int ulfb_model_steps(const ulfb_model* model) { return model ? model->translator->schedule().K : 0; }

ulfb_status ulfb_model_translate(ulfb_context* ctx, const ulfb_model* model, const float* input, int64_t n,
                                 int64_t size, float* output) {
  return guarded(ctx, [&] {
    require_ptr(model, "model");
    require_ptr(input, "input");
    require_ptr(output, "output");
    ulfb::require(n >= 1 && size >= 1, ErrorCode::InvalidConfig, "n and size must be positive");
    auto y = (*model->translator)(wrap(input, {n, 3, size, size})).contiguous();
    std::memcpy(output, y.data_ptr<float>(), sizeof(float) * y.numel());
  });
}

ulfb_status ulfb_psnr(ulfb_context* ctx, const float* a, const float* b, int64_t count, double max_val, double* out) {
  return guarded(ctx, [&] {
    require_ptr(a, "a");
    require_ptr(b, "b");
    require_ptr(out, "out");
    ulfb::require(count >= 1, ErrorCode::EmptyBatch, "count must be positive");
    *out = ulfb::metrics::psnr(wrap(a, {count}), wrap(b, {count}), max_val);
  });
}

ulfb_status ulfb_ms_ssim(ulfb_context* ctx, const float* a, const float* b, int64_t height, int64_t width,
                         double* out) {
  return guarded(ctx, [&] {
    require_ptr(a, "a");
    require_ptr(b, "b");
    require_ptr(out, "out");
    ulfb::require(height >= 1 && width >= 1, ErrorCode::InvalidConfig, "height and width must be positive");
    *out = ulfb::metrics::ms_ssim(wrap(a, {height, width}), wrap(b, {height, width}));
  });
}

ulfb_status ulfb_fid(ulfb_context* ctx, const double* fa, int64_t na, const double* fb, int64_t nb, int64_t dim,
                     double* out) {
  return guarded(ctx, [&] {
    require_ptr(fa, "fa");
    require_ptr(fb, "fb");
    require_ptr(out, "out");
    ulfb::require(na >= 2 && nb >= 2 && dim >= 1, ErrorCode::NeedSamples, "need at least 2 rows per set");
    *out = ulfb::metrics::fid(ulfb::metrics::feature_stats(wrap(fa, {na, dim})),
                              ulfb::metrics::feature_stats(wrap(fb, {nb, dim})));
  });
}

ulfb_status ulfb_kid(ulfb_context* ctx, const double* fa, int64_t na, const double* fb, int64_t nb, int64_t dim,
                     double* out) {
  return guarded(ctx, [&] {
    require_ptr(fa, "fa");
    require_ptr(fb, "fb");
    require_ptr(out, "out");
    ulfb::require(na >= 1 && nb >= 1 && dim >= 1, ErrorCode::NeedSamples, "feature sets must be non-empty");
    *out = ulfb::metrics::kid(wrap(fa, {na, dim}), wrap(fb, {nb, dim}));
  });
}

}  // extern "C"
