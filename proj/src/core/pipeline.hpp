#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include "core/checkpoint.hpp"
#include "core/diffusion.hpp"
#include "core/metrics.hpp"

namespace ulfb::pipeline {

/// Role-tagged teacher checkpoints (kind "score_model").
ckpt::Checkpoint teacher_checkpoint(const diffusion::ScoreModel& model, const diffusion::TeacherConfig& config);
/// Frozen teacher; IncompatibleCheckpoint unless the role is teacher_real.
diffusion::ScoreModel load_teacher(const std::filesystem::path& path);

ckpt::Checkpoint encoder_checkpoint(metrics::FeatureEncoder& encoder, const metrics::EncoderConfig& config);
metrics::FeatureEncoder load_encoder(const std::filesystem::path& path);

// Commands. Options and results are JSON objects; unknown option keys raise
// InvalidConfig.

/// {out, subjects, slices, size, seed, paired_test, degradation?} -> {manifest, subjects, slices}
nlohmann::ordered_json make_data(const nlohmann::json& options);

/// {data, out, steps, batch, lr, seed, base_width} -> {checkpoint, role, final_loss}
nlohmann::ordered_json pretrain_teacher(const nlohmann::json& options);

/// {data, out, steps, batch, seed} -> {checkpoint, final_loss}
nlohmann::ordered_json train_encoder(const nlohmann::json& options);

/// {data, teacher, out, config, resume?, stop_at?} -> {final_checkpoint, global_step, ...}
nlohmann::ordered_json train(const nlohmann::json& options);

/// {ckpt | identity, input, cohort?, size?, out} -> {outputs, count}
nlohmann::ordered_json translate(const nlohmann::json& options);

/// {ckpt | identity, data, mode, encoder?, clean_inputs?, out?} -> report
nlohmann::ordered_json evaluate(const nlohmann::json& options);

/// {suite, seed} -> {passed, checks}
nlohmann::ordered_json oracle_check(const nlohmann::json& options);

}  // namespace ulfb::pipeline
