#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace ulfb::io {

// Header-free little-endian float32, row-major.
void write_f32(const std::filesystem::path& path, const torch::Tensor& t);
torch::Tensor read_f32(const std::filesystem::path& path, std::vector<std::int64_t> shape);

std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace ulfb::io
