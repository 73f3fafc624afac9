#include "core/tensor_io.hpp"

#include <bit>
#include <fstream>
#include <numeric>
#include <sstream>

#include "core/error.hpp"

namespace ulfb::io {

static_assert(std::endian::native == std::endian::little, "slice files are little-endian");

void write_f32(const std::filesystem::path& path, const torch::Tensor& t) {
  auto data = t.detach().to(torch::kFloat32).contiguous();
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) fail(ErrorCode::IoError, "cannot open for writing: " + path.string());
  os.write(reinterpret_cast<const char*>(data.data_ptr<float>()),
           static_cast<std::streamsize>(data.numel() * sizeof(float)));
  if (!os) fail(ErrorCode::IoError, "write failed: " + path.string());
}

torch::Tensor read_f32(const std::filesystem::path& path, std::vector<std::int64_t> shape) {
  const auto count = std::accumulate(shape.begin(), shape.end(), std::int64_t{1}, std::multiplies<>());
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorCode::IoError, "cannot open: " + path.string());
  is.seekg(0, std::ios::end);
  const auto bytes = static_cast<std::int64_t>(is.tellg());
  if (bytes != count * static_cast<std::int64_t>(sizeof(float)))
    fail(ErrorCode::IoError, path.string() + ": expected " + std::to_string(count * 4) + " bytes, found " +
                                 std::to_string(bytes));
  is.seekg(0);
  auto out = torch::empty(shape, torch::kFloat32);
  is.read(reinterpret_cast<char*>(out.data_ptr<float>()), bytes);
  if (!is) fail(ErrorCode::IoError, "read failed: " + path.string());
  return out;
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorCode::IoError, "cannot open: " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) fail(ErrorCode::IoError, "cannot open for writing: " + path.string());
  os << text;
  if (!os) fail(ErrorCode::IoError, "write failed: " + path.string());
}

}  // namespace ulfb::io
