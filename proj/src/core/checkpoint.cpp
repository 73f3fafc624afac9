#include "core/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <sstream>

#include "core/error.hpp"
#include "core/tensor_io.hpp"

namespace ulfb::ckpt {

static_assert(std::endian::native == std::endian::little, "checkpoint payload assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'U', 'L', 'F', 'B', 'C', 'K', 'P', 'T'};
const char* const kReserved[] = {"version", "arrays", "checksum"};

std::string dtype_name(torch::ScalarType t) {
  switch (t) {
    case torch::kFloat32: return "f32";
    case torch::kFloat64: return "f64";
    case torch::kInt64: return "i64";
    default: fail(ErrorCode::InvalidConfig, "unsupported checkpoint dtype");
  }
}

torch::ScalarType dtype_from(const std::string& s) {
  if (s == "f32") return torch::kFloat32;
  if (s == "f64") return torch::kFloat64;
  if (s == "i64") return torch::kInt64;
  fail(ErrorCode::CorruptCheckpoint, "unknown dtype '" + s + "'");
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001B3ull;
  }
  return h;
}

void Checkpoint::put(const std::string& name, const torch::Tensor& t) {
  auto value = t.detach().contiguous().clone();
  for (auto& [n, v] : arrays) {
    if (n == name) {
      v = value;
      return;
    }
  }
  arrays.emplace_back(name, value);
}

bool Checkpoint::has(const std::string& name) const {
  for (const auto& [n, v] : arrays)
    if (n == name) return true;
  return false;
}

const torch::Tensor& Checkpoint::get(const std::string& name) const {
  for (const auto& [n, v] : arrays)
    if (n == name) return v;
  fail(ErrorCode::CorruptCheckpoint, "checkpoint has no array '" + name + "'");
}

std::string serialize(const Checkpoint& c) {
  nlohmann::ordered_json header;
  header["version"] = kFormatVersion;
  for (const auto& [k, v] : c.meta.items()) {
    for (const char* r : kReserved) require(k != r, ErrorCode::InvalidConfig, "metadata key '" + k + "' is reserved");
    header[k] = v;
  }
  std::string payload;
  nlohmann::ordered_json index = nlohmann::ordered_json::array();
  for (const auto& [name, t] : c.arrays) {
    auto v = t.contiguous();
    const std::size_t nbytes = v.numel() * v.element_size();
    index.push_back({{"name", name}, {"dtype", dtype_name(v.scalar_type())}, {"shape", v.sizes().vec()},
                     {"offset", payload.size()}, {"nbytes", nbytes}});
    payload.append(static_cast<const char*>(v.data_ptr()), nbytes);
  }
  header["arrays"] = index;
  header["checksum"] = hex64(fnv1a64(payload.data(), payload.size()));
  const std::string h = header.dump();
  const std::uint64_t hlen = h.size();
  std::string out(kMagic, sizeof kMagic);
  out.append(reinterpret_cast<const char*>(&hlen), sizeof hlen);
  out += h;
  out += payload;
  return out;
}

Checkpoint deserialize(const std::string& bytes) {
  constexpr std::size_t prefix = sizeof kMagic + sizeof(std::uint64_t);
  require(bytes.size() >= prefix && std::memcmp(bytes.data(), kMagic, sizeof kMagic) == 0,
          ErrorCode::CorruptCheckpoint, "not a checkpoint file");
  std::uint64_t hlen = 0;
  std::memcpy(&hlen, bytes.data() + sizeof kMagic, sizeof hlen);
  require(hlen <= bytes.size() - prefix, ErrorCode::CorruptCheckpoint, "truncated header");
  nlohmann::ordered_json header;
  try {
    header = nlohmann::ordered_json::parse(bytes.substr(prefix, hlen));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::CorruptCheckpoint, std::string("unreadable header: ") + e.what());
  }
  require(header.is_object() && header.contains("version") && header["version"].is_number_integer(),
          ErrorCode::CorruptCheckpoint, "header lacks a version");
  const int version = header["version"].get<int>();
  require(version == kFormatVersion, ErrorCode::IncompatibleCheckpoint,
          "checkpoint version " + std::to_string(version) + ", expected " + std::to_string(kFormatVersion));

  const std::string payload = bytes.substr(prefix + hlen);
  try {
    require(header.at("checksum").get<std::string>() == hex64(fnv1a64(payload.data(), payload.size())),
            ErrorCode::CorruptCheckpoint, "payload checksum mismatch");
    Checkpoint c;
    for (const auto& a : header.at("arrays")) {
      const auto shape = a.at("shape").get<std::vector<int64_t>>();
      const auto offset = a.at("offset").get<std::size_t>();
      const auto nbytes = a.at("nbytes").get<std::size_t>();
      auto t = torch::empty(shape, torch::TensorOptions().dtype(dtype_from(a.at("dtype").get<std::string>())));
      require(offset + nbytes <= payload.size() && nbytes == static_cast<std::size_t>(t.numel() * t.element_size()),
              ErrorCode::CorruptCheckpoint, "array '" + a.at("name").get<std::string>() + "' out of bounds");
      std::memcpy(t.data_ptr(), payload.data() + offset, nbytes);
      c.arrays.emplace_back(a.at("name").get<std::string>(), t);
    }
    for (const auto& [k, v] : header.items()) {
      if (k != "version" && k != "arrays" && k != "checksum") c.meta[k] = v;
    }
    return c;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::CorruptCheckpoint, std::string("malformed array index: ") + e.what());
  }
}

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  // Write then rename so a crash never leaves a half-written checkpoint.
  auto tmp = path;
  tmp += ".tmp";
  io::write_text(tmp, serialize(c));
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  require(!ec, ErrorCode::IoError, "cannot rename " + tmp.string() + ": " + ec.message());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return deserialize(io::read_text(path)); }

void store_module(Checkpoint& c, const std::string& prefix, const torch::nn::Module& m) {
  for (const auto& item : m.named_parameters()) c.put(prefix + "/" + item.key(), item.value());
  for (const auto& item : m.named_buffers()) c.put(prefix + "/" + item.key(), item.value());
}

void restore_module(const Checkpoint& c, const std::string& prefix, torch::nn::Module& m) {
  torch::NoGradGuard no_grad;
  auto assign = [&](const std::string& key, torch::Tensor& dst) {
    const auto& src = c.get(prefix + "/" + key);
    require(src.sizes() == dst.sizes(), ErrorCode::ShapeError, "shape mismatch for " + prefix + "/" + key);
    dst.copy_(src);
  };
  for (auto& item : m.named_parameters()) assign(item.key(), item.value());
  for (auto& item : m.named_buffers()) assign(item.key(), item.value());
}

void store_adam(Checkpoint& c, const std::string& prefix, torch::optim::Adam& opt) {
  auto& state = opt.state();
  int64_t idx = 0;
  for (const auto& group : opt.param_groups()) {
    for (const auto& p : group.params()) {
      const std::string base = prefix + "/" + std::to_string(idx++);
      auto it = state.find(p.unsafeGetTensorImpl());
      if (it == state.end()) continue;
      const auto& s = static_cast<const torch::optim::AdamParamState&>(*it->second);
      c.put(base + "/step", torch::tensor(s.step(), torch::kInt64));
      c.put(base + "/exp_avg", s.exp_avg());
      c.put(base + "/exp_avg_sq", s.exp_avg_sq());
    }
  }
}

void restore_adam(const Checkpoint& c, const std::string& prefix, torch::optim::Adam& opt) {
  auto& state = opt.state();
  int64_t idx = 0;
  for (const auto& group : opt.param_groups()) {
    for (const auto& p : group.params()) {
      const std::string base = prefix + "/" + std::to_string(idx++);
      if (!c.has(base + "/step")) {
        state.erase(p.unsafeGetTensorImpl());
        continue;
      }
      auto s = std::make_unique<torch::optim::AdamParamState>();
      s->step(c.get(base + "/step").item<int64_t>());
      s->exp_avg(c.get(base + "/exp_avg").clone());
      s->exp_avg_sq(c.get(base + "/exp_avg_sq").clone());
      require(s->exp_avg().sizes() == p.sizes(), ErrorCode::ShapeError, "optimizer state shape mismatch at " + base);
      state[p.unsafeGetTensorImpl()] = std::move(s);
    }
  }
}

}  // namespace ulfb::ckpt
