#include "gmsrm/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "gmsrm/errors.hpp"

namespace gmsrm {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

constexpr size_t kMagicLen = sizeof(kCheckpointMagic) - 1;

std::string dtype_name(torch::ScalarType t) {
  switch (t) {
    case torch::kFloat32: return "f32";
    case torch::kFloat64: return "f64";
    case torch::kInt64: return "i64";
    case torch::kUInt8: return "u8";
    default: throw InvalidInput(std::string("checkpoint: unsupported dtype ") + c10::toString(t));
  }
}

torch::ScalarType dtype_from_name(const std::string& s) {
  if (s == "f32") return torch::kFloat32;
  if (s == "f64") return torch::kFloat64;
  if (s == "i64") return torch::kInt64;
  if (s == "u8") return torch::kUInt8;
  throw InvalidInput("checkpoint: unknown dtype " + s);
}

void import_one(const std::string& name, torch::Tensor& target, const std::map<std::string, torch::Tensor>& tensors,
                bool strict, size_t& loaded) {
  auto it = tensors.find(name);
  if (it == tensors.end()) {
    if (strict) throw ConfigError("checkpoint is missing tensor " + name);
    return;
  }
  if (it->second.sizes() != target.sizes()) {
    throw ConfigError("checkpoint tensor " + name + " has an incompatible shape");
  }
  torch::NoGradGuard no_grad;
  target.copy_(it->second);
  ++loaded;
}

}  // namespace

std::vector<uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
  nlohmann::json manifest = nlohmann::json::array();
  std::vector<torch::Tensor> blobs;
  uint64_t offset = 0;
  for (const auto& [name, tensor] : ckpt.tensors) {
    auto t = tensor.detach().to(torch::kCPU).contiguous();
    const uint64_t nbytes = t.numel() * t.element_size();
    manifest.push_back({{"name", name},
                        {"dtype", dtype_name(t.scalar_type())},
                        {"shape", t.sizes().vec()},
                        {"offset", offset},
                        {"nbytes", nbytes}});
    offset += nbytes;
    blobs.push_back(t);
  }
  const std::string header = nlohmann::json{{"meta", ckpt.meta}, {"tensors", manifest}}.dump();

  std::vector<uint8_t> out;
  out.reserve(kMagicLen + 8 + header.size() + offset);
  out.insert(out.end(), kCheckpointMagic, kCheckpointMagic + kMagicLen);
  const uint64_t header_len = header.size();
  const auto* len_bytes = reinterpret_cast<const uint8_t*>(&header_len);
  out.insert(out.end(), len_bytes, len_bytes + 8);
  out.insert(out.end(), header.begin(), header.end());
  for (const auto& t : blobs) {
    const auto* p = static_cast<const uint8_t*>(t.data_ptr());
    out.insert(out.end(), p, p + t.numel() * t.element_size());
  }
  return out;
}

Checkpoint deserialize_checkpoint(const std::vector<uint8_t>& bytes) {
  if (bytes.size() < kMagicLen + 8 || std::memcmp(bytes.data(), kCheckpointMagic, kMagicLen) != 0) {
    throw InvalidInput("not a GMSRM1 checkpoint");
  }
  uint64_t header_len = 0;
  std::memcpy(&header_len, bytes.data() + kMagicLen, 8);
  const size_t data_start = kMagicLen + 8 + header_len;
  if (data_start > bytes.size()) throw InvalidInput("checkpoint header is truncated");
  const std::string header(bytes.begin() + kMagicLen + 8, bytes.begin() + static_cast<std::ptrdiff_t>(data_start));

  nlohmann::json j;
  try {
    j = nlohmann::json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInput(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  Checkpoint ckpt;
  ckpt.meta = j.value("meta", nlohmann::json::object());
  for (const auto& entry : j.at("tensors")) {
    const auto name = entry.at("name").get<std::string>();
    const auto dtype = dtype_from_name(entry.at("dtype").get<std::string>());
    const auto shape = entry.at("shape").get<std::vector<int64_t>>();
    const auto offset = entry.at("offset").get<uint64_t>();
    const auto nbytes = entry.at("nbytes").get<uint64_t>();
    if (data_start + offset + nbytes > bytes.size()) throw InvalidInput("checkpoint tensor " + name + " is truncated");
    auto t = torch::empty(shape, torch::TensorOptions().dtype(dtype));
    if (static_cast<uint64_t>(t.numel() * t.element_size()) != nbytes) {
      throw InvalidInput("checkpoint tensor " + name + " has inconsistent size");
    }
    std::memcpy(t.data_ptr(), bytes.data() + data_start + offset, nbytes);
    ckpt.tensors.emplace(name, t);
  }
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(ckpt);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write checkpoint: " + path.string());
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("short write on checkpoint: " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read checkpoint: " + path.string());
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

void export_module(const torch::nn::Module& module, const std::string& prefix,
                   std::map<std::string, torch::Tensor>& out) {
  for (const auto& p : module.named_parameters(/*recurse=*/true)) out[prefix + p.key()] = p.value().detach().clone();
  for (const auto& b : module.named_buffers(/*recurse=*/true)) out[prefix + b.key()] = b.value().detach().clone();
}

size_t import_module(torch::nn::Module& module, const std::string& prefix,
                     const std::map<std::string, torch::Tensor>& tensors, bool strict) {
  size_t loaded = 0;
  for (auto& p : module.named_parameters(/*recurse=*/true)) import_one(prefix + p.key(), p.value(), tensors, strict, loaded);
  for (auto& b : module.named_buffers(/*recurse=*/true)) import_one(prefix + b.key(), b.value(), tensors, strict, loaded);
  return loaded;
}

}  // namespace gmsrm
