#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

namespace gmsrm {

inline constexpr char kCheckpointMagic[] = "GMSRM1";

// On disk: the 6-byte magic "GMSRM1", a little-endian u64 header length, a
// JSON header {"meta": ..., "tensors": [{name, dtype, shape, offset, nbytes}]}
// and the raw little-endian tensor bytes in name order. Serialization is
// deterministic, so save(load(save(x))) reproduces the same bytes.
struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, torch::Tensor> tensors;
};

std::vector<uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::vector<uint8_t>& bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Copies parameters and buffers of `module` into `out` as "<prefix><name>".
void export_module(const torch::nn::Module& module, const std::string& prefix,
                   std::map<std::string, torch::Tensor>& out);

// Copies tensors named "<prefix><name>" into the module's parameters and
// buffers. With `strict`, every module tensor must be present; shape
// mismatches always throw ConfigError. Returns the number of tensors loaded.
size_t import_module(torch::nn::Module& module, const std::string& prefix,
                     const std::map<std::string, torch::Tensor>& tensors, bool strict = true);

}  // namespace gmsrm
