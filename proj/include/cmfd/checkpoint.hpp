#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cmfd/model.hpp"

namespace cmfd {

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Layout, little endian:
//   "CMFD" | u32 version | u32 n + n bytes of ModelConfig JSON | u32 count |
//   count x (u32 n + name | u32 rank | rank x u32 dim | f32 data)
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig config;
  std::vector<std::pair<std::string, Tensor<float>>> tensors;
};

std::vector<std::uint8_t> serialize_checkpoint(const ModelConfig& config, const ParamStore<float>& params);
Checkpoint parse_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const std::filesystem::path& path, const Model<float>& model);
Checkpoint read_checkpoint(const std::filesystem::path& path);

// Copies tensors into `model`; names and shapes must match exactly.
void load_parameters(Model<float>& model, const Checkpoint& ckpt);

// Builds a model from the embedded config and loads its parameters.
std::unique_ptr<Model<float>> load_model(const std::filesystem::path& path);

}  // namespace cmfd
