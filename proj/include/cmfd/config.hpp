#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>

#include "cmfd/augment.hpp"
#include "cmfd/model.hpp"
#include "cmfd/synth.hpp"
#include "cmfd/train.hpp"
#include "json.hpp"

namespace cmfd {

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

using Json = nlohmann::ordered_json;

// Readers are strict: unknown keys and wrongly typed values throw
// ConfigError; absent keys keep the values of `defaults`.
Json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j, const ModelConfig& defaults = {});

Json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j, const TrainConfig& defaults = {});

Json to_json(const DatasetSpec& c);
DatasetSpec dataset_spec_from_json(const nlohmann::json& j, const DatasetSpec& defaults = {});

Json to_json(const AugmentConfig& c);
AugmentConfig augment_config_from_json(const nlohmann::json& j, const AugmentConfig& defaults = {});

Json manifest_to_json(const Manifest& m);
Manifest manifest_from_json(const nlohmann::json& j);

struct CliConfig {
  ModelConfig model;
  TrainConfig train;
  DatasetSpec data;
  AugmentConfig augment;
  std::string data_dir;
  std::string out_dir;

  void validate() const;
};

// Small model, 64 x 64 synthetic data, 200 optimizer steps.
CliConfig desk_defaults();

Json to_json(const CliConfig& c);
CliConfig cli_config_from_json(const nlohmann::json& j, const CliConfig& defaults = desk_defaults());
CliConfig load_cli_config(const std::filesystem::path& path);

}  // namespace cmfd
