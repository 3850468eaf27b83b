#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "nucleiforge/domain_align.hpp"
#include "nucleiforge/model.hpp"

namespace nf {

struct AlignConfig {
  AlignMode mode = AlignMode::Cgrl;
  double lambda = 1.0;
  double warmup_frac = 0.0;  // fraction of steps over which lambda ramps up from 0
};

struct DataConfig {
  std::string manifest;  // empty: generate synthetic domains in memory
  int primary_id = 0;
  std::string primary = "primary";
  std::string auxiliary = "aux1,aux2,aux3";  // comma-separated presets, may be empty
  std::size_t primary_train = 16;
  std::size_t aux_train = 16;  // per auxiliary domain
  std::size_t val = 8;
  std::size_t test = 16;
  std::uint64_t seed = 7;

  std::vector<std::string> auxiliary_presets() const;
};

struct TrainConfig {
  std::size_t epochs = 30;
  double lr = 2e-4;              // reference rate at `lr_images` primary images
  std::size_t lr_images = 40;
  double decay = 0.98;
  std::size_t batch_size = 4;
  double primary_fraction = 0.5;
  double alpha = 1.0;
  double beta = 1.0;
  std::uint64_t seed = 0;
  double clip_norm = 5.0;  // 0 disables
  bool fine_on_primary_only = false;
  double threshold = 0.5;

  // Fitting of the frozen base model on the "pretrain" preset.
  std::size_t pretrain_images = 48;
  std::size_t pretrain_epochs = 3;
  double pretrain_lr = 2e-3;
  std::uint64_t pretrain_seed = 1234;
};

struct ExperimentConfig {
  ModelConfig model;
  AlignConfig align;
  DataConfig data;
  TrainConfig train;

  void validate() const;
};

/// Reflection over every configurable key, as "section.key".
struct ConfigField {
  std::string name;
  std::string help;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

const std::vector<ConfigField>& config_fields();

/// Sets one "section.key" from its string form; throws std::invalid_argument
/// for unknown keys or unparsable values.
void set_config_value(ExperimentConfig& config, const std::string& key, const std::string& value);
std::string get_config_value(const ExperimentConfig& config, const std::string& key);

/// `key = value` lines under `[section]` headers; '#' and ';' start comments.
ExperimentConfig parse_config(std::istream& in, const std::string& source = "<config>");
ExperimentConfig load_config(const std::filesystem::path& path);
void write_config(std::ostream& out, const ExperimentConfig& config);
void save_config(const std::filesystem::path& path, const ExperimentConfig& config);

/// Human-readable notes about override combinations that have no effect.
std::vector<std::string> config_warnings(const ExperimentConfig& config,
                                         const std::map<std::string, std::string>& overrides);

}  // namespace nf
