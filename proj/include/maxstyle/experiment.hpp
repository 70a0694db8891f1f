#pragma once

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "maxstyle/synthdata.hpp"
#include "maxstyle/training.hpp"

namespace maxstyle {

/// A config file: {"corpus": {...}, "train": {...}, "out_dir": "..."}.
/// Every section is optional; missing keys take their defaults.
struct ExperimentConfig {
  CorpusSpec corpus;
  TrainConfig train;
  std::string out_dir = "out";

  /// Fully populated document, defaults included.
  nlohmann::json to_json() const;
  /// Canonical text (sorted keys, no whitespace) of the hashed part, which
  /// leaves out out_dir so the hash follows content rather than location.
  std::string canonical() const;
  std::string hash() const;
};

/// `train` keys are applied on top of the named preset when the config (or
/// `preset_override`) names one.
ExperimentConfig experiment_from_json(const nlohmann::json& j, const std::string& preset_override = "");
ExperimentConfig load_experiment(const std::filesystem::path& path, const std::string& preset_override = "");

}  // namespace maxstyle
