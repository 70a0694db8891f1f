#include "maxstyle/experiment.hpp"

#include <fstream>

#include "maxstyle/errors.hpp"
#include "maxstyle/hash.hpp"

namespace maxstyle {

nlohmann::json ExperimentConfig::to_json() const {
  return {{"corpus", maxstyle::to_json(corpus)}, {"train", maxstyle::to_json(train)}, {"out_dir", out_dir}};
}

std::string ExperimentConfig::canonical() const {
  nlohmann::json j = to_json();
  j.erase("out_dir");
  return j.dump();
}

std::string ExperimentConfig::hash() const { return sha256_hex(canonical()); }

ExperimentConfig experiment_from_json(const nlohmann::json& j, const std::string& preset_override) {
  if (!j.is_object()) throw ConfigurationError("config: expected a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (key != "corpus" && key != "train" && key != "out_dir") {
      throw ConfigurationError("config: unknown key '" + key + "'");
    }
  }
  ExperimentConfig cfg;
  if (j.contains("corpus")) cfg.corpus = corpus_spec_from_json(j.at("corpus"));
  std::string preset_name = preset_override;
  if (preset_name.empty() && j.contains("train") && j.at("train").is_object() && j.at("train").contains("preset")) {
    preset_name = j.at("train").at("preset").get<std::string>();
  }
  TrainConfig base = preset_name.empty() || preset_name == "custom" ? TrainConfig{} : preset(preset_name);
  if (j.contains("train")) {
    nlohmann::json t = j.at("train");
    if (!preset_override.empty() && t.is_object()) t["preset"] = preset_override;
    cfg.train = train_config_from_json(t, base);
  } else {
    cfg.train = base;
  }
  if (j.contains("out_dir")) {
    if (!j.at("out_dir").is_string()) throw ConfigurationError("config: out_dir must be a string");
    cfg.out_dir = j.at("out_dir").get<std::string>();
  }
  return cfg;
}

ExperimentConfig load_experiment(const std::filesystem::path& path, const std::string& preset_override) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigurationError("config " + path.string() + ": " + e.what());
  }
  return experiment_from_json(j, preset_override);
}

}  // namespace maxstyle
