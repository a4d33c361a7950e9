#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dpa/dpo.hpp"
#include "dpa/hma.hpp"
#include "dpa/model.hpp"

namespace dpa {

/// Malformed, unknown or out-of-range configuration (exit code 1).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DataConfig {
  std::size_t classes = 20;
  std::size_t per_class = 24;
  double sigma = 40.0;
  double train_fraction = 0.5;
};

/// Prior training that stands in for a public pretrained backbone.
struct PretrainConfig {
  std::filesystem::path path;  // empty: bootstrap from disjoint identities
  std::size_t identities = 20;
  std::size_t per_class = 12;
  int epochs = 8;
};

struct VictimConfig {
  std::size_t per_class = 24;
  int epochs = 8;
};

struct EvalConfig {
  double far = 0.001;
  std::size_t pairs = 40;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::vector<int> c_grid{1, 2, 4, 8};
  std::vector<double> eta_grid{0.0, 1e-4, 8e-4, 1e-2, 1e-1};
};

struct RunConfig {
  std::uint64_t seed = 1;
  DataConfig data;
  BackboneSpec backbone;
  MarginSpec margin;
  TrainConfig train{.epochs = 8};
  PretrainConfig pretrain;
  VictimConfig victim;
  AttackConfig attack;
  EvalConfig eval;

  /// Throws ConfigError on the first violated constraint.
  void validate() const;
  nlohmann::json to_json() const;
};

/// INI text: `[section]` headers, `key = value` lines, `;` or `#` comments.
/// Lists are comma separated. Unknown sections or keys are rejected.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);

}  // namespace dpa
