#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "cap/attack.hpp"
#include "cap/diffusion.hpp"
#include "cap/evaluation.hpp"
#include "cap/personalization.hpp"
#include "cap/style.hpp"

namespace cap {

enum class ValueType { Int, Seed, Real, Text, Choice, RealList, IntList };

struct ConfigKey {
  std::string name;
  ValueType type;
  std::string default_value;
  std::string help;
  std::vector<std::string> choices;  // ValueType::Choice only
};

/// Every recognised key, in file order.
const std::vector<ConfigKey>& config_schema();

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Flat key = value configuration validated against config_schema().
class Config {
 public:
  /// All defaults.
  Config();

  /// Lines of `key = value`; '#' starts a comment. Unknown keys and badly
  /// typed values raise ConfigError with the line number.
  static Config parse(const std::string& text);
  static Config load(const std::filesystem::path& path);

  void set(const std::string& key, const std::string& value);
  /// Applies "key=value" overrides in order.
  void apply(const std::vector<std::string>& overrides);

  const std::string& get(const std::string& key) const;
  int get_int(const std::string& key) const;
  std::uint64_t get_seed(const std::string& key) const;
  double get_real(const std::string& key) const;
  std::vector<double> get_reals(const std::string& key) const;
  std::vector<int> get_ints(const std::string& key) const;

  const std::map<std::string, std::string>& values() const { return values_; }

  /// Canonical text form (schema order, one key per line); parse(to_text()) == *this.
  std::string to_text() const;
  nlohmann::json to_json() const;
  static Config from_json(const nlohmann::json& j);

  bool operator==(const Config& other) const { return values_ == other.values_; }

 private:
  std::map<std::string, std::string> values_;
};

DenoiserConfig denoiser_config(const Config& c);
ExtractorConfig extractor_config(const Config& c);
NoiseSchedule schedule_from(const Config& c);
AttackConfig attack_config(const Config& c);
PersonalizationConfig personalization_config(const Config& c);
PersonalizationConfig pretrain_config(const Config& c);

/// "desk" (the defaults) or "paper": large-model resolution, steps and rate.
void apply_profile(Config& c, const std::string& profile);

/// Rewrites the attack keys for a named variant (see cap::apply_variant).
void apply_variant(Config& c, const std::string& variant);
std::vector<std::string> ablation_variants(const Config& c);
MarkerSpec marker_spec(const Config& c);

/// Experiment for `base`, reseeded from the "seed" key.
Experiment experiment_from(const Config& c, Denoiser base);

}  // namespace cap
