#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cap/config.hpp"
#include "cap/evaluation.hpp"

namespace cap {

inline constexpr const char* kToolkitVersion = CAP_VERSION;

struct InputFile {
  std::string identity;
  std::string file;
  std::string sha256;

  bool operator==(const InputFile&) const = default;
};

/// Everything needed to replay a run: config snapshot, input hashes, seeds.
struct RunManifest {
  std::string run_id;
  std::string command = "run";  // one of kCommands
  std::string variant;          // informational; already applied to `config`
  Config config;
  std::string data_root;
  std::string protected_root;  // evaluate only
  std::vector<InputFile> inputs;
  std::string base_model_sha256;
  std::map<std::string, std::uint64_t> seeds;
  std::vector<std::string> artifacts;  // relative to the run directory
  std::string created_at;
  std::string toolkit_version = kToolkitVersion;

  nlohmann::json to_json() const;
  static RunManifest from_json(const nlohmann::json& j);
  /// Pretty JSON with a trailing newline; parse(dump()).dump() == dump().
  std::string dump() const;
  static RunManifest parse(const std::string& text);
  static RunManifest load(const std::filesystem::path& path);
};

/// $CAP_RUN_ROOT, or "runs" under the working directory.
std::filesystem::path default_run_root();

/// Creates `root/<prefix>-<utc time>-<random hex>` exclusively; retries on collision.
std::filesystem::path create_run_dir(const std::filesystem::path& root, const std::string& prefix, std::string* run_id);

/// Identities under `data_root` (one per subdirectory, or the root itself).
std::vector<IdentityData> load_identities(const std::filesystem::path& data_root, int resolution,
                                          std::vector<InputFile>* inputs = nullptr, int bit_depth = 8);

/// Checkpoint named by a hash of the model, schedule and pretraining keys.
std::filesystem::path base_cache_path(const Config& c, const std::filesystem::path& cache_dir);

/// The configured checkpoint, the cached one, or a freshly pretrained base on a
/// synthetic pool (saved to the cache). Always returns the reloaded float32 model.
Denoiser load_or_pretrain_base(const Config& c, const std::filesystem::path& cache_dir,
                               std::filesystem::path* used = nullptr);

inline constexpr const char* kCommands[] = {"run", "protect", "personalize", "evaluate", "ablate", "sweep", "probe"};

struct RunOptions {
  std::string command = "run";
  std::string variant;
  bool variant_applied = false;  // `config` already carries the variant
  Config config;
  std::filesystem::path data_root;
  std::filesystem::path protected_root;  // evaluate: protected images, same layout as data_root
  std::filesystem::path run_root;   // empty: default_run_root()
  std::filesystem::path cache_dir;  // empty: <run_root>/cache
  bool dry_run = false;
  /// Expected input hashes and base model hash (replay); empty skips the check.
  std::vector<InputFile> expected_inputs;
  std::string expected_base_sha256;
};

struct RunRecord {
  std::filesystem::path dir;
  RunManifest manifest;
  std::optional<MetricReport> report;
  int exit_code = 0;
  std::string failed_stage;
  std::string error;
};

enum ExitCode : int {
  kExitOk = 0,
  kExitStage = 3,     // a pipeline stage failed
  kExitInput = 4,     // inputs differ from the manifest
  kExitInvariant = 5  // budget or file round-trip breach
};

/// Commands:
///   run          protect -> personalize (protected and clean control) -> evaluate
///   protect      protected images and traces only
///   personalize  train on data_root as given and generate
///   evaluate     personalize on protected_root, control on data_root, metrics
///   ablate / sweep / probe
/// Everything is written under a fresh run directory with a manifest.
RunRecord run_pipeline(const RunOptions& options);

/// Runs a stored manifest again into a new run directory, checking input hashes.
RunRecord replay_manifest(const std::filesystem::path& manifest_path, const std::filesystem::path& run_root = {},
                          const std::filesystem::path& cache_dir = {});

}  // namespace cap
