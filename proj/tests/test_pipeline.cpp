#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

#include "cap/dataset.hpp"
#include "cap/hashing.hpp"
#include "cap/image_io.hpp"
#include "cap/pipeline.hpp"
#include "test_support.hpp"

using namespace cap;
using cap::testing::TempDir;
namespace fs = std::filesystem;

namespace {

Config tiny_config() { return Config::load(fs::path(CAP_TEST_DATA_DIR) / "tiny.cfg"); }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::set<std::string> listing(const fs::path& root) {
  std::set<std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) out.insert(fs::relative(e.path(), root).generic_string());
  return out;
}

RunOptions options(const TempDir& t, const std::string& command = "run") {
  RunOptions o;
  o.command = command;
  o.config = tiny_config();
  o.data_root = t / "data";
  o.run_root = t / "runs";
  return o;
}

// Every artifact except the manifest and status is compared byte for byte.
void check_identical_artifacts(const RunRecord& a, const RunRecord& b) {
  REQUIRE(a.manifest.artifacts == b.manifest.artifacts);
  for (const auto& rel : a.manifest.artifacts) {
    INFO(rel);
    CHECK(slurp(a.dir / rel) == slurp(b.dir / rel));
  }
}

}  // namespace

TEST_CASE("manifest serialization round trips byte for byte") {
  RunManifest m;
  m.run_id = "run-x";
  m.command = "sweep";
  m.variant = "Static_Ratio=20";
  m.config = tiny_config();
  m.data_root = "/data/faces";
  m.inputs = {{"id_00", "id_00/a.png", std::string(64, 'a')}, {"id_01", "id_01/b.png", std::string(64, 'b')}};
  m.base_model_sha256 = std::string(64, 'c');
  m.seeds = {{"seed", 18446744073709551615ull}, {"attack", 3}};
  m.artifacts = {"sweep.tsv"};
  m.created_at = "2026-01-01T00:00:00Z";
  const std::string text = m.dump();
  CHECK(RunManifest::parse(text).dump() == text);
  CHECK(RunManifest::parse(text).config == m.config);
  CHECK(RunManifest::parse(text).seeds.at("seed") == 18446744073709551615ull);
  CHECK(text.back() == '\n');
  CHECK_THROWS(RunManifest::parse("{}"));
  CHECK_THROWS(RunManifest::parse("not json"));
}

TEST_CASE("run directories are unique under concurrent creation") {
  TempDir t("rundirs");
  std::vector<std::string> ids(32);
  std::vector<std::thread> threads;
  for (int i = 0; i < 32; ++i) threads.emplace_back([&, i] { create_run_dir(t.path(), "run", &ids[i]); });
  for (auto& th : threads) th.join();
  CHECK(std::set<std::string>(ids.begin(), ids.end()).size() == 32);
  for (const auto& id : ids) CHECK(fs::is_directory(t / id));
}

TEST_CASE("run root comes from the environment") {
  const char* old = std::getenv("CAP_RUN_ROOT");
  const std::string saved = old ? old : "";
  ::setenv("CAP_RUN_ROOT", "/tmp/somewhere", 1);
  CHECK(default_run_root() == fs::path("/tmp/somewhere"));
  ::unsetenv("CAP_RUN_ROOT");
  CHECK(default_run_root() == fs::path("runs"));
  if (old) ::setenv("CAP_RUN_ROOT", saved.c_str(), 1);
}

TEST_CASE("dry run validates, writes the manifest and nothing else") {
  TempDir t("dry");
  synth_dataset(t / "data", 2, 2, 4, 16);
  RunOptions o = options(t);
  o.dry_run = true;
  const RunRecord r = run_pipeline(o);
  CHECK(r.exit_code == kExitOk);
  CHECK(listing(r.dir) == std::set<std::string>{"manifest.json", "status.json"});
  CHECK(!fs::exists(t / "runs" / "cache"));
  const RunManifest m = RunManifest::load(r.dir / "manifest.json");
  CHECK(m.inputs.size() == 4);
  CHECK(m.inputs[0].sha256 == sha256_file(t / "data" / "id_00" / "img_00.png"));
  CHECK(m.dump() == slurp(r.dir / "manifest.json"));
  CHECK(m.config == tiny_config());

  o.config.set("attack.alpha", "0");
  CHECK_THROWS(run_pipeline(o));
  o = options(t, "bogus");
  CHECK_THROWS_AS(run_pipeline(o), ConfigError);
  o = options(t, "evaluate");
  CHECK_THROWS_AS(run_pipeline(o), ConfigError);
  o = options(t);
  o.config.set("resolution", "18");
  CHECK_THROWS_AS(run_pipeline(o), ConfigError);
}

TEST_CASE("a manifest replays to identical images and metric files") {
  TempDir t("replay");
  synth_dataset(t / "data", 2, 3, 4, 16);
  const RunRecord first = run_pipeline(options(t));
  REQUIRE(first.exit_code == kExitOk);
  REQUIRE(first.report.has_value());
  const auto files = listing(first.dir);
  CHECK(files.count("metrics.tsv") == 1);
  CHECK(files.count("protected/id_01/img_02.png") == 1);
  CHECK(files.count("identities/id_00/trace.jsonl") == 1);
  CHECK(files.count("identities/id_00/train_loss.png") == 1);
  CHECK(RunManifest::load(first.dir / "manifest.json").dump() == slurp(first.dir / "manifest.json"));

  const RunRecord second = replay_manifest(first.dir / "manifest.json", t / "runs");
  REQUIRE(second.exit_code == kExitOk);
  CHECK(second.dir != first.dir);
  CHECK(second.manifest.base_model_sha256 == first.manifest.base_model_sha256);
  check_identical_artifacts(first, second);

  SUBCASE("stored protected images reproduce the metrics through evaluate") {
    RunOptions o = options(t, "evaluate");
    o.protected_root = first.dir / "protected";
    const RunRecord ev = run_pipeline(o);
    REQUIRE(ev.exit_code == kExitOk);
    CHECK(slurp(ev.dir / "metrics.json") == slurp(first.dir / "metrics.json"));
  }
  SUBCASE("changed inputs are refused") {
    write_png(t / "data" / "id_00" / "img_00.png", Tensor({3, 16, 16}, 0.5), 8);
    const RunRecord r = replay_manifest(first.dir / "manifest.json", t / "runs");
    CHECK(r.exit_code == kExitInput);
    CHECK(r.failed_stage == "inputs");
  }
}

TEST_CASE("variants are applied before the config snapshot") {
  TempDir t("variant");
  synth_dataset(t / "data", 1, 2, 4, 16);
  RunOptions o = options(t);
  o.variant = "Static_Ratio=40";
  o.dry_run = true;
  const RunRecord r = run_pipeline(o);
  CHECK(r.manifest.variant == "Static_Ratio=40");
  CHECK(r.manifest.config.get("attack.ratio_mode") == "static");
  CHECK(r.manifest.config.get_real("attack.static_ratio") == 40.0);
}

TEST_CASE("a failing stage is named in the record and the status file") {
  TempDir t("fail");
  synth_dataset(t / "data", 1, 2, 4, 16);
  RunOptions o = options(t);
  o.config.set("train.lr", "1e30");
  const RunRecord r = run_pipeline(o);
  CHECK(r.exit_code == kExitStage);
  CHECK(r.failed_stage == "control");
  CHECK(slurp(r.dir / "status.json").find("\"stage\": \"control\"") != std::string::npos);
  CHECK(fs::exists(r.dir / "manifest.json"));
}

TEST_CASE("the base model is pretrained once and then read from the cache") {
  TempDir t("cache");
  Config c = tiny_config();
  fs::path used;
  const Denoiser a = load_or_pretrain_base(c, t / "cache", &used);
  const auto stamp = fs::last_write_time(used);
  const std::string hash = sha256_file(used);
  fs::path again;
  const Denoiser b = load_or_pretrain_base(c, t / "cache", &again);
  CHECK(again == used);
  CHECK(fs::last_write_time(again) == stamp);
  CHECK(sha256_file(again) == hash);
  c.set("pretrain.steps", "21");
  CHECK(base_cache_path(c, t / "cache") != used);
  c = tiny_config();
  c.set("model.checkpoint", used.string());
  fs::path explicit_path;
  load_or_pretrain_base(c, t / "other", &explicit_path);
  CHECK(explicit_path == used);
  CHECK(!fs::exists(t / "other"));
}

TEST_CASE("sweep, probe and ablate write their tables") {
  TempDir t("commands");
  synth_dataset(t / "data", 1, 2, 4, 16);
  RunOptions o = options(t, "sweep");
  RunRecord r = run_pipeline(o);
  REQUIRE(r.exit_code == kExitOk);
  CHECK(fs::exists(r.dir / "sweep.tsv"));
  CHECK(fs::exists(r.dir / "sweep_loss.png"));
  o = options(t, "probe");
  r = run_pipeline(o);
  REQUIRE(r.exit_code == kExitOk);
  CHECK(slurp(r.dir / "probe.tsv").rfind("identity\tconsistent\tinconsistent\tgap\n", 0) == 0);
  o = options(t, "ablate");
  o.config.set("ablate.variants", "none,style");
  r = run_pipeline(o);
  REQUIRE(r.exit_code == kExitOk);
  const std::string tsv = slurp(r.dir / "ablation.tsv");
  CHECK(tsv.find("none") != std::string::npos);
  CHECK(tsv.find("style") != std::string::npos);
}
