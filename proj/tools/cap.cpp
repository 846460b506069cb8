#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "cap/config.hpp"
#include "cap/dataset.hpp"
#include "cap/log.hpp"
#include "cap/pipeline.hpp"

namespace fs = std::filesystem;

namespace {

struct ConfigFlags {
  std::string file;
  std::string profile = "desk";
  std::vector<std::string> overrides;

  void add(CLI::App* app) {
    app->add_option("-c,--config", file, "key = value config file")->check(CLI::ExistingFile);
    app->add_option("--profile", profile, "desk (default) or paper");
    app->add_option("-s,--set", overrides, "key=value override, applied after the file (repeatable)");
  }

  cap::Config build() const {
    cap::Config c = file.empty() ? cap::Config() : cap::Config::load(file);
    cap::apply_profile(c, profile);
    c.apply(overrides);
    return c;
  }
};

struct RunFlags {
  ConfigFlags config;
  std::string data;
  std::string protected_root;
  std::string variant;
  std::string run_root;
  std::string cache;
  bool dry_run = false;

  void add(CLI::App* app, bool needs_protected) {
    config.add(app);
    app->add_option("-d,--data", data, "clean image root: one subdirectory per identity, or one identity")
        ->required()
        ->check(CLI::ExistingDirectory);
    if (needs_protected) {
      app->add_option("-p,--protected", protected_root, "protected image root, same layout as --data")
          ->required()
          ->check(CLI::ExistingDirectory);
    }
    app->add_option("--variant", variant, "none, style, content, CAP or Static_Ratio=<r>");
    app->add_option("--run-root", run_root, "run directory root (default $CAP_RUN_ROOT or ./runs)");
    app->add_option("--cache", cache, "base model cache (default <run-root>/cache)");
    app->add_flag("--dry-run", dry_run, "validate and write the manifest only");
  }
};

int finish(const cap::RunRecord& r) {
  std::cout << r.dir.string() << "\n";
  if (r.exit_code != cap::kExitOk) std::cerr << "failed at " << r.failed_stage << ": " << r.error << "\n";
  return r.exit_code;
}

void print_file(const fs::path& p) {
  std::ifstream in(p);
  std::cout << "== " << p.filename().string() << "\n" << in.rdbuf();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Consistency-aware adversarial protection toolkit"};
  app.require_subcommand(1);
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "debug, info, warn or error");

  auto* synth = app.add_subcommand("synth", "write a synthetic face dataset");
  std::string synth_out;
  int synth_ids = 2, synth_images = 4, synth_size = 64;
  std::uint64_t synth_seed = 0;
  synth->add_option("-o,--out", synth_out, "output root")->required();
  synth->add_option("--identities", synth_ids, "identities")->check(CLI::PositiveNumber);
  synth->add_option("--images", synth_images, "images per identity")->check(CLI::PositiveNumber);
  synth->add_option("--seed", synth_seed, "dataset seed");
  synth->add_option("--size", synth_size, "image side")->check(CLI::Range(4, 4096));

  auto* show = app.add_subcommand("config", "print the effective config (or the schema)");
  ConfigFlags show_flags;
  show_flags.add(show);
  bool show_schema = false;
  show->add_flag("--schema", show_schema, "list every key with its type, default and description");

  auto* pretrain = app.add_subcommand("pretrain", "pretrain (or locate) the cached base model");
  ConfigFlags pretrain_flags;
  pretrain_flags.add(pretrain);
  std::string pretrain_cache;
  pretrain->add_option("--cache", pretrain_cache, "cache directory (default <run-root>/cache)");

  std::map<std::string, RunFlags> run_flags;
  std::map<std::string, CLI::App*> run_apps;
  const std::map<std::string, std::string> descriptions = {
      {"run", "protect, personalize on protected and clean sets, evaluate"},
      {"protect", "write protected images and iteration traces"},
      {"personalize", "learn a concept from the given images and generate"},
      {"evaluate", "personalize on externally protected images and score them"},
      {"ablate", "compare attack variants under matched seeds"},
      {"sweep", "vary the budget eta"},
      {"probe", "consistency-transfer probe with a synthetic marker"}};
  for (const char* name : cap::kCommands) {
    run_apps[name] = app.add_subcommand(name, descriptions.at(name));
    run_flags[name].add(run_apps[name], std::string(name) == "evaluate");
  }

  auto* replay = app.add_subcommand("replay", "run a stored manifest again into a new run directory");
  std::string replay_manifest, replay_root, replay_cache;
  replay->add_option("manifest", replay_manifest, "manifest.json")->required()->check(CLI::ExistingFile);
  replay->add_option("--run-root", replay_root, "run directory root");
  replay->add_option("--cache", replay_cache, "base model cache");

  auto* report = app.add_subcommand("report", "print the tables and status of a run directory");
  std::string report_dir;
  report->add_option("run_dir", report_dir, "run directory")->required()->check(CLI::ExistingDirectory);

  CLI11_PARSE(app, argc, argv);

  try {
    cap::set_log_stream(&std::cerr);
    cap::set_log_level(cap::log_level_from(log_level));

    if (synth->parsed()) {
      cap::synth_dataset(synth_out, synth_ids, synth_images, synth_seed, synth_size);
      std::cout << synth_out << "\n";
      return 0;
    }
    if (show->parsed()) {
      if (show_schema) {
        for (const auto& k : cap::config_schema()) {
          std::cout << k.name << " = " << k.default_value << "    # " << k.help;
          if (!k.choices.empty()) {
            std::cout << " {";
            for (std::size_t i = 0; i < k.choices.size(); ++i) std::cout << (i ? "|" : "") << k.choices[i];
            std::cout << "}";
          }
          std::cout << "\n";
        }
      } else {
        std::cout << show_flags.build().to_text();
      }
      return 0;
    }
    if (pretrain->parsed()) {
      const cap::Config c = pretrain_flags.build();
      const fs::path cache = pretrain_cache.empty() ? cap::default_run_root() / "cache" : fs::path(pretrain_cache);
      fs::path used;
      cap::load_or_pretrain_base(c, cache, &used);
      std::cout << used.string() << "\n";
      return 0;
    }
    if (replay->parsed()) return finish(cap::replay_manifest(replay_manifest, replay_root, replay_cache));
    if (report->parsed()) {
      const fs::path dir = report_dir;
      for (const char* f : {"metrics.tsv", "ablation.tsv", "sweep.tsv", "probe.tsv", "status.json"}) {
        if (fs::exists(dir / f)) print_file(dir / f);
      }
      return 0;
    }
    for (const auto& [name, sub] : run_apps) {
      if (!sub->parsed()) continue;
      const RunFlags& f = run_flags.at(name);
      cap::RunOptions o;
      o.command = name;
      o.variant = f.variant;
      o.config = f.config.build();
      o.data_root = f.data;
      o.protected_root = f.protected_root;
      o.run_root = f.run_root;
      o.cache_dir = f.cache;
      o.dry_run = f.dry_run;
      return finish(cap::run_pipeline(o));
    }
  } catch (const cap::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
