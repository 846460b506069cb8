#include "cap/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <random>
#include <sstream>

#include "cap/checkpoint.hpp"
#include "cap/dataset.hpp"
#include "cap/hashing.hpp"
#include "cap/image_io.hpp"
#include "cap/log.hpp"
#include "cap/plot.hpp"
#include "cap/random.hpp"

namespace cap {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

class InvariantError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InputMismatch : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string utc_now(const char* format) {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[64];
  std::strftime(buf, sizeof buf, format, &tm);
  return buf;
}

std::string random_hex() {
  std::random_device rd;
  char buf[17];
  std::snprintf(buf, sizeof buf, "%08x%08x", rd(), rd());
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

struct RunWriter {
  fs::path dir;
  std::vector<std::string>* artifacts;

  fs::path path(const std::string& rel) {
    artifacts->push_back(rel);
    fs::create_directories((dir / rel).parent_path());
    return dir / rel;
  }
  void text(const std::string& rel, const std::string& content) { write_text(path(rel), content); }
  void json_file(const std::string& rel, const json& j) { text(rel, j.dump(2) + "\n"); }
};

std::map<std::string, std::uint64_t> seed_table(const Config& c, const Experiment* e) {
  std::map<std::string, std::uint64_t> s{{"seed", c.get_seed("seed")},
                                         {"model.init", c.get_seed("model.init_seed")},
                                         {"pretrain", c.get_seed("pretrain.seed")},
                                         {"extractor", c.get_seed("extractor.init_seed")}};
  if (e != nullptr) {
    s["attack"] = e->attack.seed;
    s["personalization"] = e->personalization.seed;
  }
  return s;
}

void validate(const Config& c) {
  attack_config(c);
  personalization_config(c);
  pretrain_config(c);
  extractor_config(c);
  schedule_from(c);
  marker_spec(c);
  ablation_variants(c);
  if (c.get_int("resolution") < 8) throw ConfigError("resolution must be >= 8");
  if (c.get_int("generate.count") < 1) throw ConfigError("generate.count must be >= 1");
  const DenoiserConfig d = denoiser_config(c);
  if (c.get_int("resolution") % d.spatial_multiple() != 0) {
    throw ConfigError("resolution must be divisible by " + std::to_string(d.spatial_multiple()) + " for " +
                      std::to_string(d.level_channels.size()) + " model levels");
  }
}

void check_published(const Experiment& e, const IdentityData& id, const ImageSet& published) {
  const double eta = e.attack.eta;
  for (std::size_t i = 0; i < published.perturbed.size(); ++i) {
    const auto& x = published.clean[i].values();
    const auto& y = published.perturbed[i].values();
    for (std::size_t j = 0; j < x.size(); ++j) {
      if (!(std::abs(y[j] - x[j]) <= eta + 1e-12) || y[j] < 0.0 || y[j] > 1.0) {
        throw InvariantError(id.label + ": perturbed image " + std::to_string(i) + " breaks the budget");
      }
    }
  }
}

void write_protection(RunWriter& w, const Experiment& e, const IdentityData& id, const ProtectResult& protection) {
  const std::string base = "identities/" + id.label + "/";
  const ImageSet& published = protection.images;
  check_published(e, id, published);
  const int bits = 16;
  for (std::size_t i = 0; i < published.perturbed.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "img_%02zu.png", i);
    const fs::path p = w.path("protected/" + id.label + "/" + name);
    write_png(p, published.perturbed[i], bits);
    if (e.publish_bit_depth == 16) {
      const Tensor back = read_image(p);
      const auto a = back.values(), b = published.perturbed[i].values();
      if (!std::equal(a.begin(), a.end(), b.begin(), b.end())) {
        throw InvariantError(p.string() + ": stored image differs from the protected image");
      }
    }
  }
  if (e.publish_bit_depth != 16) log_warn("publish.rounded", {{"identity", id.label}, {"bits", bits}});
  w.text(base + "trace.jsonl", protection.trace.to_jsonl());
  std::vector<double> recon, consistency;
  for (const auto& r : protection.trace.records) {
    recon.push_back(r.recon_loss);
    consistency.push_back(r.consistency_active ? r.consistency_loss : std::nan(""));
  }
  plot_lines(w.path(base + "attack_recon_loss.png"), {colored_series({}, recon, 0)});
  plot_lines(w.path(base + "attack_consistency_loss.png"), {colored_series({}, consistency, 1)});
}

void write_learned(RunWriter& w, const Experiment& e, const std::string& label, const LearnedConcept& learned,
                   const ImageList& generated) {
  const std::string base = "identities/" + label + "/";
  for (std::size_t i = 0; i < generated.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "img_%02zu.png", i);
    write_png(w.path(base + "generated/" + name), generated[i], 8);
  }
  save_checkpoint(w.path(base + "learned.ckpt"), learned.to_checkpoint());
  w.json_file(base + "learned.json", learned.sidecar(e.personalization));
  plot_lines(w.path(base + "train_loss.png"), {colored_series({}, learned.loss_curve, 2)});
}

void write_identity(RunWriter& w, const Experiment& e, const IdentityData& id, const IdentityOutcome& o) {
  if (!o.protection.trace.records.empty()) write_protection(w, e, id, o.protection);
  write_learned(w, e, id.label, o.learned, o.generated);
  w.json_file("identities/" + id.label + "/metrics.json", o.metrics.to_json());
}

template <class F>
auto stage(const std::string& name, F&& f) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& err) {
    throw StageError(name, err.what());
  }
}

MetricReport finish_report(const Experiment& e, std::vector<IdentityMetrics> metrics) {
  MetricReport report;
  report.identities = std::move(metrics);
  report.config = e.to_json();
  report.seeds = {e.seed};
  report.check_invariants();
  return report;
}

void run_command(const std::string& command, RunWriter& w, const Config& c, const Experiment& e,
                 const std::vector<IdentityData>& identities, const std::vector<IdentityData>& published,
                 RunRecord& rec) {
  if (command == "protect") {
    for (const auto& id : identities) {
      const ControlRun control = run_control(e, id);
      write_protection(w, e, id, protect_identity(e, id, control));
    }
  } else if (command == "personalize") {
    for (const auto& id : identities) {
      const LearnedConcept learned =
          stage("personalize", [&] { return personalize(e.base, e.token, e.schedule, id.clean, e.personalization); });
      const ImageList generated =
          stage("generate", [&] { return generate_from_concept(learned, e.generate_count, generation_seed(e)); });
      write_learned(w, e, id.label, learned, generated);
    }
  } else if (command == "evaluate") {
    std::vector<IdentityMetrics> metrics;
    for (std::size_t i = 0; i < identities.size(); ++i) {
      const IdentityData& id = identities[i];
      if (published[i].label != id.label || published[i].clean.size() != id.clean.size()) {
        throw StageError("evaluate", "protected set '" + published[i].label + "' does not match clean set '" + id.label + "'");
      }
      ImageSet set{id.clean, published[i].clean, e.attack.eta, id.label};
      const double energy = artifact_energy(set);
      double worst = 0.0;
      for (std::size_t j = 0; j < set.clean.size(); ++j) {
        const auto a = set.clean[j].values(), b = set.perturbed[j].values();
        if (a.size() != b.size()) throw StageError("evaluate", id.label + ": image sizes differ");
        for (std::size_t q = 0; q < a.size(); ++q) worst = std::max(worst, std::abs(a[q] - b[q]));
      }
      if (worst > e.attack.eta + 1e-12) {
        log_warn("evaluate.over_budget", {{"identity", id.label}, {"max_perturbation", worst}, {"eta", e.attack.eta}});
      }
      log_info("evaluate.identity", {{"identity", id.label}, {"artifact_energy", energy}});
      const ControlRun control = run_control(e, id);
      const IdentityOutcome o = personalize_published(e, id, ProtectResult{set, {}}, control);
      write_identity(w, e, id, o);
      metrics.push_back(o.metrics);
    }
    MetricReport report = stage("evaluate", [&] { return finish_report(e, std::move(metrics)); });
    w.text("metrics.tsv", report.to_tsv());
    w.json_file("metrics.json", report.to_json());
    rec.report = std::move(report);
  } else if (command == "run") {
    std::vector<IdentityOutcome> outcomes;
    MetricReport report = run_experiment(e, identities, &outcomes);
    for (std::size_t i = 0; i < identities.size(); ++i) write_identity(w, e, identities[i], outcomes[i]);
    w.text("metrics.tsv", report.to_tsv());
    w.json_file("metrics.json", report.to_json());
    rec.report = std::move(report);
  } else if (command == "ablate") {
    const auto rows = ablation_suite(e, identities, ablation_variants(c));
    w.text("ablation.tsv", ablation_tsv(rows));
    json j = json::array();
    for (const auto& r : rows) j.push_back({{"variant", r.variant}, {"report", r.report.to_json()}});
    w.json_file("ablation.json", j);
  } else if (command == "sweep") {
    const auto rows = strength_sweep(e, identities, c.get_reals("sweep.strengths"));
    w.text("sweep.tsv", sweep_tsv(rows));
    json j = json::array();
    std::vector<double> eta, loss, ism;
    std::string failed;
    for (const auto& r : rows) {
      json row{{"eta", r.eta}, {"error", r.error}};
      if (r.report) {
        row["report"] = r.report->to_json();
        eta.push_back(r.eta * 255.0);
        loss.push_back(r.report->aggregate().post_personalization_loss);
        ism.push_back(r.report->aggregate().identity_similarity);
      } else if (failed.empty()) {
        failed = r.error;
      }
      j.push_back(row);
    }
    w.json_file("sweep.json", j);
    if (!eta.empty()) {
      plot_lines(w.path("sweep_loss.png"), {colored_series(eta, loss, 0)});
      plot_lines(w.path("sweep_identity_similarity.png"), {colored_series(eta, ism, 3)});
    }
    if (!failed.empty()) throw StageError("sweep", failed);
  } else if (command == "probe") {
    const MarkerSpec spec = marker_spec(c);
    json j{{"marker", spec.to_json()}, {"identities", json::array()}};
    std::string tsv = "identity\tconsistent\tinconsistent\tgap\n";
    for (const auto& id : identities) {
      const ProbeReport p = consistency_transfer_probe(e, id.clean, spec);
      j["identities"].push_back({{"identity", id.label}, {"report", p.to_json()}});
      tsv += id.label + "\t" + format_double(p.consistent.output_score) + "\t" +
             format_double(p.inconsistent.output_score) + "\t" + format_double(p.gap()) + "\n";
    }
    w.text("probe.tsv", tsv);
    w.json_file("probe.json", j);
  } else {
    throw ConfigError("unknown command '" + command + "'");
  }
}

}  // namespace

json RunManifest::to_json() const {
  json in = json::array();
  for (const auto& f : inputs) in.push_back({{"identity", f.identity}, {"file", f.file}, {"sha256", f.sha256}});
  return {{"run_id", run_id},
          {"command", command},
          {"variant", variant},
          {"config", config.to_json()},
          {"data_root", data_root},
          {"protected_root", protected_root},
          {"inputs", in},
          {"base_model_sha256", base_model_sha256},
          {"seeds", seeds},
          {"artifacts", artifacts},
          {"created_at", created_at},
          {"toolkit_version", toolkit_version}};
}

RunManifest RunManifest::from_json(const json& j) {
  RunManifest m;
  m.run_id = j.at("run_id").get<std::string>();
  m.command = j.at("command").get<std::string>();
  m.variant = j.at("variant").get<std::string>();
  m.config = Config::from_json(j.at("config"));
  m.data_root = j.at("data_root").get<std::string>();
  m.protected_root = j.at("protected_root").get<std::string>();
  for (const auto& f : j.at("inputs")) {
    m.inputs.push_back({f.at("identity").get<std::string>(), f.at("file").get<std::string>(),
                        f.at("sha256").get<std::string>()});
  }
  m.base_model_sha256 = j.at("base_model_sha256").get<std::string>();
  m.seeds = j.at("seeds").get<std::map<std::string, std::uint64_t>>();
  m.artifacts = j.at("artifacts").get<std::vector<std::string>>();
  m.created_at = j.at("created_at").get<std::string>();
  m.toolkit_version = j.at("toolkit_version").get<std::string>();
  return m;
}

std::string RunManifest::dump() const { return to_json().dump(2) + "\n"; }

RunManifest RunManifest::parse(const std::string& text) {
  try {
    return from_json(json::parse(text));
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("invalid manifest: ") + e.what());
  }
}

RunManifest RunManifest::load(const fs::path& path) { return parse(read_text(path)); }

fs::path default_run_root() {
  const char* env = std::getenv("CAP_RUN_ROOT");
  return env != nullptr && *env != '\0' ? fs::path(env) : fs::path("runs");
}

fs::path create_run_dir(const fs::path& root, const std::string& prefix, std::string* run_id) {
  fs::create_directories(root);
  for (int attempt = 0; attempt < 64; ++attempt) {
    const std::string id = prefix + "-" + utc_now("%Y%m%dT%H%M%SZ") + "-" + random_hex();
    const fs::path dir = root / id;
    if (fs::create_directory(dir)) {
      if (run_id != nullptr) *run_id = id;
      return dir;
    }
  }
  throw std::runtime_error("could not create a fresh run directory under " + root.string());
}

std::vector<IdentityData> load_identities(const fs::path& data_root, int resolution, std::vector<InputFile>* inputs,
                                          int bit_depth) {
  std::vector<IdentityData> out;
  for (const fs::path& dir : identity_dirs(data_root)) {
    IngestResult r = ingest(dir, resolution, bit_depth);
    const std::string label = dir.filename().string();
    if (inputs != nullptr) {
      for (const auto& f : r.files) {
        inputs->push_back({label, fs::relative(dir / f, data_root).generic_string(), sha256_file(dir / f)});
      }
    }
    out.push_back({label, std::move(r.images)});
  }
  return out;
}

fs::path base_cache_path(const Config& c, const fs::path& cache_dir) {
  std::string key;
  for (const auto& k : config_schema()) {
    const std::string& n = k.name;
    if (n == "resolution" || n.rfind("model.", 0) == 0 || n.rfind("pretrain.", 0) == 0 || n.rfind("schedule.", 0) == 0) {
      if (n != "model.checkpoint") key += n + "=" + c.get(n) + "\n";
    }
  }
  return cache_dir / ("base-" + sha256_hex(key).substr(0, 16) + ".ckpt");
}

Denoiser load_or_pretrain_base(const Config& c, const fs::path& cache_dir, fs::path* used) {
  fs::path path = c.get("model.checkpoint");
  if (path.empty()) {
    path = base_cache_path(c, cache_dir);
    if (!fs::exists(path)) {
      const int size = c.get_int("resolution");
      const std::uint64_t seed = c.get_seed("pretrain.seed");
      ImageList pool;
      for (int id = 0; id < c.get_int("pretrain.identities"); ++id) {
        const FaceParams face = FaceParams::random(derive_seed(seed, {static_cast<std::uint64_t>(id)}));
        for (int i = 0; i < c.get_int("pretrain.images"); ++i) {
          pool.push_back(render_face(
              face, derive_seed(seed, {static_cast<std::uint64_t>(id), static_cast<std::uint64_t>(i) + 1}), size));
        }
      }
      if (pool.empty()) throw ConfigError("pretrain pool is empty");
      log_info("pretrain.start", {{"images", pool.size()}, {"steps", c.get_int("pretrain.steps")}});
      const NoiseSchedule schedule = schedule_from(c);
      const Denoiser base = pretrain_base(denoiser_config(c), schedule, pool, pretrain_config(c));
      fs::create_directories(cache_dir);
      const fs::path tmp = path.string() + ".tmp-" + random_hex();
      save_checkpoint(tmp, base.to_checkpoint(schedule));
      fs::rename(tmp, path);
      log_info("pretrain.saved", {{"path", path.string()}});
    }
  }
  if (used != nullptr) *used = path;
  return Denoiser::from_checkpoint(load_checkpoint(path));
}

RunRecord run_pipeline(const RunOptions& options) {
  RunRecord rec;
  RunManifest& m = rec.manifest;
  m.command = options.command;
  m.variant = options.variant;
  m.config = options.config;
  if (!options.variant.empty() && !options.variant_applied) apply_variant(m.config, options.variant);
  validate(m.config);
  if (std::find(std::begin(kCommands), std::end(kCommands), options.command) == std::end(kCommands)) {
    throw ConfigError("unknown command '" + options.command + "'");
  }
  if ((options.command == "evaluate") != !options.protected_root.empty()) {
    throw ConfigError("a protected image root is required by, and only by, evaluate");
  }
  m.data_root = options.data_root.string();
  m.protected_root = options.protected_root.string();
  m.created_at = utc_now("%Y-%m-%dT%H:%M:%SZ");
  m.seeds = seed_table(m.config, nullptr);

  const fs::path root = options.run_root.empty() ? default_run_root() : options.run_root;
  const fs::path cache = options.cache_dir.empty() ? root / "cache" : options.cache_dir;
  std::vector<IdentityData> identities = load_identities(options.data_root, m.config.get_int("resolution"), &m.inputs);
  std::vector<IdentityData> published;
  if (!options.protected_root.empty()) {
    std::vector<InputFile> files;
    published = load_identities(options.protected_root, m.config.get_int("resolution"), &files, 16);
    for (auto& f : files) {
      f.identity = "protected/" + f.identity;
      m.inputs.push_back(std::move(f));
    }
    if (published.size() != identities.size()) {
      throw ConfigError("clean and protected roots hold different numbers of identities");
    }
  }

  rec.dir = create_run_dir(root, options.command, &m.run_id);
  RunWriter w{rec.dir, &m.artifacts};
  const auto finish = [&] {
    write_text(rec.dir / "manifest.json", m.dump());
    write_text(rec.dir / "status.json",
               json{{"exit_code", rec.exit_code}, {"stage", rec.failed_stage}, {"error", rec.error}}.dump(2) + "\n");
    log_info("run.done", {{"dir", rec.dir.string()}, {"exit_code", rec.exit_code}});
    return rec;
  };
  if (options.dry_run) return finish();

  try {
    if (!options.expected_inputs.empty() && options.expected_inputs != m.inputs) {
      throw InputMismatch("inputs under " + m.data_root + " differ from the manifest");
    }
    fs::path used;
    Denoiser base = load_or_pretrain_base(m.config, cache, &used);
    m.base_model_sha256 = sha256_file(used);
    if (!options.expected_base_sha256.empty() && options.expected_base_sha256 != m.base_model_sha256) {
      throw InputMismatch("base model " + used.string() + " differs from the manifest");
    }
    const Experiment e = experiment_from(m.config, std::move(base));
    m.seeds = seed_table(m.config, &e);
    run_command(options.command, w, m.config, e, identities, published, rec);
  } catch (const StageError& err) {
    rec.exit_code = kExitStage;
    rec.failed_stage = err.stage();
    rec.error = err.what();
  } catch (const InvariantError& err) {
    rec.exit_code = kExitInvariant;
    rec.failed_stage = "publish";
    rec.error = err.what();
  } catch (const InputMismatch& err) {
    rec.exit_code = kExitInput;
    rec.failed_stage = "inputs";
    rec.error = err.what();
  }
  if (rec.exit_code != kExitOk) log_event(LogLevel::Error, "run.failed", {{"stage", rec.failed_stage}, {"error", rec.error}});
  return finish();
}

RunRecord replay_manifest(const fs::path& manifest_path, const fs::path& run_root, const fs::path& cache_dir) {
  const RunManifest m = RunManifest::load(manifest_path);
  RunOptions o;
  o.command = m.command;
  o.config = m.config;
  o.variant = m.variant;
  o.variant_applied = true;
  o.data_root = m.data_root;
  o.protected_root = m.protected_root;
  o.run_root = run_root;
  o.cache_dir = cache_dir;
  o.expected_inputs = m.inputs;
  o.expected_base_sha256 = m.base_model_sha256;
  if (m.inputs.empty()) throw std::invalid_argument("manifest lists no inputs");
  return run_pipeline(o);
}

}  // namespace cap
