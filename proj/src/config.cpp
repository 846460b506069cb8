#include "cap/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "cap/metrics.hpp"
#include "cap/random.hpp"

namespace cap {

namespace {

using VT = ValueType;

const std::vector<ConfigKey> kSchema = {
    {"seed", VT::Seed, "0", "master seed; every stage derives its own stream from it", {}},
    {"resolution", VT::Int, "64", "square image size after ingest (512 in the large-model setting)", {}},

    {"attack.iterations", VT::Int, "20", "PGD iterations K", {}},
    {"attack.start_step", VT::Int, "0", "first iteration with the consistency term; 0 = ceil(K/2)", {}},
    {"attack.alpha", VT::Real, "0.005", "PGD step length", {}},
    {"attack.eta", VT::Real, "0.05", "L-infinity budget", {}},
    {"attack.ratio_max", VT::Real, "100", "ratio search range [0, R]", {}},
    {"attack.ratio_points", VT::Int, "11", "evenly spaced candidates over [0, R]", {}},
    {"attack.ratio_mode", VT::Choice, "dynamic", "dynamic search or a fixed ratio", {"dynamic", "static"}},
    {"attack.ratio_replay", VT::Choice, "heldout", "noise used to score ratio candidates", {"heldout", "shared"}},
    {"attack.static_ratio", VT::Real, "0", "ratio used when ratio_mode = static", {}},
    {"attack.consistency_sign", VT::Choice, "-1", "-1 descends the consistency loss, +1 ascends it", {"-1", "1"}},
    {"attack.loss", VT::Choice, "style", "consistency term", {"style", "content", "none"}},
    {"attack.content_tap", VT::Int, "-1", "tap for the content variant; -1 = deepest", {}},
    {"attack.gram_norm", VT::Choice, "chw", "Gram divisor", {"chw", "raw"}},
    {"attack.surrogate_mode", VT::Choice, "fixed", "surrogate held fixed or updated between iterations",
     {"fixed", "alternating"}},
    {"attack.surrogate_steps", VT::Int, "2", "surrogate updates per iteration (alternating)", {}},
    {"attack.surrogate_lr", VT::Real, "0.0001", "surrogate learning rate (alternating)", {}},
    {"attack.surrogate", VT::Choice, "clean_finetune", "model attacked", {"clean_finetune", "base"}},

    {"train.steps", VT::Int, "500", "personalization steps (1000 in the large-model setting)", {}},
    {"train.lr", VT::Real, "0.0001", "personalization learning rate (5e-7 in the large-model setting)", {}},
    {"train.batch", VT::Int, "2", "personalization batch size", {}},
    {"train.target", VT::Choice, "both", "what personalization trains", {"both", "denoiser", "concept"}},
    {"train.concept_lr_scale", VT::Real, "10", "concept embedding lr multiplier", {}},
    {"train.eval_draws", VT::Int, "8", "noise draws per image for the reported loss", {}},
    {"generate.count", VT::Int, "16", "images generated per identity", {}},
    {"concept.identifier", VT::Text, "sks", "rare-token identifier", {}},

    {"model.levels", VT::IntList, "32,64,64", "U-Net channels per resolution level", {}},
    {"model.mid", VT::Int, "64", "bottleneck channels", {}},
    {"model.time_dim", VT::Int, "32", "timestep embedding width", {}},
    {"model.embed_dim", VT::Int, "64", "conditioning width", {}},
    {"model.concept_dim", VT::Int, "16", "concept embedding size", {}},
    {"model.init_seed", VT::Seed, "1234", "weight init seed", {}},
    {"model.checkpoint", VT::Text, "", "pretrained base; empty = pretrain and cache", {}},

    {"pretrain.steps", VT::Int, "2000", "base pretraining steps", {}},
    {"pretrain.lr", VT::Real, "0.001", "base pretraining learning rate", {}},
    {"pretrain.batch", VT::Int, "4", "base pretraining batch size", {}},
    {"pretrain.identities", VT::Int, "16", "synthetic identities in the pretraining pool", {}},
    {"pretrain.images", VT::Int, "4", "images per pretraining identity", {}},
    {"pretrain.seed", VT::Seed, "99", "pool and pretraining seed (disjoint from evaluation identities)", {}},

    {"schedule.steps", VT::Int, "100", "diffusion steps T", {}},
    {"schedule.beta_start", VT::Real, "0.0001", "first beta", {}},
    {"schedule.beta_end", VT::Real, "0.02", "last beta", {}},

    {"extractor.width_divisor", VT::Int, "1", "divides every VGG width (min 4 channels)", {}},
    {"extractor.init_seed", VT::Seed, "19", "extractor weight seed", {}},

    {"ablate.variants", VT::Text, "none,content,style", "comma-separated variant names", {}},
    {"sweep.strengths", VT::RealList, "0.01568627450980392,0.03137254901960784,0.047058823529411764,0.06274509803921569",
     "budgets eta for the strength sweep (4, 8, 12, 16 / 255)", {}},
    {"probe.marker", VT::Choice, "color_shift", "probe marker", {"color_shift", "patch"}},
    {"probe.strength", VT::Real, "0.3", "probe marker strength", {}},
    {"probe.patch_size", VT::Int, "8", "corner patch side", {}},
    {"publish.bit_depth", VT::Choice, "16", "bits per channel of the stored protected images; 0 keeps them unrounded",
     {"0", "16"}},
};

const ConfigKey& key_info(const std::string& key) {
  for (const auto& k : kSchema) {
    if (k.name == key) return k;
  }
  throw ConfigError("unknown config key: " + key);
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(s);
  while (std::getline(is, item, sep)) out.push_back(trim(item));
  return out;
}

template <class T>
bool parse_number(const std::string& s, T& out) {
  const char* end = s.data() + s.size();
  const auto r = std::from_chars(s.data(), end, out);
  return r.ec == std::errc() && r.ptr == end && !s.empty();
}

// Validated canonical spelling of `value` for `key`.
std::string canonical(const ConfigKey& k, const std::string& raw) {
  const std::string v = trim(raw);
  const auto bad = [&](const std::string& what) {
    return ConfigError(k.name + ": " + what + " (got '" + v + "')");
  };
  switch (k.type) {
    case VT::Int: {
      long long x;
      if (!parse_number(v, x) || x < INT32_MIN || x > INT32_MAX) throw bad("expected an integer");
      return std::to_string(x);
    }
    case VT::Seed: {
      std::uint64_t x;
      if (!parse_number(v, x)) throw bad("expected a non-negative integer");
      return std::to_string(x);
    }
    case VT::Real: {
      double x;
      if (!parse_number(v, x) || !std::isfinite(x)) throw bad("expected a finite number");
      return format_double(x);
    }
    case VT::Text:
      if (v.find('\n') != std::string::npos) throw bad("text values are single-line");
      return v;
    case VT::Choice:
      if (std::find(k.choices.begin(), k.choices.end(), v) == k.choices.end()) {
        std::string list;
        for (const auto& c : k.choices) list += (list.empty() ? "" : ", ") + c;
        throw bad("expected one of " + list);
      }
      return v;
    case VT::RealList:
    case VT::IntList: {
      std::string out;
      for (const auto& item : split(v, ',')) {
        std::string c;
        if (k.type == VT::IntList) {
          long long x;
          if (!parse_number(item, x)) throw bad("expected comma-separated integers");
          c = std::to_string(x);
        } else {
          double x;
          if (!parse_number(item, x) || !std::isfinite(x)) throw bad("expected comma-separated numbers");
          c = format_double(x);
        }
        out += (out.empty() ? "" : ",") + c;
      }
      if (out.empty()) throw bad("expected a non-empty list");
      return out;
    }
  }
  return v;
}

}  // namespace

const std::vector<ConfigKey>& config_schema() { return kSchema; }

Config::Config() {
  for (const auto& k : kSchema) values_[k.name] = canonical(k, k.default_value);
}

Config Config::parse(const std::string& text) {
  Config c;
  std::istringstream is(text);
  std::string line;
  int n = 0;
  while (std::getline(is, line)) {
    ++n;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(n) + ": expected key = value");
    try {
      c.set(trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(n) + ": " + e.what());
    }
  }
  return c;
}

Config Config::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  try {
    return parse(os.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void Config::set(const std::string& key, const std::string& value) {
  values_[key] = canonical(key_info(key), value);
}

void Config::apply(const std::vector<std::string>& overrides) {
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + o + "' is not key=value");
    set(trim(o.substr(0, eq)), o.substr(eq + 1));
  }
}

const std::string& Config::get(const std::string& key) const {
  key_info(key);
  return values_.at(key);
}

int Config::get_int(const std::string& key) const { return std::stoi(get(key)); }
std::uint64_t Config::get_seed(const std::string& key) const { return std::stoull(get(key)); }
double Config::get_real(const std::string& key) const { return std::stod(get(key)); }

std::vector<double> Config::get_reals(const std::string& key) const {
  std::vector<double> out;
  for (const auto& s : split(get(key), ',')) out.push_back(std::stod(s));
  return out;
}

std::vector<int> Config::get_ints(const std::string& key) const {
  std::vector<int> out;
  for (const auto& s : split(get(key), ',')) out.push_back(std::stoi(s));
  return out;
}

std::string Config::to_text() const {
  std::string out;
  for (const auto& k : kSchema) out += k.name + " = " + values_.at(k.name) + "\n";
  return out;
}

nlohmann::json Config::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : values_) j[k] = v;
  return j;
}

Config Config::from_json(const nlohmann::json& j) {
  Config c;
  for (const auto& [k, v] : j.items()) c.set(k, v.get<std::string>());
  return c;
}

DenoiserConfig denoiser_config(const Config& c) {
  DenoiserConfig d;
  d.level_channels = c.get_ints("model.levels");
  d.mid_channels = c.get_int("model.mid");
  d.time_dim = c.get_int("model.time_dim");
  d.embed_dim = c.get_int("model.embed_dim");
  d.concept_dim = c.get_int("model.concept_dim");
  d.init_seed = c.get_seed("model.init_seed");
  return d;
}

ExtractorConfig extractor_config(const Config& c) {
  ExtractorConfig e = ExtractorConfig::vgg19_head();
  const int div = c.get_int("extractor.width_divisor");
  if (div < 1) throw ConfigError("extractor.width_divisor must be >= 1");
  for (auto& l : e.layers) {
    if (l.kind == LayerKind::Conv) l.out_channels = std::max(4, l.out_channels / div);
  }
  e.init_seed = c.get_seed("extractor.init_seed");
  return e;
}

NoiseSchedule schedule_from(const Config& c) {
  return make_schedule(c.get_int("schedule.steps"), c.get_real("schedule.beta_start"), c.get_real("schedule.beta_end"));
}

AttackConfig attack_config(const Config& c) {
  AttackConfig a;
  a.iterations = c.get_int("attack.iterations");
  a.start_step = c.get_int("attack.start_step");
  a.alpha = c.get_real("attack.alpha");
  a.eta = c.get_real("attack.eta");
  a.ratio_grid = linear_ratio_grid(c.get_real("attack.ratio_max"), c.get_int("attack.ratio_points"));
  a.ratio_mode = ratio_mode_from(c.get("attack.ratio_mode"));
  a.ratio_replay = ratio_replay_from(c.get("attack.ratio_replay"));
  a.static_ratio = c.get_real("attack.static_ratio");
  a.consistency_sign = c.get_int("attack.consistency_sign");
  a.loss_variant = loss_variant_from(c.get("attack.loss"));
  a.content_tap = c.get_int("attack.content_tap");
  a.gram_norm = c.get("attack.gram_norm") == "raw" ? GramNorm::Raw : GramNorm::ChannelsPixels;
  a.surrogate_mode = surrogate_mode_from(c.get("attack.surrogate_mode"));
  a.surrogate_steps = c.get_int("attack.surrogate_steps");
  a.surrogate_learning_rate = c.get_real("attack.surrogate_lr");
  a.seed = c.get_seed("seed");
  a.validate();
  return a;
}

PersonalizationConfig personalization_config(const Config& c) {
  PersonalizationConfig p;
  p.training_steps = c.get_int("train.steps");
  p.learning_rate = c.get_real("train.lr");
  p.batch_size = c.get_int("train.batch");
  p.what_to_train = train_target_from(c.get("train.target"));
  p.concept_lr_scale = c.get_real("train.concept_lr_scale");
  p.eval_draws = c.get_int("train.eval_draws");
  p.seed = c.get_seed("seed");
  p.validate();
  return p;
}

PersonalizationConfig pretrain_config(const Config& c) {
  PersonalizationConfig p;
  p.training_steps = c.get_int("pretrain.steps");
  p.learning_rate = c.get_real("pretrain.lr");
  p.batch_size = c.get_int("pretrain.batch");
  p.what_to_train = TrainTarget::Denoiser;
  p.eval_draws = 1;
  p.seed = c.get_seed("pretrain.seed");
  p.validate();
  return p;
}

void apply_profile(Config& c, const std::string& profile) {
  if (profile == "desk") return;
  if (profile != "paper") throw ConfigError("unknown profile '" + profile + "' (expected desk or paper)");
  c.set("resolution", "512");
  c.set("train.steps", "1000");
  c.set("train.lr", "5e-7");
}

void apply_variant(Config& c, const std::string& variant) {
  const AttackConfig a = apply_variant(attack_config(c), variant);
  c.set("attack.loss", to_string(a.loss_variant));
  c.set("attack.ratio_mode", to_string(a.ratio_mode));
  c.set("attack.static_ratio", format_double(a.static_ratio));
}

std::vector<std::string> ablation_variants(const Config& c) {
  std::vector<std::string> out = split(c.get("ablate.variants"), ',');
  out.erase(std::remove(out.begin(), out.end(), std::string()), out.end());
  if (out.empty()) throw ConfigError("ablate.variants is empty");
  return out;
}

MarkerSpec marker_spec(const Config& c) {
  MarkerSpec m{marker_kind_from(c.get("probe.marker")), c.get_real("probe.strength"), c.get_int("probe.patch_size")};
  m.validate();
  return m;
}

Experiment experiment_from(const Config& c, Denoiser base) {
  const std::uint64_t seed = c.get_seed("seed");
  const int concept_dim = base.config().concept_dim;
  Experiment e{std::move(base),
               FeatureExtractor(extractor_config(c)),
               ConceptToken::random(c.get("concept.identifier"), concept_dim, derive_seed(seed, {0xC0Du})),
               schedule_from(c),
               attack_config(c),
               personalization_config(c),
               surrogate_source_from(c.get("attack.surrogate")),
               c.get_int("generate.count"),
               seed};
  if (e.generate_count < 1) throw ConfigError("generate.count must be >= 1");
  e.publish_bit_depth = c.get_int("publish.bit_depth");
  return e.with_seed(seed);
}

}  // namespace cap
