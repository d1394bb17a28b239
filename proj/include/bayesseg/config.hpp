#pragma once
// JSON run configuration. Every section is validated strictly: unknown keys
// and wrongly typed values raise ConfigError naming the dotted field path.

#include <cerrno>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>

#include "json.hpp"

#include "bayesseg/calibration.hpp"
#include "bayesseg/data.hpp"
#include "bayesseg/segnet.hpp"
#include "bayesseg/trainer.hpp"

namespace bayesseg {

using Json = nlohmann::ordered_json;

namespace detail {

/// Reads fields from one JSON object and rejects whatever was not read.
class FieldReader {
 public:
  FieldReader(const Json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected a JSON object");
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  bool has(const std::string& key) const { return obj_.contains(key); }

  const Json* get(const std::string& key) {
    known_.insert(key);
    auto it = obj_.find(key);
    return it == obj_.end() ? nullptr : &*it;
  }

  void read(const std::string& key, std::size_t& out) {
    if (const Json* v = get(key)) {
      if (!v->is_number_integer() || v->get<long long>() < 0) throw ConfigError(field(key), "expected a non-negative integer");
      out = v->get<std::size_t>();
    }
  }
  void read(const std::string& key, std::uint64_t& out, bool) {
    if (const Json* v = get(key)) {
      if (!v->is_number_unsigned() && !(v->is_number_integer() && v->get<long long>() >= 0))
        throw ConfigError(field(key), "expected a non-negative integer");
      out = v->get<std::uint64_t>();
    }
  }
  void read(const std::string& key, double& out) {
    if (const Json* v = get(key)) {
      if (!v->is_number()) throw ConfigError(field(key), "expected a number");
      out = v->get<double>();
    }
  }
  void read(const std::string& key, bool& out) {
    if (const Json* v = get(key)) {
      if (!v->is_boolean()) throw ConfigError(field(key), "expected true or false");
      out = v->get<bool>();
    }
  }
  void read(const std::string& key, std::string& out) {
    if (const Json* v = get(key)) {
      if (!v->is_string()) throw ConfigError(field(key), "expected a string");
      out = v->get<std::string>();
    }
  }
  template <class E>
  void read_enum(const std::string& key, E& out, std::initializer_list<E> candidates) {
    if (const Json* v = get(key)) {
      if (!v->is_string()) throw ConfigError(field(key), "expected a string");
      const auto text = v->get<std::string>();
      for (E c : candidates)
        if (to_string(c) == text) {
          out = c;
          return;
        }
      std::string allowed;
      for (E c : candidates) allowed += (allowed.empty() ? "" : ", ") + to_string(c);
      throw ConfigError(field(key), "unknown value '" + text + "' (expected one of: " + allowed + ")");
    }
  }

  void finish() const {
    for (auto it = obj_.begin(); it != obj_.end(); ++it)
      if (!known_.count(it.key())) throw ConfigError(field(it.key()), "unknown key");
  }

 private:
  const Json& obj_;
  std::string path_;
  std::set<std::string> known_;
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Sections.

inline ArchitectureConfig parse_architecture(const Json& j, const std::string& path = "architecture") {
  ArchitectureConfig c;
  detail::FieldReader r(j, path);
  r.read_enum("decoder_style", c.decoder_style,
              {DecoderStyle::unet_concat, DecoderStyle::linknet_add, DecoderStyle::fpn_pyramid});
  r.read("depth", c.depth);
  r.read("base_channels", c.base_channels);
  r.read_enum("stochastic_kind", c.stochastic_kind,
              {StochasticKind::deterministic, StochasticKind::reparam, StochasticKind::mnf});
  r.read_enum("placement", c.placement, {Placement::backbone_output, Placement::final_block, Placement::per_decoder});
  r.read("input_size", c.input_size);
  r.read("input_channels", c.input_channels);
  r.read("sigma0", c.mnf.sigma0);
  if (const Json* m = r.get("mnf")) {
    detail::FieldReader mr(*m, r.field("mnf"));
    mr.read("flow_depth", c.mnf.flow_depth);
    mr.read("flow_hidden", c.mnf.flow_hidden);
    mr.read("aux_hidden", c.mnf.aux_hidden);
    mr.read("z_sigma0", c.mnf.z_sigma0);
    mr.finish();
  }
  r.finish();
  c.validate();
  if (!(c.mnf.sigma0 > 0.0)) throw ConfigError(path + ".sigma0", "must be > 0");
  if (!(c.mnf.z_sigma0 > 0.0)) throw ConfigError(path + ".mnf.z_sigma0", "must be > 0");
  if (c.mnf.flow_depth < 1) throw ConfigError(path + ".mnf.flow_depth", "must be >= 1");
  if (c.mnf.flow_hidden < 1) throw ConfigError(path + ".mnf.flow_hidden", "must be >= 1");
  if (c.mnf.aux_hidden < 1) throw ConfigError(path + ".mnf.aux_hidden", "must be >= 1");
  return c;
}

inline Json to_json(const ArchitectureConfig& c) {
  return Json{{"decoder_style", to_string(c.decoder_style)},
              {"depth", c.depth},
              {"base_channels", c.base_channels},
              {"stochastic_kind", to_string(c.stochastic_kind)},
              {"placement", to_string(c.placement)},
              {"input_size", c.input_size},
              {"input_channels", c.input_channels},
              {"sigma0", c.mnf.sigma0},
              {"mnf",
               {{"flow_depth", c.mnf.flow_depth},
                {"flow_hidden", c.mnf.flow_hidden},
                {"aux_hidden", c.mnf.aux_hidden},
                {"z_sigma0", c.mnf.z_sigma0}}}};
}

inline TrainConfig parse_train(const Json& j, const std::string& path = "train") {
  TrainConfig c;
  detail::FieldReader r(j, path);
  r.read("batch_size", c.batch_size);
  r.read("learning_rate", c.adam.learning_rate);
  r.read("beta1", c.adam.beta1);
  r.read("beta2", c.adam.beta2);
  r.read("epsilon", c.adam.epsilon);
  r.read("max_epochs", c.max_epochs);
  r.read("patience", c.patience);
  if (const Json* v = r.get("kl_scale")) {
    if (v->is_string() && v->get<std::string>() == "auto") {
      c.kl_scale.reset();
    } else if (v->is_number()) {
      c.kl_scale = v->get<double>();
    } else {
      throw ConfigError(r.field("kl_scale"), "expected a number or \"auto\"");
    }
  }
  r.read_enum("loss", c.loss, {LossKind::dice, LossKind::jaccard, LossKind::bce, LossKind::total, LossKind::nll});
  r.read("focal_alpha", c.focal.alpha);
  r.read("focal_gamma", c.focal.gamma);
  r.read("clip_norm", c.clip_norm);
  r.read("augment", c.augment);
  r.finish();
  c.validate();
  return c;
}

inline Json to_json(const TrainConfig& c) {
  Json j{{"batch_size", c.batch_size},
         {"learning_rate", c.adam.learning_rate},
         {"beta1", c.adam.beta1},
         {"beta2", c.adam.beta2},
         {"epsilon", c.adam.epsilon},
         {"max_epochs", c.max_epochs},
         {"patience", c.patience}};
  if (c.kl_scale) j["kl_scale"] = *c.kl_scale;
  else j["kl_scale"] = "auto";
  j["loss"] = to_string(c.loss);
  j["focal_alpha"] = c.focal.alpha;
  j["focal_gamma"] = c.focal.gamma;
  j["clip_norm"] = c.clip_norm;
  j["augment"] = c.augment;
  return j;
}

inline McConfig parse_mc(const Json& j, const std::string& path = "mc") {
  McConfig c;
  detail::FieldReader r(j, path);
  r.read("num_samples", c.num_samples);
  r.read("threshold", c.threshold);
  r.read("num_bins", c.num_bins);
  r.read_enum("confidence", c.confidence, {ConfidenceMode::max_probability, ConfidenceMode::positive_class});
  r.finish();
  c.validate();
  return c;
}

inline Json to_json(const McConfig& c) {
  return Json{{"num_samples", c.num_samples},
              {"threshold", c.threshold},
              {"num_bins", c.num_bins},
              {"confidence", to_string(c.confidence)}};
}

/// `has_seed` reports whether the document carried an explicit seed.
inline SyntheticSpec parse_synthetic(const Json& j, const std::string& path, bool* has_seed = nullptr) {
  SyntheticSpec s;
  detail::FieldReader r(j, path);
  r.read("count", s.count);
  r.read("image_size", s.image_size);
  r.read("min_polyps", s.min_polyps);
  r.read("max_polyps", s.max_polyps);
  r.read("radius_min", s.radius_min);
  r.read("radius_max", s.radius_max);
  r.read("background_min", s.background_min);
  r.read("background_max", s.background_max);
  r.read("foreground_min", s.foreground_min);
  r.read("foreground_max", s.foreground_max);
  r.read("noise_sigma", s.noise_sigma);
  if (has_seed) *has_seed = r.has("seed");
  r.read("seed", s.seed, true);
  r.finish();
  try {
    s.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(path.empty() ? e.field() : path + "." + e.field(), e.detail());
  }
  return s;
}

inline Json to_json(const SyntheticSpec& s) {
  return Json{{"count", s.count},
              {"image_size", s.image_size},
              {"min_polyps", s.min_polyps},
              {"max_polyps", s.max_polyps},
              {"radius_min", s.radius_min},
              {"radius_max", s.radius_max},
              {"background_min", s.background_min},
              {"background_max", s.background_max},
              {"foreground_min", s.foreground_min},
              {"foreground_max", s.foreground_max},
              {"noise_sigma", s.noise_sigma},
              {"seed", s.seed}};
}

// ---------------------------------------------------------------------------
// Whole run.

struct DataConfig {
  std::optional<std::string> root;         // folder dataset
  std::optional<SyntheticSpec> synthetic;  // generated in memory
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "run";
  ArchitectureConfig architecture;
  TrainConfig train;
  McConfig mc;
  DataConfig data;
};

inline constexpr const char* kSeedEnv = "BAYES_SEG_SEED";

/// Propagates the run seed into the train and MC sections.
inline void apply_seed(RunConfig& c, std::uint64_t seed) {
  c.seed = seed;
  c.train.seed = derive_seed(seed, "train");
  c.mc.seed = derive_seed(seed, "mc");
}

inline std::optional<std::uint64_t> seed_from_env() {
  const char* v = std::getenv(kSeedEnv);
  if (!v || !*v) return std::nullopt;
  char* end = nullptr;
  errno = 0;
  const unsigned long long s = std::strtoull(v, &end, 10);
  if (errno != 0 || *end != '\0' || v[0] == '-') throw ConfigError(kSeedEnv, "expected a non-negative integer");
  return static_cast<std::uint64_t>(s);
}

inline RunConfig parse_run_config(const Json& j, bool honour_env = true) {
  RunConfig c;
  detail::FieldReader r(j, "");
  r.read("seed", c.seed, true);
  r.read("output_dir", c.output_dir);
  if (const Json* a = r.get("architecture")) c.architecture = parse_architecture(*a);
  if (const Json* t = r.get("train")) c.train = parse_train(*t);
  if (const Json* m = r.get("mc")) c.mc = parse_mc(*m);
  const Json* d = r.get("data");
  if (!d) throw ConfigError("data", "missing (need data.root or data.synthetic)");
  detail::FieldReader dr(*d, "data");
  if (const Json* root = dr.get("root")) {
    if (!root->is_string()) throw ConfigError("data.root", "expected a string");
    c.data.root = root->get<std::string>();
  }
  bool synthetic_has_seed = false;
  if (const Json* s = dr.get("synthetic")) c.data.synthetic = parse_synthetic(*s, "data.synthetic", &synthetic_has_seed);
  dr.finish();
  if (c.data.root.has_value() == c.data.synthetic.has_value())
    throw ConfigError("data", "exactly one of data.root and data.synthetic is required");
  r.finish();

  if (honour_env)
    if (auto s = seed_from_env()) c.seed = *s;
  apply_seed(c, c.seed);
  if (c.data.synthetic && !synthetic_has_seed) c.data.synthetic->seed = derive_seed(c.seed, "synthetic");
  if (c.data.synthetic) {
    const bool explicit_size = d->at("synthetic").contains("image_size");
    if (explicit_size && c.data.synthetic->image_size != c.architecture.input_size)
      throw ConfigError("data.synthetic.image_size", "must equal architecture.input_size");
    c.data.synthetic->image_size = c.architecture.input_size;
    if (c.architecture.input_channels != 3)
      throw ConfigError("architecture.input_channels", "synthetic data has 3 channels");
  }
  return c;
}

inline Json to_json(const RunConfig& c) {
  Json data = Json::object();
  if (c.data.root) data["root"] = *c.data.root;
  if (c.data.synthetic) data["synthetic"] = to_json(*c.data.synthetic);
  return Json{{"seed", c.seed},
              {"output_dir", c.output_dir},
              {"architecture", to_json(c.architecture)},
              {"train", to_json(c.train)},
              {"mc", to_json(c.mc)},
              {"data", data}};
}

inline Json read_json_file(const std::filesystem::path& path, const std::string& what) {
  std::ifstream in(path);
  if (!in) throw ConfigError(what, "cannot open '" + path.string() + "'");
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ConfigError(what, std::string("invalid JSON: ") + e.what());
  }
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  return parse_run_config(read_json_file(path, "config"));
}

/// Loads the dataset named by the config and splits it with the run seed.
inline DatasetSplits load_splits(const RunConfig& c) {
  std::vector<Sample> samples;
  if (c.data.root) {
    if (!std::filesystem::is_directory(*c.data.root))
      throw ConfigError("data.root", "dataset not found: '" + *c.data.root + "'");
    samples = load_dataset(*c.data.root, c.architecture.input_size, c.architecture.input_channels);
  } else {
    samples = generate_synthetic(*c.data.synthetic);
  }
  return split_dataset(std::move(samples), derive_seed(c.seed, "split"));
}

}  // namespace bayesseg
