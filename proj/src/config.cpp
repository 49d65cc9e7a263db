#include "mmfm/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "mmfm/error.hpp"

namespace mmfm {

namespace {

using nlohmann::json;

// Pulls known keys out of one JSON object and rejects the rest.
class Section {
 public:
  Section(const json& doc, std::string name) : doc_(doc), name_(std::move(name)) {
    if (!doc_.is_object()) throw ConfigError("'" + name_ + "' must be an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!doc_.contains(key)) return;
    try {
      out = doc_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError("'" + name_ + "." + key + "' has the wrong type (got " +
                        doc_.at(key).dump() + ")");
    }
  }

  template <typename T>
  void get(const char* key, std::optional<T>& out) {
    seen_.insert(key);
    if (!doc_.contains(key)) return;
    if (doc_.at(key).is_null()) {
      out.reset();
      return;
    }
    T value{};
    get(key, value);
    out = value;
  }

  const json* child(const char* key) {
    seen_.insert(key);
    return doc_.contains(key) ? &doc_.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& [key, value] : doc_.items()) {
      if (!seen_.count(key)) throw ConfigError("unknown key '" + name_ + "." + key + "'");
    }
  }

 private:
  const json& doc_;
  std::string name_;
  std::set<std::string> seen_;
};

ArrayLayout parse_layout(const std::string& s) {
  if (s == "upa") return ArrayLayout::kUpa;
  if (s == "ula") return ArrayLayout::kUla;
  throw ConfigError("unknown array layout '" + s + "' (expected upa or ula)");
}

std::string layout_name(ArrayLayout a) { return a == ArrayLayout::kUpa ? "upa" : "ula"; }

EnvironmentEntry parse_environment(const json& doc, const std::string& where) {
  Section s(doc, where);
  EnvironmentEntry e;
  EnvironmentSpec& spec = e.spec;
  std::string array = layout_name(spec.array);
  std::string role = "train";
  s.get("env_id", spec.env_id);
  s.get("los", spec.los);
  s.get("n_clusters", spec.n_clusters);
  s.get("angle_spread", spec.angle_spread);
  s.get("mean_azimuth", spec.mean_azimuth);
  s.get("mean_elevation", spec.mean_elevation);
  s.get("rician_k", spec.rician_k);
  s.get("gain_db_spread", spec.gain_db_spread);
  s.get("seed", spec.seed);
  s.get("path_loss_db", spec.path_loss_db);
  s.get("rays_per_cluster", spec.rays_per_cluster);
  s.get("cluster_spread", spec.cluster_spread);
  s.get("array", array);
  s.get("n_samples", e.n_samples);
  s.get("role", role);
  s.finish();
  spec.array = parse_layout(array);
  if (role != "train" && role != "deploy") {
    throw ConfigError("'" + where + ".role' must be train or deploy, got '" + role + "'");
  }
  e.deploy = role == "deploy";
  return e;
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

template <typename F>
void rethrow_as_config(const std::string& what, F&& f) {
  try {
    f();
  } catch (const InvalidArgument& e) {
    throw ConfigError(what + ": " + e.what());
  }
}

}  // namespace

RunConfig RunConfig::from_json(const json& doc) {
  RunConfig c;
  Section top(doc, "config");
  top.get("seed", c.seed);

  if (const json* sys = top.child("system")) {
    Section s(*sys, "system");
    s.get("n_tx", c.system.n_tx);
    s.get("n_users", c.system.n_users);
    s.get("p_tx", c.system.p_tx);
    s.get("p_rf", c.system.p_rf);
    s.get("noise_power", c.system.noise_power);
    s.finish();
  }

  if (const json* ch = top.child("channel")) {
    if (!ch->is_array()) throw ConfigError("'channel' must be a list of environments");
    for (std::size_t i = 0; i < ch->size(); ++i) {
      c.channel.push_back(parse_environment((*ch)[i], "channel." + std::to_string(i)));
    }
  }

  if (const json* m = top.child("model")) {
    Section s(*m, "model");
    s.get("embed_dim", c.model.embed_dim);
    s.get("ffn_dim", c.model.ffn_dim);
    s.get("n_heads", c.model.n_heads);
    s.get("n_layers", c.model.n_layers);
    s.get("dropout", c.model.dropout);
    s.get("user_positions", c.model.user_positions);
    if (const json* scale = s.child("csi_scale")) {
      if (scale->is_string() && scale->get<std::string>() == "auto") {
        c.auto_csi_scale = true;
      } else if (scale->is_number()) {
        c.auto_csi_scale = false;
        c.model.csi_scale = scale->get<double>();
      } else {
        throw ConfigError("'model.csi_scale' must be a number or \"auto\"");
      }
    }
    s.finish();
  }

  if (const json* t = top.child("train")) {
    Section s(*t, "train");
    s.get("mu", c.train.mu);
    s.get("clamp_threshold", c.train.clamp_threshold);
    s.get("learning_rate", c.train.learning_rate);
    s.get("batch_size", c.train.batch_size);
    s.get("batches_per_epoch", c.train.batches_per_epoch);
    s.get("pretrain_epochs", c.train.pretrain_epochs);
    s.get("train_epochs", c.train.train_epochs);
    s.get("rate_decay", c.train.rate_decay);
    s.get("rmax_samples", c.train.rmax_samples);
    s.finish();
  }

  if (const json* a = top.child("adapt")) {
    Section s(*a, "adapt");
    s.get("n_select", c.adapt.n_select);
    s.get("feature_samples", c.adapt.feature_samples);
    s.get("local_weight", c.adapt.local_weight);
    s.get("few_shot_fraction", c.adapt.few_shot_fraction);
    s.get("few_shot_samples", c.adapt.few_shot_samples);
    s.get("head_learning_rate", c.adapt.head_learning_rate);
    s.get("head_pretrain_epochs", c.adapt.head_pretrain_epochs);
    s.get("head_train_epochs", c.adapt.head_train_epochs);
    std::vector<std::string> modes;
    s.get("modes", modes);
    s.finish();
    if (a->contains("modes")) {
      c.adapt.modes.clear();
      for (const auto& m : modes) {
        rethrow_as_config("adapt.modes", [&] { c.adapt.modes.push_back(parse_deploy_mode(m)); });
      }
    }
  }

  if (const json* e = top.child("eval")) {
    Section s(*e, "eval");
    s.get("n_eval", c.eval.n_eval);
    s.get("sweep_points", c.eval.sweep_points);
    s.get("cross_site", c.eval.cross_site);
    s.get("wmmse", c.eval.wmmse);
    s.finish();
  }

  if (const json* p = top.child("paths")) {
    Section s(*p, "paths");
    s.get("data_dir", c.paths.data_dir);
    s.get("checkpoint_dir", c.paths.checkpoint_dir);
    s.get("report_dir", c.paths.report_dir);
    s.finish();
  }
  top.finish();
  c.validate();
  return c;
}

nlohmann::ordered_json RunConfig::to_json() const {
  nlohmann::ordered_json j;
  j["seed"] = seed;
  j["system"] = {{"n_tx", system.n_tx},
                 {"n_users", system.n_users},
                 {"p_tx", system.p_tx},
                 {"p_rf", system.p_rf},
                 {"noise_power", system.noise_power}};
  j["channel"] = nlohmann::ordered_json::array();
  for (const auto& e : channel) {
    const EnvironmentSpec& s = e.spec;
    j["channel"].push_back({{"env_id", s.env_id},
                            {"role", e.deploy ? "deploy" : "train"},
                            {"n_samples", e.n_samples},
                            {"los", s.los},
                            {"n_clusters", s.n_clusters},
                            {"angle_spread", s.angle_spread},
                            {"mean_azimuth", s.mean_azimuth},
                            {"mean_elevation", s.mean_elevation},
                            {"rician_k", s.rician_k},
                            {"gain_db_spread", s.gain_db_spread},
                            {"seed", s.seed},
                            {"path_loss_db", s.path_loss_db},
                            {"rays_per_cluster", s.rays_per_cluster},
                            {"cluster_spread", s.cluster_spread},
                            {"array", layout_name(s.array)}});
  }
  nlohmann::ordered_json m = {{"embed_dim", model.embed_dim},
                              {"ffn_dim", model.ffn_dim},
                              {"n_heads", model.n_heads},
                              {"n_layers", model.n_layers},
                              {"dropout", model.dropout},
                              {"user_positions", model.user_positions}};
  if (auto_csi_scale) {
    m["csi_scale"] = "auto";
  } else {
    m["csi_scale"] = model.csi_scale;
  }
  j["model"] = m;
  j["train"] = {{"mu", train.mu},
                {"clamp_threshold", train.clamp_threshold},
                {"learning_rate", train.learning_rate},
                {"batch_size", train.batch_size},
                {"batches_per_epoch", train.batches_per_epoch},
                {"pretrain_epochs", train.pretrain_epochs},
                {"train_epochs", train.train_epochs},
                {"rate_decay", train.rate_decay},
                {"rmax_samples", train.rmax_samples}};
  std::vector<std::string> modes;
  for (DeployMode mode : adapt.modes) modes.push_back(to_string(mode));
  j["adapt"] = {{"n_select", adapt.n_select},
                {"feature_samples", adapt.feature_samples},
                {"local_weight", adapt.local_weight},
                {"few_shot_fraction", adapt.few_shot_fraction},
                {"few_shot_samples", adapt.few_shot_samples},
                {"head_learning_rate", nullptr},
                {"head_pretrain_epochs", nullptr},
                {"head_train_epochs", nullptr},
                {"modes", modes}};
  if (adapt.head_learning_rate) j["adapt"]["head_learning_rate"] = *adapt.head_learning_rate;
  if (adapt.head_pretrain_epochs) j["adapt"]["head_pretrain_epochs"] = *adapt.head_pretrain_epochs;
  if (adapt.head_train_epochs) j["adapt"]["head_train_epochs"] = *adapt.head_train_epochs;
  j["eval"] = {{"n_eval", eval.n_eval},
               {"sweep_points", eval.sweep_points},
               {"cross_site", eval.cross_site},
               {"wmmse", eval.wmmse}};
  j["paths"] = {{"data_dir", paths.data_dir},
                {"checkpoint_dir", paths.checkpoint_dir},
                {"report_dir", paths.report_dir}};
  return j;
}

void RunConfig::validate() const {
  rethrow_as_config("system", [&] { system.validate(); });
  rethrow_as_config("model", [&] { model_hyper().validate_against(system); });
  rethrow_as_config("train", [&] { train.validate(); });
  if (channel.empty()) throw ConfigError("'channel' must list at least one environment");
  std::set<std::string> ids;
  for (const auto& e : channel) {
    rethrow_as_config("channel '" + e.spec.env_id + "'", [&] { e.spec.validate(); });
    if (!ids.insert(e.spec.env_id).second) {
      throw ConfigError("duplicate env_id '" + e.spec.env_id + "' in 'channel'");
    }
    if (e.spec.array == ArrayLayout::kUpa) {
      rethrow_as_config("channel '" + e.spec.env_id + "'", [&] {
        (void)steering_vector(0.0, 0.0, system, ArrayLayout::kUpa);
      });
    }
  }
  if (training_entries().empty()) throw ConfigError("'channel' has no training environment");
  rethrow_as_config("adapt", [&] {
    adaptation_options().validate();
    head_train_config().validate();
  });
  if (adapt.few_shot_samples < system.n_users) {
    throw ConfigError("'adapt.few_shot_samples' must be at least system.n_users");
  }
  if (eval.n_eval < 1) throw ConfigError("'eval.n_eval' must be >= 1");
  if (eval.sweep_points < 1) throw ConfigError("'eval.sweep_points' must be >= 1");
  if (!auto_csi_scale && !(model.csi_scale > 0.0)) {
    throw ConfigError("'model.csi_scale' must be positive");
  }
}

std::string RunConfig::hash() const {
  json canonical = json::parse(to_json().dump());  // sorts keys
  canonical.erase("paths");  // output locations do not change results
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a(canonical.dump())));
  return buf;
}

std::vector<const EnvironmentEntry*> RunConfig::training_entries() const {
  std::vector<const EnvironmentEntry*> out;
  for (const auto& e : channel) {
    if (!e.deploy) out.push_back(&e);
  }
  return out;
}

std::vector<const EnvironmentEntry*> RunConfig::deploy_entries() const {
  std::vector<const EnvironmentEntry*> out;
  for (const auto& e : channel) {
    if (e.deploy) out.push_back(&e);
  }
  return out;
}

std::uint64_t RunConfig::data_seed(const EnvironmentEntry& entry) const {
  return derive_seed(seed, entry.spec.seed);
}

TrainConfig RunConfig::head_train_config() const {
  TrainConfig t = train;
  if (adapt.head_learning_rate) t.learning_rate = *adapt.head_learning_rate;
  if (adapt.head_pretrain_epochs) t.pretrain_epochs = *adapt.head_pretrain_epochs;
  if (adapt.head_train_epochs) t.train_epochs = *adapt.head_train_epochs;
  return t;
}

AdaptationOptions RunConfig::adaptation_options() const {
  AdaptationOptions opt;
  opt.n_select = adapt.n_select;
  opt.feature_samples = adapt.feature_samples;
  opt.local_weight = adapt.local_weight;
  opt.few_shot_fraction = adapt.few_shot_fraction;
  opt.seed = derive_seed(seed, 0xAD);
  return opt;
}

ModelHyper RunConfig::model_hyper() const {
  ModelHyper h = model;
  h.n_tx = system.n_tx;
  h.n_users = system.n_users;
  return h;
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + assignment + "' is not of the form key=value");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::exception&) {
    value = text;
  }

  json* node = &doc;
  std::stringstream path(key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(path, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const std::string& p = parts[i];
    if (p.empty()) throw ConfigError("override key '" + key + "' has an empty segment");
    const bool last = i + 1 == parts.size();
    if (node->is_array()) {
      std::size_t index = 0;
      try {
        std::size_t used = 0;
        index = std::stoul(p, &used);
        if (used != p.size()) throw std::invalid_argument(p);
      } catch (const std::exception&) {
        throw ConfigError("override key '" + key + "': '" + p + "' is not a list index");
      }
      if (index >= node->size()) {
        throw ConfigError("override key '" + key + "': index " + p + " out of range");
      }
      node = &(*node)[index];
    } else {
      if (node->is_null()) *node = json::object();
      if (!node->is_object()) {
        throw ConfigError("override key '" + key + "': '" + p + "' is not inside an object");
      }
      node = &(*node)[p];
    }
    if (last) *node = value;
  }
}

RunConfig parse_config(const std::string& text, const std::vector<std::string>& overrides,
                       std::optional<std::uint64_t> seed) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  for (const auto& o : overrides) apply_override(doc, o);
  if (seed) doc["seed"] = *seed;
  return RunConfig::from_json(doc);
}

RunConfig load_config(const std::filesystem::path& path,
                      const std::vector<std::string>& overrides,
                      std::optional<std::uint64_t> seed) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), overrides, seed);
}

}  // namespace mmfm
