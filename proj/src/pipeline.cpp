#include "mmfm/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "mmfm/baselines.hpp"
#include "mmfm/error.hpp"
#include "mmfm/evalbench.hpp"

#ifndef MMFM_GIT_DESCRIBE
#define MMFM_GIT_DESCRIBE "unknown"
#endif

namespace mmfm {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

// Seed streams of the pipeline stages.
constexpr std::uint64_t kExtractorInit = 0x1001;
constexpr std::uint64_t kHeadInit = 0x2000;
constexpr std::uint64_t kPretrainStream = 0x7A11;
constexpr std::uint64_t kTrainStream = 0x7A12;
constexpr std::uint64_t kRmaxStream = 0x4A11;
constexpr std::uint64_t kDeployRmaxStream = 0x4A12;
constexpr std::uint64_t kEvalStream = 0xE7A1;
constexpr std::uint64_t kSweepStream = 0x5EE9;

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw FormatError(FormatError::Kind::kIo, "cannot write " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatError::Kind::kIo, "cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ordered_json parse_report(const std::string& text) { return ordered_json::parse(text); }

// First half adapts, second half evaluates.
std::pair<EnvironmentDataset, EnvironmentDataset> split_deploy(const EnvironmentDataset& d) {
  EnvironmentDataset adapt{d.spec, d.n_tx, {}};
  EnvironmentDataset test{d.spec, d.n_tx, {}};
  const std::size_t half = d.size() / 2;
  adapt.channels.assign(d.channels.begin(), d.channels.begin() + static_cast<long>(half));
  test.channels.assign(d.channels.begin() + static_cast<long>(half), d.channels.end());
  return {std::move(adapt), std::move(test)};
}

EnvironmentDataset head_slice(const EnvironmentDataset& d, std::size_t n) {
  EnvironmentDataset out{d.spec, d.n_tx, {}};
  n = std::min(n, d.size());
  out.channels.assign(d.channels.begin(), d.channels.begin() + static_cast<long>(n));
  return out;
}

}  // namespace

std::string build_version() { return MMFM_GIT_DESCRIBE; }

std::string file_digest(const fs::path& path) {
  const std::string bytes = read_text(path);
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return hex64(h);
}

Pipeline::Pipeline(RunConfig config, Logger log) : config_(std::move(config)), log_(std::move(log)) {
  if (const char* dir = std::getenv("MMFM_REPORT_DIR"); dir && *dir) {
    config_.paths.report_dir = dir;
  }
}

void Pipeline::emit(const std::string& line) const {
  if (log_) {
    log_(line);
  } else {
    std::cerr << line << '\n';
  }
}

fs::path Pipeline::dataset_path(const std::string& env_id) const {
  return fs::path(config_.paths.data_dir) / (env_id + ".csif");
}

fs::path Pipeline::checkpoint_path(const std::string& name) const {
  return fs::path(config_.paths.checkpoint_dir) / name;
}

fs::path Pipeline::head_path(const std::string& deploy_id, DeployMode mode) const {
  if (mode == DeployMode::kZeroShot) return checkpoint_path("heads/zero_shot.head");
  return checkpoint_path("heads/" + deploy_id + "." + to_string(mode) + ".head");
}

fs::path Pipeline::report_path(const std::string& name) const {
  return fs::path(config_.paths.report_dir) / name;
}

std::string Pipeline::eval_report_name() const {
  return "eval_" + config_.hash() + "_s" + std::to_string(config_.seed) + ".json";
}

fs::path Pipeline::require(const fs::path& path, const char* producer) const {
  if (!fs::exists(path)) {
    throw PrerequisiteError(path.string() + " does not exist; run the '" +
                            std::string(producer) + "' stage first");
  }
  return path;
}

EnvironmentSpec Pipeline::resolved_spec(const EnvironmentEntry& entry) const {
  EnvironmentSpec spec = entry.spec;
  spec.seed = config_.data_seed(entry);
  return spec;
}

EnvironmentDataset Pipeline::load_dataset(const EnvironmentEntry& entry,
                                          std::vector<fs::path>* inputs) const {
  const fs::path path = require(dataset_path(entry.spec.env_id), "gen-data");
  EnvironmentDataset d = read_dataset(path);
  const bool matches = d.spec.env_id == entry.spec.env_id && d.spec.los == entry.spec.los &&
                       d.n_tx == config_.system.n_tx && d.size() == entry.n_samples;
  if (!matches) {
    throw PrerequisiteError(path.string() +
                            " does not match the configuration; rerun the 'gen-data' stage");
  }
  d.spec = resolved_spec(entry);
  if (inputs) inputs->push_back(path);
  return d;
}

Pipeline::Anchors Pipeline::load_anchors(std::vector<fs::path>* inputs) const {
  const fs::path path = require(checkpoint_path("anchors.json"), "pretrain");
  Anchors a;
  try {
    const json doc = json::parse(read_text(path));
    a.csi_scale = doc.at("csi_scale").get<double>();
    for (const auto& [id, v] : doc.at("rmax").items()) a.rmax[id] = v.get<double>();
  } catch (const json::exception& e) {
    throw FormatError(FormatError::Kind::kTruncated,
                      path.string() + " is malformed: " + e.what());
  }
  for (const EnvironmentEntry* e : config_.training_entries()) {
    if (!a.rmax.count(e->spec.env_id)) {
      throw PrerequisiteError(path.string() + " has no anchor for '" + e->spec.env_id +
                              "'; rerun the 'pretrain' stage");
    }
  }
  if (inputs) inputs->push_back(path);
  return a;
}

Model Pipeline::load_model(const std::string& name, const char* producer,
                           std::vector<fs::path>* inputs) const {
  const fs::path path = require(checkpoint_path(name), producer);
  Model m = read_checkpoint(path);
  ModelHyper want = config_.model_hyper();
  const ModelHyper& got = m.hyper;
  if (got.n_tx != want.n_tx || got.n_users != want.n_users || got.embed_dim != want.embed_dim ||
      got.ffn_dim != want.ffn_dim || got.n_heads != want.n_heads ||
      got.n_layers != want.n_layers || got.user_positions != want.user_positions) {
    throw PrerequisiteError(path.string() + " was trained with different model dimensions; rerun '" +
                            std::string(producer) + "'");
  }
  for (const EnvironmentEntry* e : config_.training_entries()) {
    if (!m.heads.count(e->spec.env_id)) {
      throw PrerequisiteError(path.string() + " has no head for '" + e->spec.env_id +
                              "'; rerun '" + std::string(producer) + "'");
    }
  }
  if (inputs) inputs->push_back(path);
  return m;
}

StageResult Pipeline::finish(StageResult r) const {
  ordered_json m;
  m["stage"] = r.stage;
  m["config_hash"] = config_.hash();
  m["seed"] = config_.seed;
  m["version"] = build_version();
  m["config"] = config_.to_json();
  auto files = [](const std::vector<fs::path>& paths) {
    ordered_json list = ordered_json::array();
    for (const auto& p : paths) {
      list.push_back({{"path", p.generic_string()}, {"fnv1a", file_digest(p)}});
    }
    return list;
  };
  m["inputs"] = files(r.inputs);
  m["outputs"] = files(r.outputs);
  m["metrics"] = r.metrics;
  r.manifest = report_path(r.stage + ".manifest.json");
  write_text(r.manifest, m.dump(2) + "\n");
  emit(r.stage + ": wrote " + r.manifest.string());
  return r;
}

StageResult Pipeline::gen_data() {
  StageResult r;
  r.stage = "gen-data";
  for (const auto& entry : config_.channel) {
    const EnvironmentDataset d = generate_dataset(resolved_spec(entry), config_.system, entry.n_samples);
    const fs::path path = dataset_path(entry.spec.env_id);
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    write_dataset(d, path);
    r.outputs.push_back(path);
    r.metrics[entry.spec.env_id] = {{"n_samples", d.size()},
                                    {"role", entry.deploy ? "deploy" : "train"}};
    emit("gen-data: " + entry.spec.env_id + " " + std::to_string(d.size()) + " channels");
  }
  return finish(std::move(r));
}

StageResult Pipeline::pretrain() {
  StageResult r;
  r.stage = "pretrain";
  std::vector<EnvironmentDataset> data;
  for (const EnvironmentEntry* e : config_.training_entries()) data.push_back(load_dataset(*e, &r.inputs));

  ModelHyper hyper = config_.model_hyper();
  Anchors anchors;
  double power = 0.0;
  std::vector<TrainingEnvironment> envs;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const EnvironmentDataset& d = data[i];
    if (d.size() < static_cast<std::size_t>(config_.system.n_users)) {
      throw ConfigError("training environment '" + d.spec.env_id + "' needs at least n_users channels");
    }
    const double rmax = wmmse_rate_bound(d, config_.system, config_.train.rmax_samples,
                                         derive_seed(config_.seed, kRmaxStream + i));
    anchors.rmax[d.spec.env_id] = rmax;
    const double amp = d.spec.path_amplitude();
    power += amp * amp * d.mean_antenna_gain();
    envs.push_back({&data[i], rmax});
    emit("pretrain: rmax " + d.spec.env_id + " = " + std::to_string(rmax));
  }
  if (config_.auto_csi_scale) {
    hyper.csi_scale = 1.0 / std::sqrt(power / static_cast<double>(data.size()));
  }
  anchors.csi_scale = hyper.csi_scale;

  Model model;
  model.hyper = hyper;
  model.extractor = FeatureExtractor::initialized(hyper, derive_seed(config_.seed, kExtractorInit));
  for (std::size_t i = 0; i < data.size(); ++i) {
    model.heads.emplace(data[i].spec.env_id,
                        OutputHead::initialized(hyper, derive_seed(config_.seed, kHeadInit + i)));
  }

  TrainConfig tc = config_.train;
  tc.seed = derive_seed(config_.seed, kPretrainStream);
  Trainer trainer(model, config_.system, tc, envs);
  ordered_json log = ordered_json::array();
  for (int epoch = 0; epoch < tc.pretrain_epochs; ++epoch) {
    const EpochMetrics m = trainer.pretrain_epoch();
    const std::string line = m.to_json_line();
    emit(line);
    log.push_back(ordered_json::parse(line));
  }

  const fs::path ckpt = checkpoint_path("pretrain.ckpt");
  if (ckpt.has_parent_path()) fs::create_directories(ckpt.parent_path());
  write_checkpoint(model, ckpt);
  ordered_json a;
  a["csi_scale"] = anchors.csi_scale;
  a["rmax"] = ordered_json::object();
  for (const auto& [id, v] : anchors.rmax) a["rmax"][id] = v;
  const fs::path anchor_path = checkpoint_path("anchors.json");
  write_text(anchor_path, a.dump(2) + "\n");
  r.outputs = {ckpt, anchor_path};
  r.metrics["anchors"] = a;
  r.metrics["epochs"] = log;
  return finish(std::move(r));
}

StageResult Pipeline::train() {
  StageResult r;
  r.stage = "train";
  Model model = load_model("pretrain.ckpt", "pretrain", &r.inputs);
  const Anchors anchors = load_anchors(&r.inputs);
  std::vector<EnvironmentDataset> data;
  for (const EnvironmentEntry* e : config_.training_entries()) data.push_back(load_dataset(*e, &r.inputs));
  std::vector<TrainingEnvironment> envs;
  for (const auto& d : data) envs.push_back({&d, anchors.rmax.at(d.spec.env_id)});

  TrainConfig tc = config_.train;
  tc.seed = derive_seed(config_.seed, kTrainStream);
  Trainer trainer(model, config_.system, tc, envs);
  ordered_json log = ordered_json::array();
  for (int epoch = 0; epoch < tc.train_epochs; ++epoch) {
    const EpochMetrics m = trainer.multiobjective_epoch();
    const std::string line = m.to_json_line();
    emit(line);
    log.push_back(ordered_json::parse(line));
  }
  const fs::path ckpt = checkpoint_path("model.ckpt");
  write_checkpoint(model, ckpt);
  r.outputs = {ckpt};
  r.metrics["epochs"] = log;
  return finish(std::move(r));
}

StageResult Pipeline::adapt() {
  StageResult r;
  r.stage = "adapt";
  const Model model = load_model("model.ckpt", "train", &r.inputs);
  const Anchors anchors = load_anchors(&r.inputs);
  std::vector<EnvironmentDataset> data;
  for (const EnvironmentEntry* e : config_.training_entries()) data.push_back(load_dataset(*e, &r.inputs));
  std::vector<TrainingEnvironment> envs;
  for (const auto& d : data) envs.push_back({&d, anchors.rmax.at(d.spec.env_id)});

  Deployer deployer(model.extractor, model.hyper, config_.system, config_.head_train_config(), envs,
                    config_.adaptation_options());
  const fs::path zs_path = head_path("", DeployMode::kZeroShot);
  fs::create_directories(zs_path.parent_path());
  emit("adapt: training the default head");
  write_head(deployer.zero_shot_head(), model.hyper, "zero_shot", zs_path);
  r.outputs.push_back(zs_path);

  for (const EnvironmentEntry* e : config_.deploy_entries()) {
    const EnvironmentDataset full = load_dataset(*e, &r.inputs);
    const auto [local, test] = split_deploy(full);
    const std::string& id = e->spec.env_id;
    const bool adapts = std::any_of(config_.adapt.modes.begin(), config_.adapt.modes.end(),
                                    [](DeployMode m) { return m != DeployMode::kZeroShot; });
    if (local.size() < static_cast<std::size_t>(config_.system.n_users)) {
      if (!adapts) continue;
      throw InvalidArgument("deployment environment '" + id + "' has " +
                            std::to_string(local.size()) +
                            " adaptation channels, fewer than n_users; only zero_shot is possible");
    }

    SimilarityReport report = deployer.similarity(local);
    const fs::path sim_path = report_path("similarity_" + id + ".json");
    write_text(sim_path, report.to_json() + "\n");
    r.outputs.push_back(sim_path);
    r.metrics[id]["selected"] = report.selected;

    for (DeployMode mode : config_.adapt.modes) {
      if (mode == DeployMode::kZeroShot) continue;
      const EnvironmentDataset pool =
          mode == DeployMode::kFewShot
              ? head_slice(local, static_cast<std::size_t>(config_.adapt.few_shot_samples))
              : local;
      emit("adapt: " + id + " " + to_string(mode) + " on " + std::to_string(pool.size()) +
           " local channels");
      const OutputHead head = deployer.deploy(mode, pool);
      const fs::path path = head_path(id, mode);
      write_head(head, model.hyper, id, path);
      r.outputs.push_back(path);
      r.metrics[id][to_string(mode)] = {{"local_channels", pool.size()}};
    }
  }
  return finish(std::move(r));
}

StageResult Pipeline::eval() {
  StageResult r;
  r.stage = "eval";
  const Model model = load_model("model.ckpt", "train", &r.inputs);
  const SystemConfig& sys = config_.system;
  const int n_eval = config_.eval.n_eval;
  const std::uint64_t seed = derive_seed(config_.seed, kEvalStream);

  std::vector<EnvironmentDataset> data;
  for (const EnvironmentEntry* e : config_.training_entries()) data.push_back(load_dataset(*e, &r.inputs));

  ordered_json report;
  report["config_hash"] = config_.hash();
  report["seed"] = config_.seed;
  report["n_eval"] = n_eval;
  report["training"] = ordered_json::object();
  for (const auto& d : data) {
    const std::string& id = d.spec.env_id;
    const MaxRateResult res = max_sum_rate_eval(
        model_policy(model.extractor, model.heads.at(id), model.hyper, sys), d, sys, n_eval, seed,
        config_.eval.wmmse);
    report["training"][id] = parse_report(res.to_json());
    emit("eval: " + id + " model " + std::to_string(res.model) + " zf " + std::to_string(res.zf));
  }

  if (config_.eval.cross_site) {
    std::vector<OutputHead> heads;
    std::vector<const EnvironmentDataset*> pools;
    ordered_json ids = ordered_json::array();
    for (const auto& d : data) {
      heads.push_back(model.heads.at(d.spec.env_id));
      pools.push_back(&d);
      ids.push_back(d.spec.env_id);
    }
    const RMatrix table = cross_site_matrix(model.extractor, heads, pools, model.hyper, sys, n_eval, seed);
    ordered_json rows = ordered_json::array();
    for (Eigen::Index i = 0; i < table.rows(); ++i) {
      ordered_json row = ordered_json::array();
      for (Eigen::Index j = 0; j < table.cols(); ++j) row.push_back(table(i, j));
      rows.push_back(row);
    }
    report["cross_site"] = {{"env_ids", ids},
                            {"matrix", rows},
                            {"diagonal_mean", diagonal_mean(table)},
                            {"off_diagonal_mean", off_diagonal_mean(table)}};
  }

  report["deploy"] = ordered_json::object();
  for (const EnvironmentEntry* e : config_.deploy_entries()) {
    const std::string& id = e->spec.env_id;
    const EnvironmentDataset test = split_deploy(load_dataset(*e, &r.inputs)).second;
    if (test.size() < static_cast<std::size_t>(sys.n_users)) {
      throw ConfigError("deployment environment '" + id + "' has too few held-out channels");
    }
    for (DeployMode mode : config_.adapt.modes) {
      const fs::path path = require(head_path(id, mode), "adapt");
      const OutputHead head = read_head(model.hyper, path);
      r.inputs.push_back(path);
      const MaxRateResult res = max_sum_rate_eval(model_policy(model.extractor, head, model.hyper, sys),
                                                  test, sys, n_eval, seed, config_.eval.wmmse);
      report["deploy"][id][to_string(mode)] = parse_report(res.to_json());
      emit("eval: " + id + " " + to_string(mode) + " model " + std::to_string(res.model) + " zf " +
           std::to_string(res.zf));
    }
  }

  const fs::path out = report_path(eval_report_name());
  write_text(out, report.dump(2) + "\n");
  r.outputs = {out};
  r.metrics = report;
  return finish(std::move(r));
}

StageResult Pipeline::sweep() {
  StageResult r;
  r.stage = "sweep";
  const Model model = load_model("model.ckpt", "train", &r.inputs);
  const Anchors anchors = load_anchors(&r.inputs);
  const SystemConfig& sys = config_.system;
  const int n = config_.eval.sweep_points;
  const std::uint64_t seed = derive_seed(config_.seed, kSweepStream);

  ordered_json summary = ordered_json::object();
  auto run = [&](const std::string& name, const OutputHead& head, const EnvironmentDataset& d,
                 double rmax) {
    const auto points = tradeoff_sweep(model_policy(model.extractor, head, model.hyper, sys), d, sys,
                                       rmax, n, seed);
    const fs::path csv = report_path("sweep_" + name + ".csv");
    if (csv.has_parent_path()) fs::create_directories(csv.parent_path());
    write_tradeoff_csv(points, csv);
    r.outputs.push_back(csv);
    const SweepSummary s = summarize_sweep(points);
    ordered_json js = parse_report(s.to_json());
    js["rmax"] = rmax;
    summary[name] = js;
    emit("sweep: " + name + " error " + std::to_string(s.mean_relative_rate_error) +
         " spearman " + std::to_string(s.spearman_energy));
  };

  for (const EnvironmentEntry* e : config_.training_entries()) {
    const EnvironmentDataset d = load_dataset(*e, &r.inputs);
    run(e->spec.env_id, model.heads.at(e->spec.env_id), d, anchors.rmax.at(e->spec.env_id));
  }
  for (std::size_t k = 0; k < config_.deploy_entries().size(); ++k) {
    const EnvironmentEntry* e = config_.deploy_entries()[k];
    const EnvironmentDataset test = split_deploy(load_dataset(*e, &r.inputs)).second;
    if (test.size() < static_cast<std::size_t>(sys.n_users)) {
      throw ConfigError("deployment environment '" + e->spec.env_id + "' has too few held-out channels");
    }
    const double rmax = wmmse_rate_bound(test, sys, std::min<int>(config_.train.rmax_samples, static_cast<int>(test.size())),
                                         derive_seed(config_.seed, kDeployRmaxStream + k));
    for (DeployMode mode : config_.adapt.modes) {
      const fs::path path = require(head_path(e->spec.env_id, mode), "adapt");
      r.inputs.push_back(path);
      run(e->spec.env_id + "." + to_string(mode), read_head(model.hyper, path), test, rmax);
    }
  }

  const fs::path out = report_path("sweep_summary.json");
  write_text(out, summary.dump(2) + "\n");
  r.outputs.push_back(out);
  r.metrics = summary;
  return finish(std::move(r));
}

StageResult Pipeline::flops(int wmmse_iterations) {
  StageResult r;
  r.stage = "flops";
  const SystemConfig& sys = config_.system;
  ordered_json algos = ordered_json::object();
  for (FlopAlgorithm a : {FlopAlgorithm::kZf, FlopAlgorithm::kWmmse, FlopAlgorithm::kProposed}) {
    const FlopReport f = flop_report(a, sys.n_users, sys.n_tx, wmmse_iterations);
    algos[to_string(a)] = {{"flops", f.flops},
                           {"millions", f.millions},
                           {"display_millions", f.display_millions}};
    emit("flops: " + to_string(a) + " " + std::to_string(f.display_millions) + "M");
  }
  ordered_json audit = ordered_json::array();
  const auto layers = model_flop_audit(config_.model_hyper());
  for (const auto& l : layers) audit.push_back({{"layer", l.name}, {"flops", l.flops}});
  r.metrics["closed_form"] = algos;
  r.metrics["wmmse_iterations"] = wmmse_iterations;
  r.metrics["model_audit"] = audit;
  r.metrics["model_audit_total"] = total_flops(layers);
  const fs::path out = report_path("flops.json");
  write_text(out, r.metrics.dump(2) + "\n");
  r.outputs = {out};
  return finish(std::move(r));
}

}  // namespace mmfm
