#include "mmfm/training.hpp"

#include <algorithm>

#include "json.hpp"
#include "mmfm/error.hpp"

namespace mmfm {

namespace {

LossValue rate_loss(const ChannelMatrix& channel, const PrecodingSolution& solution,
                    const SystemConfig& cfg, const RVector& loss_wrt_rates,
                    double value) {
  return {value, user_rates_backward(channel, solution, cfg, loss_wrt_rates)};
}

void check_loss(double value, const std::string& phase, int env) {
  if (!std::isfinite(value)) {
    throw NumericalError(phase + ": non-finite loss in environment " +
                         std::to_string(env));
  }
}

std::vector<ChannelMatrix> flatten(const std::vector<std::vector<ChannelMatrix>>& v) {
  std::vector<ChannelMatrix> out;
  for (const auto& x : v) out.insert(out.end(), x.begin(), x.end());
  return out;
}

std::vector<RateRequest> flatten(const std::vector<std::vector<RateRequest>>& v) {
  std::vector<RateRequest> out;
  for (const auto& x : v) out.insert(out.end(), x.begin(), x.end());
  return out;
}

}  // namespace

LossValue loss_adaptive_rate(const ChannelMatrix& channel,
                             const PrecodingSolution& solution,
                             const RateRequest& request, const SystemConfig& cfg) {
  request.validate(cfg.n_users);
  const RVector rates = user_rates(channel, solution, cfg);
  const RVector diff = rates - request.targets;
  const double n = static_cast<double>(cfg.n_users);
  return rate_loss(channel, solution, cfg, 2.0 * diff / n,
                   diff.squaredNorm() / n);
}

LossValue loss_total(const ChannelMatrix& channel,
                     const PrecodingSolution& solution,
                     const RateRequest& request, const SystemConfig& cfg,
                     double mu) {
  if (!(mu > 0.0 && mu <= 1.0)) throw InvalidArgument("mu must lie in (0, 1]");
  LossValue ar = loss_adaptive_rate(channel, solution, request, cfg);
  const double scale = cfg.max_energy();
  LossValue out;
  out.value = mu * ar.value + (1.0 - mu) * energy(solution, cfg) / scale;
  out.grad.precoder = mu * ar.grad.precoder;
  out.grad.mask = mu * ar.grad.mask +
                  RVector::Constant(cfg.n_tx, (1.0 - mu) * cfg.p_rf / scale);
  out.grad.gamma = mu * ar.grad.gamma + (1.0 - mu) * cfg.p_tx / scale;
  return out;
}

LossValue loss_negative_sum_rate(const ChannelMatrix& channel,
                                 const PrecodingSolution& solution,
                                 const SystemConfig& cfg) {
  const RVector rates = user_rates(channel, solution, cfg);
  return rate_loss(channel, solution, cfg, RVector::Constant(cfg.n_users, -1.0), -rates.sum());
}

RateRequest sample_rate_requirements(double rmax, int n_users,
                                     std::mt19937_64& rng) {
  if (!(rmax > 0.0)) throw InvalidArgument("rmax must be positive");
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  RVector draw(n_users);
  double total = 0.0;
  do {
    for (int u = 0; u < n_users; ++u) draw[u] = unit(rng);
    total = draw.sum();
  } while (total <= 0.0);
  const double beta = unit(rng);
  return {draw * (beta * rmax / total)};
}

void TrainConfig::validate() const {
  if (!(mu > 0.0 && mu < 1.0)) throw InvalidArgument("mu must lie in (0, 1)");
  if (!(clamp_threshold >= 1.0)) throw InvalidArgument("clamp threshold must be >= 1");
  if (!(learning_rate > 0.0)) throw InvalidArgument("learning rate must be positive");
  if (batch_size < 1 || batches_per_epoch < 1) {
    throw InvalidArgument("batch sizes must be positive");
  }
  if (pretrain_epochs < 0 || train_epochs < 0) {
    throw InvalidArgument("epoch counts must be non-negative");
  }
  if (!(rate_decay >= 0.0 && rate_decay < 1.0)) {
    throw InvalidArgument("rate_decay must lie in [0, 1)");
  }
  if (rmax_samples < 1) throw InvalidArgument("rmax_samples must be >= 1");
}

SiteWeights SiteWeights::initial(const RVector& rmax) {
  SiteWeights w;
  w.rmax = rmax;
  w.last_rates = RVector::Zero(rmax.size());
  w.alpha_raw = RVector::Ones(rmax.size());
  w.alpha = RVector::Constant(rmax.size(), 1.0 / std::max<Eigen::Index>(rmax.size(), 1));
  return w;
}

void SiteWeights::recompute(double clamp_threshold) {
  alpha_raw = (last_rates - rmax).array().square().cwiseMax(1.0).cwiseMin(clamp_threshold);
  alpha = alpha_raw / alpha_raw.sum();
}

void SiteWeights::observe(const RVector& batch_rates, double decay) {
  last_rates = decay * last_rates + (1.0 - decay) * batch_rates;
}

std::string EpochMetrics::to_json_line() const {
  nlohmann::ordered_json j;
  j["phase"] = phase;
  j["epoch"] = epoch;
  j["loss"] = loss;
  nlohmann::ordered_json rates = nlohmann::ordered_json::object();
  for (std::size_t e = 0; e < env_ids.size(); ++e) rates[env_ids[e]] = sum_rates[e];
  j["sum_rate"] = rates;
  j["alpha"] = alpha;
  return j.dump();
}

Trainer::Trainer(Model& model, const SystemConfig& cfg, const TrainConfig& train,
                 std::vector<TrainingEnvironment> envs)
    : model_(model), cfg_(cfg), train_(train), envs_(std::move(envs)), rng_(train.seed) {
  cfg_.validate();
  train_.validate();
  model_.hyper.validate_against(cfg_);
  if (envs_.empty()) throw InvalidArgument("training needs at least one environment");
  RVector rmax(envs_.size());
  for (std::size_t e = 0; e < envs_.size(); ++e) {
    const auto& env = envs_[e];
    if (env.data == nullptr || env.data->size() < static_cast<std::size_t>(cfg_.n_users)) {
      throw InvalidArgument("environment " + std::to_string(e) +
                            " has fewer channels than users");
    }
    if (!model_.heads.contains(env.data->spec.env_id)) {
      throw InvalidArgument("model has no head for environment " + env.data->spec.env_id);
    }
    if (!(env.rmax > 0.0)) throw InvalidArgument("R_max must be positive");
    ids_.push_back(env.data->spec.env_id);
    rmax[e] = env.rmax;
  }
  weights_ = SiteWeights::initial(rmax);
  extractor_opt_ = Adam<FeatureExtractor>(model_.extractor);
  for (const auto& id : ids_) head_opts_.emplace_back(model_.heads.at(id));
}

std::vector<std::vector<ChannelMatrix>> Trainer::draw_batches() {
  std::vector<std::vector<ChannelMatrix>> out(envs_.size());
  for (std::size_t e = 0; e < envs_.size(); ++e) {
    out[e].reserve(train_.batch_size);
    for (int i = 0; i < train_.batch_size; ++i) {
      out[e].push_back(build_multiuser_csi(*envs_[e].data, cfg_, rng_));
    }
  }
  return out;
}

void Trainer::apply(BatchResult& result) {
  extractor_opt_.step(model_.extractor, result.extractor_grad, train_.learning_rate);
  for (std::size_t e = 0; e < envs_.size(); ++e) {
    head_opts_[e].step(model_.heads.at(ids_[e]), result.head_grads[e],
                       train_.learning_rate);
  }
}

BatchResult Trainer::pretrain_batch() {
  const int k = static_cast<int>(envs_.size());
  const int batch = train_.batch_size;
  const int seq = model_.hyper.seq_len();
  weights_.recompute(train_.clamp_threshold);

  const auto channels = draw_batches();
  const auto flat = flatten(channels);
  const std::vector<RateRequest> requests(
      flat.size(), RateRequest::uniform(cfg_.n_users, kMaxRateRequest));
  const ExtractorTape tape = forward_extractor(model_.extractor, model_.hyper, flat,
                                               requests, Mode::kTrain, rng_);

  BatchResult result;
  result.sum_rates = RVector::Zero(k);
  result.losses = RVector::Zero(k);
  result.extractor_grad = zeros_like(model_.extractor);
  RMatrix d_features = RMatrix::Zero(tape.features.rows(), tape.features.cols());
  for (int e = 0; e < k; ++e) {
    const OutputHead& head = model_.heads.at(ids_[e]);
    const HeadTape head_tape =
        forward_head(head, model_.hyper, cfg_, tape, e * batch, batch);
    std::vector<SolutionGradient> upstream(batch);
    for (int i = 0; i < batch; ++i) {
      LossValue loss = loss_negative_sum_rate(channels[e][i],
                                              head_tape.outputs[i].solution, cfg_);
      result.sum_rates[e] -= loss.value / batch;
      upstream[i] = std::move(loss.grad);
      upstream[i].precoder /= batch;
      upstream[i].mask /= batch;
      upstream[i].gamma /= batch;
    }
    result.losses[e] = -result.sum_rates[e];
    check_loss(result.losses[e], "pre-training", e);
    OutputHead head_grad = zeros_like(head);
    const RMatrix d_env = backward_head(head, model_.hyper, cfg_, tape, e * batch,
                                        head_tape, upstream, head_grad);
    d_features.middleRows(static_cast<Eigen::Index>(e) * batch * seq, d_env.rows()) =
        weights_.alpha[e] * d_env;
    result.head_grads.push_back(std::move(head_grad));
  }
  backward_extractor(model_.extractor, model_.hyper, tape, d_features,
                     result.extractor_grad);
  apply(result);
  weights_.observe(result.sum_rates, train_.rate_decay);
  return result;
}

BatchResult Trainer::multiobjective_gradients(
    const std::vector<std::vector<ChannelMatrix>>& channels,
    const std::vector<std::vector<RateRequest>>& requests,
    std::mt19937_64& dropout_rng) const {
  const int k = static_cast<int>(envs_.size());
  if (static_cast<int>(channels.size()) != k || static_cast<int>(requests.size()) != k) {
    throw InvalidArgument("need one batch per environment");
  }
  const int seq = model_.hyper.seq_len();
  const auto flat = flatten(channels);
  const auto flat_requests = flatten(requests);
  const ExtractorTape tape = forward_extractor(model_.extractor, model_.hyper, flat,
                                               flat_requests, Mode::kTrain, dropout_rng);

  BatchResult result;
  result.sum_rates = RVector::Zero(k);
  result.losses = RVector::Zero(k);
  result.extractor_grad = zeros_like(model_.extractor);
  RMatrix d_features = RMatrix::Zero(tape.features.rows(), tape.features.cols());
  int first = 0;
  for (int e = 0; e < k; ++e) {
    const int batch = static_cast<int>(channels[e].size());
    const OutputHead& head = model_.heads.at(ids_[e]);
    const HeadTape head_tape = forward_head(head, model_.hyper, cfg_, tape, first, batch);
    // theta <- theta - lr * sum_e (1/k) grad L_e, L_e the batch-mean loss.
    const double scale = 1.0 / (static_cast<double>(batch) * k);
    std::vector<SolutionGradient> upstream(batch);
    for (int i = 0; i < batch; ++i) {
      const PrecodingSolution& sol = head_tape.outputs[i].solution;
      LossValue loss = loss_total(channels[e][i], sol, requests[e][i], cfg_, train_.mu);
      result.losses[e] += loss.value / batch;
      result.sum_rates[e] += sum_rate(channels[e][i], sol, cfg_) / batch;
      upstream[i] = std::move(loss.grad);
      upstream[i].precoder *= scale;
      upstream[i].mask *= scale;
      upstream[i].gamma *= scale;
    }
    check_loss(result.losses[e], "multi-objective training", e);
    OutputHead head_grad = zeros_like(head);
    const RMatrix d_env = backward_head(head, model_.hyper, cfg_, tape, first, head_tape,
                                        upstream, head_grad);
    d_features.middleRows(static_cast<Eigen::Index>(first) * seq, d_env.rows()) = d_env;
    result.head_grads.push_back(std::move(head_grad));
    first += batch;
  }
  backward_extractor(model_.extractor, model_.hyper, tape, d_features,
                     result.extractor_grad);
  return result;
}

BatchResult Trainer::multiobjective_batch() {
  const auto channels = draw_batches();
  std::vector<std::vector<RateRequest>> requests(envs_.size());
  for (std::size_t e = 0; e < envs_.size(); ++e) {
    for (int i = 0; i < train_.batch_size; ++i) {
      requests[e].push_back(sample_rate_requirements(envs_[e].rmax, cfg_.n_users, rng_));
    }
  }
  BatchResult result = multiobjective_gradients(channels, requests, rng_);
  apply(result);
  return result;
}

EpochMetrics Trainer::pretrain_epoch() {
  EpochMetrics m;
  m.phase = "pretrain";
  m.epoch = ++pretrain_epoch_;
  m.env_ids = ids_;
  RVector rates = RVector::Zero(envs_.size());
  for (int b = 0; b < train_.batches_per_epoch; ++b) {
    const BatchResult r = pretrain_batch();
    rates += r.sum_rates / train_.batches_per_epoch;
  }
  m.sum_rates.assign(rates.data(), rates.data() + rates.size());
  m.loss = -rates.mean();
  m.alpha.assign(weights_.alpha.data(), weights_.alpha.data() + weights_.alpha.size());
  return m;
}

EpochMetrics Trainer::multiobjective_epoch() {
  EpochMetrics m;
  m.phase = "train";
  m.epoch = ++train_epoch_;
  m.env_ids = ids_;
  RVector rates = RVector::Zero(envs_.size());
  double loss = 0.0;
  for (int b = 0; b < train_.batches_per_epoch; ++b) {
    const BatchResult r = multiobjective_batch();
    rates += r.sum_rates / train_.batches_per_epoch;
    loss += r.losses.mean() / train_.batches_per_epoch;
  }
  m.sum_rates.assign(rates.data(), rates.data() + rates.size());
  m.loss = loss;
  return m;
}

OutputHead train_head(const FeatureExtractor& theta, const ModelHyper& hyper,
                      const SystemConfig& cfg, const TrainConfig& train,
                      const std::vector<HeadSource>& sources, int pretrain_epochs,
                      int epochs, std::uint64_t seed) {
  train.validate();
  hyper.validate_against(cfg);
  if (sources.empty()) throw InvalidArgument("head training needs a data source");
  if (pretrain_epochs < 0 || epochs < 0) throw InvalidArgument("epoch counts must be >= 0");
  std::vector<double> mix;
  for (const auto& s : sources) {
    if (s.data == nullptr || s.data->size() < static_cast<std::size_t>(cfg.n_users)) {
      throw InvalidArgument("head training source has fewer channels than users");
    }
    if (!(s.rmax > 0.0) || !(s.weight > 0.0)) {
      throw InvalidArgument("head training sources need positive rmax and weight");
    }
    mix.push_back(s.weight);
  }

  std::mt19937_64 rng(seed);
  OutputHead head = OutputHead::initialized(hyper, derive_seed(seed, 0x4EADu));
  Adam<OutputHead> opt(head);
  std::discrete_distribution<std::size_t> pick(mix.begin(), mix.end());
  const int batch = train.batch_size;
  const RateRequest max_request = RateRequest::uniform(cfg.n_users, kMaxRateRequest);
  for (int epoch = 0; epoch < pretrain_epochs + epochs; ++epoch) {
    const bool pretraining = epoch < pretrain_epochs;
    for (int b = 0; b < train.batches_per_epoch; ++b) {
      std::vector<ChannelMatrix> channels;
      std::vector<RateRequest> requests;
      for (int i = 0; i < batch; ++i) {
        const HeadSource& s = sources[pick(rng)];
        channels.push_back(build_multiuser_csi(*s.data, cfg, rng));
        requests.push_back(pretraining ? max_request
                                       : sample_rate_requirements(s.rmax, cfg.n_users, rng));
      }
      // The extractor is frozen: features are computed without dropout.
      const ExtractorTape tape =
          forward_extractor(theta, hyper, channels, requests, Mode::kEval, rng);
      const HeadTape head_tape = forward_head(head, hyper, cfg, tape, 0, batch);
      std::vector<SolutionGradient> upstream(batch);
      double loss_sum = 0.0;
      for (int i = 0; i < batch; ++i) {
        LossValue loss = pretraining
                             ? loss_negative_sum_rate(channels[i], head_tape.outputs[i].solution, cfg)
                             : loss_total(channels[i], head_tape.outputs[i].solution,
                                          requests[i], cfg, train.mu);
        loss_sum += loss.value;
        upstream[i] = std::move(loss.grad);
        upstream[i].precoder /= batch;
        upstream[i].mask /= batch;
        upstream[i].gamma /= batch;
      }
      check_loss(loss_sum, "head training", 0);
      OutputHead grad = zeros_like(head);
      backward_head(head, hyper, cfg, tape, 0, head_tape, upstream, grad);
      opt.step(head, grad, train.learning_rate);
    }
  }
  return head;
}

}  // namespace mmfm
