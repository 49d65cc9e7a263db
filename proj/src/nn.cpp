#include "mmfm/nn.hpp"

#include <cmath>
#include <fstream>
#include <numbers>

#include "binary_io.hpp"
#include "mmfm/error.hpp"

namespace mmfm {

namespace {

constexpr double kNormEps = 1e-5;
constexpr std::array<char, 4> kModelMagic{'M', 'M', 'F', 'M'};
constexpr std::array<char, 4> kHeadMagic{'M', 'M', 'F', 'H'};

// y = x W^T + 1 b^T
RMatrix affine(const RMatrix& x, const Linear& layer) {
  RMatrix y = x * layer.weight.transpose();
  y.rowwise() += layer.bias.transpose();
  return y;
}

void affine_backward(const RMatrix& x, const RMatrix& dy, Linear& grad) {
  grad.weight.noalias() += dy.transpose() * x;
  grad.bias += dy.colwise().sum().transpose();
}

// Row-wise layer normalization. Returns the normalized rows (before gain and
// bias) and stores the reciprocal standard deviations.
RMatrix normalize_rows(const RMatrix& x, RVector& rstd) {
  const Eigen::Index d = x.cols();
  RMatrix hat(x.rows(), d);
  rstd.resize(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mean = x.row(r).mean();
    const double var = (x.row(r).array() - mean).square().sum() / d;
    rstd[r] = 1.0 / std::sqrt(var + kNormEps);
    hat.row(r) = (x.row(r).array() - mean) * rstd[r];
  }
  return hat;
}

RMatrix scale_shift(const RMatrix& hat, const LayerNormParams& p) {
  RMatrix y = hat * p.gain.asDiagonal();
  y.rowwise() += p.bias.transpose();
  return y;
}

RMatrix layer_norm_backward(const RMatrix& dy, const RMatrix& hat,
                            const RVector& rstd, const LayerNormParams& p,
                            LayerNormParams& grad) {
  grad.gain += dy.cwiseProduct(hat).colwise().sum().transpose();
  grad.bias += dy.colwise().sum().transpose();
  const RMatrix dhat = dy * p.gain.asDiagonal();
  RMatrix dx(dy.rows(), dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const double mean_d = dhat.row(r).mean();
    const double mean_dh = dhat.row(r).dot(hat.row(r)) / dy.cols();
    dx.row(r) = rstd[r] * (dhat.row(r).array() - mean_d - hat.row(r).array() * mean_dh);
  }
  return dx;
}

constexpr double kGeluC = 0.044715;
const double kGeluK = std::sqrt(2.0 / std::numbers::pi);

double gelu(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluK * (x + kGeluC * x * x * x)));
}

double gelu_derivative(double x) {
  const double t = std::tanh(kGeluK * (x + kGeluC * x * x * x));
  return 0.5 * (1.0 + t) +
         0.5 * x * (1.0 - t * t) * kGeluK * (1.0 + 3.0 * kGeluC * x * x);
}

// Inverted dropout multipliers; empty when dropout is inactive.
RMatrix dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate,
                     Mode mode, std::mt19937_64& rng) {
  if (mode == Mode::kEval || rate <= 0.0) return {};
  std::bernoulli_distribution keep(1.0 - rate);
  RMatrix m(rows, cols);
  const double scale = 1.0 / (1.0 - rate);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = keep(rng) ? scale : 0.0;
  }
  return m;
}

void check_finite(const RMatrix& m, const std::string& where) {
  if (!m.allFinite()) {
    throw NumericalError("non-finite activation in " + where);
  }
}

void init_uniform(RMatrix& m, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  for (Eigen::Index c = 0; c < m.cols(); ++c) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) m(r, c) = u(rng);
  }
}

void write_tensors(std::ostream& out, std::vector<TensorView> views) {
  for (const auto& v : views) {
    for (Eigen::Index i = 0; i < v.size; ++i) detail::put<double>(out, v.data[i]);
  }
}

void read_tensors(std::istream& in, std::vector<TensorView> views,
                  const std::string& format) {
  for (const auto& v : views) {
    for (Eigen::Index i = 0; i < v.size; ++i) {
      v.data[i] = detail::get<double>(in, format, v.name);
    }
  }
}

void expect_magic(std::istream& in, const std::array<char, 4>& magic,
                  const std::filesystem::path& path) {
  std::array<char, 4> got{};
  if (!in.read(got.data(), got.size())) {
    throw FormatError(FormatError::Kind::kTruncated,
                      path.string() + " is shorter than its magic");
  }
  if (got != magic) {
    throw FormatError(FormatError::Kind::kBadMagic,
                      "bad magic in " + path.string());
  }
}

void expect_version(std::istream& in, const std::string& format) {
  const auto version = detail::get<std::uint32_t>(in, format, "version");
  if (version != kCheckpointVersion) {
    throw FormatError(FormatError::Kind::kVersionMismatch,
                      format + " version " + std::to_string(version) +
                          " unsupported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
}

}  // namespace

void ModelHyper::validate() const {
  if (n_tx < 1 || n_users < 1 || embed_dim < 1 || ffn_dim < 1 ||
      n_heads < 1 || n_layers < 1) {
    throw InvalidArgument("model dimensions must be positive");
  }
  if (embed_dim % n_heads != 0) {
    throw InvalidArgument("embed_dim must be divisible by n_heads");
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) {
    throw InvalidArgument("dropout must lie in [0, 1)");
  }
  if (!(csi_scale > 0.0) || !std::isfinite(csi_scale)) {
    throw InvalidArgument("csi_scale must be positive");
  }
}

void ModelHyper::validate_against(const SystemConfig& cfg) const {
  validate();
  if (cfg.n_tx != n_tx || cfg.n_users != n_users) {
    throw InvalidArgument("model was built for " + std::to_string(n_users) +
                          " users x " + std::to_string(n_tx) +
                          " antennas, system has " + std::to_string(cfg.n_users) +
                          " x " + std::to_string(cfg.n_tx));
  }
}

void Linear::init(std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(weight.cols()));
  init_uniform(weight, bound, rng);
  RMatrix b = bias;
  init_uniform(b, bound, rng);
  bias = b;
}

void Linear::append_tensors(const std::string& prefix,
                            std::vector<TensorView>& out) {
  out.push_back({prefix + ".weight", weight.data(), weight.size()});
  out.push_back({prefix + ".bias", bias.data(), bias.size()});
}

void LayerNormParams::append_tensors(const std::string& prefix,
                                     std::vector<TensorView>& out) {
  out.push_back({prefix + ".gain", gain.data(), gain.size()});
  out.push_back({prefix + ".bias", bias.data(), bias.size()});
}

EncoderBlock::EncoderBlock(const ModelHyper& h)
    : attn_norm(h.embed_dim),
      query(h.embed_dim, h.embed_dim),
      key(h.embed_dim, h.embed_dim),
      value(h.embed_dim, h.embed_dim),
      attn_out(h.embed_dim, h.embed_dim),
      ffn_norm(h.embed_dim),
      ffn_in(h.embed_dim, h.ffn_dim),
      ffn_out(h.ffn_dim, h.embed_dim) {}

void EncoderBlock::append_tensors(const std::string& prefix,
                                  std::vector<TensorView>& out) {
  attn_norm.append_tensors(prefix + ".attn_norm", out);
  query.append_tensors(prefix + ".query", out);
  key.append_tensors(prefix + ".key", out);
  value.append_tensors(prefix + ".value", out);
  attn_out.append_tensors(prefix + ".attn_out", out);
  ffn_norm.append_tensors(prefix + ".ffn_norm", out);
  ffn_in.append_tensors(prefix + ".ffn_in", out);
  ffn_out.append_tensors(prefix + ".ffn_out", out);
}

FeatureExtractor::FeatureExtractor(const ModelHyper& h)
    : csi_embedding(h.token_dim(), h.embed_dim),
      rate_embedding(h.n_users, h.embed_dim),
      user_position(RMatrix::Zero(h.user_positions ? h.n_users : 0, h.embed_dim)),
      blocks(h.n_layers, EncoderBlock(h)),
      final_norm(h.embed_dim) {}

FeatureExtractor FeatureExtractor::initialized(const ModelHyper& hyper,
                                               std::uint64_t seed) {
  hyper.validate();
  FeatureExtractor f(hyper);
  std::mt19937_64 rng(seed);
  f.csi_embedding.init(rng);
  f.rate_embedding.init(rng);
  if (f.user_position.size() > 0) init_uniform(f.user_position, 0.5, rng);
  for (auto& b : f.blocks) {
    b.query.init(rng);
    b.key.init(rng);
    b.value.init(rng);
    b.attn_out.init(rng);
    b.ffn_in.init(rng);
    b.ffn_out.init(rng);
  }
  return f;
}

std::vector<TensorView> FeatureExtractor::tensors() {
  std::vector<TensorView> out;
  csi_embedding.append_tensors("csi_embedding", out);
  rate_embedding.append_tensors("rate_embedding", out);
  if (user_position.size() > 0) {
    out.push_back({"user_position", user_position.data(), user_position.size()});
  }
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    blocks[l].append_tensors("block" + std::to_string(l), out);
  }
  final_norm.append_tensors("final_norm", out);
  return out;
}

std::size_t FeatureExtractor::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : const_cast<FeatureExtractor*>(this)->tensors()) n += t.size;
  return n;
}

OutputHead::OutputHead(const ModelHyper& h)
    : precoder(h.embed_dim, 2 * h.n_tx), energy(h.embed_dim, h.n_tx + 1) {}

OutputHead OutputHead::initialized(const ModelHyper& hyper, std::uint64_t seed) {
  hyper.validate();
  OutputHead head(hyper);
  std::mt19937_64 rng(seed);
  head.precoder.init(rng);
  head.energy.init(rng);
  return head;
}

std::vector<TensorView> OutputHead::tensors() {
  std::vector<TensorView> out;
  precoder.append_tensors("precoder", out);
  energy.append_tensors("energy", out);
  return out;
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double straight_through_threshold(double activation) {
  return activation >= 0.5 ? 1.0 : 0.0;
}

double straight_through_gradient(double pre_activation, double upstream) {
  const double s = sigmoid(pre_activation);
  return upstream * s * (1.0 - s);
}

void RateRequest::validate(int n_users) const {
  if (targets.size() != n_users) {
    throw InvalidArgument("rate request has " + std::to_string(targets.size()) +
                          " entries, expected " + std::to_string(n_users));
  }
  if (!targets.allFinite() || (targets.array() < 0.0).any()) {
    throw InvalidArgument("rate targets must be finite and non-negative");
  }
}

TokenSequence tokenize(const ChannelMatrix& channel, const RateRequest& request) {
  request.validate(channel.n_users());
  TokenSequence seq;
  const int n_tx = channel.n_tx();
  for (int u = 0; u < channel.n_users(); ++u) {
    RVector token(2 * n_tx);
    token.head(n_tx) = channel.h.row(u).real().transpose();
    token.tail(n_tx) = channel.h.row(u).imag().transpose();
    seq.tokens.push_back(std::move(token));
  }
  seq.tokens.push_back(request.targets);
  return seq;
}

ExtractorTape forward_extractor(const FeatureExtractor& theta,
                                const ModelHyper& hyper,
                                std::span<const ChannelMatrix> channels,
                                std::span<const RateRequest> requests,
                                Mode mode, std::mt19937_64& rng) {
  if (channels.size() != requests.size()) {
    throw InvalidArgument("need one rate request per channel");
  }
  const int batch = static_cast<int>(channels.size());
  const int n_users = hyper.n_users;
  const int n_tx = hyper.n_tx;
  const int seq = hyper.seq_len();
  const int d = hyper.embed_dim;
  const int heads = hyper.n_heads;
  const int dh = hyper.head_dim();

  ExtractorTape tape;
  tape.batch = batch;
  tape.mode = mode;
  tape.csi_input.resize(static_cast<Eigen::Index>(batch) * n_users, 2 * n_tx);
  tape.rate_input.resize(batch, n_users);
  for (int b = 0; b < batch; ++b) {
    const ChannelMatrix& h = channels[b];
    if (h.n_users() != n_users || h.n_tx() != n_tx) {
      throw InvalidArgument("channel shape does not match the model");
    }
    requests[b].validate(n_users);
    const Eigen::Index r0 = static_cast<Eigen::Index>(b) * n_users;
    tape.csi_input.block(r0, 0, n_users, n_tx) = hyper.csi_scale * h.h.real();
    tape.csi_input.block(r0, n_tx, n_users, n_tx) = hyper.csi_scale * h.h.imag();
    tape.rate_input.row(b) = requests[b].targets.array().log1p().matrix().transpose();
  }

  const RMatrix csi_embedded = affine(tape.csi_input, theta.csi_embedding);
  const RMatrix rate_embedded = affine(tape.rate_input, theta.rate_embedding);
  RMatrix x(static_cast<Eigen::Index>(batch) * seq, d);
  for (int b = 0; b < batch; ++b) {
    x.block(static_cast<Eigen::Index>(b) * seq, 0, n_users, d) =
        csi_embedded.block(static_cast<Eigen::Index>(b) * n_users, 0, n_users, d);
    if (hyper.user_positions) {
      x.block(static_cast<Eigen::Index>(b) * seq, 0, n_users, d) += theta.user_position;
    }
    x.row(static_cast<Eigen::Index>(b) * seq + n_users) = rate_embedded.row(b);
  }
  check_finite(x, "embedding");

  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  tape.blocks.resize(theta.blocks.size());
  for (std::size_t l = 0; l < theta.blocks.size(); ++l) {
    const EncoderBlock& blk = theta.blocks[l];
    auto& c = tape.blocks[l];
    c.input = x;
    c.attn_in = normalize_rows(x, c.attn_rstd);
    const RMatrix a = scale_shift(c.attn_in, blk.attn_norm);
    c.q = affine(a, blk.query);
    c.k = affine(a, blk.key);
    c.v = affine(a, blk.value);
    c.probs.resize(static_cast<Eigen::Index>(batch) * heads * seq, seq);
    c.context.resize(x.rows(), d);
    for (int b = 0; b < batch; ++b) {
      const Eigen::Index r0 = static_cast<Eigen::Index>(b) * seq;
      for (int hd = 0; hd < heads; ++hd) {
        const auto q = c.q.block(r0, hd * dh, seq, dh);
        const auto k = c.k.block(r0, hd * dh, seq, dh);
        const auto v = c.v.block(r0, hd * dh, seq, dh);
        RMatrix scores = (q * k.transpose()) * inv_sqrt_dh;
        for (int i = 0; i < seq; ++i) {
          const double m = scores.row(i).maxCoeff();
          scores.row(i) = (scores.row(i).array() - m).exp();
          scores.row(i) /= scores.row(i).sum();
        }
        c.probs.block((static_cast<Eigen::Index>(b) * heads + hd) * seq, 0, seq, seq) = scores;
        c.context.block(r0, hd * dh, seq, dh) = scores * v;
      }
    }
    RMatrix attn = affine(c.context, blk.attn_out);
    c.attn_dropout = dropout_mask(attn.rows(), attn.cols(), hyper.dropout, mode, rng);
    if (c.attn_dropout.size() > 0) attn = attn.cwiseProduct(c.attn_dropout);
    c.mid = x + attn;

    c.ffn_in = normalize_rows(c.mid, c.ffn_rstd);
    c.hidden_pre = affine(scale_shift(c.ffn_in, blk.ffn_norm), blk.ffn_in);
    c.hidden = c.hidden_pre.unaryExpr([](double v) { return gelu(v); });
    RMatrix ffn = affine(c.hidden, blk.ffn_out);
    c.ffn_dropout = dropout_mask(ffn.rows(), ffn.cols(), hyper.dropout, mode, rng);
    if (c.ffn_dropout.size() > 0) ffn = ffn.cwiseProduct(c.ffn_dropout);
    x = c.mid + ffn;
    check_finite(x, "encoder block " + std::to_string(l));
  }
  tape.final_in = normalize_rows(x, tape.final_rstd);
  tape.features = scale_shift(tape.final_in, theta.final_norm);
  return tape;
}

RMatrix pooled_features(const ExtractorTape& tape, const ModelHyper& hyper) {
  const int seq = hyper.seq_len();
  RMatrix pooled(tape.batch, hyper.embed_dim);
  for (int b = 0; b < tape.batch; ++b) {
    pooled.row(b) =
        tape.features.block(static_cast<Eigen::Index>(b) * seq, 0, seq, hyper.embed_dim)
            .colwise()
            .mean();
  }
  return pooled;
}

HeadTape forward_head(const OutputHead& head, const ModelHyper& hyper,
                      const SystemConfig& cfg, const ExtractorTape& features,
                      int first, int count, MaskMode mask_mode) {
  if (first < 0 || count < 0 || first + count > features.batch) {
    throw InvalidArgument("head sample range outside the extractor batch");
  }
  const int n_users = hyper.n_users;
  const int n_tx = hyper.n_tx;
  const int seq = hyper.seq_len();
  const int d = hyper.embed_dim;

  HeadTape tape;
  tape.batch = count;
  tape.mask_mode = mask_mode;

  RMatrix user_features(static_cast<Eigen::Index>(count) * n_users, d);
  tape.pooled.resize(count, d);
  for (int k = 0; k < count; ++k) {
    const Eigen::Index r0 = static_cast<Eigen::Index>(first + k) * seq;
    user_features.block(static_cast<Eigen::Index>(k) * n_users, 0, n_users, d) =
        features.features.block(r0, 0, n_users, d);
    tape.pooled.row(k) = features.features.block(r0, 0, seq, d).colwise().mean();
  }
  const RMatrix projected = affine(user_features, head.precoder);
  const RMatrix logits = affine(tape.pooled, head.energy);
  check_finite(projected, "precoder head");
  check_finite(logits, "energy head");
  tape.activations = logits.unaryExpr([](double z) { return sigmoid(z); });

  tape.raw_precoders.reserve(count);
  tape.outputs.reserve(count);
  for (int k = 0; k < count; ++k) {
    const auto y = projected.block(static_cast<Eigen::Index>(k) * n_users, 0, n_users, 2 * n_tx);
    CMatrix raw(n_tx, n_users);
    raw.real() = y.leftCols(n_tx).transpose();
    raw.imag() = y.rightCols(n_tx).transpose();

    ModelOutput out;
    out.activations = tape.activations.row(k).transpose();
    out.solution.precoder = normalize_precoder(raw, cfg);
    out.solution.mask.resize(n_tx);
    for (int i = 0; i < n_tx; ++i) {
      const double s = out.activations[i];
      out.solution.mask[i] =
          mask_mode == MaskMode::kHard ? straight_through_threshold(s) : s;
    }
    out.solution.gamma = out.activations[n_tx];
    tape.raw_precoders.push_back(std::move(raw));
    tape.outputs.push_back(std::move(out));
  }
  return tape;
}

RMatrix backward_head(const OutputHead& head, const ModelHyper& hyper,
                      const SystemConfig& cfg, const ExtractorTape& features,
                      int first, const HeadTape& tape,
                      std::span<const SolutionGradient> upstream,
                      OutputHead& grad) {
  if (static_cast<int>(upstream.size()) != tape.batch) {
    throw InvalidArgument("need one solution gradient per sample");
  }
  const int count = tape.batch;
  const int n_users = hyper.n_users;
  const int n_tx = hyper.n_tx;
  const int seq = hyper.seq_len();
  const int d = hyper.embed_dim;

  RMatrix d_projected(static_cast<Eigen::Index>(count) * n_users, 2 * n_tx);
  RMatrix d_logits(count, n_tx + 1);
  for (int k = 0; k < count; ++k) {
    const SolutionGradient& g = upstream[k];
    const CMatrix d_raw =
        normalize_precoder_backward(tape.raw_precoders[k], g.precoder, cfg);
    auto dy = d_projected.block(static_cast<Eigen::Index>(k) * n_users, 0, n_users, 2 * n_tx);
    dy.leftCols(n_tx) = d_raw.real().transpose();
    dy.rightCols(n_tx) = d_raw.imag().transpose();
    // Straight-through: the threshold passes the gradient to the sigmoid.
    for (int i = 0; i < n_tx; ++i) {
      const double s = tape.activations(k, i);
      d_logits(k, i) = g.mask[i] * s * (1.0 - s);
    }
    const double s = tape.activations(k, n_tx);
    d_logits(k, n_tx) = g.gamma * s * (1.0 - s);
  }

  RMatrix user_features(static_cast<Eigen::Index>(count) * n_users, d);
  for (int k = 0; k < count; ++k) {
    user_features.block(static_cast<Eigen::Index>(k) * n_users, 0, n_users, d) =
        features.features.block(static_cast<Eigen::Index>(first + k) * seq, 0, n_users, d);
  }
  grad.precoder.weight.noalias() += d_projected.transpose() * user_features;

  RMatrix d_features = RMatrix::Zero(static_cast<Eigen::Index>(count) * seq, d);
  const RMatrix d_user = d_projected * head.precoder.weight;
  const RMatrix d_pooled = d_logits * head.energy.weight;
  grad.energy.weight.noalias() += d_logits.transpose() * tape.pooled;
  grad.energy.bias += d_logits.colwise().sum().transpose();
  grad.precoder.bias += d_projected.colwise().sum().transpose();
  for (int k = 0; k < count; ++k) {
    const Eigen::Index r0 = static_cast<Eigen::Index>(k) * seq;
    d_features.block(r0, 0, n_users, d) =
        d_user.block(static_cast<Eigen::Index>(k) * n_users, 0, n_users, d);
    d_features.block(r0, 0, seq, d).rowwise() += d_pooled.row(k) / seq;
  }
  return d_features;
}

void backward_extractor(const FeatureExtractor& theta, const ModelHyper& hyper,
                        const ExtractorTape& tape, const RMatrix& grad_features,
                        FeatureExtractor& grad) {
  const int batch = tape.batch;
  const int n_users = hyper.n_users;
  const int seq = hyper.seq_len();
  const int d = hyper.embed_dim;
  const int heads = hyper.n_heads;
  const int dh = hyper.head_dim();
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  RMatrix dx = layer_norm_backward(grad_features, tape.final_in, tape.final_rstd,
                                   theta.final_norm, grad.final_norm);

  for (std::size_t li = theta.blocks.size(); li-- > 0;) {
    const EncoderBlock& blk = theta.blocks[li];
    EncoderBlock& g = grad.blocks[li];
    const auto& c = tape.blocks[li];

    // x_out = mid + dropout(ffn(LN(mid)))
    RMatrix d_ffn = c.ffn_dropout.size() > 0 ? RMatrix(dx.cwiseProduct(c.ffn_dropout)) : dx;
    affine_backward(c.hidden, d_ffn, g.ffn_out);
    RMatrix d_hidden = d_ffn * blk.ffn_out.weight;
    d_hidden.array() *= c.hidden_pre.unaryExpr([](double v) { return gelu_derivative(v); }).array();
    affine_backward(scale_shift(c.ffn_in, blk.ffn_norm), d_hidden, g.ffn_in);
    const RMatrix d_ffn_norm = d_hidden * blk.ffn_in.weight;
    RMatrix d_mid = dx + layer_norm_backward(d_ffn_norm, c.ffn_in, c.ffn_rstd,
                                             blk.ffn_norm, g.ffn_norm);

    // mid = input + dropout(attention(LN(input)))
    RMatrix d_attn = c.attn_dropout.size() > 0 ? RMatrix(d_mid.cwiseProduct(c.attn_dropout)) : d_mid;
    affine_backward(c.context, d_attn, g.attn_out);
    const RMatrix d_context = d_attn * blk.attn_out.weight;

    RMatrix dq(c.q.rows(), d), dk(c.k.rows(), d), dv(c.v.rows(), d);
    for (int b = 0; b < batch; ++b) {
      const Eigen::Index r0 = static_cast<Eigen::Index>(b) * seq;
      for (int hd = 0; hd < heads; ++hd) {
        const auto p = c.probs.block((static_cast<Eigen::Index>(b) * heads + hd) * seq, 0, seq, seq);
        const auto q = c.q.block(r0, hd * dh, seq, dh);
        const auto k = c.k.block(r0, hd * dh, seq, dh);
        const auto v = c.v.block(r0, hd * dh, seq, dh);
        const auto dctx = d_context.block(r0, hd * dh, seq, dh);
        dv.block(r0, hd * dh, seq, dh) = p.transpose() * dctx;
        const RMatrix dp = dctx * v.transpose();
        RMatrix ds(seq, seq);
        for (int i = 0; i < seq; ++i) {
          const double inner = dp.row(i).dot(p.row(i));
          ds.row(i) = p.row(i).array() * (dp.row(i).array() - inner);
        }
        ds *= inv_sqrt_dh;
        dq.block(r0, hd * dh, seq, dh) = ds * k;
        dk.block(r0, hd * dh, seq, dh) = ds.transpose() * q;
      }
    }
    const RMatrix a = scale_shift(c.attn_in, blk.attn_norm);
    affine_backward(a, dq, g.query);
    affine_backward(a, dk, g.key);
    affine_backward(a, dv, g.value);
    const RMatrix da = dq * blk.query.weight + dk * blk.key.weight + dv * blk.value.weight;
    dx = d_mid + layer_norm_backward(da, c.attn_in, c.attn_rstd, blk.attn_norm, g.attn_norm);
  }

  RMatrix d_csi(static_cast<Eigen::Index>(batch) * n_users, d);
  RMatrix d_rate(batch, d);
  for (int b = 0; b < batch; ++b) {
    d_csi.block(static_cast<Eigen::Index>(b) * n_users, 0, n_users, d) =
        dx.block(static_cast<Eigen::Index>(b) * seq, 0, n_users, d);
    d_rate.row(b) = dx.row(static_cast<Eigen::Index>(b) * seq + n_users);
    if (hyper.user_positions) {
      grad.user_position += dx.block(static_cast<Eigen::Index>(b) * seq, 0, n_users, d);
    }
  }
  affine_backward(tape.csi_input, d_csi, grad.csi_embedding);
  affine_backward(tape.rate_input, d_rate, grad.rate_embedding);
}

void ForwardGraph::mark_consumed() {
  if (consumed_) {
    throw InvalidArgument("forward graph was already consumed by backward");
  }
  consumed_ = true;
}

ForwardGraph forward(const FeatureExtractor& theta, const OutputHead& head,
                     const ModelHyper& hyper, const SystemConfig& cfg,
                     std::span<const ChannelMatrix> channels,
                     std::span<const RateRequest> requests, Mode mode,
                     std::mt19937_64& rng, MaskMode mask_mode) {
  hyper.validate_against(cfg);
  ExtractorTape ext = forward_extractor(theta, hyper, channels, requests, mode, rng);
  HeadTape hd = forward_head(head, hyper, cfg, ext, 0, ext.batch, mask_mode);
  return ForwardGraph(std::move(ext), std::move(hd));
}

ModelOutput forward(const FeatureExtractor& theta, const OutputHead& head,
                    const ModelHyper& hyper, const SystemConfig& cfg,
                    const ChannelMatrix& channel, const RateRequest& request,
                    Mode mode, std::mt19937_64& rng) {
  ForwardGraph g = forward(theta, head, hyper, cfg, std::span(&channel, 1),
                           std::span(&request, 1), mode, rng);
  return g.outputs().front();
}

Gradients backward(const FeatureExtractor& theta, const OutputHead& head,
                   const ModelHyper& hyper, const SystemConfig& cfg,
                   ForwardGraph& graph,
                   std::span<const SolutionGradient> upstream) {
  graph.mark_consumed();
  Gradients grads{zeros_like(theta), zeros_like(head)};
  const RMatrix d_features = backward_head(head, hyper, cfg, graph.extractor(), 0,
                                           graph.head(), upstream, grads.head);
  backward_extractor(theta, hyper, graph.extractor(), d_features, grads.extractor);
  return grads;
}

void write_checkpoint(const Model& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw FormatError(FormatError::Kind::kIo, "cannot open " + path.string());
  }
  const ModelHyper& h = model.hyper;
  out.write(kModelMagic.data(), kModelMagic.size());
  detail::put<std::uint32_t>(out, kCheckpointVersion);
  for (int v : {h.n_tx, h.n_users, h.embed_dim, h.ffn_dim, h.n_heads, h.n_layers}) {
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(v));
  }
  detail::put<std::uint32_t>(out, h.user_positions ? 1u : 0u);
  detail::put<double>(out, h.dropout);
  detail::put<double>(out, h.csi_scale);
  write_tensors(out, const_cast<FeatureExtractor&>(model.extractor).tensors());
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(model.heads.size()));
  for (const auto& [id, head] : model.heads) {
    detail::put_string(out, id);
    write_tensors(out, const_cast<OutputHead&>(head).tensors());
  }
  if (!out) throw FormatError(FormatError::Kind::kIo, "write to " + path.string() + " failed");
}

Model read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatError::Kind::kIo, "cannot open " + path.string());
  expect_magic(in, kModelMagic, path);
  expect_version(in, "MMFM");
  Model model;
  ModelHyper& h = model.hyper;
  for (int* v : {&h.n_tx, &h.n_users, &h.embed_dim, &h.ffn_dim, &h.n_heads, &h.n_layers}) {
    *v = static_cast<int>(detail::get<std::uint32_t>(in, "MMFM", "hyperparameters"));
  }
  h.user_positions = detail::get<std::uint32_t>(in, "MMFM", "hyperparameters") != 0;
  h.dropout = detail::get<double>(in, "MMFM", "dropout");
  h.csi_scale = detail::get<double>(in, "MMFM", "csi_scale");
  h.validate();
  model.extractor = FeatureExtractor(h);
  read_tensors(in, model.extractor.tensors(), "MMFM");
  const auto n_heads = detail::get<std::uint32_t>(in, "MMFM", "head count");
  for (std::uint32_t i = 0; i < n_heads; ++i) {
    const std::string id = detail::get_string(in, "MMFM", "head id");
    OutputHead head(h);
    read_tensors(in, head.tensors(), "MMFM");
    model.heads.emplace(id, std::move(head));
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw FormatError(FormatError::Kind::kTruncated,
                      "MMFM checkpoint has trailing bytes after its last head");
  }
  return model;
}

void write_head(const OutputHead& head, const ModelHyper& hyper,
                const std::string& env_id, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(FormatError::Kind::kIo, "cannot open " + path.string());
  out.write(kHeadMagic.data(), kHeadMagic.size());
  detail::put<std::uint32_t>(out, kCheckpointVersion);
  for (int v : {hyper.n_tx, hyper.n_users, hyper.embed_dim}) {
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(v));
  }
  detail::put_string(out, env_id);
  write_tensors(out, const_cast<OutputHead&>(head).tensors());
  if (!out) throw FormatError(FormatError::Kind::kIo, "write to " + path.string() + " failed");
}

OutputHead read_head(const ModelHyper& hyper, const std::filesystem::path& path,
                     std::string* env_id) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatError::Kind::kIo, "cannot open " + path.string());
  expect_magic(in, kHeadMagic, path);
  expect_version(in, "MMFH");
  for (int expected : {hyper.n_tx, hyper.n_users, hyper.embed_dim}) {
    const auto got = detail::get<std::uint32_t>(in, "MMFH", "dimensions");
    if (static_cast<int>(got) != expected) {
      throw InvalidArgument("head file " + path.string() +
                            " does not match the model dimensions");
    }
  }
  const std::string id = detail::get_string(in, "MMFH", "env_id");
  if (env_id) *env_id = id;
  OutputHead head(hyper);
  read_tensors(in, head.tensors(), "MMFH");
  return head;
}

}  // namespace mmfm
