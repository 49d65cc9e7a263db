#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mmfm/core.hpp"

namespace mmfm {

// Architecture of the precoding transformer. Token layout: n_users CSI tokens
// of length 2 * n_tx followed by one rate-request token of length n_users.
struct ModelHyper {
  int n_tx = 64;
  int n_users = 4;
  int embed_dim = 128;
  int ffn_dim = 1024;
  int n_heads = 2;
  int n_layers = 4;
  double dropout = 0.05;
  // Fixed gain applied to CSI tokens before embedding, so that path-loss
  // attenuated channels reach the network at unit scale.
  double csi_scale = 1.0;
  // Learned per-slot embedding added to the CSI tokens. Without it the users
  // form an unordered set and a user cannot tell which rate target is its own.
  bool user_positions = true;

  int token_dim() const { return 2 * n_tx; }
  int seq_len() const { return n_users + 1; }
  int head_dim() const { return embed_dim / n_heads; }
  void validate() const;
  void validate_against(const SystemConfig& cfg) const;
};

// A flat, named view over one parameter tensor. Parameter structs enumerate
// their tensors in a fixed declared order; that order is the checkpoint order.
struct TensorView {
  std::string name;
  double* data;
  Eigen::Index size;

  Eigen::Map<RVector> map() const { return {data, size}; }
};

struct Linear {
  RMatrix weight;  // out x in
  RVector bias;

  Linear() = default;
  Linear(int in, int out) : weight(RMatrix::Zero(out, in)), bias(RVector::Zero(out)) {}
  void init(std::mt19937_64& rng);
  void append_tensors(const std::string& prefix, std::vector<TensorView>& out);
};

struct LayerNormParams {
  RVector gain;
  RVector bias;

  LayerNormParams() = default;
  explicit LayerNormParams(int dim) : gain(RVector::Ones(dim)), bias(RVector::Zero(dim)) {}
  void append_tensors(const std::string& prefix, std::vector<TensorView>& out);
};

struct EncoderBlock {
  LayerNormParams attn_norm;
  Linear query, key, value, attn_out;
  LayerNormParams ffn_norm;
  Linear ffn_in, ffn_out;

  EncoderBlock() = default;
  explicit EncoderBlock(const ModelHyper& hyper);
  void append_tensors(const std::string& prefix, std::vector<TensorView>& out);
};

// Shared feature extractor (theta).
struct FeatureExtractor {
  Linear csi_embedding;
  Linear rate_embedding;
  RMatrix user_position;  // n_users x embed_dim, empty when disabled
  std::vector<EncoderBlock> blocks;
  LayerNormParams final_norm;

  FeatureExtractor() = default;
  explicit FeatureExtractor(const ModelHyper& hyper);  // zero-initialized
  static FeatureExtractor initialized(const ModelHyper& hyper, std::uint64_t seed);

  std::vector<TensorView> tensors();
  std::size_t parameter_count() const;
};

// Environment-specific output layers: per-user precoder projection and the
// pooled antenna-selection / power-scale projection.
struct OutputHead {
  Linear precoder;  // embed_dim -> 2 n_tx
  Linear energy;    // embed_dim -> n_tx + 1

  OutputHead() = default;
  explicit OutputHead(const ModelHyper& hyper);  // zero-initialized
  static OutputHead initialized(const ModelHyper& hyper, std::uint64_t seed);

  std::vector<TensorView> tensors();
};

// Elementwise helpers over parameter structs with identical shapes.
template <typename P>
P zeros_like(const P& p) {
  P z = p;
  for (auto& t : z.tensors()) t.map().setZero();
  return z;
}
template <typename P>
void axpy(double alpha, P& x, P& y) {  // y += alpha * x
  auto xs = x.tensors();
  auto ys = y.tensors();
  for (std::size_t i = 0; i < xs.size(); ++i) ys[i].map() += alpha * xs[i].map();
}

enum class Mode { kTrain, kEval };

// How the antenna mask is produced from its sigmoid activations. kHard
// thresholds at 0.5 with a straight-through backward; kRelaxed passes the
// activations through unchanged and exists for gradient verification.
enum class MaskMode { kHard, kRelaxed };

// Forward value of the straight-through threshold (ties map to 1).
double straight_through_threshold(double activation);
// Backward of sigmoid followed by the straight-through threshold, with
// respect to the pre-sigmoid input.
double straight_through_gradient(double pre_activation, double upstream);
double sigmoid(double x);

// Rate-request token: targets R* (b/s/Hz, non-negative), fed through log1p
// before the rate embedding.
struct RateRequest {
  RVector targets;

  static RateRequest uniform(int n_users, double rate) {
    return {RVector::Constant(n_users, rate)};
  }
  void validate(int n_users) const;
};

// Raw token sequence: rows 0..n_users-1 are CSI tokens, the last row (first
// n_users entries) is the rate token.
struct TokenSequence {
  std::vector<RVector> tokens;
};
TokenSequence tokenize(const ChannelMatrix& channel, const RateRequest& request);

struct ModelOutput {
  PrecodingSolution solution;
  RVector activations;  // n_tx + 1 sigmoid outputs before thresholding
};

// Intermediate values of a batched extractor forward pass.
struct ExtractorTape {
  struct BlockCache {
    RMatrix input, attn_in, q, k, v, probs, context, attn_dropout;
    RMatrix mid, ffn_in, hidden_pre, hidden, ffn_dropout;
    RVector attn_rstd, ffn_rstd;
  };
  int batch = 0;
  Mode mode = Mode::kEval;
  RMatrix csi_input;   // (batch * n_users) x token_dim, already scaled
  RMatrix rate_input;  // batch x n_users, log1p transformed
  std::vector<BlockCache> blocks;
  RMatrix final_in;
  RVector final_rstd;
  RMatrix features;  // (batch * seq_len) x embed_dim
};

struct HeadTape {
  int batch = 0;
  MaskMode mask_mode = MaskMode::kHard;
  std::vector<CMatrix> raw_precoders;
  RMatrix pooled;       // batch x embed_dim
  RMatrix activations;  // batch x (n_tx + 1)
  std::vector<ModelOutput> outputs;
};

// Forward through the shared extractor for a batch of (H, R*) pairs.
ExtractorTape forward_extractor(const FeatureExtractor& theta,
                                const ModelHyper& hyper,
                                std::span<const ChannelMatrix> channels,
                                std::span<const RateRequest> requests,
                                Mode mode, std::mt19937_64& rng);

// Mean over tokens of the final-layer features, one row per sample.
RMatrix pooled_features(const ExtractorTape& tape, const ModelHyper& hyper);

// Applies a head to samples [first, first + count) of an extractor tape.
HeadTape forward_head(const OutputHead& head, const ModelHyper& hyper,
                      const SystemConfig& cfg, const ExtractorTape& features,
                      int first, int count, MaskMode mask_mode = MaskMode::kHard);

// Backward of a head. Accumulates parameter gradients into `grad` and returns
// the gradient with respect to the extractor features of its samples
// ((count * seq_len) x embed_dim).
RMatrix backward_head(const OutputHead& head, const ModelHyper& hyper,
                      const SystemConfig& cfg, const ExtractorTape& features,
                      int first, const HeadTape& tape,
                      std::span<const SolutionGradient> upstream,
                      OutputHead& grad);

// Backward of the extractor given the gradient on its features; accumulates
// into `grad`.
void backward_extractor(const FeatureExtractor& theta, const ModelHyper& hyper,
                        const ExtractorTape& tape, const RMatrix& grad_features,
                        FeatureExtractor& grad);

// One environment's forward pass recorded for a single backward call.
class ForwardGraph {
 public:
  ForwardGraph(ExtractorTape extractor, HeadTape head)
      : extractor_(std::move(extractor)), head_(std::move(head)) {}

  const std::vector<ModelOutput>& outputs() const { return head_.outputs; }
  const ExtractorTape& extractor() const { return extractor_; }
  const HeadTape& head() const { return head_; }
  bool consumed() const { return consumed_; }
  void mark_consumed();

 private:
  ExtractorTape extractor_;
  HeadTape head_;
  bool consumed_ = false;
};

struct Gradients {
  FeatureExtractor extractor;
  OutputHead head;
};

ForwardGraph forward(const FeatureExtractor& theta, const OutputHead& head,
                     const ModelHyper& hyper, const SystemConfig& cfg,
                     std::span<const ChannelMatrix> channels,
                     std::span<const RateRequest> requests, Mode mode,
                     std::mt19937_64& rng, MaskMode mask_mode = MaskMode::kHard);

// Single-sample convenience wrapper.
ModelOutput forward(const FeatureExtractor& theta, const OutputHead& head,
                    const ModelHyper& hyper, const SystemConfig& cfg,
                    const ChannelMatrix& channel, const RateRequest& request,
                    Mode mode, std::mt19937_64& rng);

// Reverse-mode gradients of a loss whose sensitivity to each sample's
// solution is `upstream`. The graph can be consumed once.
Gradients backward(const FeatureExtractor& theta, const OutputHead& head,
                   const ModelHyper& hyper, const SystemConfig& cfg,
                   ForwardGraph& graph,
                   std::span<const SolutionGradient> upstream);

// Foundation model: shared extractor plus heads keyed by environment id.
struct Model {
  ModelHyper hyper;
  FeatureExtractor extractor;
  std::map<std::string, OutputHead> heads;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void write_checkpoint(const Model& model, const std::filesystem::path& path);
Model read_checkpoint(const std::filesystem::path& path);

void write_head(const OutputHead& head, const ModelHyper& hyper,
                const std::string& env_id, const std::filesystem::path& path);
OutputHead read_head(const ModelHyper& hyper, const std::filesystem::path& path,
                     std::string* env_id = nullptr);

}  // namespace mmfm
