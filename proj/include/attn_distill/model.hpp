#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "attn_distill/core.hpp"

namespace attn_distill {

using MatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using VectorF = Eigen::VectorXf;
using MatrixD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using VectorD = Eigen::VectorXd;

inline constexpr int kEncoderBlocks = 6;

struct ModelConfig {
  /// Output channels of each of the six encoder blocks; the last is C.
  std::vector<int> encoder_widths{32, 64, 128, 256, 512, 512};
  int input_height = kPatchPx;
  int input_width = kPatchPx;
  double drop_p = 0.2;
  double focal_gamma = 2.0;
  double focal_alpha = 0.25;

  int channels() const { return encoder_widths.back(); }
  int token_rows() const { return input_height / kTokenPx; }
  int token_cols() const { return input_width / kTokenPx; }
  int token_count() const { return token_rows() * token_cols(); }

  /// Throws InvalidArgument/ShapeError when the configuration is unusable.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

/// 3x3 same-padded convolution, weight laid out as out x (in * 9).
struct ConvParams {
  int in_channels = 0;
  int out_channels = 0;
  MatrixF weight;
  VectorF bias;
};

/// Query, positional embeddings, q/k/v/out projections and the linear head.
/// Kept in double precision: this is the part whose gradients are checked
/// against finite differences.
struct AttentionParams {
  int channels = 0;
  int tokens = 0;
  VectorD query;      // 1 x C
  VectorD query_pos;  // P_q, 1 x C
  MatrixD kv_pos;     // P_kv, L x C, indexed by original grid position
  MatrixD wq, wk, wv, wo;  // C x C, applied as W * x
  VectorD bq, bk, bv, bo;
  VectorD head_w;
  double head_b = 0.0;

  static AttentionParams zeros(int channels, int tokens);
};

struct ClassifierParams {
  ModelConfig config;
  std::vector<ConvParams> convs;  // 12 layers, two per block
  AttentionParams attention;

  /// He-normal conv weights, uniform(+-1/sqrt(C)) projections and head,
  /// N(0, 0.02) query and positional embeddings.
  static ClassifierParams init(const ModelConfig& config, Rng& rng);
  /// Same shapes as `like`, every value zero (gradient accumulator).
  static ClassifierParams zeros_like(const ClassifierParams& like);

  bool all_finite() const;
};

/// Visits every tensor of a parameter set by name, in a fixed order.
void for_each_tensor(ClassifierParams& params,
                     const std::function<void(const std::string&, std::span<float>)>& on_float,
                     const std::function<void(const std::string&, std::span<double>)>& on_double);

/// L x C token features with an activity mask (false = dropped, features zero).
struct TokenGrid {
  int rows = 0;  // M
  int cols = 0;  // N
  MatrixD tokens;
  std::vector<std::uint8_t> active;

  int size() const { return rows * cols; }
  int active_count() const;
  void deactivate(int index);
};

/// Channel-major feature map used inside the encoder. The buffer is
/// aligned so vectorized reductions over it sum in the same order every run.
struct FeatureMap {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<float, Eigen::aligned_allocator<float>> data;
};

/// Activations kept for the encoder backward pass.
struct EncoderTrace {
  FeatureMap input;
  std::vector<FeatureMap> conv_outputs;  // post-ReLU, one per conv layer
  std::vector<FeatureMap> pooled;        // one per block
  std::vector<std::vector<std::int32_t>> pool_argmax;

  const FeatureMap& conv_input(std::size_t layer) const;
};

FeatureMap to_feature_map(const Image& image);

/// Six blocks of (conv3x3 + ReLU) x 2 followed by 2x2 max-pooling.
TokenGrid encode(const Image& image, const ClassifierParams& params, EncoderTrace* trace = nullptr);

/// Accumulates parameter gradients given d(loss)/d(tokens) (L x C).
void encoder_backward(const EncoderTrace& trace, const MatrixD& token_grad, const ClassifierParams& params,
                      ClassifierParams& grads);

struct DropResult {
  TokenGrid grid;
  double scale = 1.0;  // factor applied to survivors
};

/// Bernoulli token drop with inverted scaling. Identity when training is false.
DropResult drop_tokens(const TokenGrid& grid, double p, Rng& rng, bool training);

struct AttentionTrace {
  VectorD query_in;  // Q0 + P_q
  VectorD q;
  MatrixD kv_in;  // tokens + P_kv (rows of inactive tokens unused)
  MatrixD k;
  MatrixD v;
  VectorD pooled;  // W * V
  VectorD features;
  std::vector<int> active;  // original indices of active tokens
};

struct AttentionResult {
  VectorD features;  // 1 x C output of the final linear
  VectorD weights;   // L entries, zero at inactive positions
  AttentionTrace trace;
};

/// Single-query cross attention over the active tokens.
AttentionResult cross_attention(const TokenGrid& grid, const AttentionParams& params);

double head_logit(const VectorD& features, const AttentionParams& params);

/// Backward through head and cross attention for a given d(loss)/d(logit).
/// Writes into `grads`; token_grad (if non-null) receives d/d(tokens), L x C.
void attention_backward(const AttentionTrace& trace, const AttentionParams& params, double dlogit,
                        AttentionParams& grads, MatrixD* token_grad);

double sigmoid(double x);

struct Classification {
  double probability = 0.5;
  double logit = 0.0;
  VectorD weights;
};

Classification classify(const Image& image, const ClassifierParams& params, double p, Rng& rng, bool training);

inline constexpr double kFocalEps = 1e-7;

/// -alpha_t (1 - p_t)^gamma log(p_t), probability clamped to [eps, 1 - eps].
double focal_loss(double probability, int target, double gamma, double alpha);
/// d(focal_loss(sigmoid(logit)))/d(logit) of the unclamped loss.
double focal_loss_grad_logit(double logit, int target, double gamma, double alpha);

struct StepResult {
  double loss = 0.0;
  double probability = 0.0;
};

/// Forward + backward on one example; gradients are added to `grads`.
StepResult accumulate_gradients(const Image& image, int target, const ClassifierParams& params,
                                ClassifierParams& grads, Rng& rng);

// Checkpoints

struct CheckpointMeta {
  std::string class_name;
  int epoch = -1;
  double val_loss = 0.0;
};

void save_checkpoint(const std::filesystem::path& path, const ClassifierParams& params,
                     const CheckpointMeta& meta = {});
ClassifierParams load_checkpoint(const std::filesystem::path& path, CheckpointMeta* meta = nullptr);

}  // namespace attn_distill
