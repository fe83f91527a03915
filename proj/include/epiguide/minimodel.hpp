#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "epiguide/geometry.hpp"
#include "epiguide/guides.hpp"
#include "epiguide/losses.hpp"
#include "epiguide/matrix.hpp"

namespace epiguide {

enum class LossVariant { None, Epi, MaxEpi };

std::string to_string(LossVariant v);
LossVariant parse_loss_variant(const std::string& text);

struct ModelConfig {
  int s = 7;
  int m = 32;
  int heads = 2;
  int layers = 2;
  int mlp_width = 64;
  int num_freqs = 4;
  bool epe_enabled = false;
  double lambda_epi = 1.0;
  LossVariant loss_variant = LossVariant::None;
  std::uint64_t seed = 0;

  int head_dim() const { return m / heads; }
  int tokens() const { return 2 * s * s + 2; }
  // Throws InvalidArgument when an invariant does not hold.
  void validate() const;

  // 4 heads, 6 layers, width 128.
  static ModelConfig full_scale();
  bool operator==(const ModelConfig&) const = default;
};

// Sequence layout: [CLS, image-1 cells, SEP, image-2 cells].
struct TokenLayout {
  int cells;
  int cls() const { return 0; }
  int first1() const { return 1; }
  int sep() const { return cells + 1; }
  int first2() const { return cells + 2; }
  int length() const { return 2 * cells + 2; }
};

// All learnable tensors of the reranker, kept as a flat list of named matrices
// so optimizers and gradient checks can walk them uniformly.
class RerankerParams {
 public:
  // Per-layer tensor slots, in storage order.
  enum LayerSlot { Ln1Gain, Ln1Bias, Wq, Wk, Wv, Wo, Ln2Gain, Ln2Bias, W1, B1, W2, B2, kLayerSlots };
  enum GlobalSlot { Cls, Sep, Beta1, Beta2, LnfGain, LnfBias, HeadWeight, HeadBias, kGlobalSlots };

  RerankerParams() = default;
  // Normal(0, 0.02) weights from config.seed; layer-norm gains 1, biases 0.
  static RerankerParams initialize(const ModelConfig& config);
  // Every tensor zero (layer-norm gains included).
  static RerankerParams zeros(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  ModelConfig& mutable_config() { return config_; }

  Matrix& layer(int l, LayerSlot slot) { return tensors_[l * kLayerSlots + slot]; }
  const Matrix& layer(int l, LayerSlot slot) const { return tensors_[l * kLayerSlots + slot]; }
  Matrix& global(GlobalSlot slot) { return tensors_[config_.layers * kLayerSlots + slot]; }
  const Matrix& global(GlobalSlot slot) const {
    return tensors_[config_.layers * kLayerSlots + slot];
  }

  std::vector<Matrix>& tensors() { return tensors_; }
  const std::vector<Matrix>& tensors() const { return tensors_; }
  std::string tensor_name(std::size_t index) const;
  std::size_t parameter_count() const;
  bool all_finite() const;

  bool operator==(const RerankerParams&) const = default;

 private:
  ModelConfig config_;
  std::vector<Matrix> tensors_;
};

// Per coordinate [sin(2^k pi v), cos(2^k pi v)] for k < num_freqs, x then y,
// zero padded to `width`.
std::vector<double> frequency_encode(const Vec2& p, int num_freqs, int width);
// Same encoding for a single scalar; fills the first 2 * num_freqs entries of `out`.
void frequency_encode_scalar(double v, int num_freqs, std::span<double> out);

// Geometry for the epipolar positional encoding of one pair.
struct EpeInput {
  FundamentalMatrix f;
  std::optional<CameraView> view1;  // both views or neither
  std::optional<CameraView> view2;
  GridSpec grid1;
  GridSpec grid2;
  std::uint64_t pair_seed = 0;
};

// Plane angles of every cell center, image-1 cells then image-2 cells. With
// views, the metric rotation about the baseline; without, the angle of the
// cell's epipolar line within the pencil through the epipole (doubled, so it
// is defined modulo the line's sign). Reference: a pixel of image 1 drawn from
// pair_seed.
std::vector<double> epipolar_angles(const EpeInput& input);

struct TokenSequence {
  Matrix tokens;  // (2 s^2 + 2) x m
};

TokenSequence assemble_tokens(const Matrix& features1, const Matrix& features2,
                              const RerankerParams& params,
                              const std::optional<EpeInput>& epe = std::nullopt);

struct CrossAttentionMaps {
  std::vector<Matrix> a12;  // per head, s^2 x s^2, unscaled Q K^T
  std::vector<Matrix> a21;
};

struct LayerNormCache {
  Matrix normalized;  // (x - mean) / std, before gain and bias
  std::vector<double> rstd;
};

struct LayerCache {
  LayerNormCache ln1;
  Matrix ln1_out;
  Matrix q, k, v;
  std::vector<Matrix> probs;  // per head, post-softmax
  Matrix heads_out;
  LayerNormCache ln2;
  Matrix ln2_out;
  Matrix pre_act, act;
};

struct ForwardCache {
  const RerankerParams* params = nullptr;
  int token_count = 0;
  std::vector<LayerCache> layers;
  LayerNormCache cls_ln;  // final layer norm of the CLS row
  Matrix cls_out;
};

struct ForwardResult {
  double match_logit = 0.0;
  CrossAttentionMaps maps;
  ForwardCache cache;
};

ForwardResult forward(const RerankerParams& params, const TokenSequence& tokens);
// Match logit only (no cross maps kept); same value as forward().match_logit.
double score_pair(const RerankerParams& params, const TokenSequence& tokens);

// Gradients of the total loss with respect to the forward outputs.
struct OutputGradients {
  double d_logit = 0.0;
  std::vector<Matrix> d_a12;  // empty when no attention loss applies
  std::vector<Matrix> d_a21;
};

struct Gradients {
  RerankerParams params;  // same layout as the model
  Matrix tokens;          // dL/d tokens
};

Gradients backward(const RerankerParams& params, const ForwardCache& cache,
                   const OutputGradients& grads);

struct PairLoss {
  double total = 0.0;
  double match_bce = 0.0;
  double attention = 0.0;  // mean over heads, before lambda
  bool attention_applied = false;
  OutputGradients grads;
};

// BCE(match logit, label) + lambda * mean over heads of the configured attention
// loss. The attention term is skipped when `guide` is absent (non-matching or
// unreliable pairs) or the variant is None.
PairLoss pair_loss(const ModelConfig& config, const ForwardResult& result, int label,
                   const EpipolarGuide* guide, Reduction reduction = Reduction::Mean);

struct AttentionMass {
  double sum_in_guide = 0.0;  // softmax mass on guide cells, renormalized over the other image
  double sum_fraction = 0.0;  // guide cells / cells of the other image
  long rows = 0;

  double mean_in_guide() const { return rows ? sum_in_guide / rows : 0.0; }
  double mean_fraction() const { return rows ? sum_fraction / rows : 0.0; }
  double concentration() const {
    return sum_fraction > 0.0 ? sum_in_guide / sum_fraction : 0.0;
  }
};

// Last-layer softmax attention mass inside the guide, averaged over heads,
// rows with non-empty support and both directions. Accumulates into `acc`.
void accumulate_attention_mass(const ForwardCache& cache, const EpipolarGuide& guide,
                               AttentionMass& acc);

// Cross-attention map of one head, or the mean over heads when head < 0.
Matrix select_head(const std::vector<Matrix>& maps, int head);

}  // namespace epiguide
