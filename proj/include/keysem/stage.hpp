#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "keysem/attention.hpp"
#include "keysem/dictionary.hpp"
#include "keysem/matrix.hpp"
#include "keysem/patching.hpp"

namespace keysem {

enum class AttVariant { kGather, kMask };

/// Per-channel scale + shift applied after per-token normalization.
struct NormParams {
  Matrix scale;  // 1 x C
  Matrix shift;  // 1 x C
};

/// Two-layer MLP with tanh-approximation gelu; residual added by the caller.
struct FfnParams {
  Matrix w1;  // C x r*C
  Matrix b1;  // 1 x r*C
  Matrix w2;  // r*C x C
  Matrix b2;  // 1 x C
  std::size_t expansion = 4;
};

struct LayerParams {
  NormParams norm1;
  NormParams norm2;
  ProjectionParams proj;  // C x d
  Matrix out_proj;        // d x C
  FfnParams ffn;
};

struct KPolicy {
  enum class Kind { kFixed, kRandomFrom };
  Kind kind = Kind::kFixed;
  std::size_t fixed_k = 0;
  std::vector<std::size_t> choices;

  static KPolicy Fixed(std::size_t k) { return {Kind::kFixed, k, {}}; }
  static KPolicy RandomFrom(std::vector<std::size_t> set) {
    return {Kind::kRandomFrom, 0, std::move(set)};
  }
};

struct StageConfig {
  std::size_t n_layers = 1;
  std::size_t window = 8;  // M
  KPolicy k_policy = KPolicy::Fixed(8);
  std::size_t heads = 1;
  std::size_t embed = 0;  // d; 0 means "same as channels"
  bool include_self = false;
};

struct StageParams {
  StageConfig config;
  std::vector<LayerParams> layers;
  ConvParams conv;  // closes the stage, C -> C
};

struct ModelParams {
  ConvParams extract_conv;  // img channels -> C
  std::vector<StageParams> stages;
  ConvParams reconstruct_conv;  // C -> img channels
};

/// One k per stage invocation; the same k serves every token (and window).
std::size_t sample_k(const KPolicy& policy, RngStream& rng);

double gelu(double x);
double gelu_grad(double x);

Matrix ffn(const Matrix& x, const FfnParams& p);

Matrix layer_norm(const Matrix& x, const NormParams& p);

// ---- Tapes for the training path -----------------------------------------

struct LayerNormTape {
  Matrix xhat;
  std::vector<double> inv_std;
};

struct FfnTape {
  Matrix input;
  Matrix hidden_pre;
  Matrix hidden;
};

struct LayerTape {
  TokenSet input;
  LayerNormTape ln1;
  TokenSet norm1_tokens;
  Qkv qkv;
  Matrix att_tokens;
  Matrix x1;
  LayerNormTape ln2;
  FfnTape ffn;
};

struct StageTape {
  WindowSet input_windows;
  std::size_t sampled_k = 0;
  std::vector<KeySemanticDictionary> dicts;
  std::vector<std::vector<LayerTape>> layer_tapes;  // [window][layer]
  FeatureMap merged;                                // conv input
};

struct ModelTape {
  FeatureMap input;
  FeatureMap extracted;
  std::vector<StageTape> stages;
  std::vector<FeatureMap> stage_outputs;
  FeatureMap reconstructed_input;  // output of last stage, conv input
};

Matrix layer_norm_forward(const Matrix& x, const NormParams& p, LayerNormTape* tape);
Matrix layer_norm_backward(const Matrix& d_y, const NormParams& p,
                           const LayerNormTape& tape, NormParams& d_p);

Matrix ffn_forward(const Matrix& x, const FfnParams& p, FfnTape* tape);
Matrix ffn_backward(const Matrix& d_out, const FfnParams& p, const FfnTape& tape,
                    FfnParams& d_p);

/// Pre-norm transformer layer: attention block then FFN, both residual.
TokenSet transformer_layer(const TokenSet& tokens, const KeySemanticDictionary& dict,
                           const LayerParams& lp, AttVariant variant,
                           LayerTape* tape = nullptr);

Matrix transformer_layer_backward(const Matrix& d_out, const LayerParams& lp,
                                  const KeySemanticDictionary& dict,
                                  const LayerTape& tape, LayerParams& d_lp);

/// Full SemanIR stage: partition, build dictionaries once, run the layers
/// sharing them, merge, conv, residual add. dict_override skips construction
/// and reuses the given dictionaries (finite-difference checks hold the
/// non-differentiable selection fixed this way).
FeatureMap transformer_stage(const FeatureMap& f, const StageConfig& cfg,
                             const std::vector<LayerParams>& layers,
                             const ConvParams& conv, RngStream& rng,
                             AttVariant variant = AttVariant::kMask,
                             std::size_t threads = 1, StageTape* tape = nullptr,
                             const std::vector<KeySemanticDictionary>* dict_override =
                                 nullptr);

FeatureMap transformer_stage_backward(const FeatureMap& d_out, const StageConfig& cfg,
                                      const std::vector<LayerParams>& layers,
                                      const ConvParams& conv, const StageTape& tape,
                                      StageParams& d_params, std::size_t threads = 1);

FeatureMap model_forward(const FeatureMap& img, const ModelParams& mp, RngStream& rng,
                         AttVariant variant = AttVariant::kMask, std::size_t threads = 1,
                         ModelTape* tape = nullptr,
                         const std::vector<std::vector<KeySemanticDictionary>>*
                             dict_override = nullptr);

FeatureMap model_backward(const FeatureMap& d_out, const ModelParams& mp,
                          const ModelTape& tape, ModelParams& d_mp,
                          std::size_t threads = 1);

/// One full-gradient descent step on mean-absolute-error. Returns the loss
/// evaluated before the update.
double train_step(ModelParams& mp, const FeatureMap& noisy, const FeatureMap& clean,
                  double lr, RngStream& rng, std::size_t threads = 1);

// ---- Parameter plumbing ---------------------------------------------------

/// Visits every parameter array in the documented checkpoint order.
using ParamVisitor =
    std::function<void(double* data, std::size_t count, std::uint32_t rows,
                       std::uint32_t cols)>;
void visit_params(ModelParams& mp, const ParamVisitor& fn);
void visit_layer_params(LayerParams& lp, const std::function<void(Matrix&)>& fn);
void visit_stage_params(StageParams& sp, const ParamVisitor& fn);

std::size_t param_count(const ModelParams& mp);
std::vector<double> flatten_params(const ModelParams& mp);
void unflatten_params(ModelParams& mp, const std::vector<double>& flat);

/// Same-shaped parameter set with every value zeroed (gradient holder).
ModelParams zeros_like(const ModelParams& mp);

/// Builds a model with the conventional init: random convs and projections,
/// zeroed residual outputs (out_proj, ffn.w2, reconstruct conv) so the model
/// starts as the identity map.
ModelParams make_model(std::size_t img_channels, std::size_t channels,
                       std::size_t n_stages, const StageConfig& stage_cfg,
                       RngStream& rng);

LayerParams make_layer(std::size_t channels, std::size_t embed, std::size_t heads,
                       std::size_t expansion, RngStream& rng);

/// Versioned little-endian binary checkpoint: magic "KSEM", version u32,
/// array count u64, then u32 rows / u32 cols / doubles per array in
/// visit_params order.
void save_checkpoint(const std::string& path, const ModelParams& mp);
void load_checkpoint(const std::string& path, ModelParams& mp);

}  // namespace keysem
