#pragma once

#include <cstddef>
#include <optional>

#include "keysem/dictionary.hpp"
#include "keysem/matrix.hpp"
#include "keysem/patching.hpp"

namespace keysem {

/// Bias-free Q/K/V projection weights, C x d each.
struct ProjectionParams {
  Matrix w_qry;
  Matrix w_key;
  Matrix w_val;
  std::size_t heads = 1;

  std::size_t embed_dim() const { return w_qry.cols(); }
  std::size_t head_dim() const { return w_qry.cols() / heads; }
};

struct Qkv {
  Matrix q;
  Matrix k;
  Matrix v;
};

struct AttentionOutput {
  Matrix tokens;  // N x d
  // Debug only: retained softmax weights, heads concatenated along columns
  // (N x k*heads for the sparse variants, N x N*heads for dense). Capturing
  // allocates beyond the documented peak-element formulas.
  std::optional<Matrix> weights;
};

struct AttentionGrads {
  Matrix d_q;
  Matrix d_k;
  Matrix d_v;
};

struct ProjGrads {
  Matrix d_tokens;  // N x C
  Matrix d_wqry;    // C x d
  Matrix d_wkey;
  Matrix d_wval;
};

Qkv linear_proj(const TokenSet& tokens, const ProjectionParams& p);

ProjGrads linear_proj_backward(const TokenSet& tokens, const ProjectionParams& p,
                               const Matrix& d_q, const Matrix& d_k, const Matrix& d_v);

/// Full softmax attention, the oracle the sparse variants are checked against.
/// mask_diagonal excludes j == i via the sentinel, bridging to the
/// self-excluded dictionary.
AttentionOutput dense_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                                std::size_t heads, bool mask_diagonal,
                                bool capture_weights = false);

/// Gather realization: materializes the selected key/value rows per token.
/// Peak Matrix elements (weights off, operands included): 4*N*d + N*k*(2*d+1).
AttentionOutput semanir_att_gather(const Matrix& q, const Matrix& k, const Matrix& v,
                                   const KeySemanticDictionary& dict, std::size_t heads,
                                   bool capture_weights = false);

/// Mask realization: full score matrix per head, non-selected entries set to
/// the -inf sentinel. Peak Matrix elements: 4*N*d + heads*N*N.
AttentionOutput semanir_att_mask(const Matrix& q, const Matrix& k, const Matrix& v,
                                 const KeySemanticDictionary& dict, std::size_t heads,
                                 bool capture_weights = false);

/// Reverse-mode gradients of the sparse attention w.r.t. Q, K, V with the
/// dictionary held fixed (hard top-k selection is non-differentiable).
AttentionGrads attention_backward(const Matrix& q, const Matrix& k, const Matrix& v,
                                  const KeySemanticDictionary& dict, std::size_t heads,
                                  const Matrix& upstream);

/// Test-only switch: offsets every gathered index by one so the verification
/// suites can prove they detect a broken lookup.
bool& gather_fault_injection();

}  // namespace keysem
