#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

namespace keysem {

enum class PeakVariant { kGather, kMask };

struct CostInputs {
  std::uint64_t height = 0;   // H
  std::uint64_t width = 0;    // W
  std::uint64_t channels = 0; // C (also the embed width d of the attention)
  std::uint64_t window = 0;   // M
  std::uint64_t k = 0;
  std::uint64_t heads = 1;
  std::uint64_t n_layers = 6;
  // Pixels per token: 1 in this artifact's pixel-token default, 256 when
  // reproducing the 16x16-patch worked example.
  std::uint64_t token_pixels = 1;
};

struct CostReport {
  std::uint64_t time_msa = 0;
  std::uint64_t time_wmsa = 0;
  std::uint64_t time_semanir = 0;
  std::uint64_t space_msa = 0;
  std::uint64_t space_wmsa = 0;
  std::uint64_t space_semanir = 0;
  std::uint64_t dict_cost = 0;
  std::int64_t stage_diff = 0;     // n_layers*(wmsa - semanir) - dict_cost
  std::int64_t factored_diff = 0;  // 12*M^2*tp - 12*k - H*W (n_layers = 6)
  std::uint64_t factored_terms[3] = {0, 0, 0};
};

// Operation counts, taken verbatim from the complexity table (one
// multiply-add = 1 operation; softmax and FFN are not counted there and are
// not counted here either).
std::uint64_t time_msa(const CostInputs& ci);      // 4HWC^2 + 2(HW)^2 C
std::uint64_t time_wmsa(const CostInputs& ci);     // 4HWC^2 + 2 M^2 tp HWC
std::uint64_t time_semanir(const CostInputs& ci);  // 4HWC^2 + 2 k HWC
std::uint64_t dict_cost(const CostInputs& ci);     // (HW)^2 C

std::uint64_t space_msa(const CostInputs& ci);      // 4HWC^2 + 2h(HW)^2 C
std::uint64_t space_wmsa(const CostInputs& ci);     // 4HWC^2 + 2h M^2 tp HWC
std::uint64_t space_semanir(const CostInputs& ci);  // 4HWC^2 + 2hkHWC

/// Full per-stage comparison; positive stage_diff means the shared-dictionary
/// stage is cheaper than the W-MSA stage.
CostReport stage_comparison(const CostInputs& ci);

/// Exact peak simultaneously-live Matrix elements of one per-window attention
/// call, operands included (N = M^2 * token_pixels tokens, embed d = C):
///   gather: 4*N*C + N*k*(2*C + 1)
///   mask:   4*N*C + heads*N^2
/// These match the AllocMeter-instrumented implementations element for
/// element.
std::uint64_t peak_elements(const CostInputs& ci, PeakVariant variant);

std::string cost_report_json(const CostInputs& ci);

}  // namespace keysem
