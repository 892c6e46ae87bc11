#include "keysem/cost_model.hpp"

#include <stdexcept>

#include <nlohmann/json.hpp>

namespace keysem {

namespace {

std::uint64_t mul(std::uint64_t a, std::uint64_t b) {
  std::uint64_t r = 0;
  if (__builtin_mul_overflow(a, b, &r)) {
    throw std::overflow_error("cost_model: multiplication overflow");
  }
  return r;
}

std::uint64_t add(std::uint64_t a, std::uint64_t b) {
  std::uint64_t r = 0;
  if (__builtin_add_overflow(a, b, &r)) {
    throw std::overflow_error("cost_model: addition overflow");
  }
  return r;
}

std::uint64_t proj_term(const CostInputs& ci) {
  return mul(4, mul(mul(ci.height, ci.width), mul(ci.channels, ci.channels)));
}

std::uint64_t window_tokens(const CostInputs& ci) {
  return mul(mul(ci.window, ci.window), ci.token_pixels);
}

}  // namespace

std::uint64_t time_msa(const CostInputs& ci) {
  const std::uint64_t hw = mul(ci.height, ci.width);
  return add(proj_term(ci), mul(2, mul(mul(hw, hw), ci.channels)));
}

std::uint64_t time_wmsa(const CostInputs& ci) {
  const std::uint64_t hw = mul(ci.height, ci.width);
  return add(proj_term(ci), mul(2, mul(window_tokens(ci), mul(hw, ci.channels))));
}

std::uint64_t time_semanir(const CostInputs& ci) {
  const std::uint64_t hw = mul(ci.height, ci.width);
  return add(proj_term(ci), mul(2, mul(ci.k, mul(hw, ci.channels))));
}

std::uint64_t dict_cost(const CostInputs& ci) {
  const std::uint64_t hw = mul(ci.height, ci.width);
  return mul(mul(hw, hw), ci.channels);
}

std::uint64_t space_msa(const CostInputs& ci) {
  const std::uint64_t hw = mul(ci.height, ci.width);
  return add(proj_term(ci), mul(2, mul(ci.heads, mul(mul(hw, hw), ci.channels))));
}

std::uint64_t space_wmsa(const CostInputs& ci) {
  const std::uint64_t hw = mul(ci.height, ci.width);
  return add(proj_term(ci),
             mul(2, mul(ci.heads, mul(window_tokens(ci), mul(hw, ci.channels)))));
}

std::uint64_t space_semanir(const CostInputs& ci) {
  const std::uint64_t hw = mul(ci.height, ci.width);
  return add(proj_term(ci), mul(2, mul(ci.heads, mul(ci.k, mul(hw, ci.channels)))));
}

CostReport stage_comparison(const CostInputs& ci) {
  if (ci.n_layers < 1) throw std::invalid_argument("stage_comparison: n_layers >= 1");
  CostReport r;
  r.time_msa = time_msa(ci);
  r.time_wmsa = time_wmsa(ci);
  r.time_semanir = time_semanir(ci);
  r.space_msa = space_msa(ci);
  r.space_wmsa = space_wmsa(ci);
  r.space_semanir = space_semanir(ci);
  r.dict_cost = dict_cost(ci);

  const auto layers_diff =
      static_cast<std::int64_t>(ci.n_layers) *
      (static_cast<std::int64_t>(r.time_wmsa) - static_cast<std::int64_t>(r.time_semanir));
  r.stage_diff = layers_diff - static_cast<std::int64_t>(r.dict_cost);

  // The 6-layer factored form: (12 M^2 tp - 12 k - HW) * HWC, reported as its
  // three bracket terms.
  r.factored_terms[0] = mul(12, window_tokens(ci));
  r.factored_terms[1] = mul(12, ci.k);
  r.factored_terms[2] = mul(ci.height, ci.width);
  r.factored_diff = static_cast<std::int64_t>(r.factored_terms[0]) -
                    static_cast<std::int64_t>(r.factored_terms[1]) -
                    static_cast<std::int64_t>(r.factored_terms[2]);
  return r;
}

std::uint64_t peak_elements(const CostInputs& ci, PeakVariant variant) {
  const std::uint64_t n = window_tokens(ci);
  const std::uint64_t d = ci.channels;
  const std::uint64_t operands = mul(4, mul(n, d));
  if (variant == PeakVariant::kGather) {
    return add(operands, mul(mul(n, ci.k), add(mul(2, d), 1)));
  }
  return add(operands, mul(ci.heads, mul(n, n)));
}

std::string cost_report_json(const CostInputs& ci) {
  const CostReport r = stage_comparison(ci);
  nlohmann::ordered_json j;
  j["inputs"] = {{"height", ci.height},   {"width", ci.width},
                 {"channels", ci.channels}, {"window", ci.window},
                 {"k", ci.k},             {"heads", ci.heads},
                 {"n_layers", ci.n_layers}, {"token_pixels", ci.token_pixels}};
  j["time"] = {{"msa", r.time_msa}, {"wmsa", r.time_wmsa}, {"semanir", r.time_semanir}};
  j["table_space"] = {{"msa", r.space_msa},
                      {"wmsa", r.space_wmsa},
                      {"semanir", r.space_semanir}};
  j["space"] = {{"gather", peak_elements(ci, PeakVariant::kGather)},
                {"mask", peak_elements(ci, PeakVariant::kMask)}};
  j["dict_cost"] = r.dict_cost;
  j["stage_diff"] = r.stage_diff;
  j["factored"] = {{"terms", {r.factored_terms[0], r.factored_terms[1],
                              r.factored_terms[2]}},
                   {"diff", r.factored_diff}};
  return j.dump(2);
}

}  // namespace keysem
