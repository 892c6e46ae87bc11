#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "keysem/matrix.hpp"
#include "keysem/patching.hpp"

namespace keysem {

/// N x N token similarity, symmetric; each unordered pair is computed once.
struct SimilarityMatrix {
  std::size_t n = 0;
  Matrix values;  // n x n
};

/// Per-token table of the k most similar neighbor indices. Rows are sorted by
/// descending similarity, ties broken by ascending index.
struct KeySemanticDictionary {
  std::size_t n = 0;
  std::size_t k = 0;
  bool include_self = false;
  std::vector<std::uint32_t> neighbors;  // n * k

  std::uint32_t at(std::size_t row, std::size_t j) const { return neighbors[row * k + j]; }
  std::uint32_t& at(std::size_t row, std::size_t j) { return neighbors[row * k + j]; }
};

/// Raw dot-product self-similarity of the token set.
SimilarityMatrix similarity(const TokenSet& tokens);

/// Cosine similarity; provided as an option, not used by the default path.
SimilarityMatrix cosine_similarity(const TokenSet& tokens);

/// Top-k neighbor selection. Self is excluded unless include_self is set.
KeySemanticDictionary knn_select(const SimilarityMatrix& sim, std::size_t k,
                                 bool include_self = false);

/// One dictionary per window, built from the raw stage-input tokens. Built
/// exactly once per stage; the construction counter below tracks this.
std::vector<KeySemanticDictionary> dictionary_for_stage(const WindowSet& ws,
                                                        std::size_t k,
                                                        bool include_self = false);

/// Debug dump: one line per token, "i: j1 j2 ... jk".
std::string dictionary_dump(const KeySemanticDictionary& dict);

/// Count of per-window dictionary construction events since last reset.
std::uint64_t dictionary_construction_events();
void reset_dictionary_construction_events();

/// A dictionary with rows and stored indices remapped under perm, where
/// perm[i] is the new position of token i. Row order within each row is kept.
KeySemanticDictionary permute_dictionary(const KeySemanticDictionary& dict,
                                         const std::vector<std::size_t>& perm);

}  // namespace keysem
