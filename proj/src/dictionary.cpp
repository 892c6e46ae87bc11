#include "keysem/dictionary.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace keysem {

namespace {
std::atomic<std::uint64_t> g_construction_events{0};
}

SimilarityMatrix similarity(const TokenSet& tokens) {
  const std::size_t n = tokens.n;
  if (n < 2) throw std::invalid_argument("similarity: need at least 2 tokens");
  const std::size_t c = tokens.channels;
  SimilarityMatrix sim;
  sim.n = n;
  sim.values = Matrix(n, n);
  // Each unordered pair computed once and mirrored, so symmetry is exact.
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t ch = 0; ch < c; ++ch) {
        acc += tokens.tokens(i, ch) * tokens.tokens(j, ch);
      }
      sim.values(i, j) = acc;
      sim.values(j, i) = acc;
      flops::add(c);
    }
  }
  return sim;
}

SimilarityMatrix cosine_similarity(const TokenSet& tokens) {
  SimilarityMatrix sim = similarity(tokens);
  std::vector<double> norms(sim.n);
  for (std::size_t i = 0; i < sim.n; ++i) norms[i] = std::sqrt(sim.values(i, i));
  for (std::size_t i = 0; i < sim.n; ++i) {
    for (std::size_t j = 0; j < sim.n; ++j) {
      const double d = norms[i] * norms[j];
      sim.values(i, j) = d > 0.0 ? sim.values(i, j) / d : 0.0;
    }
  }
  return sim;
}

KeySemanticDictionary knn_select(const SimilarityMatrix& sim, std::size_t k,
                                 bool include_self) {
  const std::size_t n = sim.n;
  const std::size_t max_k = include_self ? n : n - 1;
  if (k < 1 || k > max_k) {
    throw std::invalid_argument("knn_select: k=" + std::to_string(k) +
                                " out of range [1, " + std::to_string(max_k) + "]");
  }
  KeySemanticDictionary dict;
  dict.n = n;
  dict.k = k;
  dict.include_self = include_self;
  dict.neighbors.resize(n * k);

  std::vector<std::uint32_t> cand;
  cand.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    cand.clear();
    for (std::size_t j = 0; j < n; ++j) {
      if (include_self || j != i) cand.push_back(static_cast<std::uint32_t>(j));
    }
    // Descending similarity, ties by ascending index. Full sort keeps the
    // row order deterministic past the k-th element boundary as well.
    std::stable_sort(cand.begin(), cand.end(),
                     [&](std::uint32_t a, std::uint32_t b) {
                       const double sa = sim.values(i, a), sb = sim.values(i, b);
                       if (sa != sb) return sa > sb;
                       return a < b;
                     });
    std::copy(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k),
              dict.neighbors.begin() + static_cast<std::ptrdiff_t>(i * k));
  }
  return dict;
}

std::vector<KeySemanticDictionary> dictionary_for_stage(const WindowSet& ws,
                                                        std::size_t k,
                                                        bool include_self) {
  std::vector<KeySemanticDictionary> dicts;
  dicts.reserve(ws.windows.size());
  for (const TokenSet& ts : ws.windows) {
    dicts.push_back(knn_select(similarity(ts), k, include_self));
    g_construction_events.fetch_add(1, std::memory_order_relaxed);
  }
  return dicts;
}

std::string dictionary_dump(const KeySemanticDictionary& dict) {
  std::ostringstream os;
  for (std::size_t i = 0; i < dict.n; ++i) {
    os << i << ":";
    for (std::size_t j = 0; j < dict.k; ++j) os << ' ' << dict.at(i, j);
    os << '\n';
  }
  return os.str();
}

std::uint64_t dictionary_construction_events() {
  return g_construction_events.load(std::memory_order_relaxed);
}

void reset_dictionary_construction_events() {
  g_construction_events.store(0, std::memory_order_relaxed);
}

KeySemanticDictionary permute_dictionary(const KeySemanticDictionary& dict,
                                         const std::vector<std::size_t>& perm) {
  if (perm.size() != dict.n) {
    throw std::invalid_argument("permute_dictionary: permutation size mismatch");
  }
  KeySemanticDictionary out = dict;
  for (std::size_t i = 0; i < dict.n; ++i) {
    for (std::size_t j = 0; j < dict.k; ++j) {
      out.neighbors[perm[i] * dict.k + j] =
          static_cast<std::uint32_t>(perm[dict.at(i, j)]);
    }
  }
  return out;
}

}  // namespace keysem
