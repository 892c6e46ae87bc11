#include "keysem/attention.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace keysem {

namespace {

bool g_gather_fault = false;

void check_qkv(const Matrix& q, const Matrix& k, const Matrix& v, std::size_t heads) {
  if (q.rows() != k.rows() || q.rows() != v.rows() || q.cols() != k.cols() ||
      q.cols() != v.cols()) {
    throw std::invalid_argument("attention: inconsistent Q/K/V shapes " + q.shape_str() +
                                " " + k.shape_str() + " " + v.shape_str());
  }
  if (heads == 0 || q.cols() % heads != 0) {
    throw std::invalid_argument("attention: embed dim " + std::to_string(q.cols()) +
                                " not divisible by heads " + std::to_string(heads));
  }
}

void check_dict(const KeySemanticDictionary& dict, std::size_t n) {
  if (dict.n != n) {
    throw std::invalid_argument("attention: dictionary for " + std::to_string(dict.n) +
                                " tokens used with " + std::to_string(n));
  }
  if (dict.k > n) throw std::invalid_argument("attention: dictionary k exceeds N");
  for (std::uint32_t idx : dict.neighbors) {
    if (idx >= n) throw std::out_of_range("attention: dictionary index out of range");
  }
}

// Shared core for dense_attention and semanir_att_mask: identical mask sets
// give bit-identical outputs. allowed is an N x N byte mask.
AttentionOutput masked_attention_core(const Matrix& q, const Matrix& k, const Matrix& v,
                                      std::size_t heads,
                                      const std::vector<std::uint8_t>& allowed,
                                      bool capture_weights) {
  const std::size_t n = q.rows(), d = q.cols(), hd = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  std::vector<Matrix> scores;
  scores.reserve(heads);
  std::uint64_t madds = 0;
  for (std::size_t h = 0; h < heads; ++h) {
    scores.emplace_back(n, n);
    Matrix& s = scores.back();
    const std::size_t base = h * hd;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        if (!allowed[i * n + j]) {
          s(i, j) = kMaskSentinel;
          continue;
        }
        double acc = 0.0;
        for (std::size_t c = 0; c < hd; ++c) acc += q(i, base + c) * k(j, base + c);
        s(i, j) = acc;
        madds += hd;
      }
    }
  }

  AttentionOutput out;
  out.tokens = Matrix(n, d);
  if (capture_weights) out.weights = Matrix(n, n * heads);

  for (std::size_t h = 0; h < heads; ++h) {
    Matrix& w = scores[h];
    row_softmax_inplace(w, scale);
    const std::size_t base = h * hd;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        const double wij = w(i, j);
        for (std::size_t c = 0; c < hd; ++c) {
          out.tokens(i, base + c) += wij * v(j, base + c);
        }
      }
      if (capture_weights) {
        for (std::size_t j = 0; j < n; ++j) (*out.weights)(i, h * n + j) = w(i, j);
      }
    }
    madds += n * n * hd;
  }
  flops::add(madds);
  return out;
}

}  // namespace

bool& gather_fault_injection() { return g_gather_fault; }

Qkv linear_proj(const TokenSet& tokens, const ProjectionParams& p) {
  if (tokens.channels != p.w_qry.rows() || tokens.channels != p.w_key.rows() ||
      tokens.channels != p.w_val.rows()) {
    throw std::invalid_argument("linear_proj: token channels " +
                                std::to_string(tokens.channels) +
                                " do not match weight rows");
  }
  Qkv out{matmul(tokens.tokens, p.w_qry), matmul(tokens.tokens, p.w_key),
          matmul(tokens.tokens, p.w_val)};
  flops::add(3ull * tokens.n * tokens.channels * p.embed_dim());
  return out;
}

ProjGrads linear_proj_backward(const TokenSet& tokens, const ProjectionParams& p,
                               const Matrix& d_q, const Matrix& d_k, const Matrix& d_v) {
  ProjGrads g;
  g.d_wqry = matmul_at(tokens.tokens, d_q);
  g.d_wkey = matmul_at(tokens.tokens, d_k);
  g.d_wval = matmul_at(tokens.tokens, d_v);
  g.d_tokens = matmul_bt(d_q, p.w_qry);
  const Matrix tk = matmul_bt(d_k, p.w_key);
  const Matrix tv = matmul_bt(d_v, p.w_val);
  for (std::size_t i = 0; i < g.d_tokens.rows(); ++i)
    for (std::size_t j = 0; j < g.d_tokens.cols(); ++j)
      g.d_tokens(i, j) += tk(i, j) + tv(i, j);
  return g;
}

AttentionOutput dense_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                                std::size_t heads, bool mask_diagonal,
                                bool capture_weights) {
  check_qkv(q, k, v, heads);
  const std::size_t n = q.rows();
  if (mask_diagonal && n < 2) {
    throw std::invalid_argument("dense_attention: diagonal mask needs N >= 2");
  }
  std::vector<std::uint8_t> allowed(n * n, 1);
  if (mask_diagonal) {
    for (std::size_t i = 0; i < n; ++i) allowed[i * n + i] = 0;
  }
  return masked_attention_core(q, k, v, heads, allowed, capture_weights);
}

AttentionOutput semanir_att_mask(const Matrix& q, const Matrix& k, const Matrix& v,
                                 const KeySemanticDictionary& dict, std::size_t heads,
                                 bool capture_weights) {
  check_qkv(q, k, v, heads);
  check_dict(dict, q.rows());
  const std::size_t n = q.rows();
  std::vector<std::uint8_t> allowed(n * n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < dict.k; ++j) allowed[i * n + dict.at(i, j)] = 1;
  }
  return masked_attention_core(q, k, v, heads, allowed, capture_weights);
}

AttentionOutput semanir_att_gather(const Matrix& q, const Matrix& k, const Matrix& v,
                                   const KeySemanticDictionary& dict, std::size_t heads,
                                   bool capture_weights) {
  check_qkv(q, k, v, heads);
  check_dict(dict, q.rows());
  const std::size_t n = q.rows(), d = q.cols(), hd = d / heads, kk = dict.k;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  // K-hat / V-hat hold full gathered rows (head-agnostic: the selected rows
  // are the same for every head).
  Matrix khat(n * kk, d);
  Matrix vhat(n * kk, d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < kk; ++j) {
      std::size_t idx = dict.at(i, j);
      if (g_gather_fault) idx = (idx + 1) % n;
      for (std::size_t c = 0; c < d; ++c) {
        khat(i * kk + j, c) = k(idx, c);
        vhat(i * kk + j, c) = v(idx, c);
      }
    }
  }

  AttentionOutput out;
  out.tokens = Matrix(n, d);
  if (capture_weights) out.weights = Matrix(n, kk * heads);

  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t base = h * hd;
    Matrix scores(n, kk);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < kk; ++j) {
        double acc = 0.0;
        for (std::size_t c = 0; c < hd; ++c)
          acc += q(i, base + c) * khat(i * kk + j, base + c);
        scores(i, j) = acc;
      }
    }
    row_softmax_inplace(scores, scale);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < kk; ++j) {
        const double wij = scores(i, j);
        for (std::size_t c = 0; c < hd; ++c) {
          out.tokens(i, base + c) += wij * vhat(i * kk + j, base + c);
        }
      }
      if (capture_weights) {
        for (std::size_t j = 0; j < kk; ++j) (*out.weights)(i, h * kk + j) = scores(i, j);
      }
    }
  }
  flops::add(2ull * n * kk * d);
  return out;
}

AttentionGrads attention_backward(const Matrix& q, const Matrix& k, const Matrix& v,
                                  const KeySemanticDictionary& dict, std::size_t heads,
                                  const Matrix& upstream) {
  check_qkv(q, k, v, heads);
  check_dict(dict, q.rows());
  if (upstream.rows() != q.rows() || upstream.cols() != q.cols()) {
    throw std::invalid_argument("attention_backward: upstream shape " +
                                upstream.shape_str() + " does not match " +
                                q.shape_str());
  }
  const std::size_t n = q.rows(), d = q.cols(), hd = d / heads, kk = dict.k;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  AttentionGrads g{Matrix(n, d), Matrix(n, d), Matrix(n, d)};
  std::vector<double> s(kk), dw(kk);

  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t base = h * hd;
    for (std::size_t i = 0; i < n; ++i) {
      // Recompute the forward softmax row for this (head, token).
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < kk; ++j) {
        const std::size_t idx = dict.at(i, j);
        double acc = 0.0;
        for (std::size_t c = 0; c < hd; ++c) acc += q(i, base + c) * k(idx, base + c);
        s[j] = acc * scale;
        if (s[j] > mx) mx = s[j];
      }
      double sum = 0.0;
      for (std::size_t j = 0; j < kk; ++j) {
        s[j] = std::exp(s[j] - mx);
        sum += s[j];
      }
      for (std::size_t j = 0; j < kk; ++j) s[j] /= sum;  // s now holds weights

      // dV and dw.
      double wdot = 0.0;
      for (std::size_t j = 0; j < kk; ++j) {
        const std::size_t idx = dict.at(i, j);
        double acc = 0.0;
        for (std::size_t c = 0; c < hd; ++c) {
          const double u = upstream(i, base + c);
          g.d_v(idx, base + c) += s[j] * u;
          acc += u * v(idx, base + c);
        }
        dw[j] = acc;
        wdot += s[j] * acc;
      }
      // Softmax adjoint, then dQ / dK.
      for (std::size_t j = 0; j < kk; ++j) {
        const double ds = s[j] * (dw[j] - wdot) * scale;
        const std::size_t idx = dict.at(i, j);
        for (std::size_t c = 0; c < hd; ++c) {
          g.d_q(i, base + c) += ds * k(idx, base + c);
          g.d_k(idx, base + c) += ds * q(i, base + c);
        }
      }
    }
  }
  return g;
}

}  // namespace keysem
