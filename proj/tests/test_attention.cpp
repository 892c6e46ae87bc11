#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "keysem/attention.hpp"

using namespace keysem;

namespace {

double max_abs_diff(const Matrix& a, const Matrix& b) {
  REQUIRE(a.rows() == b.rows());
  REQUIRE(a.cols() == b.cols());
  double mx = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j)
      mx = std::max(mx, std::abs(a(i, j) - b(i, j)));
  return mx;
}

// Independent per-head attention oracle: no shared code with the library's
// score/softmax/output pipeline.
Matrix naive_dense(const Matrix& q, const Matrix& k, const Matrix& v, std::size_t heads,
                   bool mask_diagonal) {
  const std::size_t n = q.rows(), d = q.cols(), hd = d / heads;
  Matrix out(n, d);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t base = h * hd;
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> w;
      std::vector<std::size_t> js;
      for (std::size_t j = 0; j < n; ++j) {
        if (mask_diagonal && j == i) continue;
        double acc = 0.0;
        for (std::size_t c = 0; c < hd; ++c) acc += q(i, base + c) * k(j, base + c);
        w.push_back(acc / std::sqrt(static_cast<double>(hd)));
        js.push_back(j);
      }
      double mx = *std::max_element(w.begin(), w.end());
      double sum = 0.0;
      for (double& x : w) {
        x = std::exp(x - mx);
        sum += x;
      }
      for (std::size_t t = 0; t < js.size(); ++t)
        for (std::size_t c = 0; c < hd; ++c)
          out(i, base + c) += (w[t] / sum) * v(js[t], base + c);
    }
  }
  return out;
}

KeySemanticDictionary random_dict(RngStream& rng, std::size_t n, std::size_t k) {
  TokenSet ts{n, 4, random_matrix(rng, n, 4)};
  return knn_select(similarity(ts), k, false);
}

KeySemanticDictionary full_dict(std::size_t n) {
  KeySemanticDictionary d;
  d.n = n;
  d.k = n - 1;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) d.neighbors.push_back(static_cast<std::uint32_t>(j));
  return d;
}

}  // namespace

TEST_CASE("linear_proj: 1x2 tokens against hand arithmetic") {
  TokenSet ts{1, 2, Matrix(1, 2, {2.0, 3.0})};
  ProjectionParams p;
  p.w_qry = Matrix(2, 2, {1, 0, 0, 1});
  p.w_key = Matrix(2, 2, {0, 1, 1, 0});
  p.w_val = Matrix(2, 2, {1, 1, 1, -1});
  Qkv qkv = linear_proj(ts, p);
  CHECK(qkv.q(0, 0) == 2.0);
  CHECK(qkv.q(0, 1) == 3.0);
  CHECK(qkv.k(0, 0) == 3.0);
  CHECK(qkv.k(0, 1) == 2.0);
  CHECK(qkv.v(0, 0) == 5.0);
  CHECK(qkv.v(0, 1) == -1.0);
}

TEST_CASE("linear_proj: channel mismatch is an error") {
  TokenSet ts{1, 3, Matrix(1, 3, {1, 2, 3})};
  ProjectionParams p;
  p.w_qry = p.w_key = p.w_val = Matrix(2, 2, {1, 0, 0, 1});
  CHECK_THROWS_AS(linear_proj(ts, p), std::invalid_argument);
}

TEST_CASE("dense_attention: single token is a pass-through of V") {
  Matrix q(1, 2, {0.3, -0.7});
  Matrix k(1, 2, {5.0, 5.0});
  Matrix v(1, 2, {2.5, -1.5});
  AttentionOutput out = dense_attention(q, k, v, 1, false);
  CHECK(out.tokens(0, 0) == 2.5);
  CHECK(out.tokens(0, 1) == -1.5);
}

TEST_CASE("dense_attention: diagonal mask with N=2 swaps values") {
  RngStream rng(41);
  Matrix q = random_matrix(rng, 2, 2);
  Matrix k = random_matrix(rng, 2, 2);
  Matrix v = random_matrix(rng, 2, 2);
  AttentionOutput out = dense_attention(q, k, v, 1, true);
  // With self masked each token's only neighbor is the other token.
  CHECK(max_abs_diff(out.tokens, Matrix(2, 2, {v(1, 0), v(1, 1), v(0, 0), v(0, 1)})) <
        1e-15);
}

TEST_CASE("dense_attention matches the independent oracle") {
  RngStream rng(42);
  for (int t = 0; t < 50; ++t) {
    const std::size_t n = 2 + rng.uniform_index(7);
    const std::size_t heads = 1 + rng.uniform_index(2);
    const std::size_t d = heads * (1 + rng.uniform_index(3));
    Matrix q = random_matrix(rng, n, d);
    Matrix k = random_matrix(rng, n, d);
    Matrix v = random_matrix(rng, n, d);
    const bool mask = rng.uniform() < 0.5;
    AttentionOutput out = dense_attention(q, k, v, heads, mask);
    CHECK(max_abs_diff(out.tokens, naive_dense(q, k, v, heads, mask)) < 1e-12);
  }
}

TEST_CASE("gather and mask realizations agree (property)") {
  RngStream rng(43);
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 3 + rng.uniform_index(10);
    const std::size_t heads = 1 + rng.uniform_index(2);
    const std::size_t d = heads * (1 + rng.uniform_index(4));
    const std::size_t k = 1 + rng.uniform_index(n - 1);
    Matrix q = random_matrix(rng, n, d);
    Matrix kk = random_matrix(rng, n, d);
    Matrix v = random_matrix(rng, n, d);
    KeySemanticDictionary dict = random_dict(rng, n, k);
    AttentionOutput g = semanir_att_gather(q, kk, v, dict, heads);
    AttentionOutput m = semanir_att_mask(q, kk, v, dict, heads);
    CHECK(max_abs_diff(g.tokens, m.tokens) < 1e-12);
  }
}

TEST_CASE("k = N-1 sparse attention reduces to the diagonal-masked oracle") {
  RngStream rng(44);
  const std::size_t n = 6, heads = 2, d = 4;
  Matrix q = random_matrix(rng, n, d);
  Matrix k = random_matrix(rng, n, d);
  Matrix v = random_matrix(rng, n, d);
  KeySemanticDictionary dict = full_dict(n);
  AttentionOutput dense = dense_attention(q, k, v, heads, true);
  CHECK(max_abs_diff(semanir_att_gather(q, k, v, dict, heads).tokens, dense.tokens) <
        1e-12);
  // The mask realization shares the dense code path: identical mask sets give
  // bit-identical outputs, not merely close ones.
  CHECK(max_abs_diff(semanir_att_mask(q, k, v, dict, heads).tokens, dense.tokens) == 0.0);
}

TEST_CASE("tokens outside a row's neighbor set have exactly zero influence") {
  RngStream rng(45);
  const std::size_t n = 8, heads = 1, d = 3, k = 3;
  Matrix q = random_matrix(rng, n, d);
  Matrix key = random_matrix(rng, n, d);
  Matrix v = random_matrix(rng, n, d);
  KeySemanticDictionary dict = random_dict(rng, n, k);

  AttentionOutput base = semanir_att_gather(q, key, v, dict, heads);
  // Find a (row, excluded token) pair and perturb that token's value row.
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      bool chosen = false;
      for (std::size_t s = 0; s < k; ++s) chosen |= (dict.at(i, s) == j);
      if (chosen) continue;
      Matrix v2 = v;
      for (std::size_t c = 0; c < d; ++c) v2(j, c) += 100.0;
      AttentionOutput perturbed = semanir_att_gather(q, key, v2, dict, heads);
      for (std::size_t c = 0; c < d; ++c)
        CHECK(perturbed.tokens(i, c) == base.tokens(i, c));
    }
  }
}

TEST_CASE("captured weights are row-stochastic per head") {
  RngStream rng(46);
  const std::size_t n = 7, heads = 2, d = 4, k = 3;
  Matrix q = random_matrix(rng, n, d);
  Matrix key = random_matrix(rng, n, d);
  Matrix v = random_matrix(rng, n, d);
  KeySemanticDictionary dict = random_dict(rng, n, k);

  AttentionOutput g = semanir_att_gather(q, key, v, dict, heads, true);
  AttentionOutput m = semanir_att_mask(q, key, v, dict, heads, true);
  AttentionOutput dn = dense_attention(q, key, v, heads, false, true);
  REQUIRE(g.weights.has_value());
  REQUIRE(m.weights.has_value());
  REQUIRE(dn.weights.has_value());
  CHECK(g.weights->cols() == k * heads);
  CHECK(m.weights->cols() == n * heads);
  CHECK(dn.weights->cols() == n * heads);

  auto check_rows = [](const Matrix& w, std::size_t block, std::size_t heads_) {
    for (std::size_t i = 0; i < w.rows(); ++i)
      for (std::size_t h = 0; h < heads_; ++h) {
        double sum = 0.0;
        for (std::size_t j = 0; j < block; ++j) {
          const double x = w(i, h * block + j);
          CHECK(x >= 0.0);
          sum += x;
        }
        CHECK(std::abs(sum - 1.0) < 1e-12);
      }
  };
  check_rows(*g.weights, k, heads);
  check_rows(*m.weights, n, heads);
  check_rows(*dn.weights, n, heads);
}

TEST_CASE("sparse attention commutes with token permutation") {
  RngStream rng(47);
  for (int t = 0; t < 25; ++t) {
    const std::size_t n = 4 + rng.uniform_index(7);
    const std::size_t heads = 1 + rng.uniform_index(2);
    const std::size_t d = heads * 2;
    const std::size_t k = 1 + rng.uniform_index(n - 1);
    Matrix q = random_matrix(rng, n, d);
    Matrix key = random_matrix(rng, n, d);
    Matrix v = random_matrix(rng, n, d);
    KeySemanticDictionary dict = random_dict(rng, n, k);

    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = n; i > 1; --i)
      std::swap(perm[i - 1], perm[rng.uniform_index(i)]);

    Matrix qp(n, d), kp(n, d), vp(n, d);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < d; ++c) {
        qp(perm[i], c) = q(i, c);
        kp(perm[i], c) = key(i, c);
        vp(perm[i], c) = v(i, c);
      }
    KeySemanticDictionary dictp = permute_dictionary(dict, perm);

    AttentionOutput base = semanir_att_gather(q, key, v, dict, heads);
    AttentionOutput permuted = semanir_att_gather(qp, kp, vp, dictp, heads);
    double mx = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < d; ++c)
        mx = std::max(mx, std::abs(permuted.tokens(perm[i], c) - base.tokens(i, c)));
    CHECK(mx < 1e-12);
  }
}

TEST_CASE("attention_backward matches finite differences") {
  RngStream rng(48);
  const double step = 1e-6;
  for (int t = 0; t < 10; ++t) {
    const std::size_t n = 3 + rng.uniform_index(4);
    const std::size_t heads = 1 + rng.uniform_index(2);
    const std::size_t d = heads * (1 + rng.uniform_index(2));
    const std::size_t k = 1 + rng.uniform_index(n - 1);
    Matrix q = random_matrix(rng, n, d);
    Matrix key = random_matrix(rng, n, d);
    Matrix v = random_matrix(rng, n, d);
    Matrix upstream = random_matrix(rng, n, d);
    KeySemanticDictionary dict = random_dict(rng, n, k);

    AttentionGrads g = attention_backward(q, key, v, dict, heads, upstream);
    const auto loss = [&] {
      AttentionOutput out = semanir_att_gather(q, key, v, dict, heads);
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < d; ++c) s += upstream(i, c) * out.tokens(i, c);
      return s;
    };
    auto fd_check = [&](Matrix& operand, const Matrix& analytic) {
      for (std::size_t i = 0; i < operand.rows(); ++i)
        for (std::size_t j = 0; j < operand.cols(); ++j) {
          const double orig = operand(i, j);
          operand(i, j) = orig + step;
          const double lp = loss();
          operand(i, j) = orig - step;
          const double lm = loss();
          operand(i, j) = orig;
          CHECK(std::abs((lp - lm) / (2 * step) - analytic(i, j)) < 1e-6);
        }
    };
    fd_check(q, g.d_q);
    fd_check(key, g.d_k);
    fd_check(v, g.d_v);
  }
}

TEST_CASE("attention_backward: zero upstream gives zero gradients") {
  RngStream rng(49);
  const std::size_t n = 5, heads = 1, d = 3;
  Matrix q = random_matrix(rng, n, d);
  Matrix key = random_matrix(rng, n, d);
  Matrix v = random_matrix(rng, n, d);
  KeySemanticDictionary dict = random_dict(rng, n, 2);
  AttentionGrads g = attention_backward(q, key, v, dict, heads, Matrix(n, d));
  CHECK(max_abs_diff(g.d_q, Matrix(n, d)) == 0.0);
  CHECK(max_abs_diff(g.d_k, Matrix(n, d)) == 0.0);
  CHECK(max_abs_diff(g.d_v, Matrix(n, d)) == 0.0);
}

TEST_CASE("linear_proj_backward matches finite differences") {
  RngStream rng(50);
  const std::size_t n = 4, c = 3, d = 4;
  TokenSet ts{n, c, random_matrix(rng, n, c)};
  ProjectionParams p;
  p.w_qry = random_matrix(rng, c, d);
  p.w_key = random_matrix(rng, c, d);
  p.w_val = random_matrix(rng, c, d);
  p.heads = 2;
  Matrix uq = random_matrix(rng, n, d);
  Matrix uk = random_matrix(rng, n, d);
  Matrix uv = random_matrix(rng, n, d);

  ProjGrads g = linear_proj_backward(ts, p, uq, uk, uv);
  const auto loss = [&] {
    Qkv out = linear_proj(ts, p);
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j)
        s += uq(i, j) * out.q(i, j) + uk(i, j) * out.k(i, j) + uv(i, j) * out.v(i, j);
    return s;
  };
  const double step = 1e-6;
  auto fd_check = [&](Matrix& operand, const Matrix& analytic) {
    for (std::size_t i = 0; i < operand.rows(); ++i)
      for (std::size_t j = 0; j < operand.cols(); ++j) {
        const double orig = operand(i, j);
        operand(i, j) = orig + step;
        const double lp = loss();
        operand(i, j) = orig - step;
        const double lm = loss();
        operand(i, j) = orig;
        CHECK(std::abs((lp - lm) / (2 * step) - analytic(i, j)) < 1e-7);
      }
  };
  fd_check(ts.tokens, g.d_tokens);
  fd_check(p.w_qry, g.d_wqry);
  fd_check(p.w_key, g.d_wkey);
  fd_check(p.w_val, g.d_wval);
}

TEST_CASE("fault injection breaks gather/mask agreement (verifies the verifier)") {
  RngStream rng(51);
  const std::size_t n = 8, heads = 1, d = 4, k = 2;
  Matrix q = random_matrix(rng, n, d);
  Matrix key = random_matrix(rng, n, d);
  Matrix v = random_matrix(rng, n, d);
  KeySemanticDictionary dict = random_dict(rng, n, k);

  AttentionOutput m = semanir_att_mask(q, key, v, dict, heads);
  gather_fault_injection() = true;
  AttentionOutput g = semanir_att_gather(q, key, v, dict, heads);
  gather_fault_injection() = false;
  CHECK(max_abs_diff(g.tokens, m.tokens) > 1e-6);
}

TEST_CASE("attention input validation") {
  RngStream rng(52);
  Matrix q = random_matrix(rng, 4, 4);
  Matrix k = random_matrix(rng, 4, 4);
  Matrix v = random_matrix(rng, 3, 4);  // wrong row count
  KeySemanticDictionary dict = random_dict(rng, 4, 2);
  CHECK_THROWS_AS(semanir_att_gather(q, k, v, dict, 1), std::invalid_argument);
  Matrix v4 = random_matrix(rng, 4, 4);
  CHECK_THROWS_AS(semanir_att_gather(q, k, v4, dict, 3), std::invalid_argument);
  KeySemanticDictionary wrong_n = random_dict(rng, 5, 2);
  CHECK_THROWS_AS(semanir_att_mask(q, k, v4, wrong_n, 1), std::invalid_argument);
  KeySemanticDictionary bad = dict;
  bad.at(0, 0) = 9;  // out of range index
  CHECK_THROWS_AS(semanir_att_gather(q, k, v4, bad, 1), std::out_of_range);
}
