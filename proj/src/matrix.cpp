#include "keysem/matrix.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>
#include <utility>

namespace keysem {

namespace {

thread_local std::vector<AllocMeter*> g_scope_stack;

thread_local std::uint64_t g_flops = 0;

}  // namespace

namespace detail {

void alloc_track_add(std::size_t elements) {
  for (AllocMeter* m : g_scope_stack) {
    m->live += elements;
    if (m->live > m->high_water) m->high_water = m->live;
  }
}

void alloc_track_remove(std::size_t elements) {
  for (AllocMeter* m : g_scope_stack) {
    // A matrix may outlive the scope that created it; clamp at zero.
    m->live = (m->live >= elements) ? m->live - elements : 0;
  }
}

}  // namespace detail

std::uint64_t alloc_scope(AllocMeter& meter, const std::function<void()>& body) {
  meter.live = 0;
  meter.high_water = 0;
  g_scope_stack.push_back(&meter);
  try {
    body();
  } catch (...) {
    g_scope_stack.pop_back();
    throw;
  }
  g_scope_stack.pop_back();
  return meter.high_water;
}

namespace flops {
void reset() { g_flops = 0; }
std::uint64_t count() { return g_flops; }
void add(std::uint64_t n) { g_flops += n; }
}  // namespace flops

Matrix::Matrix(std::size_t rows, std::size_t cols)
    : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {
  track_();
}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> values)
    : rows_(rows), cols_(cols), data_(std::move(values)) {
  if (data_.size() != rows_ * cols_) {
    throw std::invalid_argument("Matrix: data length " + std::to_string(data_.size()) +
                                " does not match shape " + std::to_string(rows_) + "x" +
                                std::to_string(cols_));
  }
  track_();
}

Matrix::Matrix(const Matrix& other)
    : rows_(other.rows_), cols_(other.cols_), data_(other.data_) {
  track_();
}

Matrix::Matrix(Matrix&& other) noexcept
    : rows_(other.rows_), cols_(other.cols_), data_(std::move(other.data_)),
      tracked_(other.tracked_) {
  other.rows_ = 0;
  other.cols_ = 0;
  other.tracked_ = 0;
  other.data_.clear();
}

Matrix& Matrix::operator=(const Matrix& other) {
  if (this != &other) {
    untrack_();
    rows_ = other.rows_;
    cols_ = other.cols_;
    data_ = other.data_;
    track_();
  }
  return *this;
}

Matrix& Matrix::operator=(Matrix&& other) noexcept {
  if (this != &other) {
    untrack_();
    rows_ = other.rows_;
    cols_ = other.cols_;
    data_ = std::move(other.data_);
    tracked_ = other.tracked_;
    other.rows_ = 0;
    other.cols_ = 0;
    other.tracked_ = 0;
    other.data_.clear();
  }
  return *this;
}

Matrix::~Matrix() { untrack_(); }

void Matrix::track_() {
  tracked_ = data_.size();
  if (tracked_ != 0) detail::alloc_track_add(tracked_);
}

void Matrix::untrack_() {
  if (tracked_ != 0) detail::alloc_track_remove(tracked_);
  tracked_ = 0;
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

bool Matrix::all_finite(bool allow_sentinel) const {
  for (double v : data_) {
    if (std::isfinite(v)) continue;
    if (allow_sentinel && v == kMaskSentinel) continue;
    return false;
  }
  return true;
}

std::string Matrix::shape_str() const {
  return std::to_string(rows_) + "x" + std::to_string(cols_);
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw std::invalid_argument("matmul: shape mismatch " + a.shape_str() + " * " +
                                b.shape_str());
  }
  Matrix out(a.rows(), b.cols());
  const std::size_t n = a.rows(), m = a.cols(), p = b.cols();
  // Fixed i,k,j loop order: accumulation order is part of the contract.
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < m; ++k) {
      const double aik = a(i, k);
      for (std::size_t j = 0; j < p; ++j) {
        out(i, j) += aik * b(k, j);
      }
    }
  }
  return out;
}

Matrix matmul_at(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw std::invalid_argument("matmul_at: shape mismatch " + a.shape_str() + " , " +
                                b.shape_str());
  }
  Matrix out(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = a(k, i);
      for (std::size_t j = 0; j < b.cols(); ++j) {
        out(i, j) += aki * b(k, j);
      }
    }
  }
  return out;
}

Matrix matmul_bt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw std::invalid_argument("matmul_bt: shape mismatch " + a.shape_str() + " , " +
                                b.shape_str());
  }
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.rows(); ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) acc += a(i, k) * b(j, k);
      out(i, j) = acc;
    }
  }
  return out;
}

void row_softmax_inplace(Matrix& scores, double scale) {
  if (!(scale > 0.0)) {
    throw std::invalid_argument("row_softmax: scale must be positive");
  }
  const std::size_t rows = scores.rows(), cols = scores.cols();
  for (std::size_t i = 0; i < rows; ++i) {
    double mx = kMaskSentinel;
    for (std::size_t j = 0; j < cols; ++j) {
      const double v = scores(i, j);
      if (v != kMaskSentinel && v * scale > mx) mx = v * scale;
    }
    if (mx == kMaskSentinel) {
      throw std::domain_error("row_softmax: row " + std::to_string(i) +
                              " has no unmasked entries");
    }
    double sum = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      const double v = scores(i, j);
      if (v == kMaskSentinel) {
        scores(i, j) = 0.0;
      } else {
        const double e = std::exp(v * scale - mx);
        scores(i, j) = e;
        sum += e;
      }
    }
    for (std::size_t j = 0; j < cols; ++j) scores(i, j) /= sum;
  }
}

Matrix row_softmax(const Matrix& scores, double scale) {
  Matrix out = scores;
  row_softmax_inplace(out, scale);
  return out;
}

namespace {
std::uint64_t splitmix64(std::uint64_t& x) {
  x += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
}  // namespace

RngStream::RngStream(std::uint64_t seed) {
  std::uint64_t sm = seed;
  for (auto& s : s_) s = splitmix64(sm);
}

std::uint64_t RngStream::next_u64() {
  // xoshiro256**
  const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
  const std::uint64_t t = s_[1] << 17;
  s_[2] ^= s_[0];
  s_[3] ^= s_[1];
  s_[1] ^= s_[2];
  s_[0] ^= s_[3];
  s_[2] ^= t;
  s_[3] = rotl(s_[3], 45);
  return result;
}

double RngStream::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RngStream::uniform(double lo, double hi) {
  return lo + (hi - lo) * uniform();
}

double RngStream::normal() {
  if (has_cached_normal_) {
    has_cached_normal_ = false;
    return cached_normal_;
  }
  double u1 = uniform();
  while (u1 == 0.0) u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * 3.14159265358979323846 * u2;
  cached_normal_ = r * std::sin(theta);
  has_cached_normal_ = true;
  return r * std::cos(theta);
}

std::size_t RngStream::uniform_index(std::size_t n) {
  if (n == 0) throw std::invalid_argument("uniform_index: empty range");
  const std::uint64_t limit = UINT64_MAX - (UINT64_MAX % n);
  std::uint64_t v = next_u64();
  while (v >= limit) v = next_u64();
  return static_cast<std::size_t>(v % n);
}

Matrix random_matrix(RngStream& rng, std::size_t rows, std::size_t cols, double lo,
                     double hi) {
  Matrix m(rows, cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) m(i, j) = rng.uniform(lo, hi);
  return m;
}

}  // namespace keysem
