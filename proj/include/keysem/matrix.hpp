#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

namespace keysem {

// Masked entries use this sentinel; row_softmax maps it to an exact 0 weight.
inline constexpr double kMaskSentinel = -std::numeric_limits<double>::infinity();

namespace detail {
// Thread-local accounting of live Matrix elements, consumed by alloc_scope.
void alloc_track_add(std::size_t elements);
void alloc_track_remove(std::size_t elements);
}  // namespace detail

/// Dense row-major matrix of 64-bit floats. Element counts are reported to the
/// active AllocMeter scope (if any) on construction and destruction.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> values);

  Matrix(const Matrix& other);
  Matrix(Matrix&& other) noexcept;
  Matrix& operator=(const Matrix& other);
  Matrix& operator=(Matrix&& other) noexcept;
  ~Matrix();

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  static Matrix identity(std::size_t n);

  // True when every entry is finite; sentinel entries are permitted only when
  // allow_sentinel is set.
  bool all_finite(bool allow_sentinel = false) const;

  std::string shape_str() const;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
  std::size_t tracked_ = 0;

  void track_();
  void untrack_();
};

/// Product a*b with fixed accumulation order (i, k, j) so results are
/// bit-reproducible across runs and platforms.
Matrix matmul(const Matrix& a, const Matrix& b);

/// a^T * b and a * b^T with fixed accumulation orders, used by the adjoints.
Matrix matmul_at(const Matrix& a, const Matrix& b);
Matrix matmul_bt(const Matrix& a, const Matrix& b);

/// Row-wise softmax of scores*scale, stabilized by per-row max subtraction.
/// Sentinel entries produce exactly 0; a row of all sentinels is an error.
Matrix row_softmax(const Matrix& scores, double scale);

/// In-place variant used by the attention kernels to keep peak allocation at
/// the documented element counts. Same arithmetic as row_softmax.
void row_softmax_inplace(Matrix& scores, double scale);

/// Peak-element meter. Counts Matrix elements live inside an alloc_scope on
/// the current thread; high_water is monotone within a scope.
struct AllocMeter {
  std::uint64_t live = 0;
  std::uint64_t high_water = 0;
};

/// Runs body with meter active; returns the peak number of simultaneously
/// live Matrix elements allocated during the scope. Scopes nest.
std::uint64_t alloc_scope(AllocMeter& meter, const std::function<void()>& body);

/// Multiply-add counter instrumented in the projection/attention/similarity
/// paths. Convention follows the cost model: one multiply-add = 1 operation.
namespace flops {
void reset();
std::uint64_t count();
void add(std::uint64_t n);
}  // namespace flops

/// Deterministic seedable generator: xoshiro256** seeded via SplitMix64.
/// Identical seed gives an identical sequence on every platform.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed);

  std::uint64_t next_u64();
  /// Uniform in [0, 1), 53-bit resolution.
  double uniform();
  double uniform(double lo, double hi);
  /// Standard normal via Box-Muller (pairs cached).
  double normal();
  /// Uniform integer in [0, n), rejection sampled (unbiased).
  std::size_t uniform_index(std::size_t n);

 private:
  std::uint64_t s_[4];
  double cached_normal_ = 0.0;
  bool has_cached_normal_ = false;
};

/// Matrix filled with uniform values in [lo, hi).
Matrix random_matrix(RngStream& rng, std::size_t rows, std::size_t cols,
                     double lo = -1.0, double hi = 1.0);

}  // namespace keysem
