#pragma once

#include <cstddef>
#include <vector>

#include "keysem/matrix.hpp"

namespace keysem {

/// H x W x C dense feature grid, row-major (h, w, c).
struct FeatureMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<double> data;

  FeatureMap() = default;
  FeatureMap(std::size_t h, std::size_t w, std::size_t c)
      : height(h), width(w), channels(c), data(h * w * c, 0.0) {}

  double& at(std::size_t h, std::size_t w, std::size_t c) {
    return data[(h * width + w) * channels + c];
  }
  double at(std::size_t h, std::size_t w, std::size_t c) const {
    return data[(h * width + w) * channels + c];
  }
};

/// N x C token block for one window; tokens are single pixels in row-major
/// scan order within the window.
struct TokenSet {
  std::size_t n = 0;
  std::size_t channels = 0;
  Matrix tokens;  // n x channels
};

struct PadSpec {
  std::size_t bottom = 0;
  std::size_t right = 0;
};

struct WindowSet {
  std::size_t window = 0;  // M
  std::size_t grid_rows = 0;
  std::size_t grid_cols = 0;
  PadSpec pad;
  std::vector<TokenSet> windows;  // grid_rows * grid_cols entries, row-major
};

struct ConvParams {
  // kernel[(kh*3+kw)*c_in + ci] gives the c_out-major layout below:
  // index ((kh*3 + kw)*c_in + ci)*c_out + co
  std::size_t c_in = 0;
  std::size_t c_out = 0;
  std::vector<double> kernel;  // 3*3*c_in*c_out
  std::vector<double> bias;    // c_out

  ConvParams() = default;
  ConvParams(std::size_t cin, std::size_t cout)
      : c_in(cin), c_out(cout), kernel(9 * cin * cout, 0.0), bias(cout, 0.0) {}

  double& k(std::size_t kh, std::size_t kw, std::size_t ci, std::size_t co) {
    return kernel[((kh * 3 + kw) * c_in + ci) * c_out + co];
  }
  double k(std::size_t kh, std::size_t kw, std::size_t ci, std::size_t co) const {
    return kernel[((kh * 3 + kw) * c_in + ci) * c_out + co];
  }
};

/// Splits f into non-overlapping M x M windows of pixel tokens. Non-divisible
/// sizes are mirror-padded (edge-including reflection) on the bottom/right;
/// the pad amounts are recorded so window_merge can crop exactly.
WindowSet window_partition(const FeatureMap& f, std::size_t window);

/// Exact inverse of window_partition on the unpadded region.
FeatureMap window_merge(const WindowSet& ws, std::size_t height, std::size_t width);

/// 3x3 convolution, zero-padded borders, same spatial size.
FeatureMap conv3x3(const FeatureMap& f, const ConvParams& p);

/// Adjoints used by the training path. d_out has the conv output shape.
FeatureMap conv3x3_backward_input(const FeatureMap& d_out, const ConvParams& p);
void conv3x3_backward_params(const FeatureMap& input, const FeatureMap& d_out,
                             ConvParams& d_params);

/// Scatter window-token gradients back to a map of the original (pre-pad)
/// size, accumulating mirrored pad contributions into their source pixels.
FeatureMap window_partition_backward(const WindowSet& d_windows, std::size_t height,
                                     std::size_t width);

/// Gradient of window_merge: re-partition d_map; positions that were cropped
/// (padding) receive zero gradient.
WindowSet window_merge_backward(const FeatureMap& d_map, const WindowSet& like);

}  // namespace keysem
