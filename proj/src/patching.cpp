#include "keysem/patching.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

namespace keysem {

namespace {

// Edge-including mirror: valid for pad <= extent, which the window_partition
// precondition (M <= 2*min(H,W)) guarantees.
std::size_t mirror(std::size_t idx, std::size_t extent) {
  return idx < extent ? idx : 2 * extent - 1 - idx;
}

std::size_t round_up(std::size_t x, std::size_t m) { return ((x + m - 1) / m) * m; }

void check_windowset(const WindowSet& ws) {
  if (ws.windows.size() != ws.grid_rows * ws.grid_cols) {
    throw std::invalid_argument("WindowSet: expected " +
                                std::to_string(ws.grid_rows * ws.grid_cols) +
                                " windows, got " + std::to_string(ws.windows.size()));
  }
  const std::size_t n = ws.window * ws.window;
  for (const TokenSet& t : ws.windows) {
    if (t.n != n || t.tokens.rows() != n) {
      throw std::invalid_argument("WindowSet: window with " + std::to_string(t.n) +
                                  " tokens, expected " + std::to_string(n));
    }
  }
}

}  // namespace

WindowSet window_partition(const FeatureMap& f, std::size_t window) {
  const std::size_t M = window;
  if (M < 2) throw std::invalid_argument("window_partition: window must be >= 2");
  if (M > 2 * std::min(f.height, f.width)) {
    throw std::invalid_argument("window_partition: window " + std::to_string(M) +
                                " too large for map " + std::to_string(f.height) + "x" +
                                std::to_string(f.width));
  }
  const std::size_t ph = round_up(f.height, M);
  const std::size_t pw = round_up(f.width, M);

  WindowSet ws;
  ws.window = M;
  ws.grid_rows = ph / M;
  ws.grid_cols = pw / M;
  ws.pad = {ph - f.height, pw - f.width};
  ws.windows.resize(ws.grid_rows * ws.grid_cols);

  for (std::size_t gr = 0; gr < ws.grid_rows; ++gr) {
    for (std::size_t gc = 0; gc < ws.grid_cols; ++gc) {
      TokenSet& ts = ws.windows[gr * ws.grid_cols + gc];
      ts.n = M * M;
      ts.channels = f.channels;
      ts.tokens = Matrix(M * M, f.channels);
      for (std::size_t lh = 0; lh < M; ++lh) {
        for (std::size_t lw = 0; lw < M; ++lw) {
          const std::size_t sh = mirror(gr * M + lh, f.height);
          const std::size_t sw = mirror(gc * M + lw, f.width);
          for (std::size_t c = 0; c < f.channels; ++c) {
            ts.tokens(lh * M + lw, c) = f.at(sh, sw, c);
          }
        }
      }
    }
  }
  return ws;
}

FeatureMap window_merge(const WindowSet& ws, std::size_t height, std::size_t width) {
  check_windowset(ws);
  const std::size_t M = ws.window;
  if (height + ws.pad.bottom != ws.grid_rows * M ||
      width + ws.pad.right != ws.grid_cols * M) {
    throw std::invalid_argument("window_merge: size " + std::to_string(height) + "x" +
                                std::to_string(width) + " inconsistent with grid");
  }
  const std::size_t channels = ws.windows.front().channels;
  FeatureMap f(height, width, channels);
  for (std::size_t gr = 0; gr < ws.grid_rows; ++gr) {
    for (std::size_t gc = 0; gc < ws.grid_cols; ++gc) {
      const TokenSet& ts = ws.windows[gr * ws.grid_cols + gc];
      for (std::size_t lh = 0; lh < M; ++lh) {
        const std::size_t h = gr * M + lh;
        if (h >= height) continue;
        for (std::size_t lw = 0; lw < M; ++lw) {
          const std::size_t w = gc * M + lw;
          if (w >= width) continue;
          for (std::size_t c = 0; c < channels; ++c) {
            f.at(h, w, c) = ts.tokens(lh * M + lw, c);
          }
        }
      }
    }
  }
  return f;
}

FeatureMap conv3x3(const FeatureMap& f, const ConvParams& p) {
  if (p.c_in != f.channels) {
    throw std::invalid_argument("conv3x3: input has " + std::to_string(f.channels) +
                                " channels, kernel expects " + std::to_string(p.c_in));
  }
  FeatureMap out(f.height, f.width, p.c_out);
  for (std::size_t h = 0; h < f.height; ++h) {
    for (std::size_t w = 0; w < f.width; ++w) {
      for (std::size_t co = 0; co < p.c_out; ++co) {
        double acc = p.bias[co];
        for (std::size_t kh = 0; kh < 3; ++kh) {
          const std::size_t sh = h + kh;
          if (sh < 1 || sh > f.height) continue;  // zero padding
          for (std::size_t kw = 0; kw < 3; ++kw) {
            const std::size_t sw = w + kw;
            if (sw < 1 || sw > f.width) continue;
            for (std::size_t ci = 0; ci < p.c_in; ++ci) {
              acc += f.at(sh - 1, sw - 1, ci) * p.k(kh, kw, ci, co);
            }
          }
        }
        out.at(h, w, co) = acc;
      }
    }
  }
  return out;
}

FeatureMap conv3x3_backward_input(const FeatureMap& d_out, const ConvParams& p) {
  FeatureMap d_in(d_out.height, d_out.width, p.c_in);
  for (std::size_t h = 0; h < d_out.height; ++h) {
    for (std::size_t w = 0; w < d_out.width; ++w) {
      for (std::size_t co = 0; co < p.c_out; ++co) {
        const double g = d_out.at(h, w, co);
        if (g == 0.0) continue;
        for (std::size_t kh = 0; kh < 3; ++kh) {
          const std::size_t sh = h + kh;
          if (sh < 1 || sh > d_out.height) continue;
          for (std::size_t kw = 0; kw < 3; ++kw) {
            const std::size_t sw = w + kw;
            if (sw < 1 || sw > d_out.width) continue;
            for (std::size_t ci = 0; ci < p.c_in; ++ci) {
              d_in.at(sh - 1, sw - 1, ci) += g * p.k(kh, kw, ci, co);
            }
          }
        }
      }
    }
  }
  return d_in;
}

void conv3x3_backward_params(const FeatureMap& input, const FeatureMap& d_out,
                             ConvParams& d_params) {
  for (std::size_t h = 0; h < d_out.height; ++h) {
    for (std::size_t w = 0; w < d_out.width; ++w) {
      for (std::size_t co = 0; co < d_params.c_out; ++co) {
        const double g = d_out.at(h, w, co);
        d_params.bias[co] += g;
        if (g == 0.0) continue;
        for (std::size_t kh = 0; kh < 3; ++kh) {
          const std::size_t sh = h + kh;
          if (sh < 1 || sh > input.height) continue;
          for (std::size_t kw = 0; kw < 3; ++kw) {
            const std::size_t sw = w + kw;
            if (sw < 1 || sw > input.width) continue;
            for (std::size_t ci = 0; ci < d_params.c_in; ++ci) {
              d_params.k(kh, kw, ci, co) += input.at(sh - 1, sw - 1, ci) * g;
            }
          }
        }
      }
    }
  }
}

FeatureMap window_partition_backward(const WindowSet& d_windows, std::size_t height,
                                     std::size_t width) {
  check_windowset(d_windows);
  const std::size_t M = d_windows.window;
  const std::size_t channels = d_windows.windows.front().channels;
  FeatureMap d_map(height, width, channels);
  for (std::size_t gr = 0; gr < d_windows.grid_rows; ++gr) {
    for (std::size_t gc = 0; gc < d_windows.grid_cols; ++gc) {
      const TokenSet& ts = d_windows.windows[gr * d_windows.grid_cols + gc];
      for (std::size_t lh = 0; lh < M; ++lh) {
        for (std::size_t lw = 0; lw < M; ++lw) {
          const std::size_t sh = mirror(gr * M + lh, height);
          const std::size_t sw = mirror(gc * M + lw, width);
          for (std::size_t c = 0; c < channels; ++c) {
            d_map.at(sh, sw, c) += ts.tokens(lh * M + lw, c);
          }
        }
      }
    }
  }
  return d_map;
}

WindowSet window_merge_backward(const FeatureMap& d_map, const WindowSet& like) {
  WindowSet out;
  out.window = like.window;
  out.grid_rows = like.grid_rows;
  out.grid_cols = like.grid_cols;
  out.pad = like.pad;
  out.windows.resize(like.windows.size());
  const std::size_t M = like.window;
  for (std::size_t gr = 0; gr < like.grid_rows; ++gr) {
    for (std::size_t gc = 0; gc < like.grid_cols; ++gc) {
      TokenSet& ts = out.windows[gr * like.grid_cols + gc];
      ts.n = M * M;
      ts.channels = d_map.channels;
      ts.tokens = Matrix(M * M, d_map.channels);
      for (std::size_t lh = 0; lh < M; ++lh) {
        const std::size_t h = gr * M + lh;
        for (std::size_t lw = 0; lw < M; ++lw) {
          const std::size_t w = gc * M + lw;
          if (h >= d_map.height || w >= d_map.width) continue;  // cropped pad
          for (std::size_t c = 0; c < d_map.channels; ++c) {
            ts.tokens(lh * M + lw, c) = d_map.at(h, w, c);
          }
        }
      }
    }
  }
  return out;
}

}  // namespace keysem
