#pragma once

// Test-only reference implementations. These stay deliberately naive and
// independent of the library's execution paths (no im2col, no GEMM, no
// shared helpers) so they can serve as oracles.

#include <algorithm>
#include <cmath>
#include <vector>

namespace oracle {

// Direct six-nested-loop cross-correlation with zero padding and dilation.
template <class T>
std::vector<T> conv2d_direct(const std::vector<T>& x, int N, int C, int H, int W,
                             const std::vector<T>& w, int Cout, int kh, int kw,
                             const std::vector<T>& bias, int stride, int pad, int dil, int& Ho,
                             int& Wo) {
  Ho = (H + 2 * pad - dil * (kh - 1) - 1) / stride + 1;
  Wo = (W + 2 * pad - dil * (kw - 1) - 1) / stride + 1;
  std::vector<T> out(static_cast<std::size_t>(N) * Cout * Ho * Wo, T(0));
  for (int n = 0; n < N; ++n) {
    for (int co = 0; co < Cout; ++co) {
      for (int ho = 0; ho < Ho; ++ho) {
        for (int wo = 0; wo < Wo; ++wo) {
          double acc = bias.empty() ? 0.0 : static_cast<double>(bias[co]);
          for (int ci = 0; ci < C; ++ci) {
            for (int ki = 0; ki < kh; ++ki) {
              for (int kj = 0; kj < kw; ++kj) {
                const int hi = ho * stride - pad + ki * dil;
                const int wi = wo * stride - pad + kj * dil;
                if (hi < 0 || hi >= H || wi < 0 || wi >= W) continue;
                acc += static_cast<double>(x[((static_cast<std::size_t>(n) * C + ci) * H + hi) * W + wi]) *
                       static_cast<double>(w[((static_cast<std::size_t>(co) * C + ci) * kh + ki) * kw + kj]);
              }
            }
          }
          out[((static_cast<std::size_t>(n) * Cout + co) * Ho + ho) * Wo + wo] = static_cast<T>(acc);
        }
      }
    }
  }
  return out;
}

// Bilinear sample with zeros outside the border, spelled out corner by corner.
template <class T>
double bilinear_zero_pad(const std::vector<T>& plane, int H, int W, double py, double px) {
  const int y0 = static_cast<int>(std::floor(py));
  const int x0 = static_cast<int>(std::floor(px));
  const double ay = py - y0;
  const double ax = px - x0;
  auto get = [&](int y, int x) -> double {
    if (y < 0 || y >= H || x < 0 || x >= W) return 0.0;
    return static_cast<double>(plane[static_cast<std::size_t>(y) * W + x]);
  };
  return get(y0, x0) * (1 - ay) * (1 - ax) + get(y0, x0 + 1) * (1 - ay) * ax +
         get(y0 + 1, x0) * ay * (1 - ax) + get(y0 + 1, x0 + 1) * ay * ax;
}

// Modulated deformable convolution evaluated tap-by-tap via the explicit
// bilinear corner weights.
template <class T>
std::vector<T> deformable_conv2d_direct(const std::vector<T>& x, int N, int C, int H, int W,
                                        const std::vector<T>& w, int Cout, int kh, int kw,
                                        const std::vector<T>& bias, const std::vector<T>& offsets,
                                        const std::vector<T>& modulation, int stride, int pad,
                                        int& Ho, int& Wo) {
  Ho = (H + 2 * pad - (kh - 1) - 1) / stride + 1;
  Wo = (W + 2 * pad - (kw - 1) - 1) / stride + 1;
  const int taps = kh * kw;
  std::vector<T> out(static_cast<std::size_t>(N) * Cout * Ho * Wo, T(0));
  for (int n = 0; n < N; ++n) {
    for (int co = 0; co < Cout; ++co) {
      for (int ho = 0; ho < Ho; ++ho) {
        for (int wo = 0; wo < Wo; ++wo) {
          double acc = bias.empty() ? 0.0 : static_cast<double>(bias[co]);
          for (int ci = 0; ci < C; ++ci) {
            std::vector<T> plane(x.begin() + ((static_cast<std::size_t>(n) * C + ci) * H) * W,
                                 x.begin() + ((static_cast<std::size_t>(n) * C + ci) * H + H) * W);
            for (int ki = 0; ki < kh; ++ki) {
              for (int kj = 0; kj < kw; ++kj) {
                const int t = ki * kw + kj;
                const double oy = offsets[(((static_cast<std::size_t>(n) * 2 * taps) + 2 * t) * Ho + ho) * Wo + wo];
                const double ox = offsets[(((static_cast<std::size_t>(n) * 2 * taps) + 2 * t + 1) * Ho + ho) * Wo + wo];
                const double m = modulation[(((static_cast<std::size_t>(n) * taps) + t) * Ho + ho) * Wo + wo];
                const double py = ho * stride - pad + ki + oy;
                const double px = wo * stride - pad + kj + ox;
                acc += static_cast<double>(w[((static_cast<std::size_t>(co) * C + ci) * kh + ki) * kw + kj]) * m *
                       bilinear_zero_pad(plane, H, W, py, px);
              }
            }
          }
          out[((static_cast<std::size_t>(n) * Cout + co) * Ho + ho) * Wo + wo] = static_cast<T>(acc);
        }
      }
    }
  }
  return out;
}

// Bilinear resize at f64, align_corners=false with edge clamping.
template <class T>
std::vector<double> upsample_bilinear_direct(const std::vector<T>& x, int C, int H, int W, int oh,
                                             int ow) {
  std::vector<double> out(static_cast<std::size_t>(C) * oh * ow, 0.0);
  const double sy = static_cast<double>(H) / oh;
  const double sx = static_cast<double>(W) / ow;
  for (int c = 0; c < C; ++c) {
    for (int y = 0; y < oh; ++y) {
      double fy = (y + 0.5) * sy - 0.5;
      fy = std::max(0.0, fy);
      int y0 = std::min(static_cast<int>(std::floor(fy)), H - 1);
      int y1 = std::min(y0 + 1, H - 1);
      double wy = std::clamp(fy - y0, 0.0, 1.0);
      for (int xo = 0; xo < ow; ++xo) {
        double fx = (xo + 0.5) * sx - 0.5;
        fx = std::max(0.0, fx);
        int x0 = std::min(static_cast<int>(std::floor(fx)), W - 1);
        int x1 = std::min(x0 + 1, W - 1);
        double wx = std::clamp(fx - x0, 0.0, 1.0);
        auto px = [&](int yy, int xx) {
          return static_cast<double>(x[(static_cast<std::size_t>(c) * H + yy) * W + xx]);
        };
        out[(static_cast<std::size_t>(c) * oh + y) * ow + xo] =
            (px(y0, x0) * (1 - wx) + px(y0, x1) * wx) * (1 - wy) +
            (px(y1, x0) * (1 - wx) + px(y1, x1) * wx) * wy;
      }
    }
  }
  return out;
}

}  // namespace oracle
