#pragma once

#include <Eigen/Core>
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "snt/labelmap.hpp"
#include "snt/rng.hpp"
#include "snt/tensor.hpp"

namespace snt {

namespace detail {

template <class T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapRM = Eigen::Map<MatRM<T>>;
template <class T>
using CMapRM = Eigen::Map<const MatRM<T>>;

inline int conv_out_dim(int in, int k, int stride, int pad, int dil) {
  return (in + 2 * pad - dil * (k - 1) - 1) / stride + 1;
}

// Unrolls one image into a (Cin*kh*kw) x (Ho*Wo) matrix; zero padding.
template <class T>
void im2col(const T* x, int C, int H, int W, int kh, int kw, int stride, int pad, int dil, int Ho,
            int Wo, T* col) {
  const std::int64_t out_plane = static_cast<std::int64_t>(Ho) * Wo;
  for (int ci = 0; ci < C; ++ci) {
    const T* xc = x + static_cast<std::int64_t>(ci) * H * W;
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        T* row = col + ((static_cast<std::int64_t>(ci) * kh + ki) * kw + kj) * out_plane;
        for (int ho = 0; ho < Ho; ++ho) {
          const int hi = ho * stride - pad + ki * dil;
          if (hi < 0 || hi >= H) {
            for (int wo = 0; wo < Wo; ++wo) row[ho * Wo + wo] = T(0);
            continue;
          }
          const T* xrow = xc + static_cast<std::int64_t>(hi) * W;
          for (int wo = 0; wo < Wo; ++wo) {
            const int wi = wo * stride - pad + kj * dil;
            row[ho * Wo + wo] = (wi >= 0 && wi < W) ? xrow[wi] : T(0);
          }
        }
      }
    }
  }
}

// Transpose of im2col: scatter-adds a column matrix back into the image.
template <class T>
void col2im(const T* col, int C, int H, int W, int kh, int kw, int stride, int pad, int dil, int Ho,
            int Wo, T* dx) {
  const std::int64_t out_plane = static_cast<std::int64_t>(Ho) * Wo;
  for (int ci = 0; ci < C; ++ci) {
    T* xc = dx + static_cast<std::int64_t>(ci) * H * W;
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        const T* row = col + ((static_cast<std::int64_t>(ci) * kh + ki) * kw + kj) * out_plane;
        for (int ho = 0; ho < Ho; ++ho) {
          const int hi = ho * stride - pad + ki * dil;
          if (hi < 0 || hi >= H) continue;
          T* xrow = xc + static_cast<std::int64_t>(hi) * W;
          for (int wo = 0; wo < Wo; ++wo) {
            const int wi = wo * stride - pad + kj * dil;
            if (wi >= 0 && wi < W) xrow[wi] += row[ho * Wo + wo];
          }
        }
      }
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv2d: standard cross-correlation, zero padding, dilation support.
// weight is (Cout, Cin, kh, kw); bias is (1, Cout, 1, 1) and optional.
// ---------------------------------------------------------------------------
template <class T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& weight, const TensorT<T>& bias, int stride,
                  int padding, int dilation = 1) {
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  if (xs.c != ws.c) {
    throw ConfigError("conv2d: input channels do not match kernel: input " + xs.str() +
                      ", weight " + ws.str());
  }
  if (bias.valid()) {
    const Shape bs = bias.shape();
    if (bs.n != 1 || bs.c != ws.n || bs.h != 1 || bs.w != 1) {
      throw ConfigError("conv2d: bias shape " + bs.str() + " does not match Cout=" +
                        std::to_string(ws.n));
    }
  }
  if (stride <= 0 || padding < 0 || dilation <= 0) {
    throw ConfigError("conv2d: invalid stride/padding/dilation");
  }
  const int Cout = ws.n, Cin = ws.c, kh = ws.h, kw = ws.w;
  const int Ho = detail::conv_out_dim(xs.h, kh, stride, padding, dilation);
  const int Wo = detail::conv_out_dim(xs.w, kw, stride, padding, dilation);
  if (Ho <= 0 || Wo <= 0) {
    throw ConfigError("conv2d: non-positive output dims for input " + xs.str());
  }

  const bool one_by_one = (kh == 1 && kw == 1 && stride == 1 && padding == 0);
  const int K = Cin * kh * kw;
  const std::int64_t out_plane = static_cast<std::int64_t>(Ho) * Wo;
  const std::int64_t in_plane = static_cast<std::int64_t>(xs.h) * xs.w;

  TensorT<T> out = TensorT<T>::zeros(Shape{xs.n, Cout, Ho, Wo});
  detail::CMapRM<T> wmat(weight.data(), Cout, K);
  std::vector<T> col_buf;
  if (!one_by_one) col_buf.resize(static_cast<std::size_t>(K) * out_plane);

  for (int n = 0; n < xs.n; ++n) {
    const T* xn = x.data() + n * Cin * in_plane;
    const T* col = xn;
    if (!one_by_one) {
      detail::im2col(xn, Cin, xs.h, xs.w, kh, kw, stride, padding, dilation, Ho, Wo,
                     col_buf.data());
      col = col_buf.data();
    }
    detail::CMapRM<T> cmat(col, K, out_plane);
    detail::MapRM<T> omat(out.data() + static_cast<std::int64_t>(n) * Cout * out_plane, Cout,
                          out_plane);
    omat.noalias() = wmat * cmat;
    if (bias.valid()) {
      const T* pb = bias.data();
      for (int co = 0; co < Cout; ++co) omat.row(co).array() += pb[co];
    }
  }

  if (detail::track_grad<T>({x, weight, bias})) {
    TensorT<T> xc = x, wc = weight, bc = bias;
    detail::attach<T>(
        out, "conv2d", bias.valid() ? std::vector<TensorT<T>>{x, weight, bias}
                                    : std::vector<TensorT<T>>{x, weight},
        [xc, wc, bc, stride, padding, dilation, Cout, Cin, kh, kw, Ho, Wo, K, one_by_one, xs,
         out_plane, in_plane](const TensorT<T>& o) mutable {
          detail::CMapRM<T> wmat(wc.data(), Cout, K);
          std::vector<T> col_buf;
          std::vector<T> dcol_buf;
          if (!one_by_one) {
            col_buf.resize(static_cast<std::size_t>(K) * out_plane);
            dcol_buf.resize(static_cast<std::size_t>(K) * out_plane);
          }
          const T corrupt = testing::corrupt_backward() ? T(1.5) : T(1);
          for (int n = 0; n < xs.n; ++n) {
            detail::CMapRM<T> gmat(o.grad_vec().data() + static_cast<std::int64_t>(n) * Cout * out_plane,
                                   Cout, out_plane);
            const T* xn = xc.data() + n * Cin * in_plane;
            if (wc.requires_grad()) {
              const T* col = xn;
              if (!one_by_one) {
                detail::im2col(xn, Cin, xs.h, xs.w, kh, kw, stride, padding, dilation, Ho, Wo,
                               col_buf.data());
                col = col_buf.data();
              }
              detail::CMapRM<T> cmat(col, K, out_plane);
              detail::MapRM<T> gw(wc.ensure_grad(), Cout, K);
              gw.noalias() += corrupt * (gmat * cmat.transpose());
            }
            if (xc.requires_grad()) {
              T* gx = xc.ensure_grad() + n * Cin * in_plane;
              if (one_by_one) {
                detail::MapRM<T> gxm(gx, K, out_plane);
                gxm.noalias() += wmat.transpose() * gmat;
              } else {
                detail::MapRM<T> dcol(dcol_buf.data(), K, out_plane);
                dcol.noalias() = wmat.transpose() * gmat;
                detail::col2im(dcol_buf.data(), Cin, xs.h, xs.w, kh, kw, stride, padding, dilation,
                               Ho, Wo, gx);
              }
            }
            if (bc.valid() && bc.requires_grad()) {
              T* gb = bc.ensure_grad();
              for (int co = 0; co < Cout; ++co) gb[co] += gmat.row(co).sum();
            }
          }
        });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Modulated deformable convolution (v2 semantics). Each kernel tap samples the
// input at its regular grid position displaced by a learned offset, via
// bilinear interpolation that reads 0 outside the image, and is scaled by a
// per-tap modulation value. offsets: (N, 2*kh*kw, Ho, Wo) as (dy,dx) pairs;
// modulation: (N, kh*kw, Ho, Wo).
// ---------------------------------------------------------------------------
template <class T>
TensorT<T> deformable_conv2d(const TensorT<T>& x, const TensorT<T>& weight, const TensorT<T>& bias,
                             const TensorT<T>& offsets, const TensorT<T>& modulation, int stride,
                             int padding) {
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  if (xs.c != ws.c) {
    throw ConfigError("deformable_conv2d: input channels do not match kernel: input " + xs.str() +
                      ", weight " + ws.str());
  }
  const int Cout = ws.n, Cin = ws.c, kh = ws.h, kw = ws.w;
  const int taps = kh * kw;
  const int Ho = detail::conv_out_dim(xs.h, kh, stride, padding, 1);
  const int Wo = detail::conv_out_dim(xs.w, kw, stride, padding, 1);
  const Shape offs = offsets.shape();
  const Shape mods = modulation.shape();
  if (offs.c != 2 * taps) {
    throw ConfigError("deformable_conv2d: offset channel count " + std::to_string(offs.c) +
                      " != 2*kh*kw=" + std::to_string(2 * taps));
  }
  if (offs.n != xs.n || offs.h != Ho || offs.w != Wo) {
    throw ConfigError("deformable_conv2d: offsets shape " + offs.str() +
                      " does not match output (N=" + std::to_string(xs.n) + ",H'=" +
                      std::to_string(Ho) + ",W'=" + std::to_string(Wo) + ")");
  }
  if (mods.n != xs.n || mods.c != taps || mods.h != Ho || mods.w != Wo) {
    throw ConfigError("deformable_conv2d: modulation shape " + mods.str() + " invalid");
  }

  const int H = xs.h, W = xs.w;
  const std::int64_t out_plane = static_cast<std::int64_t>(Ho) * Wo;
  const std::int64_t in_plane = static_cast<std::int64_t>(H) * W;
  const int K = Cin * taps;

  // Sampled-and-modulated column matrix, kept for the backward pass.
  auto cols = std::make_shared<std::vector<T>>(static_cast<std::size_t>(xs.n) * K * out_plane);

  TensorT<T> out = TensorT<T>::zeros(Shape{xs.n, Cout, Ho, Wo});
  detail::CMapRM<T> wmat(weight.data(), Cout, K);

  for (int n = 0; n < xs.n; ++n) {
    const T* xn = x.data() + n * Cin * in_plane;
    const T* offn = offsets.data() + static_cast<std::int64_t>(n) * offs.c * out_plane;
    const T* modn = modulation.data() + static_cast<std::int64_t>(n) * taps * out_plane;
    T* coln = cols->data() + static_cast<std::int64_t>(n) * K * out_plane;
    for (int t = 0; t < taps; ++t) {
      const int ki = t / kw, kj = t % kw;
      const T* off_y = offn + static_cast<std::int64_t>(2 * t) * out_plane;
      const T* off_x = offn + static_cast<std::int64_t>(2 * t + 1) * out_plane;
      const T* mod_t = modn + static_cast<std::int64_t>(t) * out_plane;
      for (std::int64_t p = 0; p < out_plane; ++p) {
        const int ho = static_cast<int>(p / Wo), wo = static_cast<int>(p % Wo);
        const double py = ho * stride - padding + ki + static_cast<double>(off_y[p]);
        const double px = wo * stride - padding + kj + static_cast<double>(off_x[p]);
        const T m = mod_t[p];
        const int y0 = static_cast<int>(std::floor(py));
        const int x0 = static_cast<int>(std::floor(px));
        const T ay = static_cast<T>(py - y0);
        const T ax = static_cast<T>(px - x0);
        const bool y0v = y0 >= 0 && y0 < H, y1v = y0 + 1 >= 0 && y0 + 1 < H;
        const bool x0v = x0 >= 0 && x0 < W, x1v = x0 + 1 >= 0 && x0 + 1 < W;
        const T w00 = (1 - ay) * (1 - ax), w01 = (1 - ay) * ax;
        const T w10 = ay * (1 - ax), w11 = ay * ax;
        for (int ci = 0; ci < Cin; ++ci) {
          const T* plane = xn + static_cast<std::int64_t>(ci) * in_plane;
          T v = T(0);
          if (y0v && x0v) v += w00 * plane[y0 * W + x0];
          if (y0v && x1v) v += w01 * plane[y0 * W + x0 + 1];
          if (y1v && x0v) v += w10 * plane[(y0 + 1) * W + x0];
          if (y1v && x1v) v += w11 * plane[(y0 + 1) * W + x0 + 1];
          coln[(static_cast<std::int64_t>(ci) * taps + t) * out_plane + p] = m * v;
        }
      }
    }
    detail::CMapRM<T> cmat(coln, K, out_plane);
    detail::MapRM<T> omat(out.data() + static_cast<std::int64_t>(n) * Cout * out_plane, Cout,
                          out_plane);
    omat.noalias() = wmat * cmat;
    if (bias.valid()) {
      const T* pb = bias.data();
      for (int co = 0; co < Cout; ++co) omat.row(co).array() += pb[co];
    }
  }

  if (detail::track_grad<T>({x, weight, bias, offsets, modulation})) {
    TensorT<T> xc = x, wc = weight, bc = bias, oc = offsets, mc = modulation;
    std::vector<TensorT<T>> inputs{x, weight, offsets, modulation};
    if (bias.valid()) inputs.push_back(bias);
    detail::attach<T>(
        out, "deformable_conv2d", inputs,
        [xc, wc, bc, oc, mc, cols, stride, padding, Cout, Cin, kh, kw, taps, Ho, Wo, K, H, W, xs,
         out_plane, in_plane](const TensorT<T>& o) mutable {
          detail::CMapRM<T> wmat(wc.data(), Cout, K);
          std::vector<T> dcol(static_cast<std::size_t>(K) * out_plane);
          for (int n = 0; n < xs.n; ++n) {
            detail::CMapRM<T> gmat(o.grad_vec().data() + static_cast<std::int64_t>(n) * Cout * out_plane,
                                   Cout, out_plane);
            const T* coln = cols->data() + static_cast<std::int64_t>(n) * K * out_plane;
            detail::CMapRM<T> cmat(coln, K, out_plane);
            if (wc.requires_grad()) {
              detail::MapRM<T> gw(wc.ensure_grad(), Cout, K);
              gw.noalias() += gmat * cmat.transpose();
            }
            if (bc.valid() && bc.requires_grad()) {
              T* gb = bc.ensure_grad();
              for (int co = 0; co < Cout; ++co) gb[co] += gmat.row(co).sum();
            }
            const bool need_x = xc.requires_grad();
            const bool need_off = oc.requires_grad();
            const bool need_mod = mc.requires_grad();
            if (!need_x && !need_off && !need_mod) continue;

            detail::MapRM<T> dcol_m(dcol.data(), K, out_plane);
            dcol_m.noalias() = wmat.transpose() * gmat;

            const T* xn = xc.data() + n * Cin * in_plane;
            const T* offn = oc.data() + static_cast<std::int64_t>(n) * (2 * taps) * out_plane;
            const T* modn = mc.data() + static_cast<std::int64_t>(n) * taps * out_plane;
            T* gx = need_x ? xc.ensure_grad() + n * Cin * in_plane : nullptr;
            T* goff = need_off ? oc.ensure_grad() + static_cast<std::int64_t>(n) * (2 * taps) * out_plane
                               : nullptr;
            T* gmod = need_mod ? mc.ensure_grad() + static_cast<std::int64_t>(n) * taps * out_plane
                               : nullptr;

            for (int t = 0; t < taps; ++t) {
              const int ki = t / kw, kj = t % kw;
              const T* off_y = offn + static_cast<std::int64_t>(2 * t) * out_plane;
              const T* off_x = offn + static_cast<std::int64_t>(2 * t + 1) * out_plane;
              const T* mod_t = modn + static_cast<std::int64_t>(t) * out_plane;
              for (std::int64_t p = 0; p < out_plane; ++p) {
                const int ho = static_cast<int>(p / Wo), wo = static_cast<int>(p % Wo);
                const double py = ho * stride - padding + ki + static_cast<double>(off_y[p]);
                const double px = wo * stride - padding + kj + static_cast<double>(off_x[p]);
                const T m = mod_t[p];
                const int y0 = static_cast<int>(std::floor(py));
                const int x0 = static_cast<int>(std::floor(px));
                const T ay = static_cast<T>(py - y0);
                const T ax = static_cast<T>(px - x0);
                const bool y0v = y0 >= 0 && y0 < H, y1v = y0 + 1 >= 0 && y0 + 1 < H;
                const bool x0v = x0 >= 0 && x0 < W, x1v = x0 + 1 >= 0 && x0 + 1 < W;
                const T w00 = (1 - ay) * (1 - ax), w01 = (1 - ay) * ax;
                const T w10 = ay * (1 - ax), w11 = ay * ax;
                T dpy = T(0), dpx = T(0), dm = T(0);
                for (int ci = 0; ci < Cin; ++ci) {
                  const T g = dcol.data()[(static_cast<std::int64_t>(ci) * taps + t) * out_plane + p];
                  if (g == T(0)) continue;
                  const T* plane = xn + static_cast<std::int64_t>(ci) * in_plane;
                  const T v00 = (y0v && x0v) ? plane[y0 * W + x0] : T(0);
                  const T v01 = (y0v && x1v) ? plane[y0 * W + x0 + 1] : T(0);
                  const T v10 = (y1v && x0v) ? plane[(y0 + 1) * W + x0] : T(0);
                  const T v11 = (y1v && x1v) ? plane[(y0 + 1) * W + x0 + 1] : T(0);
                  if (need_x) {
                    T* gplane = gx + static_cast<std::int64_t>(ci) * in_plane;
                    const T gm = g * m;
                    if (y0v && x0v) gplane[y0 * W + x0] += gm * w00;
                    if (y0v && x1v) gplane[y0 * W + x0 + 1] += gm * w01;
                    if (y1v && x0v) gplane[(y0 + 1) * W + x0] += gm * w10;
                    if (y1v && x1v) gplane[(y0 + 1) * W + x0 + 1] += gm * w11;
                  }
                  if (need_off) {
                    dpy += g * m * (-(1 - ax) * v00 - ax * v01 + (1 - ax) * v10 + ax * v11);
                    dpx += g * m * (-(1 - ay) * v00 + (1 - ay) * v01 - ay * v10 + ay * v11);
                  }
                  if (need_mod) {
                    dm += g * (w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11);
                  }
                }
                if (need_off) {
                  goff[static_cast<std::int64_t>(2 * t) * out_plane + p] += dpy;
                  goff[static_cast<std::int64_t>(2 * t + 1) * out_plane + p] += dpx;
                }
                if (need_mod) gmod[static_cast<std::int64_t>(t) * out_plane + p] += dm;
              }
            }
          }
        });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batch normalization over (N,H,W) per channel. gamma/beta are (1,C,1,1).
// running_mean/running_var are plain buffers (no grad) updated in train mode
// with momentum 0.1 convention: r <- (1-mom)*r + mom*batch.
// ---------------------------------------------------------------------------
template <class T>
TensorT<T> batch_norm2d(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                        TensorT<T>& running_mean, TensorT<T>& running_var, T momentum, T eps,
                        bool train) {
  const Shape xs = x.shape();
  const int C = xs.c;
  const std::int64_t plane = static_cast<std::int64_t>(xs.h) * xs.w;
  const std::int64_t m = static_cast<std::int64_t>(xs.n) * plane;

  std::vector<T> mean(C, T(0)), var(C, T(0));
  if (train) {
    for (int n = 0; n < xs.n; ++n) {
      for (int c = 0; c < C; ++c) {
        const T* p = x.data() + (static_cast<std::int64_t>(n) * C + c) * plane;
        T acc = T(0);
        for (std::int64_t i = 0; i < plane; ++i) acc += p[i];
        mean[c] += acc;
      }
    }
    for (int c = 0; c < C; ++c) mean[c] /= static_cast<T>(m);
    for (int n = 0; n < xs.n; ++n) {
      for (int c = 0; c < C; ++c) {
        const T* p = x.data() + (static_cast<std::int64_t>(n) * C + c) * plane;
        T acc = T(0);
        for (std::int64_t i = 0; i < plane; ++i) {
          const T d = p[i] - mean[c];
          acc += d * d;
        }
        var[c] += acc;
      }
    }
    for (int c = 0; c < C; ++c) var[c] /= static_cast<T>(m);
    T* rm = running_mean.data();
    T* rv = running_var.data();
    for (int c = 0; c < C; ++c) {
      rm[c] = (T(1) - momentum) * rm[c] + momentum * mean[c];
      rv[c] = (T(1) - momentum) * rv[c] + momentum * var[c];
    }
  } else {
    const T* rm = running_mean.data();
    const T* rv = running_var.data();
    for (int c = 0; c < C; ++c) {
      mean[c] = rm[c];
      var[c] = rv[c];
    }
  }

  std::vector<T> invstd(C);
  for (int c = 0; c < C; ++c) invstd[c] = T(1) / std::sqrt(var[c] + eps);

  TensorT<T> out = TensorT<T>::zeros(xs);
  auto xhat = std::make_shared<std::vector<T>>(x.vec().size());
  const T* pg = gamma.data();
  const T* pb = beta.data();
  for (int n = 0; n < xs.n; ++n) {
    for (int c = 0; c < C; ++c) {
      const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * plane;
      const T mu = mean[c], is = invstd[c], gm = pg[c], bt = pb[c];
      const T* px = x.data() + base;
      T* ph = xhat->data() + base;
      T* po = out.data() + base;
      for (std::int64_t i = 0; i < plane; ++i) {
        const T h = (px[i] - mu) * is;
        ph[i] = h;
        po[i] = h * gm + bt;
      }
    }
  }

  if (detail::track_grad<T>({x, gamma, beta})) {
    TensorT<T> xc = x, gc = gamma, bc = beta;
    detail::attach<T>(
        out, "batch_norm2d", {x, gamma, beta},
        [xc, gc, bc, xhat, invstd, train, xs, C, plane, m](const TensorT<T>& o) mutable {
          const std::vector<T>& g = o.grad_vec();
          std::vector<T> sum_dy(C, T(0)), sum_dy_xhat(C, T(0));
          for (int n = 0; n < xs.n; ++n) {
            for (int c = 0; c < C; ++c) {
              const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * plane;
              T s1 = T(0), s2 = T(0);
              for (std::int64_t i = 0; i < plane; ++i) {
                s1 += g[base + i];
                s2 += g[base + i] * (*xhat)[base + i];
              }
              sum_dy[c] += s1;
              sum_dy_xhat[c] += s2;
            }
          }
          if (bc.requires_grad()) {
            T* gb = bc.ensure_grad();
            for (int c = 0; c < C; ++c) gb[c] += sum_dy[c];
          }
          if (gc.requires_grad()) {
            T* gg = gc.ensure_grad();
            for (int c = 0; c < C; ++c) gg[c] += sum_dy_xhat[c];
          }
          if (xc.requires_grad()) {
            T* gx = xc.ensure_grad();
            const T* pg = gc.data();
            if (train) {
              const T mf = static_cast<T>(m);
              for (int n = 0; n < xs.n; ++n) {
                for (int c = 0; c < C; ++c) {
                  const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * plane;
                  const T k = pg[c] * invstd[c] / mf;
                  for (std::int64_t i = 0; i < plane; ++i) {
                    gx[base + i] +=
                        k * (mf * g[base + i] - sum_dy[c] - (*xhat)[base + i] * sum_dy_xhat[c]);
                  }
                }
              }
            } else {
              // Eval mode is a per-channel affine map.
              for (int n = 0; n < xs.n; ++n) {
                for (int c = 0; c < C; ++c) {
                  const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * plane;
                  const T k = pg[c] * invstd[c];
                  for (std::int64_t i = 0; i < plane; ++i) gx[base + i] += k * g[base + i];
                }
              }
            }
          }
        });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Inverted dropout: survivors scaled by 1/(1-rate) at train time; identity in
// eval mode and for rate 0.
// ---------------------------------------------------------------------------
template <class T>
TensorT<T> dropout(const TensorT<T>& x, double rate, bool train, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) {
    throw ConfigError("dropout: rate must be in [0,1), got " + std::to_string(rate));
  }
  if (!train || rate == 0.0) {
    TensorT<T> out = TensorT<T>::from_vector(x.shape(), x.vec());
    if (detail::track_grad<T>({x})) {
      TensorT<T> xc = x;
      detail::attach<T>(out, "dropout", {x}, [xc](const TensorT<T>& o) mutable {
        if (xc.requires_grad()) xc.accumulate_grad(o.grad_vec().data());
      });
    }
    return out;
  }
  const T inv_keep = static_cast<T>(1.0 / (1.0 - rate));
  auto mask = std::make_shared<std::vector<T>>(x.vec().size());
  TensorT<T> out = TensorT<T>::zeros(x.shape());
  const T* px = x.data();
  T* po = out.data();
  for (std::size_t i = 0; i < mask->size(); ++i) {
    const T keep = rng.uniform() < rate ? T(0) : inv_keep;
    (*mask)[i] = keep;
    po[i] = px[i] * keep;
  }
  if (detail::track_grad<T>({x})) {
    TensorT<T> xc = x;
    detail::attach<T>(out, "dropout", {x}, [xc, mask](const TensorT<T>& o) mutable {
      if (!xc.requires_grad()) return;
      const std::vector<T>& g = o.grad_vec();
      T* gx = xc.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += (*mask)[i] * g[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Per-pixel softmax over the channel dimension, max-subtracted for stability.
// ---------------------------------------------------------------------------
template <class T>
TensorT<T> softmax_channels(const TensorT<T>& x) {
  const Shape xs = x.shape();
  const std::int64_t plane = static_cast<std::int64_t>(xs.h) * xs.w;
  TensorT<T> out = TensorT<T>::zeros(xs);
  const T* px = x.data();
  T* po = out.data();
  for (int n = 0; n < xs.n; ++n) {
    const std::int64_t nb = static_cast<std::int64_t>(n) * xs.c * plane;
    for (std::int64_t p = 0; p < plane; ++p) {
      T mx = px[nb + p];
      for (int c = 1; c < xs.c; ++c) mx = std::max(mx, px[nb + c * plane + p]);
      T s = T(0);
      for (int c = 0; c < xs.c; ++c) {
        const T e = std::exp(px[nb + c * plane + p] - mx);
        po[nb + c * plane + p] = e;
        s += e;
      }
      const T inv = T(1) / s;
      for (int c = 0; c < xs.c; ++c) po[nb + c * plane + p] *= inv;
    }
  }
  if (detail::track_grad<T>({x})) {
    TensorT<T> xc = x;
    TensorT<T> saved = out;
    detail::attach<T>(out, "softmax_channels", {x}, [xc, saved, xs, plane](const TensorT<T>& o) mutable {
      if (!xc.requires_grad()) return;
      const std::vector<T>& g = o.grad_vec();
      const T* ps = saved.data();
      T* gx = xc.ensure_grad();
      for (int n = 0; n < xs.n; ++n) {
        const std::int64_t nb = static_cast<std::int64_t>(n) * xs.c * plane;
        for (std::int64_t p = 0; p < plane; ++p) {
          T dot = T(0);
          for (int c = 0; c < xs.c; ++c) {
            const std::int64_t idx = nb + c * plane + p;
            dot += g[idx] * ps[idx];
          }
          for (int c = 0; c < xs.c; ++c) {
            const std::int64_t idx = nb + c * plane + p;
            gx[idx] += ps[idx] * (g[idx] - dot);
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Bilinear resize, align_corners=false convention with edge clamping.
// ---------------------------------------------------------------------------
template <class T>
TensorT<T> upsample_bilinear(const TensorT<T>& x, int out_h, int out_w) {
  if (out_h <= 0 || out_w <= 0) {
    throw ConfigError("upsample_bilinear: non-positive target dims " + std::to_string(out_h) + "x" +
                      std::to_string(out_w));
  }
  const Shape xs = x.shape();
  if (out_h == xs.h && out_w == xs.w) {
    TensorT<T> out = TensorT<T>::from_vector(xs, x.vec());
    if (detail::track_grad<T>({x})) {
      TensorT<T> xc = x;
      detail::attach<T>(out, "upsample_bilinear", {x}, [xc](const TensorT<T>& o) mutable {
        if (xc.requires_grad()) xc.accumulate_grad(o.grad_vec().data());
      });
    }
    return out;
  }

  struct Axis {
    int i0, i1;
    T w1;  // weight of i1; weight of i0 is 1-w1
  };
  auto make_axis = [](int in, int out) {
    std::vector<Axis> ax(out);
    const double s = static_cast<double>(in) / out;
    for (int o = 0; o < out; ++o) {
      double src = (o + 0.5) * s - 0.5;
      if (src < 0) src = 0;
      int i0 = static_cast<int>(std::floor(src));
      if (i0 > in - 1) i0 = in - 1;
      const int i1 = std::min(i0 + 1, in - 1);
      ax[o] = {i0, i1, static_cast<T>(src - i0)};
      if (ax[o].w1 < T(0)) ax[o].w1 = T(0);
      if (ax[o].w1 > T(1)) ax[o].w1 = T(1);
    }
    return ax;
  };
  const std::vector<Axis> ay = make_axis(xs.h, out_h);
  const std::vector<Axis> axx = make_axis(xs.w, out_w);

  TensorT<T> out = TensorT<T>::zeros(Shape{xs.n, xs.c, out_h, out_w});
  const std::int64_t in_plane = static_cast<std::int64_t>(xs.h) * xs.w;
  const std::int64_t out_plane = static_cast<std::int64_t>(out_h) * out_w;
  const T* px = x.data();
  T* po = out.data();
  for (int n = 0; n < xs.n; ++n) {
    for (int c = 0; c < xs.c; ++c) {
      const T* src = px + (static_cast<std::int64_t>(n) * xs.c + c) * in_plane;
      T* dst = po + (static_cast<std::int64_t>(n) * xs.c + c) * out_plane;
      for (int oy = 0; oy < out_h; ++oy) {
        const Axis& a = ay[oy];
        const T* r0 = src + static_cast<std::int64_t>(a.i0) * xs.w;
        const T* r1 = src + static_cast<std::int64_t>(a.i1) * xs.w;
        for (int ox = 0; ox < out_w; ++ox) {
          const Axis& b = axx[ox];
          const T top = r0[b.i0] * (T(1) - b.w1) + r0[b.i1] * b.w1;
          const T bot = r1[b.i0] * (T(1) - b.w1) + r1[b.i1] * b.w1;
          dst[oy * out_w + ox] = top * (T(1) - a.w1) + bot * a.w1;
        }
      }
    }
  }
  if (detail::track_grad<T>({x})) {
    TensorT<T> xc = x;
    detail::attach<T>(out, "upsample_bilinear", {x},
                      [xc, ay, axx, xs, out_h, out_w, in_plane, out_plane](const TensorT<T>& o) mutable {
                        if (!xc.requires_grad()) return;
                        const std::vector<T>& g = o.grad_vec();
                        T* gx = xc.ensure_grad();
                        for (int n = 0; n < xs.n; ++n) {
                          for (int c = 0; c < xs.c; ++c) {
                            T* dst = gx + (static_cast<std::int64_t>(n) * xs.c + c) * in_plane;
                            const T* src = g.data() + (static_cast<std::int64_t>(n) * xs.c + c) * out_plane;
                            for (int oy = 0; oy < out_h; ++oy) {
                              const auto& a = ay[oy];
                              for (int ox = 0; ox < out_w; ++ox) {
                                const auto& b = axx[ox];
                                const T gv = src[oy * out_w + ox];
                                dst[a.i0 * xs.w + b.i0] += gv * (T(1) - a.w1) * (T(1) - b.w1);
                                dst[a.i0 * xs.w + b.i1] += gv * (T(1) - a.w1) * b.w1;
                                dst[a.i1 * xs.w + b.i0] += gv * a.w1 * (T(1) - b.w1);
                                dst[a.i1 * xs.w + b.i1] += gv * a.w1 * b.w1;
                              }
                            }
                          }
                        }
                      });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Mean negative log-likelihood over non-ignored pixels, given per-pixel
// channel probabilities. Probabilities are clamped to [1e-7, 1] before log.
// All-ignored input yields loss 0 with zero gradient.
// ---------------------------------------------------------------------------
inline constexpr double kProbClamp = 1e-7;

template <class T>
TensorT<T> nll_spatial(const TensorT<T>& probs, const std::vector<LabelMap>& targets,
                       int ignore_index) {
  const Shape ps = probs.shape();
  if (static_cast<int>(targets.size()) != ps.n) {
    throw ConfigError("nll_spatial: batch size mismatch: probs " + ps.str() + ", targets " +
                      std::to_string(targets.size()));
  }
  const std::int64_t plane = static_cast<std::int64_t>(ps.h) * ps.w;
  std::int64_t count = 0;
  double acc = 0.0;
  for (int n = 0; n < ps.n; ++n) {
    const LabelMap& t = targets[n];
    if (t.h != ps.h || t.w != ps.w) {
      throw ConfigError("nll_spatial: target dims " + std::to_string(t.h) + "x" +
                        std::to_string(t.w) + " do not match probs " + ps.str());
    }
    const T* pn = probs.data() + static_cast<std::int64_t>(n) * ps.c * plane;
    for (std::int64_t p = 0; p < plane; ++p) {
      const std::int32_t lab = t.v[p];
      if (lab == ignore_index) continue;
      if (lab < 0 || lab >= ps.c) {
        throw DataError("nll_spatial: label " + std::to_string(lab) + " outside [0," +
                        std::to_string(ps.c) + ")");
      }
      const double pv = std::max(static_cast<double>(pn[lab * plane + p]), kProbClamp);
      acc -= std::log(pv);
      ++count;
    }
  }
  const double loss = count > 0 ? acc / static_cast<double>(count) : 0.0;
  TensorT<T> out = TensorT<T>::scalar(static_cast<T>(loss));
  if (detail::track_grad<T>({probs}) && count > 0) {
    TensorT<T> pc = probs;
    auto tgs = targets;
    detail::attach<T>(out, "nll_spatial", {probs},
                      [pc, tgs, ignore_index, ps, plane, count](const TensorT<T>& o) mutable {
                        if (!pc.requires_grad()) return;
                        const T g = o.grad_vec()[0];
                        T* gp = pc.ensure_grad();
                        const T* pv = pc.data();
                        const T invk = T(1) / static_cast<T>(count);
                        for (int n = 0; n < ps.n; ++n) {
                          const std::int64_t nb = static_cast<std::int64_t>(n) * ps.c * plane;
                          for (std::int64_t p = 0; p < plane; ++p) {
                            const std::int32_t lab = tgs[n].v[p];
                            if (lab == ignore_index) continue;
                            const std::int64_t idx = nb + static_cast<std::int64_t>(lab) * plane + p;
                            if (static_cast<double>(pv[idx]) > kProbClamp) {
                              gp[idx] += -g * invk / pv[idx];
                            }
                          }
                        }
                      });
  }
  return out;
}

// Cross-entropy on logits: softmax over channels, then clamped NLL.
template <class T>
TensorT<T> cross_entropy_spatial(const TensorT<T>& logits, const std::vector<LabelMap>& targets,
                                 int ignore_index = kIgnoreLabel) {
  return nll_spatial(softmax_channels(logits), targets, ignore_index);
}

// ---------------------------------------------------------------------------
// Squeeze-and-Excitation gate, composed from primitives: global average pool,
// 1x1 reduce, ReLU, 1x1 expand, sigmoid, per-channel multiply.
// ---------------------------------------------------------------------------
template <class T>
TensorT<T> se_block(const TensorT<T>& x, const TensorT<T>& w_reduce, const TensorT<T>& b_reduce,
                    const TensorT<T>& w_expand, const TensorT<T>& b_expand) {
  TensorT<T> pooled = global_avg_pool(x);
  TensorT<T> reduced = relu(conv2d(pooled, w_reduce, b_reduce, 1, 0, 1));
  TensorT<T> gate = sigmoid(conv2d(reduced, w_expand, b_expand, 1, 0, 1));
  return mul_channel_gate(x, gate);
}

// ---------------------------------------------------------------------------
// Atrous spatial pyramid pooling: four parallel dilated convolutions (rate 1
// realized as a 1x1 kernel), channel concatenation, 1x1 projection.
// ---------------------------------------------------------------------------
inline constexpr std::array<int, 4> kAsppRates{1, 6, 12, 18};

template <class T>
TensorT<T> aspp(const TensorT<T>& x, const std::array<TensorT<T>, 4>& branch_w,
                const std::array<TensorT<T>, 4>& branch_b, const TensorT<T>& proj_w,
                const TensorT<T>& proj_b, const std::array<int, 4>& rates = kAsppRates) {
  std::vector<TensorT<T>> branches;
  branches.reserve(4);
  for (int i = 0; i < 4; ++i) {
    const int rate = rates[i];
    if (rate == 1) {
      branches.push_back(conv2d(x, branch_w[i], branch_b[i], 1, 0, 1));
    } else {
      branches.push_back(conv2d(x, branch_w[i], branch_b[i], 1, rate, rate));
    }
  }
  return conv2d(concat_channels(branches), proj_w, proj_b, 1, 0, 1);
}

// Per-pixel argmax over channels; ties resolve to the lower channel index.
template <class T>
std::vector<LabelMap> argmax_channels(const TensorT<T>& x) {
  const Shape xs = x.shape();
  const std::int64_t plane = static_cast<std::int64_t>(xs.h) * xs.w;
  std::vector<LabelMap> out;
  out.reserve(xs.n);
  for (int n = 0; n < xs.n; ++n) {
    LabelMap m(xs.h, xs.w);
    const T* pn = x.data() + static_cast<std::int64_t>(n) * xs.c * plane;
    for (std::int64_t p = 0; p < plane; ++p) {
      int best = 0;
      T bv = pn[p];
      for (int c = 1; c < xs.c; ++c) {
        const T v = pn[c * plane + p];
        if (v > bv) {
          bv = v;
          best = c;
        }
      }
      m.v[p] = best;
    }
    out.push_back(std::move(m));
  }
  return out;
}

}  // namespace snt
