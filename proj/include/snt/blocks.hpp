#pragma once

#include <array>
#include <string>
#include <vector>

#include "snt/nn_ops.hpp"
#include "snt/params.hpp"

namespace snt {

// Shared block hyperparameters.
inline constexpr double kDropRate = 0.5;
inline constexpr int kSeRatio = 4;
inline constexpr double kBnMomentum = 0.1;
inline constexpr double kBnEps = 1e-5;
inline constexpr int kBlocksPerStage = 2;

// Per-pass execution mode. rng is consumed by dropout in train mode only.
struct BlockRun {
  bool train = false;
  Rng* rng = nullptr;
};

namespace blockdet {

template <class T>
void init_conv(ParamStoreT<T>& ps, const std::string& name, int c_out, int c_in, int k, Rng& rng,
               bool zero_init = false, bool with_bias = true) {
  TensorT<T>& w = ps.declare(name + ".weight", Shape{c_out, c_in, k, k});
  if (!zero_init) fill_kaiming(w, c_in * k * k, rng);
  if (with_bias) ps.declare(name + ".bias", Shape{1, c_out, 1, 1}, true, true);
}

template <class T>
TensorT<T> run_conv(ParamStoreT<T>& ps, const std::string& name, const TensorT<T>& x, int stride,
                    int pad, int dil = 1) {
  TensorT<T> bias;
  if (ps.contains(name + ".bias")) bias = ps.at(name + ".bias");
  return conv2d(x, ps.at(name + ".weight"), bias, stride, pad, dil);
}

template <class T>
void init_bn(ParamStoreT<T>& ps, const std::string& name, int c) {
  TensorT<T>& gamma = ps.declare(name + ".gamma", Shape{1, c, 1, 1}, true, true);
  fill_constant(gamma, T(1));
  ps.declare(name + ".beta", Shape{1, c, 1, 1}, true, true);
  ps.declare(name + ".running_mean", Shape{1, c, 1, 1}, false);
  TensorT<T>& rv = ps.declare(name + ".running_var", Shape{1, c, 1, 1}, false);
  fill_constant(rv, T(1));
}

template <class T>
TensorT<T> run_bn(ParamStoreT<T>& ps, const std::string& name, const TensorT<T>& x, bool train) {
  return batch_norm2d(x, ps.at(name + ".gamma"), ps.at(name + ".beta"),
                      ps.at(name + ".running_mean"), ps.at(name + ".running_var"),
                      static_cast<T>(kBnMomentum), static_cast<T>(kBnEps), train);
}

template <class T>
void init_se(ParamStoreT<T>& ps, const std::string& prefix, int c, Rng& rng) {
  if (c % kSeRatio != 0) {
    throw ConfigError("SE block at " + prefix + ": reduction ratio " + std::to_string(kSeRatio) +
                      " does not divide " + std::to_string(c) + " channels");
  }
  const int cr = c / kSeRatio;
  init_conv(ps, prefix + ".reduce", cr, c, 1, rng);
  init_conv(ps, prefix + ".expand", c, cr, 1, rng);
}

template <class T>
TensorT<T> run_se(ParamStoreT<T>& ps, const std::string& prefix, const TensorT<T>& x) {
  return se_block(x, ps.at(prefix + ".reduce.weight"), ps.at(prefix + ".reduce.bias"),
                  ps.at(prefix + ".expand.weight"), ps.at(prefix + ".expand.bias"));
}

}  // namespace blockdet

// ---------------------------------------------------------------------------
// Backbone: four stages of residual blocks at strides 2,4,8,8 and widths
// w,2w,4w,4w (stage 4 dilated instead of strided). Convolutions inside
// residual blocks carry no bias; batch norm follows each.
// ---------------------------------------------------------------------------
template <class T>
struct BackboneFeaturesT {
  std::array<TensorT<T>, 4> stages;
};

namespace blockdet {

template <class T>
void init_res_block(ParamStoreT<T>& ps, const std::string& prefix, int c_in, int c_out, int stride,
                    Rng& rng) {
  init_conv(ps, prefix + ".conv1", c_out, c_in, 3, rng, false, false);
  init_bn(ps, prefix + ".bn1", c_out);
  init_conv(ps, prefix + ".conv2", c_out, c_out, 3, rng, false, false);
  init_bn(ps, prefix + ".bn2", c_out);
  if (c_in != c_out || stride != 1) {
    init_conv(ps, prefix + ".proj", c_out, c_in, 1, rng, false, false);
    init_bn(ps, prefix + ".bnp", c_out);
  }
}

template <class T>
TensorT<T> run_res_block(ParamStoreT<T>& ps, const std::string& prefix, const TensorT<T>& x,
                         int stride, int dil, bool train) {
  TensorT<T> h = run_conv(ps, prefix + ".conv1", x, stride, dil, dil);
  h = relu(run_bn(ps, prefix + ".bn1", h, train));
  h = run_conv(ps, prefix + ".conv2", h, 1, dil, dil);
  h = run_bn(ps, prefix + ".bn2", h, train);
  TensorT<T> skip = x;
  if (ps.contains(prefix + ".proj.weight")) {
    skip = run_bn(ps, prefix + ".bnp", run_conv(ps, prefix + ".proj", x, stride, 0), train);
  }
  return relu(add(h, skip));
}

}  // namespace blockdet

template <class T>
void init_backbone(ParamStoreT<T>& ps, const std::string& prefix, int in_ch, int width, Rng& rng) {
  const std::array<int, 4> widths{width, 2 * width, 4 * width, 4 * width};
  const std::array<int, 4> strides{2, 2, 2, 1};
  int c_in = in_ch;
  for (int s = 0; s < 4; ++s) {
    for (int b = 0; b < kBlocksPerStage; ++b) {
      const std::string name =
          prefix + ".s" + std::to_string(s + 1) + ".b" + std::to_string(b);
      blockdet::init_res_block(ps, name, c_in, widths[s], b == 0 ? strides[s] : 1, rng);
      c_in = widths[s];
    }
  }
}

template <class T>
BackboneFeaturesT<T> backbone_forward(const TensorT<T>& image, ParamStoreT<T>& ps,
                                      const std::string& prefix, bool train) {
  const Shape s = image.shape();
  if (s.h % 8 != 0 || s.w % 8 != 0) {
    throw ConfigError("backbone: input dims " + s.str() + " must be divisible by 8");
  }
  const std::array<int, 4> strides{2, 2, 2, 1};
  const std::array<int, 4> dils{1, 1, 1, 2};
  BackboneFeaturesT<T> out;
  TensorT<T> x = image;
  for (int st = 0; st < 4; ++st) {
    for (int b = 0; b < kBlocksPerStage; ++b) {
      const std::string name =
          prefix + ".s" + std::to_string(st + 1) + ".b" + std::to_string(b);
      x = blockdet::run_res_block(ps, name, x, b == 0 ? strides[st] : 1, dils[st], train);
    }
    out.stages[st] = x;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Attention routing: 1x1 conv + SE, dropout, 1x1 conv to I = n_children + 1
// channels, softmax. Child features are the parent gated by that child's mask
// channel. The mask-producing conv starts at zero so initial routing is
// uniform. Under no_mask the final conv is dropped entirely and every child
// receives the transformed trunk features unguided.
// ---------------------------------------------------------------------------
template <class T>
struct RoutingOutputT {
  TensorT<T> mask;                  // (N, I, h, w) post-softmax; invalid under no_mask
  std::vector<TensorT<T>> guided;   // one tensor per child
};

template <class T>
void init_routing(ParamStoreT<T>& ps, const std::string& prefix, int channels, int n_children,
                  bool no_mask, Rng& rng) {
  blockdet::init_conv(ps, prefix + ".conv1", channels, channels, 1, rng);
  blockdet::init_se<T>(ps, prefix + ".se", channels, rng);
  if (!no_mask) {
    blockdet::init_conv(ps, prefix + ".mask_conv", n_children + 1, channels, 1, rng,
                        /*zero_init=*/true);
  }
}

template <class T>
RoutingOutputT<T> routing_forward(const TensorT<T>& parent, ParamStoreT<T>& ps,
                                  const std::string& prefix, int n_children, const BlockRun& run,
                                  bool no_mask) {
  TensorT<T> h = relu(blockdet::run_conv(ps, prefix + ".conv1", parent, 1, 0));
  h = blockdet::run_se(ps, prefix + ".se", h);
  h = dropout(h, kDropRate, run.train, *run.rng);

  RoutingOutputT<T> out;
  if (no_mask) {
    out.guided.assign(n_children, h);
    return out;
  }
  TensorT<T> logits = blockdet::run_conv(ps, prefix + ".mask_conv", h, 1, 0);
  out.mask = softmax_channels(logits);
  out.guided.reserve(n_children);
  for (int i = 0; i < n_children; ++i) {
    out.guided.push_back(mul_mask(parent, slice_channels(out.mask, i, i + 1)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Semantic aggregation: ASPP over the guided features, bilinear upsample to
// the designated backbone skip stage, channel-halving 1x1 conv, then addition
// with the 1x1-projected skip features.
// ---------------------------------------------------------------------------
template <class T>
void init_aggregation(ParamStoreT<T>& ps, const std::string& prefix, int level_width, int skip_ch,
                      bool no_skip, Rng& rng) {
  if (level_width % 2 != 0) {
    throw ConfigError("aggregation at " + prefix + ": level width must be even");
  }
  const int cb = level_width / 2;
  blockdet::init_conv(ps, prefix + ".aspp.b0", cb, level_width, 1, rng);
  blockdet::init_conv(ps, prefix + ".aspp.b1", cb, level_width, 3, rng);
  blockdet::init_conv(ps, prefix + ".aspp.b2", cb, level_width, 3, rng);
  blockdet::init_conv(ps, prefix + ".aspp.b3", cb, level_width, 3, rng);
  blockdet::init_conv(ps, prefix + ".aspp.proj", 2 * level_width, 4 * cb, 1, rng);
  blockdet::init_conv(ps, prefix + ".halve", level_width, 2 * level_width, 1, rng);
  if (!no_skip) {
    blockdet::init_conv(ps, prefix + ".skip_proj", level_width, skip_ch, 1, rng);
  }
}

template <class T>
TensorT<T> aggregation_forward(const TensorT<T>& guided, const TensorT<T>& skip,
                               ParamStoreT<T>& ps, const std::string& prefix, bool no_skip) {
  const std::array<TensorT<T>, 4> bw{
      ps.at(prefix + ".aspp.b0.weight"), ps.at(prefix + ".aspp.b1.weight"),
      ps.at(prefix + ".aspp.b2.weight"), ps.at(prefix + ".aspp.b3.weight")};
  const std::array<TensorT<T>, 4> bb{
      ps.at(prefix + ".aspp.b0.bias"), ps.at(prefix + ".aspp.b1.bias"),
      ps.at(prefix + ".aspp.b2.bias"), ps.at(prefix + ".aspp.b3.bias")};
  TensorT<T> a = aspp(guided, bw, bb, ps.at(prefix + ".aspp.proj.weight"),
                      ps.at(prefix + ".aspp.proj.bias"));
  const Shape sk = skip.shape();
  TensorT<T> u = upsample_bilinear(a, sk.h, sk.w);
  TensorT<T> halved = relu(blockdet::run_conv(ps, prefix + ".halve", u, 1, 0));
  if (no_skip) return halved;
  if (halved.shape().h != sk.h || halved.shape().w != sk.w) {
    throw InternalError("aggregation at " + prefix + ": spatial mismatch after upsample");
  }
  return add(halved, blockdet::run_conv(ps, prefix + ".skip_proj", skip, 1, 0));
}

// ---------------------------------------------------------------------------
// Prediction head: deformable conv 3x3, SE, batch norm, dropout, deformable
// conv 3x3 to the output logits. Offset/modulation convolutions start at zero
// so training begins from plain convolution behavior; no_dconv swaps both
// deformable convolutions for standard ones.
// ---------------------------------------------------------------------------
template <class T>
void init_prediction(ParamStoreT<T>& ps, const std::string& prefix, int c_in, int c_mid, int c_out,
                     bool no_dconv, Rng& rng) {
  auto init_dconv = [&](const std::string& name, int ci, int co) {
    blockdet::init_conv(ps, name, co, ci, 3, rng);
    if (!no_dconv) {
      blockdet::init_conv(ps, name + ".offset", 18, ci, 3, rng, /*zero_init=*/true);
      blockdet::init_conv(ps, name + ".modulation", 9, ci, 3, rng, /*zero_init=*/true);
    }
  };
  init_dconv(prefix + ".dconv1", c_in, c_mid);
  blockdet::init_se<T>(ps, prefix + ".se", c_mid, rng);
  blockdet::init_bn(ps, prefix + ".bn", c_mid);
  init_dconv(prefix + ".dconv2", c_mid, c_out);
}

namespace blockdet {

template <class T>
TensorT<T> run_dconv(ParamStoreT<T>& ps, const std::string& name, const TensorT<T>& x,
                     bool no_dconv) {
  if (no_dconv) return run_conv(ps, name, x, 1, 1);
  TensorT<T> off = run_conv(ps, name + ".offset", x, 1, 1);
  TensorT<T> mod = sigmoid(run_conv(ps, name + ".modulation", x, 1, 1));
  return deformable_conv2d(x, ps.at(name + ".weight"), ps.at(name + ".bias"), off, mod, 1, 1);
}

}  // namespace blockdet

template <class T>
TensorT<T> prediction_forward(const TensorT<T>& x, ParamStoreT<T>& ps, const std::string& prefix,
                              const BlockRun& run, bool no_dconv) {
  TensorT<T> h = relu(blockdet::run_dconv(ps, prefix + ".dconv1", x, no_dconv));
  h = blockdet::run_se(ps, prefix + ".se", h);
  h = blockdet::run_bn(ps, prefix + ".bn", h, run.train);
  h = dropout(h, kDropRate, run.train, *run.rng);
  return blockdet::run_dconv(ps, prefix + ".dconv2", h, no_dconv);
}

using BackboneFeatures = BackboneFeaturesT<float>;
using RoutingOutput = RoutingOutputT<float>;

}  // namespace snt
