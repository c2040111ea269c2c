#pragma once

#include <vector>

#include "snt/blocks.hpp"
#include "snt/gradcheck.hpp"

namespace snt {

// The standard f64 gradient-check suite: every differentiable op plus each
// composed block, driven through scalar losses. Dropout runs in eval mode
// throughout (BlockRun.train = false).
inline std::vector<GradCheckCase> run_gradcheck_suite() {
  using D = double;
  std::vector<GradCheckCase> cases;
  Rng rng(2024);

  auto rand_t = [&](Shape s, double lo, double hi, bool rq) {
    TensorT<D> t = TensorT<D>::zeros(s, rq);
    for (std::int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform(lo, hi);
    return t;
  };

  auto add_case = [&](const std::string& name, double err, double tol) {
    cases.push_back({name, err, tol});
  };

  // --- individual ops ---
  {
    TensorT<D> x = rand_t(Shape{2, 3, 5, 5}, -1, 1, true);
    TensorT<D> w = rand_t(Shape{4, 3, 3, 3}, -1, 1, true);
    TensorT<D> b = rand_t(Shape{1, 4, 1, 1}, -1, 1, true);
    add_case("conv2d(linear)",
             grad_check<D>([&] { return sum(conv2d(x, w, b, 1, 1, 1)); }, {x, w, b}, 1e-3), 1e-9);
    add_case("conv2d.strided.dilated",
             grad_check<D>([&] { return sum(relu(conv2d(x, w, b, 2, 2, 2))); }, {x, w, b}, 1e-4),
             1e-3);
  }
  {
    TensorT<D> x = rand_t(Shape{1, 2, 6, 6}, -1, 1, true);
    TensorT<D> w = rand_t(Shape{2, 2, 3, 3}, -1, 1, true);
    TensorT<D> b = rand_t(Shape{1, 2, 1, 1}, -1, 1, true);
    TensorT<D> off = TensorT<D>::zeros(Shape{1, 18, 6, 6}, true);
    for (std::int64_t i = 0; i < off.numel(); ++i) off.data()[i] = 0.3 + 0.15 * rng.uniform(-1, 1);
    TensorT<D> mod = rand_t(Shape{1, 9, 6, 6}, 0.2, 0.8, true);
    add_case("deformable_conv2d",
             grad_check<D>([&] { return sum(relu(deformable_conv2d(x, w, b, off, mod, 1, 1))); },
                           {x, w, b, off, mod}, 1e-4),
             1e-3);
  }
  {
    TensorT<D> x = rand_t(Shape{2, 4, 4, 4}, -1, 1, true);
    TensorT<D> wr = rand_t(Shape{1, 4, 1, 1}, -1, 1, true);
    TensorT<D> br = rand_t(Shape{1, 1, 1, 1}, -1, 1, true);
    TensorT<D> we = rand_t(Shape{4, 1, 1, 1}, -1, 1, true);
    TensorT<D> be = rand_t(Shape{1, 4, 1, 1}, -1, 1, true);
    add_case("se_block",
             grad_check<D>([&] { return sum(se_block(x, wr, br, we, be)); }, {x, wr, br, we, be},
                           1e-4),
             1e-3);
  }
  {
    TensorT<D> x = rand_t(Shape{3, 4, 4, 4}, -1, 1, true);
    TensorT<D> gamma = rand_t(Shape{1, 4, 1, 1}, 0.5, 1.5, true);
    TensorT<D> beta = rand_t(Shape{1, 4, 1, 1}, -0.3, 0.3, true);
    TensorT<D> rm = TensorT<D>::zeros(Shape{1, 4, 1, 1});
    TensorT<D> rv = TensorT<D>::full(Shape{1, 4, 1, 1}, 1.0);
    std::vector<LabelMap> t{LabelMap(4, 4, 0), LabelMap(4, 4, 1), LabelMap(4, 4, 3)};
    add_case("batch_norm2d(train)",
             grad_check<D>(
                 [&] {
                   return cross_entropy_spatial(
                       batch_norm2d(x, gamma, beta, rm, rv, 0.0, 1e-5, true), t, 255);
                 },
                 {x, gamma, beta}, 1e-4),
             1e-3);
  }
  {
    TensorT<D> x = rand_t(Shape{1, 5, 3, 3}, -2, 2, true);
    std::vector<LabelMap> t{LabelMap(3, 3, 2)};
    add_case("softmax+nll",
             grad_check<D>([&] { return cross_entropy_spatial(x, t, 255); }, {x}, 1e-4), 1e-3);
  }
  {
    TensorT<D> x = rand_t(Shape{1, 2, 3, 4}, -1, 1, true);
    add_case("upsample_bilinear",
             grad_check<D>([&] { return sum(mul(upsample_bilinear(x, 7, 9),
                                                upsample_bilinear(x, 7, 9))); },
                           {x}, 1e-4),
             1e-3);
  }
  {
    TensorT<D> x = rand_t(Shape{1, 4, 6, 6}, -1, 1, true);
    std::array<TensorT<D>, 4> bw{rand_t(Shape{2, 4, 1, 1}, -1, 1, true),
                                 rand_t(Shape{2, 4, 3, 3}, -1, 1, true),
                                 rand_t(Shape{2, 4, 3, 3}, -1, 1, true),
                                 rand_t(Shape{2, 4, 3, 3}, -1, 1, true)};
    std::array<TensorT<D>, 4> bb{rand_t(Shape{1, 2, 1, 1}, -1, 1, true),
                                 rand_t(Shape{1, 2, 1, 1}, -1, 1, true),
                                 rand_t(Shape{1, 2, 1, 1}, -1, 1, true),
                                 rand_t(Shape{1, 2, 1, 1}, -1, 1, true)};
    TensorT<D> pw = rand_t(Shape{3, 8, 1, 1}, -1, 1, true);
    TensorT<D> pb = rand_t(Shape{1, 3, 1, 1}, -1, 1, true);
    std::vector<TensorT<D>> params{bw[0], bw[1], bw[2], bw[3], pw, pb, x};
    add_case("aspp",
             grad_check<D>([&] { return sum(relu(aspp(x, bw, bb, pw, pb))); }, params, 1e-4), 1e-3);
  }
  {
    TensorT<D> x = rand_t(Shape{2, 3, 4, 4}, -1, 1, true);
    TensorT<D> m = rand_t(Shape{2, 1, 4, 4}, 0.1, 0.9, true);
    add_case("mul_mask(linear)",
             grad_check<D>([&] { return sum(mul_mask(x, m)); }, {x, m}, 1e-3), 1e-9);
    TensorT<D> g = rand_t(Shape{2, 3, 1, 1}, 0.1, 0.9, true);
    add_case("mul_channel_gate(linear)",
             grad_check<D>([&] { return sum(mul_channel_gate(x, g)); }, {x, g}, 1e-3), 1e-9);
  }

  // --- composed blocks, wired exactly as the model uses them ---
  Rng dummy_rng(0);
  BlockRun eval_run{false, &dummy_rng};

  {
    ParamStoreT<D> ps;
    Rng init(7);
    init_routing(ps, "r", 8, 3, false, init);
    TensorT<D> x = rand_t(Shape{1, 8, 5, 5}, -1, 1, true);
    // Perturb the zero-initialized mask conv so the check runs off-origin.
    for (auto& [name, e] : ps.entries()) {
      if (name.find("mask_conv") != std::string::npos) {
        for (std::int64_t i = 0; i < e.tensor.numel(); ++i) {
          e.tensor.data()[i] = 0.1 * init.uniform(-1, 1);
        }
      }
    }
    std::vector<TensorT<D>> params{x};
    for (auto& [name, e] : ps.entries()) {
      if (e.trainable) params.push_back(e.tensor);
    }
    auto loss = [&] {
      auto out = routing_forward(x, ps, "r", 3, eval_run, false);
      TensorT<D> s = sum(out.mask);
      for (auto& g : out.guided) s = add(s, sum(mul(g, g)));
      return s;
    };
    add_case("block.routing", grad_check<D>(loss, params, 1e-4, 4), 1e-3);
  }
  {
    ParamStoreT<D> ps;
    Rng init(8);
    init_aggregation(ps, "a", 8, 6, false, init);
    TensorT<D> guided = rand_t(Shape{1, 8, 4, 4}, -1, 1, true);
    TensorT<D> skip = rand_t(Shape{1, 6, 8, 8}, -1, 1, true);
    std::vector<TensorT<D>> params{guided, skip};
    for (auto& [name, e] : ps.entries()) {
      if (e.trainable) params.push_back(e.tensor);
    }
    auto loss = [&] {
      auto y = aggregation_forward(guided, skip, ps, "a", false);
      return sum(relu(y));
    };
    add_case("block.aggregation", grad_check<D>(loss, params, 1e-4, 4), 1e-3);
  }
  {
    ParamStoreT<D> ps;
    Rng init(9);
    init_prediction(ps, "p", 8, 8, 3, false, init);
    // Nudge offset/modulation convs off zero so offset grads are exercised
    // away from the bilinear lattice.
    for (auto& [name, e] : ps.entries()) {
      if (name.find("offset") != std::string::npos || name.find("modulation") != std::string::npos) {
        for (std::int64_t i = 0; i < e.tensor.numel(); ++i) {
          e.tensor.data()[i] = 0.05 * init.uniform(-1, 1) + (name.ends_with("bias") ? 0.25 : 0.0);
        }
      }
    }
    TensorT<D> x = rand_t(Shape{1, 8, 5, 5}, -1, 1, true);
    std::vector<LabelMap> t{LabelMap(5, 5, 1)};
    std::vector<TensorT<D>> params{x};
    for (auto& [name, e] : ps.entries()) {
      if (e.trainable) params.push_back(e.tensor);
    }
    auto loss = [&] {
      return cross_entropy_spatial(prediction_forward(x, ps, "p", eval_run, false), t, 255);
    };
    add_case("block.prediction", grad_check<D>(loss, params, 1e-4, 4), 1e-3);
  }
  {
    ParamStoreT<D> ps;
    Rng init(10);
    init_backbone(ps, "backbone", 3, 4, init);
    TensorT<D> x = rand_t(Shape{1, 3, 16, 16}, -1, 1, true);
    std::vector<TensorT<D>> params{x};
    for (auto& [name, e] : ps.entries()) {
      if (e.trainable) params.push_back(e.tensor);
    }
    auto loss = [&] {
      auto feats = backbone_forward(x, ps, "backbone", true);
      TensorT<D> s = sum(feats.stages[3]);
      return add(s, sum(feats.stages[0]));
    };
    add_case("block.backbone", grad_check<D>(loss, params, 1e-4, 2), 1e-3);
  }

  return cases;
}

}  // namespace snt
