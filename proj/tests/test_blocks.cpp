#include <doctest.h>

#include <cmath>

#include "snt/blocks.hpp"
#include "snt/gradcheck_suite.hpp"

using namespace snt;

namespace {

Tensor random_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t = Tensor::zeros(s);
  for (std::int64_t i = 0; i < t.numel(); ++i) t.data()[i] = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

}  // namespace

TEST_CASE("backbone: stage shapes follow strides 2,4,8,8 and widths w,2w,4w,4w") {
  ParamStore ps;
  Rng rng(1);
  init_backbone(ps, "backbone", 3, 16, rng);
  Tensor img = random_tensor(Shape{1, 3, 64, 64}, rng);
  auto feats = backbone_forward(img, ps, "backbone", false);
  CHECK(feats.stages[0].shape() == Shape{1, 16, 32, 32});
  CHECK(feats.stages[1].shape() == Shape{1, 32, 16, 16});
  CHECK(feats.stages[2].shape() == Shape{1, 64, 8, 8});
  CHECK(feats.stages[3].shape() == Shape{1, 64, 8, 8});
}

TEST_CASE("backbone: zero input with zero-init BN beta gives all-zero stages") {
  ParamStore ps;
  Rng rng(2);
  init_backbone(ps, "backbone", 3, 8, rng);
  Tensor img = Tensor::zeros(Shape{2, 3, 32, 32});
  auto feats = backbone_forward(img, ps, "backbone", true);
  for (const auto& st : feats.stages) {
    for (std::int64_t i = 0; i < st.numel(); ++i) CHECK(st.data()[i] == 0.0f);
  }
}

TEST_CASE("backbone: indivisible input dims are a configuration error") {
  ParamStore ps;
  Rng rng(3);
  init_backbone(ps, "backbone", 3, 8, rng);
  Tensor img = Tensor::zeros(Shape{1, 3, 60, 64});
  CHECK_THROWS_AS(backbone_forward(img, ps, "backbone", false), ConfigError);
}

TEST_CASE("backbone: same seed forwards twice bitwise identically") {
  auto run = [] {
    ParamStore ps;
    Rng rng(11);
    init_backbone(ps, "backbone", 3, 8, rng);
    Tensor img = random_tensor(Shape{1, 3, 32, 32}, rng);
    return backbone_forward(img, ps, "backbone", false).stages[3].vec();
  };
  CHECK(run() == run());
}

TEST_CASE("routing: saturated mask passes the parent to one child only") {
  ParamStore ps;
  Rng rng(4);
  init_routing(ps, "r", 8, 2, false, rng);
  // Logits +-1000 via the mask conv bias: channel 0 wins everywhere.
  Tensor& bias = ps.at("r.mask_conv.bias");
  bias.at(0, 0, 0, 0) = 1000.0f;
  bias.at(0, 1, 0, 0) = -1000.0f;
  bias.at(0, 2, 0, 0) = -1000.0f;

  Tensor x = random_tensor(Shape{1, 8, 6, 6}, rng);
  Rng drng(0);
  BlockRun run{false, &drng};
  auto out = routing_forward(x, ps, "r", 2, run, false);
  REQUIRE(out.guided.size() == 2);
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    CHECK(std::abs(out.guided[0].data()[i] - x.data()[i]) < 1e-4);
    CHECK(std::abs(out.guided[1].data()[i]) < 1e-4);
  }
}

TEST_CASE("routing: zero-initialized mask conv yields uniform guidance parent/I") {
  ParamStore ps;
  Rng rng(5);
  init_routing(ps, "r", 8, 3, false, rng);
  Tensor x = random_tensor(Shape{2, 8, 4, 4}, rng);
  Rng drng(0);
  BlockRun run{false, &drng};
  auto out = routing_forward(x, ps, "r", 3, run, false);
  for (const auto& g : out.guided) {
    for (std::int64_t i = 0; i < x.numel(); ++i) {
      CHECK(g.data()[i] == doctest::Approx(x.data()[i] / 4.0f).epsilon(1e-5));
    }
  }
}

TEST_CASE("routing: guided features match mask times parent computed independently") {
  ParamStore ps;
  Rng rng(6);
  init_routing(ps, "r", 8, 3, false, rng);
  // Random mask conv so the mask is non-trivial.
  Tensor& w = ps.at("r.mask_conv.weight");
  for (std::int64_t i = 0; i < w.numel(); ++i) w.data()[i] = static_cast<float>(rng.uniform(-1, 1));

  Tensor x = random_tensor(Shape{1, 8, 5, 5}, rng);
  Rng drng(0);
  BlockRun run{false, &drng};
  auto out = routing_forward(x, ps, "r", 3, run, false);
  REQUIRE(out.mask.valid());
  const std::int64_t plane = 25;
  for (int c = 0; c < 3; ++c) {
    for (int ch = 0; ch < 8; ++ch) {
      for (std::int64_t p = 0; p < plane; ++p) {
        const float expect = x.data()[ch * plane + p] * out.mask.data()[c * plane + p];
        CHECK(out.guided[c].data()[ch * plane + p] == doctest::Approx(expect).epsilon(1e-6));
      }
    }
  }
}

TEST_CASE("routing: mask normalization and guided partition identity") {
  ParamStore ps;
  Rng rng(7);
  init_routing(ps, "r", 8, 4, false, rng);
  Tensor& w = ps.at("r.mask_conv.weight");
  for (std::int64_t i = 0; i < w.numel(); ++i) w.data()[i] = static_cast<float>(rng.uniform(-2, 2));

  Tensor x = random_tensor(Shape{2, 8, 6, 6}, rng);
  Rng drng(0);
  BlockRun run{false, &drng};
  auto out = routing_forward(x, ps, "r", 4, run, false);

  const Shape ms = out.mask.shape();
  const std::int64_t plane = static_cast<std::int64_t>(ms.h) * ms.w;
  for (int n = 0; n < ms.n; ++n) {
    for (std::int64_t p = 0; p < plane; ++p) {
      double s = 0;
      for (int c = 0; c < ms.c; ++c) {
        const float v = out.mask.data()[(n * ms.c + c) * plane + p];
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
        s += v;
      }
      CHECK(std::abs(s - 1.0) < 1e-5);
    }
  }

  // sum_children guided + parent * psi_other == parent
  Tensor other = mul_mask(x, slice_channels(out.mask, 4, 5));
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    double acc = other.data()[i];
    for (const auto& g : out.guided) acc += g.data()[i];
    CHECK(std::abs(acc - x.data()[i]) < 1e-5);
  }
}

TEST_CASE("routing: no_mask drops the mask conv and passes trunk features unguided") {
  ParamStore ps;
  Rng rng(8);
  init_routing(ps, "r", 8, 3, true, rng);
  CHECK(!ps.contains("r.mask_conv.weight"));
  Tensor x = random_tensor(Shape{1, 8, 4, 4}, rng);
  Rng drng(0);
  BlockRun run{false, &drng};
  auto out = routing_forward(x, ps, "r", 3, run, true);
  CHECK(!out.mask.valid());
  REQUIRE(out.guided.size() == 3);
  for (std::int64_t i = 0; i < out.guided[0].numel(); ++i) {
    CHECK(out.guided[0].data()[i] == out.guided[1].data()[i]);
    CHECK(out.guided[0].data()[i] == out.guided[2].data()[i]);
  }
}

TEST_CASE("aggregation: zero skip projection leaves the upsampled ASPP branch") {
  ParamStore ps;
  Rng rng(9);
  init_aggregation(ps, "a", 8, 6, false, rng);
  Tensor& spw = ps.at("a.skip_proj.weight");
  fill_constant(spw, 0.0f);

  Tensor guided = random_tensor(Shape{1, 8, 4, 4}, rng);
  Tensor skip = random_tensor(Shape{1, 6, 8, 8}, rng);
  Tensor y = aggregation_forward(guided, skip, ps, "a", false);
  REQUIRE(y.shape() == Shape{1, 8, 8, 8});

  // Manual branch: aspp -> upsample -> halve conv -> relu.
  std::array<Tensor, 4> bw{ps.at("a.aspp.b0.weight"), ps.at("a.aspp.b1.weight"),
                           ps.at("a.aspp.b2.weight"), ps.at("a.aspp.b3.weight")};
  std::array<Tensor, 4> bb{ps.at("a.aspp.b0.bias"), ps.at("a.aspp.b1.bias"),
                           ps.at("a.aspp.b2.bias"), ps.at("a.aspp.b3.bias")};
  Tensor branch = relu(conv2d(
      upsample_bilinear(aspp(guided, bw, bb, ps.at("a.aspp.proj.weight"), ps.at("a.aspp.proj.bias")), 8, 8),
      ps.at("a.halve.weight"), ps.at("a.halve.bias"), 1, 0, 1));
  for (std::int64_t i = 0; i < y.numel(); ++i) CHECK(y.data()[i] == branch.data()[i]);
}

TEST_CASE("aggregation: zero guided input with identity skip projection returns the skip") {
  ParamStore ps;
  Rng rng(10);
  init_aggregation(ps, "a", 8, 8, false, rng);
  Tensor& spw = ps.at("a.skip_proj.weight");
  fill_constant(spw, 0.0f);
  for (int c = 0; c < 8; ++c) spw.at(c, c, 0, 0) = 1.0f;

  Tensor guided = Tensor::zeros(Shape{1, 8, 4, 4});
  Tensor skip = random_tensor(Shape{1, 8, 8, 8}, rng);
  Tensor y = aggregation_forward(guided, skip, ps, "a", false);
  for (std::int64_t i = 0; i < y.numel(); ++i) {
    CHECK(y.data()[i] == doctest::Approx(skip.data()[i]).epsilon(1e-6));
  }
}

TEST_CASE("aggregation: matches the manual composition of primitives") {
  ParamStore ps;
  Rng rng(11);
  init_aggregation(ps, "a", 8, 6, false, rng);
  Tensor guided = random_tensor(Shape{2, 8, 4, 4}, rng);
  Tensor skip = random_tensor(Shape{2, 6, 8, 8}, rng);
  Tensor y = aggregation_forward(guided, skip, ps, "a", false);

  std::array<Tensor, 4> bw{ps.at("a.aspp.b0.weight"), ps.at("a.aspp.b1.weight"),
                           ps.at("a.aspp.b2.weight"), ps.at("a.aspp.b3.weight")};
  std::array<Tensor, 4> bb{ps.at("a.aspp.b0.bias"), ps.at("a.aspp.b1.bias"),
                           ps.at("a.aspp.b2.bias"), ps.at("a.aspp.b3.bias")};
  Tensor ref = add(
      relu(conv2d(upsample_bilinear(
                      aspp(guided, bw, bb, ps.at("a.aspp.proj.weight"), ps.at("a.aspp.proj.bias")),
                      8, 8),
                  ps.at("a.halve.weight"), ps.at("a.halve.bias"), 1, 0, 1)),
      conv2d(skip, ps.at("a.skip_proj.weight"), ps.at("a.skip_proj.bias"), 1, 0, 1));
  for (std::int64_t i = 0; i < y.numel(); ++i) CHECK(y.data()[i] == ref.data()[i]);
}

TEST_CASE("aggregation: no_skip omits the skip projection parameters and addition") {
  ParamStore ps;
  Rng rng(12);
  init_aggregation(ps, "a", 8, 6, true, rng);
  CHECK(!ps.contains("a.skip_proj.weight"));
  Tensor guided = random_tensor(Shape{1, 8, 4, 4}, rng);
  Tensor skip = random_tensor(Shape{1, 6, 8, 8}, rng);
  Tensor y = aggregation_forward(guided, skip, ps, "a", true);
  CHECK(y.shape() == Shape{1, 8, 8, 8});
}

TEST_CASE("prediction: zero-init offsets behave as 0.5-modulated standard convs") {
  ParamStore ps;
  Rng rng(13);
  init_prediction(ps, "p", 8, 8, 4, false, rng);
  Tensor x = random_tensor(Shape{1, 8, 6, 6}, rng);

  // First deformable layer at init: offsets 0, modulation sigmoid(0)=0.5, so
  // it must equal 0.5 * conv(x, w, 0) + bias.
  Tensor got = blockdet::run_dconv(ps, "p.dconv1", x, false);
  Tensor nob;
  Tensor ref = conv2d(x, ps.at("p.dconv1.weight"), nob, 1, 1, 1);
  const float* b = ps.at("p.dconv1.bias").data();
  const std::int64_t plane = 36;
  for (int c = 0; c < 8; ++c) {
    for (std::int64_t p = 0; p < plane; ++p) {
      CHECK(got.data()[c * plane + p] ==
            doctest::Approx(0.5f * ref.data()[c * plane + p] + b[c]).epsilon(1e-4));
    }
  }
}

TEST_CASE("prediction: eval mode is deterministic across calls") {
  ParamStore ps;
  Rng rng(14);
  init_prediction(ps, "p", 8, 8, 4, false, rng);
  Tensor x = random_tensor(Shape{1, 8, 6, 6}, rng);
  Rng drng(0);
  BlockRun run{false, &drng};
  Tensor a = prediction_forward(x, ps, "p", run, false);
  Tensor b = prediction_forward(x, ps, "p", run, false);
  CHECK(a.vec() == b.vec());
}

TEST_CASE("prediction: no_dconv removes every offset and modulation parameter") {
  ParamStore ps;
  Rng rng(15);
  init_prediction(ps, "p", 8, 8, 4, true, rng);
  for (const auto& [name, e] : ps.entries()) {
    CHECK(name.find("offset") == std::string::npos);
    CHECK(name.find("modulation") == std::string::npos);
  }
}

TEST_CASE("gradcheck suite: every op and block passes at its tolerance") {
  auto cases = run_gradcheck_suite();
  REQUIRE(!cases.empty());
  for (const auto& c : cases) {
    INFO(c.name, " err=", c.max_rel_err, " tol=", c.tolerance);
    CHECK(c.passed());
  }
}
