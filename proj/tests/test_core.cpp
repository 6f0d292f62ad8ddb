#include <catch2/catch_amalgamated.hpp>

#include "coopdet/autodiff.hpp"
#include "coopdet/rng.hpp"

using namespace coopdet;

namespace {

Tensor random_tensor(std::vector<int> dims, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(dims));
  for (auto& x : t.v) x = rng.normal(0.0, scale);
  return t;
}

// Central finite differences of a scalar-valued graph builder with respect
// to one leaf tensor; compared against the analytic gradient at 1e-3
// relative tolerance.
template <typename BuildFn>
void check_gradient(const Tensor& x0, BuildFn&& build, double h = 1e-5,
                    double tol = 1e-3) {
  Graph g;
  Var x = g.leaf(x0, true);
  Var loss = build(g, x);
  REQUIRE(loss->val.size() == 1);
  g.backward(loss);
  const Tensor analytic = g.grad(x);

  double max_rel = 0.0;
  for (int i = 0; i < x0.size(); ++i) {
    Tensor xp = x0, xm = x0;
    xp[static_cast<std::size_t>(i)] += h;
    xm[static_cast<std::size_t>(i)] -= h;
    Graph gp, gm;
    const double fp = build(gp, gp.leaf(xp, false))->val[0];
    const double fm = build(gm, gm.leaf(xm, false))->val[0];
    const double fd = (fp - fm) / (2.0 * h);
    const double an = analytic[static_cast<std::size_t>(i)];
    const double denom = std::max({std::fabs(fd), std::fabs(an), 1e-6});
    max_rel = std::max(max_rel, std::fabs(fd - an) / denom);
  }
  REQUIRE(max_rel < tol);
}

}  // namespace

TEST_CASE("rng determinism and ranges") {
  Rng a(123), b(123);
  for (int i = 0; i < 1000; ++i) {
    const double x = a.uniform();
    REQUIRE(x == b.uniform());
    REQUIRE(x >= 0.0);
    REQUIRE(x < 1.0);
  }
  Rng c(7);
  for (int i = 0; i < 1000; ++i) {
    const auto v = c.uniform_int(-3, 5);
    REQUIRE(v >= -3);
    REQUIRE(v <= 5);
  }
}

TEST_CASE("tensor basics") {
  Tensor t({2, 3, 4});
  REQUIRE(t.size() == 24);
  t.at(1, 2, 3) = 5.0;
  REQUIRE(t.v[23] == 5.0);
  Tensor s = Tensor::scalar(2.5);
  REQUIRE(s.size() == 1);
  REQUIRE_THROWS_AS(Tensor({2, 2}, {1.0}), Error);
}

TEST_CASE("elementwise ops forward and gradient") {
  Rng rng(11);
  const Tensor x0 = random_tensor({3, 4}, rng);
  check_gradient(x0, [&](Graph& g, Var x) {
    Var y = mul(g, relu(g, x), sigmoid(g, x));
    return sum(g, y);
  });
  check_gradient(x0, [&](Graph& g, Var x) {
    Var a = vexp(g, mulc(g, x, 0.3));
    Var b = addc(g, mul(g, a, a), 1.0);
    return sum(g, vdiv(g, a, b));
  });
  const Tensor pos = [&] {
    Tensor t = x0;
    for (auto& v : t.v) v = std::fabs(v) + 0.5;
    return t;
  }();
  check_gradient(pos, [&](Graph& g, Var x) {
    return sum(g, mul(g, vlog(g, x), pow_const(g, x, 1.7)));
  });
}

TEST_CASE("min max and clamp gradients route to the active branch") {
  Rng rng(5);
  const Tensor a0 = random_tensor({8}, rng);
  const Tensor c = random_tensor({8}, rng);
  check_gradient(a0, [&](Graph& g, Var x) {
    return sum(g, vmax(g, x, g.constant(c)));
  });
  check_gradient(a0, [&](Graph& g, Var x) {
    return sum(g, vmin(g, mulc(g, x, 2.0), g.constant(c)));
  });
  check_gradient(a0, [&](Graph& g, Var x) {
    return sum(g, clamp(g, x, -0.5, 0.5));
  });
}

TEST_CASE("conv2d matches finite differences") {
  Rng rng(21);
  const Tensor x0 = random_tensor({2, 6, 6}, rng);
  const Tensor w0 = random_tensor({3, 2, 3, 3}, rng, 0.5);
  const Tensor b0 = random_tensor({3}, rng, 0.1);
  const Tensor mixw = random_tensor({3 * 6 * 6}, rng);

  SECTION("gradient w.r.t. input, stride 1") {
    check_gradient(x0, [&](Graph& g, Var x) {
      Var y = conv2d(g, x, g.constant(w0), g.constant(b0), 1, 1);
      return sum(g, cmul(g, reshape(g, y, {3 * 6 * 6}), mixw));
    });
  }
  SECTION("gradient w.r.t. weights, stride 2") {
    const Tensor mix2 = random_tensor({3 * 3 * 3}, rng);
    check_gradient(w0, [&](Graph& g, Var w) {
      Var y = conv2d(g, g.constant(x0), w, g.constant(b0), 2, 1);
      return sum(g, cmul(g, reshape(g, y, {3 * 3 * 3}), mix2));
    });
  }
  SECTION("gradient w.r.t. bias") {
    check_gradient(b0, [&](Graph& g, Var b) {
      Var y = conv2d(g, g.constant(x0), g.constant(w0), b, 1, 1);
      return sum(g, y);
    });
  }
  SECTION("output shape with stride 2") {
    Graph g;
    Var y = conv2d(g, g.constant(Tensor({2, 32, 32})), g.constant(w0),
                   g.constant(b0), 2, 1);
    REQUIRE(y->val.dims == std::vector<int>{3, 16, 16});
  }
}

TEST_CASE("softmax_ch normalizes and differentiates") {
  Rng rng(31);
  const Tensor x0 = random_tensor({4, 3, 3}, rng);
  Graph g;
  Var s = softmax_ch(g, g.constant(x0));
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) {
      double acc = 0.0;
      for (int k = 0; k < 4; ++k) acc += s->val.at(k, r, c);
      REQUIRE_THAT(acc, Catch::Matchers::WithinAbs(1.0, 1e-12));
    }
  const Tensor mixw = random_tensor({4 * 3 * 3}, rng);
  check_gradient(x0, [&](Graph& gg, Var x) {
    Var y = softmax_ch(gg, x);
    return sum(gg, cmul(gg, reshape(gg, y, {4 * 3 * 3}), mixw));
  });
}

TEST_CASE("structural ops: concat, slice, gather, dense, pool") {
  Rng rng(41);
  const Tensor a0 = random_tensor({2, 3, 3}, rng);
  const Tensor b0 = random_tensor({3, 3, 3}, rng);
  Graph g;
  Var cat = concat_ch(g, g.constant(a0), g.constant(b0));
  REQUIRE(cat->val.dims == std::vector<int>{5, 3, 3});
  Var sl = slice_ch(g, cat, 2, 5);
  REQUIRE(sl->val.v == b0.v);

  const Tensor mix = random_tensor({5 * 3 * 3}, rng);
  check_gradient(a0, [&](Graph& gg, Var x) {
    Var y = concat_ch(gg, x, gg.constant(b0));
    return sum(gg, cmul(gg, reshape(gg, y, {5 * 3 * 3}), mix));
  });

  std::vector<int> idx = {0, 1, 2, 1, 0, 2, 2, 1, 0};
  check_gradient(b0, [&](Graph& gg, Var x) {
    return sum(gg, gather_ch(gg, x, idx));
  });

  const Tensor w = random_tensor({4, 18}, rng, 0.3);
  const Tensor bias = random_tensor({4}, rng, 0.1);
  check_gradient(a0, [&](Graph& gg, Var x) {
    Var flat = reshape(gg, x, {18});
    return sum(gg, dense(gg, flat, gg.constant(w), gg.constant(bias)));
  });
  check_gradient(b0, [&](Graph& gg, Var x) {
    return sum(gg, global_mean_ch(gg, x));
  });
}

TEST_CASE("bilinear warp: identity, shift, inverse, gradient") {
  Rng rng(51);
  const GridSpec spec{8, 8.0};
  const Tensor x0 = random_tensor({2, 8, 8}, rng);

  SECTION("identity transform is exact") {
    const Tensor out = warp_tensor(x0, FrameTransform{}, spec);
    REQUIRE(out.v == x0.v);
  }
  SECTION("one-cell translation equals manual shift") {
    // Sampling map shifted by +1 cell in x: out(r,c) = in(r,c+1).
    FrameTransform t{0.0, {spec.cell(), 0.0}};
    const Tensor out = warp_tensor(x0, t, spec);
    for (int ch = 0; ch < 2; ++ch)
      for (int r = 0; r < 8; ++r)
        for (int c = 0; c < 8; ++c) {
          const double want = c + 1 < 8 ? x0.at(ch, r, c + 1) : 0.0;
          REQUIRE(out.at(ch, r, c) == want);
        }
  }
  SECTION("warp by T then by T inverse is close on interior cells") {
    FrameTransform t{0.35, {1.3, -0.8}};
    const Tensor once = warp_tensor(x0, t, spec);
    const Tensor back = warp_tensor(once, t.inverse(), spec);
    for (int ch = 0; ch < 2; ++ch)
      for (int r = 2; r < 6; ++r)
        for (int c = 2; c < 6; ++c)
          REQUIRE_THAT(back.at(ch, r, c),
                       Catch::Matchers::WithinAbs(x0.at(ch, r, c), 2e-1));
  }
  SECTION("gradient flows through the sampling weights") {
    FrameTransform t{0.2, {0.7, 0.4}};
    const Tensor mix = random_tensor({2 * 8 * 8}, rng);
    check_gradient(x0, [&](Graph& gg, Var x) {
      Var y = warp_bilinear(gg, x, t, spec);
      return sum(gg, cmul(gg, reshape(gg, y, {2 * 8 * 8}), mix));
    });
  }
}

TEST_CASE("cross-agent reductions") {
  Rng rng(61);
  std::vector<Tensor> vals;
  for (int i = 0; i < 5; ++i) vals.push_back(random_tensor({3, 3}, rng));

  SECTION("mean and median are permutation-bit-identical") {
    Graph g;
    std::vector<Var> xs, xs_perm;
    for (const auto& v : vals) xs.push_back(g.constant(v));
    for (int i : {3, 0, 4, 2, 1}) xs_perm.push_back(g.constant(vals[static_cast<std::size_t>(i)]));
    REQUIRE(reduce_mean(g, xs)->val.v == reduce_mean(g, xs_perm)->val.v);
    REQUIRE(reduce_median(g, xs)->val.v == reduce_median(g, xs_perm)->val.v);
    REQUIRE(reduce_softmedian(g, xs, 0.1)->val.v ==
            reduce_softmedian(g, xs_perm, 0.1)->val.v);
  }
  SECTION("median of odd count picks the middle value") {
    Graph g;
    std::vector<Var> xs = {g.constant(Tensor({1}, {5.0})),
                           g.constant(Tensor({1}, {-1.0})),
                           g.constant(Tensor({1}, {2.0}))};
    REQUIRE(reduce_median(g, xs)->val[0] == 2.0);
  }
  SECTION("gradients match finite differences for each input slot") {
    for (int slot = 0; slot < 3; ++slot) {
      check_gradient(vals[0], [&](Graph& gg, Var x) {
        std::vector<Var> xs;
        for (int i = 0; i < 3; ++i)
          xs.push_back(i == slot ? x : gg.constant(vals[static_cast<std::size_t>(i + 1)]));
        Var m = reduce_mean(gg, xs);
        return sum(gg, mul(gg, m, m));
      });
      check_gradient(vals[0], [&](Graph& gg, Var x) {
        std::vector<Var> xs;
        for (int i = 0; i < 3; ++i)
          xs.push_back(i == slot ? x : gg.constant(vals[static_cast<std::size_t>(i + 1)]));
        Var m = reduce_softmedian(gg, xs, 0.25);
        return sum(gg, mul(gg, m, m));
      });
    }
  }
}

TEST_CASE("soft median contract") {
  SECTION("all equal values return that value") {
    Graph g;
    std::vector<Var> xs;
    for (int i = 0; i < 4; ++i) xs.push_back(g.constant(Tensor({1}, {3.25})));
    REQUIRE(reduce_softmedian(g, xs, 0.1)->val[0] == 3.25);
  }
  SECTION("single value is the identity") {
    Graph g;
    std::vector<Var> xs = {g.constant(Tensor({1}, {-7.5}))};
    REQUIRE(reduce_softmedian(g, xs, 0.1)->val[0] == -7.5);
  }
  SECTION("small temperature converges to the exact median") {
    Graph g;
    std::vector<Var> xs = {g.constant(Tensor({1}, {0.0})),
                           g.constant(Tensor({1}, {0.0})),
                           g.constant(Tensor({1}, {10.0}))};
    const double sm = reduce_softmedian(g, xs, 0.01)->val[0];
    REQUIRE_THAT(sm, Catch::Matchers::WithinAbs(0.0, 1e-3));
  }
  SECTION("output lies within [min, max] of the inputs") {
    Rng rng(71);
    for (int trial = 0; trial < 200; ++trial) {
      Graph g;
      std::vector<Var> xs;
      double lo = 1e30, hi = -1e30;
      const int n = 1 + static_cast<int>(rng.uniform_int(0, 6));
      for (int i = 0; i < n; ++i) {
        const double v = rng.normal(0.0, 3.0);
        lo = std::min(lo, v);
        hi = std::max(hi, v);
        xs.push_back(g.constant(Tensor({1}, {v})));
      }
      const double sm = reduce_softmedian(g, xs, 0.1)->val[0];
      REQUIRE(sm >= lo - 1e-12);
      REQUIRE(sm <= hi + 1e-12);
    }
  }
  SECTION("integer-valued inputs at T = 0.01 match the exact median to 1e-3") {
    Rng rng(81);
    for (int trial = 0; trial < 100; ++trial) {
      Graph g;
      std::vector<Var> xs;
      std::vector<double> vals;
      const int n = 3 + 2 * static_cast<int>(rng.uniform_int(0, 2));  // odd
      for (int i = 0; i < n; ++i) {
        const double v = static_cast<double>(rng.uniform_int(-5, 5));
        vals.push_back(v);
        xs.push_back(g.constant(Tensor({1}, {v})));
      }
      std::sort(vals.begin(), vals.end());
      const double med = vals[static_cast<std::size_t>(n / 2)];
      REQUIRE_THAT(reduce_softmedian(g, xs, 0.01)->val[0],
                   Catch::Matchers::WithinAbs(med, 1e-3));
    }
  }
}

TEST_CASE("median robustness: one large outlier is ignored") {
  Rng rng(91);
  std::vector<Tensor> vals;
  for (int i = 0; i < 4; ++i) vals.push_back(random_tensor({4, 4}, rng, 0.5));
  Tensor outlier = Tensor::full({4, 4}, 1e3);
  Graph g;
  std::vector<Var> with_outlier, without;
  for (const auto& v : vals) {
    with_outlier.push_back(g.constant(v));
    without.push_back(g.constant(v));
  }
  with_outlier.push_back(g.constant(outlier));
  const Tensor m5 = reduce_median(g, with_outlier)->val;
  const Tensor m4 = reduce_median(g, without)->val;
  // 5 values: median is the 3rd smallest, the outlier shifts it by at most
  // one order statistic of the benign values.
  for (int i = 0; i < 16; ++i) {
    std::vector<double> v;
    for (const auto& t : vals) v.push_back(t[static_cast<std::size_t>(i)]);
    std::sort(v.begin(), v.end());
    REQUIRE_THAT(m5[static_cast<std::size_t>(i)],
                 Catch::Matchers::WithinAbs(v[2], 1e-12));
    REQUIRE_THAT(m4[static_cast<std::size_t>(i)],
                 Catch::Matchers::WithinAbs(0.5 * (v[1] + v[2]), 1e-12));
  }
}
