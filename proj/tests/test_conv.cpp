#include <catch2/catch_amalgamated.hpp>

#include "aerolite/conv.hpp"
#include "oracles.hpp"

using namespace aero;

static ConvSpec make_spec(int cin, int cout, int k, int s, int p) {
  ConvSpec sp;
  sp.in_channels = cin;
  sp.out_channels = cout;
  sp.kernel_h = sp.kernel_w = k;
  sp.stride = s;
  sp.padding = p;
  return sp;
}

TEST_CASE("conv output extent law") {
  ConvSpec sp = make_spec(1, 1, 6, 2, 2);
  REQUIRE(sp.out_extent(640, 6) == 320);  // first backbone row: 640 -> 320
  ConvSpec sp2 = make_spec(1, 1, 3, 2, 1);
  REQUIRE(sp2.out_extent(7, 3) == 4);
  // non-integral extent is rejected, not rounded
  REQUIRE_THROWS(sp2.out_extent(8, 3));
  // kernel larger than padded input is rejected
  REQUIRE_THROWS(make_spec(1, 1, 9, 1, 0).out_extent(4, 9));
}

TEST_CASE("conv extent law holds across a parameter sweep") {
  for (int f : {1, 2, 3, 4, 5, 6})
    for (int p = 0; p <= 3; ++p)
      for (int s : {1, 2, 3})
        for (int h : {8, 12, 24, 48}) {
          int num = h - f + 2 * p;
          ConvSpec sp = make_spec(1, 1, f, s, p);
          if (num >= 0 && num % s == 0) {
            int ho = sp.out_extent(h, f);
            REQUIRE(ho == num / s + 1);
            Tensor x({1, 1, h, h}, 0.5);
            Tensor w({1, 1, f, f}, 0.1);
            Tensor y = conv2d(x, w, sp);
            REQUIRE(y.dim(2) == ho);
            REQUIRE(y.dim(3) == ho);
          } else {
            REQUIRE_THROWS(sp.out_extent(h, f));
          }
        }
}

TEST_CASE("identity kernel leaves the input unchanged") {
  std::mt19937_64 rng(3);
  Tensor x = oracle::random_tensor({1, 2, 5, 4}, rng);
  Tensor w = Tensor::from({2, 2, 1, 1}, {1.0, 0.0, 0.0, 1.0});
  Tensor y = conv2d(x, w, make_spec(2, 2, 1, 1, 0));
  for (int64_t i = 0; i < x.size(); ++i) REQUIRE(y[i] == x[i]);
}

TEST_CASE("conv values match a nested-loop evaluation (7 -> 4 case and others)") {
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    std::mt19937_64 rng(seed);
    Tensor x = oracle::random_tensor({2, 3, 7, 7}, rng);
    Tensor w = oracle::random_tensor({4, 3, 3, 3}, rng);
    Tensor b = oracle::random_tensor({4}, rng);
    ConvSpec sp = make_spec(3, 4, 3, 2, 1);
    Tensor got = conv2d(x, w, sp, b);
    Tensor want = oracle::conv_nested(x, w, sp, b);
    REQUIRE(got.dim(2) == 4);
    REQUIRE(got.shape() == want.shape());
    for (int64_t i = 0; i < got.size(); ++i)
      REQUIRE(got[i] == Catch::Approx(want[i]).margin(1e-12));
  }
}

TEST_CASE("conv rejects shape mismatches with a diagnostic naming both shapes") {
  Tensor x({1, 3, 8, 8});
  Tensor w({4, 2, 3, 3});  // wrong input-channel count
  try {
    conv2d(x, w, make_spec(3, 4, 3, 1, 1));
    FAIL("expected rejection");
  } catch (const std::exception& e) {
    std::string msg = e.what();
    REQUIRE(msg.find("(4,2,3,3)") != std::string::npos);
  }
  Tensor w2({4, 3, 3, 3});
  Tensor x2({1, 2, 8, 8});
  REQUIRE_THROWS(conv2d(x2, w2, make_spec(3, 4, 3, 1, 1)));
}

TEST_CASE("conv gradients pass finite differences") {
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    std::mt19937_64 rng(seed * 7);
    Tensor x = oracle::random_tensor({1, 2, 7, 7}, rng);
    Tensor w = oracle::random_tensor({3, 2, 3, 3}, rng);
    Tensor b = oracle::random_tensor({3}, rng);
    ConvSpec sp = make_spec(2, 3, 3, 2, 1);
    REQUIRE(oracle::fd_max_rel_err(
                [&] { return sum(mul(conv2d(x, w, sp, b), conv2d(x, w, sp, b))); },
                {x, w, b}) < 1e-4);
  }
}

// ---------------------------------------------------------------------------
// Pooling

TEST_CASE("global average pool on constant channels") {
  Tensor x({1, 2, 3, 3});
  for (int i = 0; i < 9; ++i) x[i] = 2.0;
  for (int i = 9; i < 18; ++i) x[i] = -1.0;
  Tensor y = pool_global_avg(x);
  REQUIRE(y.shape() == Shape{1, 2});
  REQUIRE(y[0] == 2.0);
  REQUIRE(y[1] == -1.0);
  // single pixel per channel: identity
  Tensor one = Tensor::from({1, 2, 1, 1}, {5.0, -3.0});
  Tensor ypix = pool_global_avg(one);
  REQUIRE(ypix[0] == 5.0);
  REQUIRE(ypix[1] == -3.0);
}

TEST_CASE("global average pool matches a flat-sum oracle on random input") {
  std::mt19937_64 rng(17);
  Tensor x = oracle::random_tensor({2, 3, 4, 4}, rng);
  Tensor y = pool_global_avg(x);
  for (int p = 0; p < 6; ++p) {
    double acc = 0.0;
    for (int i = 0; i < 16; ++i) acc += x[p * 16 + i];
    REQUIRE(y[p] == Catch::Approx(acc / 16.0).epsilon(1e-12));
  }
  REQUIRE_THROWS(pool_global_avg(Tensor({1, 2, 0, 4})));
}

TEST_CASE("global max pool: value, gradient routing, and scan oracle") {
  Tensor x({1, 1, 2, 3});
  x[4] = 5.0;  // single 5.0 among zeros
  x.set_requires_grad(true);
  Tensor y = pool_global_max(x);
  REQUIRE(y[0] == 5.0);
  backward(sum(y));
  for (int i = 0; i < 6; ++i) REQUIRE(x.grad()[i] == (i == 4 ? 1.0 : 0.0));

  Tensor c({1, 1, 3, 3}, 1.25);  // constant channel
  REQUIRE(pool_global_max(c)[0] == 1.25);

  std::mt19937_64 rng(23);
  Tensor r = oracle::random_tensor({2, 2, 3, 5}, rng);
  Tensor m = pool_global_max(r);
  for (int p = 0; p < 4; ++p) {
    double best = -1e300;
    for (int i = 0; i < 15; ++i) best = std::max(best, r[p * 15 + i]);
    REQUIRE(m[p] == best);
  }
}

TEST_CASE("max pool gradient ties break to the first occurrence in row-major order") {
  Tensor x({1, 1, 2, 2}, 3.0);  // all equal
  x.set_requires_grad(true);
  backward(sum(pool_global_max(x)));
  REQUIRE(x.grad()[0] == 1.0);
  REQUIRE(x.grad()[1] == 0.0);
  REQUIRE(x.grad()[2] == 0.0);
  REQUIRE(x.grad()[3] == 0.0);
}

TEST_CASE("windowed max pool matches direct evaluation and checks arguments") {
  std::mt19937_64 rng(29);
  Tensor x = oracle::random_tensor({1, 2, 5, 5}, rng);
  Tensor y = max_pool2d(x, 5, 1, 2);
  REQUIRE(y.shape() == x.shape());
  // center output of each channel is the max over the full 5x5 window
  for (int c = 0; c < 2; ++c) {
    double best = -1e300;
    for (int i = 0; i < 25; ++i) best = std::max(best, x[c * 25 + i]);
    REQUIRE(y[c * 25 + 12] == best);
  }
  REQUIRE_THROWS(max_pool2d(x, 3, 1, 3));  // padding must stay below kernel
}

TEST_CASE("channel-wise pools and their gradients") {
  std::mt19937_64 rng(31);
  Tensor x = oracle::random_tensor({1, 3, 2, 2}, rng);
  Tensor avg = pool_channel_avg(x);
  Tensor mx = pool_channel_max(x);
  REQUIRE(avg.shape() == Shape{1, 1, 2, 2});
  for (int i = 0; i < 4; ++i) {
    double a = (x[i] + x[4 + i] + x[8 + i]) / 3.0;
    double m = std::max({x[i], x[4 + i], x[8 + i]});
    REQUIRE(avg[i] == Catch::Approx(a).epsilon(1e-12));
    REQUIRE(mx[i] == m);
  }
  REQUIRE(oracle::fd_max_rel_err([&] { return sum(mul(pool_channel_avg(x), pool_channel_avg(x))); },
                                 {x}) < 1e-4);
  REQUIRE(oracle::fd_max_rel_err([&] { return sum(mul(pool_global_avg(x), pool_global_avg(x))); },
                                 {x}) < 1e-4);
}

TEST_CASE("nearest upsampling repeats pixels and routes gradients back") {
  Tensor x = Tensor::from({1, 1, 2, 2}, {1.0, 2.0, 3.0, 4.0}, true);
  Tensor y = upsample_nearest(x, 2);
  REQUIRE(y.shape() == Shape{1, 1, 4, 4});
  REQUIRE(y[0] == 1.0);
  REQUIRE(y[1] == 1.0);
  REQUIRE(y[3] == 2.0);
  REQUIRE(y[15] == 4.0);
  backward(sum(y));
  for (int i = 0; i < 4; ++i) REQUIRE(x.grad()[i] == 4.0);
}

// ---------------------------------------------------------------------------
// Deformable convolution

TEST_CASE("deformable conv with zero offsets and unit modulation is bit-equal to conv2d") {
  std::mt19937_64 rng(41);
  Tensor x = oracle::random_tensor({1, 2, 6, 6}, rng);
  Tensor w = oracle::random_tensor({3, 2, 3, 3}, rng);
  Tensor b = oracle::random_tensor({3}, rng);
  ConvSpec sp = make_spec(2, 3, 3, 1, 1);
  Tensor off({1, 18, 6, 6}, 0.0);
  Tensor mod({1, 9, 6, 6}, 1.0);
  Tensor plain = conv2d(x, w, sp, b);
  Tensor deform = deform_conv2d(x, w, sp, off, mod, b);
  for (int64_t i = 0; i < plain.size(); ++i) REQUIRE(deform[i] == plain[i]);  // exact
}

TEST_CASE("integer offsets equal conv on the shifted input over the interior") {
  std::mt19937_64 rng(43);
  Tensor x = oracle::random_tensor({1, 1, 8, 8}, rng);
  Tensor w = oracle::random_tensor({1, 1, 3, 3}, rng);
  ConvSpec sp = make_spec(1, 1, 3, 1, 0);  // output 6x6, taps never leave the image interior
  Tensor off({1, 18, 6, 6}, 0.0);
  // every tap shifted by (dy=+1, dx=0)
  for (int t = 0; t < 9; ++t)
    for (int i = 0; i < 36; ++i) off[(int64_t)(2 * t) * 36 + i] = 1.0;
  Tensor mod({1, 9, 6, 6}, 1.0);
  Tensor got = deform_conv2d(x, w, sp, off, mod);
  // shift the input up by one pixel and convolve normally
  Tensor xs({1, 1, 8, 8}, 0.0);
  for (int y = 0; y < 7; ++y)
    for (int xx = 0; xx < 8; ++xx) xs[(int64_t)y * 8 + xx] = x[(int64_t)(y + 1) * 8 + xx];
  Tensor want = conv2d(xs, w, sp);
  for (int oy = 0; oy < 5; ++oy)  // last row samples the zeroed boundary; compare the interior
    for (int ox = 0; ox < 6; ++ox)
      REQUIRE(got[(int64_t)oy * 6 + ox] ==
              Catch::Approx(want[(int64_t)oy * 6 + ox]).margin(1e-12));
}

TEST_CASE("stride-2 deformable downsampling halves the 160x160 extent") {
  Tensor x({1, 1, 160, 160}, 0.25);
  Tensor w({1, 1, 2, 2}, 0.5);
  ConvSpec sp = make_spec(1, 1, 2, 2, 0);
  Tensor off({1, 8, 80, 80}, 0.0);
  Tensor mod({1, 4, 80, 80}, 1.0);
  Tensor y = deform_conv2d(x, w, sp, off, mod);
  REQUIRE(y.dim(2) == 80);
  REQUIRE(y.dim(3) == 80);
}

TEST_CASE("deformable conv gradients pass finite differences") {
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    std::mt19937_64 rng(seed * 13);
    Tensor x = oracle::random_tensor({1, 2, 5, 5}, rng);
    Tensor w = oracle::random_tensor({2, 2, 3, 3}, rng);
    ConvSpec sp = make_spec(2, 2, 3, 1, 1);
    // fractional offsets keep the bilinear weights away from integer kinks
    Tensor off = oracle::random_tensor({1, 18, 5, 5}, rng, 0.2, 0.45);
    Tensor mod = oracle::random_tensor({1, 9, 5, 5}, rng, 0.3, 0.9, false);
    REQUIRE(oracle::fd_max_rel_err(
                [&] { return sum(mul(deform_conv2d(x, w, sp, off, mod),
                                     deform_conv2d(x, w, sp, off, mod))); },
                {x, w, off, mod}) < 1e-4);
  }
}

TEST_CASE("deformable conv validates offset and modulation shapes") {
  Tensor x({1, 1, 4, 4});
  Tensor w({1, 1, 3, 3});
  ConvSpec sp = make_spec(1, 1, 3, 1, 1);
  REQUIRE_THROWS(deform_conv2d(x, w, sp, Tensor({1, 17, 4, 4}), Tensor({1, 9, 4, 4})));
  REQUIRE_THROWS(deform_conv2d(x, w, sp, Tensor({1, 18, 4, 4}), Tensor({1, 8, 4, 4})));
}
