#include <catch2/catch_amalgamated.hpp>

#include "aerolite/blocks.hpp"
#include "oracles.hpp"

using namespace aero;

TEST_CASE("channel attention with zero transform gives uniform 0.5 weights") {
  WeightInit init(1);
  CAConv block(2, 3, 3, 1, 1, init);
  for (int64_t i = 0; i < block.attn.w.size(); ++i) block.attn.w[i] = 0.0;
  for (int64_t i = 0; i < block.attn.b.size(); ++i) block.attn.b[i] = 0.0;
  std::mt19937_64 rng(2);
  Tensor x = oracle::random_tensor({1, 2, 4, 4}, rng);
  Tensor y = block.forward(x);
  Tensor plain = activate(conv2d(x, block.conv.w, block.conv.spec, block.conv.b), Act::SiLU);
  for (int64_t i = 0; i < y.size(); ++i)
    REQUIRE(y[i] == Catch::Approx(0.5 * plain[i]).margin(1e-12));
}

TEST_CASE("channel attention weights stay strictly inside (0,1)") {
  WeightInit init(3);
  ChannelAttention attn(4, 4);
  std::mt19937_64 rng(4);
  for (int64_t i = 0; i < attn.w.size(); ++i) attn.w[i] = 5.0 * ((double)(rng() % 7) - 3.0);
  Tensor x = oracle::random_tensor({2, 4, 3, 3}, rng);
  Tensor s = attn.weights(x);
  for (int64_t i = 0; i < s.size(); ++i) {
    REQUIRE(s[i] > 0.0);
    REQUIRE(s[i] < 1.0);
  }
}

TEST_CASE("channel attention argmax is invariant under a uniform bias shift") {
  WeightInit init(5);
  ChannelAttention attn(3, 3);
  std::mt19937_64 rng(6);
  for (int64_t i = 0; i < attn.w.size(); ++i) attn.w[i] = oracle::random_tensor({1}, rng)[0];
  Tensor x = oracle::random_tensor({1, 3, 4, 4}, rng);
  auto argmax = [](const Tensor& t) {
    int best = 0;
    for (int i = 1; i < (int)t.size(); ++i)
      if (t[i] > t[best]) best = i;
    return best;
  };
  int before = argmax(attn.weights(x));
  for (int64_t i = 0; i < attn.b.size(); ++i) attn.b[i] += 1.7;  // same constant on every channel
  int after = argmax(attn.weights(x));
  REQUIRE(before == after);
}

TEST_CASE("strided CA conv block downsamples per the extent law") {
  WeightInit init(7);
  CAConv stem(3, 8, 6, 2, 2, init);
  Tensor x({1, 3, 64, 64}, 0.5);
  Tensor y = stem.forward(x);
  REQUIRE(y.shape() == Shape{1, 8, 32, 32});  // same law that maps 640 -> 320
}

TEST_CASE("CA conv equals the hand-composed pipeline on random input") {
  WeightInit init(9);
  CAConv block(3, 4, 3, 2, 1, init);
  std::mt19937_64 rng(10);
  Tensor x = oracle::random_tensor({1, 3, 7, 7}, rng);
  Tensor y = block.forward(x);
  // GAP -> linear -> sigmoid -> scale the conv output, composed step by step
  Tensor gap = pool_global_avg(x);
  Tensor sc = sigmoid(linear(gap, block.attn.w, block.attn.b));
  Tensor conv = activate(conv2d(x, block.conv.w, block.conv.spec, block.conv.b), Act::SiLU);
  for (int c = 0; c < 4; ++c)
    for (int i = 0; i < 16; ++i)
      REQUIRE(y[c * 16 + i] == Catch::Approx(sc[c] * conv[c * 16 + i]).margin(1e-12));
}

TEST_CASE("spatial attention weights sum to one over spatial positions") {
  WeightInit init(11);
  SpatialAttention sattn(init);
  for (int64_t i = 0; i < sattn.reduce.w.size(); ++i) sattn.reduce.w[i] = 0.8 - 0.3 * i;
  std::mt19937_64 rng(12);
  Tensor x = oracle::random_tensor({2, 3, 4, 5}, rng);
  Tensor wmap = sattn.weights(x);
  REQUIRE(wmap.shape() == Shape{2, 1, 4, 5});
  for (int b = 0; b < 2; ++b) {
    double acc = 0.0;
    for (int i = 0; i < 20; ++i) {
      REQUIRE(wmap[b * 20 + i] >= 0.0);
      acc += wmap[b * 20 + i];
    }
    REQUIRE(acc == Catch::Approx(1.0).margin(1e-6));
  }
}

TEST_CASE("constant map gives equal average and max channel summaries") {
  // the 2-channel concat feeding spatial attention is [c, c] on a constant map
  Tensor x({1, 3, 4, 4}, 2.5);
  Tensor avg = pool_channel_avg(x);
  Tensor mx = pool_channel_max(x);
  for (int i = 0; i < 16; ++i) {
    REQUIRE(avg[i] == 2.5);
    REQUIRE(mx[i] == 2.5);
  }
}

TEST_CASE("SCA block preserves spatial extents and matches its sub-block composition") {
  WeightInit init(13);
  SCAC3 block(6, 6, init);
  std::mt19937_64 rng(14);
  Tensor x = oracle::random_tensor({1, 6, 5, 5}, rng);
  Tensor y = block.forward(x);
  REQUIRE(y.shape() == Shape{1, 6, 5, 5});

  // recompose from independently exercised pieces
  Tensor a = block.cv1.forward(x);
  for (const auto& bn : block.bneck) a = bn.forward(a);
  Tensor merged = block.cv3.forward(concat_channels({a, block.cv2.forward(x)}));
  Tensor ca = mul(merged, reshape(sigmoid(linear(pool_global_avg(merged), block.cattn.w,
                                                 block.cattn.b)),
                                  {1, 6, 1, 1}));
  Tensor want = block.sattn.apply(ca);
  for (int64_t i = 0; i < y.size(); ++i) REQUIRE(y[i] == Catch::Approx(want[i]).margin(1e-12));
}

TEST_CASE("SCA block rejects channel mismatches") {
  WeightInit init(15);
  SCAC3 block(6, 6, init);
  REQUIRE_THROWS(block.forward(Tensor({1, 4, 5, 5})));
}

TEST_CASE("serial pooling pyramid equals the parallel 5/9/13 formulation") {
  WeightInit init(17);
  SPPF sppf(8, 8, init);
  std::mt19937_64 rng(18);
  Tensor x = oracle::random_tensor({1, 8, 9, 9}, rng);
  Tensor y = sppf.forward(x);
  REQUIRE(y.shape() == Shape{1, 8, 9, 9});
  // three serial k=5 s=1 pools equal parallel pools with kernels 5, 9, 13
  Tensor a = sppf.cv1.forward(x);
  Tensor p5 = max_pool2d(a, 5, 1, 2);
  Tensor p9 = max_pool2d(a, 9, 1, 4);
  Tensor p13 = max_pool2d(a, 13, 1, 6);
  Tensor want = sppf.cv2.forward(concat_channels({a, p5, p9, p13}));
  for (int64_t i = 0; i < y.size(); ++i) REQUIRE(y[i] == Catch::Approx(want[i]).margin(1e-12));
}

TEST_CASE("pooling a constant map returns the same constant at every stage") {
  Tensor c({1, 2, 6, 6}, 0.75);
  Tensor p1 = max_pool2d(c, 5, 1, 2);
  Tensor p2 = max_pool2d(p1, 5, 1, 2);
  for (int64_t i = 0; i < p2.size(); ++i) REQUIRE(p2[i] == 0.75);
}

TEST_CASE("deformable block starts as a plain strided conv when modulation saturates") {
  WeightInit init(19);
  DeformConv d(3, 4, 2, 2, 0, init);
  // push the modulation gate to exactly 1.0 in double precision
  for (int64_t i = 0; i < d.mod_pred.b.size(); ++i) d.mod_pred.b[i] = 100.0;
  std::mt19937_64 rng(20);
  Tensor x = oracle::random_tensor({1, 3, 8, 8}, rng);
  Tensor y = d.forward(x);
  Tensor plain = activate(conv2d(x, d.w, d.spec, d.b), Act::SiLU);
  REQUIRE(y.shape() == Shape{1, 4, 4, 4});
  for (int64_t i = 0; i < y.size(); ++i) REQUIRE(y[i] == plain[i]);  // offsets are zero at init
}

TEST_CASE("block gradients pass finite differences") {
  WeightInit init(21);
  SCAC3 block(4, 4, init);
  std::mt19937_64 rng(22);
  Tensor x = oracle::random_tensor({1, 4, 4, 4}, rng);
  std::vector<Tensor> leaves = {x};
  ParamList params;
  block.collect("b", params);
  for (auto& p : params) leaves.push_back(p.tensor);
  REQUIRE(oracle::fd_max_rel_err([&] { return sum(mul(block.forward(x), block.forward(x))); },
                                 leaves, 1e-3, 8) < 1e-4);

  WeightInit init2(23);
  CAConv ca(3, 3, 3, 1, 1, init2);
  Tensor x2 = oracle::random_tensor({1, 3, 4, 4}, rng);
  std::vector<Tensor> leaves2 = {x2};
  ParamList params2;
  ca.collect("c", params2);
  for (auto& p : params2) leaves2.push_back(p.tensor);
  REQUIRE(oracle::fd_max_rel_err([&] { return sum(mul(ca.forward(x2), ca.forward(x2))); },
                                 leaves2, 1e-3, 8) < 1e-4);
}

TEST_CASE("parameter counting sums every tensor once") {
  WeightInit init(25);
  ConvBlock cb(2, 3, 3, 1, 1, init);
  ParamList pl;
  cb.collect("x", pl);
  REQUIRE(param_count(pl) == 3 * 2 * 3 * 3 + 3);
}
