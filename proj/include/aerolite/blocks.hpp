#pragma once

// Reusable network blocks: CA_Conv (channel-attention conv), SCA_C3
// (split/bottleneck/merge with channel + spatial attention), SPPF, and a
// modulated deformable conv block.

#include <random>

#include "aerolite/conv.hpp"
#include "aerolite/tensor.hpp"

namespace aero {

struct ParamRef {
  std::string name;
  Tensor tensor;
};
using ParamList = std::vector<ParamRef>;

inline int64_t param_count(const ParamList& params) {
  int64_t n = 0;
  for (const auto& p : params) n += p.tensor.size();
  return n;
}

// Seeded weight initializer. Draws are derived directly from the raw engine
// output so results do not depend on libstdc++ distribution internals.
class WeightInit {
 public:
  explicit WeightInit(uint64_t seed) : rng_(seed) {}

  double uniform(double lo, double hi) {
    double u = (double)(rng_() >> 11) * (1.0 / 9007199254740992.0);  // [0,1)
    return lo + u * (hi - lo);
  }

  void kaiming(Tensor& w, int64_t fan_in) {
    double bound = std::sqrt(6.0 / (double)std::max<int64_t>(1, fan_in));
    for (int64_t i = 0; i < w.size(); ++i) w[i] = uniform(-bound, bound);
  }

 private:
  std::mt19937_64 rng_;
};

enum class Act { Linear, SiLU, ReLU, Sigmoid };

inline Tensor activate(const Tensor& x, Act act) {
  switch (act) {
    case Act::SiLU: return silu(x);
    case Act::ReLU: return relu(x);
    case Act::Sigmoid: return sigmoid(x);
    default: return x;
  }
}

struct ConvBlock {
  ConvSpec spec;
  Tensor w, b;
  Act act = Act::SiLU;

  ConvBlock() = default;
  ConvBlock(int cin, int cout, int k, int stride, int pad, WeightInit& init,
            Act act = Act::SiLU)
      : act(act) {
    spec.in_channels = cin;
    spec.out_channels = cout;
    spec.kernel_h = spec.kernel_w = k;
    spec.stride = stride;
    spec.padding = pad;
    w = Tensor({cout, cin, k, k}, 0.0, true);
    b = Tensor({cout}, 0.0, true);
    init.kaiming(w, (int64_t)cin * k * k);
  }

  Tensor forward(const Tensor& x) const { return activate(conv2d(x, w, spec, b), act); }

  void collect(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + ".w", w});
    out.push_back({prefix + ".b", b});
  }
};

// Channel attention of a CA_Conv / SCA block: S_c = sigmoid(W * GAP(x) + b).
// Zero W and b give S_c = 0.5 for every channel.
struct ChannelAttention {
  Tensor w, b;  // (c_out x c_in), (c_out)

  ChannelAttention() = default;
  // The gate bias starts at +3 (sigmoid ~ 0.95) so stacked attention blocks do
  // not attenuate activations at initialization; there is no normalization
  // layer to re-amplify them.
  ChannelAttention(int cin, int cout) {
    w = Tensor({cout, cin}, 0.0, true);
    b = Tensor({cout}, 3.0, true);
  }

  // N,C_in,H,W -> attention weights N,C_out in (0,1).
  Tensor weights(const Tensor& x) const { return sigmoid(linear(pool_global_avg(x), w, b)); }

  // Scales feature map y (N,C_out,H,W) by weights computed from x.
  Tensor apply(const Tensor& x, const Tensor& y) const {
    Tensor sc = weights(x);
    return mul(y, reshape(sc, {y.dim(0), y.dim(1), 1, 1}));
  }

  void collect(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + ".w", w});
    out.push_back({prefix + ".b", b});
  }
};

// Spatial attention: channel-avg and channel-max maps are concatenated,
// reduced to one channel by a 1x1 conv, and passed through a softmax over all
// spatial positions, so the weight map sums to 1 over H*W. The map is applied
// scaled by H*W so that a uniform attention map is the identity.
struct SpatialAttention {
  ConvBlock reduce;

  SpatialAttention() = default;
  explicit SpatialAttention(WeightInit& init) : reduce(2, 1, 1, 1, 0, init, Act::Linear) {}

  Tensor weights(const Tensor& x) const {
    Tensor v = concat_channels({pool_channel_avg(x), pool_channel_max(x)});
    return softmax_spatial(reduce.forward(v));
  }

  Tensor apply(const Tensor& x) const {
    Tensor ss = weights(x);
    double hw = (double)x.dim(2) * x.dim(3);
    return mul(x, scale(ss, hw));
  }

  void collect(const std::string& prefix, ParamList& out) const {
    reduce.collect(prefix + ".reduce", out);
  }
};

struct Bottleneck {
  ConvBlock cv1, cv2;

  Bottleneck() = default;
  Bottleneck(int c, WeightInit& init)
      : cv1(c, c, 1, 1, 0, init), cv2(c, c, 3, 1, 1, init) {}

  Tensor forward(const Tensor& x) const { return add(x, cv2.forward(cv1.forward(x))); }

  void collect(const std::string& prefix, ParamList& out) const {
    cv1.collect(prefix + ".cv1", out);
    cv2.collect(prefix + ".cv2", out);
  }
};

// CA_Conv: strided conv followed by channel-attention scaling computed from
// the block input. Spatial extents follow (H - f + 2P)/S + 1.
struct CAConv {
  ConvBlock conv;
  ChannelAttention attn;

  CAConv() = default;
  CAConv(int cin, int cout, int k, int stride, int pad, WeightInit& init)
      : conv(cin, cout, k, stride, pad, init), attn(cin, cout) {}

  Tensor forward(const Tensor& x) const { return attn.apply(x, conv.forward(x)); }

  void collect(const std::string& prefix, ParamList& out) const {
    conv.collect(prefix + ".conv", out);
    attn.collect(prefix + ".attn", out);
  }
};

// SCA_C3: C3 split/bottleneck/merge, channel attention on the merged features,
// then spatial attention. Spatial extents are preserved.
struct SCAC3 {
  ConvBlock cv1, cv2, cv3;
  std::vector<Bottleneck> bneck;
  ChannelAttention cattn;
  SpatialAttention sattn;

  SCAC3() = default;
  SCAC3(int cin, int cout, WeightInit& init, int depth = 1) {
    int ch = std::max(1, cout / 2);
    cv1 = ConvBlock(cin, ch, 1, 1, 0, init);
    cv2 = ConvBlock(cin, ch, 1, 1, 0, init);
    cv3 = ConvBlock(2 * ch, cout, 1, 1, 0, init);
    for (int i = 0; i < depth; ++i) bneck.emplace_back(ch, init);
    cattn = ChannelAttention(cout, cout);
    sattn = SpatialAttention(init);
  }

  Tensor forward(const Tensor& x) const {
    Tensor a = cv1.forward(x);
    for (const auto& bn : bneck) a = bn.forward(a);
    Tensor merged = cv3.forward(concat_channels({a, cv2.forward(x)}));
    Tensor y = cattn.apply(merged, merged);
    return sattn.apply(y);
  }

  void collect(const std::string& prefix, ParamList& out) const {
    cv1.collect(prefix + ".cv1", out);
    cv2.collect(prefix + ".cv2", out);
    cv3.collect(prefix + ".cv3", out);
    for (size_t i = 0; i < bneck.size(); ++i)
      bneck[i].collect(prefix + ".bneck" + std::to_string(i), out);
    cattn.collect(prefix + ".cattn", out);
    sattn.collect(prefix + ".sattn", out);
  }
};

// SPPF: three serial stride-1 max pools (kernel 5, padding 2) concatenated
// with the input and fused by a 1x1 conv. Equivalent to parallel 5/9/13 SPP.
struct SPPF {
  ConvBlock cv1, cv2;
  int kernel = 5;

  SPPF() = default;
  SPPF(int cin, int cout, WeightInit& init, int kernel = 5) : kernel(kernel) {
    int ch = std::max(1, cin / 2);
    cv1 = ConvBlock(cin, ch, 1, 1, 0, init);
    cv2 = ConvBlock(4 * ch, cout, 1, 1, 0, init);
  }

  Tensor forward(const Tensor& x) const {
    Tensor a = cv1.forward(x);
    int pad = kernel / 2;
    Tensor p1 = max_pool2d(a, kernel, 1, pad);
    Tensor p2 = max_pool2d(p1, kernel, 1, pad);
    Tensor p3 = max_pool2d(p2, kernel, 1, pad);
    return cv2.forward(concat_channels({a, p1, p2, p3}));
  }

  void collect(const std::string& prefix, ParamList& out) const {
    cv1.collect(prefix + ".cv1", out);
    cv2.collect(prefix + ".cv2", out);
  }
};

// Deformable conv block (DCNv2 rows of the backbone). Offset and modulation
// predictors share the base conv stride so their maps align with the output.
// Predictors start at zero, so the block begins as a plain strided conv with
// 0.5 modulation.
struct DeformConv {
  ConvSpec spec;
  Tensor w, b;
  ConvBlock offset_pred, mod_pred;
  Act act = Act::SiLU;

  DeformConv() = default;
  DeformConv(int cin, int cout, int k, int stride, int pad, WeightInit& init) {
    spec.in_channels = cin;
    spec.out_channels = cout;
    spec.kernel_h = spec.kernel_w = k;
    spec.stride = stride;
    spec.padding = pad;
    w = Tensor({cout, cin, k, k}, 0.0, true);
    b = Tensor({cout}, 0.0, true);
    init.kaiming(w, (int64_t)cin * k * k);
    offset_pred = ConvBlock(cin, 2 * k * k, k, stride, pad, init, Act::Linear);
    mod_pred = ConvBlock(cin, k * k, k, stride, pad, init, Act::Sigmoid);
    // start as (nearly) a regular conv: zero offsets, near-unit modulation
    for (int64_t i = 0; i < offset_pred.w.size(); ++i) offset_pred.w[i] = 0.0;
    for (int64_t i = 0; i < mod_pred.w.size(); ++i) mod_pred.w[i] = 0.0;
    for (int64_t i = 0; i < mod_pred.b.size(); ++i) mod_pred.b[i] = 3.0;
  }

  Tensor forward(const Tensor& x) const {
    Tensor off = offset_pred.forward(x);
    Tensor mod = mod_pred.forward(x);
    return activate(deform_conv2d(x, w, spec, off, mod, b), act);
  }

  void collect(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + ".w", w});
    out.push_back({prefix + ".b", b});
    offset_pred.collect(prefix + ".offset", out);
    mod_pred.collect(prefix + ".mod", out);
  }
};

}  // namespace aero
