#pragma once

// AeroLite-MDNet assembly: backbone (CA_Conv / DCNv2 / SCA_C3 / SPPF), a
// top-down + bottom-up path-aggregation neck with SCA_C3 fusion blocks, an
// anchor-based detection head on the P3/P4/P5 pyramid, and a pixel-decoder
// segmentation head emitting a 1/8-scale class logit map.

#include <array>
#include <map>

#include "aerolite/blocks.hpp"
#include "aerolite/detect.hpp"

namespace aero {

struct AnchorPair {
  double w = 0, h = 0;
};

struct ModelConfig {
  int input_size = 640;
  double width = 1.0;  // channel multiplier on the base widths {32,64,128,256,512}
  int num_classes = 3;
  int bottleneck_depth = 1;
  std::array<int, 3> strides{8, 16, 32};
  // three anchors per detection layer, smallest scale first
  std::array<std::array<AnchorPair, 3>, 3> anchors{{
      {{{10, 13}, {16, 30}, {33, 23}}},
      {{{30, 61}, {62, 45}, {59, 119}}},
      {{{116, 90}, {156, 198}, {373, 326}}},
  }};
  double conf_threshold = 0.25;
  double nms_iou = 0.45;

  static constexpr int kNumLayers = 3;

  void validate() const {
    AERO_CHECK(input_size > 0 && input_size % 32 == 0,
               "ModelConfig: input_size " << input_size << " must be divisible by 32");
    AERO_CHECK(width > 0, "ModelConfig: width must be positive");
    AERO_CHECK(num_classes > 0, "ModelConfig: num_classes must be positive");
  }

  int ch(int base) const { return std::max(2, (int)std::lround(base * width)); }
  int det_channels() const { return 3 * (5 + num_classes); }
};

struct FeaturePyramid {
  Tensor p3, p4, p5;  // 1/8, 1/16, 1/32 scale
};

struct RawPredictions {
  std::vector<Tensor> det;  // per scale: N, 3*(5+Nc), H, W
  Tensor seg_logits;        // N, Nc, H/8, W/8
};

struct ForwardResult {
  std::vector<std::pair<std::string, Shape>> backbone_trace;
  FeaturePyramid pyramid;
  RawPredictions raw;
};

class Model {
 public:
  Model() = default;
  explicit Model(const ModelConfig& cfg, uint64_t seed = 0) : cfg_(cfg) {
    cfg_.validate();
    WeightInit init(seed);
    int c1 = cfg_.ch(32), c2 = cfg_.ch(64), c3 = cfg_.ch(128), c4 = cfg_.ch(256),
        c5 = cfg_.ch(512);
    stem_ = CAConv(3, c1, 6, 2, 2, init);
    d1_ = DeformConv(c1, c2, 2, 2, 0, init);
    s1_ = SCAC3(c2, c2, init, cfg_.bottleneck_depth);
    d2_ = DeformConv(c2, c3, 2, 2, 0, init);
    s2_ = SCAC3(c3, c3, init, cfg_.bottleneck_depth);
    d3_ = DeformConv(c3, c4, 2, 2, 0, init);
    s3_ = SCAC3(c4, c4, init, cfg_.bottleneck_depth);
    d4_ = DeformConv(c4, c5, 2, 2, 0, init);
    s4_ = SCAC3(c5, c5, init, cfg_.bottleneck_depth);
    sppf_ = SPPF(c5, c5, init);

    lat5_ = ConvBlock(c5, c4, 1, 1, 0, init);
    fuse4_ = SCAC3(2 * c4, c4, init, cfg_.bottleneck_depth);
    lat4_ = ConvBlock(c4, c3, 1, 1, 0, init);
    fuse3_ = SCAC3(2 * c3, c3, init, cfg_.bottleneck_depth);
    down3_ = ConvBlock(c3, c3, 4, 2, 1, init);
    fuse4b_ = SCAC3(2 * c3, c4, init, cfg_.bottleneck_depth);
    down4_ = ConvBlock(c4, c4, 4, 2, 1, init);
    fuse5b_ = SCAC3(2 * c4, c5, init, cfg_.bottleneck_depth);

    int dc = cfg_.det_channels();
    det3_ = ConvBlock(c3, dc, 1, 1, 0, init, Act::Linear);
    det4_ = ConvBlock(c4, dc, 1, 1, 0, init, Act::Linear);
    det5_ = ConvBlock(c5, dc, 1, 1, 0, init, Act::Linear);
    // objectness/class biases start at a low prior (p ~ 0.01) so the focal
    // term over the overwhelmingly negative anchors is small at init
    double prior = std::log(0.01 / 0.99);
    int per = 5 + cfg_.num_classes;
    for (ConvBlock* head : {&det3_, &det4_, &det5_})
      for (int a = 0; a < 3; ++a)
        for (int k = 4; k < per; ++k) head->b[a * per + k] = prior;

    seg_lat5_ = ConvBlock(c5, c3, 1, 1, 0, init);
    seg_lat4_ = ConvBlock(c4, c3, 1, 1, 0, init);
    seg_lat3_ = ConvBlock(c3, c3, 1, 1, 0, init);
    seg_fuse4_ = ConvBlock(c3, c3, 3, 1, 1, init);
    seg_fuse3_ = ConvBlock(c3, c3, 3, 1, 1, init);
    seg_out_ = ConvBlock(c3, cfg_.num_classes, 1, 1, 0, init, Act::Linear);
    // mostly-background prior for the segmentation logits
    for (int c = 0; c < cfg_.num_classes; ++c) seg_out_.b[c] = -2.0;
  }

  const ModelConfig& config() const { return cfg_; }

  ForwardResult forward(const Tensor& image) const {
    AERO_CHECK(image.ndim() == 4 && image.dim(1) == 3,
               "forward: expected N,3,H,W image, got " << shape_str(image.shape()));
    AERO_CHECK(image.dim(2) == cfg_.input_size && image.dim(3) == cfg_.input_size,
               "forward: input " << shape_str(image.shape()) << " does not match configured size "
                                 << cfg_.input_size << " (no implicit resize)");
    ForwardResult r;
    auto trace = [&r](const char* op, const Tensor& t) {
      r.backbone_trace.emplace_back(op, t.shape());
    };

    Tensor x = stem_.forward(image);
    trace("CA_Conv", x);
    x = d1_.forward(x);
    trace("DCNv2", x);
    x = s1_.forward(x);
    trace("SCA_C3", x);
    x = d2_.forward(x);
    trace("DCNv2", x);
    Tensor b3 = s2_.forward(x);
    trace("SCA_C3", b3);
    x = d3_.forward(b3);
    trace("DCNv2", x);
    Tensor b4 = s3_.forward(x);
    trace("SCA_C3", b4);
    x = d4_.forward(b4);
    trace("DCNv2", x);
    x = s4_.forward(x);
    trace("SCA_C3", x);
    Tensor b5 = sppf_.forward(x);
    trace("SPPF", b5);

    Tensor x5 = lat5_.forward(b5);
    Tensor t4 = fuse4_.forward(concat_channels({upsample_nearest(x5, 2), b4}));
    Tensor x4 = lat4_.forward(t4);
    Tensor p3 = fuse3_.forward(concat_channels({upsample_nearest(x4, 2), b3}));
    Tensor p4 = fuse4b_.forward(concat_channels({down3_.forward(p3), x4}));
    Tensor p5 = fuse5b_.forward(concat_channels({down4_.forward(p4), x5}));
    r.pyramid = {p3, p4, p5};

    r.raw.det = {det3_.forward(p3), det4_.forward(p4), det5_.forward(p5)};

    Tensor s5 = seg_lat5_.forward(p5);
    Tensor s4f = seg_fuse4_.forward(add(upsample_nearest(s5, 2), seg_lat4_.forward(p4)));
    Tensor s3f = seg_fuse3_.forward(add(upsample_nearest(s4f, 2), seg_lat3_.forward(p3)));
    r.raw.seg_logits = seg_out_.forward(s3f);
    return r;
  }

  ParamList params() const {
    ParamList out;
    stem_.collect("backbone.stem", out);
    d1_.collect("backbone.d1", out);
    s1_.collect("backbone.s1", out);
    d2_.collect("backbone.d2", out);
    s2_.collect("backbone.s2", out);
    d3_.collect("backbone.d3", out);
    s3_.collect("backbone.s3", out);
    d4_.collect("backbone.d4", out);
    s4_.collect("backbone.s4", out);
    sppf_.collect("backbone.sppf", out);
    lat5_.collect("neck.lat5", out);
    fuse4_.collect("neck.fuse4", out);
    lat4_.collect("neck.lat4", out);
    fuse3_.collect("neck.fuse3", out);
    down3_.collect("neck.down3", out);
    fuse4b_.collect("neck.fuse4b", out);
    down4_.collect("neck.down4", out);
    fuse5b_.collect("neck.fuse5b", out);
    det3_.collect("head.det3", out);
    det4_.collect("head.det4", out);
    det5_.collect("head.det5", out);
    seg_lat5_.collect("head.seg_lat5", out);
    seg_lat4_.collect("head.seg_lat4", out);
    seg_lat3_.collect("head.seg_lat3", out);
    seg_fuse4_.collect("head.seg_fuse4", out);
    seg_fuse3_.collect("head.seg_fuse3", out);
    seg_out_.collect("head.seg_out", out);
    return out;
  }

  int64_t parameter_count() const { return param_count(params()); }

  // Analytic multiply-add count of all conv and linear layers for one forward
  // pass (per conv: k*k*Cin*Cout*Hout*Wout). Sampling arithmetic of the
  // deformable taps is not included.
  int64_t analytic_macs() const {
    int64_t macs = 0;
    int s = cfg_.input_size;
    auto conv_macs = [&macs](const ConvBlock& cb, int in) {
      int out = cb.spec.out_extent(in, cb.spec.kernel_h);
      macs += (int64_t)cb.spec.kernel_h * cb.spec.kernel_w * cb.spec.in_channels *
              cb.spec.out_channels * out * out;
      return out;
    };
    auto ca_macs = [&](const CAConv& b, int in) {
      int out = conv_macs(b.conv, in);
      macs += (int64_t)b.attn.w.dim(0) * b.attn.w.dim(1);
      return out;
    };
    auto dcn_macs = [&](const DeformConv& b, int in) {
      int out = b.spec.out_extent(in, b.spec.kernel_h);
      macs += (int64_t)b.spec.kernel_h * b.spec.kernel_w * b.spec.in_channels *
              b.spec.out_channels * out * out;
      conv_macs(b.offset_pred, in);
      conv_macs(b.mod_pred, in);
      return out;
    };
    auto c3_macs = [&](const SCAC3& b, int in) {
      conv_macs(b.cv1, in);
      conv_macs(b.cv2, in);
      for (const auto& bn : b.bneck) {
        conv_macs(bn.cv1, in);
        conv_macs(bn.cv2, in);
      }
      conv_macs(b.cv3, in);
      macs += (int64_t)b.cattn.w.dim(0) * b.cattn.w.dim(1);
      conv_macs(b.sattn.reduce, in);
      return in;
    };
    auto sppf_macs = [&](const SPPF& b, int in) {
      conv_macs(b.cv1, in);
      conv_macs(b.cv2, in);
      return in;
    };
    int e = ca_macs(stem_, s);
    e = dcn_macs(d1_, e);
    e = c3_macs(s1_, e);
    e = dcn_macs(d2_, e);
    int e8 = c3_macs(s2_, e);
    e = dcn_macs(d3_, e8);
    int e16 = c3_macs(s3_, e);
    e = dcn_macs(d4_, e16);
    e = c3_macs(s4_, e);
    int e32 = sppf_macs(sppf_, e);

    conv_macs(lat5_, e32);
    c3_macs(fuse4_, e16);
    conv_macs(lat4_, e16);
    c3_macs(fuse3_, e8);
    conv_macs(down3_, e8);
    c3_macs(fuse4b_, e16);
    conv_macs(down4_, e16);
    c3_macs(fuse5b_, e32);

    conv_macs(det3_, e8);
    conv_macs(det4_, e16);
    conv_macs(det5_, e32);
    conv_macs(seg_lat5_, e32);
    conv_macs(seg_lat4_, e16);
    conv_macs(seg_lat3_, e8);
    conv_macs(seg_fuse4_, e16);
    conv_macs(seg_fuse3_, e8);
    conv_macs(seg_out_, e8);
    return macs;
  }

 private:
  ModelConfig cfg_;
  CAConv stem_;
  DeformConv d1_, d2_, d3_, d4_;
  SCAC3 s1_, s2_, s3_, s4_;
  SPPF sppf_;
  ConvBlock lat5_, lat4_, down3_, down4_;
  SCAC3 fuse4_, fuse3_, fuse4b_, fuse5b_;
  ConvBlock det3_, det4_, det5_;
  ConvBlock seg_lat5_, seg_lat4_, seg_lat3_, seg_fuse4_, seg_fuse3_, seg_out_;
};

// ---------------------------------------------------------------------------
// Decoding

// Decode law: center = (2*sigmoid(t) - 0.5 + grid) * stride,
//             size   = (2*sigmoid(t))^2 * anchor.
// With all-zero logits a candidate sits at its cell center with its anchor size.
inline double sigmoid_scalar(double v) {
  return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
}

inline std::vector<DetectionBox> decode_detections(const ModelConfig& cfg,
                                                   const RawPredictions& raw,
                                                   double conf_threshold, double nms_iou,
                                                   int batch_index = 0) {
  AERO_CHECK(conf_threshold >= 0.0 && conf_threshold <= 1.0 && nms_iou >= 0.0 && nms_iou <= 1.0,
             "decode_detections: thresholds must lie in [0,1]");
  AERO_CHECK(raw.det.size() == 3, "decode_detections: expected 3 detection scales");
  int nc = cfg.num_classes;
  int per = 5 + nc;
  std::vector<DetectionBox> cands;
  for (int s = 0; s < 3; ++s) {
    const Tensor& t = raw.det[s];
    AERO_CHECK(t.dim(1) == 3 * per, "decode_detections: scale " << s << " has " << t.dim(1)
                                                                << " channels, expected "
                                                                << 3 * per);
    int h = t.dim(2), w = t.dim(3);
    int64_t hw = (int64_t)h * w;
    double stride = cfg.strides[s];
    const double* base = t.data() + (int64_t)batch_index * t.dim(1) * hw;
    for (int a = 0; a < 3; ++a) {
      const AnchorPair& anc = cfg.anchors[s][a];
      for (int gy = 0; gy < h; ++gy)
        for (int gx = 0; gx < w; ++gx) {
          int64_t pix = (int64_t)gy * w + gx;
          auto ch = [&](int k) { return base[((int64_t)(a * per + k)) * hw + pix]; };
          double obj = sigmoid_scalar(ch(4));
          if (obj < conf_threshold) continue;  // score <= obj
          for (int c = 0; c < nc; ++c) {
            double score = obj * sigmoid_scalar(ch(5 + c));
            if (score < conf_threshold) continue;
            DetectionBox b;
            b.class_id = c + 1;
            b.score = score;
            b.cx = (2.0 * sigmoid_scalar(ch(0)) - 0.5 + gx) * stride;
            b.cy = (2.0 * sigmoid_scalar(ch(1)) - 0.5 + gy) * stride;
            double sw = 2.0 * sigmoid_scalar(ch(2));
            double sh = 2.0 * sigmoid_scalar(ch(3));
            b.w = sw * sw * anc.w;
            b.h = sh * sh * anc.h;
            cands.push_back(b);
          }
        }
    }
  }
  return nms(std::move(cands), nms_iou);
}

// Inverse of the decode law for one anchor/cell; used for target building and
// consistency checks. Requires the box to be reachable from the given cell.
struct EncodedBox {
  double tx, ty, tw, th;
};

inline double logit_scalar(double p) {
  p = std::min(1.0 - 1e-12, std::max(1e-12, p));
  return std::log(p / (1.0 - p));
}

inline EncodedBox encode_box(const ModelConfig& cfg, int scale_idx, int anchor_idx, int gx,
                             int gy, const DetectionBox& box) {
  double stride = cfg.strides[scale_idx];
  const AnchorPair& anc = cfg.anchors[scale_idx][anchor_idx];
  EncodedBox e;
  e.tx = logit_scalar((box.cx / stride - gx + 0.5) / 2.0);
  e.ty = logit_scalar((box.cy / stride - gy + 0.5) / 2.0);
  e.tw = logit_scalar(std::sqrt(box.w / anc.w) / 2.0);
  e.th = logit_scalar(std::sqrt(box.h / anc.h) / 2.0);
  return e;
}

// Builds per-instance masks from the 1/8-scale segmentation logits: nearest
// upsample to input resolution, sigmoid threshold at 0.5, then crop to each
// detection box so every pixel outside the box is zero.
inline MaskSet decode_masks(const ModelConfig& cfg, const RawPredictions& raw,
                            const std::vector<DetectionBox>& boxes, int batch_index = 0) {
  const Tensor& lg = raw.seg_logits;
  AERO_CHECK(lg.ndim() == 4 && lg.dim(1) == cfg.num_classes,
             "decode_masks: bad seg logits " << shape_str(lg.shape()));
  int hs = lg.dim(2), ws = lg.dim(3);
  int up = cfg.input_size / hs;
  MaskSet out;
  for (const DetectionBox& b : boxes) {
    InstanceMask m;
    m.class_id = b.class_id;
    m.width = cfg.input_size;
    m.height = cfg.input_size;
    m.data.assign((size_t)m.width * m.height, 0);
    int c = b.class_id - 1;
    const double* plane =
        lg.data() + (((int64_t)batch_index * cfg.num_classes + c) * hs) * ws;
    for (int y = 0; y < m.height; ++y)
      for (int x = 0; x < m.width; ++x)
        if (plane[(int64_t)(y / up) * ws + (x / up)] > 0.0)  // sigmoid > 0.5
          m.data[(size_t)y * m.width + x] = 1;
    crop_mask_to_box(m, b);
    out.push_back(std::move(m));
  }
  return out;
}

}  // namespace aero
