#include <catch2/catch_amalgamated.hpp>

#include <set>
#include <tuple>

#include "aerolite/losses.hpp"
#include "oracles.hpp"

using namespace aero;

namespace {

// Independent scalar pieces used to cross-check the composite losses.
double softplus_ref(double x) { return std::log1p(std::exp(-std::abs(x))) + std::max(x, 0.0); }
double sigmoid_ref(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Per-element focal term from a logit: (1 - p_t)^gamma * (-log p_t).
double focal_elem(double z, double t, double gamma) {
  double nlog_pt = t * softplus_ref(-z) + (1.0 - t) * softplus_ref(z);
  double p = sigmoid_ref(z);
  double pt = t * p + (1.0 - t) * (1.0 - p);
  return std::pow(1.0 - pt, gamma) * nlog_pt;
}

double ciou_ref(double cxp, double cyp, double wp, double hp, double cxg, double cyg, double wg,
                double hg) {
  double iw = std::max(0.0, std::min(cxp + wp / 2, cxg + wg / 2) -
                                std::max(cxp - wp / 2, cxg - wg / 2));
  double ih = std::max(0.0, std::min(cyp + hp / 2, cyg + hg / 2) -
                                std::max(cyp - hp / 2, cyg - hg / 2));
  double inter = iw * ih;
  double iou = inter / (wp * hp + wg * hg - inter + 1e-12);
  double cw = std::max(cxp + wp / 2, cxg + wg / 2) - std::min(cxp - wp / 2, cxg - wg / 2);
  double ch = std::max(cyp + hp / 2, cyg + hg / 2) - std::min(cyp - hp / 2, cyg - hg / 2);
  double c2 = cw * cw + ch * ch + 1e-12;
  double rho2 = (cxp - cxg) * (cxp - cxg) + (cyp - cyg) * (cyp - cyg);
  constexpr double kPi = 3.14159265358979323846;
  double d = std::atan(wg / hg) - std::atan(wp / hp);
  double v = 4.0 / (kPi * kPi) * d * d;
  double alpha = v / ((1.0 - iou) + v + 1e-12);
  return 1.0 - (iou - rho2 / c2 - alpha * v);
}

}  // namespace

TEST_CASE("focal loss hand-checked values") {
  Tensor p = Tensor::from({1}, {0.5});
  Tensor t1 = Tensor::from({1}, {1.0});
  // gamma 0, alpha 1 reduces to -log(0.5)
  REQUIRE(focal_loss(p, t1, {1.0, 0.0}).value() == Catch::Approx(std::log(2.0)).margin(1e-9));
  // alpha 0.25, gamma 2 at p_t = 0.9: 0.25 * 0.01 * (-log 0.9)
  Tensor p9 = Tensor::from({1}, {0.9});
  REQUIRE(focal_loss(p9, t1, {0.25, 2.0}).value() ==
          Catch::Approx(0.25 * 0.01 * -std::log(0.9)).margin(1e-9));  // ~2.634e-4
  // loss decreases monotonically toward 0 as confidence approaches the target
  double prev = 1e9;
  for (double q : {0.6, 0.9, 0.99, 0.999}) {
    double v = focal_loss(Tensor::from({1}, {q}), t1, {0.25, 2.0}).value();
    REQUIRE(v < prev);
    prev = v;
  }
  REQUIRE(prev < 1e-6);
}

TEST_CASE("focal loss with gamma 0 and alpha 1 is exactly BCE") {
  std::mt19937_64 rng(3);
  std::vector<double> ps, ts;
  for (int i = 0; i < 100; ++i) {
    ps.push_back(0.005 + 0.99 * (double)i / 99.0);
    ts.push_back((rng() & 1) ? 1.0 : 0.0);
  }
  Tensor p = Tensor::from({100}, ps), t = Tensor::from({100}, ts);
  double bce = 0.0;
  for (int i = 0; i < 100; ++i)
    bce += -(ts[i] * std::log(ps[i]) + (1.0 - ts[i]) * std::log(1.0 - ps[i]));
  REQUIRE(focal_loss(p, t, {1.0, 0.0}).value() == Catch::Approx(bce / 100.0).margin(1e-9));
}

TEST_CASE("logit-space focal loss agrees with the probability path") {
  std::mt19937_64 rng(4);
  Tensor z = oracle::random_tensor({3, 5}, rng);
  Tensor t(z.shape());
  for (int64_t i = 0; i < t.size(); ++i) t[i] = (rng() & 1) ? 1.0 : 0.0;
  double a = focal_loss_logits(z, t, {0.25, 2.0}).value();
  double b = focal_loss(sigmoid(z), t, {0.25, 2.0}).value();
  REQUIRE(a == Catch::Approx(b).margin(1e-9));
}

TEST_CASE("CIoU loss hand-checked cases") {
  DetectionBox a;
  a.cx = 5, a.cy = 5, a.w = 10, a.h = 10;
  REQUIRE(ciou_loss(a, a) == Catch::Approx(0.0).margin(1e-9));  // identical boxes

  DetectionBox b = a;
  b.cx = 15;  // touching, zero IoU: loss = 1 + rho^2/c^2 = 1 + 100/500
  REQUIRE(ciou_loss(a, b) == Catch::Approx(1.2).margin(1e-6));
  REQUIRE(ciou_loss(a, b) > 1.0);

  DetectionBox far = a;
  far.cx = 200;  // fully disjoint, large center penalty
  REQUIRE(ciou_loss(a, far) > 1.0);

  Tensor bad_gt = Tensor::from({1, 4}, {5.0, 5.0, 0.0, 10.0});
  REQUIRE_THROWS(ciou_loss(Tensor::from({1, 4}, {5.0, 5.0, 10.0, 10.0}), bad_gt));
}

TEST_CASE("CIoU loss matches an independent scalar computation on random boxes") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> c(10.0, 50.0), s(4.0, 20.0);
  for (int i = 0; i < 50; ++i) {
    DetectionBox p, g;
    p.cx = c(rng); p.cy = c(rng); p.w = s(rng); p.h = s(rng);
    g.cx = c(rng); g.cy = c(rng); g.w = s(rng); g.h = s(rng);
    double want = ciou_ref(p.cx, p.cy, p.w, p.h, g.cx, g.cy, g.w, g.h);
    REQUIRE(ciou_loss(p, g) == Catch::Approx(want).margin(1e-9));
  }
}

TEST_CASE("Dice loss hand-checked counts") {
  // perfect binary prediction
  Tensor g = Tensor::from({4}, {1.0, 0.0, 1.0, 0.0});
  REQUIRE(dice_loss(g, g).value() == 0.0);

  // TP 50, FP 10, FN 10 -> 1 - 100/120 = 1/6
  int n = 70;
  Tensor gt({n}), pd({n});
  for (int i = 0; i < 60; ++i) gt[i] = 1.0;   // 60 positives
  for (int i = 0; i < 50; ++i) pd[i] = 1.0;   // 50 hit them
  for (int i = 60; i < 70; ++i) pd[i] = 1.0;  // 10 false alarms
  REQUIRE(dice_loss(pd, gt).value() == Catch::Approx(1.0 / 6.0).margin(1e-6));

  // soft counts with p = 0.5 everywhere: TP = k/2, FP = (m-k)/2, FN = k/2,
  // so loss = 1 - 2 TP / (2 TP + FP + FN) = 1 - k / (m/2 + k)
  int m = 40, k = 12;
  Tensor gh({m}), ph({m}, 0.5);
  for (int i = 0; i < k; ++i) gh[i] = 1.0;
  REQUIRE(dice_loss(ph, gh).value() ==
          Catch::Approx(1.0 - k / (0.5 * m + k)).margin(1e-6));

  // two empty masks agree perfectly
  REQUIRE(dice_loss(Tensor({8}), Tensor({8})).value() == 0.0);
}

TEST_CASE("class-weighted BCE hand-checked and balanced cases") {
  // g = [1,0,0], p = [0.8,0.1,0.2]: weights 3/2 on the positive, 3/4 on negatives
  Tensor g = Tensor::from({3}, {1.0, 0.0, 0.0});
  Tensor p = Tensor::from({3}, {0.8, 0.1, 0.2});
  double want = -(1.5 * std::log(0.8) + 0.75 * std::log(0.9) + 0.75 * std::log(0.8)) / 3.0;
  REQUIRE(weighted_bce(p, g).value() == Catch::Approx(want).margin(1e-9));

  // balanced classes reduce to plain BCE
  Tensor gb = Tensor::from({4}, {1.0, 1.0, 0.0, 0.0});
  Tensor pb = Tensor::from({4}, {0.7, 0.6, 0.3, 0.2});
  double bce = 0.0;
  for (int i = 0; i < 4; ++i)
    bce += -(gb[i] * std::log(pb[i]) + (1.0 - gb[i]) * std::log(1.0 - pb[i]));
  REQUIRE(weighted_bce(pb, gb).value() == Catch::Approx(bce / 4.0).margin(1e-9));

  // an empty class is clamped rather than dividing by zero
  Tensor zeros({5});
  Tensor pz({5}, 0.1);
  REQUIRE_NOTHROW(weighted_bce(pz, zeros));
  REQUIRE(std::isfinite(weighted_bce(pz, zeros).value()));

  // counts must be consistent with each other
  REQUIRE_THROWS(weighted_bce(pz, zeros, 5.0, 3.0, 1.0));
}

TEST_CASE("logit-space weighted BCE agrees with the probability path") {
  std::mt19937_64 rng(6);
  Tensor z = oracle::random_tensor({2, 7}, rng);
  Tensor t(z.shape());
  for (int64_t i = 0; i < t.size(); ++i) t[i] = (i % 3 == 0) ? 1.0 : 0.0;
  REQUIRE(weighted_bce_logits(z, t).value() ==
          Catch::Approx(weighted_bce(sigmoid(z), t).value()).margin(1e-9));
}

TEST_CASE("segmentation composite is the 0.5/0.25/0.25 weighted sum of its parts") {
  SegLossWeights w;
  REQUIRE(w.dice == 0.5);
  REQUIRE(w.bce == 0.25);
  REQUIRE(w.focal == 0.25);
  std::mt19937_64 rng(7);
  Tensor z = oracle::random_tensor({1, 2, 4, 4}, rng);
  Tensor t(z.shape());
  for (int64_t i = 0; i < t.size(); ++i) t[i] = (i % 4 == 0) ? 1.0 : 0.0;
  double want = 0.5 * dice_loss(sigmoid(z), t).value() +
                0.25 * weighted_bce_logits(z, t).value() +
                0.25 * focal_loss_logits(z, t, {0.25, 2.0}).value();
  REQUIRE(segmentation_loss_logits(z, t).value() == Catch::Approx(want).margin(1e-12));

  Tensor p = sigmoid(z);
  double want_p = 0.5 * dice_loss(p, t).value() + 0.25 * weighted_bce(p, t).value() +
                  0.25 * focal_loss(p, t, {0.25, 2.0}).value();
  REQUIRE(segmentation_loss(p, t).value() == Catch::Approx(want_p).margin(1e-12));
}

TEST_CASE("detection composite weights at their reference values") {
  DetLossWeights w;  // 3 layers, 3 classes, matched image size
  REQUIRE(w.class_weight() == 1.0);
  REQUIRE(w.obj_weight() == 1.0);
  REQUIRE(w.box_weight() == 1.0);
  DetLossWeights half{6, 3, 640, 640};
  REQUIRE(half.class_weight() == 0.5);
  REQUIRE(half.obj_weight() == 0.5);
  REQUIRE(half.box_weight() == 0.5);
  DetLossWeights small_img{3, 3, 320, 640};
  REQUIRE(small_img.box_weight() == 0.25);
  REQUIRE_THROWS(detection_loss(ModelConfig{}, RawPredictions{}, {}, DetLossWeights{0, 3, 1, 1}));
}

namespace {
ModelConfig tiny_cfg() {
  ModelConfig cfg;
  cfg.input_size = 32;
  cfg.width = 0.25;
  return cfg;
}

RawPredictions random_raw(std::mt19937_64& rng) {
  RawPredictions raw;
  raw.det = {oracle::random_tensor({1, 24, 4, 4}, rng), oracle::random_tensor({1, 24, 2, 2}, rng),
             oracle::random_tensor({1, 24, 1, 1}, rng)};
  raw.seg_logits = Tensor({1, 3, 4, 4});
  return raw;
}
}  // namespace

TEST_CASE("anchor assignment respects the inclusive shape-ratio band") {
  ModelConfig cfg = tiny_cfg();
  auto has = [](const std::vector<AnchorAssignment>& v, int s, int a) {
    for (const auto& x : v)
      if (x.scale == s && x.anchor == a) return true;
    return false;
  };
  // exactly 4x the smallest anchor on both sides: still inside the band
  GtBox edge{1, 16, 16, 40.0, 52.0};
  REQUIRE(has(assign_anchors(cfg, {edge}), 0, 0));
  // just past the band on width: the smallest anchor no longer matches
  GtBox past{1, 16, 16, 40.4, 52.0};
  REQUIRE_FALSE(has(assign_anchors(cfg, {past}), 0, 0));
  REQUIRE_THROWS(assign_anchors(cfg, {GtBox{1, 16, 16, 0.0, 5.0}}));
}

TEST_CASE("anchor assignment covers the center cell plus the two nearest neighbors") {
  ModelConfig cfg = tiny_cfg();
  // center (16,16) sits on the corner of cell (2,2) at stride 8 -> neighbors (1,2),(2,1)
  GtBox t{1, 16, 16, 10, 13};
  auto assigns = assign_anchors(cfg, {t});
  // shape band admits the three smallest anchors only
  REQUIRE(assigns.size() == 9);
  for (const auto& a : assigns) {
    REQUIRE(a.scale == 0);
    REQUIRE(a.target == 0);
    bool cell_ok = (a.gx == 2 && a.gy == 2) || (a.gx == 1 && a.gy == 2) || (a.gx == 2 && a.gy == 1);
    REQUIRE(cell_ok);
  }
}

TEST_CASE("concentric small targets are not starved by larger ones") {
  ModelConfig cfg = tiny_cfg();
  // the large box is listed first yet the small one keeps its (10,13) slots
  std::vector<GtBox> ts = {{1, 16, 16, 33, 23}, {2, 16, 16, 8, 10}};
  auto assigns = assign_anchors(cfg, ts);
  bool small_has_a0 = false;
  for (const auto& a : assigns)
    if (a.target == 1 && a.scale == 0 && a.anchor == 0) small_has_a0 = true;
  REQUIRE(small_has_a0);
  // occupancy still deduplicates: no (scale, anchor, cell) appears twice
  std::set<std::tuple<int, int, int, int>> seen;
  for (const auto& a : assigns) REQUIRE(seen.insert({a.scale, a.anchor, a.gx, a.gy}).second);
}

TEST_CASE("detection loss with no targets is the weighted objectness term alone") {
  ModelConfig cfg = tiny_cfg();
  std::mt19937_64 rng(8);
  RawPredictions raw = random_raw(rng);
  DetLossWeights w{3, 3, 32, 32};
  double got = detection_loss(cfg, raw, {}, w).value();

  // independent recomputation: focal over the 63 objectness logits, all-negative
  // targets, normalized by max(1, positives) = 1
  double acc = 0.0;
  int count = 0;
  int dims[3] = {4, 2, 1};
  for (int s = 0; s < 3; ++s) {
    int64_t hw = (int64_t)dims[s] * dims[s];
    for (int a = 0; a < 3; ++a)
      for (int64_t p = 0; p < hw; ++p) {
        acc += focal_elem(raw.det[s][((int64_t)(a * 8 + 4)) * hw + p], 0.0, 2.0);
        ++count;
      }
  }
  double want = w.obj_weight() * (0.25 * acc / count) * count;
  REQUIRE(got == Catch::Approx(want).margin(1e-9));
}

TEST_CASE("detection loss matches a from-scratch recomputation on a toy case") {
  ModelConfig cfg = tiny_cfg();
  std::mt19937_64 rng(9);
  RawPredictions raw = random_raw(rng);
  std::vector<GtBox> targets = {{1, 16, 16, 10, 13}};
  DetLossWeights w{3, 3, 32, 32};
  double got = detection_loss(cfg, raw, targets, w).value();

  auto assigns = assign_anchors(cfg, targets);
  REQUIRE(assigns.size() == 9);

  int dims[3] = {4, 2, 1};
  // objectness over every anchor slot
  double obj_acc = 0.0;
  int obj_n = 0;
  for (int s = 0; s < 3; ++s) {
    int64_t hw = (int64_t)dims[s] * dims[s];
    for (int a = 0; a < 3; ++a)
      for (int64_t p = 0; p < hw; ++p) {
        double tgt = 0.0;
        for (const auto& as : assigns)
          if (as.scale == s && as.anchor == a && (int64_t)as.gy * dims[s] + as.gx == p) tgt = 1.0;
        obj_acc += focal_elem(raw.det[s][((int64_t)(a * 8 + 4)) * hw + p], tgt, 2.0);
        ++obj_n;
      }
  }
  double obj_term = (0.25 * obj_acc / obj_n) * ((double)obj_n / assigns.size());

  // classification and box terms at the positives
  double cls_acc = 0.0, box_acc = 0.0;
  for (const auto& as : assigns) {
    const Tensor& t = raw.det[as.scale];
    int64_t hw = (int64_t)dims[as.scale] * dims[as.scale];
    int64_t pix = (int64_t)as.gy * dims[as.scale] + as.gx;
    auto ch = [&](int k) { return t[((int64_t)(as.anchor * 8 + k)) * hw + pix]; };
    for (int c = 0; c < 3; ++c) cls_acc += focal_elem(ch(5 + c), c == 0 ? 1.0 : 0.0, 2.0);
    double stride = cfg.strides[as.scale];
    const AnchorPair& anc = cfg.anchors[as.scale][as.anchor];
    double cx = (2.0 * sigmoid_ref(ch(0)) - 0.5 + as.gx) * stride;
    double cy = (2.0 * sigmoid_ref(ch(1)) - 0.5 + as.gy) * stride;
    double sw = 2.0 * sigmoid_ref(ch(2)), sh = 2.0 * sigmoid_ref(ch(3));
    box_acc += ciou_ref(cx, cy, sw * sw * anc.w, sh * sh * anc.h, 16, 16, 10, 13);
  }
  double cls_term = 0.25 * cls_acc / (assigns.size() * 3.0);
  double box_term = box_acc / assigns.size();

  double want = w.obj_weight() * obj_term + w.class_weight() * cls_term +
                w.box_weight() * box_term;
  REQUIRE(got == Catch::Approx(want).margin(1e-9));
}

TEST_CASE("detection loss scales linearly with the layer-count weights") {
  ModelConfig cfg = tiny_cfg();
  std::mt19937_64 rng(10);
  RawPredictions raw = random_raw(rng);
  std::vector<GtBox> targets = {{2, 16, 16, 10, 13}};
  double base = detection_loss(cfg, raw, targets, DetLossWeights{3, 3, 32, 32}).value();
  double halved = detection_loss(cfg, raw, targets, DetLossWeights{6, 3, 32, 32}).value();
  REQUIRE(halved == Catch::Approx(0.5 * base).margin(1e-12));
}

TEST_CASE("loss gradients pass finite differences") {
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    std::mt19937_64 rng(seed * 17);
    Tensor t({2, 6});
    for (int64_t i = 0; i < t.size(); ++i) t[i] = (rng() & 1) ? 1.0 : 0.0;
    Tensor p = oracle::random_tensor({2, 6}, rng, 0.2, 0.8, false);  // clear of the clamp
    Tensor z = oracle::random_tensor({2, 6}, rng);

    auto check = [](const std::function<Tensor()>& f, std::vector<Tensor> leaves) {
      REQUIRE(oracle::fd_max_rel_err(f, std::move(leaves)) < 1e-4);
    };
    check([&] { return focal_loss(p, t, {0.25, 2.0}); }, {p});
    check([&] { return focal_loss_logits(z, t, {0.25, 2.0}); }, {z});
    check([&] { return dice_loss(p, t); }, {p});
    check([&] { return weighted_bce(p, t); }, {p});
    check([&] { return weighted_bce_logits(z, t); }, {z});
    check([&] { return segmentation_loss_logits(z, t); }, {z});

    // overlapping boxes keep the CIoU intersection clamp away from its kink
    Tensor pb = Tensor::from({2, 4}, {11.3, 10.2, 8.7, 9.4, 30.6, 31.1, 12.2, 7.8});
    Tensor gb = Tensor::from({2, 4}, {10.0, 10.0, 10.0, 10.0, 32.0, 30.0, 10.0, 9.0});
    check([&] { return mean(ciou_loss(pb, gb)); }, {pb});
  }

  // full composite through assignment, gathering, decode, and CIoU
  ModelConfig cfg = tiny_cfg();
  for (uint64_t seed = 1; seed <= 2; ++seed) {
    std::mt19937_64 rng(seed * 23);
    RawPredictions raw = random_raw(rng);
    std::vector<GtBox> targets = {{1, 16, 16, 10, 13}};
    DetLossWeights w{3, 3, 32, 32};
    std::vector<Tensor> leaves = {raw.det[0], raw.det[1], raw.det[2]};
    REQUIRE(oracle::fd_max_rel_err([&] { return detection_loss(cfg, raw, targets, w); }, leaves) <
            1e-4);
  }
}
