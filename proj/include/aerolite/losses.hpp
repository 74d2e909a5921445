#pragma once

// Training objectives: focal loss, CIoU box loss, the detection composite
// with its three layer-count weights, Dice, class-weighted BCE, and the
// segmentation composite. All are differentiable scalar Tensors.

#include <iostream>

#include "aerolite/model.hpp"

namespace aero {

struct FocalParams {
  double alpha = 0.25;  // class weight, applied uniformly
  double gamma = 2.0;   // focusing parameter

  void validate() const {
    AERO_CHECK(alpha > 0.0 && alpha <= 1.0 && gamma >= 0.0,
               "FocalParams: alpha in (0,1], gamma >= 0 required");
  }
};

constexpr double kProbEps = 1e-7;
constexpr double kDiceEps = 1e-6;

// -alpha * (1 - p_t)^gamma * log(p_t), p_t = p when target is 1 else 1 - p.
// Probabilities are clamped to [1e-7, 1-1e-7]; mean over elements.
inline Tensor focal_loss(const Tensor& p, const Tensor& target, const FocalParams& params) {
  params.validate();
  Tensor pc = clamp(p, kProbEps, 1.0 - kProbEps);
  // p_t = p*t + (1-p)*(1-t)
  Tensor pt = add(mul(pc, target), mul(add_scalar(neg(pc), 1.0), add_scalar(neg(target), 1.0)));
  Tensor mod = params.gamma == 0.0 ? Tensor()  // (1-pt)^0 == 1
                                   : pow_scalar(add_scalar(neg(pt), 1.0), params.gamma);
  Tensor per = neg(log(pt));
  if (mod.defined()) per = mul(per, mod);
  return scale(mean(per), params.alpha);
}

// Focal loss directly from logits. Uses softplus identities
// (-log p = softplus(-z), -log(1-p) = softplus(z)) so gradients never die at
// saturated logits, unlike the clamped probability path.
inline Tensor focal_loss_logits(const Tensor& logits, const Tensor& target,
                                const FocalParams& params) {
  params.validate();
  Tensor t = target;
  Tensor one_minus_t = add_scalar(neg(t), 1.0);
  // -log(p_t)
  Tensor nlog_pt = add(mul(t, softplus(neg(logits))), mul(one_minus_t, softplus(logits)));
  Tensor per = nlog_pt;
  if (params.gamma != 0.0) {
    Tensor p = sigmoid(logits);
    Tensor pt = add(mul(p, t), mul(add_scalar(neg(p), 1.0), one_minus_t));
    per = mul(per, pow_scalar(clamp(add_scalar(neg(pt), 1.0), 0.0, 1.0), params.gamma));
  }
  return scale(mean(per), params.alpha);
}

// ---------------------------------------------------------------------------
// CIoU

// CIoU = IoU - rho^2/c^2 - alpha*v with v the aspect-ratio penalty
// (4/pi^2)(atan(wg/hg) - atan(wp/hp))^2 and alpha = v / ((1-IoU) + v + eps).
// Input rows are (cx, cy, w, h); returns one loss value 1 - CIoU per row.
inline Tensor ciou_loss(const Tensor& pred, const Tensor& gt) {
  AERO_CHECK(pred.ndim() == 2 && pred.dim(1) == 4 && gt.ndim() == 2 && gt.dim(1) == 4 &&
                 pred.dim(0) == gt.dim(0),
             "ciou_loss: expected matching (k,4) boxes, got " << shape_str(pred.shape())
                                                              << " and " << shape_str(gt.shape()));
  int k = pred.dim(0);
  for (int i = 0; i < k; ++i)
    AERO_CHECK(gt[i * 4 + 2] > 0.0 && gt[i * 4 + 3] > 0.0,
               "ciou_loss: degenerate ground-truth box " << i << " (w=" << gt[i * 4 + 2]
                                                         << ", h=" << gt[i * 4 + 3] << ")");
  auto col = [k](const Tensor& t, int c) {
    std::vector<int64_t> idx(k);
    for (int i = 0; i < k; ++i) idx[i] = (int64_t)i * 4 + c;
    return gather(t, idx);
  };
  Tensor cxp = col(pred, 0), cyp = col(pred, 1);
  Tensor wp = clamp(col(pred, 2), 1e-9, INFINITY);
  Tensor hp = clamp(col(pred, 3), 1e-9, INFINITY);
  Tensor cxg = col(gt, 0), cyg = col(gt, 1), wg = col(gt, 2), hg = col(gt, 3);

  Tensor x0p = sub(cxp, scale(wp, 0.5)), x1p = add(cxp, scale(wp, 0.5));
  Tensor y0p = sub(cyp, scale(hp, 0.5)), y1p = add(cyp, scale(hp, 0.5));
  Tensor x0g = sub(cxg, scale(wg, 0.5)), x1g = add(cxg, scale(wg, 0.5));
  Tensor y0g = sub(cyg, scale(hg, 0.5)), y1g = add(cyg, scale(hg, 0.5));

  Tensor iw = clamp(sub(minimum(x1p, x1g), maximum(x0p, x0g)), 0.0, INFINITY);
  Tensor ih = clamp(sub(minimum(y1p, y1g), maximum(y0p, y0g)), 0.0, INFINITY);
  Tensor inter = mul(iw, ih);
  Tensor uni = add_scalar(sub(add(mul(wp, hp), mul(wg, hg)), inter), 1e-12);
  Tensor iou = div(inter, uni);

  Tensor cw = sub(maximum(x1p, x1g), minimum(x0p, x0g));
  Tensor chh = sub(maximum(y1p, y1g), minimum(y0p, y0g));
  Tensor c2 = add_scalar(add(mul(cw, cw), mul(chh, chh)), 1e-12);
  Tensor dx = sub(cxp, cxg), dy = sub(cyp, cyg);
  Tensor rho2 = add(mul(dx, dx), mul(dy, dy));

  Tensor dAtan = sub(atan(div(wg, hg)), atan(div(wp, hp)));
  constexpr double kPi = 3.14159265358979323846;
  Tensor v = scale(mul(dAtan, dAtan), 4.0 / (kPi * kPi));
  Tensor alpha = div(v, add_scalar(add(sub(Tensor::from({k}, std::vector<double>(k, 1.0)), iou), v),
                                   1e-12));
  Tensor ciou = sub(sub(iou, div(rho2, c2)), mul(alpha, v));
  return add_scalar(neg(ciou), 1.0);
}

// Convenience scalar form for two plain boxes.
inline double ciou_loss(const DetectionBox& pred, const DetectionBox& gt) {
  Tensor p = Tensor::from({1, 4}, {pred.cx, pred.cy, pred.w, pred.h});
  Tensor g = Tensor::from({1, 4}, {gt.cx, gt.cy, gt.w, gt.h});
  return ciou_loss(p, g)[0];
}

// ---------------------------------------------------------------------------
// Segmentation losses

// Soft Dice: 1 - (2 TP + eps) / (2 TP + FP + FN + eps) with TP = sum(p*g),
// FP = sum(p*(1-g)), FN = sum((1-p)*g). Two empty masks give loss 0.
inline Tensor dice_loss(const Tensor& pred, const Tensor& gt) {
  AERO_CHECK(pred.shape() == gt.shape(), "dice_loss: shape mismatch "
                                             << shape_str(pred.shape()) << " vs "
                                             << shape_str(gt.shape()));
  Tensor tp = sum(mul(pred, gt));
  Tensor fp = sum(mul(pred, add_scalar(neg(gt), 1.0)));
  Tensor fn = sum(mul(add_scalar(neg(pred), 1.0), gt));
  Tensor num = add_scalar(scale(tp, 2.0), kDiceEps);
  Tensor den = add_scalar(add(scale(tp, 2.0), add(fp, fn)), kDiceEps);
  return add_scalar(neg(div(num, den)), 1.0);
}

// Per-pixel BCE with the positive term scaled by N_total/(2 N_pos) and the
// negative term by N_total/(2 N_neg). Zero counts are clamped with a warning.
inline Tensor weighted_bce(const Tensor& pred, const Tensor& gt, double n_total,
                           double n_positive, double n_negative) {
  AERO_CHECK(pred.shape() == gt.shape(), "weighted_bce: shape mismatch "
                                             << shape_str(pred.shape()) << " vs "
                                             << shape_str(gt.shape()));
  AERO_CHECK(std::abs(n_positive + n_negative - n_total) < 1e-9,
             "weighted_bce: counts inconsistent (" << n_positive << " + " << n_negative
                                                   << " != " << n_total << ")");
  if (n_positive <= 0.0 || n_negative <= 0.0) {
    std::cerr << "weighted_bce: empty class (pos=" << n_positive << ", neg=" << n_negative
              << "), clamping weight\n";
  }
  double wp = n_total / (2.0 * std::max(n_positive, 1e-12));
  double wn = n_total / (2.0 * std::max(n_negative, 1e-12));
  Tensor pc = clamp(pred, kProbEps, 1.0 - kProbEps);
  Tensor pos = scale(mul(gt, log(pc)), wp);
  Tensor negt = scale(mul(add_scalar(neg(gt), 1.0), log(add_scalar(neg(pc), 1.0))), wn);
  return neg(mean(add(pos, negt)));
}

// Counts derived from the ground-truth mask.
inline Tensor weighted_bce(const Tensor& pred, const Tensor& gt) {
  double np = 0.0;
  for (int64_t i = 0; i < gt.size(); ++i) np += gt[i];
  double nt = (double)gt.size();
  return weighted_bce(pred, gt, nt, np, nt - np);
}

struct SegLossWeights {
  double dice = 0.5;
  double bce = 0.25;
  double focal = 0.25;
};

inline Tensor segmentation_loss(const Tensor& pred, const Tensor& gt,
                                const SegLossWeights& w = {},
                                const FocalParams& focal = {0.25, 2.0}) {
  Tensor d = dice_loss(pred, gt);
  Tensor b = weighted_bce(pred, gt);
  Tensor f = focal_loss(pred, gt, focal);
  return add(scale(d, w.dice), add(scale(b, w.bce), scale(f, w.focal)));
}

// Class-weighted BCE straight from logits (softplus form, gradients survive
// saturation).
inline Tensor weighted_bce_logits(const Tensor& logits, const Tensor& gt) {
  AERO_CHECK(logits.shape() == gt.shape(), "weighted_bce_logits: shape mismatch "
                                               << shape_str(logits.shape()) << " vs "
                                               << shape_str(gt.shape()));
  double np = 0.0;
  for (int64_t i = 0; i < gt.size(); ++i) np += gt[i];
  double nt = (double)gt.size();
  double nn = nt - np;
  if (np <= 0.0 || nn <= 0.0)
    std::cerr << "weighted_bce_logits: empty class (pos=" << np << "), clamping weight\n";
  double wp = nt / (2.0 * std::max(np, 1e-12));
  double wn = nt / (2.0 * std::max(nn, 1e-12));
  Tensor pos = scale(mul(gt, softplus(neg(logits))), wp);
  Tensor negt = scale(mul(add_scalar(neg(gt), 1.0), softplus(logits)), wn);
  return mean(add(pos, negt));
}

// Segmentation composite on raw logits: Dice on sigmoid probabilities plus
// logit-space weighted BCE and focal terms.
inline Tensor segmentation_loss_logits(const Tensor& logits, const Tensor& gt,
                                       const SegLossWeights& w = {},
                                       const FocalParams& focal = {0.25, 2.0}) {
  Tensor d = dice_loss(sigmoid(logits), gt);
  Tensor b = weighted_bce_logits(logits, gt);
  Tensor f = focal_loss_logits(logits, gt, focal);
  return add(scale(d, w.dice), add(scale(b, w.bce), scale(f, w.focal)));
}

// ---------------------------------------------------------------------------
// Detection composite

struct DetLossWeights {
  double n_layers = 3;
  double n_classes = 3;
  double n_imgsz = 640;
  double n_model = 640;

  void validate() const {
    AERO_CHECK(n_layers > 0 && n_classes > 0 && n_imgsz > 0 && n_model > 0,
               "DetLossWeights: all fields must be positive");
  }
  double class_weight() const { return 3.0 / n_layers; }
  double obj_weight() const { return n_classes / n_layers; }
  double box_weight() const {
    double r = n_imgsz / n_model;
    return r * r * 3.0 / n_layers;
  }
};

struct GtBox {
  int class_id = 0;       // 1-based dataset id
  double cx = 0, cy = 0;  // pixels
  double w = 0, h = 0;
};

struct AnchorAssignment {
  int scale = 0, anchor = 0, gx = 0, gy = 0;
  int target = 0;  // index into the target list
};

// A target is assigned to every anchor whose width/height ratio to the target
// lies within [1/4, 4], on the cell containing the center plus the two
// nearest neighbor cells.
inline std::vector<AnchorAssignment> assign_anchors(const ModelConfig& cfg,
                                                    const std::vector<GtBox>& targets) {
  std::vector<AnchorAssignment> out;
  std::unordered_set<int64_t> used;  // (scale, anchor, gy, gx) occupancy
  // Smaller targets claim cells first: they match fewer anchors, and a larger
  // concentric box would otherwise take every slot they are eligible for.
  std::vector<int> order(targets.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = (int)i;
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return targets[a].w * targets[a].h < targets[b].w * targets[b].h;
  });
  for (int ti : order) {
    const GtBox& t = targets[ti];
    AERO_CHECK(t.w > 0 && t.h > 0, "assign_anchors: degenerate target box " << ti);
    for (int s = 0; s < 3; ++s) {
      double stride = cfg.strides[s];
      int grid = cfg.input_size / cfg.strides[s];
      double fx = t.cx / stride, fy = t.cy / stride;
      int gx = std::min(grid - 1, std::max(0, (int)fx));
      int gy = std::min(grid - 1, std::max(0, (int)fy));
      for (int a = 0; a < 3; ++a) {
        const AnchorPair& anc = cfg.anchors[s][a];
        double rw = std::max(t.w / anc.w, anc.w / t.w);
        double rh = std::max(t.h / anc.h, anc.h / t.h);
        if (std::max(rw, rh) > 4.0) continue;
        int nx = (fx - gx) < 0.5 ? gx - 1 : gx + 1;
        int ny = (fy - gy) < 0.5 ? gy - 1 : gy + 1;
        int cells[3][2] = {{gx, gy}, {nx, gy}, {gx, ny}};
        for (auto& cell : cells) {
          int cxg = cell[0], cyg = cell[1];
          if (cxg < 0 || cyg < 0 || cxg >= grid || cyg >= grid) continue;
          int64_t key = (((int64_t)s * 3 + a) * grid + cyg) * grid + cxg;
          if (!used.insert(key).second) continue;
          out.push_back({s, a, cxg, cyg, ti});
        }
      }
    }
  }
  return out;
}

// Weighted sum (3/N_l) L_class + (N_c/N_l) L_obj + (N_imgsz/N_model)^2 (3/N_l) L_box.
// L_class and L_obj are focal losses; L_box is the CIoU loss on decoded boxes.
// With no positive anchors the class and box terms are zero.
inline Tensor detection_loss(const ModelConfig& cfg, const RawPredictions& raw,
                             const std::vector<GtBox>& targets, const DetLossWeights& w,
                             const FocalParams& focal = {0.25, 2.0}, int batch_index = 0) {
  w.validate();
  auto assigns = assign_anchors(cfg, targets);
  int nc = cfg.num_classes;
  int per = 5 + nc;

  // objectness over every anchor of every scale
  Tensor obj_loss;
  {
    std::vector<Tensor> preds;
    std::vector<double> targ;
    for (int s = 0; s < 3; ++s) {
      const Tensor& t = raw.det[s];
      int h = t.dim(2), wgrid = t.dim(3);
      int64_t hw = (int64_t)h * wgrid;
      int64_t base = (int64_t)batch_index * t.dim(1) * hw;
      std::vector<int64_t> idx;
      idx.reserve(3 * hw);
      for (int a = 0; a < 3; ++a)
        for (int64_t p = 0; p < hw; ++p) idx.push_back(base + ((int64_t)(a * per + 4)) * hw + p);
      std::vector<double> tg(3 * hw, 0.0);
      for (const auto& as : assigns)
        if (as.scale == s) tg[(size_t)as.anchor * hw + (int64_t)as.gy * wgrid + as.gx] = 1.0;
      preds.push_back(reshape(gather(t, idx), {1, (int)(3 * hw)}));
      targ.insert(targ.end(), tg.begin(), tg.end());
    }
    Tensor logits = reshape(concat_channels(preds), {(int)targ.size()});
    Tensor tg = Tensor::from({(int)targ.size()}, targ);
    // focal sum normalized by the number of assigned anchors (clamped at 1),
    // the usual dense-detector normalization
    obj_loss = scale(focal_loss_logits(logits, tg, focal),
                     (double)targ.size() / std::max<size_t>(1, assigns.size()));
  }

  Tensor total = scale(obj_loss, w.obj_weight());
  if (!assigns.empty()) {
    // class logits at positives, one-hot targets
    std::vector<Tensor> cls_parts;
    std::vector<double> cls_targ;
    std::vector<Tensor> box_rows, gt_rows;
    for (const auto& as : assigns) {
      const Tensor& t = raw.det[as.scale];
      int h = t.dim(2), wgrid = t.dim(3);
      int64_t hw = (int64_t)h * wgrid;
      int64_t base = (int64_t)batch_index * t.dim(1) * hw;
      int64_t pix = (int64_t)as.gy * wgrid + as.gx;
      auto chan = [&](int k) { return base + ((int64_t)(as.anchor * per + k)) * hw + pix; };
      std::vector<int64_t> cidx;
      for (int c = 0; c < nc; ++c) cidx.push_back(chan(5 + c));
      cls_parts.push_back(reshape(gather(t, cidx), {1, nc}));
      const GtBox& g = targets[as.target];
      for (int c = 0; c < nc; ++c) cls_targ.push_back(c + 1 == g.class_id ? 1.0 : 0.0);

      // decoded box at this anchor/cell
      double stride = cfg.strides[as.scale];
      const AnchorPair& anc = cfg.anchors[as.scale][as.anchor];
      Tensor raw4 = gather(t, {chan(0), chan(1), chan(2), chan(3)});
      Tensor sg = sigmoid(raw4);
      Tensor cxy = gather(sg, {0, 1});
      Tensor wh = gather(sg, {2, 3});
      Tensor center = scale(add_scalar(scale(cxy, 2.0), -0.5), stride);
      center = add(center, Tensor::from({2}, {as.gx * stride, as.gy * stride}));
      Tensor sz = mul(pow_scalar(scale(wh, 2.0), 2.0), Tensor::from({2}, {anc.w, anc.h}));
      box_rows.push_back(reshape(concat_channels({reshape(center, {1, 2}), reshape(sz, {1, 2})}),
                                 {1, 4}));
      gt_rows.push_back(Tensor::from({1, 4}, {g.cx, g.cy, g.w, g.h}));
    }
    Tensor cls_logits = reshape(concat_channels(cls_parts), {(int)cls_targ.size()});
    Tensor cls_loss = focal_loss_logits(
        cls_logits, Tensor::from({(int)cls_targ.size()}, cls_targ), focal);
    Tensor pred_boxes = concat_channels(box_rows);   // (k,4) via axis-0? see below
    Tensor gt_boxes = concat_channels(gt_rows);
    // concat_channels stacked along dim 1 of (1,4) rows -> (1, 4k); reshape to (k,4)
    pred_boxes = reshape(pred_boxes, {(int)assigns.size(), 4});
    gt_boxes = reshape(gt_boxes, {(int)assigns.size(), 4});
    Tensor box_loss = mean(ciou_loss(pred_boxes, gt_boxes));
    total = add(total, add(scale(cls_loss, w.class_weight()), scale(box_loss, w.box_weight())));
  }
  return total;
}

}  // namespace aero
