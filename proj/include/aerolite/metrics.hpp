#pragma once

// Evaluation metrics: warning timeliness (AWD), warning accuracy / false
// positive rate, mask IoU / MIoU, detection AP / mAP, and precision / recall /
// F1, plus plain-text report writers.

#include <iomanip>
#include <optional>

#include "aerolite/detect.hpp"

namespace aero {

// ---------------------------------------------------------------------------
// Average warning delay

struct AwdResult {
  std::optional<double> awd;  // mean |warning time - deviation onset|, seconds
  int counted = 0;            // episodes contributing to the mean
  int excluded = 0;           // episodes missing a warning or an onset
};

inline AwdResult awd(const std::vector<std::optional<double>>& warning_times,
                     const std::vector<std::optional<double>>& onsets) {
  AERO_CHECK(warning_times.size() == onsets.size(),
             "awd: " << warning_times.size() << " warning times vs " << onsets.size()
                     << " onsets");
  AwdResult r;
  double sum = 0.0;
  for (size_t i = 0; i < onsets.size(); ++i) {
    if (warning_times[i] && onsets[i]) {
      sum += std::abs(*warning_times[i] - *onsets[i]);
      r.counted++;
    } else {
      r.excluded++;
    }
  }
  if (r.counted > 0) r.awd = sum / r.counted;
  return r;
}

// ---------------------------------------------------------------------------
// Episode-level warning accuracy and false positive rate

struct WarningRates {
  double accuracy = 0.0;
  std::optional<double> fpr;  // absent when there are no negative episodes
  int tp = 0, tn = 0, fp = 0, fn = 0;
};

inline WarningRates warning_rates(const std::vector<bool>& predicted,
                                  const std::vector<bool>& actual) {
  AERO_CHECK(predicted.size() == actual.size() && !predicted.empty(),
             "warning_rates: need equal-length non-empty label vectors");
  WarningRates r;
  for (size_t i = 0; i < predicted.size(); ++i) {
    if (predicted[i] && actual[i]) r.tp++;
    else if (predicted[i] && !actual[i]) r.fp++;
    else if (!predicted[i] && actual[i]) r.fn++;
    else r.tn++;
  }
  r.accuracy = (double)(r.tp + r.tn) / (double)predicted.size();
  if (r.fp + r.tn > 0) r.fpr = (double)r.fp / (double)(r.fp + r.tn);
  return r;
}

// ---------------------------------------------------------------------------
// Mask IoU / MIoU

struct IouResult {
  std::map<int, double> per_class;  // class id -> aggregate IoU
  std::optional<double> miou;
};

// Aggregates intersection and union per class over the whole set; classes
// absent from both predictions and ground truth are excluded from MIoU.
inline IouResult iou_miou(const std::vector<MaskSet>& pred, const std::vector<MaskSet>& gt,
                          const std::vector<int>& class_ids = {kNest, kQRcode, kHouse}) {
  AERO_CHECK(pred.size() == gt.size(), "iou_miou: " << pred.size() << " predictions vs "
                                                    << gt.size() << " ground truths");
  IouResult r;
  double sum = 0.0;
  int n = 0;
  for (int cls : class_ids) {
    size_t inter = 0, uni = 0;
    for (size_t i = 0; i < pred.size(); ++i) {
      // union of all masks of this class on each side
      auto collect = [cls](const MaskSet& ms) {
        std::vector<uint8_t> acc;
        int w = 0, h = 0;
        for (const InstanceMask& m : ms) {
          if (m.class_id != cls || m.data.empty()) continue;
          if (acc.empty()) {
            acc.assign(m.data.size(), 0);
            w = m.width;
            h = m.height;
          }
          AERO_CHECK(m.width == w && m.height == h, "iou_miou: mixed mask extents in one image");
          for (size_t k = 0; k < m.data.size(); ++k) acc[k] |= (m.data[k] != 0);
        }
        return acc;
      };
      std::vector<uint8_t> a = collect(pred[i]), b = collect(gt[i]);
      size_t len = std::max(a.size(), b.size());
      if (len > 0 && !a.empty() && !b.empty())
        AERO_CHECK(a.size() == b.size(), "iou_miou: prediction/ground-truth extents differ");
      for (size_t k = 0; k < len; ++k) {
        bool pa = k < a.size() && a[k], pb = k < b.size() && b[k];
        inter += pa && pb;
        uni += pa || pb;
      }
    }
    if (uni > 0) {
      double iou = (double)inter / (double)uni;
      r.per_class[cls] = iou;
      sum += iou;
      n++;
    }
  }
  if (n > 0) r.miou = sum / n;
  return r;
}

// ---------------------------------------------------------------------------
// Detection AP / mAP

struct GroundTruthBox {
  int image_id = 0;
  int class_id = 0;
  double cx = 0, cy = 0, w = 0, h = 0;
};

struct PredictedBox {
  int image_id = 0;
  DetectionBox box;
};

namespace detail {

inline double box_pair_iou(const PredictedBox& p, const GroundTruthBox& g) {
  DetectionBox gb;
  gb.cx = g.cx;
  gb.cy = g.cy;
  gb.w = g.w;
  gb.h = g.h;
  return box_iou(p.box, gb);
}

// AP for one class at one IoU threshold: greedy score-descending matching,
// then the exact area under the precision envelope.
inline std::optional<double> average_precision(const std::vector<PredictedBox>& preds,
                                               const std::vector<GroundTruthBox>& gts,
                                               int cls, double iou_thresh) {
  std::vector<const GroundTruthBox*> cls_gt;
  for (const auto& g : gts)
    if (g.class_id == cls) cls_gt.push_back(&g);
  if (cls_gt.empty()) return std::nullopt;  // class absent from ground truth

  std::vector<const PredictedBox*> cls_pred;
  for (const auto& p : preds)
    if (p.box.class_id == cls) cls_pred.push_back(&p);
  std::stable_sort(cls_pred.begin(), cls_pred.end(),
                   [](const PredictedBox* a, const PredictedBox* b) {
                     return a->box.score > b->box.score;
                   });

  std::vector<bool> gt_used(cls_gt.size(), false);
  std::vector<int> tp(cls_pred.size(), 0);
  for (size_t i = 0; i < cls_pred.size(); ++i) {
    double best_iou = iou_thresh;
    int best_j = -1;
    for (size_t j = 0; j < cls_gt.size(); ++j) {
      if (gt_used[j] || cls_gt[j]->image_id != cls_pred[i]->image_id) continue;
      double iou = box_pair_iou(*cls_pred[i], *cls_gt[j]);
      if (iou >= best_iou && (best_j < 0 || iou > best_iou)) {
        best_iou = iou;
        best_j = (int)j;
      }
    }
    if (best_j >= 0) {
      gt_used[best_j] = true;
      tp[i] = 1;
    }
  }

  // precision/recall points, then the envelope integral
  size_t npos = cls_gt.size();
  std::vector<double> recall, precision;
  int tps = 0;
  for (size_t i = 0; i < cls_pred.size(); ++i) {
    tps += tp[i];
    recall.push_back((double)tps / (double)npos);
    precision.push_back((double)tps / (double)(i + 1));
  }
  double ap = 0.0, prev_r = 0.0;
  for (size_t i = 0; i < recall.size(); ++i) {
    double env = 0.0;  // max precision at recall >= recall[i]
    for (size_t j = i; j < precision.size(); ++j) env = std::max(env, precision[j]);
    ap += (recall[i] - prev_r) * env;
    prev_r = recall[i];
  }
  return ap;
}

}  // namespace detail

struct MapResult {
  std::map<int, double> ap50;  // class id -> AP at IoU 0.50
  std::optional<double> map50;
  std::optional<double> map50_95;  // averaged over IoU 0.50:0.05:0.95
};

inline MapResult bbox_map(const std::vector<PredictedBox>& preds,
                          const std::vector<GroundTruthBox>& gts,
                          const std::vector<int>& class_ids = {kNest, kQRcode, kHouse}) {
  MapResult r;
  double sum50 = 0.0;
  int n50 = 0;
  double sum_all = 0.0;
  int n_all = 0;
  for (int cls : class_ids) {
    auto ap = detail::average_precision(preds, gts, cls, 0.50);
    if (ap) {
      r.ap50[cls] = *ap;
      sum50 += *ap;
      n50++;
    }
    double cls_sum = 0.0;
    int cls_n = 0;
    for (int t = 0; t < 10; ++t) {
      auto apt = detail::average_precision(preds, gts, cls, 0.50 + 0.05 * t);
      if (apt) {
        cls_sum += *apt;
        cls_n++;
      }
    }
    if (cls_n > 0) {
      sum_all += cls_sum / cls_n;
      n_all++;
    }
  }
  if (n50 > 0) r.map50 = sum50 / n50;
  if (n_all > 0) r.map50_95 = sum_all / n_all;
  return r;
}

// ---------------------------------------------------------------------------
// Precision / recall / F1

struct Prf1 {
  std::optional<double> precision, recall, f1;
};

inline Prf1 prf1(int tp, int fp, int fn) {
  AERO_CHECK(tp >= 0 && fp >= 0 && fn >= 0, "prf1: counts must be non-negative");
  Prf1 r;
  if (tp + fp > 0) r.precision = (double)tp / (double)(tp + fp);
  if (tp + fn > 0) r.recall = (double)tp / (double)(tp + fn);
  if (r.precision && r.recall && *r.precision + *r.recall > 0)
    r.f1 = 2.0 * *r.precision * *r.recall / (*r.precision + *r.recall);
  return r;
}

// ---------------------------------------------------------------------------
// Report writers

using ReportRows = std::vector<std::pair<std::string, std::string>>;

inline std::string format_metric(std::optional<double> v) {
  if (!v) return "n/a";
  std::ostringstream os;
  os.precision(17);
  os << *v;
  return os.str();
}

inline void write_kv_report(const std::string& path, const ReportRows& rows) {
  std::ofstream os(path);
  AERO_CHECK(os.good(), "write_kv_report: cannot open " << path);
  for (const auto& [k, v] : rows) os << k << "=" << v << "\n";
  AERO_CHECK(os.good(), "write_kv_report: write failed for " << path);
}

inline void write_csv(const std::string& path, const std::vector<std::string>& header,
                      const std::vector<std::vector<std::string>>& rows) {
  std::ofstream os(path);
  AERO_CHECK(os.good(), "write_csv: cannot open " << path);
  for (size_t i = 0; i < header.size(); ++i) os << (i ? "," : "") << header[i];
  os << "\n";
  for (const auto& row : rows) {
    AERO_CHECK(row.size() == header.size(), "write_csv: row width " << row.size()
                                                                    << " != header width "
                                                                    << header.size());
    for (size_t i = 0; i < row.size(); ++i) os << (i ? "," : "") << row[i];
    os << "\n";
  }
  AERO_CHECK(os.good(), "write_csv: write failed for " << path);
}

}  // namespace aero
