#pragma once

// Detection-side value types: boxes, IoU, greedy per-class NMS, instance masks.

#include <cstdint>
#include <optional>

#include "aerolite/tensor.hpp"

namespace aero {

// Class ids follow the dataset convention: 1 = Nest, 2 = QRcode, 3 = House.
enum ClassId : int { kNest = 1, kQRcode = 2, kHouse = 3 };
inline const char* class_name(int id) {
  switch (id) {
    case kNest: return "Nest";
    case kQRcode: return "QRcode";
    case kHouse: return "House";
    default: return "Unknown";
  }
}

// One decoded prediction; center/size in input pixel coordinates.
struct DetectionBox {
  int class_id = 0;
  double score = 0.0;
  double cx = 0.0, cy = 0.0, w = 0.0, h = 0.0;

  double x0() const { return cx - w / 2.0; }
  double y0() const { return cy - h / 2.0; }
  double x1() const { return cx + w / 2.0; }
  double y1() const { return cy + h / 2.0; }
};

inline double box_iou(const DetectionBox& a, const DetectionBox& b) {
  double ix = std::max(0.0, std::min(a.x1(), b.x1()) - std::max(a.x0(), b.x0()));
  double iy = std::max(0.0, std::min(a.y1(), b.y1()) - std::max(a.y0(), b.y0()));
  double inter = ix * iy;
  double uni = a.w * a.h + b.w * b.h - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

// Greedy per-class NMS; keeps scores descending.
inline std::vector<DetectionBox> nms(std::vector<DetectionBox> boxes, double iou_threshold) {
  std::stable_sort(boxes.begin(), boxes.end(),
                   [](const DetectionBox& a, const DetectionBox& b) { return a.score > b.score; });
  std::vector<DetectionBox> kept;
  std::vector<bool> dropped(boxes.size(), false);
  for (size_t i = 0; i < boxes.size(); ++i) {
    if (dropped[i]) continue;
    kept.push_back(boxes[i]);
    for (size_t j = i + 1; j < boxes.size(); ++j)
      if (!dropped[j] && boxes[j].class_id == boxes[i].class_id &&
          box_iou(boxes[i], boxes[j]) > iou_threshold)
        dropped[j] = true;
  }
  return kept;
}

// Binary instance mask aligned to the input frame.
struct InstanceMask {
  int class_id = 0;
  int width = 0, height = 0;
  std::vector<uint8_t> data;  // row-major, 0/1
  bool box_outside_image = false;

  uint8_t at(int x, int y) const { return data[(size_t)y * width + x]; }
  int64_t area() const {
    int64_t a = 0;
    for (uint8_t v : data) a += v;
    return a;
  }
  // Centroid of set pixels, using pixel-center coordinates.
  std::optional<std::pair<double, double>> centroid() const {
    double sx = 0, sy = 0;
    int64_t n = 0;
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x)
        if (at(x, y)) {
          sx += x + 0.5;
          sy += y + 0.5;
          ++n;
        }
    if (n == 0) return std::nullopt;
    return std::make_pair(sx / (double)n, sy / (double)n);
  }
};

using MaskSet = std::vector<InstanceMask>;

// Zeroes every mask pixel outside the instance's bounding box. Idempotent.
inline void crop_mask_to_box(InstanceMask& m, const DetectionBox& box) {
  int x0 = (int)std::floor(box.x0()), x1 = (int)std::ceil(box.x1());
  int y0 = (int)std::floor(box.y0()), y1 = (int)std::ceil(box.y1());
  if (x1 <= 0 || y1 <= 0 || x0 >= m.width || y0 >= m.height) {
    std::fill(m.data.begin(), m.data.end(), 0);
    m.box_outside_image = true;
    return;
  }
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x)
      if (x < x0 || x >= x1 || y < y0 || y >= y1) m.data[(size_t)y * m.width + x] = 0;
}

}  // namespace aero
