#pragma once

// Deviation warning engine: per-frame decision rule, center crop, and the
// episode replay loop with inference-latency frame skipping.

#include <functional>
#include <optional>

#include "aerolite/data.hpp"
#include "aerolite/detect.hpp"
#include "aerolite/image.hpp"

namespace aero {

// What perception hands the decision rule for one frame.
struct SceneObservation {
  std::vector<DetectionBox> detections;
  MaskSet masks;
  double frame_timestamp = 0.0;
  double vision_center_x = 0.0, vision_center_y = 0.0;  // camera/image center
};

struct DeviationPolicy {
  double delta = 0.5;                  // deviation threshold on d / l
  std::string nest_length_source = "nest";  // "nest" or "qr": which box yields l

  void validate() const {
    AERO_CHECK(delta > 0.0, "DeviationPolicy: delta must be positive, got " << delta);
    AERO_CHECK(nest_length_source == "nest" || nest_length_source == "qr",
               "DeviationPolicy: nest_length_source must be nest or qr, got "
                   << nest_length_source);
  }
};

struct WarningEvent {
  bool deviating = false;
  std::string reason = "none";  // none | offset-exceeds-threshold |
                                // house-center-miss | target-outside-crop
  std::optional<double> distance;       // d, pixels
  std::optional<double> target_length;  // l, pixels
  double frame_timestamp = 0.0;
};

namespace detail {

// Highest-scoring detection of a class that owns a mask; returns mask index.
inline std::optional<size_t> best_mask_of_class(const SceneObservation& obs, int class_id) {
  std::optional<size_t> best;
  double best_score = -1.0;
  double best_area = -1.0;
  for (size_t i = 0; i < obs.masks.size(); ++i) {
    if (obs.masks[i].class_id != class_id) continue;
    size_t ar = obs.masks[i].area();
    if (ar == 0) continue;
    double score = i < obs.detections.size() && obs.detections[i].class_id == class_id
                       ? obs.detections[i].score
                       : 0.0;
    if (score > best_score || (score == best_score && (double)ar > best_area)) {
      best_score = score;
      best_area = (double)ar;
      best = i;
    }
  }
  return best;
}

}  // namespace detail

// Per-frame decision. Preference order: nest (or QR) present -> offset test
// d / l > delta with the target located at the mask centroid and l the longer
// side of the reference box; house only -> camera center must fall inside a
// house mask; nothing visible -> deviating with reason target-outside-crop.
inline WarningEvent decide(const SceneObservation& obs, const DeviationPolicy& policy) {
  policy.validate();
  WarningEvent ev;
  ev.frame_timestamp = obs.frame_timestamp;

  int primary = policy.nest_length_source == "qr" ? kQRcode : kNest;
  int secondary = primary == kNest ? kQRcode : kNest;
  std::optional<size_t> target_idx = detail::best_mask_of_class(obs, primary);
  int length_class = primary;
  if (!target_idx) {
    target_idx = detail::best_mask_of_class(obs, secondary);
    length_class = secondary;
  }

  if (target_idx) {
    const InstanceMask& m = obs.masks[*target_idx];
    auto c = m.centroid();
    AERO_CHECK(c.has_value(), "decide: selected mask is empty");
    double tx = c->first, ty = c->second;
    double l = 0.0;
    for (const DetectionBox& b : obs.detections)
      if (b.class_id == length_class) l = std::max(l, std::max(b.w, b.h));
    if (l <= 0.0) l = std::max(1.0, std::max((double)m.width, (double)m.height));
    double d = std::hypot(obs.vision_center_x - tx, obs.vision_center_y - ty);
    ev.distance = d;
    ev.target_length = l;
    if (d / l > policy.delta) {  // strict: the boundary d / l == delta is nominal
      ev.deviating = true;
      ev.reason = "offset-exceeds-threshold";
    }
    return ev;
  }

  bool any_house = false;
  for (const InstanceMask& m : obs.masks) {
    if (m.class_id != kHouse || m.area() == 0) continue;
    any_house = true;
    int x = (int)std::floor(obs.vision_center_x);
    int y = (int)std::floor(obs.vision_center_y);
    if (x >= 0 && x < m.width && y >= 0 && y < m.height && m.at(x, y)) return ev;  // inside
  }
  if (any_house) {
    ev.deviating = true;
    ev.reason = "house-center-miss";
  } else {
    ev.deviating = true;
    ev.reason = "target-outside-crop";
  }
  return ev;
}

// ---------------------------------------------------------------------------
// Center crop

// Fixed central window (e.g. 1920x1080 -> columns 640..1279, rows 220..859).
inline Image center_crop(const Image& img, int crop = 640) {
  AERO_CHECK(img.width >= crop && img.height >= crop,
             "center_crop: image " << img.width << "x" << img.height
                                   << " smaller than crop " << crop);
  int x0 = (img.width - crop) / 2, y0 = (img.height - crop) / 2;
  Image out(crop, crop);
  for (int y = 0; y < crop; ++y)
    for (int x = 0; x < crop; ++x) {
      const uint8_t* p = img.px(x0 + x, y0 + y);
      out.set(x, y, p[0], p[1], p[2]);
    }
  return out;
}

// ---------------------------------------------------------------------------
// Oracle perception: perfect detections and masks straight from annotations.

inline SceneObservation make_oracle_observation(const Sample& sample, double timestamp = 0.0) {
  SceneObservation obs;
  obs.frame_timestamp = timestamp;
  obs.vision_center_x = sample.image.width / 2.0;
  obs.vision_center_y = sample.image.height / 2.0;
  for (const Instance& in : sample.instances) {
    obs.detections.push_back(instance_box(in));
    InstanceMask m;
    m.class_id = in.class_id;
    m.width = sample.image.width;
    m.height = sample.image.height;
    m.data = in.mask;
    obs.masks.push_back(std::move(m));
  }
  return obs;
}

// ---------------------------------------------------------------------------
// Episode replay

struct FrameDecision {
  int frame_index = -1;  // index into episode.frames
  WarningEvent event;
};

struct EpisodeResult {
  std::vector<FrameDecision> decisions;  // processed frames only, in order
  std::optional<double> warning_time;    // first deviating decision timestamp
  bool warned = false;
  int frames_processed = 0, frames_total = 0;
};

using PerceiveFn = std::function<SceneObservation(const EpisodeFrame&)>;

inline PerceiveFn oracle_perceiver() {
  return [](const EpisodeFrame& f) {
    Sample s = synth_scene(f.scene, /*render_image=*/false);
    return make_oracle_observation(s, f.timestamp);
  };
}

// Replays an episode with a fixed inference latency. While a frame is being
// processed the camera keeps capturing; when processing finishes at time T the
// next frame handled is the latest one captured at or before T. latency is a
// configured number, not wall clock, so replays are deterministic.
inline EpisodeResult run_episode(const Episode& ep, const PerceiveFn& perceive,
                                 const DeviationPolicy& policy, double latency,
                                 std::ostream* alert_stream = nullptr) {
  AERO_CHECK(latency >= 0.0, "run_episode: latency must be non-negative");
  policy.validate();
  EpisodeResult res;
  res.frames_total = (int)ep.frames.size();
  size_t i = 0;
  while (i < ep.frames.size()) {
    const EpisodeFrame& f = ep.frames[i];
    WarningEvent ev = decide(perceive(f), policy);
    ev.frame_timestamp = f.timestamp;
    res.decisions.push_back({(int)i, ev});
    res.frames_processed++;
    if (ev.deviating && !res.warned) {
      res.warned = true;
      res.warning_time = f.timestamp;
    }
    if (alert_stream) {
      std::ostream& os = *alert_stream;
      os.precision(17);
      os << "t=" << f.timestamp << " deviating=" << (ev.deviating ? 1 : 0)
         << " reason=" << ev.reason;
      if (ev.distance) os << " d=" << *ev.distance;
      if (ev.target_length) os << " l=" << *ev.target_length;
      os << "\n";
    }
    // inference occupies [t, t + latency); resume with the newest frame
    // captured by then, skipping anything older
    double ready = f.timestamp + latency;
    size_t next = i + 1;
    while (next + 1 < ep.frames.size() && ep.frames[next + 1].timestamp <= ready) ++next;
    i = next;
  }
  return res;
}

}  // namespace aero
