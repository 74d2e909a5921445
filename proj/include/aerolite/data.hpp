#pragma once

// Data layer: annotated samples, annotation-file ingestion, the synthetic
// scene/episode generator that stands in for the flight dataset, flip/blend
// augmentation, and the active-labeling selector.

#include <array>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <unordered_set>

#include <json.hpp>

#include "aerolite/detect.hpp"
#include "aerolite/image.hpp"

namespace aero {

struct Instance {
  int class_id = 0;           // 1 Nest, 2 QRcode, 3 House
  double x = 0, y = 0, w = 0, h = 0;  // tight box, pixels, top-left origin
  std::vector<uint8_t> mask;  // image-sized, row-major 0/1
};

struct Sample {
  Image image;
  std::vector<Instance> instances;
};

inline DetectionBox instance_box(const Instance& in, double score = 1.0) {
  DetectionBox b;
  b.class_id = in.class_id;
  b.score = score;
  b.cx = in.x + in.w / 2.0;
  b.cy = in.y + in.h / 2.0;
  b.w = in.w;
  b.h = in.h;
  return b;
}

// ---------------------------------------------------------------------------
// Polygon rasterization (even-odd scanline at pixel centers)

inline std::vector<uint8_t> rasterize_polygon(const std::vector<double>& poly, int width,
                                              int height) {
  AERO_CHECK(poly.size() >= 6 && poly.size() % 2 == 0,
             "rasterize_polygon: need >= 3 (x,y) pairs, got " << poly.size() << " values");
  std::vector<uint8_t> mask((size_t)width * height, 0);
  size_t n = poly.size() / 2;
  for (int y = 0; y < height; ++y) {
    double py = y + 0.5;
    std::vector<double> xs;
    for (size_t i = 0; i < n; ++i) {
      double x0 = poly[2 * i], y0 = poly[2 * i + 1];
      double x1 = poly[2 * ((i + 1) % n)], y1 = poly[2 * ((i + 1) % n) + 1];
      if ((y0 <= py && y1 > py) || (y1 <= py && y0 > py))
        xs.push_back(x0 + (py - y0) / (y1 - y0) * (x1 - x0));
    }
    std::sort(xs.begin(), xs.end());
    for (size_t i = 0; i + 1 < xs.size(); i += 2) {
      int a = (int)std::ceil(xs[i] - 0.5);
      int b = (int)std::floor(xs[i + 1] - 0.5);
      for (int x = std::max(0, a); x <= std::min(width - 1, b); ++x)
        mask[(size_t)y * width + x] = 1;
    }
  }
  return mask;
}

// ---------------------------------------------------------------------------
// Annotation ingestion (images / annotations / categories layout)

struct LoadResult {
  std::vector<Sample> samples;
  std::vector<std::string> diagnostics;
  int accepted = 0, rejected = 0;

  std::string summary() const {
    std::ostringstream os;
    os << "loaded " << accepted << " annotation(s), rejected " << rejected;
    return os.str();
  }
};

inline LoadResult load_annotations(const std::string& path) {
  std::ifstream is(path);
  AERO_CHECK(is.good(), "load_annotations: cannot open " << path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const std::exception& e) {
    AERO_CHECK(false, "load_annotations: " << path << " is not valid JSON: " << e.what());
  }
  LoadResult res;
  std::filesystem::path dir = std::filesystem::path(path).parent_path();

  std::map<int, size_t> image_index;  // image id -> sample index
  for (const auto& im : j.value("images", nlohmann::json::array())) {
    int id = im.at("id").get<int>();
    int w = im.at("width").get<int>();
    int h = im.at("height").get<int>();
    Sample s;
    std::string file = im.value("file_name", "");
    std::filesystem::path fp = dir / file;
    if (!file.empty() && std::filesystem::exists(fp)) {
      s.image = read_ppm(fp.string());
      if (s.image.width != w || s.image.height != h) {
        res.diagnostics.push_back("image " + std::to_string(id) +
                                  ": pixel file extent disagrees with declared size");
      }
    } else {
      s.image = Image(w, h, 0);
      if (!file.empty())
        res.diagnostics.push_back("image " + std::to_string(id) + ": missing pixel file " + file);
    }
    image_index[id] = res.samples.size();
    res.samples.push_back(std::move(s));
  }

  std::unordered_set<int> valid_categories;
  for (const auto& c : j.value("categories", nlohmann::json::array()))
    valid_categories.insert(c.at("id").get<int>());

  for (const auto& a : j.value("annotations", nlohmann::json::array())) {
    int aid = a.value("id", -1);
    auto reject = [&](const std::string& why) {
      res.diagnostics.push_back("annotation " + std::to_string(aid) + ": " + why);
      res.rejected++;
    };
    int cat = a.value("category_id", -1);
    if (!valid_categories.count(cat) || cat < kNest || cat > kHouse) {
      reject("invalid category id " + std::to_string(cat));
      continue;
    }
    int img_id = a.value("image_id", -1);
    auto it = image_index.find(img_id);
    if (it == image_index.end()) {
      reject("dangling image reference " + std::to_string(img_id));
      continue;
    }
    Sample& s = res.samples[it->second];
    auto bbox = a.value("bbox", std::vector<double>{});
    if (bbox.size() != 4 || bbox[2] <= 0 || bbox[3] <= 0) {
      reject("malformed bbox");
      continue;
    }
    auto seg = a.value("segmentation", nlohmann::json::array());
    if (seg.empty() || !seg[0].is_array() || seg[0].size() < 6 || seg[0].size() % 2 != 0) {
      reject("invalid polygon");
      continue;
    }
    std::vector<double> poly = seg[0].get<std::vector<double>>();
    Instance in;
    in.class_id = cat;
    in.x = bbox[0];
    in.y = bbox[1];
    in.w = bbox[2];
    in.h = bbox[3];
    in.mask = rasterize_polygon(poly, s.image.width, s.image.height);
    // the box must contain every mask pixel
    bool contained = true;
    for (int y = 0; y < s.image.height && contained; ++y)
      for (int x = 0; x < s.image.width; ++x)
        if (in.mask[(size_t)y * s.image.width + x] &&
            (x + 0.5 < in.x || x + 0.5 > in.x + in.w || y + 0.5 < in.y ||
             y + 0.5 > in.y + in.h)) {
          contained = false;
          break;
        }
    if (!contained) {
      reject("mask extends outside bbox");
      continue;
    }
    s.instances.push_back(std::move(in));
    res.accepted++;
  }
  return res;
}

// ---------------------------------------------------------------------------
// Synthetic scenes

struct SceneParams {
  int size = 640;
  bool has_house = true, has_nest = true, has_qr = true;
  double house_x = 120, house_y = 140, house_w = 400, house_h = 360;
  double nest_cx = 320, nest_cy = 320;
  double nest_w = 120, nest_h = 80;
  double nest_rotation = 0.0;  // radians
  double qr_size = 40;         // square, aspect 1:1
  double illumination = 1.0;
  double blur_radius = 0.0;
  uint64_t seed = 0;

  void validate() const {
    AERO_CHECK(size > 0, "SceneParams: size must be positive");
    AERO_CHECK(!has_nest || (nest_w > 0 && nest_h > 0), "SceneParams: nest sides must be positive");
    AERO_CHECK(!has_qr || qr_size > 0, "SceneParams: qr_size must be positive");
    AERO_CHECK(!(has_qr && has_nest) || qr_size <= std::min(nest_w, nest_h),
               "SceneParams: QR marker (" << qr_size << ") cannot exceed the nest ("
                                          << nest_w << "x" << nest_h << ")");
    AERO_CHECK(!has_house || (house_w > 0 && house_h > 0),
               "SceneParams: house footprint must be positive");
  }
};

namespace detail {

inline uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline bool in_rot_rect(double px, double py, double cx, double cy, double w, double h,
                        double theta) {
  double dx = px - cx, dy = py - cy;
  double c = std::cos(theta), s = std::sin(theta);
  double u = dx * c + dy * s, v = -dx * s + dy * c;
  return std::abs(u) <= w / 2.0 && std::abs(v) <= h / 2.0;
}

inline void box_blur(Image& img, int radius) {
  if (radius <= 0) return;
  Image src = img;
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      int sum[3] = {0, 0, 0}, cnt = 0;
      for (int dy = -radius; dy <= radius; ++dy)
        for (int dx = -radius; dx <= radius; ++dx) {
          int yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= img.height || xx < 0 || xx >= img.width) continue;
          const uint8_t* p = src.px(xx, yy);
          sum[0] += p[0];
          sum[1] += p[1];
          sum[2] += p[2];
          ++cnt;
        }
      img.set(x, y, (uint8_t)(sum[0] / cnt), (uint8_t)(sum[1] / cnt), (uint8_t)(sum[2] / cnt));
    }
}

inline Instance instance_from_mask(int class_id, std::vector<uint8_t> mask, int size) {
  Instance in;
  in.class_id = class_id;
  int minx = size, maxx = -1, miny = size, maxy = -1;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      if (mask[(size_t)y * size + x]) {
        minx = std::min(minx, x);
        maxx = std::max(maxx, x);
        miny = std::min(miny, y);
        maxy = std::max(maxy, y);
      }
  in.mask = std::move(mask);
  if (maxx >= 0) {
    in.x = minx;
    in.y = miny;
    in.w = maxx - minx + 1;
    in.h = maxy - miny + 1;
  }
  return in;
}

}  // namespace detail

// Renders house (dark rectangle), nest (white rectangle, optionally rotated),
// and QR marker (checkerboard square centered on the nest). Deterministic per
// seed; emits exact boxes and masks.
inline Sample synth_scene(const SceneParams& p, bool render_image = true) {
  p.validate();
  Sample s;
  int n = p.size;
  if (render_image) {
    s.image = Image(n, n);
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        uint64_t h = detail::mix64(p.seed ^ detail::mix64(((uint64_t)y << 32) | (uint32_t)x));
        int noise = (int)(h % 31) - 15;
        s.image.set(x, y, (uint8_t)std::clamp(92 + noise, 0, 255),
                    (uint8_t)std::clamp(112 + noise, 0, 255),
                    (uint8_t)std::clamp(84 + noise, 0, 255));
      }
  } else {
    s.image = Image(n, n);
  }

  auto paint = [&](const std::vector<uint8_t>& mask, uint8_t r, uint8_t g, uint8_t b) {
    if (!render_image) return;
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x)
        if (mask[(size_t)y * n + x]) s.image.set(x, y, r, g, b);
  };

  if (p.has_house) {
    std::vector<uint8_t> m((size_t)n * n, 0);
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x)
        if (x + 0.5 >= p.house_x && x + 0.5 <= p.house_x + p.house_w && y + 0.5 >= p.house_y &&
            y + 0.5 <= p.house_y + p.house_h)
          m[(size_t)y * n + x] = 1;
    paint(m, 62, 60, 66);
    Instance in = detail::instance_from_mask(kHouse, std::move(m), n);
    if (in.w > 0) s.instances.push_back(std::move(in));
  }
  if (p.has_nest) {
    std::vector<uint8_t> m((size_t)n * n, 0);
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x)
        if (detail::in_rot_rect(x + 0.5, y + 0.5, p.nest_cx, p.nest_cy, p.nest_w, p.nest_h,
                                p.nest_rotation))
          m[(size_t)y * n + x] = 1;
    paint(m, 241, 242, 240);
    Instance in = detail::instance_from_mask(kNest, std::move(m), n);
    if (in.w > 0) s.instances.push_back(std::move(in));
  }
  if (p.has_qr) {
    std::vector<uint8_t> m((size_t)n * n, 0);
    double half = p.qr_size / 2.0;
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x)
        if (std::abs(x + 0.5 - p.nest_cx) <= half && std::abs(y + 0.5 - p.nest_cy) <= half)
          m[(size_t)y * n + x] = 1;
    if (render_image) {
      // 8x8 modules with a one-module quiet border
      double module = p.qr_size / 10.0;
      for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
          if (!m[(size_t)y * n + x]) continue;
          int mx = (int)((x + 0.5 - (p.nest_cx - half)) / module);
          int my = (int)((y + 0.5 - (p.nest_cy - half)) / module);
          bool quiet = mx == 0 || my == 0 || mx >= 9 || my >= 9;
          bool dark = !quiet && (detail::mix64(p.seed ^ detail::mix64(((uint64_t)my << 8) | mx)) & 1);
          uint8_t v = dark ? 12 : 248;
          s.image.set(x, y, v, v, v);
        }
    }
    Instance in = detail::instance_from_mask(kQRcode, std::move(m), n);
    if (in.w > 0) s.instances.push_back(std::move(in));
  }

  if (render_image) {
    if (p.illumination != 1.0)
      for (auto& v : s.image.data)
        v = (uint8_t)std::clamp((int)std::lround(v * p.illumination), 0, 255);
    detail::box_blur(s.image, (int)std::lround(p.blur_radius));
  }
  return s;
}

// ---------------------------------------------------------------------------
// Dataset export: renders scenes to PPM files plus a polygon annotation file
// that load_annotations can read back.

inline void save_dataset(const std::string& dir, const std::vector<SceneParams>& scenes) {
  std::filesystem::create_directories(dir);
  nlohmann::json j;
  j["images"] = nlohmann::json::array();
  j["annotations"] = nlohmann::json::array();
  j["categories"] = {{{"id", kNest}, {"name", "Nest"}},
                     {{"id", kQRcode}, {"name", "QRcode"}},
                     {{"id", kHouse}, {"name", "House"}}};
  int ann_id = 1;
  for (size_t i = 0; i < scenes.size(); ++i) {
    const SceneParams& p = scenes[i];
    Sample s = synth_scene(p);
    std::string file = "img" + std::to_string(i) + ".ppm";
    write_ppm((std::filesystem::path(dir) / file).string(), s.image);
    j["images"].push_back({{"id", (int)i + 1},
                           {"file_name", file},
                           {"width", p.size},
                           {"height", p.size}});
    auto add = [&](int cls, std::vector<double> poly) {
      // tight bbox from the rasterized polygon so the box always contains it
      std::vector<uint8_t> m = rasterize_polygon(poly, p.size, p.size);
      int minx = p.size, maxx = -1, miny = p.size, maxy = -1;
      for (int y = 0; y < p.size; ++y)
        for (int x = 0; x < p.size; ++x)
          if (m[(size_t)y * p.size + x]) {
            minx = std::min(minx, x);
            maxx = std::max(maxx, x);
            miny = std::min(miny, y);
            maxy = std::max(maxy, y);
          }
      if (maxx < 0) return;
      j["annotations"].push_back(
          {{"id", ann_id++},
           {"image_id", (int)i + 1},
           {"category_id", cls},
           {"bbox", {(double)minx, (double)miny, (double)(maxx - minx + 1),
                     (double)(maxy - miny + 1)}},
           {"segmentation", {poly}}});
    };
    if (p.has_house)
      add(kHouse, {p.house_x, p.house_y, p.house_x + p.house_w, p.house_y,
                   p.house_x + p.house_w, p.house_y + p.house_h, p.house_x,
                   p.house_y + p.house_h});
    if (p.has_nest) {
      double c = std::cos(p.nest_rotation), sn = std::sin(p.nest_rotation);
      double hw = p.nest_w / 2.0, hh = p.nest_h / 2.0;
      std::vector<double> poly;
      for (auto [u, v] : {std::pair{-hw, -hh}, {hw, -hh}, {hw, hh}, {-hw, hh}}) {
        poly.push_back(p.nest_cx + u * c - v * sn);
        poly.push_back(p.nest_cy + u * sn + v * c);
      }
      add(kNest, poly);
    }
    if (p.has_qr) {
      double half = p.qr_size / 2.0;
      add(kQRcode, {p.nest_cx - half, p.nest_cy - half, p.nest_cx + half, p.nest_cy - half,
                    p.nest_cx + half, p.nest_cy + half, p.nest_cx - half, p.nest_cy + half});
    }
  }
  std::ofstream os(std::filesystem::path(dir) / "annotations.json");
  AERO_CHECK(os.good(), "save_dataset: cannot write annotations in " << dir);
  os << j.dump(1) << "\n";
}

// Deterministic small dataset used by the CLI and smoke tests.
inline std::vector<SceneParams> default_scene_set(int n, int size, uint64_t seed) {
  AERO_CHECK(n > 0 && size >= 32, "default_scene_set: need n > 0 and size >= 32");
  std::vector<SceneParams> out;
  for (int i = 0; i < n; ++i) {
    uint64_t h = detail::mix64(seed + (uint64_t)i);
    SceneParams p;
    p.size = size;
    p.seed = h;
    double s = size / 640.0;
    p.house_x = std::floor(size * 0.12 + (h % 17) * s);
    p.house_y = std::floor(size * 0.15 + (h / 17 % 13) * s);
    p.house_w = std::floor(size * 0.62);
    p.house_h = std::floor(size * 0.58);
    p.nest_cx = std::floor(p.house_x + p.house_w * (0.30 + 0.40 * (double)(h % 101) / 100.0));
    p.nest_cy = std::floor(p.house_y + p.house_h * (0.30 + 0.40 * (double)(h / 101 % 97) / 96.0));
    p.nest_w = std::max(8.0, 2.0 * std::round(size * (0.14 + 0.05 * (double)(h % 7) / 6.0) / 2.0));
    p.nest_h = std::max(8.0, 2.0 * std::round(size * (0.10 + 0.05 * (double)(h / 7 % 5) / 4.0) / 2.0));
    p.qr_size = std::max(4.0, std::floor(std::min(p.nest_w, p.nest_h) * 0.5));
    p.illumination = 0.9 + 0.2 * (double)(h % 11) / 10.0;
    out.push_back(p);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Episodes

struct EpisodeFrame {
  double timestamp = 0.0;
  bool gt_deviating = false;
  SceneParams scene;
  std::optional<std::array<double, 2>> target;  // true target point (nest center)
  int phase = 1;                                // descent phases P1..P5
};

struct Episode {
  double frame_interval = 0.1;
  double delta = 0.5;
  std::string l_source = "nest";
  std::vector<EpisodeFrame> frames;
  std::optional<double> onset;  // first deviating timestamp

  void recompute_onset() {
    onset.reset();
    for (const auto& f : frames)
      if (f.gt_deviating) {
        onset = f.timestamp;
        break;
      }
  }
  bool gt_label() const { return onset.has_value(); }
};

struct TrajectoryParams {
  double duration = 5.0;
  enum class Drift { None, Step, Ramp } drift = Drift::None;
  double step_time = 3.0;             // when the step drift kicks in
  double drift_dx = 0, drift_dy = 0;  // step: offset after step_time; ramp: pixels/second
  double scale_start = 1.0, scale_end = 1.0;  // nest size growth during descent
  int house_only_frames = 0;          // leading frames where only the house is visible
};

// Scripted landing. The per-frame deviation flag is derived from the rendered
// geometry (mask centroid distance vs the longer nest box side), so oracle
// perception reproduces it exactly, including the d/l == delta boundary.
inline Episode synth_episode(const SceneParams& base, const TrajectoryParams& traj,
                             double frame_interval = 0.1, double delta = 0.5) {
  AERO_CHECK(frame_interval > 0 && traj.duration >= 0, "synth_episode: bad timing");
  Episode ep;
  ep.frame_interval = frame_interval;
  ep.delta = delta;
  int nframes = (int)std::floor(traj.duration / frame_interval) + 1;
  double ccx = base.size / 2.0, ccy = base.size / 2.0;
  for (int i = 0; i < nframes; ++i) {
    EpisodeFrame f;
    f.timestamp = i * frame_interval;
    double u = nframes > 1 ? (double)i / (nframes - 1) : 0.0;
    f.phase = std::min(5, (int)(u * 5.0) + 1);

    double dx = 0, dy = 0;
    if (traj.drift == TrajectoryParams::Drift::Step && f.timestamp >= traj.step_time) {
      dx = traj.drift_dx;
      dy = traj.drift_dy;
    } else if (traj.drift == TrajectoryParams::Drift::Ramp) {
      dx = traj.drift_dx * f.timestamp;
      dy = traj.drift_dy * f.timestamp;
    }
    double sc = traj.scale_start + (traj.scale_end - traj.scale_start) * u;

    f.scene = base;
    f.scene.seed = base.seed + (uint64_t)i;
    // integer geometry keeps the rasterized centroid and box sides exact
    f.scene.nest_cx = std::lround(ccx + dx);
    f.scene.nest_cy = std::lround(ccy + dy);
    f.scene.nest_w = 2.0 * std::max(1.0, std::round(base.nest_w * sc / 2.0));
    f.scene.nest_h = 2.0 * std::max(1.0, std::round(base.nest_h * sc / 2.0));
    f.scene.nest_rotation = 0.0;
    if (i < traj.house_only_frames) {
      f.scene.has_nest = false;
      f.scene.has_qr = false;
    }

    if (f.scene.has_nest || f.scene.has_qr) {
      f.target = {{f.scene.nest_cx, f.scene.nest_cy}};
      double d = std::hypot(ccx - f.scene.nest_cx, ccy - f.scene.nest_cy);
      double l = std::max(f.scene.nest_w, f.scene.nest_h);
      f.gt_deviating = d / l > delta;
    } else if (f.scene.has_house) {
      bool inside = ccx >= f.scene.house_x && ccx <= f.scene.house_x + f.scene.house_w &&
                    ccy >= f.scene.house_y && ccy <= f.scene.house_y + f.scene.house_h;
      f.gt_deviating = !inside;
    } else {
      f.gt_deviating = true;
    }
    ep.frames.push_back(std::move(f));
  }
  ep.recompute_onset();
  return ep;
}

// ---------------------------------------------------------------------------
// Episode files (line-delimited text)

namespace detail {

inline std::string scene_kv(const SceneParams& p) {
  std::ostringstream os;
  os.precision(17);
  os << "size=" << p.size << " house=" << p.has_house << " nest=" << p.has_nest
     << " qr=" << p.has_qr << " house_x=" << p.house_x << " house_y=" << p.house_y
     << " house_w=" << p.house_w << " house_h=" << p.house_h << " nest_cx=" << p.nest_cx
     << " nest_cy=" << p.nest_cy << " nest_w=" << p.nest_w << " nest_h=" << p.nest_h
     << " rot=" << p.nest_rotation << " qr_size=" << p.qr_size << " illum=" << p.illumination
     << " blur=" << p.blur_radius << " seed=" << p.seed;
  return os.str();
}

inline std::map<std::string, std::string> parse_kv(std::istringstream& is) {
  std::map<std::string, std::string> kv;
  std::string tok;
  while (is >> tok) {
    auto eq = tok.find('=');
    AERO_CHECK(eq != std::string::npos, "episode file: malformed token '" << tok << "'");
    kv[tok.substr(0, eq)] = tok.substr(eq + 1);
  }
  return kv;
}

inline SceneParams scene_from_kv(const std::map<std::string, std::string>& kv) {
  SceneParams p;
  auto get = [&kv](const char* k, double dflt) {
    auto it = kv.find(k);
    return it == kv.end() ? dflt : std::stod(it->second);
  };
  p.size = (int)get("size", 640);
  p.has_house = get("house", 1) != 0;
  p.has_nest = get("nest", 1) != 0;
  p.has_qr = get("qr", 1) != 0;
  p.house_x = get("house_x", 120);
  p.house_y = get("house_y", 140);
  p.house_w = get("house_w", 400);
  p.house_h = get("house_h", 360);
  p.nest_cx = get("nest_cx", 320);
  p.nest_cy = get("nest_cy", 320);
  p.nest_w = get("nest_w", 120);
  p.nest_h = get("nest_h", 80);
  p.nest_rotation = get("rot", 0);
  p.qr_size = get("qr_size", 40);
  p.illumination = get("illum", 1);
  p.blur_radius = get("blur", 0);
  p.seed = (uint64_t)get("seed", 0);
  return p;
}

}  // namespace detail

inline void write_episode(const std::string& path, const Episode& ep) {
  std::ofstream os(path);
  AERO_CHECK(os.good(), "write_episode: cannot open " << path);
  os.precision(17);
  os << "episode interval=" << ep.frame_interval << " delta=" << ep.delta
     << " l_source=" << ep.l_source << "\n";
  for (const auto& f : ep.frames)
    os << "frame t=" << f.timestamp << " deviating=" << (f.gt_deviating ? 1 : 0)
       << " phase=" << f.phase << " " << detail::scene_kv(f.scene) << "\n";
}

inline Episode read_episode(const std::string& path) {
  std::ifstream is(path);
  AERO_CHECK(is.good(), "read_episode: cannot open " << path);
  Episode ep;
  std::string line;
  AERO_CHECK(std::getline(is, line), "read_episode: empty file " << path);
  {
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    AERO_CHECK(tag == "episode", "read_episode: " << path << " missing episode header");
    auto kv = detail::parse_kv(ls);
    AERO_CHECK(kv.count("interval") && kv.count("delta"),
               "read_episode: header needs interval and delta");
    ep.frame_interval = std::stod(kv.at("interval"));
    ep.delta = std::stod(kv.at("delta"));
    if (kv.count("l_source")) ep.l_source = kv.at("l_source");
  }
  double last_t = -1;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    AERO_CHECK(tag == "frame", "read_episode: unexpected line '" << line << "'");
    auto kv = detail::parse_kv(ls);
    EpisodeFrame f;
    f.timestamp = std::stod(kv.at("t"));
    AERO_CHECK(f.timestamp > last_t, "read_episode: timestamps must be strictly increasing");
    last_t = f.timestamp;
    f.gt_deviating = kv.at("deviating") != "0";
    if (kv.count("phase")) f.phase = std::stoi(kv.at("phase"));
    f.scene = detail::scene_from_kv(kv);
    if (f.scene.has_nest || f.scene.has_qr) f.target = {{f.scene.nest_cx, f.scene.nest_cy}};
    ep.frames.push_back(std::move(f));
  }
  ep.recompute_onset();
  return ep;
}

// ---------------------------------------------------------------------------
// Augmentation

// Horizontal flip; mirrors image, boxes, and masks consistently.
inline Sample augment_flip(const Sample& s) {
  Sample out;
  int w = s.image.width, h = s.image.height;
  out.image = Image(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const uint8_t* p = s.image.px(w - 1 - x, y);
      out.image.set(x, y, p[0], p[1], p[2]);
    }
  for (const Instance& in : s.instances) {
    Instance o = in;
    o.x = w - in.x - in.w;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        o.mask[(size_t)y * w + x] = in.mask[(size_t)y * w + (w - 1 - x)];
    out.instances.push_back(std::move(o));
  }
  return out;
}

// Convex image combination with weight lambda; keeps both annotation sets.
inline Sample augment_blend(const Sample& a, const Sample& b, double lambda) {
  AERO_CHECK(a.image.width == b.image.width && a.image.height == b.image.height,
             "augment_blend: image extents differ");
  AERO_CHECK(lambda >= 0.0 && lambda <= 1.0, "augment_blend: lambda must be in [0,1]");
  Sample out;
  out.image = Image(a.image.width, a.image.height);
  for (size_t i = 0; i < out.image.data.size(); ++i)
    out.image.data[i] =
        (uint8_t)std::clamp((int)std::lround(lambda * a.image.data[i] +
                                             (1.0 - lambda) * b.image.data[i]),
                            0, 255);
  out.instances = a.instances;
  out.instances.insert(out.instances.end(), b.instances.begin(), b.instances.end());
  return out;
}

// Beta(1.5, 1.5) blend weight.
inline double sample_blend_lambda(std::mt19937_64& rng) {
  auto gamma = [&rng](double k) {
    // Johnk-style sampler driven by raw engine draws for cross-platform determinism
    auto uni = [&rng] { return ((rng() >> 11) + 0.5) * (1.0 / 9007199254740992.0); };
    // k = 1.5 = 1 + 0.5: Gamma(1) + Gamma(0.5)
    double g1 = -std::log(uni());
    // Gamma(0.5) via squared standard normal / 2 (Box-Muller)
    double u1 = uni(), u2 = uni();
    double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    return g1 + 0.5 * z * z;
  };
  double x = gamma(1.5), y = gamma(1.5);
  return x / (x + y);
}

// ---------------------------------------------------------------------------
// Active labeling

// Index of the unlabeled element maximizing mean Euclidean distance to the
// labeled set; ties break to the lowest index.
inline std::optional<size_t> active_select(const std::vector<std::vector<double>>& labeled,
                                           const std::vector<std::vector<double>>& unlabeled) {
  if (unlabeled.empty()) return std::nullopt;
  AERO_CHECK(!labeled.empty(), "active_select: labeled set is empty");
  std::optional<size_t> best;
  double best_d = -1.0;
  for (size_t i = 0; i < unlabeled.size(); ++i) {
    double acc = 0.0;
    for (const auto& l : labeled) {
      AERO_CHECK(l.size() == unlabeled[i].size(), "active_select: feature length mismatch");
      double d2 = 0.0;
      for (size_t k = 0; k < l.size(); ++k) {
        double d = unlabeled[i][k] - l[k];
        d2 += d * d;
      }
      acc += std::sqrt(d2);
    }
    double meand = acc / (double)labeled.size();
    if (meand > best_d) {
      best_d = meand;
      best = i;
    }
  }
  return best;
}

struct ActiveLoopResult {
  std::vector<size_t> selected;  // pool indices in selection order
  std::vector<double> accuracies;
  bool converged = false;
};

// Alg.-style loop: train, then repeatedly pick the farthest pool sample,
// label it, and retrain until validation accuracy exceeds the threshold or
// the pool is exhausted.
inline ActiveLoopResult active_loop(
    const std::vector<std::vector<double>>& pool_features,
    std::vector<size_t> labeled_indices,
    const std::function<double(const std::vector<size_t>&)>& train_and_validate,
    double accuracy_threshold = 0.90) {
  ActiveLoopResult res;
  std::vector<bool> is_labeled(pool_features.size(), false);
  for (size_t i : labeled_indices) is_labeled[i] = true;
  double acc = train_and_validate(labeled_indices);
  res.accuracies.push_back(acc);
  while (acc <= accuracy_threshold) {
    std::vector<std::vector<double>> labeled, unlabeled;
    std::vector<size_t> unlabeled_ids;
    for (size_t i = 0; i < pool_features.size(); ++i)
      (is_labeled[i] ? labeled : unlabeled).push_back(pool_features[i]);
    for (size_t i = 0; i < pool_features.size(); ++i)
      if (!is_labeled[i]) unlabeled_ids.push_back(i);
    auto pick = active_select(labeled, unlabeled);
    if (!pick) break;  // pool exhausted without convergence
    size_t chosen = unlabeled_ids[*pick];
    is_labeled[chosen] = true;
    labeled_indices.push_back(chosen);
    res.selected.push_back(chosen);
    acc = train_and_validate(labeled_indices);
    res.accuracies.push_back(acc);
  }
  res.converged = acc > accuracy_threshold;
  return res;
}

}  // namespace aero
