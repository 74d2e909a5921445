#pragma once

// Small RGB image type with PPM (P6) I/O and the feature extraction used by
// the active-labeling selector.

#include <cstdint>
#include <fstream>

#include "aerolite/tensor.hpp"

namespace aero {

struct Image {
  int width = 0, height = 0;
  std::vector<uint8_t> data;  // H*W*3, row-major RGB

  Image() = default;
  Image(int w, int h, uint8_t fill = 0) : width(w), height(h), data((size_t)w * h * 3, fill) {}

  uint8_t* px(int x, int y) { return data.data() + ((size_t)y * width + x) * 3; }
  const uint8_t* px(int x, int y) const { return data.data() + ((size_t)y * width + x) * 3; }

  void set(int x, int y, uint8_t r, uint8_t g, uint8_t b) {
    uint8_t* p = px(x, y);
    p[0] = r;
    p[1] = g;
    p[2] = b;
  }
};

inline void write_ppm(const std::string& path, const Image& img) {
  std::ofstream os(path, std::ios::binary);
  AERO_CHECK(os.good(), "write_ppm: cannot open " << path);
  os << "P6\n" << img.width << " " << img.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.data.data()), (std::streamsize)img.data.size());
  AERO_CHECK(os.good(), "write_ppm: write failed for " << path);
}

inline Image read_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  AERO_CHECK(is.good(), "read_ppm: cannot open " << path);
  std::string magic;
  is >> magic;
  AERO_CHECK(magic == "P6", "read_ppm: " << path << " is not a P6 PPM");
  int w, h, maxv;
  is >> w >> h >> maxv;
  AERO_CHECK(maxv == 255, "read_ppm: unsupported max value " << maxv);
  is.get();  // single whitespace after header
  Image img(w, h);
  is.read(reinterpret_cast<char*>(img.data.data()), (std::streamsize)img.data.size());
  AERO_CHECK(is.good(), "read_ppm: truncated pixel data in " << path);
  return img;
}

// N=1, C=3 float tensor in [0,1].
inline Tensor image_to_tensor(const Image& img) {
  Tensor t({1, 3, img.height, img.width});
  int64_t hw = (int64_t)img.height * img.width;
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      const uint8_t* p = img.px(x, y);
      int64_t i = (int64_t)y * img.width + x;
      t[i] = p[0] / 255.0;
      t[hw + i] = p[1] / 255.0;
      t[2 * hw + i] = p[2] / 255.0;
    }
  return t;
}

// Grayscale block-average downsample to n x n, flattened; the deterministic
// feature representation used by active labeling.
inline std::vector<double> gray_features(const Image& img, int n = 32) {
  std::vector<double> f((size_t)n * n, 0.0);
  std::vector<int64_t> cnt((size_t)n * n, 0);
  for (int y = 0; y < img.height; ++y) {
    int by = std::min(n - 1, y * n / std::max(1, img.height));
    for (int x = 0; x < img.width; ++x) {
      int bx = std::min(n - 1, x * n / std::max(1, img.width));
      const uint8_t* p = img.px(x, y);
      f[(size_t)by * n + bx] += (p[0] + p[1] + p[2]) / (3.0 * 255.0);
      cnt[(size_t)by * n + bx]++;
    }
  }
  for (size_t i = 0; i < f.size(); ++i)
    if (cnt[i]) f[i] /= (double)cnt[i];
  return f;
}

// Crosshair overlay marking a target position.
inline void draw_crosshair(Image& img, double cx, double cy, int radius = 12,
                           uint8_t r = 255, uint8_t g = 32, uint8_t b = 32) {
  int x = (int)std::lround(cx), y = (int)std::lround(cy);
  for (int d = -radius; d <= radius; ++d) {
    if (x + d >= 0 && x + d < img.width && y >= 0 && y < img.height) img.set(x + d, y, r, g, b);
    if (x >= 0 && x < img.width && y + d >= 0 && y + d < img.height) img.set(x, y + d, r, g, b);
  }
}

}  // namespace aero
