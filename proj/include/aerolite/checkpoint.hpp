#pragma once

// Checkpoint format: little-endian binary. Header: magic "AMDN", u32 version,
// u32 config length + config as key=value text, u64 parameter count, then
// named blobs (u32 name length, name, u32 ndim, i32 dims, f64 data).
// Round trips are bit-exact.

#include <cstring>
#include <fstream>

#include "aerolite/model.hpp"

namespace aero {

inline constexpr char kCheckpointMagic[4] = {'A', 'M', 'D', 'N'};
inline constexpr uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const char* what) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  AERO_CHECK(is.good(), "checkpoint: truncated file while reading " << what);
  return v;
}

inline std::string config_text(const ModelConfig& c) {
  std::ostringstream os;
  os.precision(17);
  os << "input_size=" << c.input_size << "\n";
  os << "width=" << c.width << "\n";
  os << "num_classes=" << c.num_classes << "\n";
  os << "bottleneck_depth=" << c.bottleneck_depth << "\n";
  os << "conf_threshold=" << c.conf_threshold << "\n";
  os << "nms_iou=" << c.nms_iou << "\n";
  os << "anchors=";
  for (int s = 0; s < 3; ++s)
    for (int a = 0; a < 3; ++a)
      os << c.anchors[s][a].w << "," << c.anchors[s][a].h << (s == 2 && a == 2 ? "" : ",");
  os << "\n";
  return os.str();
}

inline ModelConfig parse_config(const std::string& text) {
  ModelConfig c;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    std::string key = line.substr(0, eq), val = line.substr(eq + 1);
    if (key == "input_size") c.input_size = std::stoi(val);
    else if (key == "width") c.width = std::stod(val);
    else if (key == "num_classes") c.num_classes = std::stoi(val);
    else if (key == "bottleneck_depth") c.bottleneck_depth = std::stoi(val);
    else if (key == "conf_threshold") c.conf_threshold = std::stod(val);
    else if (key == "nms_iou") c.nms_iou = std::stod(val);
    else if (key == "anchors") {
      std::istringstream vs(val);
      std::string tok;
      std::vector<double> nums;
      while (std::getline(vs, tok, ',')) nums.push_back(std::stod(tok));
      AERO_CHECK(nums.size() == 18, "checkpoint: anchors entry needs 18 values, got "
                                        << nums.size());
      for (int s = 0; s < 3; ++s)
        for (int a = 0; a < 3; ++a) {
          c.anchors[s][a].w = nums[(s * 3 + a) * 2];
          c.anchors[s][a].h = nums[(s * 3 + a) * 2 + 1];
        }
    }
  }
  return c;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Model& model) {
  std::ofstream os(path, std::ios::binary);
  AERO_CHECK(os.good(), "checkpoint: cannot open " << path << " for writing");
  os.write(kCheckpointMagic, 4);
  detail::write_pod(os, kCheckpointVersion);
  std::string cfg = detail::config_text(model.config());
  detail::write_pod(os, (uint32_t)cfg.size());
  os.write(cfg.data(), (std::streamsize)cfg.size());
  ParamList params = model.params();
  detail::write_pod(os, (uint64_t)params.size());
  for (const auto& p : params) {
    detail::write_pod(os, (uint32_t)p.name.size());
    os.write(p.name.data(), (std::streamsize)p.name.size());
    detail::write_pod(os, (uint32_t)p.tensor.ndim());
    for (int d = 0; d < p.tensor.ndim(); ++d) detail::write_pod(os, (int32_t)p.tensor.dim(d));
    os.write(reinterpret_cast<const char*>(p.tensor.data()),
             (std::streamsize)(p.tensor.size() * sizeof(double)));
  }
  AERO_CHECK(os.good(), "checkpoint: write to " << path << " failed");
}

inline Model load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  AERO_CHECK(is.good(), "checkpoint: cannot open " << path);
  char magic[4];
  is.read(magic, 4);
  AERO_CHECK(is.good() && std::memcmp(magic, kCheckpointMagic, 4) == 0,
             "checkpoint: " << path << " has bad magic bytes (expected AMDN)");
  uint32_t version = detail::read_pod<uint32_t>(is, "version");
  AERO_CHECK(version == kCheckpointVersion, "checkpoint: version " << version
                                                                   << " unsupported (expected "
                                                                   << kCheckpointVersion << ")");
  uint32_t clen = detail::read_pod<uint32_t>(is, "config length");
  std::string ctext(clen, '\0');
  is.read(ctext.data(), clen);
  AERO_CHECK(is.good(), "checkpoint: truncated config block");
  ModelConfig cfg = detail::parse_config(ctext);
  Model model(cfg);
  ParamList params = model.params();
  std::map<std::string, Tensor> by_name;
  for (auto& p : params) by_name[p.name] = p.tensor;

  uint64_t count = detail::read_pod<uint64_t>(is, "parameter count");
  AERO_CHECK(count == params.size(), "checkpoint: holds " << count << " parameters, model needs "
                                                          << params.size());
  for (uint64_t i = 0; i < count; ++i) {
    uint32_t nlen = detail::read_pod<uint32_t>(is, "name length");
    std::string name(nlen, '\0');
    is.read(name.data(), nlen);
    AERO_CHECK(is.good(), "checkpoint: truncated parameter name");
    auto it = by_name.find(name);
    AERO_CHECK(it != by_name.end(), "checkpoint: unknown parameter " << name);
    uint32_t ndim = detail::read_pod<uint32_t>(is, "ndim");
    Shape shape(ndim);
    for (uint32_t d = 0; d < ndim; ++d) shape[d] = detail::read_pod<int32_t>(is, "dim");
    Tensor& t = it->second;
    AERO_CHECK(shape == t.shape(), "checkpoint: parameter " << name << " has shape "
                                                            << shape_str(shape) << ", model expects "
                                                            << shape_str(t.shape()));
    is.read(reinterpret_cast<char*>(t.data()), (std::streamsize)(t.size() * sizeof(double)));
    AERO_CHECK(is.good(), "checkpoint: truncated data for " << name);
  }
  return model;
}

}  // namespace aero
