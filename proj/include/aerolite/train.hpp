#pragma once

// Optimizer and training loop: Adam with decoupled-style L2 on the gradient,
// cosine learning-rate schedule, per-image graph construction with additive
// gradient accumulation, and a NaN guard that restores the last good state.

#include <functional>
#include <random>

#include "aerolite/checkpoint.hpp"
#include "aerolite/data.hpp"
#include "aerolite/image.hpp"
#include "aerolite/losses.hpp"
#include "aerolite/model.hpp"

namespace aero {

inline double cosine_lr(int step, int total_steps, double lr0, double floor = 0.0) {
  AERO_CHECK(total_steps > 0 && step >= 0, "cosine_lr: bad step indices");
  if (step >= total_steps) return floor;
  double t = (double)step / (double)total_steps;
  return floor + 0.5 * (lr0 - floor) * (1.0 + std::cos(3.14159265358979323846 * t));
}

struct AdamConfig {
  double lr = 0.001;
  double beta1 = 0.9, beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0005;
};

class Adam {
 public:
  Adam(ParamList params, AdamConfig cfg = {}) : params_(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) {
      m_.emplace_back(p.tensor.size(), 0.0);
      v_.emplace_back(p.tensor.size(), 0.0);
    }
  }

  const AdamConfig& config() const { return cfg_; }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  // One update using the gradients currently stored on the parameters.
  void step(double lr) {
    ++t_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
    double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
    for (size_t i = 0; i < params_.size(); ++i) {
      Tensor& p = params_[i].tensor;
      double* w = p.data();
      const double* g0 = p.grad().data();
      for (int64_t k = 0; k < p.size(); ++k) {
        double g = g0[k] + cfg_.weight_decay * w[k];
        m_[i][k] = cfg_.beta1 * m_[i][k] + (1.0 - cfg_.beta1) * g;
        v_[i][k] = cfg_.beta2 * v_[i][k] + (1.0 - cfg_.beta2) * g * g;
        double mhat = m_[i][k] / bc1, vhat = v_[i][k] / bc2;
        w[k] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
  }

 private:
  ParamList params_;
  AdamConfig cfg_;
  long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// ---------------------------------------------------------------------------
// Training loop

struct TrainItem {
  Tensor input;                  // 1 x 3 x H x W
  std::vector<GtBox> boxes;      // detection targets
  Tensor seg_target;             // 1 x C x H/8 x W/8 one-hot-ish masks
};

struct TrainConfig {
  int iters = 300;
  int batch_size = 4;
  double lr = 0.001;
  double lr_floor = 0.0;
  uint64_t seed = 0;
  double seg_weight = 1.0;  // total = detection + seg_weight * segmentation
  std::string log_csv;      // optional per-step loss log
  std::string nan_checkpoint;  // where the last good state goes on NaN abort
};

struct TrainResult {
  std::vector<double> losses;  // one entry per step (batch mean)
  bool aborted_on_nan = false;
  int steps_run = 0;
};

// Seg targets are per-class binary planes at 1/8 scale built from instance
// masks by block max-pooling.
inline Tensor make_seg_target(const Sample& s, int num_classes, int stride = 8) {
  int H = s.image.height / stride, W = s.image.width / stride;
  Tensor t({1, num_classes, H, W});
  for (const Instance& in : s.instances) {
    if (in.class_id < 1 || in.class_id > num_classes) continue;
    int c = in.class_id - 1;
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        uint8_t any = 0;
        for (int dy = 0; dy < stride && !any; ++dy)
          for (int dx = 0; dx < stride; ++dx)
            if (in.mask[(size_t)(y * stride + dy) * s.image.width + (x * stride + dx)]) {
              any = 1;
              break;
            }
        if (any) t[((int64_t)c * H + y) * W + x] = 1.0;
      }
  }
  return t;
}

inline std::vector<GtBox> make_gt_boxes(const Sample& s) {
  std::vector<GtBox> out;
  for (const Instance& in : s.instances) {
    GtBox g;
    g.class_id = in.class_id;
    g.cx = in.x + in.w / 2.0;
    g.cy = in.y + in.h / 2.0;
    g.w = in.w;
    g.h = in.h;
    out.push_back(g);
  }
  return out;
}

inline TrainItem make_train_item(const Sample& s, int num_classes) {
  TrainItem it;
  it.input = image_to_tensor(s.image);
  it.boxes = make_gt_boxes(s);
  it.seg_target = make_seg_target(s, num_classes);
  return it;
}

inline TrainResult train(Model& model, const std::vector<TrainItem>& items, TrainConfig tc,
                         const DetLossWeights* det_weights = nullptr) {
  AERO_CHECK(!items.empty(), "train: no training items");
  AERO_CHECK(tc.iters >= 0 && tc.batch_size > 0,
             "train: iters must be non-negative and batch_size positive");
  TrainResult res;
  DetLossWeights w = det_weights ? *det_weights
                                 : DetLossWeights(3, model.config().num_classes,
                                                  model.config().input_size,
                                                  model.config().input_size);
  Adam opt(model.params(), AdamConfig{tc.lr, 0.9, 0.999, 1e-8, 0.0005});
  std::mt19937_64 rng(tc.seed);
  std::ofstream log;
  if (!tc.log_csv.empty()) {
    log.open(tc.log_csv);
    AERO_CHECK(log.good(), "train: cannot open loss log " << tc.log_csv);
    log << "step,lr,loss\n";
    log.precision(17);
  }

  // epoch-style sampling: seeded shuffles, no replacement inside an epoch
  std::vector<size_t> order(items.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  size_t cursor = order.size();  // forces a shuffle on first use

  for (int step = 0; step < tc.iters; ++step) {
    opt.zero_grad();
    double batch_loss = 0.0;
    int bs = std::min<int>(tc.batch_size, (int)items.size());
    for (int b = 0; b < bs; ++b) {
      if (cursor >= order.size()) {
        for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
        cursor = 0;
      }
      size_t idx = order[cursor++];
      const TrainItem& it = items[idx];
      ForwardResult fwd = model.forward(it.input);
      Tensor det = detection_loss(model.config(), fwd.raw, it.boxes, w);
      Tensor seg = segmentation_loss_logits(fwd.raw.seg_logits, it.seg_target);
      Tensor total = add(det, scale(seg, tc.seg_weight));
      Tensor loss = scale(total, 1.0 / bs);  // batch mean via additive grads
      backward(loss);
      batch_loss += total.value() / bs;
    }
    if (!std::isfinite(batch_loss)) {
      res.aborted_on_nan = true;
      if (!tc.nan_checkpoint.empty()) save_checkpoint(tc.nan_checkpoint, model);
      std::cerr << "train: non-finite loss at step " << step << ", aborting\n";
      break;
    }
    double lr = cosine_lr(step, tc.iters, tc.lr, tc.lr_floor);
    opt.step(lr);
    res.losses.push_back(batch_loss);
    res.steps_run++;
    if (log.is_open()) log << step << "," << lr << "," << batch_loss << "\n";
  }
  return res;
}

}  // namespace aero
