#pragma once

// Spatial ops on N,C,H,W maps: conv2d (im2col + GEMM), pooling, nearest
// upsampling, and modulated deformable convolution with bilinear sampling.

#include "aerolite/tensor.hpp"

namespace aero {

struct ConvSpec {
  int kernel_h = 1;
  int kernel_w = 1;
  int stride = 1;
  int padding = 0;
  int in_channels = 1;
  int out_channels = 1;

  void validate() const {
    AERO_CHECK(kernel_h > 0 && kernel_w > 0 && stride > 0 && in_channels > 0 &&
                   out_channels > 0 && padding >= 0,
               "ConvSpec: non-positive field (k=" << kernel_h << "x" << kernel_w
                                                  << " s=" << stride << " p=" << padding
                                                  << " cin=" << in_channels
                                                  << " cout=" << out_channels << ")");
  }

  // Output extent per (H_in - f + 2P)/S + 1; non-integral extents are rejected.
  int out_extent(int in, int f) const {
    int num = in - f + 2 * padding;
    AERO_CHECK(num >= 0, "conv: kernel " << f << " does not fit input extent " << in
                                         << " with padding " << padding);
    AERO_CHECK(num % stride == 0, "conv: non-integral output extent for input "
                                      << in << ", kernel " << f << ", padding " << padding
                                      << ", stride " << stride);
    return num / stride + 1;
  }
};

namespace detail {

// Column k = ci*kh*kw + ky*kw + kx; cols is K x (Ho*Wo), row-contiguous.
inline void im2col(const double* img, int c, int h, int w, const ConvSpec& sp, int ho, int wo,
                   std::vector<double>& cols) {
  int kh = sp.kernel_h, kw = sp.kernel_w;
  int64_t hw = (int64_t)ho * wo;
  cols.assign((size_t)c * kh * kw * hw, 0.0);
  for (int ci = 0; ci < c; ++ci)
    for (int ky = 0; ky < kh; ++ky)
      for (int kx = 0; kx < kw; ++kx) {
        double* row = cols.data() + ((size_t)(ci * kh + ky) * kw + kx) * hw;
        for (int oy = 0; oy < ho; ++oy) {
          int iy = oy * sp.stride - sp.padding + ky;
          if (iy < 0 || iy >= h) continue;
          for (int ox = 0; ox < wo; ++ox) {
            int ix = ox * sp.stride - sp.padding + kx;
            if (ix < 0 || ix >= w) continue;
            row[(int64_t)oy * wo + ox] = img[((int64_t)ci * h + iy) * w + ix];
          }
        }
      }
}

inline void col2im_add(const std::vector<double>& cols, int c, int h, int w, const ConvSpec& sp,
                       int ho, int wo, double* img) {
  int kh = sp.kernel_h, kw = sp.kernel_w;
  int64_t hw = (int64_t)ho * wo;
  for (int ci = 0; ci < c; ++ci)
    for (int ky = 0; ky < kh; ++ky)
      for (int kx = 0; kx < kw; ++kx) {
        const double* row = cols.data() + ((size_t)(ci * kh + ky) * kw + kx) * hw;
        for (int oy = 0; oy < ho; ++oy) {
          int iy = oy * sp.stride - sp.padding + ky;
          if (iy < 0 || iy >= h) continue;
          for (int ox = 0; ox < wo; ++ox) {
            int ix = ox * sp.stride - sp.padding + kx;
            if (ix < 0 || ix >= w) continue;
            img[((int64_t)ci * h + iy) * w + ix] += row[(int64_t)oy * wo + ox];
          }
        }
      }
}

}  // namespace detail

inline Tensor conv2d(const Tensor& input, const Tensor& weights, const ConvSpec& spec,
                     const Tensor& bias = Tensor()) {
  spec.validate();
  AERO_CHECK(input.ndim() == 4, "conv2d: input must be N,C,H,W, got " << shape_str(input.shape()));
  AERO_CHECK(weights.ndim() == 4 && weights.dim(0) == spec.out_channels &&
                 weights.dim(1) == spec.in_channels && weights.dim(2) == spec.kernel_h &&
                 weights.dim(3) == spec.kernel_w,
             "conv2d: weights " << shape_str(weights.shape()) << " do not match spec ("
                                << spec.out_channels << "," << spec.in_channels << ","
                                << spec.kernel_h << "," << spec.kernel_w << ")");
  AERO_CHECK(input.dim(1) == spec.in_channels,
             "conv2d: input " << shape_str(input.shape()) << " has " << input.dim(1)
                              << " channels, spec expects " << spec.in_channels);
  AERO_CHECK(!bias.defined() || (bias.ndim() == 1 && bias.dim(0) == spec.out_channels),
             "conv2d: bias shape mismatch");
  int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  int ho = spec.out_extent(h, spec.kernel_h);
  int wo = spec.out_extent(w, spec.kernel_w);
  int oc = spec.out_channels;
  int64_t k = (int64_t)c * spec.kernel_h * spec.kernel_w;
  int64_t hw = (int64_t)ho * wo;

  auto xn = input.node();
  auto wn = weights.node();
  auto bn = bias.defined() ? bias.node() : nullptr;
  std::vector<Tensor> ins = {input, weights};
  if (bias.defined()) ins.push_back(bias);

  ConvSpec sp = spec;
  Tensor out = make_result(
      {n, oc, ho, wo}, ins, [xn, wn, bn, sp, n, c, h, w, ho, wo, oc, k, hw](TensorNode& self) {
        xn->ensure_grad();
        wn->ensure_grad();
        if (bn) bn->ensure_grad();
        std::vector<double> cols, gcols((size_t)k * hw);
        for (int b = 0; b < n; ++b) {
          const double* gy = self.grad.data() + (size_t)b * oc * hw;
          detail::im2col(xn->data.data() + (size_t)b * c * h * w, c, h, w, sp, ho, wo, cols);
          // dW += dY * cols^T ; db += row sums
          for (int o = 0; o < oc; ++o) {
            const double* gyo = gy + (int64_t)o * hw;
            double* dw = wn->grad.data() + (int64_t)o * k;
            for (int64_t kk = 0; kk < k; ++kk) {
              const double* col = cols.data() + kk * hw;
              double acc = 0.0;
              for (int64_t i = 0; i < hw; ++i) acc += gyo[i] * col[i];
              dw[kk] += acc;
            }
            if (bn) {
              double acc = 0.0;
              for (int64_t i = 0; i < hw; ++i) acc += gyo[i];
              bn->grad[o] += acc;
            }
          }
          // dX = col2im(W^T * dY)
          std::fill(gcols.begin(), gcols.end(), 0.0);
          for (int64_t kk = 0; kk < k; ++kk) {
            double* gc = gcols.data() + kk * hw;
            for (int o = 0; o < oc; ++o) {
              double wv = wn->data[(int64_t)o * k + kk];
              if (wv == 0.0) continue;
              const double* gyo = gy + (int64_t)o * hw;
              for (int64_t i = 0; i < hw; ++i) gc[i] += wv * gyo[i];
            }
          }
          detail::col2im_add(gcols, c, h, w, sp, ho, wo,
                             xn->grad.data() + (size_t)b * c * h * w);
        }
      });

  std::vector<double> cols;
  for (int b = 0; b < n; ++b) {
    detail::im2col(input.data() + (size_t)b * c * h * w, c, h, w, sp, ho, wo, cols);
    double* y = out.data() + (size_t)b * oc * hw;
    for (int o = 0; o < oc; ++o) {
      double* yo = y + (int64_t)o * hw;
      double bv = bias.defined() ? bias[o] : 0.0;
      for (int64_t i = 0; i < hw; ++i) yo[i] = bv;
      const double* wrow = weights.data() + (int64_t)o * k;
      for (int64_t kk = 0; kk < k; ++kk) {
        double wv = wrow[kk];
        if (wv == 0.0) continue;
        const double* col = cols.data() + kk * hw;
        for (int64_t i = 0; i < hw; ++i) yo[i] += wv * col[i];
      }
    }
  }
  return out;
}

// Max pooling; gradient routes to the first-occurring maximum in row-major order.
inline Tensor max_pool2d(const Tensor& input, int kernel, int stride, int padding) {
  AERO_CHECK(input.ndim() == 4, "max_pool2d: input must be N,C,H,W");
  AERO_CHECK(kernel > 0 && stride > 0 && padding >= 0 && padding < kernel,
             "max_pool2d: bad kernel/stride/padding");
  int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  ConvSpec sp;
  sp.kernel_h = sp.kernel_w = kernel;
  sp.stride = stride;
  sp.padding = padding;
  int ho = sp.out_extent(h, kernel);
  int wo = sp.out_extent(w, kernel);
  auto xn = input.node();
  auto arg = std::make_shared<std::vector<int64_t>>((size_t)n * c * ho * wo);
  Tensor out = make_result({n, c, ho, wo}, {input}, [xn, arg](TensorNode& self) {
    xn->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) xn->grad[(*arg)[i]] += self.grad[i];
  });
  int64_t oi = 0;
  for (int b = 0; b < n; ++b)
    for (int ci = 0; ci < c; ++ci) {
      const double* img = input.data() + ((int64_t)b * c + ci) * h * w;
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox, ++oi) {
          double best = -INFINITY;
          int64_t besti = -1;
          for (int ky = 0; ky < kernel; ++ky) {
            int iy = oy * stride - padding + ky;
            if (iy < 0 || iy >= h) continue;
            for (int kx = 0; kx < kernel; ++kx) {
              int ix = ox * stride - padding + kx;
              if (ix < 0 || ix >= w) continue;
              double v = img[(int64_t)iy * w + ix];
              // besti must stay in range even when every candidate is NaN
              // (all comparisons false), so claim the first valid cell too
              if (besti < 0 || v > best) {
                best = v;
                besti = ((int64_t)b * c + ci) * h * w + (int64_t)iy * w + ix;
              }
            }
          }
          out[oi] = best;
          (*arg)[oi] = besti;
        }
    }
  return out;
}

// Per-channel mean over all spatial positions: N,C,H,W -> N,C.
inline Tensor pool_global_avg(const Tensor& input) {
  AERO_CHECK(input.ndim() == 4, "pool_global_avg: input must be N,C,H,W, got "
                                    << shape_str(input.shape()));
  int n = input.dim(0), c = input.dim(1);
  int64_t hw = (int64_t)input.dim(2) * input.dim(3);
  AERO_CHECK(hw > 0, "pool_global_avg: zero-sized spatial extent "
                         << shape_str(input.shape()));
  auto xn = input.node();
  Tensor out = make_result({n, c}, {input}, [xn, n, c, hw](TensorNode& self) {
    xn->ensure_grad();
    for (int64_t p = 0; p < (int64_t)n * c; ++p) {
      double g = self.grad[p] / (double)hw;
      for (int64_t i = 0; i < hw; ++i) xn->grad[p * hw + i] += g;
    }
  });
  for (int64_t p = 0; p < (int64_t)n * c; ++p) {
    double acc = 0.0;
    for (int64_t i = 0; i < hw; ++i) acc += input[p * hw + i];
    out[p] = acc / (double)hw;
  }
  return out;
}

// Per-channel max; gradient routes to the first occurrence in row-major order.
inline Tensor pool_global_max(const Tensor& input) {
  AERO_CHECK(input.ndim() == 4, "pool_global_max: input must be N,C,H,W, got "
                                    << shape_str(input.shape()));
  int n = input.dim(0), c = input.dim(1);
  int64_t hw = (int64_t)input.dim(2) * input.dim(3);
  AERO_CHECK(hw > 0, "pool_global_max: zero-sized spatial extent "
                         << shape_str(input.shape()));
  auto xn = input.node();
  auto arg = std::make_shared<std::vector<int64_t>>((size_t)n * c);
  Tensor out = make_result({n, c}, {input}, [xn, arg](TensorNode& self) {
    xn->ensure_grad();
    for (size_t p = 0; p < arg->size(); ++p) xn->grad[(*arg)[p]] += self.grad[p];
  });
  for (int64_t p = 0; p < (int64_t)n * c; ++p) {
    double best = -INFINITY;
    int64_t besti = p * hw;
    for (int64_t i = 0; i < hw; ++i)
      if (input[p * hw + i] > best) {
        best = input[p * hw + i];
        besti = p * hw + i;
      }
    out[p] = best;
    (*arg)[p] = besti;
  }
  return out;
}

// Per-position mean across channels: N,C,H,W -> N,1,H,W.
inline Tensor pool_channel_avg(const Tensor& input) {
  AERO_CHECK(input.ndim() == 4, "pool_channel_avg: input must be N,C,H,W");
  int n = input.dim(0), c = input.dim(1);
  int64_t hw = (int64_t)input.dim(2) * input.dim(3);
  auto xn = input.node();
  Tensor out = make_result({n, 1, input.dim(2), input.dim(3)}, {input},
                           [xn, n, c, hw](TensorNode& self) {
                             xn->ensure_grad();
                             for (int b = 0; b < n; ++b)
                               for (int64_t i = 0; i < hw; ++i) {
                                 double g = self.grad[b * hw + i] / (double)c;
                                 for (int k = 0; k < c; ++k)
                                   xn->grad[((int64_t)b * c + k) * hw + i] += g;
                               }
                           });
  for (int b = 0; b < n; ++b)
    for (int64_t i = 0; i < hw; ++i) {
      double acc = 0.0;
      for (int k = 0; k < c; ++k) acc += input[((int64_t)b * c + k) * hw + i];
      out[b * hw + i] = acc / (double)c;
    }
  return out;
}

// Per-position max across channels; gradient to the first-occurring max channel.
inline Tensor pool_channel_max(const Tensor& input) {
  AERO_CHECK(input.ndim() == 4, "pool_channel_max: input must be N,C,H,W");
  int n = input.dim(0), c = input.dim(1);
  int64_t hw = (int64_t)input.dim(2) * input.dim(3);
  auto xn = input.node();
  auto arg = std::make_shared<std::vector<int64_t>>((size_t)n * hw);
  Tensor out = make_result({n, 1, input.dim(2), input.dim(3)}, {input},
                           [xn, arg](TensorNode& self) {
                             xn->ensure_grad();
                             for (size_t i = 0; i < arg->size(); ++i)
                               xn->grad[(*arg)[i]] += self.grad[i];
                           });
  for (int b = 0; b < n; ++b)
    for (int64_t i = 0; i < hw; ++i) {
      double best = -INFINITY;
      int64_t besti = (int64_t)b * c * hw + i;
      for (int k = 0; k < c; ++k) {
        double v = input[((int64_t)b * c + k) * hw + i];
        if (v > best) {
          best = v;
          besti = ((int64_t)b * c + k) * hw + i;
        }
      }
      out[b * hw + i] = best;
      (*arg)[(size_t)b * hw + i] = besti;
    }
  return out;
}

inline Tensor upsample_nearest(const Tensor& input, int factor) {
  AERO_CHECK(input.ndim() == 4 && factor >= 1, "upsample_nearest: bad input");
  int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  int ho = h * factor, wo = w * factor;
  auto xn = input.node();
  Tensor out = make_result({n, c, ho, wo}, {input}, [xn, n, c, h, w, factor](TensorNode& self) {
    xn->ensure_grad();
    int ho = h * factor, wo = w * factor;
    for (int64_t p = 0; p < (int64_t)n * c; ++p)
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox)
          xn->grad[(p * h + oy / factor) * w + ox / factor] +=
              self.grad[(p * ho + oy) * wo + ox];
  });
  for (int64_t p = 0; p < (int64_t)n * c; ++p)
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox)
        out[(p * ho + oy) * wo + ox] = input[(p * h + oy / factor) * w + ox / factor];
  return out;
}

// Modulated deformable convolution (DCNv2-style). offsets: N,2*kh*kw,Ho,Wo with
// channel 2t = dy and 2t+1 = dx for tap t; modulation: N,kh*kw,Ho,Wo, already
// activated. Zero offsets with unit modulation reproduce conv2d bit-exactly.
inline Tensor deform_conv2d(const Tensor& input, const Tensor& weights, const ConvSpec& spec,
                            const Tensor& offsets, const Tensor& modulation,
                            const Tensor& bias = Tensor()) {
  spec.validate();
  AERO_CHECK(input.ndim() == 4 && input.dim(1) == spec.in_channels,
             "deform_conv2d: input " << shape_str(input.shape()) << " vs in_channels "
                                     << spec.in_channels);
  int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  int kh = spec.kernel_h, kw = spec.kernel_w, kk = kh * kw, oc = spec.out_channels;
  int ho = spec.out_extent(h, kh);
  int wo = spec.out_extent(w, kw);
  AERO_CHECK(weights.ndim() == 4 && weights.dim(0) == oc && weights.dim(1) == c &&
                 weights.dim(2) == kh && weights.dim(3) == kw,
             "deform_conv2d: weights " << shape_str(weights.shape()) << " mismatch");
  AERO_CHECK(offsets.ndim() == 4 && offsets.dim(0) == n && offsets.dim(1) == 2 * kk &&
                 offsets.dim(2) == ho && offsets.dim(3) == wo,
             "deform_conv2d: offsets " << shape_str(offsets.shape()) << " expected ("
                                       << n << "," << 2 * kk << "," << ho << "," << wo << ")");
  AERO_CHECK(modulation.ndim() == 4 && modulation.dim(0) == n && modulation.dim(1) == kk &&
                 modulation.dim(2) == ho && modulation.dim(3) == wo,
             "deform_conv2d: modulation " << shape_str(modulation.shape()) << " expected ("
                                          << n << "," << kk << "," << ho << "," << wo << ")");

  auto xn = input.node();
  auto wn = weights.node();
  auto on = offsets.node();
  auto mn = modulation.node();
  auto bn = bias.defined() ? bias.node() : nullptr;
  std::vector<Tensor> ins = {input, weights, offsets, modulation};
  if (bias.defined()) ins.push_back(bias);

  int64_t hwo = (int64_t)ho * wo;
  ConvSpec sp = spec;

  auto sample = [h, w](const double* img, double py, double px, double v[4], int iy[2],
                       int ix[2], double wt[4]) {
    int y0 = (int)std::floor(py), x0 = (int)std::floor(px);
    double ly = py - y0, lx = px - x0;
    iy[0] = y0;
    iy[1] = y0 + 1;
    ix[0] = x0;
    ix[1] = x0 + 1;
    wt[0] = (1 - ly) * (1 - lx);
    wt[1] = (1 - ly) * lx;
    wt[2] = ly * (1 - lx);
    wt[3] = ly * lx;
    for (int q = 0; q < 4; ++q) {
      int yy = iy[q / 2], xx = ix[q % 2];
      v[q] = (yy >= 0 && yy < h && xx >= 0 && xx < w) ? img[(int64_t)yy * w + xx] : 0.0;
    }
  };

  Tensor out = make_result(
      {n, oc, ho, wo}, ins,
      [xn, wn, on, mn, bn, sp, n, c, h, w, ho, wo, oc, kh, kw, kk, hwo, sample](TensorNode& self) {
        xn->ensure_grad();
        wn->ensure_grad();
        on->ensure_grad();
        mn->ensure_grad();
        if (bn) bn->ensure_grad();
        for (int b = 0; b < n; ++b) {
          const double* off = on->data.data() + (size_t)b * 2 * kk * hwo;
          const double* mod = mn->data.data() + (size_t)b * kk * hwo;
          const double* gy = self.grad.data() + (size_t)b * oc * hwo;
          for (int oy = 0; oy < ho; ++oy)
            for (int ox = 0; ox < wo; ++ox) {
              int64_t pix = (int64_t)oy * wo + ox;
              for (int t = 0; t < kk; ++t) {
                int ky = t / kw, kx = t % kw;
                double dy = off[(int64_t)(2 * t) * hwo + pix];
                double dx = off[(int64_t)(2 * t + 1) * hwo + pix];
                double m = mod[(int64_t)t * hwo + pix];
                double py = oy * sp.stride - sp.padding + ky + dy;
                double px = ox * sp.stride - sp.padding + kx + dx;
                for (int ci = 0; ci < c; ++ci) {
                  const double* img = xn->data.data() + ((int64_t)b * c + ci) * h * w;
                  double v[4], wt[4];
                  int iy[2], ix[2];
                  sample(img, py, px, v, iy, ix, wt);
                  double val = wt[0] * v[0] + wt[1] * v[1] + wt[2] * v[2] + wt[3] * v[3];
                  double ly = py - std::floor(py), lx = px - std::floor(px);
                  double dvy = (1 - lx) * (v[2] - v[0]) + lx * (v[3] - v[1]);
                  double dvx = (1 - ly) * (v[1] - v[0]) + ly * (v[3] - v[2]);
                  double s1 = 0.0;  // sum over output channels of g * w
                  for (int o = 0; o < oc; ++o) {
                    double g = gy[(int64_t)o * hwo + pix];
                    if (g == 0.0) continue;
                    double wv = wn->data[(((int64_t)o * c + ci) * kh + ky) * kw + kx];
                    s1 += g * wv;
                    wn->grad[(((int64_t)o * c + ci) * kh + ky) * kw + kx] += g * m * val;
                  }
                  if (s1 != 0.0) {
                    mn->grad[(size_t)b * kk * hwo + (int64_t)t * hwo + pix] += s1 * val;
                    on->grad[(size_t)b * 2 * kk * hwo + (int64_t)(2 * t) * hwo + pix] +=
                        s1 * m * dvy;
                    on->grad[(size_t)b * 2 * kk * hwo + (int64_t)(2 * t + 1) * hwo + pix] +=
                        s1 * m * dvx;
                    double* gimg = xn->grad.data() + ((int64_t)b * c + ci) * h * w;
                    for (int q = 0; q < 4; ++q) {
                      int yy = iy[q / 2], xx = ix[q % 2];
                      if (wt[q] != 0.0 && yy >= 0 && yy < h && xx >= 0 && xx < w)
                        gimg[(int64_t)yy * w + xx] += s1 * m * wt[q];
                    }
                  }
                }
              }
              if (bn)
                for (int o = 0; o < oc; ++o) bn->grad[o] += gy[(int64_t)o * hwo + pix];
            }
        }
      });

  for (int b = 0; b < n; ++b) {
    const double* off = offsets.data() + (size_t)b * 2 * kk * hwo;
    const double* mod = modulation.data() + (size_t)b * kk * hwo;
    double* y = out.data() + (size_t)b * oc * hwo;
    for (int o = 0; o < oc; ++o) {
      double bv = bias.defined() ? bias[o] : 0.0;
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          int64_t pix = (int64_t)oy * wo + ox;
          double acc = bv;
          for (int ci = 0; ci < c; ++ci) {
            const double* img = input.data() + ((int64_t)b * c + ci) * h * w;
            for (int t = 0; t < kk; ++t) {
              int ky = t / kw, kx = t % kw;
              double wv = weights[(((int64_t)o * c + ci) * kh + ky) * kw + kx];
              if (wv == 0.0) continue;
              double dy = off[(int64_t)(2 * t) * hwo + pix];
              double dx = off[(int64_t)(2 * t + 1) * hwo + pix];
              double m = mod[(int64_t)t * hwo + pix];
              double py = oy * sp.stride - sp.padding + ky + dy;
              double px = ox * sp.stride - sp.padding + kx + dx;
              double v[4], wt[4];
              int iy[2], ix[2];
              sample(img, py, px, v, iy, ix, wt);
              double val = 0.0;
              for (int q = 0; q < 4; ++q)
                if (wt[q] != 0.0) val += wt[q] * v[q];
              acc += wv * (m * val);
            }
          }
          y[(int64_t)o * hwo + pix] = acc;
        }
    }
  }
  return out;
}

}  // namespace aero
