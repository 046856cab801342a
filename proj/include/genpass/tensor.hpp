#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "genpass/errors.hpp"

namespace genpass {

// Dense row-major CHW tensor of doubles. Everything in the model is small
// (32x32 images, a few dozen channels), so there is no view machinery;
// operations allocate their outputs.
class Tensor {
 public:
  Tensor() = default;
  Tensor(int channels, int height, int width, double fill = 0.0)
      : channels_(channels), height_(height), width_(width) {
    if (channels < 0 || height < 0 || width < 0)
      throw ShapeError("Tensor: negative dimension");
    data_.assign(static_cast<std::size_t>(channels) * height * width, fill);
  }

  int channels() const { return channels_; }
  int height() const { return height_; }
  int width() const { return width_; }
  std::size_t size() const { return data_.size(); }

  double& at(int c, int y, int x) { return data_[index(c, y, x)]; }
  double at(int c, int y, int x) const { return data_[index(c, y, x)]; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  bool same_shape(const Tensor& o) const {
    return channels_ == o.channels_ && height_ == o.height_ &&
           width_ == o.width_;
  }

  std::string shape_str() const {
    return std::to_string(channels_) + "x" + std::to_string(height_) + "x" +
           std::to_string(width_);
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

 private:
  std::size_t index(int c, int y, int x) const {
    return (static_cast<std::size_t>(c) * height_ + y) * width_ + x;
  }
  int channels_ = 0, height_ = 0, width_ = 0;
  std::vector<double> data_;
};

inline void require_same_shape(const Tensor& a, const Tensor& b,
                               const char* where) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(where) + ": shape mismatch " + a.shape_str() +
                     " vs " + b.shape_str());
}

// Convolution / transposed-convolution weights. Layout is
// [out_channel][in_channel][ky][kx]; stride belongs to the bank because the
// generative direction uses it as the upsampling factor.
struct FilterBank {
  int in_channels = 0;
  int out_channels = 0;
  int kernel_h = 0;
  int kernel_w = 0;
  int stride = 1;
  std::vector<double> weights;
  std::vector<double> bias;

  FilterBank() = default;
  FilterBank(int out_ch, int in_ch, int kh, int kw, int stride_ = 1)
      : in_channels(in_ch),
        out_channels(out_ch),
        kernel_h(kh),
        kernel_w(kw),
        stride(stride_) {
    if (out_ch <= 0 || in_ch <= 0 || kh <= 0 || kw <= 0 || stride_ <= 0)
      throw ShapeError("FilterBank: non-positive dimension");
    weights.assign(
        static_cast<std::size_t>(out_ch) * in_ch * kh * kw, 0.0);
    bias.assign(static_cast<std::size_t>(out_ch), 0.0);
  }

  double& w(int oc, int ic, int ky, int kx) {
    return weights[((static_cast<std::size_t>(oc) * in_channels + ic) *
                        kernel_h +
                    ky) *
                       kernel_w +
                   kx];
  }
  double w(int oc, int ic, int ky, int kx) const {
    return weights[((static_cast<std::size_t>(oc) * in_channels + ic) *
                        kernel_h +
                    ky) *
                       kernel_w +
                   kx];
  }
};

// Valid-range cross-correlation with symmetric zero padding, stride 1.
// out(oc, oy, ox) = bias[oc] + sum_{ic,ky,kx} in(ic, oy+ky-p, ox+kx-p) * w.
inline Tensor conv2d(const Tensor& input, const FilterBank& f, int padding) {
  if (input.channels() != f.in_channels)
    throw ShapeError("conv2d: input channels " +
                     std::to_string(input.channels()) + " != bank in " +
                     std::to_string(f.in_channels));
  if (f.stride != 1) throw ShapeError("conv2d: bank stride must be 1");
  if (padding < 0) throw ShapeError("conv2d: negative padding");
  const int oh = input.height() + 2 * padding - f.kernel_h + 1;
  const int ow = input.width() + 2 * padding - f.kernel_w + 1;
  if (oh <= 0 || ow <= 0)
    throw ShapeError("conv2d: kernel larger than padded input");
  Tensor out(f.out_channels, oh, ow);
  for (int oc = 0; oc < f.out_channels; ++oc) {
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        double acc = f.bias[oc];
        for (int ic = 0; ic < f.in_channels; ++ic) {
          for (int ky = 0; ky < f.kernel_h; ++ky) {
            const int iy = oy + ky - padding;
            if (iy < 0 || iy >= input.height()) continue;
            for (int kx = 0; kx < f.kernel_w; ++kx) {
              const int ix = ox + kx - padding;
              if (ix < 0 || ix >= input.width()) continue;
              acc += input.at(ic, iy, ix) * f.w(oc, ic, ky, kx);
            }
          }
        }
        out.at(oc, oy, ox) = acc;
      }
    }
  }
  return out;
}

// Transposed convolution (scatter semantics): each input element adds its
// value times the kernel into a stride-spaced output grid. Padding is fixed
// to (k - s) / 2 per axis so the output is exactly input * stride; this
// requires k >= s and k - s even. With stride 1 and an odd symmetric kernel
// this coincides with conv2d of the spatially flipped kernel.
inline Tensor transposed_conv2d(const Tensor& input, const FilterBank& f) {
  if (input.channels() != f.in_channels)
    throw ShapeError("transposed_conv2d: input channels " +
                     std::to_string(input.channels()) + " != bank in " +
                     std::to_string(f.in_channels));
  const int s = f.stride;
  if (f.kernel_h < s || f.kernel_w < s || (f.kernel_h - s) % 2 != 0 ||
      (f.kernel_w - s) % 2 != 0)
    throw ShapeError("transposed_conv2d: need kernel >= stride and same "
                     "parity (got k=" +
                     std::to_string(f.kernel_h) + "x" +
                     std::to_string(f.kernel_w) + ", s=" + std::to_string(s) +
                     ")");
  const int pad_y = (f.kernel_h - s) / 2;
  const int pad_x = (f.kernel_w - s) / 2;
  const int oh = input.height() * s;
  const int ow = input.width() * s;
  Tensor out(f.out_channels, oh, ow);
  for (int oc = 0; oc < f.out_channels; ++oc) {
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x) out.at(oc, y, x) = f.bias[oc];
  }
  for (int ic = 0; ic < f.in_channels; ++ic) {
    for (int iy = 0; iy < input.height(); ++iy) {
      for (int ix = 0; ix < input.width(); ++ix) {
        const double v = input.at(ic, iy, ix);
        if (v == 0.0) continue;
        for (int oc = 0; oc < f.out_channels; ++oc) {
          for (int ky = 0; ky < f.kernel_h; ++ky) {
            const int oy = iy * s + ky - pad_y;
            if (oy < 0 || oy >= oh) continue;
            for (int kx = 0; kx < f.kernel_w; ++kx) {
              const int ox = ix * s + kx - pad_x;
              if (ox < 0 || ox >= ow) continue;
              out.at(oc, oy, ox) += v * f.w(oc, ic, ky, kx);
            }
          }
        }
      }
    }
  }
  return out;
}

inline Tensor relu(const Tensor& t) {
  Tensor out = t;
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  return out;
}

// 2x2 max pooling, stride 2. Spatial dims must be even.
inline Tensor maxpool2(const Tensor& t) {
  if (t.height() % 2 != 0 || t.width() % 2 != 0)
    throw ShapeError("maxpool2: odd spatial size " + t.shape_str());
  Tensor out(t.channels(), t.height() / 2, t.width() / 2);
  for (int c = 0; c < t.channels(); ++c)
    for (int y = 0; y < out.height(); ++y)
      for (int x = 0; x < out.width(); ++x)
        out.at(c, y, x) =
            std::max(std::max(t.at(c, 2 * y, 2 * x), t.at(c, 2 * y, 2 * x + 1)),
                     std::max(t.at(c, 2 * y + 1, 2 * x),
                              t.at(c, 2 * y + 1, 2 * x + 1)));
  return out;
}

// maxpool2 that also reports, per output element, the flat input index of
// the winning element (first in row-major order on ties). Needed to route
// gradients back through the pooling stage.
inline Tensor maxpool2_argmax(const Tensor& t, std::vector<std::size_t>* arg) {
  if (t.height() % 2 != 0 || t.width() % 2 != 0)
    throw ShapeError("maxpool2: odd spatial size " + t.shape_str());
  Tensor out(t.channels(), t.height() / 2, t.width() / 2);
  arg->assign(out.size(), 0);
  std::size_t o = 0;
  for (int c = 0; c < t.channels(); ++c) {
    for (int y = 0; y < out.height(); ++y) {
      for (int x = 0; x < out.width(); ++x) {
        double best = -std::numeric_limits<double>::infinity();
        std::size_t best_idx = 0;
        for (int dy = 0; dy < 2; ++dy) {
          for (int dx = 0; dx < 2; ++dx) {
            const int iy = 2 * y + dy, ix = 2 * x + dx;
            const double v = t.at(c, iy, ix);
            if (v > best) {
              best = v;
              best_idx = (static_cast<std::size_t>(c) * t.height() + iy) *
                             t.width() +
                         ix;
            }
          }
        }
        out.at(c, y, x) = best;
        (*arg)[o++] = best_idx;
      }
    }
  }
  return out;
}

// Rigid integer translation by (dy, dx) with zero fill:
// out(c, y, x) = in(c, y - dy, x - dx). Offsets are limited to the spatial
// size; anything larger is a caller bug, not an empty result.
inline Tensor apply_offset(const Tensor& t, int dy, int dx) {
  if (std::abs(dy) > t.height() || std::abs(dx) > t.width())
    throw InputError("apply_offset: offset (" + std::to_string(dy) + "," +
                     std::to_string(dx) + ") exceeds spatial size " +
                     t.shape_str());
  Tensor out(t.channels(), t.height(), t.width());
  const int y_lo = std::max(0, dy), y_hi = std::min(t.height(), t.height() + dy);
  const int x_lo = std::max(0, dx), x_hi = std::min(t.width(), t.width() + dx);
  for (int c = 0; c < t.channels(); ++c)
    for (int y = y_lo; y < y_hi; ++y)
      for (int x = x_lo; x < x_hi; ++x)
        out.at(c, y, x) = t.at(c, y - dy, x - dx);
  return out;
}

struct ConvGrad {
  std::vector<double> weights;  // same layout as FilterBank::weights
  std::vector<double> bias;
  Tensor input;
};

// Gradients of conv2d(input, f, padding) given d(loss)/d(output).
inline ConvGrad conv2d_grad(const Tensor& input, const FilterBank& f,
                            int padding, const Tensor& grad_out) {
  const int oh = input.height() + 2 * padding - f.kernel_h + 1;
  const int ow = input.width() + 2 * padding - f.kernel_w + 1;
  if (grad_out.channels() != f.out_channels || grad_out.height() != oh ||
      grad_out.width() != ow)
    throw ShapeError("conv2d_grad: grad_out shape " + grad_out.shape_str() +
                     " does not match conv output");
  ConvGrad g;
  g.weights.assign(f.weights.size(), 0.0);
  g.bias.assign(f.bias.size(), 0.0);
  g.input = Tensor(input.channels(), input.height(), input.width());
  for (int oc = 0; oc < f.out_channels; ++oc) {
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        const double go = grad_out.at(oc, oy, ox);
        if (go == 0.0) continue;
        g.bias[oc] += go;
        for (int ic = 0; ic < f.in_channels; ++ic) {
          for (int ky = 0; ky < f.kernel_h; ++ky) {
            const int iy = oy + ky - padding;
            if (iy < 0 || iy >= input.height()) continue;
            for (int kx = 0; kx < f.kernel_w; ++kx) {
              const int ix = ox + kx - padding;
              if (ix < 0 || ix >= input.width()) continue;
              g.weights[((static_cast<std::size_t>(oc) * f.in_channels + ic) *
                             f.kernel_h +
                         ky) *
                            f.kernel_w +
                        kx] += go * input.at(ic, iy, ix);
              g.input.at(ic, iy, ix) += go * f.w(oc, ic, ky, kx);
            }
          }
        }
      }
    }
  }
  return g;
}

struct TopdownGrad {
  std::vector<double> weights;
  std::vector<double> bias;
  Tensor upper;
};

// Gradients of relu(transposed_conv2d(upper, f)) given d(loss)/d(post-relu
// map), i.e. before any offset is applied. The pre-activation map is
// recomputed here; the relu subgradient at exactly zero is taken as zero.
// A nonzero leak scales (instead of zeroing) the flow through inactive
// elements; the result is then a descent direction for a leaky surrogate,
// not the true gradient. Callers that need revival pressure on dead
// elements pass a small leak and must gate acceptance on the true loss.
inline TopdownGrad topdown_conv_grad(const Tensor& upper, const FilterBank& f,
                                     const Tensor& grad_out,
                                     double leak = 0.0) {
  Tensor pre = transposed_conv2d(upper, f);
  require_same_shape(pre, grad_out, "topdown_conv_grad");
  Tensor gy = grad_out;
  for (std::size_t i = 0; i < gy.size(); ++i)
    if (!(pre.values()[i] > 0.0)) gy.values()[i] *= leak;

  TopdownGrad g;
  g.weights.assign(f.weights.size(), 0.0);
  g.bias.assign(f.bias.size(), 0.0);
  g.upper = Tensor(upper.channels(), upper.height(), upper.width());
  const int s = f.stride;
  const int pad_y = (f.kernel_h - s) / 2;
  const int pad_x = (f.kernel_w - s) / 2;
  for (int oc = 0; oc < f.out_channels; ++oc) {
    double b = 0.0;
    for (int y = 0; y < gy.height(); ++y)
      for (int x = 0; x < gy.width(); ++x) b += gy.at(oc, y, x);
    g.bias[oc] = b;
  }
  for (int ic = 0; ic < f.in_channels; ++ic) {
    for (int iy = 0; iy < upper.height(); ++iy) {
      for (int ix = 0; ix < upper.width(); ++ix) {
        const double u = upper.at(ic, iy, ix);
        double gu = 0.0;
        for (int oc = 0; oc < f.out_channels; ++oc) {
          for (int ky = 0; ky < f.kernel_h; ++ky) {
            const int oy = iy * s + ky - pad_y;
            if (oy < 0 || oy >= gy.height()) continue;
            for (int kx = 0; kx < f.kernel_w; ++kx) {
              const int ox = ix * s + kx - pad_x;
              if (ox < 0 || ox >= gy.width()) continue;
              const double go = gy.at(oc, oy, ox);
              if (go == 0.0) continue;
              g.weights[((static_cast<std::size_t>(oc) * f.in_channels + ic) *
                             f.kernel_h +
                         ky) *
                            f.kernel_w +
                        kx] += go * u;
              gu += go * f.w(oc, ic, ky, kx);
            }
          }
        }
        g.upper.at(ic, iy, ix) = gu;
      }
    }
  }
  return g;
}

inline bool all_finite(const Tensor& t) {
  for (double v : t.values())
    if (!std::isfinite(v)) return false;
  return true;
}

inline void require_finite(const Tensor& t, const char* where) {
  if (!all_finite(t))
    throw NumericError(std::string(where) + ": non-finite values");
}

inline double sum_squared_diff(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sum_squared_diff");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.values()[i] - b.values()[i];
    s += d * d;
  }
  return s;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(a.values()[i] - b.values()[i]));
  return m;
}

}  // namespace genpass
