#pragma once

// Dense tensors and the layer primitives of the toy estimator. Every layer
// has a forward pass and a matching reverse-mode backward pass; backward
// functions accumulate (+=) into parameter gradients and overwrite input
// gradients.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "affirm/core.hpp"

namespace affirm::nn {

struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s, double fill = 0.0) : shape(std::move(s)) {
    data.assign(numel_of(shape), fill);
  }

  static std::size_t numel_of(const std::vector<int>& s) {
    std::size_t n = 1;
    for (int d : s) {
      if (d < 0) throw InvalidInput("Tensor: negative dimension");
      n *= static_cast<std::size_t>(d);
    }
    return n;
  }

  std::size_t numel() const { return data.size(); }
  int dim(std::size_t i) const { return shape.at(i); }
  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }
  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  void zero() { std::fill(data.begin(), data.end(), 0.0); }
  Tensor zeros_like() const { return Tensor(shape); }

  std::string shape_string() const {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) s += (i ? "," : "") + std::to_string(shape[i]);
    return s + "]";
  }
};

inline void require_shape(const Tensor& t, const std::vector<int>& shape, const char* what) {
  if (t.shape != shape) {
    Tensor tmp;
    tmp.shape = shape;
    throw InvalidInput(std::string(what) + ": shape mismatch, got " + t.shape_string() + " expected " +
                       tmp.shape_string());
  }
}

// Volumetric feature maps use (N, C, D, H, W); 2D maps set D = 1.
struct Dims5 {
  int n, c, d, h, w;
  std::size_t spatial() const { return static_cast<std::size_t>(d) * h * w; }
};

inline Dims5 dims5(const Tensor& t, const char* what) {
  if (t.shape.size() != 5) throw InvalidInput(std::string(what) + ": expected a 5-d tensor, got " + t.shape_string());
  return {t.shape[0], t.shape[1], t.shape[2], t.shape[3], t.shape[4]};
}

// =============================================================================
// Convolution (stride 1, zero "same" padding, odd kernels)
// =============================================================================

struct ConvParams {
  Tensor w;  // (Cout, Cin, KD, KH, KW)
  Tensor b;  // (Cout)
};

inline ConvParams make_conv(int cin, int cout, int kd, int kh, int kw) {
  return {Tensor({cout, cin, kd, kh, kw}), Tensor({cout})};
}

inline Tensor conv_forward(const Tensor& x, const ConvParams& p) {
  const Dims5 in = dims5(x, "conv");
  const int co_n = p.w.dim(0), kd = p.w.dim(2), kh = p.w.dim(3), kw = p.w.dim(4);
  if (p.w.dim(1) != in.c) throw InvalidInput("conv: input channels " + std::to_string(in.c) + " != weight " +
                                             std::to_string(p.w.dim(1)));
  const int rd = kd / 2, rh = kh / 2, rw = kw / 2;
  Tensor y({in.n, co_n, in.d, in.h, in.w});
  const std::size_t sp = in.spatial();
  parallel_for(static_cast<std::size_t>(in.n) * co_n, [&](std::size_t job) {
    const int n = static_cast<int>(job / co_n), co = static_cast<int>(job % co_n);
    double* out = &y.data[(static_cast<std::size_t>(n) * co_n + co) * sp];
    std::fill(out, out + sp, p.b[co]);
    for (int ci = 0; ci < in.c; ++ci) {
      const double* src = &x.data[(static_cast<std::size_t>(n) * in.c + ci) * sp];
      for (int a = 0; a < kd; ++a)
        for (int b = 0; b < kh; ++b)
          for (int c = 0; c < kw; ++c) {
            const double wv = p.w[(((static_cast<std::size_t>(co) * in.c + ci) * kd + a) * kh + b) * kw + c];
            const int oz = a - rd, oy = b - rh, ox = c - rw;
            const int x0 = std::max(0, -ox), x1 = std::min(in.w, in.w - ox);
            for (int z = std::max(0, -oz); z < std::min(in.d, in.d - oz); ++z)
              for (int yy = std::max(0, -oy); yy < std::min(in.h, in.h - oy); ++yy) {
                double* o = out + (static_cast<std::size_t>(z) * in.h + yy) * in.w;
                const double* s = src + (static_cast<std::size_t>(z + oz) * in.h + yy + oy) * in.w + ox;
                for (int xx = x0; xx < x1; ++xx) o[xx] += wv * s[xx];
              }
          }
    }
  });
  return y;
}

// dx is resized and overwritten; dp accumulates.
inline void conv_backward(const Tensor& x, const ConvParams& p, const Tensor& dy, Tensor* dx, ConvParams& dp) {
  const Dims5 in = dims5(x, "conv_backward");
  const int co_n = p.w.dim(0), kd = p.w.dim(2), kh = p.w.dim(3), kw = p.w.dim(4);
  const int rd = kd / 2, rh = kh / 2, rw = kw / 2;
  const std::size_t sp = in.spatial();
  // Parameter gradients: each output channel owns its slice of dw and db.
  parallel_for(static_cast<std::size_t>(co_n), [&](std::size_t cou) {
    const int co = static_cast<int>(cou);
    for (int n = 0; n < in.n; ++n) {
      const double* g = &dy.data[(static_cast<std::size_t>(n) * co_n + co) * sp];
      double sb = 0.0;
      for (std::size_t i = 0; i < sp; ++i) sb += g[i];
      dp.b[co] += sb;
      for (int ci = 0; ci < in.c; ++ci) {
        const double* src = &x.data[(static_cast<std::size_t>(n) * in.c + ci) * sp];
        for (int a = 0; a < kd; ++a)
          for (int b = 0; b < kh; ++b)
            for (int c = 0; c < kw; ++c) {
              const int oz = a - rd, oy = b - rh, ox = c - rw;
              const int x0 = std::max(0, -ox), x1 = std::min(in.w, in.w - ox);
              double acc = 0.0;
              for (int z = std::max(0, -oz); z < std::min(in.d, in.d - oz); ++z)
                for (int yy = std::max(0, -oy); yy < std::min(in.h, in.h - oy); ++yy) {
                  const double* gg = g + (static_cast<std::size_t>(z) * in.h + yy) * in.w;
                  const double* s = src + (static_cast<std::size_t>(z + oz) * in.h + yy + oy) * in.w + ox;
                  for (int xx = x0; xx < x1; ++xx) acc += gg[xx] * s[xx];
                }
              dp.w[(((static_cast<std::size_t>(co) * in.c + ci) * kd + a) * kh + b) * kw + c] += acc;
            }
      }
    }
  });
  if (!dx) return;
  *dx = x.zeros_like();
  // Input gradients: each (n, ci) plane is written by one job.
  parallel_for(static_cast<std::size_t>(in.n) * in.c, [&](std::size_t job) {
    const int n = static_cast<int>(job / in.c), ci = static_cast<int>(job % in.c);
    double* dst = &dx->data[(static_cast<std::size_t>(n) * in.c + ci) * sp];
    for (int co = 0; co < co_n; ++co) {
      const double* g = &dy.data[(static_cast<std::size_t>(n) * co_n + co) * sp];
      for (int a = 0; a < kd; ++a)
        for (int b = 0; b < kh; ++b)
          for (int c = 0; c < kw; ++c) {
            const double wv = p.w[(((static_cast<std::size_t>(co) * in.c + ci) * kd + a) * kh + b) * kw + c];
            const int oz = a - rd, oy = b - rh, ox = c - rw;
            const int x0 = std::max(0, -ox), x1 = std::min(in.w, in.w - ox);
            for (int z = std::max(0, -oz); z < std::min(in.d, in.d - oz); ++z)
              for (int yy = std::max(0, -oy); yy < std::min(in.h, in.h - oy); ++yy) {
                const double* gg = g + (static_cast<std::size_t>(z) * in.h + yy) * in.w;
                double* s = dst + (static_cast<std::size_t>(z + oz) * in.h + yy + oy) * in.w + ox;
                for (int xx = x0; xx < x1; ++xx) s[xx] += wv * gg[xx];
              }
          }
    }
  });
}

// =============================================================================
// Batch normalization (per channel over batch and positions)
// =============================================================================

struct BnParams {
  Tensor gamma, beta;               // trainable
  Tensor running_mean, running_var;  // buffers, frozen at evaluation
};

inline BnParams make_bn(int c) { return {Tensor({c}, 1.0), Tensor({c}), Tensor({c}), Tensor({c}, 1.0)}; }

struct BnCache {
  Tensor xhat;
  std::vector<double> inv_std;
  bool training = true;
};

inline constexpr double kBnEps = 1e-5;
inline constexpr double kBnMomentum = 0.1;

// update_running=false leaves the buffers untouched (used by gradient checks).
inline Tensor bn_forward(const Tensor& x, BnParams& p, bool training, BnCache* cache, bool update_running = true) {
  const Dims5 in = dims5(x, "batchnorm");
  if (p.gamma.dim(0) != in.c) throw InvalidInput("batchnorm: channel mismatch");
  const std::size_t sp = in.spatial();
  const double count = static_cast<double>(sp) * in.n;
  Tensor y = x.zeros_like();
  Tensor xhat = x.zeros_like();
  std::vector<double> inv_std(in.c);
  parallel_for(static_cast<std::size_t>(in.c), [&](std::size_t cu) {
    const int c = static_cast<int>(cu);
    double mean, var;
    if (training) {
      double s = 0.0;
      for (int n = 0; n < in.n; ++n) {
        const double* v = &x.data[(static_cast<std::size_t>(n) * in.c + c) * sp];
        for (std::size_t i = 0; i < sp; ++i) s += v[i];
      }
      mean = s / count;
      double q = 0.0;
      for (int n = 0; n < in.n; ++n) {
        const double* v = &x.data[(static_cast<std::size_t>(n) * in.c + c) * sp];
        for (std::size_t i = 0; i < sp; ++i) q += (v[i] - mean) * (v[i] - mean);
      }
      var = q / count;
      if (update_running) {
        p.running_mean[c] = (1 - kBnMomentum) * p.running_mean[c] + kBnMomentum * mean;
        const double unbiased = count > 1 ? var * count / (count - 1) : var;
        p.running_var[c] = (1 - kBnMomentum) * p.running_var[c] + kBnMomentum * unbiased;
      }
    } else {
      mean = p.running_mean[c];
      var = p.running_var[c];
    }
    const double is = 1.0 / std::sqrt(var + kBnEps);
    inv_std[c] = is;
    for (int n = 0; n < in.n; ++n) {
      const std::size_t base = (static_cast<std::size_t>(n) * in.c + c) * sp;
      for (std::size_t i = 0; i < sp; ++i) {
        const double h = (x.data[base + i] - mean) * is;
        xhat.data[base + i] = h;
        y.data[base + i] = p.gamma[c] * h + p.beta[c];
      }
    }
  });
  if (cache) *cache = {std::move(xhat), std::move(inv_std), training};
  return y;
}

inline Tensor bn_backward(const Tensor& dy, const BnParams& p, const BnCache& cache, BnParams& dp) {
  const Dims5 in = dims5(dy, "batchnorm_backward");
  const std::size_t sp = in.spatial();
  const double count = static_cast<double>(sp) * in.n;
  Tensor dx = dy.zeros_like();
  parallel_for(static_cast<std::size_t>(in.c), [&](std::size_t cu) {
    const int c = static_cast<int>(cu);
    double sg = 0.0, sgh = 0.0;
    for (int n = 0; n < in.n; ++n) {
      const std::size_t base = (static_cast<std::size_t>(n) * in.c + c) * sp;
      for (std::size_t i = 0; i < sp; ++i) {
        sg += dy.data[base + i];
        sgh += dy.data[base + i] * cache.xhat.data[base + i];
      }
    }
    dp.beta[c] += sg;
    dp.gamma[c] += sgh;
    const double k = p.gamma[c] * cache.inv_std[c];
    for (int n = 0; n < in.n; ++n) {
      const std::size_t base = (static_cast<std::size_t>(n) * in.c + c) * sp;
      for (std::size_t i = 0; i < sp; ++i) {
        if (cache.training)
          dx.data[base + i] = k * (dy.data[base + i] - sg / count - cache.xhat.data[base + i] * sgh / count);
        else
          dx.data[base + i] = k * dy.data[base + i];
      }
    }
  });
  return dx;
}

// =============================================================================
// Pointwise and pooling
// =============================================================================

inline Tensor relu_forward(const Tensor& x) {
  Tensor y = x;
  for (double& v : y.data) v = std::max(0.0, v);
  return y;
}

inline Tensor relu_backward(const Tensor& x, const Tensor& dy) {
  Tensor dx = dy;
  for (std::size_t i = 0; i < dx.numel(); ++i)
    if (!(x.data[i] > 0.0)) dx.data[i] = 0.0;
  return dx;
}

// Non-overlapping max pooling with per-axis factors (remainders dropped).
struct PoolCache {
  std::vector<int> in_shape;
  std::vector<std::size_t> argmax;
};

inline Tensor maxpool_forward(const Tensor& x, int fd, int fh, int fw, PoolCache* cache) {
  const Dims5 in = dims5(x, "maxpool");
  const int od = in.d / fd, oh = in.h / fh, ow = in.w / fw;
  if (od < 1 || oh < 1 || ow < 1) throw InvalidInput("maxpool: input smaller than the pooling window");
  Tensor y({in.n, in.c, od, oh, ow});
  std::vector<std::size_t> arg(y.numel());
  const std::size_t planes = static_cast<std::size_t>(in.n) * in.c;
  parallel_for(planes, [&](std::size_t pl) {
    const std::size_t ib = pl * in.spatial();
    const std::size_t ob = pl * static_cast<std::size_t>(od) * oh * ow;
    for (int z = 0; z < od; ++z)
      for (int yy = 0; yy < oh; ++yy)
        for (int xx = 0; xx < ow; ++xx) {
          double best = -std::numeric_limits<double>::infinity();
          std::size_t bi = 0;
          for (int a = 0; a < fd; ++a)
            for (int b = 0; b < fh; ++b)
              for (int c = 0; c < fw; ++c) {
                const std::size_t i =
                    ib + (static_cast<std::size_t>(z * fd + a) * in.h + yy * fh + b) * in.w + xx * fw + c;
                if (x.data[i] > best) {
                  best = x.data[i];
                  bi = i;
                }
              }
          const std::size_t o = ob + (static_cast<std::size_t>(z) * oh + yy) * ow + xx;
          y.data[o] = best;
          arg[o] = bi;
        }
  });
  if (cache) *cache = {x.shape, std::move(arg)};
  return y;
}

inline Tensor maxpool_backward(const Tensor& dy, const PoolCache& cache) {
  Tensor dx(cache.in_shape);
  for (std::size_t o = 0; o < dy.numel(); ++o) dx.data[cache.argmax[o]] += dy.data[o];
  return dx;
}

inline Tensor avgpool_forward(const Tensor& x, int fd, int fh, int fw) {
  const Dims5 in = dims5(x, "avgpool");
  const int od = in.d / fd, oh = in.h / fh, ow = in.w / fw;
  if (od < 1 || oh < 1 || ow < 1) throw InvalidInput("avgpool: input smaller than the pooling window");
  Tensor y({in.n, in.c, od, oh, ow});
  const double inv = 1.0 / (fd * fh * fw);
  const std::size_t planes = static_cast<std::size_t>(in.n) * in.c;
  for (std::size_t pl = 0; pl < planes; ++pl) {
    const std::size_t ib = pl * in.spatial();
    const std::size_t ob = pl * static_cast<std::size_t>(od) * oh * ow;
    for (int z = 0; z < od * fd; ++z)
      for (int yy = 0; yy < oh * fh; ++yy)
        for (int xx = 0; xx < ow * fw; ++xx)
          y.data[ob + (static_cast<std::size_t>(z / fd) * oh + yy / fh) * ow + xx / fw] +=
              inv * x.data[ib + (static_cast<std::size_t>(z) * in.h + yy) * in.w + xx];
  }
  return y;
}

inline Tensor avgpool_backward(const Tensor& dy, const std::vector<int>& in_shape, int fd, int fh, int fw) {
  Tensor dx(in_shape);
  const Dims5 in = dims5(dx, "avgpool_backward");
  const int od = in.d / fd, oh = in.h / fh, ow = in.w / fw;
  const double inv = 1.0 / (fd * fh * fw);
  const std::size_t planes = static_cast<std::size_t>(in.n) * in.c;
  for (std::size_t pl = 0; pl < planes; ++pl) {
    const std::size_t ib = pl * in.spatial();
    const std::size_t ob = pl * static_cast<std::size_t>(od) * oh * ow;
    for (int z = 0; z < od * fd; ++z)
      for (int yy = 0; yy < oh * fh; ++yy)
        for (int xx = 0; xx < ow * fw; ++xx)
          dx.data[ib + (static_cast<std::size_t>(z) * in.h + yy) * in.w + xx] =
              inv * dy.data[ob + (static_cast<std::size_t>(z / fd) * oh + yy / fh) * ow + xx / fw];
  }
  return dx;
}

// =============================================================================
// Fully connected
// =============================================================================

struct LinearParams {
  Tensor w;  // (out, in)
  Tensor b;  // (out)
  int in() const { return w.dim(1); }
  int out() const { return w.dim(0); }
};

inline LinearParams make_linear(int in, int out) { return {Tensor({out, in}), Tensor({out})}; }

// x: (rows, in) -> (rows, out)
inline Tensor linear_forward(const Tensor& x, const LinearParams& p) {
  if (x.shape.size() != 2 || x.dim(1) != p.in())
    throw InvalidInput("linear: input " + x.shape_string() + " does not match weight " + p.w.shape_string());
  const int rows = x.dim(0), in = p.in(), out = p.out();
  Tensor y({rows, out});
  for (int r = 0; r < rows; ++r)
    for (int o = 0; o < out; ++o) {
      double acc = p.b[o];
      const double* wr = &p.w.data[static_cast<std::size_t>(o) * in];
      const double* xr = &x.data[static_cast<std::size_t>(r) * in];
      for (int i = 0; i < in; ++i) acc += wr[i] * xr[i];
      y.data[static_cast<std::size_t>(r) * out + o] = acc;
    }
  return y;
}

inline Tensor linear_backward(const Tensor& x, const LinearParams& p, const Tensor& dy, LinearParams& dp) {
  const int rows = x.dim(0), in = p.in(), out = p.out();
  Tensor dx({rows, in});
  for (int r = 0; r < rows; ++r)
    for (int o = 0; o < out; ++o) {
      const double g = dy.data[static_cast<std::size_t>(r) * out + o];
      if (g == 0.0) continue;
      dp.b[o] += g;
      double* dw = &dp.w.data[static_cast<std::size_t>(o) * in];
      const double* wr = &p.w.data[static_cast<std::size_t>(o) * in];
      const double* xr = &x.data[static_cast<std::size_t>(r) * in];
      double* dxr = &dx.data[static_cast<std::size_t>(r) * in];
      for (int i = 0; i < in; ++i) {
        dw[i] += g * xr[i];
        dxr[i] += g * wr[i];
      }
    }
  return dx;
}

// Inverted dropout; the mask is drawn from a counter stream so a fixed seed
// reproduces it exactly.
inline Tensor dropout_mask(const std::vector<int>& shape, double rate, std::uint64_t seed, std::uint64_t stream) {
  Tensor m(shape, 1.0);
  if (rate <= 0.0) return m;
  CounterRng rng(seed, stream);
  const double keep = 1.0 - rate;
  for (double& v : m.data) v = rng.uniform() < keep ? 1.0 / keep : 0.0;
  return m;
}

inline Tensor multiply(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw InvalidInput("multiply: shape mismatch");
  Tensor y = a;
  for (std::size_t i = 0; i < y.numel(); ++i) y.data[i] *= b.data[i];
  return y;
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace affirm::nn
