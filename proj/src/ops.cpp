#include "gdnv/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <thread>

namespace gdnv {

namespace {

std::size_t g_threads = 1;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

/// Splits [0, count) into contiguous chunks, one per worker.
void parallel_chunks(std::size_t count,
                     const std::function<void(std::size_t chunk, std::size_t begin, std::size_t end)>& body,
                     std::size_t& chunks_out) {
  const std::size_t workers = std::max<std::size_t>(1, std::min(num_threads(), count));
  chunks_out = workers;
  if (workers == 1) {
    body(0, 0, count);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t t = 0; t < workers; ++t) {
    const std::size_t begin = count * t / workers;
    const std::size_t end = count * (t + 1) / workers;
    pool.emplace_back([&, t, begin, end] { body(t, begin, end); });
  }
  for (auto& th : pool) th.join();
}

bool is_plain_pointwise(const ConvSpec& s) {
  return s.kernel_h == 1 && s.kernel_w == 1 && s.stride_h == 1 && s.stride_w == 1 && s.pad_h == 0 &&
         s.pad_w == 0;
}

// col layout: rows (ic, kh, kw), cols (oh, ow)
template <typename T>
void im2col(const T* in, std::size_t channels, std::size_t h, std::size_t w, const ConvSpec& s,
            std::size_t oh_n, std::size_t ow_n, T* col) {
  const auto H = static_cast<std::ptrdiff_t>(h);
  const auto W = static_cast<std::ptrdiff_t>(w);
  for (std::size_t c = 0; c < channels; ++c) {
    const T* plane = in + c * h * w;
    for (std::size_t kh = 0; kh < s.kernel_h; ++kh) {
      for (std::size_t kw = 0; kw < s.kernel_w; ++kw) {
        T* row = col + ((c * s.kernel_h + kh) * s.kernel_w + kw) * oh_n * ow_n;
        for (std::size_t oh = 0; oh < oh_n; ++oh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * s.stride_h + kh * s.dilation_h) -
                                    static_cast<std::ptrdiff_t>(s.pad_h);
          T* dst = row + oh * ow_n;
          if (ih < 0 || ih >= H) {
            std::fill_n(dst, ow_n, T{});
            continue;
          }
          const T* src = plane + ih * W;
          for (std::size_t ow = 0; ow < ow_n; ++ow) {
            const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * s.stride_w + kw * s.dilation_w) -
                                      static_cast<std::ptrdiff_t>(s.pad_w);
            dst[ow] = (iw >= 0 && iw < W) ? src[iw] : T{};
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, std::size_t channels, std::size_t h, std::size_t w, const ConvSpec& s,
                std::size_t oh_n, std::size_t ow_n, T* out) {
  const auto H = static_cast<std::ptrdiff_t>(h);
  const auto W = static_cast<std::ptrdiff_t>(w);
  for (std::size_t c = 0; c < channels; ++c) {
    T* plane = out + c * h * w;
    for (std::size_t kh = 0; kh < s.kernel_h; ++kh) {
      for (std::size_t kw = 0; kw < s.kernel_w; ++kw) {
        const T* row = col + ((c * s.kernel_h + kh) * s.kernel_w + kw) * oh_n * ow_n;
        for (std::size_t oh = 0; oh < oh_n; ++oh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * s.stride_h + kh * s.dilation_h) -
                                    static_cast<std::ptrdiff_t>(s.pad_h);
          if (ih < 0 || ih >= H) continue;
          const T* src = row + oh * ow_n;
          T* dst = plane + ih * W;
          for (std::size_t ow = 0; ow < ow_n; ++ow) {
            const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * s.stride_w + kw * s.dilation_w) -
                                      static_cast<std::ptrdiff_t>(s.pad_w);
            if (iw >= 0 && iw < W) dst[iw] += src[ow];
          }
        }
      }
    }
  }
}

// Valid output-column range for one kernel tap along one axis.
struct TapRange {
  std::size_t begin = 0, end = 0;
};

TapRange tap_range(std::size_t out_n, std::size_t in_n, std::size_t stride, std::size_t pad, std::size_t offset) {
  // in = o*stride + offset - pad must lie in [0, in_n)
  TapRange r;
  const auto off = static_cast<std::ptrdiff_t>(offset) - static_cast<std::ptrdiff_t>(pad);
  std::ptrdiff_t lo = 0;
  if (off < 0) lo = (-off + static_cast<std::ptrdiff_t>(stride) - 1) / static_cast<std::ptrdiff_t>(stride);
  std::ptrdiff_t hi = 0;  // exclusive
  const std::ptrdiff_t lim = static_cast<std::ptrdiff_t>(in_n) - off;  // o*stride < lim
  if (lim > 0) hi = (lim - 1) / static_cast<std::ptrdiff_t>(stride) + 1;
  hi = std::min<std::ptrdiff_t>(hi, static_cast<std::ptrdiff_t>(out_n));
  if (hi > lo) {
    r.begin = static_cast<std::size_t>(lo);
    r.end = static_cast<std::size_t>(hi);
  }
  return r;
}

// Single input channel to single output channel, direct accumulation.
template <typename T>
void depthwise_plane_forward(const T* in, std::size_t h, std::size_t w, const T* kernel, const ConvSpec& s,
                             std::size_t oh_n, std::size_t ow_n, T* out) {
  for (std::size_t kh = 0; kh < s.kernel_h; ++kh) {
    const TapRange rh = tap_range(oh_n, h, s.stride_h, s.pad_h, kh * s.dilation_h);
    for (std::size_t kw = 0; kw < s.kernel_w; ++kw) {
      const TapRange rw = tap_range(ow_n, w, s.stride_w, s.pad_w, kw * s.dilation_w);
      const T wv = kernel[kh * s.kernel_w + kw];
      for (std::size_t oh = rh.begin; oh < rh.end; ++oh) {
        const std::size_t ih = oh * s.stride_h + kh * s.dilation_h - s.pad_h;
        const T* src = in + ih * w;
        T* dst = out + oh * ow_n;
        if (s.stride_w == 1) {
          const std::size_t shift = kw * s.dilation_w - s.pad_w;  // wraps, but ow + shift is in range
          for (std::size_t ow = rw.begin; ow < rw.end; ++ow) dst[ow] += wv * src[ow + shift];
        } else {
          for (std::size_t ow = rw.begin; ow < rw.end; ++ow) {
            dst[ow] += wv * src[ow * s.stride_w + kw * s.dilation_w - s.pad_w];
          }
        }
      }
    }
  }
}

template <typename T>
void depthwise_plane_backward(const T* in, std::size_t h, std::size_t w, const T* kernel, const T* dy,
                              const ConvSpec& s, std::size_t oh_n, std::size_t ow_n, T* din, T* dkernel) {
  for (std::size_t kh = 0; kh < s.kernel_h; ++kh) {
    const TapRange rh = tap_range(oh_n, h, s.stride_h, s.pad_h, kh * s.dilation_h);
    for (std::size_t kw = 0; kw < s.kernel_w; ++kw) {
      const TapRange rw = tap_range(ow_n, w, s.stride_w, s.pad_w, kw * s.dilation_w);
      const T wv = kernel[kh * s.kernel_w + kw];
      T acc{};
      for (std::size_t oh = rh.begin; oh < rh.end; ++oh) {
        const std::size_t ih = oh * s.stride_h + kh * s.dilation_h - s.pad_h;
        const T* src = in + ih * w;
        T* dsrc = din + ih * w;
        const T* g = dy + oh * ow_n;
        for (std::size_t ow = rw.begin; ow < rw.end; ++ow) {
          const std::size_t iw = ow * s.stride_w + kw * s.dilation_w - s.pad_w;
          acc += g[ow] * src[iw];
          dsrc[iw] += wv * g[ow];
        }
      }
      dkernel[kh * s.kernel_w + kw] += acc;
    }
  }
}

}  // namespace

void set_num_threads(std::size_t n) {
  if (n == 0) n = std::max(1u, std::thread::hardware_concurrency());
  g_threads = n;
}

std::size_t num_threads() { return g_threads; }

void parallel_for(std::size_t count, const std::function<void(std::size_t)>& body) {
  std::size_t chunks = 0;
  parallel_chunks(
      count,
      [&](std::size_t, std::size_t b, std::size_t e) {
        for (std::size_t i = b; i < e; ++i) body(i);
      },
      chunks);
}

ConvSpec ConvSpec::square(std::size_t in, std::size_t out, std::size_t k, std::size_t stride,
                          std::size_t dilation, std::size_t groups) {
  ConvSpec s;
  s.in_channels = in;
  s.out_channels = out;
  s.kernel_h = s.kernel_w = k;
  s.stride_h = s.stride_w = stride;
  s.dilation_h = s.dilation_w = dilation;
  s.pad_h = s.pad_w = dilation * (k - 1) / 2;
  s.groups = groups;
  return s;
}

void ConvSpec::validate() const {
  if (in_channels == 0 || out_channels == 0 || kernel_h == 0 || kernel_w == 0) {
    throw ShapeError("conv: channels and kernel must be >= 1");
  }
  if (groups == 0 || in_channels % groups != 0 || out_channels % groups != 0) {
    throw ShapeError("conv: channels not divisible by groups");
  }
  if (stride_h == 0 || stride_w == 0 || dilation_h == 0 || dilation_w == 0) {
    throw ShapeError("conv: stride and dilation must be >= 1");
  }
}

namespace {
std::size_t out_extent(std::size_t in, std::size_t pad, std::size_t dil, std::size_t k, std::size_t stride) {
  const auto span = static_cast<std::ptrdiff_t>(in + 2 * pad) - static_cast<std::ptrdiff_t>(dil * (k - 1) + 1);
  if (span < 0) throw ShapeError("conv: non-positive output size");
  return static_cast<std::size_t>(span) / stride + 1;
}
}  // namespace

std::size_t ConvSpec::out_h(std::size_t h) const { return out_extent(h, pad_h, dilation_h, kernel_h, stride_h); }
std::size_t ConvSpec::out_w(std::size_t w) const { return out_extent(w, pad_w, dilation_w, kernel_w, stride_w); }

Shape ConvSpec::output_shape(const Shape& in) const {
  validate();
  if (in.c != in_channels) {
    throw ShapeError("conv: input has " + std::to_string(in.c) + " channels, expected " +
                     std::to_string(in_channels));
  }
  return Shape{in.n, out_channels, out_h(in.h), out_w(in.w)};
}

Shape ConvSpec::weight_shape() const { return Shape{out_channels, in_channels / groups, kernel_h, kernel_w}; }

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& input, const Tensor<T>& weight, std::span<const T> bias,
                         const ConvSpec& spec) {
  const Shape os = spec.output_shape(input.shape());
  if (!(weight.shape() == spec.weight_shape())) {
    throw ShapeError("conv: weight shape " + weight.shape().str() + " expected " + spec.weight_shape().str());
  }
  if (!bias.empty() && bias.size() != spec.out_channels) throw ShapeError("conv: bias length mismatch");

  const Shape& is = input.shape();
  const std::size_t cg = spec.in_channels / spec.groups;
  const std::size_t og = spec.out_channels / spec.groups;
  const std::size_t K = cg * spec.kernel_h * spec.kernel_w;
  const std::size_t P = os.h * os.w;
  Tensor<T> out(os);

  parallel_for(is.n, [&](std::size_t n) {
    std::vector<T> col;
    for (std::size_t g = 0; g < spec.groups; ++g) {
      T* out_g = out.plane(n, g * og);
      const T* in_g = input.plane(n, g * cg);
      const T* w_g = weight.data().data() + g * og * K;
      if (cg == 1 && og <= 4) {
        for (std::size_t o = 0; o < og; ++o) {
          depthwise_plane_forward(in_g, is.h, is.w, w_g + o * K, spec, os.h, os.w, out_g + o * P);
        }
      } else {
        const T* col_ptr = in_g;
        if (!is_plain_pointwise(spec)) {
          col.resize(K * P);
          im2col(in_g, cg, is.h, is.w, spec, os.h, os.w, col.data());
          col_ptr = col.data();
        }
        MapMat<T> o_mat(out_g, static_cast<Eigen::Index>(og), static_cast<Eigen::Index>(P));
        ConstMapMat<T> w_mat(w_g, static_cast<Eigen::Index>(og), static_cast<Eigen::Index>(K));
        ConstMapMat<T> c_mat(col_ptr, static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(P));
        o_mat.noalias() = w_mat * c_mat;
      }
    }
    if (!bias.empty()) {
      for (std::size_t o = 0; o < spec.out_channels; ++o) {
        T* p = out.plane(n, o);
        for (std::size_t i = 0; i < P; ++i) p[i] += bias[o];
      }
    }
  });
  return out;
}

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& upstream, const Tensor<T>& input, const Tensor<T>& weight,
                             const ConvSpec& spec, bool with_bias) {
  const Shape os = spec.output_shape(input.shape());
  if (!(upstream.shape() == os)) {
    throw ShapeError("conv backward: upstream " + upstream.shape().str() + " expected " + os.str());
  }
  if (!(weight.shape() == spec.weight_shape())) throw ShapeError("conv backward: weight shape mismatch");

  const Shape& is = input.shape();
  const std::size_t cg = spec.in_channels / spec.groups;
  const std::size_t og = spec.out_channels / spec.groups;
  const std::size_t K = cg * spec.kernel_h * spec.kernel_w;
  const std::size_t P = os.h * os.w;

  ConvGrads<T> g{Tensor<T>(is), Tensor<T>(weight.shape()), {}};
  if (with_bias) {
    g.bias.assign(spec.out_channels, T{});
    for (std::size_t n = 0; n < os.n; ++n) {
      for (std::size_t o = 0; o < spec.out_channels; ++o) {
        const T* p = upstream.plane(n, o);
        T acc{};
        for (std::size_t i = 0; i < P; ++i) acc += p[i];
        g.bias[o] += acc;
      }
    }
  }

  std::vector<std::vector<T>> partial(std::max<std::size_t>(1, std::min(num_threads(), is.n)));
  std::size_t chunks = 0;
  parallel_chunks(
      is.n,
      [&](std::size_t chunk, std::size_t begin, std::size_t end) {
        std::vector<T>& dw = partial[chunk];
        dw.assign(weight.numel(), T{});
        std::vector<T> col, dcol;
        for (std::size_t n = begin; n < end; ++n) {
          for (std::size_t grp = 0; grp < spec.groups; ++grp) {
            const T* dy_g = upstream.plane(n, grp * og);
            const T* in_g = input.plane(n, grp * cg);
            T* din_g = g.input.plane(n, grp * cg);
            const T* w_g = weight.data().data() + grp * og * K;
            T* dw_g = dw.data() + grp * og * K;
            if (cg == 1 && og <= 4) {
              for (std::size_t o = 0; o < og; ++o) {
                depthwise_plane_backward(in_g, is.h, is.w, w_g + o * K, dy_g + o * P, spec, os.h, os.w, din_g,
                                         dw_g + o * K);
              }
              continue;
            }
            ConstMapMat<T> dy_mat(dy_g, static_cast<Eigen::Index>(og), static_cast<Eigen::Index>(P));
            ConstMapMat<T> w_mat(w_g, static_cast<Eigen::Index>(og), static_cast<Eigen::Index>(K));
            MapMat<T> dw_mat(dw_g, static_cast<Eigen::Index>(og), static_cast<Eigen::Index>(K));
            if (is_plain_pointwise(spec)) {
              ConstMapMat<T> x_mat(in_g, static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(P));
              dw_mat.noalias() += dy_mat * x_mat.transpose();
              MapMat<T> dx_mat(din_g, static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(P));
              dx_mat.noalias() += w_mat.transpose() * dy_mat;
            } else {
              col.resize(K * P);
              dcol.resize(K * P);
              im2col(in_g, cg, is.h, is.w, spec, os.h, os.w, col.data());
              ConstMapMat<T> c_mat(col.data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(P));
              dw_mat.noalias() += dy_mat * c_mat.transpose();
              MapMat<T> dc_mat(dcol.data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(P));
              dc_mat.noalias() = w_mat.transpose() * dy_mat;
              col2im_add(dcol.data(), cg, is.h, is.w, spec, os.h, os.w, din_g);
            }
          }
        }
      },
      chunks);

  auto& dw = g.weight.values();
  for (std::size_t c = 0; c < chunks; ++c) {
    for (std::size_t i = 0; i < dw.size(); ++i) dw[i] += partial[c][i];
  }
  return g;
}

template <typename T>
BatchNormState<T>::BatchNormState(std::size_t channels, BatchNormConfig cfg)
    : gamma(Shape{channels, 1, 1, 1}, T(1)),
      beta(Shape{channels, 1, 1, 1}, T(0)),
      running_mean(Shape{channels, 1, 1, 1}, T(0)),
      running_var(Shape{channels, 1, 1, 1}, T(1)),
      config(cfg) {
  if (cfg.epsilon <= 0) throw std::invalid_argument("batchnorm: epsilon must be > 0");
}

template <typename T>
Tensor<T> batchnorm2d_forward(const Tensor<T>& input, BatchNormState<T>& state, bool training,
                              BatchNormCache<T>* cache) {
  const Shape& s = input.shape();
  const std::size_t C = state.channels();
  if (s.c != C) {
    throw ShapeError("batchnorm: input has " + std::to_string(s.c) + " channels, state has " + std::to_string(C));
  }
  const std::size_t P = s.plane();
  const double M = static_cast<double>(s.n * P);
  Tensor<T> out(s);
  std::vector<T> inv_std(C);
  Tensor<T> xhat_store = cache ? Tensor<T>(s) : Tensor<T>();

  for (std::size_t c = 0; c < C; ++c) {
    double mean = 0.0, var = 0.0;
    if (training) {
      for (std::size_t n = 0; n < s.n; ++n) {
        const T* p = input.plane(n, c);
        for (std::size_t i = 0; i < P; ++i) mean += static_cast<double>(p[i]);
      }
      mean /= M;
      for (std::size_t n = 0; n < s.n; ++n) {
        const T* p = input.plane(n, c);
        for (std::size_t i = 0; i < P; ++i) {
          const double d = static_cast<double>(p[i]) - mean;
          var += d * d;
        }
      }
      var /= M;
      const double unbiased = M > 1 ? var * M / (M - 1) : var;
      T& rm = state.running_mean[c];
      T& rv = state.running_var[c];
      if (state.cumulative) {
        const double k = static_cast<double>(state.batches_seen);
        rm = static_cast<T>((static_cast<double>(rm) * k + mean) / (k + 1));
        rv = static_cast<T>((static_cast<double>(rv) * k + unbiased) / (k + 1));
      } else {
        const double m = state.config.momentum;
        rm = static_cast<T>((1 - m) * static_cast<double>(rm) + m * mean);
        rv = static_cast<T>((1 - m) * static_cast<double>(rv) + m * unbiased);
      }
    } else {
      mean = static_cast<double>(state.running_mean[c]);
      var = static_cast<double>(state.running_var[c]);
    }
    const double istd = 1.0 / std::sqrt(var + state.config.epsilon);
    inv_std[c] = static_cast<T>(istd);
    const T g = state.gamma[c];
    const T b = state.beta[c];
    const T mu = static_cast<T>(mean);
    const T is = static_cast<T>(istd);
    for (std::size_t n = 0; n < s.n; ++n) {
      const T* p = input.plane(n, c);
      T* o = out.plane(n, c);
      T* xh = cache ? xhat_store.plane(n, c) : nullptr;
      for (std::size_t i = 0; i < P; ++i) {
        const T v = (p[i] - mu) * is;
        if (xh) xh[i] = v;
        o[i] = g * v + b;
      }
    }
  }
  if (training) ++state.batches_seen;
  if (cache) {
    cache->normalized = std::move(xhat_store);
    cache->inv_std = std::move(inv_std);
    cache->training = training;
  }
  return out;
}

template <typename T>
BatchNormGrads<T> batchnorm2d_backward(const Tensor<T>& upstream, const BatchNormCache<T>& cache,
                                       const BatchNormState<T>& state) {
  const Shape& s = upstream.shape();
  if (!(cache.normalized.shape() == s)) throw ShapeError("batchnorm backward: shape mismatch");
  const std::size_t C = state.channels();
  const std::size_t P = s.plane();
  const double M = static_cast<double>(s.n * P);
  BatchNormGrads<T> g{Tensor<T>(s), std::vector<T>(C), std::vector<T>(C)};
  for (std::size_t c = 0; c < C; ++c) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (std::size_t n = 0; n < s.n; ++n) {
      const T* dy = upstream.plane(n, c);
      const T* xh = cache.normalized.plane(n, c);
      for (std::size_t i = 0; i < P; ++i) {
        sum_dy += static_cast<double>(dy[i]);
        sum_dy_xhat += static_cast<double>(dy[i]) * static_cast<double>(xh[i]);
      }
    }
    g.beta[c] = static_cast<T>(sum_dy);
    g.gamma[c] = static_cast<T>(sum_dy_xhat);
    const T scale = state.gamma[c] * cache.inv_std[c];
    for (std::size_t n = 0; n < s.n; ++n) {
      const T* dy = upstream.plane(n, c);
      const T* xh = cache.normalized.plane(n, c);
      T* dx = g.input.plane(n, c);
      if (cache.training) {
        const T mdy = static_cast<T>(sum_dy / M);
        const T mdyx = static_cast<T>(sum_dy_xhat / M);
        for (std::size_t i = 0; i < P; ++i) dx[i] = scale * (dy[i] - mdy - xh[i] * mdyx);
      } else {
        for (std::size_t i = 0; i < P; ++i) dx[i] = scale * dy[i];
      }
    }
  }
  return g;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  auto src = x.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] > T(0) ? src[i] : T(0);
  return out;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& upstream, const Tensor<T>& input) {
  if (!(upstream.shape() == input.shape())) throw ShapeError("relu backward: shape mismatch");
  Tensor<T> out(input.shape());
  auto g = upstream.data();
  auto x = input.data();
  auto d = out.data();
  for (std::size_t i = 0; i < x.size(); ++i) d[i] = x[i] > T(0) ? g[i] : T(0);
  return out;
}

template <typename T>
T hard_sigmoid(T x) {
  return std::clamp(x / T(6) + T(0.5), T(0), T(1));
}

template <typename T>
T hard_sigmoid_grad(T x) {
  return (x > T(-3) && x < T(3)) ? T(1) / T(6) : T(0);
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  const Shape& s = x.shape();
  Tensor<T> out(Shape{s.n, s.c, 1, 1});
  const std::size_t P = s.plane();
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const T* p = x.plane(n, c);
      double acc = 0.0;
      for (std::size_t i = 0; i < P; ++i) acc += static_cast<double>(p[i]);
      out.at(n, c, 0, 0) = static_cast<T>(acc / static_cast<double>(P));
    }
  }
  return out;
}

template <typename T>
Tensor<T> global_avg_pool_backward(const Tensor<T>& upstream, const Shape& input_shape) {
  if (upstream.shape() != Shape{input_shape.n, input_shape.c, 1, 1}) {
    throw ShapeError("global_avg_pool backward: shape mismatch");
  }
  Tensor<T> out(input_shape);
  const std::size_t P = input_shape.plane();
  const T inv = T(1) / static_cast<T>(P);
  for (std::size_t n = 0; n < input_shape.n; ++n) {
    for (std::size_t c = 0; c < input_shape.c; ++c) {
      std::fill_n(out.plane(n, c), P, upstream.at(n, c, 0, 0) * inv);
    }
  }
  return out;
}

template <typename T>
std::vector<T> softmax_rows(std::span<const T> logits, std::size_t rows, std::size_t cols) {
  if (cols == 0) throw ShapeError("softmax_rows: need at least one column");
  if (logits.size() != rows * cols) throw ShapeError("softmax_rows: size mismatch");
  std::vector<T> out(logits.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = logits.data() + r * cols;
    T* o = out.data() + r * cols;
    const T mx = *std::max_element(in, in + cols);
    T sum{};
    for (std::size_t k = 0; k < cols; ++k) {
      o[k] = std::exp(in[k] - mx);
      sum += o[k];
    }
    for (std::size_t k = 0; k < cols; ++k) o[k] /= sum;
  }
  return out;
}

template <typename T>
std::vector<T> l2_normalize(std::span<const T> x, T eps) {
  T sq{};
  for (T v : x) sq += v * v;
  const T denom = std::max(std::sqrt(sq), eps);
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] / denom;
  return out;
}

template <typename T>
std::vector<T> l2_normalize_backward(std::span<const T> upstream, std::span<const T> x, T eps) {
  T sq{};
  for (T v : x) sq += v * v;
  const T norm = std::sqrt(sq);
  std::vector<T> out(x.size());
  if (norm <= eps) {
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = upstream[i] / eps;
    return out;
  }
  T dot{};
  for (std::size_t i = 0; i < x.size(); ++i) dot += upstream[i] * x[i];
  const T inv = T(1) / norm;
  const T coef = dot * inv * inv * inv;
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = upstream[i] * inv - x[i] * coef;
  return out;
}

#define GDNV_INSTANTIATE(T)                                                                                \
  template Tensor<T> conv2d_forward(const Tensor<T>&, const Tensor<T>&, std::span<const T>, const ConvSpec&); \
  template ConvGrads<T> conv2d_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const ConvSpec&, \
                                        bool);                                                             \
  template struct BatchNormState<T>;                                                                       \
  template Tensor<T> batchnorm2d_forward(const Tensor<T>&, BatchNormState<T>&, bool, BatchNormCache<T>*);  \
  template BatchNormGrads<T> batchnorm2d_backward(const Tensor<T>&, const BatchNormCache<T>&,              \
                                                  const BatchNormState<T>&);                               \
  template Tensor<T> relu(const Tensor<T>&);                                                               \
  template Tensor<T> relu_backward(const Tensor<T>&, const Tensor<T>&);                                    \
  template T hard_sigmoid(T);                                                                              \
  template T hard_sigmoid_grad(T);                                                                         \
  template Tensor<T> global_avg_pool(const Tensor<T>&);                                                    \
  template Tensor<T> global_avg_pool_backward(const Tensor<T>&, const Shape&);                             \
  template std::vector<T> softmax_rows(std::span<const T>, std::size_t, std::size_t);                      \
  template std::vector<T> l2_normalize(std::span<const T>, T);                                             \
  template std::vector<T> l2_normalize_backward(std::span<const T>, std::span<const T>, T);

GDNV_INSTANTIATE(float)
GDNV_INSTANTIATE(double)

}  // namespace gdnv
