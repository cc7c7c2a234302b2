#include "evasion/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <optional>
#include <random>
#include <string>

#include "evasion/errors.hpp"

namespace evasion {

namespace {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;
template <typename T>
using RowVectorMap = Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>;
template <typename T>
using ConstRowVectorMap = Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>;

struct ImageDims {
  std::size_t n = 1, h = 0, w = 0, c = 0;
  bool batched = false;
};

ImageDims image_dims(const Shape& s, const char* op) {
  if (s.size() == 3) return {1, s[0], s[1], s[2], false};
  if (s.size() == 4) return {s[0], s[1], s[2], s[3], true};
  throw ShapeError(std::string(op) + " expects HxWxC or NxHxWxC input, got " + to_string(s));
}

Shape image_shape(const ImageDims& d, std::size_t h, std::size_t w, std::size_t c) {
  if (d.batched) return {d.n, h, w, c};
  return {h, w, c};
}

template <typename T>
Tensor<T>& ensure_shape(Tensor<T>& t, const Shape& shape) {
  if (t.shape() != shape) t = Tensor<T>(shape, T(0));
  return t;
}

template <typename T>
void accumulate(Tensor<T>& dst, const Tensor<T>& src) {
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw ShapeError(std::string(op) + ": shapes " + to_string(a) + " and " + to_string(b) + " differ");
}

struct ConvGeometry {
  ImageDims in;
  std::size_t kh = 0, kw = 0, filters = 0;
  std::size_t out_h = 0, out_w = 0;
  std::size_t pad_top = 0, pad_left = 0;
  std::size_t stride = 1;

  std::size_t rows() const { return in.n * out_h * out_w; }
  std::size_t patch() const { return kh * kw * in.c; }
};

std::size_t same_padding_before(std::size_t input, std::size_t kernel, std::size_t stride, std::size_t out) {
  std::size_t needed = (out - 1) * stride + kernel;
  std::size_t total = needed > input ? needed - input : 0;
  return total / 2;
}

ConvGeometry conv_geometry(const Shape& input, const Shape& filters, Conv2dOptions opt) {
  ConvGeometry geo;
  geo.in = image_dims(input, "conv2d");
  if (filters.size() != 4) throw ShapeError("conv2d filters must be KxKxCxF, got " + to_string(filters));
  if (filters[2] != geo.in.c) {
    throw ShapeError("conv2d filter shape " + to_string(filters) + " does not match input shape " +
                     to_string(input) + " (channel count)");
  }
  if (opt.stride == 0) throw ShapeError("conv2d stride must be at least 1");
  geo.kh = filters[0];
  geo.kw = filters[1];
  geo.filters = filters[3];
  geo.stride = opt.stride;
  if (opt.padding == Padding::valid && (geo.in.h < geo.kh || geo.in.w < geo.kw)) {
    throw ShapeError("conv2d filter shape " + to_string(filters) + " larger than input shape " + to_string(input) +
                     " under valid padding");
  }
  geo.out_h = conv_output_extent(geo.in.h, geo.kh, opt.stride, opt.padding);
  geo.out_w = conv_output_extent(geo.in.w, geo.kw, opt.stride, opt.padding);
  if (opt.padding == Padding::same) {
    geo.pad_top = same_padding_before(geo.in.h, geo.kh, opt.stride, geo.out_h);
    geo.pad_left = same_padding_before(geo.in.w, geo.kw, opt.stride, geo.out_w);
  }
  return geo;
}

template <typename T>
void im2col(const ConvGeometry& geo, const T* x, T* cols) {
  const std::size_t c = geo.in.c;
  const std::size_t patch = geo.patch();
  std::size_t row = 0;
  for (std::size_t n = 0; n < geo.in.n; ++n) {
    const T* image = x + n * geo.in.h * geo.in.w * c;
    for (std::size_t oy = 0; oy < geo.out_h; ++oy) {
      for (std::size_t ox = 0; ox < geo.out_w; ++ox, ++row) {
        T* dst = cols + row * patch;
        for (std::size_t ky = 0; ky < geo.kh; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * geo.stride + ky) -
                                    static_cast<std::ptrdiff_t>(geo.pad_top);
          for (std::size_t kx = 0; kx < geo.kw; ++kx, dst += c) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * geo.stride + kx) -
                                      static_cast<std::ptrdiff_t>(geo.pad_left);
            if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(geo.in.h) ||
                ix >= static_cast<std::ptrdiff_t>(geo.in.w)) {
              std::fill(dst, dst + c, T(0));
            } else {
              const T* src = image + (static_cast<std::size_t>(iy) * geo.in.w + static_cast<std::size_t>(ix)) * c;
              std::copy(src, src + c, dst);
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_accumulate(const ConvGeometry& geo, const T* cols, T* dx) {
  const std::size_t c = geo.in.c;
  const std::size_t patch = geo.patch();
  std::size_t row = 0;
  for (std::size_t n = 0; n < geo.in.n; ++n) {
    T* image = dx + n * geo.in.h * geo.in.w * c;
    for (std::size_t oy = 0; oy < geo.out_h; ++oy) {
      for (std::size_t ox = 0; ox < geo.out_w; ++ox, ++row) {
        const T* src = cols + row * patch;
        for (std::size_t ky = 0; ky < geo.kh; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * geo.stride + ky) -
                                    static_cast<std::ptrdiff_t>(geo.pad_top);
          for (std::size_t kx = 0; kx < geo.kw; ++kx, src += c) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * geo.stride + kx) -
                                      static_cast<std::ptrdiff_t>(geo.pad_left);
            if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(geo.in.h) ||
                ix >= static_cast<std::ptrdiff_t>(geo.in.w)) {
              continue;
            }
            T* dst = image + (static_cast<std::size_t>(iy) * geo.in.w + static_cast<std::size_t>(ix)) * c;
            for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += src[ch];
          }
        }
      }
    }
  }
}

template <typename T>
NodeId conv2d_impl(Graph<T>& g, NodeId input, NodeId filters, std::optional<NodeId> bias, Conv2dOptions opt) {
  const ConvGeometry geo = conv_geometry(g.value(input).shape(), g.value(filters).shape(), opt);
  if (bias && g.value(*bias).size() != geo.filters) {
    throw ShapeError("conv2d bias shape " + to_string(g.value(*bias).shape()) + " does not match filter shape " +
                     to_string(g.value(filters).shape()));
  }
  const Shape out_shape = image_shape(geo.in, geo.out_h, geo.out_w, geo.filters);

  auto cols = std::make_shared<AlignedVector<T>>();
  std::vector<NodeId> inputs{input, filters};
  if (bias) inputs.push_back(*bias);
  const bool has_bias = bias.has_value();

  auto forward = [geo, out_shape, cols, has_bias](Graph<T>& g, NodeId self) {
    const auto& ins = g.inputs(self);
    const Tensor<T>& x = g.value(ins[0]);
    const Tensor<T>& w = g.value(ins[1]);
    cols->resize(geo.rows() * geo.patch());
    im2col(geo, x.raw(), cols->data());
    Tensor<T>& out = ensure_shape(g.output_slot(self), out_shape);
    ConstMatrixMap<T> c(cols->data(), geo.rows(), geo.patch());
    ConstMatrixMap<T> wm(w.raw(), geo.patch(), geo.filters);
    MatrixMap<T> o(out.raw(), geo.rows(), geo.filters);
    o.noalias() = c * wm;
    if (has_bias) {
      ConstRowVectorMap<T> b(g.value(ins[2]).raw(), geo.filters);
      o.rowwise() += b;
    }
  };

  auto backward = [geo, cols, has_bias](Graph<T>& g, NodeId self, const Tensor<T>& dy) {
    const auto ins = g.inputs(self);
    ConstMatrixMap<T> dout(dy.raw(), geo.rows(), geo.filters);
    ConstMatrixMap<T> c(cols->data(), geo.rows(), geo.patch());
    if (g.requires_grad(ins[1])) {
      MatrixMap<T> dw(g.gradient_slot(ins[1]).raw(), geo.patch(), geo.filters);
      dw.noalias() += c.transpose() * dout;
    }
    if (has_bias && g.requires_grad(ins[2])) {
      RowVectorMap<T> db(g.gradient_slot(ins[2]).raw(), geo.filters);
      db += dout.colwise().sum();
    }
    if (g.requires_grad(ins[0])) {
      ConstMatrixMap<T> wm(g.value(ins[1]).raw(), geo.patch(), geo.filters);
      RowMatrix<T> dcols = dout * wm.transpose();
      col2im_accumulate(geo, dcols.data(), g.gradient_slot(ins[0]).raw());
    }
  };

  return g.record(OpKind::conv2d, std::move(inputs), forward, backward);
}

}  // namespace

std::size_t conv_output_extent(std::size_t input, std::size_t kernel, std::size_t stride, Padding padding) {
  if (stride == 0) throw ShapeError("stride must be at least 1");
  if (padding == Padding::same) return (input + stride - 1) / stride;
  if (input < kernel) throw ShapeError("valid convolution kernel larger than input");
  return (input - kernel) / stride + 1;
}

template <typename T>
NodeId conv2d(Graph<T>& g, NodeId input, NodeId filters, Conv2dOptions options) {
  return conv2d_impl(g, input, filters, std::nullopt, options);
}

template <typename T>
NodeId conv2d(Graph<T>& g, NodeId input, NodeId filters, NodeId bias, Conv2dOptions options) {
  return conv2d_impl(g, input, filters, bias, options);
}

template <typename T>
NodeId maxpool2x2(Graph<T>& g, NodeId input) {
  const ImageDims d = image_dims(g.value(input).shape(), "maxpool2x2");
  if (d.h % 2 != 0 || d.w % 2 != 0) {
    throw ShapeError("maxpool2x2 needs even spatial dimensions, got " + to_string(g.value(input).shape()));
  }
  const std::size_t oh = d.h / 2, ow = d.w / 2;
  const Shape out_shape = image_shape(d, oh, ow, d.c);
  auto winners = std::make_shared<std::vector<std::size_t>>();

  auto forward = [d, oh, ow, out_shape, winners](Graph<T>& g, NodeId self) {
    const Tensor<T>& x = g.value(g.inputs(self)[0]);
    Tensor<T>& out = ensure_shape(g.output_slot(self), out_shape);
    winners->resize(out.size());
    std::size_t o = 0;
    for (std::size_t n = 0; n < d.n; ++n) {
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
          const std::size_t base = ((n * d.h + 2 * oy) * d.w + 2 * ox) * d.c;
          const std::size_t offsets[4] = {0, d.c, d.w * d.c, d.w * d.c + d.c};
          for (std::size_t ch = 0; ch < d.c; ++ch, ++o) {
            std::size_t best = base + ch;
            for (std::size_t k = 1; k < 4; ++k) {
              const std::size_t idx = base + offsets[k] + ch;
              if (x[idx] > x[best]) best = idx;
            }
            (*winners)[o] = best;
            out[o] = x[best];
          }
        }
      }
    }
  };

  auto backward = [winners](Graph<T>& g, NodeId self, const Tensor<T>& dy) {
    NodeId in = g.inputs(self)[0];
    if (!g.requires_grad(in)) return;
    Tensor<T>& dx = g.gradient_slot(in);
    for (std::size_t o = 0; o < dy.size(); ++o) dx[(*winners)[o]] += dy[o];
  };

  return g.record(OpKind::maxpool2x2, {input}, forward, backward);
}

template <typename T>
NodeId relu(Graph<T>& g, NodeId input) {
  auto forward = [](Graph<T>& g, NodeId self) {
    const Tensor<T>& x = g.value(g.inputs(self)[0]);
    Tensor<T>& out = ensure_shape(g.output_slot(self), x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
  };
  auto backward = [](Graph<T>& g, NodeId self, const Tensor<T>& dy) {
    NodeId in = g.inputs(self)[0];
    if (!g.requires_grad(in)) return;
    const Tensor<T>& x = g.value(in);
    Tensor<T>& dx = g.gradient_slot(in);
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (x[i] > T(0)) dx[i] += dy[i];
    }
  };
  return g.record(OpKind::relu, {input}, forward, backward);
}

template <typename T>
NodeId dense(Graph<T>& g, NodeId input, NodeId weights, NodeId bias) {
  const Shape& xs = g.value(input).shape();
  const Shape& ws = g.value(weights).shape();
  if (ws.size() != 2) throw ShapeError("dense weights must be n x m, got " + to_string(ws));
  if (xs.size() != 1 && xs.size() != 2) throw ShapeError("dense input must be n or N x n, got " + to_string(xs));
  const std::size_t n = ws[0], m = ws[1];
  const std::size_t batch = xs.size() == 2 ? xs[0] : 1;
  if (xs.back() != n) {
    throw ShapeError("dense input shape " + to_string(xs) + " does not match weight shape " + to_string(ws));
  }
  if (g.value(bias).size() != m) {
    throw ShapeError("dense bias shape " + to_string(g.value(bias).shape()) + " does not match weight shape " +
                     to_string(ws));
  }
  const Shape out_shape = xs.size() == 2 ? Shape{batch, m} : Shape{m};

  auto forward = [n, m, batch, out_shape](Graph<T>& g, NodeId self) {
    const auto& ins = g.inputs(self);
    Tensor<T>& out = ensure_shape(g.output_slot(self), out_shape);
    ConstMatrixMap<T> x(g.value(ins[0]).raw(), batch, n);
    ConstMatrixMap<T> w(g.value(ins[1]).raw(), n, m);
    ConstRowVectorMap<T> b(g.value(ins[2]).raw(), m);
    MatrixMap<T> o(out.raw(), batch, m);
    o.noalias() = x * w;
    o.rowwise() += b;
  };

  auto backward = [n, m, batch](Graph<T>& g, NodeId self, const Tensor<T>& dy) {
    const auto ins = g.inputs(self);
    ConstMatrixMap<T> dout(dy.raw(), batch, m);
    if (g.requires_grad(ins[0])) {
      ConstMatrixMap<T> w(g.value(ins[1]).raw(), n, m);
      MatrixMap<T> dx(g.gradient_slot(ins[0]).raw(), batch, n);
      dx.noalias() += dout * w.transpose();
    }
    if (g.requires_grad(ins[1])) {
      ConstMatrixMap<T> x(g.value(ins[0]).raw(), batch, n);
      MatrixMap<T> dw(g.gradient_slot(ins[1]).raw(), n, m);
      dw.noalias() += x.transpose() * dout;
    }
    if (g.requires_grad(ins[2])) {
      RowVectorMap<T> db(g.gradient_slot(ins[2]).raw(), m);
      db += dout.colwise().sum();
    }
  };

  return g.record(OpKind::dense, {input, weights, bias}, forward, backward);
}

template <typename T>
NodeId softmax(Graph<T>& g, NodeId logits) {
  const std::size_t m = g.value(logits).shape().back();
  if (m < 2) throw ShapeError("softmax needs at least 2 classes, got " + to_string(g.value(logits).shape()));

  auto forward = [m](Graph<T>& g, NodeId self) {
    const Tensor<T>& z = g.value(g.inputs(self)[0]);
    Tensor<T>& y = ensure_shape(g.output_slot(self), z.shape());
    for (std::size_t r = 0; r < z.size(); r += m) {
      T top = z[r];
      for (std::size_t j = 1; j < m; ++j) top = std::max(top, z[r + j]);
      T sum = 0;
      for (std::size_t j = 0; j < m; ++j) {
        y[r + j] = std::exp(z[r + j] - top);
        sum += y[r + j];
      }
      for (std::size_t j = 0; j < m; ++j) y[r + j] /= sum;
    }
  };

  auto backward = [m](Graph<T>& g, NodeId self, const Tensor<T>& dy) {
    NodeId in = g.inputs(self)[0];
    if (!g.requires_grad(in)) return;
    const Tensor<T>& y = g.value(self);
    Tensor<T>& dz = g.gradient_slot(in);
    for (std::size_t r = 0; r < y.size(); r += m) {
      T dot = 0;
      for (std::size_t j = 0; j < m; ++j) dot += dy[r + j] * y[r + j];
      for (std::size_t j = 0; j < m; ++j) dz[r + j] += y[r + j] * (dy[r + j] - dot);
    }
  };

  return g.record(OpKind::softmax, {logits}, forward, backward);
}

template <typename T>
NodeId batch_norm_impl(Graph<T>& g, NodeId input, NodeId gamma, NodeId beta, const Tensor<T>* running_mean,
                       const Tensor<T>* running_var, Tensor<T>* update_mean, Tensor<T>* update_var, Mode mode,
                       BatchNormOptions<T> options) {
  const Shape& xs = g.value(input).shape();
  const std::size_t c = xs.back();
  for (const Tensor<T>* stat : {&g.value(gamma), &g.value(beta), running_mean, running_var}) {
    if (stat->size() != c) {
      throw ShapeError("batch_norm statistic shape " + to_string(stat->shape()) + " does not match input shape " +
                       to_string(xs) + " (last axis)");
    }
  }

  struct State {
    std::vector<T> xhat;
    std::vector<T> inv_std;
    bool running_updated = false;
  };
  auto state = std::make_shared<State>();
  const Tensor<T>* rm = running_mean;
  const Tensor<T>* rv = running_var;

  auto forward = [c, mode, options, state, rm, rv, update_mean, update_var](Graph<T>& g, NodeId self) {
    const auto& ins = g.inputs(self);
    const Tensor<T>& x = g.value(ins[0]);
    const Tensor<T>& ga = g.value(ins[1]);
    const Tensor<T>& be = g.value(ins[2]);
    const std::size_t rows = x.size() / c;
    Tensor<T>& y = ensure_shape(g.output_slot(self), x.shape());
    std::vector<T> mean(c, T(0)), var(c, T(0));
    if (mode == Mode::train) {
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < c; ++j) mean[j] += x[r * c + j];
      for (auto& v : mean) v /= static_cast<T>(rows);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < c; ++j) {
          const T d = x[r * c + j] - mean[j];
          var[j] += d * d;
        }
      for (auto& v : var) v /= static_cast<T>(rows);
      if (!state->running_updated && update_mean && update_var) {
        for (std::size_t j = 0; j < c; ++j) {
          (*update_mean)[j] = options.momentum * (*update_mean)[j] + (T(1) - options.momentum) * mean[j];
          (*update_var)[j] = options.momentum * (*update_var)[j] + (T(1) - options.momentum) * var[j];
        }
        state->running_updated = true;
      }
    } else {
      for (std::size_t j = 0; j < c; ++j) {
        mean[j] = (*rm)[j];
        var[j] = (*rv)[j];
      }
    }
    state->inv_std.resize(c);
    for (std::size_t j = 0; j < c; ++j) state->inv_std[j] = T(1) / std::sqrt(var[j] + options.epsilon);
    state->xhat.resize(x.size());
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < c; ++j) {
        const std::size_t i = r * c + j;
        state->xhat[i] = (x[i] - mean[j]) * state->inv_std[j];
        y[i] = ga[j] * state->xhat[i] + be[j];
      }
  };

  auto backward = [c, mode, state](Graph<T>& g, NodeId self, const Tensor<T>& dy) {
    const auto ins = g.inputs(self);
    const std::size_t rows = dy.size() / c;
    const Tensor<T>& ga = g.value(ins[1]);
    std::vector<T> sum_dy(c, T(0)), sum_dy_xhat(c, T(0));
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < c; ++j) {
        sum_dy[j] += dy[r * c + j];
        sum_dy_xhat[j] += dy[r * c + j] * state->xhat[r * c + j];
      }
    if (g.requires_grad(ins[1])) {
      Tensor<T>& dg = g.gradient_slot(ins[1]);
      for (std::size_t j = 0; j < c; ++j) dg[j] += sum_dy_xhat[j];
    }
    if (g.requires_grad(ins[2])) {
      Tensor<T>& db = g.gradient_slot(ins[2]);
      for (std::size_t j = 0; j < c; ++j) db[j] += sum_dy[j];
    }
    if (g.requires_grad(ins[0])) {
      Tensor<T>& dx = g.gradient_slot(ins[0]);
      if (mode == Mode::train) {
        const T inv_rows = T(1) / static_cast<T>(rows);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < c; ++j) {
            const std::size_t i = r * c + j;
            dx[i] += ga[j] * state->inv_std[j] * inv_rows *
                     (static_cast<T>(rows) * dy[i] - sum_dy[j] - state->xhat[i] * sum_dy_xhat[j]);
          }
      } else {
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < c; ++j) dx[r * c + j] += dy[r * c + j] * ga[j] * state->inv_std[j];
      }
    }
  };

  return g.record(OpKind::batch_norm, {input, gamma, beta}, forward, backward);
}

template <typename T>
NodeId batch_norm(Graph<T>& g, NodeId input, NodeId gamma, NodeId beta, Tensor<T>& running_mean,
                  Tensor<T>& running_var, Mode mode, BatchNormOptions<T> options) {
  if (mode == Mode::train) {
    return batch_norm_impl(g, input, gamma, beta, &running_mean, &running_var, &running_mean, &running_var, mode,
                           options);
  }
  return batch_norm_impl<T>(g, input, gamma, beta, &running_mean, &running_var, nullptr, nullptr, mode, options);
}

template <typename T>
NodeId batch_norm(Graph<T>& g, NodeId input, NodeId gamma, NodeId beta, const Tensor<T>& running_mean,
                  const Tensor<T>& running_var, BatchNormOptions<T> options) {
  return batch_norm_impl<T>(g, input, gamma, beta, &running_mean, &running_var, nullptr, nullptr, Mode::infer,
                            options);
}

template <typename T>
NodeId dropout(Graph<T>& g, NodeId input, double fraction, Mode mode, std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction < 1.0)) {
    throw std::invalid_argument("dropout fraction must lie in [0, 1), got " + std::to_string(fraction));
  }
  auto mask = std::make_shared<AlignedVector<T>>();
  if (mode == Mode::train && fraction > 0.0) {
    std::mt19937_64 rng(seed);
    std::bernoulli_distribution keep(1.0 - fraction);
    const T survivor = static_cast<T>(1.0 / (1.0 - fraction));
    mask->resize(g.value(input).size());
    for (auto& m : *mask) m = keep(rng) ? survivor : T(0);
  }

  auto forward = [mask](Graph<T>& g, NodeId self) {
    const Tensor<T>& x = g.value(g.inputs(self)[0]);
    Tensor<T>& y = ensure_shape(g.output_slot(self), x.shape());
    if (mask->empty()) {
      std::copy(x.data().begin(), x.data().end(), y.data().begin());
    } else {
      for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * (*mask)[i];
    }
  };
  auto backward = [mask](Graph<T>& g, NodeId self, const Tensor<T>& dy) {
    NodeId in = g.inputs(self)[0];
    if (!g.requires_grad(in)) return;
    Tensor<T>& dx = g.gradient_slot(in);
    if (mask->empty()) {
      accumulate(dx, dy);
    } else {
      for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * (*mask)[i];
    }
  };
  return g.record(OpKind::dropout, {input}, forward, backward);
}

template <typename T>
NodeId reshape(Graph<T>& g, NodeId input, Shape shape) {
  if (element_count(shape) != g.value(input).size()) {
    throw ShapeError("cannot reshape " + to_string(g.value(input).shape()) + " to " + to_string(shape));
  }
  auto forward = [shape](Graph<T>& g, NodeId self) {
    const Tensor<T>& x = g.value(g.inputs(self)[0]);
    Tensor<T>& y = ensure_shape(g.output_slot(self), shape);
    std::copy(x.data().begin(), x.data().end(), y.data().begin());
  };
  auto backward = [](Graph<T>& g, NodeId self, const Tensor<T>& dy) {
    NodeId in = g.inputs(self)[0];
    if (!g.requires_grad(in)) return;
    Tensor<T>& dx = g.gradient_slot(in);
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
  };
  return g.record(OpKind::reshape, {input}, forward, backward);
}

template <typename T>
NodeId flatten(Graph<T>& g, NodeId input) {
  const Shape& s = g.value(input).shape();
  if (s.size() < 2) return reshape(g, input, Shape{1, s.empty() ? 1 : s[0]});
  return reshape(g, input, Shape{s[0], element_count(s) / s[0]});
}

template <typename T>
NodeId tanh_box(Graph<T>& g, NodeId input) {
  auto forward = [](Graph<T>& g, NodeId self) {
    const Tensor<T>& w = g.value(g.inputs(self)[0]);
    Tensor<T>& y = ensure_shape(g.output_slot(self), w.shape());
    for (std::size_t i = 0; i < w.size(); ++i) y[i] = (std::tanh(w[i]) + T(1)) / T(2);
  };
  auto backward = [](Graph<T>& g, NodeId self, const Tensor<T>& dy) {
    NodeId in = g.inputs(self)[0];
    if (!g.requires_grad(in)) return;
    const Tensor<T>& w = g.value(in);
    Tensor<T>& dw = g.gradient_slot(in);
    for (std::size_t i = 0; i < w.size(); ++i) {
      const T t = std::tanh(w[i]);
      dw[i] += dy[i] * (T(1) - t * t) / T(2);
    }
  };
  return g.record(OpKind::tanh_box, {input}, forward, backward);
}

template <typename T>
NodeId add(Graph<T>& g, NodeId a, NodeId b) {
  require_same_shape(g.value(a).shape(), g.value(b).shape(), "add");
  auto forward = [](Graph<T>& g, NodeId self) {
    const auto& ins = g.inputs(self);
    const Tensor<T>& x = g.value(ins[0]);
    const Tensor<T>& y = g.value(ins[1]);
    Tensor<T>& out = ensure_shape(g.output_slot(self), x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
  };
  auto backward = [](Graph<T>& g, NodeId self, const Tensor<T>& dy) {
    const auto ins = g.inputs(self);
    for (NodeId in : ins) {
      if (g.requires_grad(in)) accumulate(g.gradient_slot(in), dy);
    }
  };
  return g.record(OpKind::add, {a, b}, forward, backward);
}

template <typename T>
NodeId subtract(Graph<T>& g, NodeId a, NodeId b) {
  require_same_shape(g.value(a).shape(), g.value(b).shape(), "subtract");
  auto forward = [](Graph<T>& g, NodeId self) {
    const auto& ins = g.inputs(self);
    const Tensor<T>& x = g.value(ins[0]);
    const Tensor<T>& y = g.value(ins[1]);
    Tensor<T>& out = ensure_shape(g.output_slot(self), x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - y[i];
  };
  auto backward = [](Graph<T>& g, NodeId self, const Tensor<T>& dy) {
    const auto ins = g.inputs(self);
    if (g.requires_grad(ins[0])) accumulate(g.gradient_slot(ins[0]), dy);
    if (g.requires_grad(ins[1])) {
      Tensor<T>& db = g.gradient_slot(ins[1]);
      for (std::size_t i = 0; i < dy.size(); ++i) db[i] -= dy[i];
    }
  };
  return g.record(OpKind::subtract, {a, b}, forward, backward);
}

template <typename T>
NodeId scale(Graph<T>& g, NodeId a, T factor) {
  auto forward = [factor](Graph<T>& g, NodeId self) {
    const Tensor<T>& x = g.value(g.inputs(self)[0]);
    Tensor<T>& out = ensure_shape(g.output_slot(self), x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = factor * x[i];
  };
  auto backward = [factor](Graph<T>& g, NodeId self, const Tensor<T>& dy) {
    NodeId in = g.inputs(self)[0];
    if (!g.requires_grad(in)) return;
    Tensor<T>& dx = g.gradient_slot(in);
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += factor * dy[i];
  };
  return g.record(OpKind::scale, {a}, forward, backward);
}

template <typename T>
NodeId l2_norm(Graph<T>& g, NodeId input) {
  auto forward = [](Graph<T>& g, NodeId self) {
    const Tensor<T>& x = g.value(g.inputs(self)[0]);
    T sum = 0;
    for (T v : x.data()) sum += v * v;
    ensure_shape(g.output_slot(self), Shape{1})[0] = std::sqrt(sum);
  };
  auto backward = [](Graph<T>& g, NodeId self, const Tensor<T>& dy) {
    NodeId in = g.inputs(self)[0];
    if (!g.requires_grad(in)) return;
    const T norm = g.value(self)[0];
    if (norm == T(0)) return;
    const Tensor<T>& x = g.value(in);
    Tensor<T>& dx = g.gradient_slot(in);
    const T k = dy[0] / norm;
    for (std::size_t i = 0; i < x.size(); ++i) dx[i] += k * x[i];
  };
  return g.record(OpKind::l2_norm, {input}, forward, backward);
}

template <typename T>
NodeId softmax_cross_entropy(Graph<T>& g, NodeId logits, std::vector<std::size_t> labels) {
  const Shape& s = g.value(logits).shape();
  const std::size_t m = s.back();
  const std::size_t batch = g.value(logits).size() / m;
  if (labels.size() != batch) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                     to_string(s));
  }
  for (auto l : labels) {
    if (l >= m) throw std::out_of_range("softmax_cross_entropy label " + std::to_string(l) + " out of range");
  }
  auto probs = std::make_shared<AlignedVector<T>>();

  auto forward = [m, batch, labels, probs](Graph<T>& g, NodeId self) {
    const Tensor<T>& z = g.value(g.inputs(self)[0]);
    probs->resize(z.size());
    T total = 0;
    for (std::size_t r = 0; r < batch; ++r) {
      const T* row = z.raw() + r * m;
      T top = row[0];
      for (std::size_t j = 1; j < m; ++j) top = std::max(top, row[j]);
      T sum = 0;
      for (std::size_t j = 0; j < m; ++j) sum += std::exp(row[j] - top);
      const T lse = top + std::log(sum);
      for (std::size_t j = 0; j < m; ++j) (*probs)[r * m + j] = std::exp(row[j] - lse);
      total += lse - row[labels[r]];
    }
    ensure_shape(g.output_slot(self), Shape{1})[0] = total / static_cast<T>(batch);
  };

  auto backward = [m, batch, labels, probs](Graph<T>& g, NodeId self, const Tensor<T>& dy) {
    NodeId in = g.inputs(self)[0];
    if (!g.requires_grad(in)) return;
    Tensor<T>& dz = g.gradient_slot(in);
    const T k = dy[0] / static_cast<T>(batch);
    for (std::size_t r = 0; r < batch; ++r) {
      for (std::size_t j = 0; j < m; ++j) {
        const T onehot = j == labels[r] ? T(1) : T(0);
        dz[r * m + j] += k * ((*probs)[r * m + j] - onehot);
      }
    }
  };

  return g.record(OpKind::softmax_cross_entropy, {logits}, forward, backward);
}

template <typename T>
NodeId mean_squared_error(Graph<T>& g, NodeId predictions, std::vector<T> targets) {
  const Tensor<T>& p = g.value(predictions);
  if (p.size() != targets.size()) {
    throw ShapeError("mean_squared_error: " + std::to_string(targets.size()) + " targets for predictions " +
                     to_string(p.shape()));
  }
  auto forward = [targets](Graph<T>& g, NodeId self) {
    const Tensor<T>& p = g.value(g.inputs(self)[0]);
    T sum = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const T r = p[i] - targets[i];
      sum += r * r;
    }
    ensure_shape(g.output_slot(self), Shape{1})[0] = sum / static_cast<T>(p.size());
  };
  auto backward = [targets](Graph<T>& g, NodeId self, const Tensor<T>& dy) {
    NodeId in = g.inputs(self)[0];
    if (!g.requires_grad(in)) return;
    const Tensor<T>& p = g.value(in);
    Tensor<T>& dp = g.gradient_slot(in);
    const T k = T(2) * dy[0] / static_cast<T>(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) dp[i] += k * (p[i] - targets[i]);
  };
  return g.record(OpKind::mean_squared_error, {predictions}, forward, backward);
}

template <typename T>
NodeId hinge_logit_loss(Graph<T>& g, NodeId logits, std::size_t target) {
  const Tensor<T>& z = g.value(logits);
  if (z.size() < 2 || z.shape().back() != z.size()) {
    throw ShapeError("hinge_logit_loss expects a single logit vector, got " + to_string(z.shape()));
  }
  if (target >= z.size()) throw std::out_of_range("hinge_logit_loss target " + std::to_string(target) + " out of range");

  auto runner_up = [target](const Tensor<T>& z) {
    std::size_t best = target == 0 ? 1 : 0;
    for (std::size_t j = 0; j < z.size(); ++j) {
      if (j != target && z[j] > z[best]) best = j;
    }
    return best;
  };

  auto forward = [target, runner_up](Graph<T>& g, NodeId self) {
    const Tensor<T>& z = g.value(g.inputs(self)[0]);
    const T s = z[runner_up(z)] - z[target];
    ensure_shape(g.output_slot(self), Shape{1})[0] = s > T(0) ? s : T(0);
  };
  auto backward = [target, runner_up](Graph<T>& g, NodeId self, const Tensor<T>& dy) {
    NodeId in = g.inputs(self)[0];
    if (!g.requires_grad(in) || !(g.value(self)[0] > T(0))) return;
    const Tensor<T>& z = g.value(in);
    Tensor<T>& dz = g.gradient_slot(in);
    dz[runner_up(z)] += dy[0];
    dz[target] -= dy[0];
  };
  return g.record(OpKind::hinge_logit, {logits}, forward, backward);
}

template <typename T>
NodeId residual_loss(Graph<T>& g, NodeId prediction, T y) {
  if (g.value(prediction).size() != 1) {
    throw ShapeError("residual_loss expects a scalar prediction, got " + to_string(g.value(prediction).shape()));
  }
  auto forward = [y](Graph<T>& g, NodeId self) {
    const T r = g.value(g.inputs(self)[0])[0] - y;
    ensure_shape(g.output_slot(self), Shape{1})[0] = r * r;
  };
  auto backward = [y](Graph<T>& g, NodeId self, const Tensor<T>& dy) {
    NodeId in = g.inputs(self)[0];
    if (!g.requires_grad(in)) return;
    const T r = g.value(in)[0] - y;
    g.gradient_slot(in)[0] += T(2) * r * dy[0];
  };
  return g.record(OpKind::residual, {prediction}, forward, backward);
}

#define EVASION_INSTANTIATE_OPS(T)                                                                             \
  template NodeId conv2d<T>(Graph<T>&, NodeId, NodeId, Conv2dOptions);                                         \
  template NodeId conv2d<T>(Graph<T>&, NodeId, NodeId, NodeId, Conv2dOptions);                                 \
  template NodeId maxpool2x2<T>(Graph<T>&, NodeId);                                                            \
  template NodeId relu<T>(Graph<T>&, NodeId);                                                                  \
  template NodeId dense<T>(Graph<T>&, NodeId, NodeId, NodeId);                                                 \
  template NodeId softmax<T>(Graph<T>&, NodeId);                                                               \
  template NodeId batch_norm<T>(Graph<T>&, NodeId, NodeId, NodeId, Tensor<T>&, Tensor<T>&, Mode,               \
                                BatchNormOptions<T>);                                                          \
  template NodeId batch_norm<T>(Graph<T>&, NodeId, NodeId, NodeId, const Tensor<T>&, const Tensor<T>&,         \
                                BatchNormOptions<T>);                                                          \
  template NodeId dropout<T>(Graph<T>&, NodeId, double, Mode, std::uint64_t);                                  \
  template NodeId reshape<T>(Graph<T>&, NodeId, Shape);                                                        \
  template NodeId flatten<T>(Graph<T>&, NodeId);                                                               \
  template NodeId tanh_box<T>(Graph<T>&, NodeId);                                                              \
  template NodeId add<T>(Graph<T>&, NodeId, NodeId);                                                           \
  template NodeId subtract<T>(Graph<T>&, NodeId, NodeId);                                                      \
  template NodeId scale<T>(Graph<T>&, NodeId, T);                                                              \
  template NodeId l2_norm<T>(Graph<T>&, NodeId);                                                               \
  template NodeId softmax_cross_entropy<T>(Graph<T>&, NodeId, std::vector<std::size_t>);                      \
  template NodeId mean_squared_error<T>(Graph<T>&, NodeId, std::vector<T>);                                    \
  template NodeId hinge_logit_loss<T>(Graph<T>&, NodeId, std::size_t);                                         \
  template NodeId residual_loss<T>(Graph<T>&, NodeId, T);

EVASION_INSTANTIATE_OPS(float)
EVASION_INSTANTIATE_OPS(double)

#undef EVASION_INSTANTIATE_OPS

}  // namespace evasion
