#pragma once

// Generators and brute-force reference implementations shared by the test
// binaries. Nothing here calls into the library code it is compared against.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "evasion/model.hpp"
#include "evasion/ops.hpp"
#include "evasion/tensor.hpp"

namespace testing {

using evasion::Shape;
using evasion::Tensor;

class Gen {
 public:
  explicit Gen(std::uint64_t seed) : rng_(seed) {}

  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }
  std::size_t index(std::size_t lo, std::size_t hi) {  // inclusive
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng_);
  }
  bool coin() { return index(0, 1) == 1; }

  template <typename T = double>
  Tensor<T> tensor(Shape shape, double lo = -1, double hi = 1) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<T>(uniform(lo, hi));
    return t;
  }

  std::mt19937_64& engine() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

/// sum(x * w) for a fixed random w, so every output element gets a distinct
/// upstream gradient.
inline evasion::NodeId weighted_sum(evasion::Graph<double>& g, evasion::NodeId x, Gen& gen) {
  const evasion::NodeId w = g.constant(gen.tensor(g.value(x).shape()));
  return g.record(
      evasion::OpKind::scale, {x, w},
      [](evasion::Graph<double>& gg, evasion::NodeId self) {
        const auto& a = gg.value(gg.inputs(self)[0]);
        const auto& b = gg.value(gg.inputs(self)[1]);
        double s = 0;
        for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
        gg.output_slot(self) = Tensor<double>({1}, s);
      },
      [](evasion::Graph<double>& gg, evasion::NodeId self, const Tensor<double>& dy) {
        const evasion::NodeId in = gg.inputs(self)[0];
        if (!gg.requires_grad(in)) return;
        const auto& b = gg.value(gg.inputs(self)[1]);
        auto& grad = gg.gradient_slot(in);
        for (std::size_t i = 0; i < b.size(); ++i) grad[i] += dy[0] * b[i];
      });
}

/// Direct convolution over H x W x C input and K x K x C x F filters with
/// explicit zero padding.
inline std::vector<double> naive_conv(std::span<const double> in, std::size_t h, std::size_t w, std::size_t c,
                                      std::span<const double> filt, std::size_t k, std::size_t f,
                                      std::size_t stride, bool same, std::size_t& oh, std::size_t& ow) {
  std::size_t pad_top = 0, pad_left = 0;
  if (same) {
    oh = (h + stride - 1) / stride;
    ow = (w + stride - 1) / stride;
    const long th = std::max<long>(0, static_cast<long>((oh - 1) * stride + k) - static_cast<long>(h));
    const long tw = std::max<long>(0, static_cast<long>((ow - 1) * stride + k) - static_cast<long>(w));
    pad_top = static_cast<std::size_t>(th / 2);
    pad_left = static_cast<std::size_t>(tw / 2);
  } else {
    oh = (h - k) / stride + 1;
    ow = (w - k) / stride + 1;
  }
  std::vector<double> out(oh * ow * f, 0.0);
  for (std::size_t oy = 0; oy < oh; ++oy)
    for (std::size_t ox = 0; ox < ow; ++ox)
      for (std::size_t o = 0; o < f; ++o) {
        double acc = 0;
        for (std::size_t ky = 0; ky < k; ++ky)
          for (std::size_t kx = 0; kx < k; ++kx) {
            const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad_top);
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad_left);
            if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) continue;
            for (std::size_t ch = 0; ch < c; ++ch) {
              acc += in[(static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)) * c + ch] *
                     filt[((ky * k + kx) * c + ch) * f + o];
            }
          }
        out[(oy * ow + ox) * f + o] = acc;
      }
  return out;
}

/// Half-pixel-center bilinear sample of channel ch at destination (y, x).
inline double bilinear_at(std::span<const double> img, std::size_t h, std::size_t w, std::size_t c, std::size_t ch,
                          std::size_t oh, std::size_t ow, std::size_t y, std::size_t x) {
  auto src = [](std::size_t d, std::size_t in, std::size_t out) {
    double s = (d + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
    if (s < 0) s = 0;
    if (s > static_cast<double>(in - 1)) s = static_cast<double>(in - 1);
    return s;
  };
  const double sy = src(y, h, oh), sx = src(x, w, ow);
  const std::size_t y0 = static_cast<std::size_t>(sy), x0 = static_cast<std::size_t>(sx);
  const std::size_t y1 = y0 + 1 < h ? y0 + 1 : y0, x1 = x0 + 1 < w ? x0 + 1 : x0;
  const double fy = sy - y0, fx = sx - x0;
  auto p = [&](std::size_t yy, std::size_t xx) { return img[(yy * w + xx) * c + ch]; };
  return (1 - fy) * (1 - fx) * p(y0, x0) + (1 - fy) * fx * p(y0, x1) + fy * (1 - fx) * p(y1, x0) + fy * fx * p(y1, x1);
}

/// ceil(p * n / 100)-th order statistic for integer p, by integer arithmetic.
inline double sorted_rank(std::vector<double> v, int percentile) {
  std::sort(v.begin(), v.end());
  std::size_t rank = (static_cast<std::size_t>(percentile) * v.size() + 99) / 100;
  if (rank == 0) rank = 1;
  return v[rank - 1];
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Equals the trapezoidal ROC area.
inline double pairwise_auc(const std::vector<std::array<double, 3>>& scores, const std::vector<int>& labels) {
  std::vector<double> pos, neg;
  for (std::size_t i = 0; i < scores.size(); ++i)
    for (int c = 0; c < 3; ++c) (labels[i] == c ? pos : neg).push_back(scores[i][c]);
  std::sort(neg.begin(), neg.end());
  double wins = 0;
  for (double p : pos) {
    const auto lo = std::lower_bound(neg.begin(), neg.end(), p);
    const auto hi = std::upper_bound(neg.begin(), neg.end(), p);
    wins += static_cast<double>(lo - neg.begin()) + 0.5 * static_cast<double>(hi - lo);
  }
  return wins / (static_cast<double>(pos.size()) * static_cast<double>(neg.size()));
}

/// max over j != t of z_j, minus z_t, floored at zero.
inline double hinge_formula(const std::vector<double>& z, std::size_t t) {
  double best = -INFINITY;
  for (std::size_t j = 0; j < z.size(); ++j)
    if (j != t) best = std::max(best, z[j]);
  return std::max(0.0, best - z[t]);
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("evasion_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

/// Small classification network over 4 x 4 x 3 images for attack tests.
inline evasion::Model<double> tiny_classifier(std::uint64_t seed) {
  using namespace evasion;
  Model<double> m(Architecture::epoch, Head::classification, Resolution{4, 4},
                  {ConvSpec{4, 3, 1, Padding::same}, ReluSpec{}, FlattenSpec{}, DenseSpec{3}, SoftmaxSpec{}});
  m.initialize(seed);
  return m;
}

inline evasion::Model<double> tiny_regressor(std::uint64_t seed) {
  using namespace evasion;
  Model<double> m(Architecture::epoch, Head::regression, Resolution{4, 4},
                  {ConvSpec{4, 3, 1, Padding::same}, ReluSpec{}, FlattenSpec{}, DenseSpec{1}});
  m.initialize(seed);
  return m;
}

}  // namespace testing
