#include "srlvae/nn.hpp"

#include <cmath>
#include <random>

#include <fmt/format.h>

#include "srlvae/error.hpp"

namespace srlvae::nn {
namespace {

int out_extent(int in, int kernel, int stride, int padding) { return (in + 2 * padding - kernel) / stride + 1; }

// Output columns [lo, hi) read inside the input row; the rest hit padding.
std::pair<int, int> valid_range(int kx, const Layer& l, int w, int wo) {
  int lo = 0;
  while (lo < wo && lo * l.stride + kx - l.padding < 0) ++lo;
  int hi = wo;
  while (hi > lo && (hi - 1) * l.stride + kx - l.padding >= w) --hi;
  return {lo, hi};
}

RowMatrix im2col(const Activation& x, const Layer& l, int ho, int wo) {
  const int k = l.kernel;
  RowMatrix cols(static_cast<Eigen::Index>(l.in_channels) * k * k, static_cast<Eigen::Index>(x.n) * ho * wo);
  for (int ci = 0; ci < l.in_channels; ++ci) {
    const double* src = x.values.row(ci).data();
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        double* dst = cols.row((ci * k + ky) * k + kx).data();
        const auto [lo, hi] = valid_range(kx, l, x.w, wo);
        const int shift = kx - l.padding;
        for (int n = 0; n < x.n; ++n) {
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * l.stride + ky - l.padding;
            double* row = dst + (static_cast<std::ptrdiff_t>(n) * ho + oy) * wo;
            if (iy < 0 || iy >= x.h) {
              std::fill(row, row + wo, 0.0);
              continue;
            }
            const double* line = src + (static_cast<std::ptrdiff_t>(n) * x.h + iy) * x.w;
            std::fill(row, row + lo, 0.0);
            if (l.stride == 1) {
              std::copy(line + lo + shift, line + hi + shift, row + lo);
            } else {
              for (int ox = lo; ox < hi; ++ox) row[ox] = line[ox * l.stride + shift];
            }
            std::fill(row + hi, row + wo, 0.0);
          }
        }
      }
    }
  }
  return cols;
}

Activation col2im(const RowMatrix& cols, const Layer& l, int n_items, int h, int w, int ho, int wo) {
  Activation dx;
  dx.n = n_items;
  dx.h = h;
  dx.w = w;
  dx.values = RowMatrix::Zero(l.in_channels, static_cast<Eigen::Index>(n_items) * h * w);
  const int k = l.kernel;
  for (int ci = 0; ci < l.in_channels; ++ci) {
    double* dst = dx.values.row(ci).data();
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const double* src = cols.row((ci * k + ky) * k + kx).data();
        const auto [lo, hi] = valid_range(kx, l, w, wo);
        const int shift = kx - l.padding;
        for (int n = 0; n < n_items; ++n) {
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * l.stride + ky - l.padding;
            if (iy < 0 || iy >= h) continue;
            const double* row = src + (static_cast<std::ptrdiff_t>(n) * ho + oy) * wo;
            double* line = dst + (static_cast<std::ptrdiff_t>(n) * h + iy) * w;
            if (l.stride == 1) {
              for (int ox = lo; ox < hi; ++ox) line[ox + shift] += row[ox];
            } else {
              for (int ox = lo; ox < hi; ++ox) line[ox * l.stride + shift] += row[ox];
            }
          }
        }
      }
    }
  }
  return dx;
}

}  // namespace

Activation to_activation(const Tensor& t) {
  const Shape& s = t.shape();
  Activation a;
  a.n = s.n;
  a.h = s.h;
  a.w = s.w;
  const Eigen::Index plane = static_cast<Eigen::Index>(s.h) * s.w;
  a.values.resize(s.c, static_cast<Eigen::Index>(s.n) * plane);
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const double* src = t.data() + (static_cast<std::size_t>(n) * s.c + c) * plane;
      std::copy(src, src + plane, a.values.row(c).data() + n * plane);
    }
  }
  return a;
}

Tensor to_tensor(const Activation& a) {
  Shape s{a.n, a.channels(), a.h, a.w};
  Tensor t(s);
  const Eigen::Index plane = static_cast<Eigen::Index>(s.h) * s.w;
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const double* src = a.values.row(c).data() + n * plane;
      std::copy(src, src + plane, t.data() + (static_cast<std::size_t>(n) * s.c + c) * plane);
    }
  }
  return t;
}

ConvNet& ConvNet::conv(int in_channels, int out_channels, int kernel, int stride, int padding) {
  Layer l;
  l.kind = LayerKind::Conv;
  l.in_channels = in_channels;
  l.out_channels = out_channels;
  l.kernel = kernel;
  l.stride = stride;
  l.padding = padding;
  l.offset = param_count_;
  param_count_ += l.param_count();
  layers_.push_back(l);
  return *this;
}

ConvNet& ConvNet::silu() {
  layers_.push_back(Layer{.kind = LayerKind::SiLU});
  return *this;
}

ConvNet& ConvNet::upsample2x() {
  layers_.push_back(Layer{.kind = LayerKind::Upsample2x});
  return *this;
}

ConvNet& ConvNet::sigmoid() {
  layers_.push_back(Layer{.kind = LayerKind::Sigmoid});
  return *this;
}

std::vector<ParamSlice> ConvNet::param_slices(const std::string& prefix) const {
  std::vector<ParamSlice> out;
  int index = 0;
  for (const auto& l : layers_) {
    if (l.kind != LayerKind::Conv) continue;
    out.push_back({fmt::format("{}/conv{}/weight", prefix, index), l.offset, l.weight_count()});
    out.push_back({fmt::format("{}/conv{}/bias", prefix, index), l.offset + l.weight_count(),
                   static_cast<std::size_t>(l.out_channels)});
    ++index;
  }
  return out;
}

void ConvNet::init_params(std::span<double> params, std::uint64_t seed) const {
  if (params.size() != param_count_) throw ShapeError("init_params: parameter vector has wrong size");
  std::mt19937_64 rng(seed);
  for (const auto& l : layers_) {
    if (l.kind != LayerKind::Conv) continue;
    const double bound = 1.0 / std::sqrt(static_cast<double>(l.in_channels * l.kernel * l.kernel));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (std::size_t i = 0; i < l.param_count(); ++i) params[l.offset + i] = dist(rng);
  }
}

double ConvNet::scale() const {
  double s = 1.0;
  for (const auto& l : layers_) {
    if (l.kind == LayerKind::Conv) s *= l.stride;
    if (l.kind == LayerKind::Upsample2x) s /= 2.0;
  }
  return s;
}

Activation ConvNet::forward(std::span<const double> params, Activation x, Trace* trace) const {
  if (params.size() != param_count_) throw ShapeError("ConvNet::forward: parameter vector has wrong size");
  if (trace) {
    trace->inputs.clear();
    trace->columns.clear();
  }
  for (const auto& l : layers_) {
    Activation y;
    switch (l.kind) {
      case LayerKind::Conv: {
        if (x.channels() != l.in_channels) {
          throw ShapeError(fmt::format("conv expects {} input channels, got {}", l.in_channels, x.channels()));
        }
        const int ho = out_extent(x.h, l.kernel, l.stride, l.padding);
        const int wo = out_extent(x.w, l.kernel, l.stride, l.padding);
        RowMatrix cols = im2col(x, l, ho, wo);
        Eigen::Map<const RowMatrix> weight(params.data() + l.offset, l.out_channels,
                                           static_cast<Eigen::Index>(l.in_channels) * l.kernel * l.kernel);
        Eigen::Map<const Eigen::VectorXd> bias(params.data() + l.offset + l.weight_count(), l.out_channels);
        y.n = x.n;
        y.h = ho;
        y.w = wo;
        y.values.noalias() = weight * cols;
        y.values.colwise() += bias;
        if (trace) trace->columns.push_back(std::move(cols));
        break;
      }
      case LayerKind::SiLU: {
        y.n = x.n;
        y.h = x.h;
        y.w = x.w;
        y.values = x.values.array() / (1.0 + (-x.values.array()).exp());
        break;
      }
      case LayerKind::Sigmoid: {
        y.n = x.n;
        y.h = x.h;
        y.w = x.w;
        y.values = 1.0 / (1.0 + (-x.values.array()).exp());
        break;
      }
      case LayerKind::Upsample2x: {
        y.n = x.n;
        y.h = 2 * x.h;
        y.w = 2 * x.w;
        y.values.resize(x.channels(), static_cast<Eigen::Index>(y.n) * y.h * y.w);
        for (Eigen::Index c = 0; c < x.values.rows(); ++c) {
          const double* src = x.values.row(c).data();
          double* dst = y.values.row(c).data();
          for (int n = 0; n < x.n; ++n) {
            for (int iy = 0; iy < x.h; ++iy) {
              const double* line = src + (static_cast<std::ptrdiff_t>(n) * x.h + iy) * x.w;
              double* out0 = dst + (static_cast<std::ptrdiff_t>(n) * y.h + 2 * iy) * y.w;
              double* out1 = out0 + y.w;
              for (int ix = 0; ix < x.w; ++ix) {
                out0[2 * ix] = out0[2 * ix + 1] = line[ix];
                out1[2 * ix] = out1[2 * ix + 1] = line[ix];
              }
            }
          }
        }
        break;
      }
    }
    if (trace) trace->inputs.push_back(std::move(x));
    x = std::move(y);
  }
  if (trace) trace->output = x;
  return x;
}

Activation ConvNet::backward(std::span<const double> params, const Trace& trace, Activation grad,
                             std::span<double> grad_params, bool need_input_grad) const {
  if (trace.inputs.size() != layers_.size()) throw Error("ConvNet::backward: trace does not match network");
  if (!grad_params.empty() && grad_params.size() != param_count_) {
    throw ShapeError("ConvNet::backward: gradient vector has wrong size");
  }
  std::size_t conv_index = trace.columns.size();
  for (std::size_t li = layers_.size(); li-- > 0;) {
    const Layer& l = layers_[li];
    const Activation& x = trace.inputs[li];
    const bool last = li == 0;
    switch (l.kind) {
      case LayerKind::Conv: {
        --conv_index;
        const RowMatrix& cols = trace.columns[conv_index];
        const Eigen::Index k = static_cast<Eigen::Index>(l.in_channels) * l.kernel * l.kernel;
        if (!grad_params.empty()) {
          Eigen::Map<RowMatrix> gw(grad_params.data() + l.offset, l.out_channels, k);
          Eigen::Map<Eigen::VectorXd> gb(grad_params.data() + l.offset + l.weight_count(), l.out_channels);
          gw.noalias() += grad.values * cols.transpose();
          gb += grad.values.rowwise().sum();
        }
        if (last && !need_input_grad) return {};
        Eigen::Map<const RowMatrix> weight(params.data() + l.offset, l.out_channels, k);
        RowMatrix dcols = weight.transpose() * grad.values;
        grad = col2im(dcols, l, x.n, x.h, x.w, grad.h, grad.w);
        break;
      }
      case LayerKind::SiLU: {
        const auto s = (1.0 / (1.0 + (-x.values.array()).exp())).eval();
        grad.values = grad.values.array() * s * (1.0 + x.values.array() * (1.0 - s));
        break;
      }
      case LayerKind::Sigmoid: {
        const auto s = (1.0 / (1.0 + (-x.values.array()).exp())).eval();
        grad.values = grad.values.array() * s * (1.0 - s);
        break;
      }
      case LayerKind::Upsample2x: {
        Activation dx;
        dx.n = x.n;
        dx.h = x.h;
        dx.w = x.w;
        dx.values.resize(x.channels(), static_cast<Eigen::Index>(x.n) * x.h * x.w);
        for (Eigen::Index c = 0; c < dx.values.rows(); ++c) {
          const double* src = grad.values.row(c).data();
          double* dst = dx.values.row(c).data();
          for (int n = 0; n < x.n; ++n) {
            for (int iy = 0; iy < x.h; ++iy) {
              const double* in0 = src + (static_cast<std::ptrdiff_t>(n) * grad.h + 2 * iy) * grad.w;
              const double* in1 = in0 + grad.w;
              double* line = dst + (static_cast<std::ptrdiff_t>(n) * x.h + iy) * x.w;
              for (int ix = 0; ix < x.w; ++ix) {
                line[ix] = in0[2 * ix] + in0[2 * ix + 1] + in1[2 * ix] + in1[2 * ix + 1];
              }
            }
          }
        }
        grad = std::move(dx);
        break;
      }
    }
  }
  return grad;
}

}  // namespace srlvae::nn
