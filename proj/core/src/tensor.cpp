#include "srlvae/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include <fmt/format.h>

#include "srlvae/error.hpp"

namespace srlvae {

std::string Shape::str() const { return fmt::format("({}, {}, {}, {})", n, c, h, w); }

Tensor::Tensor(Shape shape, double fill) : shape_(shape), data_(shape.numel(), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(shape), data_(std::move(values)) {
  if (data_.size() != shape_.numel()) {
    throw ShapeError(fmt::format("tensor of shape {} needs {} values, got {}", shape_.str(), shape_.numel(),
                                 data_.size()));
  }
}

Tensor Tensor::slice(int first, int count) const {
  if (first < 0 || count < 0 || first + count > shape_.n) {
    throw ShapeError(fmt::format("slice [{}, {}) out of range for batch of {}", first, first + count, shape_.n));
  }
  Shape s = shape_;
  s.n = count;
  std::vector<double> out(data_.begin() + static_cast<std::ptrdiff_t>(first * shape_.per_item()),
                          data_.begin() + static_cast<std::ptrdiff_t>((first + count) * shape_.per_item()));
  return Tensor(s, std::move(out));
}

Tensor Tensor::gather(std::span<const int> indices) const {
  Shape s = shape_;
  s.n = static_cast<int>(indices.size());
  Tensor out(s);
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const int i = indices[k];
    if (i < 0 || i >= shape_.n) throw ShapeError(fmt::format("gather index {} out of range", i));
    auto src = item(i);
    std::copy(src.begin(), src.end(), out.item(static_cast<int>(k)).begin());
  }
  return out;
}

double Tensor::min() const { return data_.empty() ? 0.0 : *std::min_element(data_.begin(), data_.end()); }
double Tensor::max() const { return data_.empty() ? 0.0 : *std::max_element(data_.begin(), data_.end()); }

double Tensor::abs_max() const {
  double m = 0.0;
  for (double v : data_) m = std::max(m, std::abs(v));
  return m;
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(fmt::format("{}: shape mismatch {} vs {}", what, a.shape().str(), b.shape().str()));
  }
}

Tensor concat_batch(std::span<const Tensor> parts) {
  if (parts.empty()) return {};
  Shape s = parts.front().shape();
  s.n = 0;
  for (const auto& p : parts) {
    if (p.shape().c != s.c || p.shape().h != s.h || p.shape().w != s.w) {
      throw ShapeError("concat_batch: item shapes differ");
    }
    s.n += p.shape().n;
  }
  std::vector<double> values;
  values.reserve(s.numel());
  for (const auto& p : parts) values.insert(values.end(), p.storage().begin(), p.storage().end());
  return Tensor(s, std::move(values));
}

double compensated_sum(std::span<const double> values) {
  double sum = 0.0;
  double comp = 0.0;
  for (double v : values) {
    const double t = sum + v;
    if (std::abs(sum) >= std::abs(v)) {
      comp += (sum - t) + v;
    } else {
      comp += (v - t) + sum;
    }
    sum = t;
  }
  return sum + comp;
}

}  // namespace srlvae
