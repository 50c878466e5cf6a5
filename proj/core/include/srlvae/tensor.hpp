#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace srlvae {

// Dense NCHW tensor of doubles. Everything in the library that carries
// pixels, latents or gradients uses this type.
struct Shape {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  std::size_t numel() const {
    return static_cast<std::size_t>(n) * static_cast<std::size_t>(c) * static_cast<std::size_t>(h) *
           static_cast<std::size_t>(w);
  }
  std::size_t per_item() const {
    return static_cast<std::size_t>(c) * static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  }
  friend bool operator==(const Shape&, const Shape&) = default;
  std::string str() const;
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(int n, int c, int h, int w) { return data_[offset(n, c, h, w)]; }
  double at(int n, int c, int h, int w) const { return data_[offset(n, c, h, w)]; }

  // View of item n as a contiguous C*H*W span.
  std::span<double> item(int n) { return {data_.data() + n * shape_.per_item(), shape_.per_item()}; }
  std::span<const double> item(int n) const {
    return {data_.data() + n * shape_.per_item(), shape_.per_item()};
  }

  // Copies items [first, first+count) into a new tensor.
  Tensor slice(int first, int count) const;
  // Gathers the listed items into a new tensor, in the given order.
  Tensor gather(std::span<const int> indices) const;

  double min() const;
  double max() const;
  double abs_max() const;
  bool all_finite() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::size_t offset(int n, int c, int h, int w) const {
    return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }

  Shape shape_;
  std::vector<double> data_;
};

// Throws ShapeError naming `what` when the shapes differ.
void require_same_shape(const Tensor& a, const Tensor& b, const char* what);

// Concatenates tensors along the batch axis.
Tensor concat_batch(std::span<const Tensor> parts);

// Neumaier-compensated sum; keeps aggregated metrics stable under reordering.
double compensated_sum(std::span<const double> values);

}  // namespace srlvae
