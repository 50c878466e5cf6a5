#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "srlvae/tensor.hpp"

namespace srlvae::nn {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Channel-major activation: rows are channels, columns run over (n, h, w).
struct Activation {
  int n = 0;
  int h = 0;
  int w = 0;
  RowMatrix values;  // C x (N*H*W)

  int channels() const { return static_cast<int>(values.rows()); }
};

Activation to_activation(const Tensor& t);
Tensor to_tensor(const Activation& a);

enum class LayerKind { Conv, SiLU, Upsample2x, Sigmoid };

struct Layer {
  LayerKind kind = LayerKind::Conv;
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 3;
  int stride = 1;
  int padding = 1;
  std::size_t offset = 0;  // start of weights in the flat parameter vector

  std::size_t weight_count() const {
    return static_cast<std::size_t>(out_channels) * in_channels * kernel * kernel;
  }
  std::size_t param_count() const { return kind == LayerKind::Conv ? weight_count() + out_channels : 0; }
};

struct ParamSlice {
  std::string name;
  std::size_t offset = 0;
  std::size_t size = 0;
};

// A feed-forward stack of convolutions and pointwise maps evaluated against
// an external flat parameter vector. The same architecture can therefore be
// run with the live encoder weights and with a frozen reference copy.
class ConvNet {
 public:
  struct Trace {
    std::vector<Activation> inputs;  // input of every layer
    std::vector<RowMatrix> columns;  // im2col buffers, conv layers only
    Activation output;
  };

  ConvNet& conv(int in_channels, int out_channels, int kernel, int stride, int padding);
  ConvNet& silu();
  ConvNet& upsample2x();
  ConvNet& sigmoid();

  const std::vector<Layer>& layers() const { return layers_; }
  std::size_t param_count() const { return param_count_; }
  std::vector<ParamSlice> param_slices(const std::string& prefix) const;

  // PyTorch-style uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
  void init_params(std::span<double> params, std::uint64_t seed) const;

  Activation forward(std::span<const double> params, Activation x, Trace* trace) const;

  // Back-propagates grad_out through the recorded trace. Parameter gradients
  // are accumulated into grad_params when it is non-empty; the input gradient
  // is computed only when need_input_grad is set.
  Activation backward(std::span<const double> params, const Trace& trace, Activation grad_out,
                      std::span<double> grad_params, bool need_input_grad) const;

  // Total spatial downsampling of the stack (product of conv strides divided
  // by upsampling factors); 1 for shape-preserving nets.
  double scale() const;

 private:
  std::vector<Layer> layers_;
  std::size_t param_count_ = 0;
};

}  // namespace srlvae::nn
