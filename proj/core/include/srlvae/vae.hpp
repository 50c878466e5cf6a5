#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "srlvae/nn.hpp"
#include "srlvae/tensor.hpp"

namespace srlvae {

inline constexpr double kLogVarMin = -30.0;
inline constexpr double kLogVarMax = 20.0;

struct VaeConfig {
  int image_channels = 3;
  std::vector<int> channels{32, 64, 128};
  int downsample_levels = 3;
  int latent_channels = 4;
  std::uint64_t init_seed = 0;

  int downsampling_factor() const { return 1 << downsample_levels; }
  void validate() const;
  friend bool operator==(const VaeConfig&, const VaeConfig&) = default;
};

// Diagonal Gaussian posterior. log_var is clamped to [kLogVarMin, kLogVarMax]
// on construction.
class LatentDist {
 public:
  LatentDist() = default;
  LatentDist(Tensor mu, Tensor log_var);

  const Tensor& mu() const { return mu_; }
  const Tensor& log_var() const { return log_var_; }
  const Shape& shape() const { return mu_.shape(); }

 private:
  Tensor mu_;
  Tensor log_var_;
};

// Gradient of a scalar objective with respect to a LatentDist.
struct LatentGrad {
  Tensor mu;
  Tensor log_var;
};

struct EncoderCache {
  nn::ConvNet::Trace trace;
  Tensor raw_log_var;  // pre-clamp values, masks the clamp's zero gradient
};

struct DecoderCache {
  nn::ConvNet::Trace trace;
};

// Encoder/decoder parameter sets with freeze flags and an optional frozen
// reference copy of the encoder (theta_0) used by the originality term.
class VaeModel {
 public:
  explicit VaeModel(VaeConfig config);

  const VaeConfig& config() const { return config_; }
  const nn::ConvNet& encoder_net() const { return encoder_net_; }
  const nn::ConvNet& decoder_net() const { return decoder_net_; }

  std::vector<double>& encoder_params() { return encoder_params_; }
  const std::vector<double>& encoder_params() const { return encoder_params_; }
  std::vector<double>& decoder_params() { return decoder_params_; }
  const std::vector<double>& decoder_params() const { return decoder_params_; }

  bool has_reference() const { return reference_encoder_.has_value(); }
  const std::vector<double>& reference_params() const;
  // theta_0 <- theta. Called once when fine-tuning begins.
  void snapshot_reference();
  void set_reference(std::vector<double> params);

  bool freeze_encoder = false;
  bool freeze_decoder = false;

  // Latent shape produced for an image batch of the given shape; throws
  // ShapeError naming the dimension that is not divisible by the factor.
  Shape latent_shape(const Shape& image) const;

  LatentDist encode(const Tensor& x, EncoderCache* cache = nullptr) const;
  LatentDist encode_reference(const Tensor& x, EncoderCache* cache = nullptr) const;
  LatentDist encode_with(std::span<const double> params, const Tensor& x, EncoderCache* cache) const;
  Tensor decode(const Tensor& z, DecoderCache* cache = nullptr) const;

  // Returns dL/dx when need_input_grad is set; accumulates dL/dtheta into
  // grad_params when it is non-empty.
  Tensor encoder_backward(std::span<const double> params, const EncoderCache& cache, const LatentGrad& grad,
                          std::span<double> grad_params, bool need_input_grad) const;
  // Returns dL/dz; accumulates dL/dphi into grad_params when non-empty.
  Tensor decoder_backward(const DecoderCache& cache, const Tensor& grad_out, std::span<double> grad_params) const;

 private:
  VaeConfig config_;
  nn::ConvNet encoder_net_;
  nn::ConvNet decoder_net_;
  std::vector<double> encoder_params_;
  std::vector<double> decoder_params_;
  std::optional<std::vector<double>> reference_encoder_;
};

// Reparameterized sample z = mu + exp(0.5 log_var) * eta, eta ~ N(0, I) from seed.
Tensor sample_noise(const Shape& shape, std::uint64_t seed);
Tensor sample_latent(const LatentDist& dist, std::uint64_t seed);
Tensor sample_latent(const LatentDist& dist, const Tensor& noise);
// Chain rule of the reparameterization for a fixed noise draw.
LatentGrad reparam_backward(const LatentDist& dist, const Tensor& noise, const Tensor& grad_z);

// Fixed multi-scale random convolutional feature pyramid standing in for a
// pretrained perceptual network.
class PerceptualExtractor {
 public:
  enum class Source { SeededRandom, Pretrained };

  static PerceptualExtractor seeded(int image_channels, std::uint64_t seed = 1234);
  // Plugin slot: caller supplies stage nets and their weights.
  static PerceptualExtractor from_weights(std::vector<nn::ConvNet> stages, std::vector<std::vector<double>> weights);

  Source source() const { return source_; }
  std::string source_tag() const;
  std::uint64_t seed() const { return seed_; }
  std::size_t scale_count() const { return stages_.size(); }
  // Width of the globally pooled feature vector.
  int pooled_dim() const;

  struct Trace {
    std::vector<nn::ConvNet::Trace> stages;
  };

  std::vector<nn::Activation> features(const Tensor& x, Trace* trace = nullptr) const;
  // Back-propagates per-scale feature gradients to the input image.
  Tensor backward(const Trace& trace, std::vector<nn::Activation> grads) const;

  // Spatially averaged features of every scale, concatenated: (N, pooled_dim).
  std::vector<std::vector<double>> pooled(const Tensor& x) const;

 private:
  Source source_ = Source::SeededRandom;
  std::uint64_t seed_ = 0;
  std::vector<nn::ConvNet> stages_;
  std::vector<std::vector<double>> weights_;
};

// Loss primitives. Each *_grad variant also returns the gradient w.r.t. its
// first argument.
double mse_loss(const Tensor& a, const Tensor& b);
double mse_loss_grad(const Tensor& a, const Tensor& b, Tensor& grad_a);
double l1_loss(const Tensor& a, const Tensor& b);
double l1_loss_grad(const Tensor& a, const Tensor& b, Tensor& grad_a);

double perceptual_loss(const PerceptualExtractor& extractor, const Tensor& a, const Tensor& b);
double perceptual_loss_grad(const PerceptualExtractor& extractor, const Tensor& a, const Tensor& b, Tensor& grad_a);
// Per-item perceptual distances; their mean equals perceptual_loss.
std::vector<double> perceptual_distances(const PerceptualExtractor& extractor, const Tensor& a, const Tensor& b);

// Mean over the batch of 0.5 * sum(mu^2 + sigma^2 - 1 - log sigma^2).
double kl_loss(const LatentDist& dist);
double kl_loss_grad(const LatentDist& dist, LatentGrad& grad);

enum class PixelLoss { L2, L1 };

}  // namespace srlvae
