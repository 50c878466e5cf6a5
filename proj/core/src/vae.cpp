#include "srlvae/vae.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include <fmt/format.h>

#include "srlvae/error.hpp"

namespace srlvae {
namespace {

int channel_at(const VaeConfig& cfg, int level) {
  return cfg.channels[static_cast<std::size_t>(std::min<int>(level, static_cast<int>(cfg.channels.size()) - 1))];
}

nn::ConvNet build_encoder(const VaeConfig& cfg) {
  nn::ConvNet net;
  net.conv(cfg.image_channels, channel_at(cfg, 0), 3, 1, 1);
  for (int l = 0; l < cfg.downsample_levels; ++l) {
    net.silu().conv(channel_at(cfg, l), channel_at(cfg, l + 1), 3, 2, 1);
  }
  net.silu().conv(channel_at(cfg, cfg.downsample_levels), 2 * cfg.latent_channels, 3, 1, 1);
  return net;
}

nn::ConvNet build_decoder(const VaeConfig& cfg) {
  nn::ConvNet net;
  net.conv(cfg.latent_channels, channel_at(cfg, cfg.downsample_levels), 3, 1, 1);
  for (int l = cfg.downsample_levels - 1; l >= 0; --l) {
    net.silu().upsample2x().conv(channel_at(cfg, l + 1), channel_at(cfg, l), 3, 1, 1);
  }
  net.silu().conv(channel_at(cfg, 0), cfg.image_channels, 3, 1, 1).sigmoid();
  return net;
}

// Splits the 2*Cz-channel encoder head into (mu, raw log-variance).
std::pair<Tensor, Tensor> split_head(const nn::Activation& head, int latent_channels) {
  nn::Activation mu;
  mu.n = head.n;
  mu.h = head.h;
  mu.w = head.w;
  mu.values = head.values.topRows(latent_channels);
  nn::Activation lv = mu;
  lv.values = head.values.bottomRows(latent_channels);
  return {nn::to_tensor(mu), nn::to_tensor(lv)};
}

}  // namespace

void VaeConfig::validate() const {
  if (image_channels != 1 && image_channels != 3) throw ConfigError("image_channels must be 1 or 3");
  if (channels.empty()) throw ConfigError("channels must list at least one width");
  for (int c : channels) {
    if (c < 1) throw ConfigError("channel widths must be positive");
  }
  if (downsample_levels < 0 || downsample_levels > 6) throw ConfigError("downsample_levels must be in [0, 6]");
  if (latent_channels < 1) throw ConfigError("latent_channels must be positive");
}

LatentDist::LatentDist(Tensor mu, Tensor log_var) : mu_(std::move(mu)), log_var_(std::move(log_var)) {
  require_same_shape(mu_, log_var_, "LatentDist");
  for (auto& v : log_var_.storage()) {
    if (std::isnan(v)) throw NumericError("LatentDist: log-variance is NaN");
    v = std::clamp(v, kLogVarMin, kLogVarMax);
  }
}

VaeModel::VaeModel(VaeConfig config)
    : config_(std::move(config)), encoder_net_(build_encoder(config_)), decoder_net_(build_decoder(config_)) {
  config_.validate();
  encoder_params_.resize(encoder_net_.param_count());
  decoder_params_.resize(decoder_net_.param_count());
  encoder_net_.init_params(encoder_params_, config_.init_seed);
  decoder_net_.init_params(decoder_params_, config_.init_seed + 1);
}

const std::vector<double>& VaeModel::reference_params() const {
  if (!reference_encoder_) throw ConfigError("model has no frozen reference encoder (theta_0)");
  return *reference_encoder_;
}

void VaeModel::snapshot_reference() { reference_encoder_ = encoder_params_; }

void VaeModel::set_reference(std::vector<double> params) {
  if (params.size() != encoder_params_.size()) throw ShapeError("reference encoder has wrong parameter count");
  reference_encoder_ = std::move(params);
}

Shape VaeModel::latent_shape(const Shape& image) const {
  const int f = config_.downsampling_factor();
  if (image.n < 1) throw ShapeError("image batch is empty");
  if (image.c != config_.image_channels) {
    throw ShapeError(fmt::format("model expects {} image channels, got {}", config_.image_channels, image.c));
  }
  if (image.h % f != 0) throw ShapeError(fmt::format("height {} is not divisible by downsampling factor {}", image.h, f));
  if (image.w % f != 0) throw ShapeError(fmt::format("width {} is not divisible by downsampling factor {}", image.w, f));
  return {image.n, config_.latent_channels, image.h / f, image.w / f};
}

LatentDist VaeModel::encode(const Tensor& x, EncoderCache* cache) const { return encode_with(encoder_params_, x, cache); }

LatentDist VaeModel::encode_reference(const Tensor& x, EncoderCache* cache) const {
  return encode_with(reference_params(), x, cache);
}

LatentDist VaeModel::encode_with(std::span<const double> params, const Tensor& x, EncoderCache* cache) const {
  latent_shape(x.shape());
  auto head = encoder_net_.forward(params, nn::to_activation(x), cache ? &cache->trace : nullptr);
  auto [mu, raw_lv] = split_head(head, config_.latent_channels);
  if (cache) cache->raw_log_var = raw_lv;
  return LatentDist(std::move(mu), std::move(raw_lv));
}

Tensor VaeModel::decode(const Tensor& z, DecoderCache* cache) const {
  if (z.shape().c != config_.latent_channels) {
    throw ShapeError(fmt::format("decoder expects {} latent channels, got {}", config_.latent_channels, z.shape().c));
  }
  if (z.shape().n < 1 || z.shape().h < 1 || z.shape().w < 1) throw ShapeError("latent tensor is empty");
  return nn::to_tensor(decoder_net_.forward(decoder_params_, nn::to_activation(z), cache ? &cache->trace : nullptr));
}

Tensor VaeModel::encoder_backward(std::span<const double> params, const EncoderCache& cache, const LatentGrad& grad,
                                  std::span<double> grad_params, bool need_input_grad) const {
  Tensor lv_grad = grad.log_var;
  for (std::size_t i = 0; i < lv_grad.size(); ++i) {
    const double raw = cache.raw_log_var[i];
    if (raw < kLogVarMin || raw > kLogVarMax) lv_grad[i] = 0.0;
  }
  nn::Activation mu_act = nn::to_activation(grad.mu);
  nn::Activation lv_act = nn::to_activation(lv_grad);
  nn::Activation head;
  head.n = mu_act.n;
  head.h = mu_act.h;
  head.w = mu_act.w;
  head.values.resize(2 * config_.latent_channels, mu_act.values.cols());
  head.values.topRows(config_.latent_channels) = mu_act.values;
  head.values.bottomRows(config_.latent_channels) = lv_act.values;
  auto dx = encoder_net_.backward(params, cache.trace, std::move(head), grad_params, need_input_grad);
  return need_input_grad ? nn::to_tensor(dx) : Tensor{};
}

Tensor VaeModel::decoder_backward(const DecoderCache& cache, const Tensor& grad_out, std::span<double> grad_params) const {
  return nn::to_tensor(decoder_net_.backward(decoder_params_, cache.trace, nn::to_activation(grad_out), grad_params, true));
}

Tensor sample_noise(const Shape& shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor eta(shape);
  for (auto& v : eta.storage()) v = normal(rng);
  return eta;
}

Tensor sample_latent(const LatentDist& dist, std::uint64_t seed) {
  return sample_latent(dist, sample_noise(dist.shape(), seed));
}

Tensor sample_latent(const LatentDist& dist, const Tensor& noise) {
  require_same_shape(dist.mu(), noise, "sample_latent");
  Tensor z(dist.shape());
  for (std::size_t i = 0; i < z.size(); ++i) {
    z[i] = dist.mu()[i] + std::exp(0.5 * dist.log_var()[i]) * noise[i];
  }
  return z;
}

LatentGrad reparam_backward(const LatentDist& dist, const Tensor& noise, const Tensor& grad_z) {
  LatentGrad g{grad_z, Tensor(dist.shape())};
  for (std::size_t i = 0; i < grad_z.size(); ++i) {
    g.log_var[i] = grad_z[i] * noise[i] * 0.5 * std::exp(0.5 * dist.log_var()[i]);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Perceptual extractor

PerceptualExtractor PerceptualExtractor::seeded(int image_channels, std::uint64_t seed) {
  PerceptualExtractor ex;
  ex.source_ = Source::SeededRandom;
  ex.seed_ = seed;
  const int widths[] = {8, 16, 32};
  int in = image_channels;
  std::mt19937_64 rng(seed);
  for (int s = 0; s < 3; ++s) {
    nn::ConvNet stage;
    stage.conv(in, widths[s], 3, s == 0 ? 1 : 2, 1).silu();
    std::vector<double> w(stage.param_count());
    const auto& layer = stage.layers().front();
    std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / (in * 9.0)));
    for (std::size_t i = 0; i < layer.weight_count(); ++i) w[i] = normal(rng);
    std::uniform_real_distribution<double> bias(-0.1, 0.1);
    for (std::size_t i = layer.weight_count(); i < w.size(); ++i) w[i] = bias(rng);
    ex.stages_.push_back(std::move(stage));
    ex.weights_.push_back(std::move(w));
    in = widths[s];
  }
  return ex;
}

PerceptualExtractor PerceptualExtractor::from_weights(std::vector<nn::ConvNet> stages,
                                                      std::vector<std::vector<double>> weights) {
  if (stages.size() < 2) throw ConfigError("perceptual extractor needs at least two scales");
  if (stages.size() != weights.size()) throw ConfigError("perceptual extractor: one weight vector per stage");
  for (std::size_t i = 0; i < stages.size(); ++i) {
    if (stages[i].param_count() != weights[i].size()) throw ShapeError("perceptual extractor: weight size mismatch");
  }
  PerceptualExtractor ex;
  ex.source_ = Source::Pretrained;
  ex.stages_ = std::move(stages);
  ex.weights_ = std::move(weights);
  return ex;
}

std::string PerceptualExtractor::source_tag() const {
  return source_ == Source::Pretrained ? "pretrained" : fmt::format("seeded-random:{}", seed_);
}

int PerceptualExtractor::pooled_dim() const {
  int d = 0;
  for (const auto& s : stages_) {
    auto it = std::find_if(s.layers().rbegin(), s.layers().rend(),
                           [](const nn::Layer& l) { return l.kind == nn::LayerKind::Conv; });
    if (it != s.layers().rend()) d += it->out_channels;
  }
  return d;
}

std::vector<nn::Activation> PerceptualExtractor::features(const Tensor& x, Trace* trace) const {
  std::vector<nn::Activation> out;
  out.reserve(stages_.size());
  if (trace) trace->stages.assign(stages_.size(), {});
  nn::Activation a = nn::to_activation(x);
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    a = stages_[s].forward(weights_[s], std::move(a), trace ? &trace->stages[s] : nullptr);
    out.push_back(a);
  }
  return out;
}

Tensor PerceptualExtractor::backward(const Trace& trace, std::vector<nn::Activation> grads) const {
  nn::Activation carry;
  for (std::size_t s = stages_.size(); s-- > 0;) {
    nn::Activation g = std::move(grads[s]);
    if (carry.values.size() > 0) g.values += carry.values;
    carry = stages_[s].backward(weights_[s], trace.stages[s], std::move(g), {}, true);
  }
  return nn::to_tensor(carry);
}

std::vector<std::vector<double>> PerceptualExtractor::pooled(const Tensor& x) const {
  const auto feats = features(x);
  const int n = x.shape().n;
  std::vector<std::vector<double>> out(static_cast<std::size_t>(n));
  for (const auto& f : feats) {
    const Eigen::Index plane = static_cast<Eigen::Index>(f.h) * f.w;
    for (int i = 0; i < n; ++i) {
      for (Eigen::Index c = 0; c < f.values.rows(); ++c) {
        out[static_cast<std::size_t>(i)].push_back(f.values.row(c).segment(i * plane, plane).mean());
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Losses

double mse_loss(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mse_loss");
  if (a.empty()) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    sum += d * d;
  }
  return sum / static_cast<double>(a.size());
}

double mse_loss_grad(const Tensor& a, const Tensor& b, Tensor& grad_a) {
  const double value = mse_loss(a, b);
  grad_a = Tensor(a.shape());
  const double scale = 2.0 / static_cast<double>(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) grad_a[i] = scale * (a[i] - b[i]);
  return value;
}

double l1_loss(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "l1_loss");
  if (a.empty()) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) sum += std::abs(a[i] - b[i]);
  return sum / static_cast<double>(a.size());
}

double l1_loss_grad(const Tensor& a, const Tensor& b, Tensor& grad_a) {
  const double value = l1_loss(a, b);
  grad_a = Tensor(a.shape());
  const double scale = 1.0 / static_cast<double>(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    grad_a[i] = d > 0 ? scale : (d < 0 ? -scale : 0.0);
  }
  return value;
}

namespace {

constexpr double kFeatureEps = 1e-10;

// Channel-wise unit normalization of every spatial column.
nn::RowMatrix normalize_columns(const nn::RowMatrix& f, Eigen::VectorXd* norms) {
  Eigen::VectorXd r = (f.colwise().squaredNorm().array() + kFeatureEps).sqrt().transpose();
  nn::RowMatrix out = f;
  for (Eigen::Index j = 0; j < f.cols(); ++j) out.col(j) /= r(j);
  if (norms) *norms = std::move(r);
  return out;
}

// Per-item distance at one scale: mean over locations of the squared distance
// between unit-normalized channel vectors.
std::vector<double> scale_distances(const nn::Activation& fa, const nn::Activation& fb,
                                    nn::RowMatrix* diff_out, Eigen::VectorXd* norms_a) {
  nn::RowMatrix na = normalize_columns(fa.values, norms_a);
  nn::RowMatrix nb = normalize_columns(fb.values, nullptr);
  nn::RowMatrix diff = na - nb;
  Eigen::RowVectorXd per_loc = diff.colwise().squaredNorm();
  const Eigen::Index plane = static_cast<Eigen::Index>(fa.h) * fa.w;
  std::vector<double> d(static_cast<std::size_t>(fa.n));
  for (int i = 0; i < fa.n; ++i) d[static_cast<std::size_t>(i)] = per_loc.segment(i * plane, plane).mean();
  if (diff_out) *diff_out = std::move(diff);
  return d;
}

}  // namespace

std::vector<double> perceptual_distances(const PerceptualExtractor& extractor, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "perceptual_loss");
  const auto fa = extractor.features(a);
  const auto fb = extractor.features(b);
  std::vector<double> total(static_cast<std::size_t>(a.shape().n), 0.0);
  for (std::size_t s = 0; s < fa.size(); ++s) {
    const auto d = scale_distances(fa[s], fb[s], nullptr, nullptr);
    for (std::size_t i = 0; i < d.size(); ++i) total[i] += d[i];
  }
  return total;
}

double perceptual_loss(const PerceptualExtractor& extractor, const Tensor& a, const Tensor& b) {
  const auto d = perceptual_distances(extractor, a, b);
  double sum = 0.0;
  for (double v : d) sum += v;
  return d.empty() ? 0.0 : sum / static_cast<double>(d.size());
}

double perceptual_loss_grad(const PerceptualExtractor& extractor, const Tensor& a, const Tensor& b, Tensor& grad_a) {
  require_same_shape(a, b, "perceptual_loss");
  PerceptualExtractor::Trace trace;
  const auto fa = extractor.features(a, &trace);
  const auto fb = extractor.features(b);
  const int n = a.shape().n;
  std::vector<double> total(static_cast<std::size_t>(n), 0.0);
  std::vector<nn::Activation> grads;
  grads.reserve(fa.size());
  for (std::size_t s = 0; s < fa.size(); ++s) {
    nn::RowMatrix diff;
    Eigen::VectorXd norms;
    const auto d = scale_distances(fa[s], fb[s], &diff, &norms);
    for (std::size_t i = 0; i < d.size(); ++i) total[i] += d[i];
    // d/dna of mean over (items, locations) of |na - nb|^2.
    const double scale = 2.0 / static_cast<double>(diff.cols());
    nn::Activation g;
    g.n = fa[s].n;
    g.h = fa[s].h;
    g.w = fa[s].w;
    g.values.resize(diff.rows(), diff.cols());
    for (Eigen::Index j = 0; j < diff.cols(); ++j) {
      const double r = norms(j);
      Eigen::VectorXd gn = scale * diff.col(j);
      const double dot = fa[s].values.col(j).dot(gn);
      g.values.col(j) = gn / r - fa[s].values.col(j) * (dot / (r * r * r));
    }
    grads.push_back(std::move(g));
  }
  grad_a = extractor.backward(trace, std::move(grads));
  double sum = 0.0;
  for (double v : total) sum += v;
  return sum / static_cast<double>(n);
}

double kl_loss(const LatentDist& dist) {
  const Shape& s = dist.shape();
  if (s.n == 0) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < dist.mu().size(); ++i) {
    const double m = dist.mu()[i];
    const double lv = dist.log_var()[i];
    sum += 0.5 * (m * m + std::exp(lv) - 1.0 - lv);
  }
  return sum / static_cast<double>(s.n);
}

double kl_loss_grad(const LatentDist& dist, LatentGrad& grad) {
  const double value = kl_loss(dist);
  const double inv_n = 1.0 / static_cast<double>(dist.shape().n);
  grad.mu = Tensor(dist.shape());
  grad.log_var = Tensor(dist.shape());
  for (std::size_t i = 0; i < dist.mu().size(); ++i) {
    grad.mu[i] = dist.mu()[i] * inv_n;
    grad.log_var[i] = 0.5 * (std::exp(dist.log_var()[i]) - 1.0) * inv_n;
  }
  return value;
}

}  // namespace srlvae
