#include "srlvae/trainer.hpp"

#include <cmath>
#include <ostream>

#include <fmt/format.h>
#include <fmt/ostream.h>

#include "srlvae/hash.hpp"

namespace srlvae {
namespace {

double l2_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

void add_scaled(Tensor& dst, const Tensor& src, double scale) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += scale * src[i];
}

std::uint64_t step_seed(const TrainConfig& cfg, int step) { return mix_seed(cfg.seed, static_cast<std::uint64_t>(step)); }

// Draws batches epoch by epoch without replacement.
class BatchStream {
 public:
  BatchStream(const Split& split, int batch_size, std::uint64_t seed)
      : split_(split), batch_size_(batch_size), seed_(seed) {}

  const ImageBatch& next() {
    if (cursor_ >= batches_.size()) {
      batches_ = make_batches(split_, batch_size_, mix_seed(seed_, 0xe90cULL + epoch_++));
      cursor_ = 0;
    }
    return batches_[cursor_++];
  }

 private:
  const Split& split_;
  int batch_size_;
  std::uint64_t seed_;
  std::uint64_t epoch_ = 0;
  std::size_t cursor_ = 0;
  std::vector<ImageBatch> batches_;
};

}  // namespace

AdamW::AdamW(double learning_rate, double weight_decay, double beta1, double beta2, double eps)
    : lr_(learning_rate), weight_decay_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void AdamW::step(std::span<double> params, std::span<const double> grad) {
  if (m_.empty()) {
    m_.assign(params.size(), 0.0);
    v_.assign(params.size(), 0.0);
  }
  if (grad.size() != params.size() || m_.size() != params.size()) throw ShapeError("AdamW: size mismatch");
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    params[i] *= 1.0 - lr_ * weight_decay_;
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grad[i];
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grad[i] * grad[i];
    const double m_hat = m_[i] / bc1;
    const double v_hat = v_[i] / bc2;
    params[i] -= lr_ * m_hat / (std::sqrt(v_hat) + eps_);
  }
}

void TrainConfig::validate_pretrain() const {
  if (total_steps < 1) throw ConfigError("total_steps must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
  if (lpips_weight < 0.0) throw ConfigError("lpips_weight must be >= 0");
  if (kl_weight < 0.0) throw ConfigError("kl_weight must be >= 0");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
}

void TrainConfig::validate_finetune() const {
  validate_pretrain();
  if (orig_weight < 0.0) throw ConfigError("orig_weight must be >= 0");
  if (!freeze_decoder) throw ConfigError("adversarial fine-tuning requires freeze_decoder = true");
  attack.validate();
}

double originality_loss(const LatentDist& current, const LatentDist& reference) {
  require_same_shape(current.mu(), reference.mu(), "originality_loss");
  const int n = current.shape().n;
  if (n == 0) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < current.mu().size(); ++i) {
    const double dm = current.mu()[i] - reference.mu()[i];
    const double dl = current.log_var()[i] - reference.log_var()[i];
    sum += dm * dm + dl * dl;
  }
  return sum / n;
}

double originality_loss_grad(const LatentDist& current, const LatentDist& reference, LatentGrad& grad) {
  const double value = originality_loss(current, reference);
  const double scale = 2.0 / current.shape().n;
  grad.mu = Tensor(current.shape());
  grad.log_var = Tensor(current.shape());
  for (std::size_t i = 0; i < current.mu().size(); ++i) {
    grad.mu[i] = scale * (current.mu()[i] - reference.mu()[i]);
    grad.log_var[i] = scale * (current.log_var()[i] - reference.log_var()[i]);
  }
  return value;
}

LossEvaluation adversarial_objective(const VaeModel& model, const PerceptualExtractor& extractor, const Tensor& x,
                                     const Tensor& x_adv, const TrainConfig& cfg, std::uint64_t seed,
                                     bool include_originality) {
  require_same_shape(x, x_adv, "adversarial_objective");
  if (include_originality && !model.has_reference()) {
    throw ConfigError("originality term needs a frozen reference encoder (theta_0)");
  }
  LossEvaluation ev;
  ev.grad_encoder.assign(model.encoder_params().size(), 0.0);

  // Reconstruction of the adversarial batch against the clean targets.
  EncoderCache cache;
  const LatentDist dist = model.encode(x_adv, &cache);
  const Tensor noise = sample_noise(dist.shape(), mix_seed(seed, 2));
  const Tensor z = sample_latent(dist, noise);
  DecoderCache dcache;
  const Tensor recon = model.decode(z, &dcache);
  Tensor g_recon, g_perc;
  ev.parts.mse_adv = mse_loss_grad(recon, x, g_recon);
  if (cfg.lpips_weight != 0.0) {
    ev.parts.lpips_adv = perceptual_loss_grad(extractor, recon, x, g_perc);
    add_scaled(g_recon, g_perc, cfg.lpips_weight);
  } else {
    ev.parts.lpips_adv = perceptual_loss(extractor, recon, x);
  }
  const Tensor gz = model.decoder_backward(dcache, g_recon, {});
  model.encoder_backward(model.encoder_params(), cache, reparam_backward(dist, noise, gz), ev.grad_encoder, false);

  double orig_term = 0.0;
  if (include_originality) {
    EncoderCache clean_cache;
    const LatentDist current = model.encode(x, &clean_cache);
    const LatentDist reference = model.encode_reference(x);
    LatentGrad g;
    ev.parts.orig = originality_loss_grad(current, reference, g);
    if (cfg.orig_weight != 0.0) {
      for (auto& v : g.mu.storage()) v *= cfg.orig_weight;
      for (auto& v : g.log_var.storage()) v *= cfg.orig_weight;
      model.encoder_backward(model.encoder_params(), clean_cache, g, ev.grad_encoder, false);
    }
    orig_term = cfg.orig_weight * ev.parts.orig;
    ev.total = orig_term + ev.parts.mse_adv + cfg.lpips_weight * ev.parts.lpips_adv;
  } else {
    ev.total = ev.parts.mse_adv + cfg.lpips_weight * ev.parts.lpips_adv;
  }
  ev.parts.total = ev.total;
  ev.parts.grad_norm = l2_norm(ev.grad_encoder);
  return ev;
}

namespace {

LossEvaluation min_max_loss(const VaeModel& model, const PerceptualExtractor& extractor, const ImageBatch& x,
                            const TrainConfig& cfg, std::uint64_t seed, bool include_originality) {
  AttackBudget budget = cfg.attack;
  budget.rng_seed = mix_seed(seed, 1);
  AttackOptions options;
  options.latent = cfg.attack_latent;
  AttackOutcome attack = pgd_reconstruction_attack(model, extractor, x, budget, cfg.lpips_weight, options);
  LossEvaluation ev = adversarial_objective(model, extractor, x.pixels, attack.x_adv, cfg, seed, include_originality);
  ev.parts.attack_gain = attack.loss_trace.back() - attack.loss_trace.front();
  ev.attack = std::move(attack);
  return ev;
}

}  // namespace

LossEvaluation srl_total_loss(const VaeModel& model, const PerceptualExtractor& extractor, const ImageBatch& x,
                              const TrainConfig& cfg, std::uint64_t seed) {
  if (!model.has_reference()) throw ConfigError("srl_total_loss: model has no frozen reference encoder (theta_0)");
  return min_max_loss(model, extractor, x, cfg, seed, true);
}

LossEvaluation ablation_total_loss(const VaeModel& model, const PerceptualExtractor& extractor, const ImageBatch& x,
                                   const TrainConfig& cfg, std::uint64_t seed) {
  return min_max_loss(model, extractor, x, cfg, seed, false);
}

LossEvaluation pretrain_objective(const VaeModel& model, const PerceptualExtractor& extractor, const Tensor& x,
                                  const TrainConfig& cfg, std::uint64_t seed) {
  LossEvaluation ev;
  ev.grad_encoder.assign(model.encoder_params().size(), 0.0);
  ev.grad_decoder.assign(model.decoder_params().size(), 0.0);
  EncoderCache cache;
  const LatentDist dist = model.encode(x, &cache);
  const Tensor noise = sample_noise(dist.shape(), mix_seed(seed, 2));
  const Tensor z = sample_latent(dist, noise);
  DecoderCache dcache;
  const Tensor recon = model.decode(z, &dcache);
  Tensor g_recon, g_perc;
  ev.parts.mse_adv = cfg.pixel_loss == PixelLoss::L1 ? l1_loss_grad(recon, x, g_recon) : mse_loss_grad(recon, x, g_recon);
  if (cfg.lpips_weight != 0.0) {
    ev.parts.lpips_adv = perceptual_loss_grad(extractor, recon, x, g_perc);
    add_scaled(g_recon, g_perc, cfg.lpips_weight);
  } else {
    ev.parts.lpips_adv = perceptual_loss(extractor, recon, x);
  }
  const Tensor gz = model.decoder_backward(dcache, g_recon, ev.grad_decoder);
  LatentGrad g = reparam_backward(dist, noise, gz);
  LatentGrad g_kl;
  ev.parts.kl = kl_loss_grad(dist, g_kl);
  add_scaled(g.mu, g_kl.mu, cfg.kl_weight);
  add_scaled(g.log_var, g_kl.log_var, cfg.kl_weight);
  model.encoder_backward(model.encoder_params(), cache, g, ev.grad_encoder, false);
  ev.total = ev.parts.mse_adv + cfg.lpips_weight * ev.parts.lpips_adv + cfg.kl_weight * ev.parts.kl;
  ev.parts.total = ev.total;
  ev.parts.grad_norm = std::sqrt(l2_norm(ev.grad_encoder) * l2_norm(ev.grad_encoder) +
                                 l2_norm(ev.grad_decoder) * l2_norm(ev.grad_decoder));
  return ev;
}

std::vector<StepRecord> finetune(VaeModel& model, const PerceptualExtractor& extractor, const Split& train,
                                 const TrainConfig& cfg, const TrainCallbacks& callbacks) {
  cfg.validate_finetune();
  if (!model.has_reference()) model.snapshot_reference();
  model.freeze_decoder = true;
  model.freeze_encoder = false;
  AdamW optimizer(cfg.learning_rate, cfg.weight_decay);
  BatchStream stream(train, cfg.batch_size, cfg.seed);
  std::vector<StepRecord> log;
  log.reserve(static_cast<std::size_t>(cfg.total_steps));
  for (int step = 0; step < cfg.total_steps; ++step) {
    const ImageBatch& batch = stream.next();
    LossEvaluation ev = srl_total_loss(model, extractor, batch, cfg, step_seed(cfg, step));
    ev.parts.step = step;
    if (!std::isfinite(ev.total) || !std::isfinite(ev.parts.grad_norm)) {
      throw TrainingHalted(fmt::format("non-finite loss at fine-tuning step {}", step), ev.parts);
    }
    optimizer.step(model.encoder_params(), ev.grad_encoder);
    log.push_back(ev.parts);
    if (callbacks.on_step) callbacks.on_step(ev.parts);
    if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && callbacks.on_checkpoint) {
      callbacks.on_checkpoint(step + 1, model);
    }
  }
  return log;
}

std::vector<StepRecord> pretrain_baseline(VaeModel& model, const PerceptualExtractor& extractor, const Split& train,
                                          const TrainConfig& cfg, const TrainCallbacks& callbacks) {
  cfg.validate_pretrain();
  AdamW enc_opt(cfg.learning_rate, cfg.weight_decay);
  AdamW dec_opt(cfg.learning_rate, cfg.weight_decay);
  BatchStream stream(train, cfg.batch_size, cfg.seed);
  std::vector<StepRecord> log;
  log.reserve(static_cast<std::size_t>(cfg.total_steps));
  double initial = 0.0;
  for (int step = 0; step < cfg.total_steps; ++step) {
    const ImageBatch& batch = stream.next();
    LossEvaluation ev = pretrain_objective(model, extractor, batch.pixels, cfg, step_seed(cfg, step));
    ev.parts.step = step;
    if (step == 0) initial = ev.total;
    if (!std::isfinite(ev.total) || !std::isfinite(ev.parts.grad_norm)) {
      throw TrainingHalted(fmt::format("non-finite loss at pretraining step {}", step), ev.parts);
    }
    if (ev.total > 10.0 * initial) {
      throw TrainingHalted(
          fmt::format("pretraining diverged at step {}: loss {} exceeds 10x the initial {}", step, ev.total, initial),
          ev.parts);
    }
    enc_opt.step(model.encoder_params(), ev.grad_encoder);
    dec_opt.step(model.decoder_params(), ev.grad_decoder);
    log.push_back(ev.parts);
    if (callbacks.on_step) callbacks.on_step(ev.parts);
    if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && callbacks.on_checkpoint) {
      callbacks.on_checkpoint(step + 1, model);
    }
  }
  return log;
}

void write_step_header(std::ostream& os) { os << "step,total,orig,mse_adv,lpips_adv,grad_norm,attack_gain\n"; }

void write_step_row(std::ostream& os, const StepRecord& r) {
  fmt::print(os, "{},{},{},{},{},{},{}\n", r.step, r.total, r.orig, r.mse_adv, r.lpips_adv, r.grad_norm, r.attack_gain);
}

void write_pretrain_header(std::ostream& os) { os << "step,total,mse,lpips,kl,grad_norm\n"; }

void write_pretrain_row(std::ostream& os, const StepRecord& r) {
  fmt::print(os, "{},{},{},{},{},{}\n", r.step, r.total, r.mse_adv, r.lpips_adv, r.kl, r.grad_norm);
}

}  // namespace srlvae
