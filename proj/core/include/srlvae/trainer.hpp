#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "srlvae/attacks.hpp"
#include "srlvae/data.hpp"
#include "srlvae/error.hpp"
#include "srlvae/vae.hpp"

namespace srlvae {

// Adam with decoupled weight decay.
class AdamW {
 public:
  AdamW(double learning_rate, double weight_decay, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  void step(std::span<double> params, std::span<const double> grad);
  long steps_taken() const { return t_; }

 private:
  double lr_;
  double weight_decay_;
  double beta1_;
  double beta2_;
  double eps_;
  long t_ = 0;
  std::vector<double> m_;
  std::vector<double> v_;
};

struct TrainConfig {
  int total_steps = 5000;
  int batch_size = 20;
  double learning_rate = 1e-4;
  double weight_decay = 0.01;
  double orig_weight = 0.01;  // alpha in the total loss
  double lpips_weight = 1.0;  // lambda
  double kl_weight = 1e-6;    // beta, baseline pretraining only
  PixelLoss pixel_loss = PixelLoss::L2;  // baseline pretraining only
  AttackBudget attack{8.0 / 255.0, 0.02, 10, DeltaInit::Zero, 0};
  AttackLatent attack_latent = AttackLatent::Mean;
  bool freeze_decoder = true;
  std::uint64_t seed = 0;
  int checkpoint_every = 0;  // 0 disables intermediate checkpoints

  void validate_finetune() const;
  void validate_pretrain() const;
};

struct StepRecord {
  int step = 0;
  double total = 0.0;
  double orig = 0.0;
  double mse_adv = 0.0;    // pretraining: clean reconstruction loss
  double lpips_adv = 0.0;  // pretraining: clean perceptual loss
  double kl = 0.0;
  double grad_norm = 0.0;
  double attack_gain = 0.0;  // final minus initial attack objective
};

// Raised when training stops on a non-finite or diverging loss; carries the
// last record for the dump.
class TrainingHalted : public NumericError {
 public:
  TrainingHalted(const std::string& what, StepRecord last) : NumericError(what), last_(last) {}
  const StepRecord& last_record() const { return last_; }

 private:
  StepRecord last_;
};

struct LossEvaluation {
  double total = 0.0;
  StepRecord parts;
  std::vector<double> grad_encoder;  // dL/dtheta
  std::vector<double> grad_decoder;  // dL/dphi, pretraining only
  AttackOutcome attack;
};

// |mu - mu_ref|^2 + |log_var - log_var_ref|^2 per item, averaged over the batch.
double originality_loss(const LatentDist& current, const LatentDist& reference);
double originality_loss_grad(const LatentDist& current, const LatentDist& reference, LatentGrad& grad_current);

// Minimization half of the min-max step for a given adversarial batch; x_adv
// enters as a constant. include_originality selects the full objective or the
// ablation without the originality term.
LossEvaluation adversarial_objective(const VaeModel& model, const PerceptualExtractor& extractor, const Tensor& x,
                                     const Tensor& x_adv, const TrainConfig& cfg, std::uint64_t seed,
                                     bool include_originality);

// Full min-max loss: PGD reconstruction attack (gradients w.r.t. delta only),
// then alpha * L_orig + MSE + lambda * perceptual on the adversarial batch.
LossEvaluation srl_total_loss(const VaeModel& model, const PerceptualExtractor& extractor, const ImageBatch& x,
                              const TrainConfig& cfg, std::uint64_t seed);
// Same objective with the originality term removed.
LossEvaluation ablation_total_loss(const VaeModel& model, const PerceptualExtractor& extractor, const ImageBatch& x,
                                   const TrainConfig& cfg, std::uint64_t seed);

// Baseline objective: pixel loss + lambda * perceptual + beta * KL with a
// sampled latent; gradients for both encoder and decoder.
LossEvaluation pretrain_objective(const VaeModel& model, const PerceptualExtractor& extractor, const Tensor& x,
                                  const TrainConfig& cfg, std::uint64_t seed);

struct TrainCallbacks {
  std::function<void(const StepRecord&)> on_step;
  std::function<void(int step, const VaeModel&)> on_checkpoint;
};

// Encoder-only adversarial fine-tuning. Snapshots theta_0 if the model has
// none; the decoder and theta_0 are never written.
std::vector<StepRecord> finetune(VaeModel& model, const PerceptualExtractor& extractor, const Split& train,
                                 const TrainConfig& cfg, const TrainCallbacks& callbacks = {});

// Joint encoder/decoder training of the reference model.
std::vector<StepRecord> pretrain_baseline(VaeModel& model, const PerceptualExtractor& extractor, const Split& train,
                                          const TrainConfig& cfg, const TrainCallbacks& callbacks = {});

// StepRecord CSV logs. Fine-tuning:
// step,total,orig,mse_adv,lpips_adv,grad_norm,attack_gain. Pretraining:
// step,total,mse,lpips,kl,grad_norm.
void write_step_header(std::ostream& os);
void write_step_row(std::ostream& os, const StepRecord& r);
void write_pretrain_header(std::ostream& os);
void write_pretrain_row(std::ostream& os, const StepRecord& r);

}  // namespace srlvae
