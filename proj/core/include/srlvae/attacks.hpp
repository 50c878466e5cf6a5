#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "srlvae/data.hpp"
#include "srlvae/vae.hpp"

namespace srlvae {

enum class DeltaInit { Zero, UniformRandom };

// Which latent the attack objectives see: the posterior mean, or a
// reparameterized sample seeded per iteration.
enum class AttackLatent { Mean, Sample };

// l-infinity attack budget: the ball B(0, epsilon), signed step size,
// iteration count and initialisation of delta.
struct AttackBudget {
  double epsilon = 8.0 / 255.0;
  double step_size = 0.02;
  int iterations = 10;
  DeltaInit init = DeltaInit::Zero;
  std::uint64_t rng_seed = 0;

  void validate() const;
};

struct AttackOutcome {
  Tensor delta;
  Tensor x_adv;
  std::vector<double> loss_trace;  // batch-mean objective, iterations + 1 entries
  std::vector<double> initial_per_item;
  std::vector<double> final_per_item;
  std::string objective;

  double linf_norm(int item) const;
};

enum class Direction { Ascend, Descend };

// Per-item objective values at the perturbed input; fills `grad` with the
// gradient of their batch mean when non-null.
using Objective = std::function<std::vector<double>(const Tensor& x_in, Tensor* grad, int iteration)>;
using IterateObserver = std::function<void(int iteration, const Tensor& delta, const Tensor& x_adv)>;

struct AttackOptions {
  AttackLatent latent = AttackLatent::Mean;
  IterateObserver observer;  // called after initialisation and after every step
};

// Componentwise clamp to [-epsilon, epsilon].
Tensor project_linf(const Tensor& delta, double epsilon);

// Signed-gradient PGD: delta <- clip(Pi_eps(delta +/- step * sign(grad))),
// with sign(0) = 0. Throws NumericError on a non-finite gradient.
AttackOutcome run_pgd(const Tensor& x, const AttackBudget& budget, Direction direction, const Objective& objective,
                      std::string tag, const IterateObserver& observer = {});

// Maximizes MSE(D(E(x+d)), x) + lambda * perceptual(D(E(x+d)), x).
AttackOutcome pgd_reconstruction_attack(const VaeModel& model, const PerceptualExtractor& extractor,
                                        const ImageBatch& x, const AttackBudget& budget, double lambda_lpips,
                                        const AttackOptions& options = {});

// PhotoGuard-style encoder attack: minimizes |E(x+d) - z_targ|^2.
AttackOutcome encoder_targeted_attack(const VaeModel& model, const ImageBatch& x, const Tensor& z_targ,
                                      const AttackBudget& budget, const AttackOptions& options = {});

// MIST textural term: maximizes |E(y) - E(x+d)|_2.
AttackOutcome mist_textural_attack(const VaeModel& model, const ImageBatch& x, const ImageBatch& y_target,
                                   const AttackBudget& budget, const AttackOptions& options = {});

struct PoisonProbeReport {
  double initial_gap = 0.0;
  double final_gap = 0.0;
  double reduction_ratio = 1.0;  // final / initial; 1.0 when initial is 0
  std::vector<double> per_item_ratio;
  AttackOutcome outcome;
};

// How far an epsilon-bounded attacker can pull E(x_src + d) toward E(x_dest).mu.
PoisonProbeReport poison_crafting_probe(const VaeModel& model, const ImageBatch& x_src, const ImageBatch& x_dest,
                                        const AttackBudget& budget, const AttackOptions& options = {});

}  // namespace srlvae
