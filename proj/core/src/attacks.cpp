#include "srlvae/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include <fmt/format.h>

#include "srlvae/error.hpp"
#include "srlvae/hash.hpp"

namespace srlvae {
namespace {

constexpr double kBallTolerance = 1e-9;

double sign(double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); }

double batch_mean(const std::vector<double>& v) {
  return v.empty() ? 0.0 : compensated_sum(v) / static_cast<double>(v.size());
}

void check_legal(const Tensor& delta, const Tensor& x_adv, double epsilon, int iteration) {
  if (delta.abs_max() > epsilon + kBallTolerance) {
    throw NumericError(fmt::format("attack left the epsilon ball at iteration {}", iteration));
  }
  if (x_adv.min() < 0.0 || x_adv.max() > 1.0) {
    throw NumericError(fmt::format("attack left the pixel domain at iteration {}", iteration));
  }
}

// Latent seen by the attack objectives, with its backward pass to the input.
struct AttackLatentPass {
  EncoderCache cache;
  LatentDist dist;
  Tensor noise;
  Tensor z;

  AttackLatentPass(const VaeModel& model, const Tensor& x_in, AttackLatent mode, std::uint64_t seed, bool keep_cache)
      : dist(model.encode(x_in, keep_cache ? &cache : nullptr)) {
    if (mode == AttackLatent::Sample) {
      noise = sample_noise(dist.shape(), seed);
      z = sample_latent(dist, noise);
    } else {
      z = dist.mu();
    }
  }

  Tensor input_grad(const VaeModel& model, const Tensor& grad_z) const {
    LatentGrad g;
    if (!noise.empty()) {
      g = reparam_backward(dist, noise, grad_z);
    } else {
      g.mu = grad_z;
      g.log_var = Tensor(dist.shape());
    }
    return model.encoder_backward(model.encoder_params(), cache, g, {}, true);
  }
};

std::uint64_t iteration_seed(const AttackBudget& budget, int iteration) {
  return mix_seed(budget.rng_seed, 0x5a17ULL + static_cast<std::uint64_t>(iteration));
}

}  // namespace

void AttackBudget::validate() const {
  if (!(epsilon > 0.0 && epsilon < 1.0)) throw ConfigError(fmt::format("epsilon must be in (0, 1), got {}", epsilon));
  if (!(step_size > 0.0)) throw ConfigError(fmt::format("step_size must be positive, got {}", step_size));
  if (iterations < 0) throw ConfigError(fmt::format("iterations must be >= 0, got {}", iterations));
}

double AttackOutcome::linf_norm(int item) const {
  double m = 0.0;
  for (double v : delta.item(item)) m = std::max(m, std::abs(v));
  return m;
}

Tensor project_linf(const Tensor& delta, double epsilon) {
  if (!(epsilon > 0.0)) throw ConfigError("project_linf: epsilon must be positive");
  Tensor out = delta;
  for (auto& v : out.storage()) v = std::clamp(v, -epsilon, epsilon);
  return out;
}

AttackOutcome run_pgd(const Tensor& x, const AttackBudget& budget, Direction direction, const Objective& objective,
                      std::string tag, const IterateObserver& observer) {
  budget.validate();
  AttackOutcome out;
  out.objective = std::move(tag);
  out.delta = Tensor(x.shape());
  if (budget.init == DeltaInit::UniformRandom) {
    std::mt19937_64 rng(budget.rng_seed);
    std::uniform_real_distribution<double> u(-budget.epsilon, budget.epsilon);
    for (auto& v : out.delta.storage()) v = u(rng);
  }
  out.x_adv = Tensor(x.shape());
  auto apply = [&]() {
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double v = x[i] + out.delta[i];
      out.x_adv[i] = std::clamp(v, 0.0, 1.0);
      // Only a binding domain clip rewrites delta, so interior steps stay exact.
      if (out.x_adv[i] != v) out.delta[i] = out.x_adv[i] - x[i];
    }
  };
  apply();
  check_legal(out.delta, out.x_adv, budget.epsilon, 0);
  if (observer) observer(0, out.delta, out.x_adv);

  const double direction_sign = direction == Direction::Ascend ? 1.0 : -1.0;
  Tensor grad;
  for (int t = 0; t < budget.iterations; ++t) {
    auto values = objective(out.x_adv, &grad, t);
    if (t == 0) out.initial_per_item = values;
    out.loss_trace.push_back(batch_mean(values));
    if (!grad.all_finite()) {
      throw NumericError(fmt::format("{}: non-finite gradient at iteration {}", out.objective, t));
    }
    for (std::size_t i = 0; i < grad.size(); ++i) {
      out.delta[i] = std::clamp(out.delta[i] + direction_sign * budget.step_size * sign(grad[i]), -budget.epsilon,
                                budget.epsilon);
    }
    apply();
    check_legal(out.delta, out.x_adv, budget.epsilon, t + 1);
    if (observer) observer(t + 1, out.delta, out.x_adv);
  }
  auto final_values = objective(out.x_adv, nullptr, budget.iterations);
  if (budget.iterations == 0) out.initial_per_item = final_values;
  out.loss_trace.push_back(batch_mean(final_values));
  out.final_per_item = std::move(final_values);
  return out;
}

AttackOutcome pgd_reconstruction_attack(const VaeModel& model, const PerceptualExtractor& extractor,
                                        const ImageBatch& x, const AttackBudget& budget, double lambda_lpips,
                                        const AttackOptions& options) {
  model.latent_shape(x.pixels.shape());
  const Tensor& clean = x.pixels;
  Objective objective = [&](const Tensor& x_in, Tensor* grad, int iteration) {
    AttackLatentPass pass(model, x_in, options.latent, iteration_seed(budget, iteration), grad != nullptr);
    DecoderCache dcache;
    Tensor recon = model.decode(pass.z, grad ? &dcache : nullptr);
    const int n = clean.shape().n;
    std::vector<double> values(static_cast<std::size_t>(n));
    const auto perceptual = perceptual_distances(extractor, recon, clean);
    for (int i = 0; i < n; ++i) {
      double se = 0.0;
      auto a = recon.item(i);
      auto b = clean.item(i);
      for (std::size_t k = 0; k < a.size(); ++k) se += (a[k] - b[k]) * (a[k] - b[k]);
      values[static_cast<std::size_t>(i)] =
          se / static_cast<double>(a.size()) + lambda_lpips * perceptual[static_cast<std::size_t>(i)];
    }
    if (grad) {
      Tensor g_mse, g_perc;
      mse_loss_grad(recon, clean, g_mse);
      if (lambda_lpips != 0.0) {
        perceptual_loss_grad(extractor, recon, clean, g_perc);
        for (std::size_t k = 0; k < g_mse.size(); ++k) g_mse[k] += lambda_lpips * g_perc[k];
      }
      Tensor gz = model.decoder_backward(dcache, g_mse, {});
      *grad = pass.input_grad(model, gz);
    }
    return values;
  };
  return run_pgd(clean, budget, Direction::Ascend, objective, "pgd-recon", options.observer);
}

AttackOutcome encoder_targeted_attack(const VaeModel& model, const ImageBatch& x, const Tensor& z_targ,
                                      const AttackBudget& budget, const AttackOptions& options) {
  const Shape latent = model.latent_shape(x.pixels.shape());
  if (z_targ.shape() != latent) {
    throw ShapeError(fmt::format("encoder_targeted_attack: target latent {} does not match encoder output {}",
                                 z_targ.shape().str(), latent.str()));
  }
  Objective objective = [&](const Tensor& x_in, Tensor* grad, int iteration) {
    AttackLatentPass pass(model, x_in, options.latent, iteration_seed(budget, iteration), grad != nullptr);
    const int n = latent.n;
    std::vector<double> values(static_cast<std::size_t>(n), 0.0);
    Tensor gz(latent);
    for (int i = 0; i < n; ++i) {
      auto z = pass.z.item(i);
      auto t = z_targ.item(i);
      auto g = gz.item(i);
      double s = 0.0;
      for (std::size_t k = 0; k < z.size(); ++k) {
        const double d = z[k] - t[k];
        s += d * d;
        g[k] = 2.0 * d / n;
      }
      values[static_cast<std::size_t>(i)] = s;
    }
    if (grad) *grad = pass.input_grad(model, gz);
    return values;
  };
  return run_pgd(x.pixels, budget, Direction::Descend, objective, "encoder-target", options.observer);
}

AttackOutcome mist_textural_attack(const VaeModel& model, const ImageBatch& x, const ImageBatch& y_target,
                                   const AttackBudget& budget, const AttackOptions& options) {
  require_same_shape(x.pixels, y_target.pixels, "mist_textural_attack");
  const Shape latent = model.latent_shape(x.pixels.shape());
  const Tensor target = model.encode(y_target.pixels).mu();
  Objective objective = [&](const Tensor& x_in, Tensor* grad, int iteration) {
    AttackLatentPass pass(model, x_in, options.latent, iteration_seed(budget, iteration), grad != nullptr);
    const int n = latent.n;
    std::vector<double> values(static_cast<std::size_t>(n), 0.0);
    Tensor gz(latent);
    for (int i = 0; i < n; ++i) {
      auto z = pass.z.item(i);
      auto t = target.item(i);
      double s = 0.0;
      for (std::size_t k = 0; k < z.size(); ++k) s += (z[k] - t[k]) * (z[k] - t[k]);
      const double norm = std::sqrt(s);
      values[static_cast<std::size_t>(i)] = norm;
      if (norm > 0.0) {
        auto g = gz.item(i);
        for (std::size_t k = 0; k < z.size(); ++k) g[k] = (z[k] - t[k]) / (norm * n);
      }
    }
    if (grad) *grad = pass.input_grad(model, gz);
    return values;
  };
  return run_pgd(x.pixels, budget, Direction::Ascend, objective, "mist-textural", options.observer);
}

PoisonProbeReport poison_crafting_probe(const VaeModel& model, const ImageBatch& x_src, const ImageBatch& x_dest,
                                        const AttackBudget& budget, const AttackOptions& options) {
  require_same_shape(x_src.pixels, x_dest.pixels, "poison_crafting_probe");
  PoisonProbeReport report;
  report.outcome = encoder_targeted_attack(model, x_src, model.encode(x_dest.pixels).mu(), budget, options);
  report.outcome.objective = "poison-probe";
  report.initial_gap = report.outcome.loss_trace.front();
  report.final_gap = report.outcome.loss_trace.back();
  report.reduction_ratio = report.initial_gap > 0.0 ? report.final_gap / report.initial_gap : 1.0;
  for (std::size_t i = 0; i < report.outcome.final_per_item.size(); ++i) {
    const double init = report.outcome.initial_per_item[i];
    report.per_item_ratio.push_back(init > 0.0 ? report.outcome.final_per_item[i] / init : 1.0);
  }
  return report;
}

}  // namespace srlvae
