// Behavioural checks on a small VAE pretrained on the procedural corpus.
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <sstream>
#include <unistd.h>

#include "srlvae/attacks.hpp"
#include "srlvae/data.hpp"
#include "srlvae/trainer.hpp"
#include "support.hpp"

using namespace srlvae;
namespace fs = std::filesystem;
namespace ts = srlvae::test_support;

namespace {

struct Toy {
  Dataset data;
  PerceptualExtractor ext = PerceptualExtractor::seeded(3);
};

const Toy& toy() {
  static const Toy t = [] {
    const fs::path root = fs::temp_directory_path() / ("srlvae_toy_" + std::to_string(::getpid()));
    generate_toy_corpus(root, 160, 16, 11);
    DatasetSpec spec;
    spec.root = root;
    spec.height = 16;
    spec.width = 16;
    spec.train_fraction = 0.6;
    spec.val_fraction = 0.4;
    std::ostringstream warnings;
    Toy out;
    out.data = load_dataset(spec, warnings);
    fs::remove_all(root);
    return out;
  }();
  return t;
}

VaeConfig toy_config() {
  VaeConfig c = ts::tiny_config(1);
  c.channels = {8, 16, 16};
  c.latent_channels = 4;
  return c;
}

TrainConfig pretrain_config(double kl_weight) {
  TrainConfig c;
  c.total_steps = 400;
  c.batch_size = 16;
  c.learning_rate = 3e-3;
  c.kl_weight = kl_weight;
  return c;
}

const VaeModel& pretrained() {
  static const VaeModel m = [] {
    VaeModel model(toy_config());
    pretrain_baseline(model, toy().ext, toy().data.train, pretrain_config(1e-6));
    return model;
  }();
  return m;
}

double sampled_reconstruction_mse(const VaeModel& model, const ImageBatch& x) {
  return mse_loss(model.decode(sample_latent(model.encode(x.pixels), 5)), x.pixels);
}

ImageBatch probe() { return toy().data.val.head(64); }

int count_if_fraction(const std::vector<double>& a, const std::vector<double>& b, bool greater_equal) {
  int ok = 0;
  for (std::size_t i = 0; i < a.size(); ++i) ok += greater_equal ? (a[i] >= b[i]) : (a[i] <= b[i]);
  return ok;
}

}  // namespace

TEST(ToyModel, BeatsTheMeanImagePredictor) {
  const ImageBatch x = probe();
  const Shape s = x.pixels.shape();
  Tensor mean_image({1, s.c, s.h, s.w});
  for (int n = 0; n < s.n; ++n) {
    auto item = x.pixels.item(n);
    for (std::size_t k = 0; k < item.size(); ++k) mean_image[k] += item[k] / s.n;
  }
  double constant_mse = 0.0;
  for (int n = 0; n < s.n; ++n) {
    auto item = x.pixels.item(n);
    for (std::size_t k = 0; k < item.size(); ++k) constant_mse += std::pow(item[k] - mean_image[k], 2);
  }
  constant_mse /= static_cast<double>(x.pixels.size());
  EXPECT_LT(sampled_reconstruction_mse(pretrained(), x), constant_mse);
}

TEST(ToyModel, KlWeightOnlyTradesAwayReconstruction) {
  VaeModel free_model(toy_config());
  pretrain_baseline(free_model, toy().ext, toy().data.train, pretrain_config(0.0));
  const ImageBatch x = probe();
  EXPECT_LE(sampled_reconstruction_mse(free_model, x), 1.05 * sampled_reconstruction_mse(pretrained(), x));
}

TEST(ToyModel, AttacksMoveMostImagesTheRightWay) {
  const ImageBatch x = probe();
  const ImageBatch y{x.pixels.gather([&] {
                       std::vector<int> idx;
                       for (int i = 0; i < x.size(); ++i) idx.push_back((i + 1) % x.size());
                       return idx;
                     }()),
                     x.ids};
  AttackBudget b;
  const AttackOutcome target = encoder_targeted_attack(pretrained(), x, pretrained().encode(y.pixels).mu(), b);
  EXPECT_GE(count_if_fraction(target.final_per_item, target.initial_per_item, false), 58);
  const AttackOutcome recon = pgd_reconstruction_attack(pretrained(), toy().ext, x, b, 1.0);
  EXPECT_GE(count_if_fraction(recon.final_per_item, recon.initial_per_item, true), 58);
  const AttackOutcome mist = mist_textural_attack(pretrained(), x, y, b);
  EXPECT_GE(count_if_fraction(mist.final_per_item, mist.initial_per_item, true), 58);
}
