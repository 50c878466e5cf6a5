#include <gtest/gtest.h>

#include <cmath>

#include "srlvae/error.hpp"
#include "srlvae/nn.hpp"
#include "srlvae/vae.hpp"
#include "support.hpp"

using namespace srlvae;
using srlvae::test_support::central_difference;
using srlvae::test_support::random_tensor;
using srlvae::test_support::relative_error;
using srlvae::test_support::sample_indices;

namespace {

// Direct zero-padded convolution.
Tensor conv_oracle(const Tensor& x, const std::vector<double>& p, int cin, int cout, int k, int stride, int pad) {
  const Shape s = x.shape();
  const int ho = (s.h + 2 * pad - k) / stride + 1;
  const int wo = (s.w + 2 * pad - k) / stride + 1;
  Tensor y({s.n, cout, ho, wo});
  const std::size_t bias = static_cast<std::size_t>(cout) * cin * k * k;
  for (int n = 0; n < s.n; ++n) {
    for (int o = 0; o < cout; ++o) {
      for (int oy = 0; oy < ho; ++oy) {
        for (int ox = 0; ox < wo; ++ox) {
          double v = p[bias + static_cast<std::size_t>(o)];
          for (int i = 0; i < cin; ++i) {
            for (int ky = 0; ky < k; ++ky) {
              for (int kx = 0; kx < k; ++kx) {
                const int iy = oy * stride + ky - pad;
                const int ix = ox * stride + kx - pad;
                if (iy < 0 || iy >= s.h || ix < 0 || ix >= s.w) continue;
                v += p[((static_cast<std::size_t>(o) * cin + i) * k + ky) * k + kx] * x.at(n, i, iy, ix);
              }
            }
          }
          y.at(n, o, oy, ox) = v;
        }
      }
    }
  }
  return y;
}

std::vector<double> random_params(std::size_t n, std::uint64_t seed, double scale = 0.3) {
  const Tensor t = random_tensor({1, 1, 1, static_cast<int>(n)}, seed, -scale, scale);
  return t.storage();
}

double weighted_sum(const Tensor& t, const Tensor& w) {
  double s = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) s += t[i] * w[i];
  return s;
}

}  // namespace

class ConvOracle : public ::testing::TestWithParam<std::tuple<int, int>> {};

TEST_P(ConvOracle, ForwardMatchesDirectLoops) {
  const auto [stride, size] = GetParam();
  nn::ConvNet net;
  net.conv(3, 5, 3, stride, 1);
  const auto params = random_params(net.param_count(), 1);
  const Tensor x = random_tensor({2, 3, size, size + 1}, 2);
  const Tensor y = nn::to_tensor(net.forward(params, nn::to_activation(x), nullptr));
  const Tensor ref = conv_oracle(x, params, 3, 5, 3, stride, 1);
  ASSERT_EQ(y.shape(), ref.shape());
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-12);
}

INSTANTIATE_TEST_SUITE_P(StridesAndSizes, ConvOracle,
                         ::testing::Combine(::testing::Values(1, 2), ::testing::Values(4, 5, 8)));

TEST(ConvNet, BackwardMatchesFiniteDifferences) {
  nn::ConvNet net;
  net.conv(2, 4, 3, 2, 1).silu().upsample2x().conv(4, 3, 3, 1, 1).sigmoid();
  auto params = random_params(net.param_count(), 3, 0.5);
  Tensor x = random_tensor({2, 2, 6, 6}, 4);
  const Tensor w = random_tensor({2, 3, 6, 6}, 5, -1.0, 1.0);
  auto f = [&] { return weighted_sum(nn::to_tensor(net.forward(params, nn::to_activation(x), nullptr)), w); };

  nn::ConvNet::Trace trace;
  net.forward(params, nn::to_activation(x), &trace);
  std::vector<double> grad(net.param_count(), 0.0);
  const Tensor dx = nn::to_tensor(net.backward(params, trace, nn::to_activation(w), grad, true));

  for (std::size_t i : sample_indices(params.size(), 40, 6)) {
    EXPECT_LT(relative_error(grad[i], central_difference(params, i, 1e-4, f)), 1e-4) << "param " << i;
  }
  for (std::size_t i : sample_indices(x.size(), 20, 7)) {
    EXPECT_LT(relative_error(dx[i], central_difference(x.storage(), i, 1e-4, f)), 1e-4) << "input " << i;
  }
}

TEST(ConvNet, ParamSlicesTileTheVector) {
  nn::ConvNet net;
  net.conv(3, 4, 3, 1, 1).silu().conv(4, 2, 3, 2, 1);
  const auto slices = net.param_slices("enc");
  ASSERT_EQ(slices.size(), 4u);
  EXPECT_EQ(slices[0].name, "enc/conv0/weight");
  std::size_t next = 0;
  for (const auto& s : slices) {
    EXPECT_EQ(s.offset, next);
    next += s.size;
  }
  EXPECT_EQ(next, net.param_count());
  EXPECT_EQ(net.scale(), 2.0);
}

TEST(Vae, LatentShapeFollowsDownsamplingFactor) {
  const VaeModel model(srlvae::test_support::tiny_config());
  EXPECT_EQ(model.config().downsampling_factor(), 4);
  const LatentDist d = model.encode(random_tensor({3, 3, 16, 12}, 1));
  EXPECT_EQ(d.shape(), (Shape{3, 2, 4, 3}));
  const Tensor rec = model.decode(d.mu());
  EXPECT_EQ(rec.shape(), (Shape{3, 3, 16, 12}));
  EXPECT_GE(rec.min(), 0.0);
  EXPECT_LE(rec.max(), 1.0);
}

TEST(Vae, IndivisibleSizeNamesTheAxis) {
  const VaeModel model(srlvae::test_support::tiny_config());
  try {
    model.encode(random_tensor({1, 3, 18, 16}, 1));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("height"), std::string::npos);
  }
  try {
    model.encode(random_tensor({1, 3, 16, 10}, 1));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("width"), std::string::npos);
  }
}

TEST(Vae, EncodeIsDeterministic) {
  const VaeModel model(srlvae::test_support::tiny_config());
  const Tensor x = random_tensor({2, 3, 8, 8}, 3);
  EXPECT_EQ(model.encode(x).mu(), model.encode(x).mu());
  EXPECT_EQ(model.encode(x).log_var(), model.encode(x).log_var());
}

TEST(Vae, LogVarIsClampedAndNanRejected) {
  Tensor mu({1, 1, 1, 3});
  Tensor lv({1, 1, 1, 3}, std::vector<double>{-100.0, 0.0, 100.0});
  const LatentDist d(mu, lv);
  EXPECT_EQ(d.log_var()[0], kLogVarMin);
  EXPECT_EQ(d.log_var()[2], kLogVarMax);
  lv[1] = std::nan("");
  EXPECT_THROW(LatentDist(mu, lv), NumericError);
}

TEST(Vae, ClampedLogVarHasZeroGradient) {
  VaeModel model(srlvae::test_support::tiny_config());
  // Push the log-variance head far below the clamp.
  const auto& layers = model.encoder_net().layers();
  const nn::Layer& head = layers.back();
  const std::size_t bias = head.offset + head.weight_count();
  for (int c = model.config().latent_channels; c < head.out_channels; ++c) {
    model.encoder_params()[bias + static_cast<std::size_t>(c)] = -500.0;
  }
  const Tensor x = random_tensor({1, 3, 8, 8}, 2);
  EncoderCache cache;
  const LatentDist d = model.encode_with(model.encoder_params(), x, &cache);
  for (double v : d.log_var().values()) EXPECT_EQ(v, kLogVarMin);
  LatentGrad g{Tensor(d.shape()), Tensor(d.shape(), 1.0)};
  std::vector<double> grad(model.encoder_params().size(), 0.0);
  model.encoder_backward(model.encoder_params(), cache, g, grad, false);
  for (int c = model.config().latent_channels; c < head.out_channels; ++c) {
    EXPECT_EQ(grad[bias + static_cast<std::size_t>(c)], 0.0);
  }
}

TEST(Vae, EncoderGradientsMatchFiniteDifferences) {
  VaeModel model(srlvae::test_support::tiny_config(3));
  Tensor x = random_tensor({2, 3, 8, 8}, 4);
  const Shape ls = model.latent_shape(x.shape());
  const Tensor wm = random_tensor(ls, 5, -1.0, 1.0);
  const Tensor wl = random_tensor(ls, 6, -1.0, 1.0);
  auto& params = model.encoder_params();
  auto f = [&] {
    const LatentDist d = model.encode(x);
    return weighted_sum(d.mu(), wm) + weighted_sum(d.log_var(), wl);
  };
  EncoderCache cache;
  model.encode_with(params, x, &cache);
  std::vector<double> grad(params.size(), 0.0);
  const Tensor dx = model.encoder_backward(params, cache, LatentGrad{wm, wl}, grad, true);
  for (std::size_t i : sample_indices(params.size(), 40, 8)) {
    EXPECT_LT(relative_error(grad[i], central_difference(params, i, 1e-4, f)), 1e-4) << "param " << i;
  }
  for (std::size_t i : sample_indices(x.size(), 20, 9)) {
    EXPECT_LT(relative_error(dx[i], central_difference(x.storage(), i, 1e-4, f)), 1e-4) << "input " << i;
  }
}

TEST(Vae, DecoderGradientsMatchFiniteDifferences) {
  VaeModel model(srlvae::test_support::tiny_config(4));
  Tensor z = random_tensor({2, 2, 2, 2}, 4, -1.0, 1.0);
  const Tensor w = random_tensor({2, 3, 8, 8}, 5, -1.0, 1.0);
  auto& params = model.decoder_params();
  auto f = [&] { return weighted_sum(model.decode(z), w); };
  DecoderCache cache;
  model.decode(z, &cache);
  std::vector<double> grad(params.size(), 0.0);
  const Tensor dz = model.decoder_backward(cache, w, grad);
  for (std::size_t i : sample_indices(params.size(), 40, 10)) {
    EXPECT_LT(relative_error(grad[i], central_difference(params, i, 1e-4, f)), 1e-4) << "param " << i;
  }
  for (std::size_t i = 0; i < z.size(); ++i) {
    EXPECT_LT(relative_error(dz[i], central_difference(z.storage(), i, 1e-4, f)), 1e-4) << "latent " << i;
  }
}

TEST(Reparameterization, MonteCarloMomentsMatch) {
  const Tensor mu({1, 1, 1, 2}, std::vector<double>{0.5, -1.0});
  const Tensor lv({1, 1, 1, 2}, std::vector<double>{std::log(0.25), std::log(4.0)});
  const LatentDist d(mu, lv);
  const int draws = 20000;
  double m0 = 0, m1 = 0, s0 = 0, s1 = 0;
  for (int k = 0; k < draws; ++k) {
    const Tensor z = sample_latent(d, static_cast<std::uint64_t>(k));
    m0 += z[0];
    m1 += z[1];
    s0 += (z[0] - 0.5) * (z[0] - 0.5);
    s1 += (z[1] + 1.0) * (z[1] + 1.0);
  }
  EXPECT_NEAR(m0 / draws, 0.5, 0.02);
  EXPECT_NEAR(m1 / draws, -1.0, 0.05);
  EXPECT_NEAR(s0 / draws, 0.25, 0.02);
  EXPECT_NEAR(s1 / draws, 4.0, 0.2);
  EXPECT_EQ(sample_latent(d, 3), sample_latent(d, 3));
}

TEST(Reparameterization, BackwardMatchesFiniteDifferences) {
  Tensor mu = random_tensor({1, 2, 2, 2}, 1, -1.0, 1.0);
  Tensor lv = random_tensor({1, 2, 2, 2}, 2, -1.0, 1.0);
  const Tensor eta = sample_noise(mu.shape(), 3);
  const Tensor w = random_tensor(mu.shape(), 4, -1.0, 1.0);
  const LatentGrad g = reparam_backward(LatentDist(mu, lv), eta, w);
  auto f = [&] { return weighted_sum(sample_latent(LatentDist(mu, lv), eta), w); };
  for (std::size_t i = 0; i < mu.size(); ++i) {
    EXPECT_LT(relative_error(g.mu[i], central_difference(mu.storage(), i, 1e-4, f)), 1e-4);
    EXPECT_LT(relative_error(g.log_var[i], central_difference(lv.storage(), i, 1e-4, f)), 1e-4);
  }
}

TEST(Losses, KlMatchesQuadrature) {
  const double m = 0.7;
  const double lv = std::log(0.3);
  const LatentDist d(Tensor({1, 1, 1, 1}, m), Tensor({1, 1, 1, 1}, lv));
  const double s = std::exp(0.5 * lv);
  // Simpson's rule for the integral of p log(p / q) with p = N(m, s^2), q = N(0, 1).
  const int steps = 20000;
  const double lo = m - 12 * s;
  const double hi = m + 12 * s;
  const double h = (hi - lo) / steps;
  auto integrand = [&](double z) {
    const double logp = -0.5 * std::log(2 * M_PI) - std::log(s) - 0.5 * (z - m) * (z - m) / (s * s);
    const double logq = -0.5 * std::log(2 * M_PI) - 0.5 * z * z;
    return std::exp(logp) * (logp - logq);
  };
  double acc = integrand(lo) + integrand(hi);
  for (int i = 1; i < steps; ++i) acc += integrand(lo + i * h) * (i % 2 ? 4.0 : 2.0);
  EXPECT_NEAR(kl_loss(d), acc * h / 3.0, 1e-9);
}

TEST(Losses, GradientsMatchFiniteDifferences) {
  Tensor a = random_tensor({2, 3, 12, 12}, 1);
  const Tensor b = random_tensor({2, 3, 12, 12}, 2);
  const PerceptualExtractor ext = PerceptualExtractor::seeded(3);

  Tensor g;
  mse_loss_grad(a, b, g);
  for (std::size_t i : sample_indices(a.size(), 20, 3)) {
    EXPECT_LT(relative_error(g[i], central_difference(a.storage(), i, 1e-4, [&] { return mse_loss(a, b); })), 1e-6);
  }
  l1_loss_grad(a, b, g);
  for (std::size_t i : sample_indices(a.size(), 20, 4)) {
    EXPECT_LT(relative_error(g[i], central_difference(a.storage(), i, 1e-7, [&] { return l1_loss(a, b); })), 1e-6);
  }
  const double p = perceptual_loss_grad(ext, a, b, g);
  EXPECT_NEAR(p, perceptual_loss(ext, a, b), 1e-12);
  for (std::size_t i : sample_indices(a.size(), 30, 5)) {
    const double fd = central_difference(a.storage(), i, 1e-5, [&] { return perceptual_loss(ext, a, b); });
    EXPECT_LT(relative_error(g[i], fd), 1e-5) << i;
  }

  Tensor mu = random_tensor({2, 2, 2, 2}, 6, -1.0, 1.0);
  Tensor lv = random_tensor({2, 2, 2, 2}, 7, -1.0, 1.0);
  LatentGrad kg;
  kl_loss_grad(LatentDist(mu, lv), kg);
  for (std::size_t i = 0; i < mu.size(); ++i) {
    auto f = [&] { return kl_loss(LatentDist(mu, lv)); };
    EXPECT_LT(relative_error(kg.mu[i], central_difference(mu.storage(), i, 1e-4, f)), 1e-4);
    EXPECT_LT(relative_error(kg.log_var[i], central_difference(lv.storage(), i, 1e-4, f)), 1e-4);
  }
}

TEST(Perceptual, MetricProperties) {
  const PerceptualExtractor ext = PerceptualExtractor::seeded(3);
  EXPECT_EQ(ext.scale_count(), 3u);
  EXPECT_EQ(ext.pooled_dim(), 56);
  const Tensor a = random_tensor({3, 3, 16, 16}, 1);
  const Tensor b = random_tensor({3, 3, 16, 16}, 2);
  EXPECT_NEAR(perceptual_loss(ext, a, a), 0.0, 1e-12);
  EXPECT_NEAR(perceptual_loss(ext, a, b), perceptual_loss(ext, b, a), 1e-12);
  EXPECT_GT(perceptual_loss(ext, a, b), 0.0);
  const auto per = perceptual_distances(ext, a, b);
  ASSERT_EQ(per.size(), 3u);
  EXPECT_NEAR((per[0] + per[1] + per[2]) / 3.0, perceptual_loss(ext, a, b), 1e-12);
  const auto pooled = ext.pooled(a);
  ASSERT_EQ(pooled.size(), 3u);
  EXPECT_EQ(pooled[0].size(), 56u);
  EXPECT_NE(ext.source_tag().find("seeded-random"), std::string::npos);
}

TEST(Perceptual, PluginNeedsTwoScales) {
  nn::ConvNet stage;
  stage.conv(3, 4, 3, 1, 1);
  std::vector<double> w(stage.param_count(), 0.1);
  EXPECT_THROW(PerceptualExtractor::from_weights({stage}, {w}), ConfigError);
  nn::ConvNet second;
  second.conv(4, 4, 3, 2, 1);
  std::vector<double> w2(second.param_count(), 0.1);
  const auto ext = PerceptualExtractor::from_weights({stage, second}, {w, w2});
  EXPECT_EQ(ext.source(), PerceptualExtractor::Source::Pretrained);
  EXPECT_EQ(ext.pooled_dim(), 8);
}
