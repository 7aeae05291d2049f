// Toy rate-distortion training: quantization-proxy noise, loss composition,
// gradient flow through every parameter group, and optimizer behavior.

#include <catch2/catch_amalgamated.hpp>

#include "invcodec/training.hpp"
#include "testutil.hpp"

using namespace invcodec;
using testutil::random_tensor;

namespace {

ArchConfig toy_arch() {
  ArchConfig a;
  a.blocks = 2;
  a.kernels = {5, 5};
  a.alpha = 6;
  a.subnet_hidden = 8;
  return a;
}

}  // namespace

TEST_CASE("noisy quantize: support, mean, determinism") {
  const Tensor y = random_tensor({6, 9, 9}, 1, -4.0, 4.0);
  Xoshiro256 rng(2);
  const Tensor noisy = noisy_quantize(y, rng);
  for (int64_t i = 0; i < y.numel(); ++i) {
    const float d = noisy[i] - y[i];
    REQUIRE(d > -0.5f);
    REQUIRE(d < 0.5f);
  }
  // empirical mean of the noise
  Xoshiro256 rng2(3);
  double sum = 0.0;
  Tensor big({1000000});
  const Tensor noisy_big = noisy_quantize(big, rng2);
  for (int64_t i = 0; i < big.numel(); ++i) sum += noisy_big[i];
  REQUIRE(std::abs(sum / 1e6) < 0.002);
  // same seed, same noise
  Xoshiro256 a(7), b(7);
  REQUIRE(bit_equal(noisy_quantize(y, a), noisy_quantize(y, b)));
}

TEST_CASE("rd_loss composes rate and distortion") {
  const Tensor x = random_tensor({3, 8, 8}, 4, 0.0, 1.0);
  const Tensor xh = random_tensor({3, 8, 8}, 5, 0.0, 1.0);
  const Tensor ly = random_tensor({4, 2, 2}, 6, 0.05, 1.0);
  const Tensor lz = random_tensor({2, 1, 1}, 7, 0.05, 1.0);

  auto parts_for = [&](double lambda) {
    Tape t;
    LossParts parts =
        rd_loss(t.leaf(x), t.leaf(xh), t.leaf(ly), t.leaf(lz), lambda,
                Distortion::kMse, 64);
    return std::make_pair(static_cast<double>(t.val(parts.loss)[0]), parts);
  };

  // hand-composed oracle
  double bits = 0.0;
  for (int64_t i = 0; i < ly.numel(); ++i) bits -= std::log2(ly[i]);
  for (int64_t i = 0; i < lz.numel(); ++i) bits -= std::log2(lz[i]);
  const double rate = bits / 64.0;
  double mse = 0.0;
  for (int64_t i = 0; i < x.numel(); ++i) {
    const double d = x[i] - xh[i];
    mse += d * d;
  }
  mse = mse / static_cast<double>(x.numel()) * 255.0 * 255.0;

  auto [loss, parts] = parts_for(0.01);
  REQUIRE(loss == Catch::Approx(rate + 0.01 * mse).epsilon(1e-4));
  REQUIRE(parts.rate_bpp == Catch::Approx(rate).epsilon(1e-4));

  // lambda = 0: loss equals the rate term alone
  auto [loss0, parts0] = parts_for(0.0);
  REQUIRE(loss0 == Catch::Approx(rate).epsilon(1e-4));
  (void)parts0;

  // perfect reconstruction in MSE mode: loss is the rate term
  Tape t;
  LossParts perfect = rd_loss(t.leaf(x), t.leaf(x), t.leaf(ly), t.leaf(lz),
                              0.5, Distortion::kMse, 64);
  REQUIRE(static_cast<double>(t.val(perfect.loss)[0]) ==
          Catch::Approx(rate).epsilon(1e-4));
}

TEST_CASE("gradient flow reaches every parameter group") {
  ArchConfig arch = toy_arch();
  ModelParams params = init_model_params(arch, 1);
  TrainConfig cfg;
  cfg.context = true;  // exercise the context model parameters too
  cfg.lambda = 0.01;
  const Tensor crop = random_tensor({3, 16, 16}, 2, 0.0, 1.0);

  Tape tape;
  BoundParams P(tape, params);
  Xoshiro256 noise(3);
  LossParts parts = training_loss(P, crop, cfg, noise);
  tape.backward(parts.loss);

  size_t named = 0, nonzero = 0;
  for (const auto& [name, var] : P.bound()) {
    ++named;
    const Tensor& g = tape.grad(var);
    bool any = false;
    for (int64_t i = 0; i < g.numel(); ++i)
      if (g[i] != 0.0f) any = true;
    if (any) ++nonzero;
    INFO(name);
    CHECK(any);
  }
  // every parameter tensor participates in the graph
  REQUIRE(named == params.tensors.size());
  REQUIRE(nonzero == named);
}

TEST_CASE("zero learning rate leaves parameters bit-identical") {
  ArchConfig arch = toy_arch();
  auto images = synthetic_gradient_images(2, 16, 4);
  TrainConfig cfg;
  cfg.steps = 3;
  cfg.crop = 16;
  cfg.lr = 0.0;
  cfg.invertibility_check_every = 0;
  TrainResult res = train(images, arch, cfg);
  ModelParams fresh = init_model_params(arch, cfg.seed);
  for (const auto& [name, t] : fresh.tensors)
    REQUIRE(bit_equal(t, res.params.at(name)));
}

TEST_CASE("short smoke run descends and keeps invertibility") {
  ArchConfig arch = toy_arch();
  auto images = synthetic_gradient_images(4, 32, 5);
  TrainConfig cfg;
  cfg.steps = 30;
  cfg.crop = 32;
  cfg.lambda = 0.01;
  cfg.lr = 1e-3;
  cfg.invertibility_check_every = 10;
  TrainResult res = train(images, arch, cfg);
  REQUIRE(res.history.size() == 30);
  REQUIRE(res.final_eval_loss < res.initial_eval_loss);
  REQUIRE(inn_round_trip_error(res.params, 77) <= 1e-3);
}

TEST_CASE("train/test quantization proxy consistency is bounded") {
  // Rate under additive-noise latents vs hard-rounded latents: same
  // likelihood machinery, values differing by at most half a step each.
  ArchConfig arch = toy_arch();
  ModelParams params = init_model_params(arch, 6);
  const Tensor crop = random_tensor({3, 16, 16}, 7, 0.0, 1.0);

  Tape t;
  BoundParams P(t, params);
  Var x = t.leaf(crop);
  Var y = squeeze_forward(P, inn_forward(P, feature_enhance(P, "enc_fe", x)));
  Var z = hyper_analysis(P, y);

  Xoshiro256 rng(8);
  Tensor y_noisy = noisy_quantize(t.val(y), rng);
  Tensor y_round = round_half_away(t.val(y));
  Tensor z_round = round_half_away(t.val(z));

  auto rate_of = [&](const Tensor& yq) {
    Tape t2;
    BoundParams P2(t2, params);
    auto [mu, sigma] = hyper_synthesis(P2, t2.leaf(z_round), t.val(y).dim(1),
                                       t.val(y).dim(2));
    Var lik = gaussian_likelihood(t2.leaf(yq), mu, sigma);
    double bits = 0.0;
    for (int64_t i = 0; i < t2.val(lik).numel(); ++i)
      bits -= std::log2(static_cast<double>(t2.val(lik)[i]));
    return bits / 256.0;
  };
  const double noisy_rate = rate_of(y_noisy);
  const double round_rate = rate_of(y_round);
  INFO("noisy " << noisy_rate << " vs rounded " << round_rate);
  REQUIRE(std::abs(noisy_rate - round_rate) <
          0.5 * std::max(noisy_rate, round_rate) + 0.1);
}

TEST_CASE("train aborts on non-finite loss with diagnostics") {
  Tensor bad({1});
  bad[0] = std::numeric_limits<float>::quiet_NaN();
  REQUIRE(!bad.all_finite());
  // the guard itself: a loss carrying NaN raises with the step index
  ArchConfig arch = toy_arch();
  auto images = synthetic_gradient_images(1, 16, 9);
  TrainConfig cfg;
  cfg.steps = 2;
  cfg.crop = 16;
  cfg.lr = 1e30;  // drives the parameters to overflow within a step or two
  cfg.invertibility_check_every = 0;
  try {
    train(images, arch, cfg);
    // divergence this extreme reliably produces NaN or an invertibility
    // failure; either way training must not return normally with garbage
    WARN("extreme learning rate did not diverge; acceptable but unusual");
  } catch (const std::exception& e) {
    REQUIRE(std::string(e.what()).find("step") != std::string::npos);
  }
}

TEST_CASE("quality presets pair lambda with the documented channel counts") {
  auto [l1, n1] = quality_preset(1, Distortion::kMse);
  REQUIRE(l1 == Catch::Approx(0.0016));
  REQUIRE(n1 == 128);
  auto [l8, n8] = quality_preset(8, Distortion::kMse);
  REQUIRE(l8 == Catch::Approx(0.09));
  REQUIRE(n8 == 192);
  auto [lm3, nm3] = quality_preset(3, Distortion::kMsssim);
  REQUIRE(lm3 == Catch::Approx(40.0));
  REQUIRE(nm3 == 192);
  REQUIRE_THROWS_AS(quality_preset(9, Distortion::kMse),
                    std::invalid_argument);
}
