#pragma once

// Desk-scale rate-distortion training: uniform-noise quantization proxy,
// Adam updates over the full pipeline (analysis, squeeze, hyperprior,
// synthesis through the inverse transform), and the quality-preset table.

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "invcodec/autodiff.hpp"
#include "invcodec/codec.hpp"
#include "invcodec/entropy.hpp"
#include "invcodec/inn.hpp"
#include "invcodec/metrics.hpp"
#include "invcodec/params.hpp"
#include "invcodec/random.hpp"
#include "invcodec/squeeze.hpp"

namespace invcodec {

enum class Distortion { kMse, kMsssim };

struct TrainConfig {
  double lambda = 0.01;
  Distortion distortion = Distortion::kMse;
  int steps = 200;
  int batch = 1;
  int crop = 32;  // must be divisible by the arch pad multiple
  uint64_t seed = 0;
  double lr = 1e-3;
  // (step index, multiplicative factor) applied when the step is reached.
  std::vector<std::pair<int, double>> lr_decay = {};
  bool context = false;
  int invertibility_check_every = 50;
  double invertibility_tolerance = 1e-3;
};

struct TrainResult {
  ModelParams params;
  std::vector<double> history;     // per-step training loss
  double initial_eval_loss = 0.0;  // full-dataset loss before training
  double final_eval_loss = 0.0;    // full-dataset loss after training
  double final_eval_distortion = 0.0;
  double final_eval_bpp = 0.0;
};

// Paper-style quality presets: (lambda, N) pairs, q1..q8 for MSE and
// q1..q5 for MS-SSIM.
inline std::pair<double, int> quality_preset(int q, Distortion d) {
  if (d == Distortion::kMse) {
    static const double lam[8] = {0.0016, 0.0024, 0.0032, 0.0075,
                                  0.015,  0.03,   0.045,  0.09};
    require(q >= 1 && q <= 8, "quality_preset: MSE presets are q1..q8");
    return {lam[q - 1], q <= 4 ? 128 : 192};
  }
  static const double lam[5] = {6.0, 12.0, 40.0, 120.0, 220.0};
  require(q >= 1 && q <= 5, "quality_preset: MS-SSIM presets are q1..q5");
  return {lam[q - 1], q <= 2 ? 128 : 192};
}

// y + u with u i.i.d. uniform strictly inside (-0.5, 0.5).
inline Tensor noisy_quantize(const Tensor& y, Xoshiro256& rng) {
  Tensor out = y;
  for (float& v : out.data()) v += rng.uniform_centered();
  return out;
}

// ---------------------------------------------------------------------------
// Loss graph
// ---------------------------------------------------------------------------

struct LossParts {
  Var loss;
  double rate_bpp = 0.0;
  double distortion = 0.0;
};

// R + lambda * D. R is bits-per-pixel from both likelihood tensors; D is MSE
// on [0,255]-scaled pixels or 1 - MS-SSIM.
inline LossParts rd_loss(Var x, Var x_hat, Var lik_y, Var lik_z, double lambda,
                         Distortion distortion, int64_t num_pixels) {
  Tape& t = *x.tape;
  Var bits = add(rate_bits(lik_y), rate_bits(lik_z));
  Var rate = scale(bits, 1.0f / static_cast<float>(num_pixels));
  Var dist{};
  if (distortion == Distortion::kMse) {
    Var d = sub(x, x_hat);
    dist = scale(mean_all(mul(d, d)), 255.0f * 255.0f);
  } else {
    dist = add_scalar(scale(ms_ssim_var(x, x_hat), -1.0f), 1.0f);
  }
  LossParts parts;
  parts.loss = add(rate, scale(dist, static_cast<float>(lambda)));
  parts.rate_bpp = t.val(rate)[0];
  parts.distortion = t.val(dist)[0];
  return parts;
}

// Full training graph for one image crop.
inline LossParts training_loss(BoundParams& P, const Tensor& crop,
                               const TrainConfig& cfg, Xoshiro256& noise_rng) {
  Tape& t = P.tape();
  Var x = t.leaf(crop);
  Var u = feature_enhance(P, "enc_fe", x);
  Var v = inn_forward(P, u);
  Var y = squeeze_forward(P, v);
  const Tensor& yt = t.val(y);
  const int64_t h = yt.dim(1), w = yt.dim(2);

  Var z = hyper_analysis(P, y);
  // Quantization proxy: additive uniform noise during training.
  Tensor zn(t.val(z).shape());
  for (float& f : zn.data()) f = noise_rng.uniform_centered();
  Var z_noisy = add(z, t.leaf(std::move(zn)));
  Var lik_z = factorized_likelihood(P, z_noisy);

  Tensor yn(yt.shape());
  for (float& f : yn.data()) f = noise_rng.uniform_centered();
  Var y_noisy = add(y, t.leaf(std::move(yn)));

  Var mu{}, sigma{};
  if (cfg.context) {
    Var hyper_feat = hyper_synthesis_raw(P, z_noisy, h, w);
    Var ctx = context_features(P, y_noisy);
    auto ms = entropy_parameters(P, hyper_feat, ctx);
    mu = ms.first;
    sigma = ms.second;
  } else {
    auto ms = hyper_synthesis(P, z_noisy, h, w);
    mu = ms.first;
    sigma = ms.second;
  }
  Var lik_y = gaussian_likelihood(y_noisy, mu, sigma);

  Var v_hat = squeeze_inverse(P, y_noisy);
  Var u_hat = inn_inverse(P, v_hat);
  Var x_hat = feature_enhance(P, "dec_fe", u_hat);

  return rd_loss(x, x_hat, lik_y, lik_z, cfg.lambda, cfg.distortion,
                 crop.dim(1) * crop.dim(2));
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

class AdamOptimizer {
 public:
  explicit AdamOptimizer(double lr, double beta1 = 0.9, double beta2 = 0.999,
                         double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

  void step(ModelParams& params, const std::map<std::string, Tensor>& grads) {
    ++t_;
    const double bc1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (const auto& [name, g] : grads) {
      Tensor& w = params.at(name);
      require(w.same_shape(g), "adam: gradient shape mismatch for " + name);
      auto& [mom, vel] = state_[name];
      if (mom.empty()) {
        mom.assign(static_cast<size_t>(w.numel()), 0.0);
        vel.assign(static_cast<size_t>(w.numel()), 0.0);
      }
      for (int64_t i = 0; i < w.numel(); ++i) {
        const double gi = g[i];
        auto& m = mom[static_cast<size_t>(i)];
        auto& v = vel[static_cast<size_t>(i)];
        m = b1_ * m + (1.0 - b1_) * gi;
        v = b2_ * v + (1.0 - b2_) * gi * gi;
        w[i] = static_cast<float>(static_cast<double>(w[i]) -
                                  lr_ * (m / bc1) /
                                      (std::sqrt(v / bc2) + eps_));
      }
    }
  }

 private:
  double lr_, b1_, b2_, eps_;
  int64_t t_ = 0;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>>
      state_;
};

// ---------------------------------------------------------------------------
// Helpers
// ---------------------------------------------------------------------------

// Orthonormalize the rows of a square matrix (QR projection); used to repair
// a 1x1 mixing matrix whose determinant collapsed during training.
inline Tensor orthonormal_projection(const Tensor& m) {
  const int64_t n = m.dim(0);
  std::vector<double> a(static_cast<size_t>(n * n));
  for (int64_t i = 0; i < n * n; ++i) a[static_cast<size_t>(i)] = m[i];
  for (int64_t j = 0; j < n; ++j) {
    double* rj = a.data() + j * n;
    for (int64_t k = 0; k < j; ++k) {
      const double* rk = a.data() + k * n;
      double dot = 0.0;
      for (int64_t i = 0; i < n; ++i) dot += rk[i] * rj[i];
      for (int64_t i = 0; i < n; ++i) rj[i] -= dot * rk[i];
    }
    double norm = 0.0;
    for (int64_t i = 0; i < n; ++i) norm += rj[i] * rj[i];
    norm = std::sqrt(norm);
    if (norm < 1e-12) {
      for (int64_t i = 0; i < n; ++i) rj[i] = (i == j) ? 1.0 : 0.0;
      norm = 1.0;
    }
    for (int64_t i = 0; i < n; ++i) rj[i] /= norm;
  }
  Tensor out({n, n});
  for (int64_t i = 0; i < n * n; ++i)
    out[i] = static_cast<float>(a[static_cast<size_t>(i)]);
  return out;
}

// Round-trip error of the full stack on a seeded probe input.
inline double inn_round_trip_error(const ModelParams& params, uint64_t seed) {
  const ArchConfig& arch = params.arch;
  const int64_t side = arch.pad_multiple() * 2;
  Xoshiro256 rng(seed);
  Tensor probe({arch.image_channels, side, side});
  for (float& v : probe.data()) v = static_cast<float>(rng.uniform());
  Tape tape;
  BoundParams P(tape, params);
  Var fwd = inn_forward(P, tape.leaf(probe));
  Var back = inn_inverse(P, fwd);
  return max_abs_diff(tape.val(back), probe);
}

struct EvalLoss {
  double loss = 0.0;
  double bpp = 0.0;
  double distortion = 0.0;
};

// Full-dataset loss with frozen noise, for fair before/after comparisons.
inline EvalLoss eval_rd_loss_full(const std::vector<Tensor>& images,
                                  const ModelParams& params,
                                  const TrainConfig& cfg,
                                  uint64_t noise_seed) {
  EvalLoss out;
  Xoshiro256 rng(noise_seed);
  for (const Tensor& img : images) {
    Tape tape;
    BoundParams P(tape, params);
    LossParts parts = training_loss(P, img, cfg, rng);
    out.loss += tape.val(parts.loss)[0];
    out.bpp += parts.rate_bpp;
    out.distortion += parts.distortion;
  }
  const double n = static_cast<double>(images.size());
  out.loss /= n;
  out.bpp /= n;
  out.distortion /= n;
  return out;
}

// Deterministic crop: offsets from the rng, image picked by the caller.
inline Tensor random_crop(const Tensor& img, int crop, Xoshiro256& rng) {
  require(img.dim(1) >= crop && img.dim(2) >= crop,
          "train: image smaller than crop size");
  const int64_t oy = static_cast<int64_t>(
      rng.below(static_cast<uint64_t>(img.dim(1) - crop + 1)));
  const int64_t ox = static_cast<int64_t>(
      rng.below(static_cast<uint64_t>(img.dim(2) - crop + 1)));
  Tensor out({img.dim(0), crop, crop});
  for (int64_t c = 0; c < img.dim(0); ++c)
    for (int64_t y = 0; y < crop; ++y)
      for (int64_t x = 0; x < crop; ++x)
        out.at(c, y, x) = img.at(c, oy + y, ox + x);
  return out;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

inline TrainResult train(const std::vector<Tensor>& images,
                         const ArchConfig& arch, const TrainConfig& cfg,
                         std::function<void(int, double)> progress = {}) {
  require(!images.empty(), "train: empty dataset");
  require(cfg.lambda > 0.0, "train: lambda must be positive");
  require(cfg.crop % arch.pad_multiple() == 0,
          "train: crop size must be divisible by " +
              std::to_string(arch.pad_multiple()));
  require(cfg.steps >= 0 && cfg.batch >= 1, "train: bad step/batch counts");

  TrainResult result;
  result.params = init_model_params(arch, cfg.seed);
  AdamOptimizer adam(cfg.lr);
  Xoshiro256 data_rng(cfg.seed ^ 0x5eedull);

  const uint64_t eval_noise_seed = cfg.seed ^ 0xeba1ull;
  std::vector<Tensor> eval_crops;
  {
    Xoshiro256 crop_rng(cfg.seed ^ 0xc40ff5e7ull);
    for (const Tensor& img : images)
      eval_crops.push_back(random_crop(img, cfg.crop, crop_rng));
  }
  result.initial_eval_loss =
      eval_rd_loss_full(eval_crops, result.params, cfg, eval_noise_seed).loss;

  size_t img_cursor = 0;
  for (int step = 0; step < cfg.steps; ++step) {
    for (const auto& [at, factor] : cfg.lr_decay)
      if (at == step) adam.set_lr(adam.lr() * factor);

    std::map<std::string, Tensor> grads;
    double step_loss = 0.0;
    Xoshiro256 noise_rng(cfg.seed + 0x9e3779b9ull * (step + 1));
    for (int b = 0; b < cfg.batch; ++b) {
      const Tensor& img = images[img_cursor];
      img_cursor = (img_cursor + 1) % images.size();
      Tensor crop = random_crop(img, cfg.crop, data_rng);

      Tape tape;
      BoundParams P(tape, result.params);
      LossParts parts = training_loss(P, crop, cfg, noise_rng);
      const double loss = tape.val(parts.loss)[0];
      if (!std::isfinite(loss))
        throw std::runtime_error(
            "train: non-finite loss at step " + std::to_string(step) +
            " (rate_bpp=" + std::to_string(parts.rate_bpp) +
            ", distortion=" + std::to_string(parts.distortion) + ")");
      step_loss += loss;
      tape.backward(parts.loss);
      for (const auto& [name, var] : P.bound()) {
        const Tensor& g = tape.grad(var);
        auto it = grads.find(name);
        if (it == grads.end()) {
          grads.emplace(name, g);
        } else {
          Tensor& acc = it->second;
          for (int64_t i = 0; i < acc.numel(); ++i) acc[i] += g[i];
        }
      }
    }
    if (cfg.batch > 1) {
      const float inv = 1.0f / static_cast<float>(cfg.batch);
      for (auto& [name, g] : grads)
        for (int64_t i = 0; i < g.numel(); ++i) g[i] *= inv;
    }
    adam.step(result.params, grads);

    // Keep the 1x1 mixing matrices invertible.
    for (int32_t blk = 0; blk < arch.blocks; ++blk) {
      Tensor& m = result.params.at("blk" + std::to_string(blk) + ".perm.w");
      if (std::abs(matrix_det(m)) <= 1e-8) m = orthonormal_projection(m);
    }

    result.history.push_back(step_loss / cfg.batch);
    if (progress) progress(step, step_loss / cfg.batch);

    if (cfg.invertibility_check_every > 0 &&
        (step + 1) % cfg.invertibility_check_every == 0) {
      const double err = inn_round_trip_error(result.params, cfg.seed + step);
      if (err > cfg.invertibility_tolerance)
        throw std::runtime_error(
            "train: invertibility degraded at step " + std::to_string(step) +
            ", round-trip error " + std::to_string(err));
    }
  }

  EvalLoss fin =
      eval_rd_loss_full(eval_crops, result.params, cfg, eval_noise_seed);
  result.final_eval_loss = fin.loss;
  result.final_eval_bpp = fin.bpp;
  result.final_eval_distortion = fin.distortion;
  return result;
}

// Synthetic smooth-gradient images for toy training and tests.
inline std::vector<Tensor> synthetic_gradient_images(int count, int64_t size,
                                                     uint64_t seed) {
  std::vector<Tensor> out;
  Xoshiro256 rng(seed);
  for (int i = 0; i < count; ++i) {
    Tensor img({3, size, size});
    for (int c = 0; c < 3; ++c) {
      const double base = rng.uniform();
      const double gx = rng.uniform_range(-0.5, 0.5);
      const double gy = rng.uniform_range(-0.5, 0.5);
      for (int64_t y = 0; y < size; ++y)
        for (int64_t x = 0; x < size; ++x) {
          const double v =
              base + gx * (static_cast<double>(x) / static_cast<double>(size)) +
              gy * (static_cast<double>(y) / static_cast<double>(size));
          img.at(c, y, x) = static_cast<float>(std::min(1.0, std::max(0.0, v)));
        }
    }
    out.push_back(std::move(img));
  }
  return out;
}

inline std::string history_to_csv(const std::vector<double>& history) {
  std::string out = "step,loss\n";
  char buf[64];
  for (size_t i = 0; i < history.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%zu,%.8f\n", i, history[i]);
    out += buf;
  }
  return out;
}

}  // namespace invcodec
