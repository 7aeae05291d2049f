// Acceptance suite. Each criterion runs end to end against the library and
// prints one PASS/FAIL line; the exit code is the number of failures.

#include <chrono>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "invcodec/codec.hpp"
#include "invcodec/image_io.hpp"
#include "invcodec/metrics.hpp"
#include "invcodec/rans.hpp"
#include "invcodec/squeeze.hpp"
#include "invcodec/training.hpp"
#include "testutil.hpp"

using namespace invcodec;
using testutil::max_fd_rel_error;
using testutil::project_loss;
using testutil::random_tensor;
using testutil::randomize_params;

namespace {

struct Check {
  int id;
  std::string name;
  std::function<bool(std::string&)> run;
};

ArchConfig toy2_arch(int hidden) {
  ArchConfig a;
  a.blocks = 2;
  a.kernels = {5, 5};
  a.alpha = 6;
  a.subnet_hidden = hidden;
  return a;
}

ArchConfig full4_arch(int hidden, int alpha = 6) {
  ArchConfig a;
  a.blocks = 4;
  a.kernels = {5, 5, 3, 3};
  a.alpha = alpha;
  a.subnet_hidden = hidden;
  return a;
}

char detail_buf[512];

// Random-weight full-architecture models for criteria 3 and 4, built once.
const std::vector<ModelParams>& shared_full_models() {
  static std::vector<ModelParams> models = [] {
    std::vector<ModelParams> out;
    for (uint64_t seed = 0; seed < 20; ++seed)
      out.push_back(init_model_params(full4_arch(/*hidden=*/4), seed));
    return out;
  }();
  return models;
}

// --- 1: invertibility ------------------------------------------------------

bool crit_invertibility(std::string& detail) {
  double worst_stack = 0.0, worst_layer = 0.0;
  const ModelParams skeleton = init_model_params(full4_arch(/*hidden=*/4), 0);
  for (uint64_t seed = 0; seed < 50; ++seed) {
    ModelParams p = skeleton;
    randomize_params(p, seed + 1000);
    Tape t;
    BoundParams P(t, p);
    const Tensor u = random_tensor({3, 64, 64}, seed, 0.0, 1.0);
    Var fwd = inn_forward(P, t.leaf(u));
    Var back = inn_inverse(P, fwd);
    worst_stack = std::max(worst_stack, max_abs_diff(t.val(back), u));
  }
  const ArchConfig toy = toy2_arch(8);
  for (uint64_t seed = 0; seed < 50; ++seed) {
    ModelParams p = init_model_params(toy, seed);
    randomize_params(p, seed + 2000);
    Tape t;
    BoundParams P(t, p);
    const Tensor u = random_tensor({12, 8, 8}, seed, -1.0, 1.0);
    Var cf = coupling_forward(P, "blk0.cp0", t.leaf(u), 5);
    Var cb = coupling_inverse(P, "blk0.cp0", cf, 5);
    worst_layer = std::max(worst_layer, max_abs_diff(t.val(cb), u));
    const Tensor v = random_tensor({3, 8, 8}, seed, -1.0, 1.0);
    Var df = downscale_forward(P, "blk0.perm", t.leaf(v));
    Var db = downscale_inverse(P, "blk0.perm", df);
    worst_layer = std::max(worst_layer, max_abs_diff(t.val(db), v));
  }
  std::snprintf(detail_buf, sizeof(detail_buf),
                "stack max-abs %.3g (tol 1e-3), single-layer %.3g (tol 1e-5), "
                "50 seeds each",
                worst_stack, worst_layer);
  detail = detail_buf;
  return worst_stack <= 1e-3 && worst_layer <= 1e-5;
}

// --- 2: lossless coding ----------------------------------------------------

CdfTable fuzz_table(Xoshiro256& rng, int32_t offset, int64_t nsyms) {
  std::vector<double> probs(static_cast<size_t>(nsyms));
  double total = 0.0;
  for (double& p : probs) {
    p = rng.uniform_range(0.001, 1.0);
    total += p;
  }
  for (double& p : probs) p /= total;
  return build_cdf_table(probs, offset);
}

bool crit_lossless(std::string& detail) {
  Xoshiro256 rng(42);
  int failures = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const bool adaptive = (trial % 2) == 1;
    std::vector<CdfTable> tables;
    tables.push_back(fuzz_table(rng, static_cast<int32_t>(rng.below(21)) - 10,
                                2 + static_cast<int64_t>(rng.below(50))));
    if (adaptive)
      for (int i = 0; i < 3; ++i)
        tables.push_back(
            fuzz_table(rng, static_cast<int32_t>(rng.below(21)) - 10,
                       2 + static_cast<int64_t>(rng.below(50))));
    const size_t len = rng.below(300);
    std::vector<int32_t> symbols(len);
    std::vector<const CdfTable*> seq(len);
    for (size_t i = 0; i < len; ++i) {
      const CdfTable& t = tables[adaptive ? i % tables.size() : 0];
      seq[i] = &t;
      symbols[i] = t.offset + static_cast<int32_t>(
                                  rng.below(static_cast<uint64_t>(t.size())));
    }
    if (rans_decode(rans_encode(symbols, seq), seq) != symbols) ++failures;
  }

  // 1e5 iid symbols from a known 8-symbol distribution
  const std::vector<double> dist = {0.35, 0.2, 0.15, 0.1,
                                    0.08, 0.06, 0.04, 0.02};
  CdfTable table = build_cdf_table(dist, 0);
  Xoshiro256 rng2(7);
  RansEncoder enc;
  double info_bits = 0.0;
  for (int i = 0; i < 100000; ++i) {
    const double u = rng2.uniform();
    double acc = 0.0;
    int32_t s = static_cast<int32_t>(dist.size() - 1);
    for (size_t k = 0; k < dist.size(); ++k) {
      acc += dist[k];
      if (u < acc) {
        s = static_cast<int32_t>(k);
        break;
      }
    }
    info_bits -= std::log2(dist[static_cast<size_t>(s)]);
    enc.put(table, s);
  }
  const double coded_bits = 8.0 * static_cast<double>(enc.finish().size());
  const bool entropy_ok = std::abs(coded_bits - info_bits) <=
                          0.005 * info_bits + 128.0;
  std::snprintf(detail_buf, sizeof(detail_buf),
                "%d/1000 fuzz failures; 1e5-symbol stream %.0f bits vs "
                "entropy %.0f (slack 0.5%% + 128)",
                failures, coded_bits, info_bits);
  detail = detail_buf;
  return failures == 0 && entropy_ok;
}

// --- 3: rate-estimation agreement ------------------------------------------

bool crit_rate_agreement(std::string& detail) {
  double worst_rel = 0.0;
  bool ok = true;
  for (uint64_t seed = 0; seed < 20; ++seed) {
    const ModelParams& p = shared_full_models()[seed];
    const Tensor img = random_tensor({3, 64, 64}, seed + 500, 0.0, 1.0);
    const RateReport r = estimate_vs_actual(img, p);
    const double slack = 0.02 * r.estimated_bpp + 1024.0 / (64.0 * 64.0);
    const double diff = std::abs(r.actual_bpp - r.estimated_bpp);
    worst_rel = std::max(worst_rel, diff / slack);
    if (diff > slack || r.actual_bpp < r.estimated_bpp - 0.001) ok = false;
  }
  std::snprintf(detail_buf, sizeof(detail_buf),
                "20 random-weight 64x64 encodes, worst |actual-est| at %.2f "
                "of the allowed slack",
                worst_rel);
  detail = detail_buf;
  return ok;
}

// --- 4: latent fidelity ----------------------------------------------------

bool crit_latent_fidelity(std::string& detail) {
  bool ok = true;
  int images = 0;
  {
    for (uint64_t seed = 0; seed < 20; ++seed) {
      const ModelParams& p = shared_full_models()[seed];
      const Tensor img = random_tensor({3, 64, 64}, seed + 500, 0.0, 1.0);
      const bool ctx = seed < 5;  // context mode on the first five
      CodecTrace et, dt;
      Bitstream bs = encode_image(img, p, ctx, &et);
      decode_image(bs, p, &dt);
      if (!bit_equal(et.y_hat, dt.y_hat) || !bit_equal(et.z_hat, dt.z_hat))
        ok = false;
      ++images;
    }
  }

  // causality perturbation sweep at 8x8
  bool causal_ok = true;
  {
    ModelParams p = init_model_params(toy2_arch(8), 77);
    const int64_t N = 8, side = 8;
    const Tensor hyper = random_tensor({2 * N, side, side}, 78);
    ContextRunner runner(p, hyper);
    const Tensor y = random_tensor({N, side, side}, 79, -2.0, 2.0);
    std::vector<float> mu0, sg0, mu1, sg1;
    for (int64_t pos = 0; pos < side * side; ++pos) {
      const int64_t cy = pos / side, cx = pos % side;
      runner.mu_sigma_at(y, cy, cx, mu0, sg0);
      for (int64_t q = pos; q < side * side; ++q) {
        Tensor fut = y;
        for (int64_t c = 0; c < N; ++c) fut.at(c, q / side, q % side) += 25.0f;
        runner.mu_sigma_at(fut, cy, cx, mu1, sg1);
        if (mu0 != mu1 || sg0 != sg1) causal_ok = false;
      }
      if (pos > 0) {
        // a preceding position inside the 5x5 receptive field
        Tensor past = y;
        const int64_t qy = (cx > 0) ? cy : cy - 1;
        const int64_t qx = (cx > 0) ? cx - 1 : cx;
        for (int64_t c = 0; c < N; ++c) past.at(c, qy, qx) += 10.0f;
        runner.mu_sigma_at(past, cy, cx, mu1, sg1);
        if (mu0 == mu1) causal_ok = false;
      }
    }
  }
  std::snprintf(detail_buf, sizeof(detail_buf),
                "%d images (5 in context mode) latent-exact: %s; 8x8 "
                "causality sweep: %s",
                images, ok ? "yes" : "NO", causal_ok ? "pass" : "FAIL");
  detail = detail_buf;
  return ok && causal_ok;
}

// --- 5: gradient suite -----------------------------------------------------

bool crit_gradients(std::string& detail) {
  double worst = 0.0;
  auto track = [&worst](double e) { worst = std::max(worst, e); };

  // conv2d w.r.t. input, weight, bias
  const Tensor cx = random_tensor({2, 5, 5}, 1);
  const Tensor cw = random_tensor({3, 2, 3, 3}, 2);
  const Tensor cb = random_tensor({3}, 3);
  for (size_t wrt = 0; wrt < 3; ++wrt)
    track(max_fd_rel_error(
        [](Tape& t, std::vector<Var>& v) {
          return project_loss(t, conv2d(v[0], v[1], v[2], 1, 1));
        },
        {cx, cw, cb}, wrt));

  ModelParams p = init_model_params(toy2_arch(4), 4);
  // coupling forward and inverse
  const Tensor cu = random_tensor({12, 4, 4}, 5);
  track(max_fd_rel_error(
      [&p](Tape& t, std::vector<Var>& v) {
        BoundParams P(t, p);
        return project_loss(t, coupling_forward(P, "blk0.cp0", v[0], 5));
      },
      {cu}, 0));
  track(max_fd_rel_error(
      [&p](Tape& t, std::vector<Var>& v) {
        BoundParams P(t, p);
        return project_loss(t, coupling_inverse(P, "blk0.cp0", v[0], 5));
      },
      {cu}, 0));

  // squeeze averaging and attention
  const Tensor sv = random_tensor({48, 2, 2}, 6);
  track(max_fd_rel_error(
      [&p](Tape& t, std::vector<Var>& v) {
        BoundParams P(t, p);
        return project_loss(t, squeeze_forward(P, v[0]));
      },
      {sv}, 0));
  const Tensor av = random_tensor({8, 4, 4}, 7);
  track(max_fd_rel_error(
      [&p](Tape& t, std::vector<Var>& v) {
        BoundParams P(t, p);
        return project_loss(t, attention(P, "enc_attn", v[0]));
      },
      {av}, 0));

  // feature enhancement
  const Tensor ev = random_tensor({3, 6, 6}, 8);
  track(max_fd_rel_error(
      [&p](Tape& t, std::vector<Var>& v) {
        BoundParams P(t, p);
        return project_loss(t, feature_enhance(P, "enc_fe", v[0]));
      },
      {ev}, 0));

  // gaussian likelihood (all arguments)
  const Tensor gv = random_tensor({2, 3, 3}, 9, -2.0, 2.0);
  const Tensor gm = random_tensor({2, 3, 3}, 10, -1.0, 1.0);
  const Tensor gs = random_tensor({2, 3, 3}, 11, 0.5, 2.0);
  for (size_t wrt = 0; wrt < 3; ++wrt)
    track(max_fd_rel_error(
        [](Tape& t, std::vector<Var>& v) {
          return project_loss(t, gaussian_likelihood(v[0], v[1], v[2]));
        },
        {gv, gm, gs}, wrt));

  // factorized likelihood w.r.t. values
  const Tensor fv = random_tensor({1, 3, 3}, 12, -3.0, 3.0);
  track(max_fd_rel_error(
      [&p](Tape& t, std::vector<Var>& v) {
        BoundParams P(t, p);
        return project_loss(t, factorized_likelihood_channel(P, 0, v[0]));
      },
      {fv}, 0));

  // MS-SSIM on a small tensor, where per-pixel gradients rise well above the
  // float32 rounding floor of a 1e-3 central difference
  const Tensor ma = random_tensor({1, 12, 12}, 13, 0.2, 0.8);
  Tensor mb = ma;
  Xoshiro256 nrng(14);
  for (int64_t i = 0; i < mb.numel(); ++i)
    mb[i] += static_cast<float>(0.05 * nrng.normal());
  track(max_fd_rel_error(
      [](Tape& t, std::vector<Var>& v) { return ms_ssim_var(v[0], v[1]); },
      {ma, mb}, 1));

  std::snprintf(detail_buf, sizeof(detail_buf),
                "worst relative gradient error %.3g (tol 1e-3)", worst);
  detail = detail_buf;
  return worst <= 1e-3;
}

// --- 6: deviation diagnostics ----------------------------------------------

bool crit_deviation(std::string& detail) {
  bool ok = true;

  const Tensor v1 = random_tensor({8, 3, 3}, 15);
  if (deviation_report(v1, 1).epsilon != 0.0) ok = false;

  Tensor v2({4, 2, 2});
  for (int64_t i = 0; i < 8; ++i) v2[i] = 1.0f;
  for (int64_t i = 8; i < 16; ++i) v2[i] = 3.0f;
  const DeviationReport r2 = deviation_report(v2, 2);
  if (std::abs(r2.epsilon - 2.0) > 1e-12 || std::abs(r2.mu - 2.0) > 1e-12 ||
      std::abs(r2.scaled_epsilon - 1.0) > 1e-12)
    ok = false;

  const Tensor v3 = random_tensor({12, 4, 4}, 16);
  const double base = deviation_report(v3, 3).scaled_epsilon;
  double worst = 0.0;
  for (float s : {5.0f, 0.037f, -11.0f}) {
    Tensor scaled = v3;
    for (int64_t i = 0; i < v3.numel(); ++i) scaled[i] = v3[i] * s;
    worst = std::max(
        worst, std::abs(deviation_report(scaled, 3).scaled_epsilon - base));
  }
  if (worst > 1e-6 * base) ok = false;

  std::snprintf(detail_buf, sizeof(detail_buf),
                "alpha=1 -> 0; two-value case eps=%.3f mu=%.3f scaled=%.3f; "
                "scale-invariance drift %.2g",
                r2.epsilon, r2.mu, r2.scaled_epsilon, worst);
  detail = detail_buf;
  return ok;
}

// --- 7: toy RD training ----------------------------------------------------

bool crit_training(std::string& detail) {
  const ArchConfig arch = toy2_arch(32);
  const auto images = synthetic_gradient_images(16, 32, 0);
  double init_mid = 0.0, final_mid = 0.0;
  std::vector<double> final_distortion;
  bool invertible_throughout = true;
  for (double lambda : {0.001, 0.01, 0.1}) {
    TrainConfig cfg;
    cfg.lambda = lambda;
    cfg.steps = 200;
    cfg.batch = 1;
    cfg.crop = 32;
    cfg.seed = 0;
    cfg.lr = 1e-3;
    cfg.invertibility_check_every = 50;  // train() aborts if it degrades
    try {
      TrainResult res = train(images, arch, cfg);
      final_distortion.push_back(res.final_eval_distortion);
      if (lambda == 0.01) {
        init_mid = res.initial_eval_loss;
        final_mid = res.final_eval_loss;
      }
    } catch (const std::exception& e) {
      std::snprintf(detail_buf, sizeof(detail_buf), "training aborted: %s",
                    e.what());
      detail = detail_buf;
      return false;
    }
  }
  const bool descended = final_mid <= 0.7 * init_mid;
  const bool monotone = final_distortion.size() == 3 &&
                        final_distortion[1] <= final_distortion[0] + 1e-9 &&
                        final_distortion[2] <= final_distortion[1] + 1e-9;
  std::snprintf(
      detail_buf, sizeof(detail_buf),
      "lambda=0.01: loss %.2f -> %.2f (need <= 0.7x); distortion by lambda "
      "{%.2f, %.2f, %.2f} (need non-increasing); invertibility checked every "
      "50 steps",
      init_mid, final_mid, final_distortion.size() > 0 ? final_distortion[0] : -1.0,
      final_distortion.size() > 1 ? final_distortion[1] : -1.0,
      final_distortion.size() > 2 ? final_distortion[2] : -1.0);
  detail = detail_buf;
  return descended && monotone && invertible_throughout;
}

// --- 8: determinism / golden fixture ----------------------------------------

bool crit_golden(std::string& detail) {
  const std::string img_path = std::string(GOLDEN_DIR) + "/gradient64.ppm";
  const std::string bin_path = std::string(GOLDEN_DIR) + "/gradient64.ivc";
  const Tensor img = load_ppm(img_path);
  ModelParams p = init_model_params(toy2_arch(8), 0);
  const std::vector<uint8_t> run1 = encode_image(img, p).serialize();
  const std::vector<uint8_t> run2 = encode_image(img, p).serialize();
  const std::vector<uint8_t> committed = read_file_bytes(bin_path);
  std::snprintf(detail_buf, sizeof(detail_buf),
                "two in-process runs identical: %s; matches committed fixture "
                "(%zu bytes): %s",
                run1 == run2 ? "yes" : "NO", committed.size(),
                run1 == committed ? "yes" : "NO");
  detail = detail_buf;
  return run1 == run2 && run1 == committed;
}

// --- 9: metrics conformance --------------------------------------------------

bool crit_metrics(std::string& detail) {
  bool ok = true;

  Tensor a = Tensor::full({3, 16, 16}, 0.5f);
  Tensor b = Tensor::full({3, 16, 16}, 0.5f + 1.0f / 255.0f);
  const double p = psnr(a, b);
  if (std::abs(p - 48.1308) > 0.01) ok = false;

  const Tensor x = random_tensor({3, 64, 64}, 17, 0.0, 1.0);
  if (ms_ssim(x, x) != 1.0) ok = false;
  const Tensor y = random_tensor({3, 64, 64}, 18, 0.0, 1.0);
  if (std::abs(ms_ssim(x, y) - ms_ssim(y, x)) > 1e-7) ok = false;

  Xoshiro256 rng(19);
  double prev = 1.0;
  bool monotone = true;
  for (double noise : {0.01, 0.05, 0.1}) {
    Tensor noisy = x;
    for (int64_t i = 0; i < noisy.numel(); ++i)
      noisy[i] = static_cast<float>(
          std::min(1.0, std::max(0.0, x[i] + noise * rng.normal())));
    const double v = ms_ssim(x, noisy);
    if (v >= prev) monotone = false;
    prev = v;
  }
  if (!monotone) ok = false;

  if (std::abs(msssim_db(0.9) - 10.0) > 1e-9) ok = false;
  if (std::abs(msssim_db(0.99) - 20.0) > 1e-9) ok = false;

  std::vector<RdPoint> two = {{1.0, 30.0, 0.9, ""}, {2.0, 34.0, 0.95, ""}};
  if (std::abs(auc(two, 1.0, 2.0) - 32.0) > 1e-12) ok = false;
  std::vector<RdPoint> flat = {
      {0.5, 30.0, 0.9, ""}, {1.5, 30.0, 0.9, ""}, {2.5, 30.0, 0.9, ""}};
  if (std::abs(auc(flat, 0.7, 2.2) - 30.0) > 1e-12) ok = false;

  std::snprintf(detail_buf, sizeof(detail_buf),
                "psnr 1/255 case %.4f dB; self-MS-SSIM exact 1; dB transform "
                "and AUC trapezoids exact",
                p);
  detail = detail_buf;
  return ok;
}

}  // namespace

int main() {
  std::vector<Check> checks = {
      {1, "invertibility (50 seeds, stack <= 1e-3, layer <= 1e-5)",
       crit_invertibility},
      {2, "lossless rANS coding (1000 fuzz runs + entropy bound)",
       crit_lossless},
      {3, "rate estimate vs actual (20 encodes, 2% + 1024 bits slack)",
       crit_rate_agreement},
      {4, "latent fidelity (bit-exact latents + 8x8 causality sweep)",
       crit_latent_fidelity},
      {5, "gradient suite (all operations vs central differences)",
       crit_gradients},
      {6, "deviation diagnostics (hand cases + scale invariance)",
       crit_deviation},
      {7, "toy RD training (descent, lambda monotonicity, invertibility)",
       crit_training},
      {8, "determinism (golden bitstream fixture)", crit_golden},
      {9, "metrics conformance (PSNR/MS-SSIM/dB/AUC cases)", crit_metrics},
  };

  int failures = 0;
  const auto suite_start = std::chrono::steady_clock::now();
  for (Check& c : checks) {
    const auto t0 = std::chrono::steady_clock::now();
    std::string detail;
    bool ok = false;
    try {
      ok = c.run(detail);
    } catch (const std::exception& e) {
      detail = std::string("exception: ") + e.what();
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    std::printf("[%s] criterion %d: %s — %s (%.1f s)\n", ok ? "PASS" : "FAIL",
                c.id, c.name.c_str(), detail.c_str(), secs);
    std::fflush(stdout);
    if (!ok) ++failures;

    // stated runtime limits
    if (c.id == 1 && secs > 60.0) {
      std::printf("[FAIL] criterion 1 runtime: %.1f s exceeds 60 s\n", secs);
      ++failures;
    }
    if (c.id == 7 && secs > 600.0) {
      std::printf("[FAIL] criterion 7 runtime: %.1f s exceeds 600 s\n", secs);
      ++failures;
    }
  }
  const double total =
      std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                    suite_start)
          .count();
  std::printf("%d/%zu criteria passed (%.1f s total)\n",
              static_cast<int>(checks.size()) - failures, checks.size(),
              total);
  return failures;
}
