// Distortion and rate metrics: PSNR closed forms, MS-SSIM behavior, the dB
// transform, and AUC trapezoid cases with their invariances.

#include <catch2/catch_amalgamated.hpp>

#include "invcodec/metrics.hpp"
#include "testutil.hpp"

using namespace invcodec;
using testutil::random_tensor;

TEST_CASE("psnr closed forms") {
  // uniform difference of 1/255 -> 20 log10(255) = 48.1308 dB
  Tensor a = Tensor::full({3, 8, 8}, 0.5f);
  Tensor b = Tensor::full({3, 8, 8}, 0.5f + 1.0f / 255.0f);
  REQUIRE(psnr(a, b) == Catch::Approx(48.1308).margin(0.01));

  // identical images -> +inf sentinel
  REQUIRE(std::isinf(psnr(a, a)));

  // random pair matches a scalar-loop MSE oracle
  const Tensor x = random_tensor({3, 9, 7}, 1, 0.0, 1.0);
  const Tensor y = random_tensor({3, 9, 7}, 2, 0.0, 1.0);
  double mse = 0.0;
  for (int64_t i = 0; i < x.numel(); ++i) {
    const double d = 255.0 * (static_cast<double>(x[i]) - y[i]);
    mse += d * d;
  }
  mse /= static_cast<double>(x.numel());
  REQUIRE(psnr(x, y) ==
          Catch::Approx(10.0 * std::log10(255.0 * 255.0 / mse)).epsilon(1e-9));

  // symmetric, and decreasing as MSE grows
  REQUIRE(psnr(x, y) == Catch::Approx(psnr(y, x)));
  Tensor worse = y;
  for (int64_t i = 0; i < worse.numel(); ++i)
    worse[i] = x[i] + 2.0f * (y[i] - x[i]);
  REQUIRE(psnr(x, worse) < psnr(x, y));

  REQUIRE_THROWS_AS(psnr(x, Tensor({3, 9, 8})), std::invalid_argument);
}

TEST_CASE("ms_ssim basic properties") {
  const Tensor a = random_tensor({3, 64, 64}, 3, 0.0, 1.0);
  REQUIRE(ms_ssim(a, a) == 1.0);

  // symmetry
  const Tensor b = random_tensor({3, 64, 64}, 4, 0.0, 1.0);
  REQUIRE(std::abs(ms_ssim(a, b) - ms_ssim(b, a)) <= 1e-7);

  // strictly decreasing under growing noise
  Xoshiro256 rng(5);
  double prev = 1.0;
  for (double noise : {0.01, 0.05, 0.1}) {
    Tensor noisy = a;
    for (int64_t i = 0; i < noisy.numel(); ++i)
      noisy[i] = static_cast<float>(
          std::min(1.0, std::max(0.0, a[i] + noise * rng.normal())));
    const double v = ms_ssim(a, noisy);
    REQUIRE(v < prev);
    prev = v;
  }
}

TEST_CASE("ms_ssim scale handling") {
  // strict mode needs 176px for all five scales
  const Tensor small = random_tensor({3, 64, 64}, 6, 0.0, 1.0);
  REQUIRE_THROWS_AS(ms_ssim(small, small, /*strict=*/true),
                    std::invalid_argument);
  REQUIRE(msssim_supported_scales(176, 176) == 5);
  REQUIRE(msssim_supported_scales(64, 64) == 3);
  REQUIRE(msssim_supported_scales(11, 11) == 1);

  // reweighted small-image value is still a valid similarity
  const Tensor s2 = random_tensor({3, 64, 64}, 7, 0.0, 1.0);
  const double v = ms_ssim(small, s2);
  REQUIRE(v > 0.0);
  REQUIRE(v <= 1.0);

  // below the window size there is nothing to evaluate
  const Tensor tiny = random_tensor({3, 8, 8}, 8, 0.0, 1.0);
  REQUIRE_THROWS_AS(ms_ssim(tiny, tiny), std::invalid_argument);
}

TEST_CASE("ms_ssim gradient matches finite differences") {
  // Small tensors keep per-pixel gradients large enough that a 1e-3 central
  // difference rises above the float32 rounding floor of the loss value.
  for (uint64_t seed = 0; seed < 5; ++seed) {
    const Tensor a = random_tensor({1, 12, 12}, seed * 2 + 9, 0.2, 0.8);
    Tensor b = a;
    Xoshiro256 rng(seed * 2 + 10);
    for (int64_t i = 0; i < b.numel(); ++i)
      b[i] += static_cast<float>(0.05 * rng.normal());
    for (size_t wrt : {size_t(0), size_t(1)}) {
      const double err = testutil::max_fd_rel_error(
          [](Tape& t, std::vector<Var>& v) { return ms_ssim_var(v[0], v[1]); },
          {a, b}, wrt, 1e-3, 1e-2);
      REQUIRE(err <= 1e-3);
    }
  }
}

TEST_CASE("msssim_db transform") {
  REQUIRE(msssim_db(0.9) == Catch::Approx(10.0).margin(1e-9));
  REQUIRE(msssim_db(0.99) == Catch::Approx(20.0).margin(1e-9));
  REQUIRE(msssim_db(0.0) == 0.0);
  REQUIRE(std::isinf(msssim_db(1.0)));
  REQUIRE_THROWS_AS(msssim_db(1.5), std::invalid_argument);
}

TEST_CASE("auc trapezoid cases") {
  std::vector<RdPoint> two = {{1.0, 30.0, 0.9, "a"}, {2.0, 34.0, 0.95, "b"}};
  REQUIRE(auc(two, 1.0, 2.0) == Catch::Approx(32.0));

  std::vector<RdPoint> flat = {
      {0.5, 30.0, 0.9, ""}, {1.0, 30.0, 0.9, ""}, {2.5, 30.0, 0.9, ""}};
  REQUIRE(auc(flat, 0.6, 2.2) == Catch::Approx(30.0));
  REQUIRE(auc(flat, 0.5, 2.5) == Catch::Approx(30.0));
}

TEST_CASE("auc invariances and validation") {
  std::vector<RdPoint> pts = {
      {1.0, 30.0, 0.9, ""}, {2.0, 34.0, 0.92, ""}, {3.0, 35.0, 0.93, ""}};
  const double base = auc(pts, 1.0, 3.0);

  // point order does not matter
  std::vector<RdPoint> shuffled = {pts[2], pts[0], pts[1]};
  REQUIRE(auc(shuffled, 1.0, 3.0) == Catch::Approx(base));

  // inserting a collinear point does not change the integral
  std::vector<RdPoint> collinear = pts;
  collinear.push_back({1.5, 32.0, 0.91, ""});
  REQUIRE(auc(collinear, 1.0, 3.0) == Catch::Approx(base));

  // duplicate bpp values are averaged
  std::vector<RdPoint> dup = {
      {1.0, 28.0, 0.9, ""}, {1.0, 32.0, 0.9, ""}, {3.0, 34.0, 0.93, ""}};
  REQUIRE(auc(dup, 1.0, 3.0) == Catch::Approx((30.0 + 34.0) / 2.0));

  REQUIRE_THROWS_AS(auc({pts[0]}, 1.0, 3.0), std::invalid_argument);
  REQUIRE_THROWS_AS(auc(pts, 0.5, 3.0), std::invalid_argument);
  REQUIRE_THROWS_AS(auc(pts, 1.0, 3.5), std::invalid_argument);
}

TEST_CASE("rd point serialization") {
  std::vector<RdPoint> pts = {{0.5, 30.25, 0.91, "q1"},
                              {1.25, 33.5, 0.95, "q2"}};
  const std::string csv = rd_points_to_csv(pts);
  REQUIRE(csv.find("label,bpp,psnr_db,msssim") == 0);
  REQUIRE(csv.find("q1,0.500000") != std::string::npos);
  const std::string json = rd_points_to_json(pts);
  REQUIRE(json.front() == '[');
  REQUIRE(json.find("\"label\":\"q2\"") != std::string::npos);
}
