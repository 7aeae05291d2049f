#pragma once

// Distortion and rate metrics: PSNR, multi-scale SSIM (differentiable, usable
// as a training loss), the -10*log10(1-v) dB transform, and trapezoidal AUC
// over a bpp range for RD-curve aggregation.

#include <algorithm>
#include <cstdio>
#include <limits>
#include <string>
#include <vector>

#include "invcodec/autodiff.hpp"
#include "invcodec/tensor.hpp"

namespace invcodec {

// PSNR on 8-bit-rescaled values (peak 255); inputs are [0,1] tensors.
// Identical images return +infinity.
inline double psnr(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "psnr");
  double mse = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    const double d = 255.0 * (static_cast<double>(a[i]) - b[i]);
    mse += d * d;
  }
  mse /= static_cast<double>(a.numel());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(255.0 * 255.0 / mse);
}

// ---------------------------------------------------------------------------
// MS-SSIM
// ---------------------------------------------------------------------------

constexpr int kMsssimWindow = 11;
constexpr double kMsssimSigma = 1.5;
inline const double kMsssimWeights[5] = {0.0448, 0.2856, 0.3001, 0.2363,
                                         0.1333};

inline Tensor gaussian_window() {
  Tensor w({1, 1, kMsssimWindow, kMsssimWindow});
  const int mid = kMsssimWindow / 2;
  double total = 0.0;
  for (int y = 0; y < kMsssimWindow; ++y)
    for (int x = 0; x < kMsssimWindow; ++x) {
      const double dy = y - mid, dx = x - mid;
      const double v =
          std::exp(-(dy * dy + dx * dx) / (2.0 * kMsssimSigma * kMsssimSigma));
      w.at4(0, 0, y, x) = static_cast<float>(v);
      total += v;
    }
  for (int64_t i = 0; i < w.numel(); ++i)
    w[i] = static_cast<float>(w[i] / total);
  return w;
}

// How many dyadic scales an image supports with an 11-tap window.
inline int msssim_supported_scales(int64_t h, int64_t w) {
  int m = 0;
  int64_t s = std::min(h, w);
  while (s >= kMsssimWindow && m < 5) {
    ++m;
    s /= 2;
  }
  return m;
}

namespace detail {

struct SsimTerms {
  Var cs;    // mean contrast-structure term
  Var ssim;  // mean luminance * cs term
};

inline SsimTerms ssim_scale_terms(Var a, Var b, Var win) {
  Tape& t = *a.tape;
  const int64_t C = t.val(a).dim(0);
  constexpr float C1 = 0.01f * 0.01f;  // (K1 * L)^2 with L = 1
  constexpr float C2 = 0.03f * 0.03f;
  Var cs_all{}, ssim_all{};
  for (int64_t c = 0; c < C; ++c) {
    Var ax = slice_channels(a, c, c + 1);
    Var bx = slice_channels(b, c, c + 1);
    Var mu_a = conv2d(ax, win, 1, 0);
    Var mu_b = conv2d(bx, win, 1, 0);
    Var saa = sub(conv2d(mul(ax, ax), win, 1, 0), mul(mu_a, mu_a));
    Var sbb = sub(conv2d(mul(bx, bx), win, 1, 0), mul(mu_b, mu_b));
    Var sab = sub(conv2d(mul(ax, bx), win, 1, 0), mul(mu_a, mu_b));
    Var cs = div(add_scalar(scale(sab, 2.0f), C2),
                 add_scalar(add(saa, sbb), C2));
    Var lum = div(add_scalar(scale(mul(mu_a, mu_b), 2.0f), C1),
                  add_scalar(add(mul(mu_a, mu_a), mul(mu_b, mu_b)), C1));
    Var sc = mul(lum, cs);
    cs_all = (c == 0) ? cs : concat_channels(cs_all, cs);
    ssim_all = (c == 0) ? sc : concat_channels(ssim_all, sc);
  }
  return {mean_all(cs_all), mean_all(ssim_all)};
}

}  // namespace detail

// Differentiable MS-SSIM. With strict=true, inputs smaller than 176px on a
// side (needed for all 5 scales) are rejected; otherwise the deepest scales
// are dropped and the exponent weights renormalized.
inline Var ms_ssim_var(Var a, Var b, bool strict = false) {
  detail::require_same_tape(a, b, "ms_ssim");
  Tape& t = *a.tape;
  require_same_shape(t.val(a), t.val(b), "ms_ssim");
  require(t.val(a).rank() == 3, "ms_ssim: rank-3 inputs expected");
  const int64_t h = t.val(a).dim(1), w = t.val(a).dim(2);
  const int scales = msssim_supported_scales(h, w);
  require(scales >= 1, "ms_ssim: image smaller than the 11-tap window");
  if (strict)
    require(scales == 5,
            "ms_ssim: strict mode needs min(H,W) >= 176 for 5 scales, got " +
                t.val(a).shape_str());
  double wsum = 0.0;
  for (int i = 0; i < scales; ++i) wsum += kMsssimWeights[i];

  Var win = t.leaf(gaussian_window());
  Var result{};
  Var ca = a, cb = b;
  for (int i = 0; i < scales; ++i) {
    detail::SsimTerms terms = detail::ssim_scale_terms(ca, cb, win);
    const bool last = (i == scales - 1);
    Var term = last ? terms.ssim : terms.cs;
    // Guard the fractional power against non-positive values; natural images
    // keep these terms well above the floor.
    term = clamp_min(term, 1e-4f);
    term = pow_const(term, static_cast<float>(kMsssimWeights[i] / wsum));
    result = (i == 0) ? term : mul(result, term);
    if (!last) {
      ca = avg_pool2(ca);
      cb = avg_pool2(cb);
    }
  }
  return result;
}

inline double ms_ssim(const Tensor& a, const Tensor& b, bool strict = false) {
  Tape t;
  Var v = ms_ssim_var(t.leaf(a), t.leaf(b), strict);
  return static_cast<double>(t.val(v)[0]);
}

// -10*log10(1 - v); v = 1 maps to +infinity.
inline double msssim_db(double v) {
  require(v >= 0.0 && v <= 1.0, "msssim_db: value must be in [0,1]");
  if (v >= 1.0) return std::numeric_limits<double>::infinity();
  return -10.0 * std::log10(1.0 - v);
}

// ---------------------------------------------------------------------------
// RD points and AUC
// ---------------------------------------------------------------------------

struct RdPoint {
  double bpp = 0.0;
  double psnr_db = 0.0;
  double msssim = 0.0;
  std::string label;
};

// Trapezoidal integral of PSNR over bpp on [lo, hi], normalized by the range
// width so the result is in dB. Points are sorted internally; duplicate bpp
// values are averaged.
inline double auc(std::vector<RdPoint> points, double bpp_lo, double bpp_hi) {
  require(points.size() >= 2, "auc: need at least two points");
  require(bpp_lo < bpp_hi, "auc: empty bpp range");
  std::sort(points.begin(), points.end(),
            [](const RdPoint& a, const RdPoint& b) { return a.bpp < b.bpp; });
  std::vector<RdPoint> pts;
  for (size_t i = 0; i < points.size();) {
    size_t j = i;
    double sum = 0.0;
    while (j < points.size() && points[j].bpp == points[i].bpp)
      sum += points[j++].psnr_db;
    RdPoint p = points[i];
    p.psnr_db = sum / static_cast<double>(j - i);
    pts.push_back(p);
    i = j;
  }
  require(pts.size() >= 2, "auc: need at least two distinct bpp values");
  require(bpp_lo >= pts.front().bpp && bpp_hi <= pts.back().bpp,
          "auc: range outside the point span");

  auto interp = [&pts](double x) {
    for (size_t i = 1; i < pts.size(); ++i) {
      if (x <= pts[i].bpp) {
        const double t = (x - pts[i - 1].bpp) / (pts[i].bpp - pts[i - 1].bpp);
        return pts[i - 1].psnr_db + t * (pts[i].psnr_db - pts[i - 1].psnr_db);
      }
    }
    return pts.back().psnr_db;
  };

  double area = 0.0;
  double prev_x = bpp_lo, prev_y = interp(bpp_lo);
  for (const RdPoint& p : pts) {
    if (p.bpp <= bpp_lo || p.bpp >= bpp_hi) continue;
    area += 0.5 * (prev_y + p.psnr_db) * (p.bpp - prev_x);
    prev_x = p.bpp;
    prev_y = p.psnr_db;
  }
  area += 0.5 * (prev_y + interp(bpp_hi)) * (bpp_hi - prev_x);
  return area / (bpp_hi - bpp_lo);
}

inline std::string rd_points_to_csv(const std::vector<RdPoint>& pts) {
  std::string out = "label,bpp,psnr_db,msssim\n";
  char buf[160];
  for (const RdPoint& p : pts) {
    std::snprintf(buf, sizeof(buf), "%s,%.6f,%.4f,%.6f\n", p.label.c_str(),
                  p.bpp, p.psnr_db, p.msssim);
    out += buf;
  }
  return out;
}

inline std::string rd_points_to_json(const std::vector<RdPoint>& pts) {
  std::string out = "[";
  char buf[200];
  for (size_t i = 0; i < pts.size(); ++i) {
    std::snprintf(buf, sizeof(buf),
                  "%s{\"label\":\"%s\",\"bpp\":%.6f,\"psnr_db\":%.4f,"
                  "\"msssim\":%.6f}",
                  i ? "," : "", pts[i].label.c_str(), pts[i].bpp,
                  pts[i].psnr_db, pts[i].msssim);
    out += buf;
  }
  out += "]";
  return out;
}

}  // namespace invcodec
