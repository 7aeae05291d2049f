#pragma once

// Attentive channel squeeze: forward group-averaging of channels by ratio
// alpha with an attention module, inverse copy-expansion, and the deviation
// diagnostics of the averaging step.

#include <cstdio>
#include <fstream>
#include <string>

#include "invcodec/autodiff.hpp"
#include "invcodec/params.hpp"

namespace invcodec {

// Residual unit: x + conv3(lrelu(conv3(x))).
inline Var residual_unit(BoundParams& P, const std::string& pfx, Var x) {
  Var h = conv2d(x, P(pfx + ".c0.w"), P(pfx + ".c0.b"), 1, 1);
  h = leaky_relu(h, kLeakySlope);
  h = conv2d(h, P(pfx + ".c1.w"), P(pfx + ".c1.b"), 1, 1);
  return add(x, h);
}

// x + trunk(x) * sigmoid(mask(x)). The trunk is a chain of residual units
// with a final plain projection, so zero weights give the identity; the mask
// ends in a 1x1 convolution and a sigmoid, so the gate is strictly in (0,1).
inline Var attention(BoundParams& P, const std::string& pfx, Var x) {
  const int32_t units = P.arch().attn_units;
  Var tr = x;
  Var mk = x;
  for (int32_t u = 0; u < units; ++u) {
    tr = residual_unit(P, pfx + ".t" + std::to_string(u), tr);
    mk = residual_unit(P, pfx + ".m" + std::to_string(u), mk);
  }
  tr = conv2d(tr, P(pfx + ".tproj.w"), P(pfx + ".tproj.b"), 1, 1);
  mk = sigmoid(conv2d(mk, P(pfx + ".mproj.w"), P(pfx + ".mproj.b"), 1, 0));
  return add(x, mul(tr, mk));
}

// (d, h, w) -> (N, h, w): reshape to (alpha, N, h, w), mean over the copy
// axis, then encoder-side attention.
inline Var squeeze_forward(BoundParams& P, Var v) {
  const ArchConfig& a = P.arch();
  const Tensor& x = P.tape().val(v);
  require(x.rank() == 3, "squeeze_forward: rank-3 input expected");
  require(x.dim(0) == a.d(),
          "squeeze_forward: expected " + std::to_string(a.d()) +
              " channels, got " + x.shape_str());
  Var y = group_mean_channels(v, a.alpha);
  return attention(P, "enc_attn", y);
}

// (N, h, w) -> (d, h, w): decoder-side attention, then alpha stacked copies.
inline Var squeeze_inverse(BoundParams& P, Var y_hat) {
  const ArchConfig& a = P.arch();
  const Tensor& x = P.tape().val(y_hat);
  require(x.rank() == 3, "squeeze_inverse: rank-3 input expected");
  require(x.dim(0) == a.latent_channels(),
          "squeeze_inverse: expected " + std::to_string(a.latent_channels()) +
              " channels, got " + x.shape_str());
  Var y = attention(P, "dec_attn", y_hat);
  return repeat_channels(y, a.alpha);
}

// ---------------------------------------------------------------------------
// Deviation diagnostics of the averaging step
// ---------------------------------------------------------------------------

struct DeviationReport {
  double epsilon = 0.0;         // mean absolute pixel deviation
  double mu = 0.0;              // scaling factor (mean absolute value)
  double scaled_epsilon = 0.0;  // epsilon / mu
  bool mu_is_zero = false;      // all-zero input: scaled value undefined
  int alpha = 1;
  Tensor map;                   // (h, w) mean scaled deviation per position
};

// epsilon = (1/l) sum_j sum_i |gamma_{i,j} - mean_j| with l = (d/alpha)*h*w;
// mu is the mean absolute value over all d*h*w entries, so the two-value
// group {1, 3} gives epsilon = 2, mu = 2 and scaled deviation 1.
inline DeviationReport deviation_report(const Tensor& v, int alpha) {
  require(v.rank() == 3, "deviation_report: rank-3 input expected");
  require(alpha >= 1 && v.dim(0) % alpha == 0,
          "deviation_report: alpha must divide channel count");
  const int64_t d = v.dim(0), N = d / alpha;
  const int64_t h = v.dim(1), w = v.dim(2), plane = h * w;
  const double l = static_cast<double>(N) * plane;

  DeviationReport rep;
  rep.alpha = alpha;
  rep.map = Tensor({h, w});

  double eps_acc = 0.0, mu_acc = 0.0;
  std::vector<double> map_acc(static_cast<size_t>(plane), 0.0);
  for (int64_t n = 0; n < N; ++n)
    for (int64_t p = 0; p < plane; ++p) {
      double mean = 0.0;
      for (int64_t g = 0; g < alpha; ++g) mean += v[(g * N + n) * plane + p];
      mean /= static_cast<double>(alpha);
      for (int64_t g = 0; g < alpha; ++g) {
        const double x = v[(g * N + n) * plane + p];
        eps_acc += std::abs(x - mean);
        mu_acc += std::abs(x);
        map_acc[static_cast<size_t>(p)] += std::abs(x - mean);
      }
    }

  rep.epsilon = eps_acc / l;
  rep.mu = mu_acc / (l * alpha);
  if (rep.mu <= 0.0) {
    rep.mu_is_zero = true;
    rep.scaled_epsilon = 0.0;
    return rep;  // map stays all-zero; scaled values undefined
  }
  rep.scaled_epsilon = rep.epsilon / rep.mu;
  // Each map pixel: mean over the d channels of |deviation| / mu.
  for (int64_t p = 0; p < plane; ++p)
    rep.map[p] = static_cast<float>(map_acc[static_cast<size_t>(p)] /
                                    (static_cast<double>(d) * rep.mu));
  return rep;
}

inline std::string deviation_to_json(const DeviationReport& r) {
  char buf[256];
  if (r.mu_is_zero) {
    std::snprintf(buf, sizeof(buf),
                  "{\"alpha\":%d,\"epsilon\":%.9g,\"mu\":0,"
                  "\"scaled_epsilon\":null,\"height\":%lld,\"width\":%lld}",
                  r.alpha, r.epsilon,
                  static_cast<long long>(r.map.dim(0)),
                  static_cast<long long>(r.map.dim(1)));
  } else {
    std::snprintf(buf, sizeof(buf),
                  "{\"alpha\":%d,\"epsilon\":%.9g,\"mu\":%.9g,"
                  "\"scaled_epsilon\":%.9g,\"height\":%lld,\"width\":%lld}",
                  r.alpha, r.epsilon, r.mu, r.scaled_epsilon,
                  static_cast<long long>(r.map.dim(0)),
                  static_cast<long long>(r.map.dim(1)));
  }
  return std::string(buf);
}

// 8-bit binary PGM, scaled so the map maximum maps to 255.
inline void deviation_map_to_pgm(const DeviationReport& r,
                                 const std::string& path) {
  float mx = 0.0f;
  for (int64_t i = 0; i < r.map.numel(); ++i) mx = std::max(mx, r.map[i]);
  std::ofstream os(path, std::ios::binary);
  require(os.good(), "deviation_map_to_pgm: cannot open " + path);
  os << "P5\n" << r.map.dim(1) << " " << r.map.dim(0) << "\n255\n";
  for (int64_t i = 0; i < r.map.numel(); ++i) {
    const float v = mx > 0.0f ? r.map[i] / mx : 0.0f;
    os.put(static_cast<char>(
        static_cast<int>(std::round(255.0f * v))));
  }
}

}  // namespace invcodec
