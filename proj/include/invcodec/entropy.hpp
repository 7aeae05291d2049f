#pragma once

// Probability models for the quantized latents: the per-channel factorized
// prior for the side information, the mean-scale Gaussian conditional for the
// main latents, the hyper analysis/synthesis transforms, the optional
// autoregressive context model, and the quantized CDF tables that bridge
// model probabilities to the entropy coder.

#include <algorithm>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "invcodec/autodiff.hpp"
#include "invcodec/inn.hpp"
#include "invcodec/params.hpp"

namespace invcodec {

// ---------------------------------------------------------------------------
// Gaussian conditional
// ---------------------------------------------------------------------------

// Probability of the unit bin centered at `values` under N(mu, sigma^2).
// Differentiable in all three arguments; sigma must already be clamped.
inline Var gaussian_likelihood(Var values, Var mu, Var sigma) {
  Var d = sub(values, mu);
  Var hi = std_normal_cdf(div(add_scalar(d, 0.5f), sigma));
  Var lo = std_normal_cdf(div(add_scalar(d, -0.5f), sigma));
  return clamp_min(sub(hi, lo), static_cast<float>(kLikelihoodFloor));
}

// Scalar evaluation in double precision; used by the coder-side table
// builders and the rate estimator.
inline double gaussian_bin_probability(double value, double mu, double sigma) {
  const double hi = std_normal_cdf_scalar((value - mu + 0.5) / sigma);
  const double lo = std_normal_cdf_scalar((value - mu - 0.5) / sigma);
  return std::max(hi - lo, kLikelihoodFloor);
}

// ---------------------------------------------------------------------------
// Factorized prior (univariate monotone network per channel)
// ---------------------------------------------------------------------------

// Cumulative function for one channel as a tape graph over a (1,h,w) input.
// Stage k applies softplus(H_k) x + b_k, then a gated tanh except at the last
// stage, which ends in a sigmoid.
inline Var factorized_cumulative(BoundParams& P, int channel, Var x) {
  require(P.tape().val(x).rank() == 3 && P.tape().val(x).dim(0) == 1,
          "factorized_cumulative: (1,h,w) input expected");
  const std::string base = "fp.ch" + std::to_string(channel);
  Var h = x;
  for (int k = 0; k < kPriorStages; ++k) {
    Var H = softplus(P(base + ".H" + std::to_string(k)));
    const Tensor& hm = P.tape().val(H);
    Var w = reshape(H, {hm.dim(0), hm.dim(1), 1, 1});
    h = conv2d(h, w, P(base + ".b" + std::to_string(k)), 1, 0);
    if (k + 1 < kPriorStages) {
      Var a = vtanh(P(base + ".a" + std::to_string(k)));
      h = add(h, mul_channel_vec(vtanh(h), a));
    }
  }
  return sigmoid(h);
}

// Likelihood of integer-spaced bins for one channel: c(v+0.5) - c(v-0.5).
inline Var factorized_likelihood_channel(BoundParams& P, int channel,
                                         Var values) {
  Var hi = factorized_cumulative(P, channel, add_scalar(values, 0.5f));
  Var lo = factorized_cumulative(P, channel, add_scalar(values, -0.5f));
  return clamp_min(sub(hi, lo), static_cast<float>(kLikelihoodFloor));
}

// Full-tensor likelihood: channel c of `values` is evaluated under channel
// c's parameters.
inline Var factorized_likelihood(BoundParams& P, Var values) {
  const Tensor& x = P.tape().val(values);
  require(x.rank() == 3, "factorized_likelihood: rank-3 input expected");
  Var out{};
  for (int64_t c = 0; c < x.dim(0); ++c) {
    Var ch = slice_channels(values, c, c + 1);
    Var lik = factorized_likelihood_channel(P, static_cast<int>(c), ch);
    out = (c == 0) ? lik : concat_channels(out, lik);
  }
  return out;
}

// Scalar double-precision evaluation of the cumulative, matching the tape
// graph stage for stage.
inline double factorized_cumulative_scalar(const ModelParams& p, int channel,
                                           double x) {
  const std::string base = "fp.ch" + std::to_string(channel);
  double h[kPriorHidden] = {x, 0.0, 0.0};
  int cur_dim = 1;
  for (int k = 0; k < kPriorStages; ++k) {
    const Tensor& H = p.at(base + ".H" + std::to_string(k));
    const Tensor& b = p.at(base + ".b" + std::to_string(k));
    const int out_dim = static_cast<int>(H.dim(0));
    double nxt[kPriorHidden] = {0.0, 0.0, 0.0};
    for (int i = 0; i < out_dim; ++i) {
      double acc = b[i];
      for (int j = 0; j < cur_dim; ++j)
        acc += static_cast<double>(
                   softplus_scalar(H[i * cur_dim + j])) * h[j];
      nxt[i] = acc;
    }
    if (k + 1 < kPriorStages) {
      const Tensor& a = p.at(base + ".a" + std::to_string(k));
      for (int i = 0; i < out_dim; ++i)
        nxt[i] += static_cast<double>(std::tanh(static_cast<double>(a[i]))) *
                  std::tanh(nxt[i]);
    }
    for (int i = 0; i < out_dim; ++i) h[i] = nxt[i];
    cur_dim = out_dim;
  }
  // Final stage is scalar; logistic.
  const double z = h[0];
  return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z))
                  : std::exp(z) / (1.0 + std::exp(z));
}

inline double factorized_bin_probability(const ModelParams& p, int channel,
                                         double value) {
  const double hi = factorized_cumulative_scalar(p, channel, value + 0.5);
  const double lo = factorized_cumulative_scalar(p, channel, value - 0.5);
  return std::max(hi - lo, kLikelihoodFloor);
}

// ---------------------------------------------------------------------------
// Rate estimate
// ---------------------------------------------------------------------------

// Two-term rate: (sum -log2 p_y + sum -log2 p_z) / num_pixels. Either tensor
// may be empty (zero symbols for that term).
inline double rate_estimate(const Tensor& lik_y, const Tensor& lik_z,
                            int64_t num_pixels) {
  require(num_pixels > 0, "rate_estimate: num_pixels must be positive");
  double bits = 0.0;
  for (const Tensor* t : {&lik_y, &lik_z}) {
    for (int64_t i = 0; i < t->numel(); ++i) {
      const double p = (*t)[i];
      if (!(p > 0.0) || p > 1.0)
        throw std::invalid_argument(
            "rate_estimate: likelihoods must be in (0,1], got " +
            std::to_string(p));
      bits -= std::log2(p);
    }
  }
  return bits / static_cast<double>(num_pixels);
}

// Tape version: total bits as a scalar node (for the training loss).
inline Var rate_bits(Var lik) {
  constexpr float kInvLn2 = 1.4426950408889634f;  // 1/ln 2
  return scale(sum_all(vlog(lik)), -kInvLn2);
}

// ---------------------------------------------------------------------------
// Hyper transforms
// ---------------------------------------------------------------------------

// Analysis: conv3x3/s1 -> conv5x5/s2 -> conv5x5/s2; output (Nz, ceil(h/4)-ish).
inline Var hyper_analysis(BoundParams& P, Var y) {
  Var h = conv2d(y, P("ha.c0.w"), P("ha.c0.b"), 1, 1);
  h = leaky_relu(h, kLeakySlope);
  h = conv2d(h, P("ha.c1.w"), P("ha.c1.b"), 2, 2);
  h = leaky_relu(h, kLeakySlope);
  return conv2d(h, P("ha.c2.w"), P("ha.c2.b"), 2, 2);
}

// Synthesis: mirrored with nearest-neighbor upsampling; emits 2N channels.
// Crops after each upsample reproduce the ceil-division chain of the
// analysis side for arbitrary target sizes.
inline Var hyper_synthesis_raw(BoundParams& P, Var z_hat, int64_t th,
                               int64_t tw) {
  const int64_t h1 = (th + 1) / 2, w1 = (tw + 1) / 2;
  Var h = crop_hw(upsample_nearest2(z_hat), h1, w1);
  h = conv2d(h, P("hs.c0.w"), P("hs.c0.b"), 1, 2);
  h = leaky_relu(h, kLeakySlope);
  h = crop_hw(upsample_nearest2(h), th, tw);
  h = conv2d(h, P("hs.c1.w"), P("hs.c1.b"), 1, 2);
  h = leaky_relu(h, kLeakySlope);
  return conv2d(h, P("hs.c2.w"), P("hs.c2.b"), 1, 1);
}

// Split a 2N-channel parameter map into (mu, sigma) with the scale lower
// bound applied.
inline std::pair<Var, Var> split_mu_sigma(BoundParams& P, Var params2n) {
  const int64_t n2 = P.tape().val(params2n).dim(0);
  Var mu = slice_channels(params2n, 0, n2 / 2);
  Var sigma = clamp_min(slice_channels(params2n, n2 / 2, n2), kScaleBound);
  return {mu, sigma};
}

inline std::pair<Var, Var> hyper_synthesis(BoundParams& P, Var z_hat,
                                           int64_t th, int64_t tw) {
  return split_mu_sigma(P, hyper_synthesis_raw(P, z_hat, th, tw));
}

// ---------------------------------------------------------------------------
// Context model
// ---------------------------------------------------------------------------

// Type-A causal mask for a KxK kernel: strictly-preceding raster positions.
inline Tensor causal_mask(int64_t out_c, int64_t in_c, int64_t k) {
  Tensor m({out_c, in_c, k, k});
  const int64_t mid = k / 2;
  for (int64_t o = 0; o < out_c; ++o)
    for (int64_t c = 0; c < in_c; ++c)
      for (int64_t ky = 0; ky < k; ++ky)
        for (int64_t kx = 0; kx < k; ++kx)
          m.at4(o, c, ky, kx) =
              (ky < mid || (ky == mid && kx < mid)) ? 1.0f : 0.0f;
  return m;
}

// Teacher-forced (parallel) context features over the full latent tensor.
inline Var context_features(BoundParams& P, Var y_hat) {
  Var w = P("ctx.mask.w");
  const Tensor& ws = P.tape().val(w);
  Var mask = P.tape().leaf(causal_mask(ws.dim(0), ws.dim(1), ws.dim(2)));
  return conv2d(y_hat, mul(w, mask), P("ctx.mask.b"), 1,
                static_cast<int>(ws.dim(2) / 2));
}

// Fusion of hyper features with context features into (mu, sigma).
inline std::pair<Var, Var> entropy_parameters(BoundParams& P, Var hyper_feat,
                                              Var ctx_feat) {
  Var h = concat_channels(hyper_feat, ctx_feat);
  h = leaky_relu(conv2d(h, P("ctx.f0.w"), P("ctx.f0.b"), 1, 0), kLeakySlope);
  h = leaky_relu(conv2d(h, P("ctx.f1.w"), P("ctx.f1.b"), 1, 0), kLeakySlope);
  h = conv2d(h, P("ctx.f2.w"), P("ctx.f2.b"), 1, 0);
  return split_mu_sigma(P, h);
}

// Serial per-position evaluation used by both the encoder and the decoder in
// context mode. Positions at or after (cy, cx) in raster order never
// contribute: the mask zeroes them structurally.
class ContextRunner {
 public:
  ContextRunner(const ModelParams& params, Tensor hyper_feat)
      : p_(&params), hyper_(std::move(hyper_feat)) {
    const Tensor& w = p_->at("ctx.mask.w");
    k_ = w.dim(2);
    out_c_ = w.dim(0);
    in_c_ = w.dim(1);
    n_ = static_cast<int64_t>(p_->arch.latent_channels());
    require(hyper_.rank() == 3 && hyper_.dim(0) == 2 * n_,
            "ContextRunner: hyper features must have 2N channels");
  }

  // mu/sigma for all N channels at one spatial position given the partially
  // filled latent tensor (future positions must be zero or are ignored).
  void mu_sigma_at(const Tensor& y_partial, int64_t cy, int64_t cx,
                   std::vector<float>& mu, std::vector<float>& sigma) const {
    const int64_t H = y_partial.dim(1), W = y_partial.dim(2);
    const int64_t mid = k_ / 2;
    const Tensor& w = p_->at("ctx.mask.w");
    const Tensor& b = p_->at("ctx.mask.b");
    std::vector<float> ctx(static_cast<size_t>(out_c_));
    for (int64_t o = 0; o < out_c_; ++o) {
      double acc = b[o];
      for (int64_t c = 0; c < in_c_; ++c)
        for (int64_t ky = 0; ky < k_; ++ky) {
          const int64_t iy = cy + ky - mid;
          if (iy < 0 || iy >= H) continue;
          for (int64_t kx = 0; kx < k_; ++kx) {
            if (!(ky < mid || (ky == mid && kx < mid))) continue;
            const int64_t ix = cx + kx - mid;
            if (ix < 0 || ix >= W) continue;
            acc += static_cast<double>(w.at4(o, c, ky, kx)) *
                   y_partial.at(c, iy, ix);
          }
        }
      ctx[static_cast<size_t>(o)] = static_cast<float>(acc);
    }

    // vec = [hyper(:, cy, cx), ctx]
    std::vector<float> vec(static_cast<size_t>(2 * n_ + out_c_));
    for (int64_t c = 0; c < 2 * n_; ++c)
      vec[static_cast<size_t>(c)] = hyper_.at(c, cy, cx);
    for (int64_t o = 0; o < out_c_; ++o)
      vec[static_cast<size_t>(2 * n_ + o)] = ctx[static_cast<size_t>(o)];

    vec = dense_lrelu("ctx.f0", vec, true);
    vec = dense_lrelu("ctx.f1", vec, true);
    vec = dense_lrelu("ctx.f2", vec, false);

    mu.assign(static_cast<size_t>(n_), 0.0f);
    sigma.assign(static_cast<size_t>(n_), 0.0f);
    for (int64_t c = 0; c < n_; ++c) {
      mu[static_cast<size_t>(c)] = vec[static_cast<size_t>(c)];
      sigma[static_cast<size_t>(c)] =
          std::max(vec[static_cast<size_t>(n_ + c)], kScaleBound);
    }
  }

  int64_t latent_channels() const { return n_; }

 private:
  std::vector<float> dense_lrelu(const std::string& name,
                                 const std::vector<float>& in,
                                 bool act) const {
    const Tensor& w = p_->at(name + ".w");
    const Tensor& b = p_->at(name + ".b");
    const int64_t out_c = w.dim(0), in_c = w.dim(1);
    require(in_c == static_cast<int64_t>(in.size()),
            "ContextRunner: fusion width mismatch");
    std::vector<float> out(static_cast<size_t>(out_c));
    for (int64_t o = 0; o < out_c; ++o) {
      double acc = b[o];
      for (int64_t c = 0; c < in_c; ++c)
        acc += static_cast<double>(w[(o * in_c + c)]) *
               in[static_cast<size_t>(c)];
      float v = static_cast<float>(acc);
      if (act && v < 0.0f) v *= kLeakySlope;
      out[static_cast<size_t>(o)] = v;
    }
    return out;
  }

  const ModelParams* p_;
  Tensor hyper_;
  int64_t k_ = 5, out_c_ = 0, in_c_ = 0, n_ = 0;
};

// ---------------------------------------------------------------------------
// Quantized CDF tables
// ---------------------------------------------------------------------------

struct CdfTable {
  int32_t offset = 0;    // symbol value of the first table entry
  int32_t precision = 16;
  std::vector<uint32_t> freq;  // one per symbol, each >= 1, sums to 1<<precision
  std::vector<uint32_t> cum;   // size freq.size()+1, cum.front()=0, strictly increasing

  int64_t size() const { return static_cast<int64_t>(freq.size()); }
  bool contains(int32_t symbol) const {
    return symbol >= offset && symbol < offset + size();
  }
};

constexpr int kDefaultPrecision = 16;

// Deterministic quantization of bin probabilities. The cumulative sums are
// rounded (so per-bin error never accumulates), the probabilities are
// renormalized over the support, and zero-frequency bins take one count from
// the currently largest bin. Rejected if the support cannot carry the mass:
// more symbols than slots, or too much mass left outside the range.
inline CdfTable build_cdf_table(const std::vector<double>& probs,
                                int32_t offset,
                                int32_t precision = kDefaultPrecision) {
  require(precision >= 1 && precision <= 16,
          "build_cdf_table: precision must be in [1,16]");
  const int64_t n = static_cast<int64_t>(probs.size());
  require(n >= 1, "build_cdf_table: empty support");
  const int64_t target = int64_t(1) << precision;
  if (n > target)
    throw std::invalid_argument(
        "build_cdf_table: support of " + std::to_string(n) +
        " symbols does not fit precision " + std::to_string(precision));
  double mass = 0.0;
  for (double p : probs) {
    require(p >= 0.0 && std::isfinite(p), "build_cdf_table: bad probability");
    mass += p;
  }
  // The support must cover the distribution up to ~one quantization step per
  // side, otherwise the table misrepresents the model it claims to encode.
  if (mass < 1.0 - 2.0 * std::pow(2.0, -precision) - 1e-9)
    throw std::invalid_argument(
        "build_cdf_table: support range too small, covered mass " +
        std::to_string(mass));

  CdfTable t;
  t.offset = offset;
  t.precision = precision;
  t.freq.assign(static_cast<size_t>(n), 0);
  t.cum.assign(static_cast<size_t>(n) + 1, 0);
  double prefix = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    prefix += probs[static_cast<size_t>(i)] / mass;
    const int64_t c = std::min<int64_t>(
        target, std::llround(prefix * static_cast<double>(target)));
    t.cum[static_cast<size_t>(i + 1)] = static_cast<uint32_t>(
        std::max<int64_t>(c, t.cum[static_cast<size_t>(i)]));
  }
  t.cum[static_cast<size_t>(n)] = static_cast<uint32_t>(target);
  for (int64_t i = 0; i < n; ++i)
    t.freq[static_cast<size_t>(i)] =
        t.cum[static_cast<size_t>(i + 1)] - t.cum[static_cast<size_t>(i)];

  // Give empty bins one count each. Steals walk the donor bins in descending
  // initial frequency (round-robin passes), so no donor loses more than one
  // count per pass and the per-bin distortion stays bounded.
  int64_t owed = 0;
  for (int64_t i = 0; i < n; ++i) {
    if (t.freq[static_cast<size_t>(i)] == 0) {
      t.freq[static_cast<size_t>(i)] = 1;
      ++owed;
    }
  }
  if (owed > 0) {
    std::vector<int64_t> donors;
    donors.reserve(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i)
      if (t.freq[static_cast<size_t>(i)] > 1) donors.push_back(i);
    std::sort(donors.begin(), donors.end(), [&t](int64_t a, int64_t b) {
      if (t.freq[static_cast<size_t>(a)] != t.freq[static_cast<size_t>(b)])
        return t.freq[static_cast<size_t>(a)] > t.freq[static_cast<size_t>(b)];
      return a < b;
    });
    while (owed > 0) {
      bool progress = false;
      for (int64_t i : donors) {
        if (owed == 0) break;
        if (t.freq[static_cast<size_t>(i)] > 1) {
          --t.freq[static_cast<size_t>(i)];
          --owed;
          progress = true;
        }
      }
      if (!progress)
        throw std::invalid_argument(
            "build_cdf_table: support range too small to floor all bins");
    }
  }
  t.cum[0] = 0;
  for (int64_t i = 0; i < n; ++i)
    t.cum[static_cast<size_t>(i + 1)] =
        t.cum[static_cast<size_t>(i)] + t.freq[static_cast<size_t>(i)];
  return t;
}

// Residual table for N(0, sigma^2) over [-radius, radius].
inline CdfTable gaussian_cdf_table(double sigma, int32_t radius,
                                   int32_t precision = kDefaultPrecision) {
  require(sigma > 0.0, "gaussian_cdf_table: sigma must be positive");
  require(radius >= 0, "gaussian_cdf_table: negative radius");
  std::vector<double> probs(static_cast<size_t>(2 * radius + 1));
  for (int32_t v = -radius; v <= radius; ++v)
    probs[static_cast<size_t>(v + radius)] =
        gaussian_bin_probability(v, 0.0, sigma);
  return build_cdf_table(probs, -radius, precision);
}

// Table for one factorized-prior channel over [lo, hi].
inline CdfTable factorized_cdf_table(const ModelParams& p, int channel,
                                     int32_t lo, int32_t hi,
                                     int32_t precision = kDefaultPrecision) {
  require(hi >= lo, "factorized_cdf_table: empty range");
  std::vector<double> probs(static_cast<size_t>(hi - lo + 1));
  for (int32_t v = lo; v <= hi; ++v)
    probs[static_cast<size_t>(v - lo)] =
        factorized_bin_probability(p, channel, v);
  return build_cdf_table(probs, lo, precision);
}

// Cache of Gaussian residual tables keyed by the sigma bit pattern; identical
// scales (common in degenerate and toy models) share one table.
class GaussianTableCache {
 public:
  GaussianTableCache(int32_t radius, int32_t precision = kDefaultPrecision)
      : radius_(radius), precision_(precision) {}

  const CdfTable& get(float sigma) {
    uint32_t key;
    __builtin_memcpy(&key, &sigma, 4);
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;
    auto [pos, _] = cache_.emplace(
        key, gaussian_cdf_table(static_cast<double>(sigma), radius_,
                                precision_));
    return pos->second;
  }

 private:
  int32_t radius_, precision_;
  std::unordered_map<uint32_t, CdfTable> cache_;
};

}  // namespace invcodec
