#pragma once

// End-to-end encode/decode pipeline and the bitstream container.
//
// Container layout (little endian):
//   magic "IVC1" | u8 version | u64 model_hash | u32 height | u32 width
//   | u16 alpha | u16 N | u8 flags (bit0 = context mode)
//   | i32 y_radius | i32 z_lo | i32 z_hi | u64 header_fnv
//   | u32 z_len | z payload | u64 z_fnv
//   | u32 y_len | y payload | u64 y_fnv
//
// The header checksum makes any header mutation a parse failure; payload
// checksums catch bit flips the entropy coder could not detect on its own.

#include <string>
#include <vector>

#include "invcodec/bytes.hpp"
#include "invcodec/entropy.hpp"
#include "invcodec/inn.hpp"
#include "invcodec/params.hpp"
#include "invcodec/rans.hpp"
#include "invcodec/squeeze.hpp"
#include "invcodec/weights.hpp"

namespace invcodec {

struct hash_mismatch_error : std::runtime_error {
  explicit hash_mismatch_error(const std::string& m) : std::runtime_error(m) {}
};

constexpr char kBitstreamMagic[4] = {'I', 'V', 'C', '1'};
constexpr uint8_t kBitstreamVersion = 1;

struct Bitstream {
  uint64_t model_hash = 0;
  uint32_t height = 0, width = 0;  // source dims, before padding
  uint16_t alpha = 0, n_latent = 0;
  bool context_mode = false;
  int32_t y_radius = 0;  // main-latent residuals lie in [-y_radius, y_radius]
  int32_t z_lo = 0, z_hi = 0;
  std::vector<uint8_t> z_payload, y_payload;

  std::vector<uint8_t> serialize() const {
    ByteWriter w;
    w.bytes(reinterpret_cast<const uint8_t*>(kBitstreamMagic), 4);
    w.u8(kBitstreamVersion);
    w.u64(model_hash);
    w.u32(height);
    w.u32(width);
    w.u16(alpha);
    w.u16(n_latent);
    w.u8(context_mode ? 1 : 0);
    w.i32(y_radius);
    w.i32(z_lo);
    w.i32(z_hi);
    w.u64(fnv1a64(w.data().data(), w.size()));
    w.u32(static_cast<uint32_t>(z_payload.size()));
    w.bytes(z_payload);
    w.u64(fnv1a64(z_payload.data(), z_payload.size()));
    w.u32(static_cast<uint32_t>(y_payload.size()));
    w.bytes(y_payload);
    w.u64(fnv1a64(y_payload.data(), y_payload.size()));
    return w.take();
  }

  static Bitstream parse(const std::vector<uint8_t>& data) {
    try {
      ByteReader r(data);
      if (r.str(4) != std::string(kBitstreamMagic, 4))
        throw corrupt_stream_error("bitstream: bad magic");
      if (r.u8() != kBitstreamVersion)
        throw corrupt_stream_error("bitstream: unsupported version");
      Bitstream bs;
      bs.model_hash = r.u64();
      bs.height = r.u32();
      bs.width = r.u32();
      bs.alpha = r.u16();
      bs.n_latent = r.u16();
      bs.context_mode = (r.u8() & 1) != 0;
      bs.y_radius = r.i32();
      bs.z_lo = r.i32();
      bs.z_hi = r.i32();
      const size_t header_end = r.pos();
      const uint64_t header_sum = r.u64();
      if (header_sum != fnv1a64(data.data(), header_end))
        throw corrupt_stream_error("bitstream: header checksum mismatch");
      if (bs.height == 0 || bs.width == 0)
        throw corrupt_stream_error("bitstream: zero image dimension");
      const uint32_t z_len = r.u32();
      bs.z_payload = r.bytes(z_len);
      if (r.u64() != fnv1a64(bs.z_payload.data(), bs.z_payload.size()))
        throw corrupt_stream_error("bitstream: z payload checksum mismatch");
      const uint32_t y_len = r.u32();
      bs.y_payload = r.bytes(y_len);
      if (r.u64() != fnv1a64(bs.y_payload.data(), bs.y_payload.size()))
        throw corrupt_stream_error("bitstream: y payload checksum mismatch");
      if (!r.done()) throw corrupt_stream_error("bitstream: trailing bytes");
      return bs;
    } catch (const parse_error& e) {
      throw corrupt_stream_error(std::string("bitstream: ") + e.what());
    }
  }
};

// ---------------------------------------------------------------------------
// Padding
// ---------------------------------------------------------------------------

// Symmetric (edge-inclusive) reflection index, folded so it works for any
// pad amount even on 1-pixel inputs.
inline int64_t reflect_index(int64_t i, int64_t n) {
  if (n == 1) return 0;
  const int64_t period = 2 * n;
  int64_t j = i % period;
  if (j < 0) j += period;
  return j < n ? j : period - 1 - j;
}

inline Tensor reflect_pad_to(const Tensor& img, int64_t hp, int64_t wp) {
  const int64_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  require(hp >= H && wp >= W, "reflect_pad_to: target smaller than input");
  Tensor out({C, hp, wp});
  for (int64_t c = 0; c < C; ++c)
    for (int64_t y = 0; y < hp; ++y) {
      const int64_t sy = reflect_index(y, H);
      for (int64_t x = 0; x < wp; ++x)
        out.at(c, y, x) = img.at(c, sy, reflect_index(x, W));
    }
  return out;
}

inline int64_t ceil_to_multiple(int64_t v, int64_t m) {
  return ((v + m - 1) / m) * m;
}

inline int64_t ceil_div(int64_t a, int64_t b) { return (a + b - 1) / b; }

// ---------------------------------------------------------------------------
// Encode
// ---------------------------------------------------------------------------

// Optional capture of pipeline intermediates; tests use it to verify latent
// fidelity and rate agreement against the actual coded values.
struct CodecTrace {
  Tensor y;          // pre-quantization latents (N,h,w)
  Tensor z_hat;      // quantized side latents
  Tensor y_hat;      // quantized main latents (mean-offset)
  double estimated_bits = 0.0;  // model cross-entropy of the coded symbols
};

namespace detail {

struct LatentCoding {
  std::vector<int32_t> z_syms, y_syms;
  std::vector<float> y_sigma;  // per coded y symbol, in coding order
  Tensor z_hat, y_hat;
  double est_bits = 0.0;
  int32_t z_lo = 0, z_hi = 0, y_radius = 0;
};

// Expand [lo, hi] until each factorized channel's tail mass outside it is
// below 2^-(precision+1) per side.
inline void expand_z_range(const ModelParams& p, int32_t& lo, int32_t& hi) {
  const double tail = std::pow(2.0, -(kDefaultPrecision + 1));
  const int32_t limit = 1 << 14;
  for (int32_t ch = 0; ch < p.arch.nz_channels(); ++ch) {
    while (factorized_cumulative_scalar(p, ch, lo - 0.5) > tail) {
      --lo;
      require(lo > -limit, "encode: side-latent range exploded");
    }
    while (1.0 - factorized_cumulative_scalar(p, ch, hi + 0.5) > tail) {
      ++hi;
      require(hi < limit, "encode: side-latent range exploded");
    }
  }
}

}  // namespace detail

inline Bitstream encode_image(const Tensor& img, const ModelParams& params,
                              bool context_mode = false,
                              CodecTrace* trace = nullptr) {
  const ArchConfig& arch = params.arch;
  arch.validate();
  require(img.rank() == 3 && img.dim(0) == arch.image_channels,
          "encode_image: expected " + std::to_string(arch.image_channels) +
              "xHxW input, got " + img.shape_str());
  require(img.all_finite(), "encode_image: non-finite pixels rejected");
  const int64_t H = img.dim(1), W = img.dim(2);
  const int64_t m = arch.pad_multiple();
  const int64_t Hp = ceil_to_multiple(H, m), Wp = ceil_to_multiple(W, m);

  Tape tape;
  BoundParams P(tape, params);
  Var x = tape.leaf(reflect_pad_to(img, Hp, Wp));
  Var u = feature_enhance(P, "enc_fe", x);
  Var v = inn_forward(P, u);
  Var yv = squeeze_forward(P, v);
  const Tensor& y = tape.val(yv);
  const int64_t N = y.dim(0), h = y.dim(1), w = y.dim(2);

  Var zv = hyper_analysis(P, yv);
  detail::LatentCoding lc;
  // Quantize through the integer symbol so the stored floats match the
  // decoder's reconstruction bit for bit (no negative zeros).
  {
    const Tensor& z = tape.val(zv);
    require(z.all_finite(), "encode_image: non-finite side latents");
    lc.z_hat = Tensor(z.shape());
    for (int64_t i = 0; i < z.numel(); ++i)
      lc.z_hat[i] = static_cast<float>(
          static_cast<int32_t>(std::round(z[i])));
  }

  // Side-latent range: observed symbols plus factorized tail coverage.
  {
    float lo = lc.z_hat[0], hi = lc.z_hat[0];
    for (int64_t i = 0; i < lc.z_hat.numel(); ++i) {
      lo = std::min(lo, lc.z_hat[i]);
      hi = std::max(hi, lc.z_hat[i]);
    }
    lc.z_lo = static_cast<int32_t>(lo);
    lc.z_hi = static_cast<int32_t>(hi);
    detail::expand_z_range(params, lc.z_lo, lc.z_hi);
  }

  // z symbols, channel-major.
  lc.z_syms.reserve(static_cast<size_t>(lc.z_hat.numel()));
  for (int64_t i = 0; i < lc.z_hat.numel(); ++i)
    lc.z_syms.push_back(static_cast<int32_t>(lc.z_hat[i]));
  for (int64_t c = 0; c < lc.z_hat.dim(0); ++c) {
    const int64_t plane = lc.z_hat.dim(1) * lc.z_hat.dim(2);
    for (int64_t i = 0; i < plane; ++i)
      lc.est_bits -= std::log2(factorized_bin_probability(
          params, static_cast<int>(c), lc.z_hat[c * plane + i]));
  }

  // Main latents: mean-offset quantization against the predicted means.
  lc.y_hat = Tensor({N, h, w});
  lc.y_syms.reserve(static_cast<size_t>(N * h * w));
  lc.y_sigma.reserve(static_cast<size_t>(N * h * w));
  float sigma_max = kScaleBound;
  if (!context_mode) {
    auto [muv, sigmav] = hyper_synthesis(P, tape.leaf(lc.z_hat), h, w);
    const Tensor& mu = tape.val(muv);
    const Tensor& sig = tape.val(sigmav);
    for (int64_t yy = 0; yy < h; ++yy)
      for (int64_t xx = 0; xx < w; ++xx)
        for (int64_t c = 0; c < N; ++c) {
          const float mv = mu.at(c, yy, xx);
          const float sv = sig.at(c, yy, xx);
          const int32_t r =
              static_cast<int32_t>(std::round(y.at(c, yy, xx) - mv));
          lc.y_syms.push_back(r);
          lc.y_sigma.push_back(sv);
          lc.y_hat.at(c, yy, xx) = static_cast<float>(r) + mv;
          sigma_max = std::max(sigma_max, sv);
        }
  } else {
    Var hyper_raw = hyper_synthesis_raw(P, tape.leaf(lc.z_hat), h, w);
    ContextRunner cr(params, tape.val(hyper_raw));
    std::vector<float> mu, sig;
    for (int64_t yy = 0; yy < h; ++yy)
      for (int64_t xx = 0; xx < w; ++xx) {
        cr.mu_sigma_at(lc.y_hat, yy, xx, mu, sig);
        for (int64_t c = 0; c < N; ++c) {
          const int32_t r = static_cast<int32_t>(
              std::round(y.at(c, yy, xx) - mu[static_cast<size_t>(c)]));
          lc.y_syms.push_back(r);
          lc.y_sigma.push_back(sig[static_cast<size_t>(c)]);
          lc.y_hat.at(c, yy, xx) =
              static_cast<float>(r) + mu[static_cast<size_t>(c)];
          sigma_max = std::max(sigma_max, sig[static_cast<size_t>(c)]);
        }
      }
  }
  require(lc.y_hat.all_finite(), "encode_image: non-finite main latents");

  int32_t radius = static_cast<int32_t>(std::ceil(4.3 * sigma_max)) + 1;
  for (int32_t s : lc.y_syms) radius = std::max(radius, std::abs(s));
  require(2 * radius + 1 <= 60000,
          "encode_image: latent magnitude too large for coding tables");
  lc.y_radius = radius;

  for (size_t i = 0; i < lc.y_syms.size(); ++i)
    lc.est_bits -= std::log2(gaussian_bin_probability(
        lc.y_syms[i], 0.0, lc.y_sigma[i]));

  // Entropy coding: z first (its decode parameterizes y's tables).
  Bitstream bs;
  bs.model_hash = model_hash(params);
  bs.height = static_cast<uint32_t>(H);
  bs.width = static_cast<uint32_t>(W);
  bs.alpha = static_cast<uint16_t>(arch.alpha);
  bs.n_latent = static_cast<uint16_t>(N);
  bs.context_mode = context_mode;
  bs.y_radius = lc.y_radius;
  bs.z_lo = lc.z_lo;
  bs.z_hi = lc.z_hi;

  {
    std::vector<CdfTable> ztabs;
    ztabs.reserve(static_cast<size_t>(lc.z_hat.dim(0)));
    for (int64_t c = 0; c < lc.z_hat.dim(0); ++c)
      ztabs.push_back(
          factorized_cdf_table(params, static_cast<int>(c), lc.z_lo, lc.z_hi));
    RansEncoder enc;
    const int64_t plane = lc.z_hat.dim(1) * lc.z_hat.dim(2);
    for (int64_t c = 0; c < lc.z_hat.dim(0); ++c)
      for (int64_t i = 0; i < plane; ++i)
        enc.put(ztabs[static_cast<size_t>(c)],
                lc.z_syms[static_cast<size_t>(c * plane + i)]);
    bs.z_payload = enc.finish();
  }
  {
    GaussianTableCache cache(lc.y_radius);
    RansEncoder enc;
    for (size_t i = 0; i < lc.y_syms.size(); ++i)
      enc.put(cache.get(lc.y_sigma[i]), lc.y_syms[i]);
    bs.y_payload = enc.finish();
  }

  if (trace != nullptr) {
    trace->y = y;
    trace->z_hat = lc.z_hat;
    trace->y_hat = lc.y_hat;
    trace->estimated_bits = lc.est_bits;
  }
  return bs;
}

// ---------------------------------------------------------------------------
// Decode
// ---------------------------------------------------------------------------

inline Tensor decode_image(const Bitstream& bs, const ModelParams& params,
                           CodecTrace* trace = nullptr) {
  const ArchConfig& arch = params.arch;
  arch.validate();
  if (bs.model_hash != model_hash(params))
    throw hash_mismatch_error("decode_image: bitstream was produced with a "
                              "different model (hash mismatch)");
  const int64_t H = bs.height, W = bs.width;
  const int64_t m = arch.pad_multiple();
  const int64_t Hp = ceil_to_multiple(H, m), Wp = ceil_to_multiple(W, m);
  int64_t h = Hp, w = Wp;
  for (int32_t b = 0; b < arch.blocks; ++b) {
    h /= 2;
    w /= 2;
  }
  const int64_t N = arch.latent_channels();
  const int64_t Nz = arch.nz_channels();
  const int64_t hz = ceil_div(ceil_div(h, 2), 2);
  const int64_t wz = ceil_div(ceil_div(w, 2), 2);

  // Side latents.
  Tensor z_hat({Nz, hz, wz});
  {
    if (bs.z_hi < bs.z_lo)
      throw corrupt_stream_error("decode_image: empty side-latent range");
    std::vector<CdfTable> ztabs;
    ztabs.reserve(static_cast<size_t>(Nz));
    for (int64_t c = 0; c < Nz; ++c)
      ztabs.push_back(
          factorized_cdf_table(params, static_cast<int>(c), bs.z_lo, bs.z_hi));
    RansDecoder dec(bs.z_payload);
    const int64_t plane = hz * wz;
    for (int64_t c = 0; c < Nz; ++c)
      for (int64_t i = 0; i < plane; ++i)
        z_hat[c * plane + i] =
            static_cast<float>(dec.get(ztabs[static_cast<size_t>(c)]));
    dec.finish();
  }

  Tape tape;
  BoundParams P(tape, params);

  // Main latents.
  Tensor y_hat({N, h, w});
  if (bs.y_radius < 0 || 2 * static_cast<int64_t>(bs.y_radius) + 1 > 60000)
    throw corrupt_stream_error("decode_image: bad residual radius");
  GaussianTableCache cache(bs.y_radius);
  if (!bs.context_mode) {
    auto [muv, sigmav] = hyper_synthesis(P, tape.leaf(z_hat), h, w);
    const Tensor& mu = tape.val(muv);
    const Tensor& sig = tape.val(sigmav);
    RansDecoder dec(bs.y_payload);
    for (int64_t yy = 0; yy < h; ++yy)
      for (int64_t xx = 0; xx < w; ++xx)
        for (int64_t c = 0; c < N; ++c) {
          const int32_t r = dec.get(cache.get(sig.at(c, yy, xx)));
          y_hat.at(c, yy, xx) = static_cast<float>(r) + mu.at(c, yy, xx);
        }
    dec.finish();
  } else {
    Var hyper_raw = hyper_synthesis_raw(P, tape.leaf(z_hat), h, w);
    ContextRunner cr(params, tape.val(hyper_raw));
    RansDecoder dec(bs.y_payload);
    std::vector<float> mu, sig;
    for (int64_t yy = 0; yy < h; ++yy)
      for (int64_t xx = 0; xx < w; ++xx) {
        cr.mu_sigma_at(y_hat, yy, xx, mu, sig);
        for (int64_t c = 0; c < N; ++c) {
          const int32_t r = dec.get(cache.get(sig[static_cast<size_t>(c)]));
          y_hat.at(c, yy, xx) =
              static_cast<float>(r) + mu[static_cast<size_t>(c)];
        }
      }
    dec.finish();
  }

  // Synthesis: inverse squeeze, inverse INN, decoder-side enhancement.
  Var vh = squeeze_inverse(P, tape.leaf(y_hat));
  Var uh = inn_inverse(P, vh);
  Var xh = feature_enhance(P, "dec_fe", uh);

  const Tensor& full = tape.val(xh);
  Tensor out({arch.image_channels, H, W});
  for (int64_t c = 0; c < arch.image_channels; ++c)
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x) {
        float v = full.at(c, y, x);
        out.at(c, y, x) = std::min(1.0f, std::max(0.0f, v));
      }

  if (trace != nullptr) {
    trace->z_hat = z_hat;
    trace->y_hat = y_hat;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Rate report
// ---------------------------------------------------------------------------

struct RateReport {
  double estimated_bpp = 0.0;  // model cross-entropy of the coded symbols
  double actual_bpp = 0.0;     // container bytes * 8 / source pixels
  size_t container_bytes = 0;
};

inline RateReport estimate_vs_actual(const Tensor& img,
                                     const ModelParams& params,
                                     bool context_mode = false) {
  CodecTrace trace;
  const Bitstream bs = encode_image(img, params, context_mode, &trace);
  const std::vector<uint8_t> bytes = bs.serialize();
  const double px = static_cast<double>(img.dim(1)) * img.dim(2);
  RateReport r;
  r.estimated_bpp = trace.estimated_bits / px;
  r.actual_bpp = static_cast<double>(bytes.size()) * 8.0 / px;
  r.container_bytes = bytes.size();
  return r;
}

}  // namespace invcodec
