#pragma once

// Architecture hyperparameters and the named-tensor parameter store shared by
// training, coding and serialization. Parameter names are stable strings; the
// weight file and the model hash are derived from the sorted name -> tensor
// map, so iteration order is deterministic.

#include <map>
#include <string>
#include <vector>

#include "invcodec/autodiff.hpp"
#include "invcodec/random.hpp"
#include "invcodec/tensor.hpp"

namespace invcodec {

struct ArchConfig {
  int32_t blocks = 4;                      // invertible blocks in the stack
  std::vector<int32_t> kernels = {5, 5, 3, 3};  // coupling kernel per block
  int32_t couplings_per_block = 3;
  int32_t subnet_hidden = 32;              // bottleneck width of g/h subnets
  int32_t alpha = 6;                       // channel squeeze ratio
  int32_t nz = 0;                          // side-latent channels; 0 -> N
  int32_t attn_units = 3;                  // residual units per attention branch
  int32_t image_channels = 3;

  int32_t d() const {
    int32_t v = image_channels;
    for (int32_t i = 0; i < blocks; ++i) v *= 4;
    return v;
  }
  int32_t latent_channels() const { return d() / alpha; }
  int32_t nz_channels() const { return nz > 0 ? nz : latent_channels(); }
  int32_t pad_multiple() const { return 1 << blocks; }

  void validate() const {
    require(blocks >= 1 && blocks <= 6, "arch: blocks out of range");
    require(static_cast<int32_t>(kernels.size()) >= blocks,
            "arch: kernel schedule shorter than block count");
    for (int32_t i = 0; i < blocks; ++i)
      require(kernels[static_cast<size_t>(i)] % 2 == 1 &&
                  kernels[static_cast<size_t>(i)] >= 1,
              "arch: coupling kernels must be odd");
    require(couplings_per_block >= 1, "arch: couplings_per_block must be >= 1");
    require(subnet_hidden >= 1, "arch: subnet width must be >= 1");
    require(alpha >= 1 && d() % alpha == 0,
            "arch: alpha must divide the expanded channel count " +
                std::to_string(d()));
    require(image_channels >= 1, "arch: image_channels must be >= 1");
  }
};

// Factorized-prior internals: 4 monotone stages of hidden width 3.
constexpr int kPriorStages = 4;
constexpr int kPriorHidden = 3;
constexpr double kPriorInitScale = 3.0;
constexpr double kLikelihoodFloor = 1e-9;
constexpr float kScaleBound = 0.11f;
constexpr float kLeakySlope = 0.01f;
constexpr float kCouplingClamp = 2.0f;  // s_max of the centered sigmoid

struct ModelParams {
  ArchConfig arch;
  std::map<std::string, Tensor> tensors;

  const Tensor& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end())
      throw std::invalid_argument("unknown parameter: " + name);
    return it->second;
  }
  Tensor& at(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end())
      throw std::invalid_argument("unknown parameter: " + name);
    return it->second;
  }
  bool has(const std::string& name) const { return tensors.count(name) != 0; }
};

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

inline void fill_fan_in_uniform(Xoshiro256& rng, Tensor& w, int64_t fan_in) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (float& v : w.data())
    v = static_cast<float>(rng.uniform_range(-bound, bound));
}

// Orthogonal matrix from QR (modified Gram-Schmidt) of a seeded Gaussian.
// Rows are orthonormalized so the inner products stream over contiguous
// memory.
inline Tensor orthogonal_matrix(Xoshiro256& rng, int64_t n) {
  std::vector<double> a(static_cast<size_t>(n * n));
  for (auto& v : a) v = rng.normal();
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
    // A degenerate row is vanishingly unlikely with Gaussian entries, but
    // fall back to a unit vector to keep the construction total.
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

namespace detail {

inline void add_conv(ModelParams& p, Xoshiro256& rng, const std::string& name,
                     int64_t out_c, int64_t in_c, int64_t k,
                     float bias_init = 0.0f) {
  Tensor w({out_c, in_c, k, k});
  fill_fan_in_uniform(rng, w, in_c * k * k);
  p.tensors[name + ".w"] = std::move(w);
  p.tensors[name + ".b"] = Tensor::full({out_c}, bias_init);
}

inline void add_subnet(ModelParams& p, Xoshiro256& rng,
                       const std::string& pfx, int64_t in_c, int64_t hidden,
                       int64_t out_c, int64_t k) {
  add_conv(p, rng, pfx + ".c0", hidden, in_c, k);
  add_conv(p, rng, pfx + ".c1", hidden, hidden, 1);
  add_conv(p, rng, pfx + ".c2", out_c, hidden, k);
}

inline void add_enhancement(ModelParams& p, Xoshiro256& rng,
                            const std::string& pfx, int64_t c) {
  const int64_t g = c;  // growth rate equals input channels
  add_conv(p, rng, pfx + ".d0", g, c, 1);
  add_conv(p, rng, pfx + ".d1", g, c + g, 3);
  add_conv(p, rng, pfx + ".d2", g, c + 2 * g, 1);
  add_conv(p, rng, pfx + ".proj", c, c + 3 * g, 1);
}

inline void add_attention(ModelParams& p, Xoshiro256& rng,
                          const std::string& pfx, int64_t c, int32_t units) {
  for (int32_t u = 0; u < units; ++u) {
    add_conv(p, rng, pfx + ".t" + std::to_string(u) + ".c0", c, c, 3);
    add_conv(p, rng, pfx + ".t" + std::to_string(u) + ".c1", c, c, 3);
    add_conv(p, rng, pfx + ".m" + std::to_string(u) + ".c0", c, c, 3);
    add_conv(p, rng, pfx + ".m" + std::to_string(u) + ".c1", c, c, 3);
  }
  // Trunk ends in a plain projection so a zero-weight module is the identity.
  add_conv(p, rng, pfx + ".tproj", c, c, 3);
  add_conv(p, rng, pfx + ".mproj", c, c, 1);
}

inline double softplus_inverse(double y) { return std::log(std::expm1(y)); }

inline void add_factorized_prior(ModelParams& p, Xoshiro256& rng,
                                 const std::string& pfx, int64_t channels) {
  // Stage dims 1 -> 3 -> 3 -> 3 -> 1; matrices are stored pre-softplus so the
  // effective weights stay positive (monotone cumulative by construction).
  const int dims[kPriorStages + 1] = {1, kPriorHidden, kPriorHidden,
                                      kPriorHidden, 1};
  const double scale =
      std::pow(kPriorInitScale, 1.0 / static_cast<double>(kPriorStages));
  for (int64_t ch = 0; ch < channels; ++ch) {
    const std::string base = pfx + ".ch" + std::to_string(ch);
    for (int k = 0; k < kPriorStages; ++k) {
      const int in_d = dims[k], out_d = dims[k + 1];
      const float hinit = static_cast<float>(
          softplus_inverse(1.0 / (scale * static_cast<double>(out_d))));
      p.tensors[base + ".H" + std::to_string(k)] =
          Tensor::full({out_d, in_d}, hinit);
      Tensor b({out_d});
      for (float& v : b.data())
        v = static_cast<float>(rng.uniform_range(-0.5, 0.5));
      p.tensors[base + ".b" + std::to_string(k)] = std::move(b);
      if (k + 1 < kPriorStages)
        p.tensors[base + ".a" + std::to_string(k)] = Tensor({out_d});
    }
  }
}

}  // namespace detail

// Fresh model with fan-in-scaled uniform convolutions, orthogonal 1x1
// mixing matrices and the standard factorized-prior initialization. The
// sigma half of the hyper-synthesis output bias starts at 1 so predicted
// scales begin well above the lower bound.
inline ModelParams init_model_params(const ArchConfig& arch, uint64_t seed) {
  arch.validate();
  Xoshiro256 rng(seed);
  ModelParams p;
  p.arch = arch;

  const int32_t N = arch.latent_channels();
  const int32_t Nz = arch.nz_channels();
  const int32_t M = N;  // hyper-transform hidden width

  detail::add_enhancement(p, rng, "enc_fe", arch.image_channels);
  detail::add_enhancement(p, rng, "dec_fe", arch.image_channels);

  int32_t ch = arch.image_channels;
  for (int32_t b = 0; b < arch.blocks; ++b) {
    const std::string blk = "blk" + std::to_string(b);
    ch *= 4;
    p.tensors[blk + ".perm.w"] = orthogonal_matrix(rng, ch);
    const int32_t half = ch / 2;
    const int32_t k = arch.kernels[static_cast<size_t>(b)];
    for (int32_t cp = 0; cp < arch.couplings_per_block; ++cp) {
      const std::string base = blk + ".cp" + std::to_string(cp);
      detail::add_subnet(p, rng, base + ".g1", half, arch.subnet_hidden,
                         ch - half, k);
      detail::add_subnet(p, rng, base + ".h1", half, arch.subnet_hidden,
                         ch - half, k);
      detail::add_subnet(p, rng, base + ".g2", ch - half, arch.subnet_hidden,
                         half, k);
      detail::add_subnet(p, rng, base + ".h2", ch - half, arch.subnet_hidden,
                         half, k);
    }
  }

  detail::add_attention(p, rng, "enc_attn", N, arch.attn_units);
  detail::add_attention(p, rng, "dec_attn", N, arch.attn_units);

  detail::add_conv(p, rng, "ha.c0", M, N, 3);
  detail::add_conv(p, rng, "ha.c1", M, M, 5);
  detail::add_conv(p, rng, "ha.c2", Nz, M, 5);

  detail::add_conv(p, rng, "hs.c0", M, Nz, 5);
  detail::add_conv(p, rng, "hs.c1", M, M, 5);
  detail::add_conv(p, rng, "hs.c2", 2 * N, M, 3);
  // Bias the predicted-scale half of the output to 1.
  {
    Tensor& b = p.at("hs.c2.b");
    for (int32_t i = N; i < 2 * N; ++i) b[i] = 1.0f;
  }

  detail::add_conv(p, rng, "ctx.mask", 2 * N, N, 5);
  detail::add_conv(p, rng, "ctx.f0", 4 * N, 4 * N, 1);
  detail::add_conv(p, rng, "ctx.f1", 3 * N, 4 * N, 1);
  detail::add_conv(p, rng, "ctx.f2", 2 * N, 3 * N, 1, 0.0f);
  {
    Tensor& b = p.at("ctx.f2.b");
    for (int32_t i = N; i < 2 * N; ++i) b[i] = 1.0f;
  }

  detail::add_factorized_prior(p, rng, "fp", Nz);
  return p;
}

// ---------------------------------------------------------------------------
// Tape binding
// ---------------------------------------------------------------------------

// Binds named parameters as leaf nodes on a tape, lazily and at most once, so
// the same functional layer code serves both inference and training.
class BoundParams {
 public:
  BoundParams(Tape& tape, const ModelParams& params)
      : tape_(&tape), params_(&params) {}

  Var operator()(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    Var v = tape_->leaf(params_->at(name));
    bound_.emplace(name, v);
    return v;
  }

  const ArchConfig& arch() const { return params_->arch; }
  const ModelParams& model() const { return *params_; }
  Tape& tape() { return *tape_; }

  // Names actually referenced by the executed graph.
  const std::map<std::string, Var>& bound() const { return bound_; }

 private:
  Tape* tape_;
  const ModelParams* params_;
  std::map<std::string, Var> bound_;
};

// ---------------------------------------------------------------------------
// Content hash (FNV-1a over architecture + tensor payloads)
// ---------------------------------------------------------------------------

inline uint64_t fnv1a64(const uint8_t* data, size_t n,
                        uint64_t h = 0xcbf29ce484222325ull) {
  for (size_t i = 0; i < n; ++i) {
    h ^= data[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t content_hash(const ModelParams& p) {
  uint64_t h = 0xcbf29ce484222325ull;
  auto mix_i64 = [&h](int64_t v) {
    uint8_t b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<uint8_t>(v >> (8 * i));
    h = fnv1a64(b, 8, h);
  };
  mix_i64(p.arch.blocks);
  for (int32_t k : p.arch.kernels) mix_i64(k);
  mix_i64(p.arch.couplings_per_block);
  mix_i64(p.arch.subnet_hidden);
  mix_i64(p.arch.alpha);
  mix_i64(p.arch.nz);
  mix_i64(p.arch.attn_units);
  mix_i64(p.arch.image_channels);
  for (const auto& [name, t] : p.tensors) {
    h = fnv1a64(reinterpret_cast<const uint8_t*>(name.data()), name.size(), h);
    for (int64_t d : t.shape()) mix_i64(d);
    h = fnv1a64(reinterpret_cast<const uint8_t*>(t.data().data()),
                t.data().size() * sizeof(float), h);
  }
  return h;
}

}  // namespace invcodec
