#pragma once

// Invertible analysis/synthesis transform: affine coupling layers,
// downscaling layers (pixel shuffle + invertible 1x1 convolution), the block
// stack, and the residual dense-block feature enhancement module.

#include <string>

#include "invcodec/autodiff.hpp"
#include "invcodec/params.hpp"

namespace invcodec {

// Centered sigmoid used for the coupling scale: s_max * (sigmoid(x) - 0.5).
// Keeps the affine exponent in (-s_max/2, s_max/2) so exp never overflows and
// zero subnets yield an identity layer.
inline Var center_sigmoid(Var x) {
  return scale(add_scalar(sigmoid(x), -0.5f), kCouplingClamp);
}

// Conv-LeakyReLU-Conv-LeakyReLU-Conv bottleneck; outer kernels k, middle 1x1.
inline Var subnet(BoundParams& P, const std::string& pfx, Var x, int k) {
  Var h = conv2d(x, P(pfx + ".c0.w"), P(pfx + ".c0.b"), 1, (k - 1) / 2);
  h = leaky_relu(h, kLeakySlope);
  h = conv2d(h, P(pfx + ".c1.w"), P(pfx + ".c1.b"), 1, 0);
  h = leaky_relu(h, kLeakySlope);
  return conv2d(h, P(pfx + ".c2.w"), P(pfx + ".c2.b"), 1, (k - 1) / 2);
}

// Forward coupling: the first half is updated from the second, then the
// second half is updated from the ALREADY-transformed first half.
inline Var coupling_forward(BoundParams& P, const std::string& pfx, Var u,
                            int k) {
  const Tensor& x = P.tape().val(u);
  require(x.rank() == 3, "coupling: rank-3 input expected");
  const int64_t C = x.dim(0);
  require(C >= 2 && C % 2 == 0, "coupling: even channel count expected");
  const int64_t c = C / 2;
  Var u1 = slice_channels(u, 0, c);
  Var u2 = slice_channels(u, c, C);
  Var y1 = add(mul(u1, vexp(center_sigmoid(subnet(P, pfx + ".g2", u2, k)))),
               subnet(P, pfx + ".h2", u2, k));
  Var y2 = add(mul(u2, vexp(center_sigmoid(subnet(P, pfx + ".g1", y1, k)))),
               subnet(P, pfx + ".h1", y1, k));
  return concat_channels(y1, y2);
}

// Mirror of coupling_forward; recovers the second half first.
inline Var coupling_inverse(BoundParams& P, const std::string& pfx, Var v,
                            int k) {
  const Tensor& x = P.tape().val(v);
  require(x.rank() == 3, "coupling: rank-3 input expected");
  const int64_t C = x.dim(0);
  require(C >= 2 && C % 2 == 0, "coupling: even channel count expected");
  const int64_t c = C / 2;
  Var y1 = slice_channels(v, 0, c);
  Var y2 = slice_channels(v, c, C);
  Var u2 = mul(sub(y2, subnet(P, pfx + ".h1", y1, k)),
               vexp(scale(center_sigmoid(subnet(P, pfx + ".g1", y1, k)), -1.0f)));
  Var u1 = mul(sub(y1, subnet(P, pfx + ".h2", u2, k)),
               vexp(scale(center_sigmoid(subnet(P, pfx + ".g2", u2, k)), -1.0f)));
  return concat_channels(u1, u2);
}

// Per-pixel channel mixing by a square matrix (as a 1x1 convolution).
inline Var conv1x1_apply(Var x, Var matrix) {
  Tape& t = detail::tape_of(x);
  const int64_t n = t.val(matrix).dim(0);
  require(t.val(x).dim(0) == n,
          "conv1x1: channel count does not match matrix size");
  return conv2d(x, reshape(matrix, {n, n, 1, 1}), 1, 0);
}

inline Var downscale_forward(BoundParams& P, const std::string& pfx, Var u) {
  Var s = pixel_shuffle_down(u);
  return conv1x1_apply(s, P(pfx + ".w"));
}

inline Var downscale_inverse(BoundParams& P, const std::string& pfx, Var v) {
  Var s = conv1x1_apply(v, matrix_inverse(P(pfx + ".w")));
  return pixel_shuffle_up(s);
}

// Full stack: each block is one downscaling layer followed by the coupling
// layers; inverse applies everything mirrored.
inline Var inn_forward(BoundParams& P, Var u) {
  const ArchConfig& a = P.arch();
  const Tensor& x = P.tape().val(u);
  require(x.rank() == 3 && x.dim(0) == a.image_channels,
          "inn_forward: expected " + std::to_string(a.image_channels) +
              "-channel input, got " + x.shape_str());
  const int64_t m = a.pad_multiple();
  require(x.dim(1) % m == 0 && x.dim(2) % m == 0,
          "inn_forward: spatial dims must be divisible by " +
              std::to_string(m) + ", got " + x.shape_str());
  Var h = u;
  for (int32_t b = 0; b < a.blocks; ++b) {
    const std::string blk = "blk" + std::to_string(b);
    h = downscale_forward(P, blk + ".perm", h);
    for (int32_t cp = 0; cp < a.couplings_per_block; ++cp)
      h = coupling_forward(P, blk + ".cp" + std::to_string(cp), h,
                           a.kernels[static_cast<size_t>(b)]);
  }
  return h;
}

inline Var inn_inverse(BoundParams& P, Var v) {
  const ArchConfig& a = P.arch();
  const Tensor& x = P.tape().val(v);
  require(x.rank() == 3 && x.dim(0) == a.d(),
          "inn_inverse: expected " + std::to_string(a.d()) +
              "-channel input, got " + x.shape_str());
  Var h = v;
  for (int32_t b = a.blocks - 1; b >= 0; --b) {
    const std::string blk = "blk" + std::to_string(b);
    for (int32_t cp = a.couplings_per_block - 1; cp >= 0; --cp)
      h = coupling_inverse(P, blk + ".cp" + std::to_string(cp), h,
                           a.kernels[static_cast<size_t>(b)]);
    h = downscale_inverse(P, blk + ".perm", h);
  }
  return h;
}

// Residual dense block: three cascaded convolutions (1, 3, 1) with
// concatenating connections, a 1x1 projection back to the input channel
// count, and a residual connection. Zero weights make it the identity.
inline Var feature_enhance(BoundParams& P, const std::string& pfx, Var x) {
  Var d0 = leaky_relu(conv2d(x, P(pfx + ".d0.w"), P(pfx + ".d0.b"), 1, 0),
                      kLeakySlope);
  Var cat1 = concat_channels(x, d0);
  Var d1 = leaky_relu(conv2d(cat1, P(pfx + ".d1.w"), P(pfx + ".d1.b"), 1, 1),
                      kLeakySlope);
  Var cat2 = concat_channels(cat1, d1);
  Var d2 = leaky_relu(conv2d(cat2, P(pfx + ".d2.w"), P(pfx + ".d2.b"), 1, 0),
                      kLeakySlope);
  Var cat3 = concat_channels(cat2, d2);
  Var proj = conv2d(cat3, P(pfx + ".proj.w"), P(pfx + ".proj.b"), 1, 0);
  return add(x, proj);
}

}  // namespace invcodec
