#pragma once

// Weight file format (.wts). Binary, little endian:
//
//   magic "IVCW" | u8 version | body | u64 content_hash(body)
//
// body:
//   arch: i32 blocks | u8 kernel_count | i32 kernels... | i32 couplings
//       | i32 subnet_hidden | i32 alpha | i32 nz | i32 attn_units
//       | i32 image_channels
//   u32 tensor_count, then per tensor (sorted by name):
//       u16 name_len | name | u8 rank | i64 dims... | f32 raw data
//
// Tensors round-trip bit-exactly; the trailing hash also serves as the model
// identity carried in bitstream headers.

#include <string>

#include "invcodec/bytes.hpp"
#include "invcodec/params.hpp"

namespace invcodec {

constexpr char kWeightsMagic[4] = {'I', 'V', 'C', 'W'};
constexpr uint8_t kWeightsVersion = 1;

inline std::vector<uint8_t> serialize_weights(const ModelParams& p) {
  ByteWriter body;
  body.i32(p.arch.blocks);
  body.u8(static_cast<uint8_t>(p.arch.kernels.size()));
  for (int32_t k : p.arch.kernels) body.i32(k);
  body.i32(p.arch.couplings_per_block);
  body.i32(p.arch.subnet_hidden);
  body.i32(p.arch.alpha);
  body.i32(p.arch.nz);
  body.i32(p.arch.attn_units);
  body.i32(p.arch.image_channels);
  body.u32(static_cast<uint32_t>(p.tensors.size()));
  for (const auto& [name, t] : p.tensors) {
    body.u16(static_cast<uint16_t>(name.size()));
    body.str(name);
    body.u8(static_cast<uint8_t>(t.rank()));
    for (int64_t d : t.shape()) body.i64(d);
    for (float v : t.data()) body.f32(v);
  }

  ByteWriter out;
  out.bytes(reinterpret_cast<const uint8_t*>(kWeightsMagic), 4);
  out.u8(kWeightsVersion);
  const uint64_t hash = fnv1a64(body.data().data(), body.size());
  out.bytes(body.data());
  out.u64(hash);
  return out.take();
}

inline ModelParams parse_weights(const std::vector<uint8_t>& data) {
  ByteReader r(data);
  if (r.str(4) != std::string(kWeightsMagic, 4))
    throw parse_error("weight file: bad magic");
  if (r.u8() != kWeightsVersion)
    throw parse_error("weight file: unsupported version");
  if (data.size() < 4 + 1 + 8) throw parse_error("weight file: too short");
  const size_t body_begin = r.pos();
  const size_t body_size = data.size() - body_begin - 8;

  ModelParams p;
  p.arch.blocks = r.i32();
  const uint8_t nk = r.u8();
  p.arch.kernels.clear();
  for (uint8_t i = 0; i < nk; ++i) p.arch.kernels.push_back(r.i32());
  p.arch.couplings_per_block = r.i32();
  p.arch.subnet_hidden = r.i32();
  p.arch.alpha = r.i32();
  p.arch.nz = r.i32();
  p.arch.attn_units = r.i32();
  p.arch.image_channels = r.i32();
  p.arch.validate();
  const uint32_t count = r.u32();
  for (uint32_t i = 0; i < count; ++i) {
    const uint16_t len = r.u16();
    const std::string name = r.str(len);
    const uint8_t rank = r.u8();
    if (rank > 4) throw parse_error("weight file: tensor rank out of range");
    std::vector<int64_t> shape;
    int64_t numel = 1;
    for (uint8_t d = 0; d < rank; ++d) {
      shape.push_back(r.i64());
      if (shape.back() <= 0) throw parse_error("weight file: bad extent");
      numel *= shape.back();
    }
    std::vector<float> vals(static_cast<size_t>(numel));
    for (auto& v : vals) v = r.f32();
    p.tensors.emplace(name, Tensor(std::move(shape), std::move(vals)));
  }
  if (r.pos() != body_begin + body_size)
    throw parse_error("weight file: trailing data inside body");
  const uint64_t stored = r.u64();
  const uint64_t computed = fnv1a64(data.data() + body_begin, body_size);
  if (stored != computed)
    throw parse_error("weight file: content hash mismatch");
  if (!r.done()) throw parse_error("weight file: trailing bytes");
  return p;
}

inline void save_weights(const std::string& path, const ModelParams& p) {
  write_file_bytes(path, serialize_weights(p));
}

inline ModelParams load_weights(const std::string& path) {
  return parse_weights(read_file_bytes(path));
}

// The model identity used in bitstream headers: hash of the serialized body.
inline uint64_t model_hash(const ModelParams& p) {
  const std::vector<uint8_t> data = serialize_weights(p);
  // magic(4) + version(1) prefix, hash(8) suffix
  return fnv1a64(data.data() + 5, data.size() - 13);
}

}  // namespace invcodec
