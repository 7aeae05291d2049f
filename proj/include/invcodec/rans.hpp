#pragma once

// Range-variant ANS with a 64-bit state and 32-bit renormalization words.
// Symbols are pushed in forward order and encoded in reverse at finish(), so
// the decoder streams forward — the usual ANS stack discipline.
//
// Payload layout: 8 bytes of final state (little endian), then the
// renormalization words (little-endian u32) in decoder consumption order.
// An empty sequence is exactly the 8-byte state flush.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "invcodec/entropy.hpp"

namespace invcodec {

struct corrupt_stream_error : std::runtime_error {
  explicit corrupt_stream_error(const std::string& msg)
      : std::runtime_error(msg) {}
};

constexpr uint64_t kRansLowerBound = 1ull << 31;

class RansEncoder {
 public:
  // Queue one symbol with its table. The table sequence must be replayed
  // identically by the decoder.
  void put(const CdfTable& table, int32_t symbol) {
    if (!table.contains(symbol))
      throw std::invalid_argument(
          "rans: symbol " + std::to_string(symbol) + " at position " +
          std::to_string(syms_.size()) + " outside table support [" +
          std::to_string(table.offset) + ", " +
          std::to_string(table.offset + table.size() - 1) + "]");
    const size_t s = static_cast<size_t>(symbol - table.offset);
    syms_.push_back(Sym{table.cum[s], table.freq[s],
                        static_cast<uint32_t>(table.precision)});
  }

  size_t symbol_count() const { return syms_.size(); }

  // Encode everything queued so far and return the payload bytes.
  std::vector<uint8_t> finish() {
    uint64_t state = kRansLowerBound;
    std::vector<uint32_t> words;
    for (size_t i = syms_.size(); i-- > 0;) {
      const Sym& s = syms_[i];
      // Single renormalization suffices: state < 2^63 and freq <= 2^16.
      const uint64_t x_max =
          ((kRansLowerBound >> s.precision) << 32) * s.freq;
      if (state >= x_max) {
        words.push_back(static_cast<uint32_t>(state));
        state >>= 32;
      }
      state = ((state / s.freq) << s.precision) + (state % s.freq) + s.start;
    }
    std::vector<uint8_t> out;
    out.reserve(8 + words.size() * 4);
    for (int i = 0; i < 8; ++i)
      out.push_back(static_cast<uint8_t>(state >> (8 * i)));
    // Words were produced in reverse symbol order; the decoder needs them in
    // forward order, i.e. reversed.
    for (size_t i = words.size(); i-- > 0;) {
      const uint32_t w = words[i];
      out.push_back(static_cast<uint8_t>(w));
      out.push_back(static_cast<uint8_t>(w >> 8));
      out.push_back(static_cast<uint8_t>(w >> 16));
      out.push_back(static_cast<uint8_t>(w >> 24));
    }
    syms_.clear();
    return out;
  }

 private:
  struct Sym {
    uint32_t start, freq, precision;
  };
  std::vector<Sym> syms_;
};

class RansDecoder {
 public:
  explicit RansDecoder(const std::vector<uint8_t>& data)
      : data_(data.data()), size_(data.size()) {
    if (size_ < 8) throw corrupt_stream_error("rans: payload shorter than flush");
    state_ = 0;
    for (int i = 7; i >= 0; --i) state_ = (state_ << 8) | data_[i];
    pos_ = 8;
    if (state_ < kRansLowerBound)
      throw corrupt_stream_error("rans: initial state below lower bound");
  }

  // Decode one symbol; the table may be built just-in-time from previously
  // decoded symbols (context-model interleaving).
  int32_t get(const CdfTable& table) {
    const uint32_t mask = (1u << table.precision) - 1;
    const uint32_t cum = static_cast<uint32_t>(state_) & mask;
    // Find s with cum[s] <= cum < cum[s+1].
    size_t lo = 0, hi = table.freq.size() - 1;
    while (lo < hi) {
      const size_t mid = (lo + hi + 1) / 2;
      if (table.cum[mid] <= cum)
        lo = mid;
      else
        hi = mid - 1;
    }
    const uint32_t start = table.cum[lo];
    const uint32_t freq = table.freq[lo];
    state_ = freq * (state_ >> table.precision) + cum - start;
    if (state_ < kRansLowerBound) {
      if (pos_ + 4 > size_)
        throw corrupt_stream_error("rans: truncated payload at byte " +
                                   std::to_string(pos_));
      uint32_t w = static_cast<uint32_t>(data_[pos_]) |
                   (static_cast<uint32_t>(data_[pos_ + 1]) << 8) |
                   (static_cast<uint32_t>(data_[pos_ + 2]) << 16) |
                   (static_cast<uint32_t>(data_[pos_ + 3]) << 24);
      pos_ += 4;
      state_ = (state_ << 32) | w;
      if (state_ < kRansLowerBound)
        throw corrupt_stream_error("rans: state underflow after renorm");
    }
    return static_cast<int32_t>(lo) + table.offset;
  }

  // Validate the end-of-stream invariants after the expected symbol count.
  void finish() const {
    if (state_ != kRansLowerBound)
      throw corrupt_stream_error("rans: final state mismatch");
    if (pos_ != size_)
      throw corrupt_stream_error("rans: " + std::to_string(size_ - pos_) +
                                 " trailing bytes");
  }

 private:
  const uint8_t* data_;
  size_t size_, pos_;
  uint64_t state_;
};

// Convenience one-shot helpers for uniform or per-symbol table sequences.
inline std::vector<uint8_t> rans_encode(const std::vector<int32_t>& symbols,
                                        const std::vector<const CdfTable*>& tables) {
  require(symbols.size() == tables.size(),
          "rans_encode: one table per symbol required");
  RansEncoder enc;
  for (size_t i = 0; i < symbols.size(); ++i) enc.put(*tables[i], symbols[i]);
  return enc.finish();
}

inline std::vector<int32_t> rans_decode(const std::vector<uint8_t>& data,
                                        const std::vector<const CdfTable*>& tables) {
  RansDecoder dec(data);
  std::vector<int32_t> out(tables.size());
  for (size_t i = 0; i < tables.size(); ++i) out[i] = dec.get(*tables[i]);
  dec.finish();
  return out;
}

}  // namespace invcodec
