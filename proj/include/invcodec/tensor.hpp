#pragma once

// Dense float32 tensor, row-major. Images and latents use (channels, height,
// width) layout; convolution weights use (out, in, kh, kw).

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace invcodec {

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int64_t> shape) : shape_(std::move(shape)) {
    int64_t n = 1;
    for (int64_t d : shape_) {
      require(d > 0, "tensor extents must be positive");
      n *= d;
    }
    data_.assign(static_cast<size_t>(n), 0.0f);
  }

  Tensor(std::vector<int64_t> shape, std::vector<float> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    int64_t n = 1;
    for (int64_t d : shape_) {
      require(d > 0, "tensor extents must be positive");
      n *= d;
    }
    require(n == static_cast<int64_t>(data_.size()),
            "tensor data length does not match shape");
  }

  static Tensor full(std::vector<int64_t> shape, float v) {
    Tensor t(std::move(shape));
    t.fill(v);
    return t;
  }

  static Tensor scalar(float v) { return Tensor({1}, {v}); }

  const std::vector<int64_t>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int64_t dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  std::vector<float>& data() { return data_; }
  const std::vector<float>& data() const { return data_; }
  float& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  float operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  // (c, y, x) accessors for rank-3 tensors.
  float& at(int64_t c, int64_t y, int64_t x) {
    return data_[static_cast<size_t>((c * shape_[1] + y) * shape_[2] + x)];
  }
  float at(int64_t c, int64_t y, int64_t x) const {
    return data_[static_cast<size_t>((c * shape_[1] + y) * shape_[2] + x)];
  }

  // (o, c, ky, kx) accessors for rank-4 tensors.
  float& at4(int64_t o, int64_t c, int64_t ky, int64_t kx) {
    return data_[static_cast<size_t>(
        ((o * shape_[1] + c) * shape_[2] + ky) * shape_[3] + kx)];
  }
  float at4(int64_t o, int64_t c, int64_t ky, int64_t kx) const {
    return data_[static_cast<size_t>(
        ((o * shape_[1] + c) * shape_[2] + ky) * shape_[3] + kx)];
  }

  void fill(float v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  bool all_finite() const {
    for (float v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  std::string shape_str() const {
    std::ostringstream os;
    for (size_t i = 0; i < shape_.size(); ++i) {
      if (i) os << "x";
      os << shape_[i];
    }
    if (shape_.empty()) os << "scalar";
    return os.str();
  }

 private:
  std::vector<int64_t> shape_;
  std::vector<float> data_;
};

inline void require_same_shape(const Tensor& a, const Tensor& b,
                               const std::string& op) {
  if (!a.same_shape(b))
    throw std::invalid_argument(op + ": shape mismatch " + a.shape_str() +
                                " vs " + b.shape_str());
}

// Round half away from zero; the quantizer used everywhere rounding occurs.
inline Tensor round_half_away(const Tensor& t) {
  Tensor out = t;
  for (float& v : out.data()) v = std::round(v);
  return out;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  return m;
}

inline bool bit_equal(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) return false;
  for (int64_t i = 0; i < a.numel(); ++i) {
    // Compare representations so that 0.0f vs -0.0f count as different bits.
    float x = a[i], y = b[i];
    uint32_t bx, by;
    static_assert(sizeof(float) == sizeof(uint32_t));
    __builtin_memcpy(&bx, &x, 4);
    __builtin_memcpy(&by, &y, 4);
    if (bx != by) return false;
  }
  return true;
}

}  // namespace invcodec
