#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <numeric>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace runet {

// Structured error families used across the library.
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParamError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dense row-major N-d array. `T` is the storage scalar; reductions
/// accumulate in double regardless of T.
template <class T>
class TensorT {
 public:
  TensorT() = default;

  explicit TensorT(std::vector<std::size_t> shape)
      : shape_(std::move(shape)), data_(checked_numel(shape_), T(0)) {}

  TensorT(std::vector<std::size_t> shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (checked_numel(shape_) != data_.size())
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape product " +
                       std::to_string(checked_numel(shape_)));
  }

  static TensorT full(std::vector<std::size_t> shape, T v) {
    TensorT t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }

  static TensorT scalar(T v) { return TensorT({1}, {v}); }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  bool same_shape(const TensorT& o) const { return shape_ == o.shape_; }

  /// Total as double; the one reduction everyone needs.
  double sum() const {
    double acc = 0.0;
    for (const T v : data_) acc += static_cast<double>(v);
    return acc;
  }

  bool all_finite() const {
    for (const T v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool operator==(const TensorT& o) const {
    return shape_ == o.shape_ && data_ == o.data_;
  }

 private:
  static std::size_t checked_numel(const std::vector<std::size_t>& shape) {
    if (shape.empty()) throw ShapeError("tensor rank must be >= 1");
    std::size_t n = 1;
    for (std::size_t d : shape) {
      if (d == 0) throw ShapeError("tensor dimensions must be positive");
      n *= d;
    }
    return n;
  }

  std::vector<std::size_t> shape_;
  std::vector<T> data_;
};

using Tensor = TensorT<float>;

inline void expect_same_shape(const char* what,
                              const std::vector<std::size_t>& a,
                              const std::vector<std::size_t>& b) {
  if (a == b) return;
  auto fmt = [](const std::vector<std::size_t>& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i)
      out += (i ? "," : "") + std::to_string(s[i]);
    return out + "]";
  };
  if (a.size() != b.size())
    throw ShapeError(std::string(what) + ": rank mismatch " + fmt(a) + " vs " +
                     fmt(b));
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] != b[i])
      throw ShapeError(std::string(what) + ": axis " + std::to_string(i) +
                       " mismatch " + fmt(a) + " vs " + fmt(b));
}

// --- binary serialization -------------------------------------------------
// Blob layout: rank (u64 LE), dims (u64 LE each), raw float32 payload.
static_assert(std::endian::native == std::endian::little,
              "tensor blobs are little-endian");

inline void write_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

inline std::uint64_t read_u64(std::istream& is) {
  std::uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!is) throw IoError("truncated stream while reading u64");
  return v;
}

inline void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

inline std::uint32_t read_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!is) throw IoError("truncated stream while reading u32");
  return v;
}

inline void write_f32(std::ostream& os, float v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

inline float read_f32(std::istream& is) {
  float v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!is) throw IoError("truncated stream while reading f32");
  return v;
}

inline void write_f64(std::ostream& os, double v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

inline double read_f64(std::istream& is) {
  double v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!is) throw IoError("truncated stream while reading f64");
  return v;
}

inline void write_tensor(std::ostream& os, const Tensor& t) {
  write_u64(os, t.rank());
  for (std::size_t i = 0; i < t.rank(); ++i) write_u64(os, t.dim(i));
  os.write(reinterpret_cast<const char*>(t.data()),
           static_cast<std::streamsize>(t.numel() * sizeof(float)));
}

inline Tensor read_tensor(std::istream& is) {
  const std::uint64_t rank = read_u64(is);
  if (rank == 0 || rank > 16) throw IoError("tensor blob has bad rank");
  std::vector<std::size_t> shape(rank);
  for (auto& d : shape) d = static_cast<std::size_t>(read_u64(is));
  Tensor t(shape);
  is.read(reinterpret_cast<char*>(t.data()),
          static_cast<std::streamsize>(t.numel() * sizeof(float)));
  if (!is) throw IoError("truncated tensor blob payload");
  return t;
}

}  // namespace runet
