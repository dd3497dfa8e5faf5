#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

namespace plunet {

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

template <class T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>,
                "tensors hold float or double");
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

const char* dtype_name(DType d);

// Extents of a rank-4 (N, C, H, W) tensor.
struct Shape {
  std::int64_t n = 1;
  std::int64_t c = 1;
  std::int64_t h = 1;
  std::int64_t w = 1;

  std::int64_t numel() const { return n * c * h * w; }
  std::int64_t plane() const { return h * w; }
  bool valid() const { return n >= 1 && c >= 1 && h >= 1 && w >= 1; }
  std::string str() const;

  friend bool operator==(const Shape&, const Shape&) = default;
};

std::ostream& operator<<(std::ostream& os, const Shape& s);

// Parses "N,C,H,W".
Shape parse_shape(const std::string& text);

// Dense row-major (W fastest) rank-4 tensor. A default-constructed tensor is
// undefined (no storage) and is used for "no gradient yet".
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> data);

  static Tensor zeros(Shape shape) { return Tensor(shape); }
  static Tensor full(Shape shape, T value) { return Tensor(shape, value); }
  static Tensor scalar(T value) { return Tensor(Shape{1, 1, 1, 1}, value); }

  bool defined() const { return !data_.empty(); }
  const Shape& shape() const { return shape_; }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
  static constexpr DType dtype() { return dtype_of<T>(); }

  T* ptr() { return data_.data(); }
  const T* ptr() const { return data_.data(); }
  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  const std::vector<T>& vec() const { return data_; }

  std::int64_t index(std::int64_t n, std::int64_t c, std::int64_t h,
                     std::int64_t w) const {
    return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }
  T& at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) {
    return data_[static_cast<std::size_t>(index(n, c, h, w))];
  }
  T at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
    return data_[static_cast<std::size_t>(index(n, c, h, w))];
  }
  T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  T operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  // Pointer to the start of plane (n, c).
  T* plane(std::int64_t n, std::int64_t c) { return ptr() + (n * shape_.c + c) * shape_.plane(); }
  const T* plane(std::int64_t n, std::int64_t c) const {
    return ptr() + (n * shape_.c + c) * shape_.plane();
  }

  void fill(T value);
  Tensor& operator+=(const Tensor& other);
  bool all_finite() const;

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  // Copies samples [begin, begin+count) along N.
  Tensor slice_batch(std::int64_t begin, std::int64_t count) const;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_{0, 0, 0, 0};
  std::vector<T> data_;
};

// Stacks single-sample tensors along N. All inputs must share (C, H, W).
template <class T>
Tensor<T> stack_batch(std::span<const Tensor<T>> items);

// Binary "PLUT" encoding: magic, u32 version, u8 dtype, 4 x u32 dims,
// little-endian elements.
inline constexpr std::uint32_t kTensorFormatVersion = 1;

template <class T>
void write_tensor(std::ostream& os, const Tensor<T>& t);

template <class T>
Tensor<T> read_tensor(std::istream& is);

// Reads the dtype byte of the next encoded tensor without consuming it.
DType peek_tensor_dtype(std::istream& is);

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace plunet
