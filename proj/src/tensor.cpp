#include "plunet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "plunet/binary_io.hpp"

namespace plunet {

const char* dtype_name(DType d) { return d == DType::f32 ? "f32" : "f64"; }

std::string Shape::str() const {
  std::ostringstream os;
  os << '(' << n << ',' << c << ',' << h << ',' << w << ')';
  return os.str();
}

std::ostream& operator<<(std::ostream& os, const Shape& s) { return os << s.str(); }

Shape parse_shape(const std::string& text) {
  std::int64_t dims[4];
  std::istringstream in(text);
  for (int i = 0; i < 4; ++i) {
    if (!(in >> dims[i])) throw std::invalid_argument("expected N,C,H,W but got '" + text + "'");
    if (i < 3) {
      char comma = 0;
      if (!(in >> comma) || comma != ',') {
        throw std::invalid_argument("expected N,C,H,W but got '" + text + "'");
      }
    }
  }
  std::string rest;
  if (in >> rest) throw std::invalid_argument("trailing characters in dims '" + text + "'");
  Shape s{dims[0], dims[1], dims[2], dims[3]};
  if (!s.valid()) throw std::invalid_argument("all extents must be >= 1, got " + s.str());
  return s;
}

template <class T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(shape) {
  if (!shape.valid()) throw std::invalid_argument("tensor extents must be >= 1, got " + shape.str());
  data_.assign(static_cast<std::size_t>(shape.numel()), fill);
}

template <class T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
  if (!shape.valid()) throw std::invalid_argument("tensor extents must be >= 1, got " + shape.str());
  if (static_cast<std::int64_t>(data_.size()) != shape.numel()) {
    throw std::invalid_argument("data size " + std::to_string(data_.size()) +
                                " does not match shape " + shape.str());
  }
}

template <class T>
void Tensor<T>::fill(T value) {
  std::fill(data_.begin(), data_.end(), value);
}

template <class T>
Tensor<T>& Tensor<T>::operator+=(const Tensor& other) {
  if (other.shape_ != shape_) {
    throw std::invalid_argument("shape mismatch in +=: " + shape_.str() + " vs " + other.shape_.str());
  }
  const T* src = other.ptr();
  T* dst = ptr();
  const std::size_t n = data_.size();
  for (std::size_t i = 0; i < n; ++i) dst[i] += src[i];
  return *this;
}

template <class T>
bool Tensor<T>::all_finite() const {
  for (T v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

template <class T>
Tensor<T> Tensor<T>::slice_batch(std::int64_t begin, std::int64_t count) const {
  if (begin < 0 || count < 1 || begin + count > shape_.n) {
    throw std::out_of_range("batch slice out of range");
  }
  const std::int64_t per = shape_.c * shape_.h * shape_.w;
  std::vector<T> out(data_.begin() + begin * per, data_.begin() + (begin + count) * per);
  return Tensor(Shape{count, shape_.c, shape_.h, shape_.w}, std::move(out));
}

template <class T>
Tensor<T> stack_batch(std::span<const Tensor<T>> items) {
  if (items.empty()) throw std::invalid_argument("cannot stack an empty batch");
  const Shape first = items.front().shape();
  std::vector<T> out;
  out.reserve(static_cast<std::size_t>(first.numel() * static_cast<std::int64_t>(items.size())));
  std::int64_t n = 0;
  for (const auto& t : items) {
    const Shape s = t.shape();
    if (s.c != first.c || s.h != first.h || s.w != first.w) {
      throw std::invalid_argument("cannot stack " + s.str() + " with " + first.str());
    }
    out.insert(out.end(), t.vec().begin(), t.vec().end());
    n += s.n;
  }
  return Tensor<T>(Shape{n, first.c, first.h, first.w}, std::move(out));
}

template <class T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  if (!t.defined()) throw std::invalid_argument("cannot encode an undefined tensor");
  os.write("PLUT", 4);
  io::write_le<std::uint32_t>(os, kTensorFormatVersion);
  io::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(dtype_of<T>()));
  const Shape& s = t.shape();
  for (std::int64_t d : {s.n, s.c, s.h, s.w}) io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(t.ptr()), static_cast<std::streamsize>(t.numel() * sizeof(T)));
  } else {
    for (T v : t.data()) io::write_le<T>(os, v);
  }
  if (!os) throw std::runtime_error("failed to write tensor");
}

DType peek_tensor_dtype(std::istream& is) {
  const auto pos = is.tellg();
  io::expect_magic(is, "PLUT", "PLUT tensor");
  const auto version = io::read_le<std::uint32_t>(is);
  if (version != kTensorFormatVersion) {
    throw std::runtime_error("unsupported tensor format version " + std::to_string(version));
  }
  const auto dtype = io::read_le<std::uint8_t>(is);
  is.seekg(pos);
  if (dtype > 1) throw std::runtime_error("unknown dtype code " + std::to_string(dtype));
  return static_cast<DType>(dtype);
}

template <class T>
Tensor<T> read_tensor(std::istream& is) {
  io::expect_magic(is, "PLUT", "PLUT tensor");
  const auto version = io::read_le<std::uint32_t>(is);
  if (version != kTensorFormatVersion) {
    throw std::runtime_error("unsupported tensor format version " + std::to_string(version));
  }
  const auto dtype = io::read_le<std::uint8_t>(is);
  if (dtype != static_cast<std::uint8_t>(dtype_of<T>())) {
    throw std::runtime_error(std::string("dtype mismatch: stored code ") + std::to_string(dtype) +
                             ", expected " + dtype_name(dtype_of<T>()));
  }
  std::int64_t dims[4];
  for (auto& d : dims) d = io::read_le<std::uint32_t>(is);
  Shape s{dims[0], dims[1], dims[2], dims[3]};
  if (!s.valid()) throw std::runtime_error("stored tensor has a zero extent");
  std::vector<T> data(static_cast<std::size_t>(s.numel()));
  if constexpr (std::endian::native == std::endian::little) {
    is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(T)));
    if (!is) throw std::runtime_error("truncated tensor payload");
  } else {
    for (auto& v : data) v = io::read_le<T>(is);
  }
  return Tensor<T>(s, std::move(data));
}

template class Tensor<float>;
template class Tensor<double>;
template Tensor<float> stack_batch(std::span<const Tensor<float>>);
template Tensor<double> stack_batch(std::span<const Tensor<double>>);
template void write_tensor(std::ostream&, const Tensor<float>&);
template void write_tensor(std::ostream&, const Tensor<double>&);
template Tensor<float> read_tensor(std::istream&);
template Tensor<double> read_tensor(std::istream&);

}  // namespace plunet
