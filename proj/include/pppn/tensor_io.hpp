#pragma once

// PPTN1 binary tensor format.
//
// Layout (all integers little-endian):
//   "PPTN" 0x01        magic + version (5 bytes)
//   u8 dtype           0 = f32, 1 = f64
//   u8 rank            1..4
//   u64 dims[rank]     each >= 1
//   payload            row-major scalars, little-endian

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace pppn {

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

inline std::size_t dtype_size(DType t) { return t == DType::f32 ? 4 : 8; }

enum class TensorErrc {
  io,
  bad_magic,
  bad_version,
  unknown_dtype,
  bad_rank,
  zero_dim,
  dim_overflow,
  truncated,
  trailing_bytes,
  invalid_tensor,
};

inline const char* to_string(TensorErrc e) {
  switch (e) {
    case TensorErrc::io: return "io";
    case TensorErrc::bad_magic: return "bad magic";
    case TensorErrc::bad_version: return "unsupported version";
    case TensorErrc::unknown_dtype: return "unknown dtype code";
    case TensorErrc::bad_rank: return "bad rank";
    case TensorErrc::zero_dim: return "zero dimension";
    case TensorErrc::dim_overflow: return "dimension product overflow";
    case TensorErrc::truncated: return "truncated payload";
    case TensorErrc::trailing_bytes: return "trailing bytes after payload";
    case TensorErrc::invalid_tensor: return "invalid tensor";
  }
  return "unknown";
}

class TensorError : public std::runtime_error {
 public:
  TensorError(TensorErrc code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}
  TensorErrc code() const noexcept { return code_; }

 private:
  TensorErrc code_;
};

inline constexpr std::array<char, 4> kTensorMagic{'P', 'P', 'T', 'N'};
inline constexpr std::uint8_t kTensorVersion = 0x01;
inline constexpr std::size_t kMaxRank = 4;

/// Dense row-major tensor of f32 or f64 scalars.
class Tensor {
 public:
  using Storage = std::variant<std::vector<float>, std::vector<double>>;

  Tensor() : shape_{1}, data_(std::vector<float>(1, 0.0f)) {}

  Tensor(std::vector<std::uint64_t> shape, std::vector<float> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    validate();
  }
  Tensor(std::vector<std::uint64_t> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    validate();
  }

  DType dtype() const { return data_.index() == 0 ? DType::f32 : DType::f64; }
  const std::vector<std::uint64_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const {
    return std::visit([](const auto& v) { return v.size(); }, data_);
  }
  const Storage& storage() const { return data_; }

  std::span<const float> f32() const { return std::get<std::vector<float>>(data_); }
  std::span<const double> f64() const { return std::get<std::vector<double>>(data_); }

  double at(std::size_t flat) const {
    return std::visit([flat](const auto& v) { return static_cast<double>(v[flat]); }, data_);
  }

  std::vector<double> to_f64() const {
    return std::visit([](const auto& v) { return std::vector<double>(v.begin(), v.end()); },
                      data_);
  }

  /// Bitwise equality: same dtype, shape, and payload bytes.
  friend bool operator==(const Tensor& a, const Tensor& b) {
    if (a.dtype() != b.dtype() || a.shape_ != b.shape_) return false;
    return std::visit(
        [&](const auto& va) {
          using V = std::decay_t<decltype(va)>;
          const auto& vb = std::get<V>(b.data_);
          return va.size() == vb.size() &&
                 (va.empty() ||
                  std::memcmp(va.data(), vb.data(), va.size() * sizeof(va[0])) == 0);
        },
        a.data_);
  }

 private:
  void validate() const {
    if (shape_.empty() || shape_.size() > kMaxRank)
      throw TensorError(TensorErrc::bad_rank, "rank " + std::to_string(shape_.size()));
    std::uint64_t n = 1;
    for (auto d : shape_) {
      if (d == 0) throw TensorError(TensorErrc::zero_dim, "shape entry is 0");
      if (n > std::numeric_limits<std::uint64_t>::max() / d)
        throw TensorError(TensorErrc::dim_overflow, "shape product");
      n *= d;
    }
    if (n != size())
      throw TensorError(TensorErrc::invalid_tensor, "shape product " + std::to_string(n) +
                                                        " != data size " +
                                                        std::to_string(size()));
  }

  std::vector<std::uint64_t> shape_;
  Storage data_;
};

namespace detail {

template <typename U>
void put_le(std::vector<char>& out, U value) {
  for (std::size_t i = 0; i < sizeof(U); ++i)
    out.push_back(static_cast<char>((value >> (8 * i)) & 0xFF));
}

template <typename U>
U get_le(const unsigned char* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
  return v;
}

template <typename T>
using uint_of = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;

}  // namespace detail

/// Encodes a tensor into its PPTN1 byte image.
inline std::vector<char> encode_tensor(const Tensor& t) {
  std::vector<char> out;
  out.reserve(7 + 8 * t.rank() + t.size() * dtype_size(t.dtype()));
  out.insert(out.end(), kTensorMagic.begin(), kTensorMagic.end());
  out.push_back(static_cast<char>(kTensorVersion));
  out.push_back(static_cast<char>(t.dtype()));
  out.push_back(static_cast<char>(t.rank()));
  for (auto d : t.shape()) detail::put_le<std::uint64_t>(out, d);
  std::visit(
      [&](const auto& v) {
        using T = typename std::decay_t<decltype(v)>::value_type;
        for (T x : v) detail::put_le(out, std::bit_cast<detail::uint_of<T>>(x));
      },
      t.storage());
  return out;
}

inline Tensor decode_tensor(std::span<const char> bytes) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::size_t n = bytes.size();
  if (n < 5 || std::memcmp(p, kTensorMagic.data(), 4) != 0)
    throw TensorError(TensorErrc::bad_magic, "expected \"PPTN\"");
  if (p[4] != kTensorVersion)
    throw TensorError(TensorErrc::bad_version, "version " + std::to_string(p[4]));
  if (n < 7) throw TensorError(TensorErrc::truncated, "header ends early");
  if (p[5] > 1) throw TensorError(TensorErrc::unknown_dtype, "code " + std::to_string(p[5]));
  const auto dtype = static_cast<DType>(p[5]);
  const std::size_t rank = p[6];
  if (rank == 0 || rank > kMaxRank)
    throw TensorError(TensorErrc::bad_rank, "rank " + std::to_string(rank));
  if (n < 7 + 8 * rank) throw TensorError(TensorErrc::truncated, "dims end early");

  std::vector<std::uint64_t> shape(rank);
  std::uint64_t count = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    shape[i] = detail::get_le<std::uint64_t>(p + 7 + 8 * i);
    if (shape[i] == 0) throw TensorError(TensorErrc::zero_dim, "dim " + std::to_string(i));
    if (count > std::numeric_limits<std::uint64_t>::max() / shape[i])
      throw TensorError(TensorErrc::dim_overflow, "dim " + std::to_string(i));
    count *= shape[i];
  }
  const std::size_t header = 7 + 8 * rank;
  const std::uint64_t width = dtype_size(dtype);
  if (count > (std::numeric_limits<std::uint64_t>::max() - header) / width)
    throw TensorError(TensorErrc::dim_overflow, "payload byte count");
  const std::uint64_t need = header + count * width;
  if (n < need)
    throw TensorError(TensorErrc::truncated, "declared " + std::to_string(count) +
                                                 " scalars, " +
                                                 std::to_string((n - header) / width) +
                                                 " present");
  if (n > need) throw TensorError(TensorErrc::trailing_bytes, std::to_string(n - need));

  auto decode = [&]<typename T>(std::vector<T> v) {
    const unsigned char* q = p + header;
    for (std::size_t i = 0; i < count; ++i, q += sizeof(T))
      v[i] = std::bit_cast<T>(detail::get_le<detail::uint_of<T>>(q));
    return Tensor(std::move(shape), std::move(v));
  };
  if (dtype == DType::f32) return decode(std::vector<float>(count));
  return decode(std::vector<double>(count));
}

inline void write_tensor(const Tensor& t, const std::filesystem::path& path) {
  const auto bytes = encode_tensor(t);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw TensorError(TensorErrc::io, "cannot open for writing: " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw TensorError(TensorErrc::io, "write failed: " + path.string());
}

inline Tensor read_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw TensorError(TensorErrc::io, "cannot open: " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_tensor(bytes);
}

}  // namespace pppn
