#include "mtlnet/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace mtlnet {

namespace le {

namespace {
template <typename U>
void put(std::ostream& os, U v) {
  char bytes[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(bytes, sizeof(U));
}

template <typename U>
U get(std::istream& is) {
  unsigned char bytes[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(bytes), sizeof(U))) throw FormatError("unexpected end of file");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(bytes[i]) << (8 * i);
  return v;
}
}  // namespace

void put_u8(std::ostream& os, std::uint8_t v) { put(os, v); }
void put_u16(std::ostream& os, std::uint16_t v) { put(os, v); }
void put_u32(std::ostream& os, std::uint32_t v) { put(os, v); }
void put_u64(std::ostream& os, std::uint64_t v) { put(os, v); }
std::uint8_t get_u8(std::istream& is) { return get<std::uint8_t>(is); }
std::uint16_t get_u16(std::istream& is) { return get<std::uint16_t>(is); }
std::uint32_t get_u32(std::istream& is) { return get<std::uint32_t>(is); }
std::uint64_t get_u64(std::istream& is) { return get<std::uint64_t>(is); }

}  // namespace le

namespace {
constexpr char kMagic[4] = {'M', 'T', 'L', 'T'};

template <typename Scalar>
using Bits = std::conditional_t<sizeof(Scalar) == 4, std::uint32_t, std::uint64_t>;
}  // namespace

template <typename Scalar>
void write_tensor(std::ostream& os, const Tensor<Scalar>& t) {
  os.write(kMagic, 4);
  le::put_u32(os, kTensorFileVersion);
  le::put_u8(os, static_cast<std::uint8_t>(dtype_of<Scalar>()));
  le::put_u8(os, static_cast<std::uint8_t>(t.ndim()));
  for (Index d : t.shape()) le::put_u64(os, static_cast<std::uint64_t>(d));
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(t.ptr()),
             static_cast<std::streamsize>(t.numel() * sizeof(Scalar)));
  } else {
    for (Index i = 0; i < t.numel(); ++i) {
      const auto bits = std::bit_cast<Bits<Scalar>>(t.data()[i]);
      if constexpr (sizeof(Scalar) == 4) le::put_u32(os, bits); else le::put_u64(os, bits);
    }
  }
  if (!os) throw FormatError("failed to write tensor");
}

template <typename Scalar>
Tensor<Scalar> read_tensor(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw FormatError("bad tensor magic");
  const std::uint32_t version = le::get_u32(is);
  if (version != kTensorFileVersion) {
    throw FormatError("unsupported tensor version " + std::to_string(version));
  }
  const std::uint8_t code = le::get_u8(is);
  if (code > 1) throw FormatError("unknown dtype code " + std::to_string(code));
  if (code != static_cast<std::uint8_t>(dtype_of<Scalar>())) {
    throw FormatError("tensor dtype mismatch: file holds " + std::string(code ? "f64" : "f32"));
  }
  const std::uint8_t ndim = le::get_u8(is);
  Shape shape(ndim);
  for (auto& d : shape) {
    const std::uint64_t v = le::get_u64(is);
    if (v == 0 || v > (std::uint64_t{1} << 40)) throw FormatError("bad tensor dimension");
    d = static_cast<Index>(v);
  }
  Buffer<Scalar> data(numel_of(shape));
  if constexpr (std::endian::native == std::endian::little) {
    if (!is.read(reinterpret_cast<char*>(data.data()),
                 static_cast<std::streamsize>(data.size() * sizeof(Scalar)))) {
      throw FormatError("truncated tensor payload");
    }
  } else {
    for (Index i = 0; i < data.size(); ++i) {
      if constexpr (sizeof(Scalar) == 4) data[i] = std::bit_cast<Scalar>(le::get_u32(is));
      else data[i] = std::bit_cast<Scalar>(le::get_u64(is));
    }
  }
  return Tensor<Scalar>(std::move(shape), std::move(data));
}

template <typename Scalar>
void save_tensor(const std::filesystem::path& path, const Tensor<Scalar>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  write_tensor(os, t);
}

template <typename Scalar>
Tensor<Scalar> load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  return read_tensor<Scalar>(is);
}

template void write_tensor(std::ostream&, const Tensor<float>&);
template void write_tensor(std::ostream&, const Tensor<double>&);
template Tensor<float> read_tensor(std::istream&);
template Tensor<double> read_tensor(std::istream&);
template void save_tensor(const std::filesystem::path&, const Tensor<float>&);
template void save_tensor(const std::filesystem::path&, const Tensor<double>&);
template Tensor<float> load_tensor(const std::filesystem::path&);
template Tensor<double> load_tensor(const std::filesystem::path&);

}  // namespace mtlnet
