#pragma once

// ".ten" container: magic "MTLT", u32 version, u8 dtype (0=f32, 1=f64),
// u8 ndim, u64 dims, then row-major little-endian values.

#include "mtlnet/tensor.hpp"

#include <filesystem>
#include <iosfwd>

namespace mtlnet {

inline constexpr std::uint32_t kTensorFileVersion = 1;

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename Scalar>
void write_tensor(std::ostream& os, const Tensor<Scalar>& t);

// Throws FormatError on a bad header, truncated payload or dtype mismatch.
template <typename Scalar>
Tensor<Scalar> read_tensor(std::istream& is);

template <typename Scalar>
void save_tensor(const std::filesystem::path& path, const Tensor<Scalar>& t);

template <typename Scalar>
Tensor<Scalar> load_tensor(const std::filesystem::path& path);

// Little-endian primitives, shared with the checkpoint format.
namespace le {
void put_u8(std::ostream& os, std::uint8_t v);
void put_u16(std::ostream& os, std::uint16_t v);
void put_u32(std::ostream& os, std::uint32_t v);
void put_u64(std::ostream& os, std::uint64_t v);
std::uint8_t get_u8(std::istream& is);
std::uint16_t get_u16(std::istream& is);
std::uint32_t get_u32(std::istream& is);
std::uint64_t get_u64(std::istream& is);
}  // namespace le

}  // namespace mtlnet
