#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "barcodemamba/common.hpp"

namespace bm {

enum class DType : std::uint32_t { f32 = 0, f64 = 1 };

std::string_view to_string(DType t);
DType parse_dtype(std::string_view name);

template <typename S>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<S, float> || std::is_same_v<S, double>);
  return std::is_same_v<S, float> ? DType::f32 : DType::f64;
}

// One named array. Values are held as double, which represents every f32
// exactly, so a read/write cycle is bit-exact for either storage type.
struct StoredTensor {
  std::string name;
  DType dtype = DType::f64;
  Matrix<double> values;
};

// Container layout (all integers little-endian):
//   "BMPARAMS" u32 version u32 count
//   per entry: u32 name_len, name bytes, u32 dtype, u32 ndim, u64 dims[ndim],
//              payload (row-major, little-endian IEEE-754)
void write_param_container(std::ostream& out, const std::vector<StoredTensor>& tensors);
std::vector<StoredTensor> read_param_container(std::istream& in);

namespace io {
void put_u32(std::ostream& out, std::uint32_t v);
void put_u64(std::ostream& out, std::uint64_t v);
std::uint32_t get_u32(std::istream& in);
std::uint64_t get_u64(std::istream& in);
}  // namespace io

}  // namespace bm
