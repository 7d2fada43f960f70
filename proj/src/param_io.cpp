#include "barcodemamba/param_io.hpp"

#include <bit>
#include <cstring>
#include <istream>
#include <ostream>

namespace bm {

namespace {
constexpr char kMagic[8] = {'B', 'M', 'P', 'A', 'R', 'A', 'M', 'S'};
constexpr std::uint32_t kVersion = 1;
}  // namespace

std::string_view to_string(DType t) { return t == DType::f32 ? "f32" : "f64"; }

DType parse_dtype(std::string_view name) {
  if (name == "f32") return DType::f32;
  if (name == "f64") return DType::f64;
  throw ConfigError("unknown precision: " + std::string(name));
}

namespace io {

void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw DataError("truncated parameter container");
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

std::uint64_t get_u64(std::istream& in) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8)) throw DataError("truncated parameter container");
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

}  // namespace io

void write_param_container(std::ostream& out, const std::vector<StoredTensor>& tensors) {
  out.write(kMagic, sizeof kMagic);
  io::put_u32(out, kVersion);
  io::put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    io::put_u32(out, static_cast<std::uint32_t>(t.name.size()));
    out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    io::put_u32(out, static_cast<std::uint32_t>(t.dtype));
    io::put_u32(out, 2);
    io::put_u64(out, static_cast<std::uint64_t>(t.values.rows()));
    io::put_u64(out, static_cast<std::uint64_t>(t.values.cols()));
    const double* p = t.values.data();
    for (Index i = 0; i < t.values.size(); ++i) {
      if (t.dtype == DType::f32)
        io::put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(p[i])));
      else
        io::put_u64(out, std::bit_cast<std::uint64_t>(p[i]));
    }
  }
  if (!out) throw DataError("failed writing parameter container");
}

std::vector<StoredTensor> read_param_container(std::istream& in) {
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0)
    throw DataError("not a parameter container (bad magic)");
  if (io::get_u32(in) != kVersion) throw DataError("unsupported parameter container version");
  const auto count = io::get_u32(in);
  std::vector<StoredTensor> out;
  out.reserve(count);
  for (std::uint32_t k = 0; k < count; ++k) {
    StoredTensor t;
    t.name.resize(io::get_u32(in));
    if (!in.read(t.name.data(), static_cast<std::streamsize>(t.name.size())))
      throw DataError("truncated parameter container");
    const auto dt = io::get_u32(in);
    if (dt > 1) throw DataError("unknown dtype in parameter container");
    t.dtype = static_cast<DType>(dt);
    const auto ndim = io::get_u32(in);
    if (ndim == 0 || ndim > 2) throw DataError("unsupported tensor rank in container");
    std::uint64_t dims[2] = {1, 1};
    for (std::uint32_t i = 0; i < ndim; ++i) dims[i + (2 - ndim)] = io::get_u64(in);
    t.values.resize(static_cast<Index>(dims[0]), static_cast<Index>(dims[1]));
    double* p = t.values.data();
    for (Index i = 0; i < t.values.size(); ++i) {
      p[i] = t.dtype == DType::f32 ? static_cast<double>(std::bit_cast<float>(io::get_u32(in)))
                                   : std::bit_cast<double>(io::get_u64(in));
    }
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace bm
