#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "anc/errors.hpp"
#include "anc/tensor.hpp"

// TNS layout (little-endian):
//   [0..3] "ANCT"  [4] version=1  [5] dtype (0=f32, 1=f64)  [6] rank 1..5  [7] 0
//   rank x u32 extents, then the row-major payload. No padding.

namespace anc {

namespace tns {

inline constexpr std::array<char, 4> kMagic{'A', 'N', 'C', 'T'};
inline constexpr std::uint8_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "TNS I/O assumes a little-endian host");

inline std::vector<char> encode(const DenseTensor& t) {
  if (t.empty() || t.rank() == 0) throw InvalidArgument("cannot serialize an empty tensor");
  const std::size_t elem = t.dtype() == DType::f32 ? 4 : 8;
  std::vector<char> buf(8 + 4 * t.rank() + elem * t.size());
  std::memcpy(buf.data(), kMagic.data(), 4);
  buf[4] = static_cast<char>(kVersion);
  buf[5] = static_cast<char>(t.dtype());
  buf[6] = static_cast<char>(t.rank());
  buf[7] = 0;
  char* p = buf.data() + 8;
  for (std::size_t d : t.shape().extents()) {
    const auto e = static_cast<std::uint32_t>(d);
    std::memcpy(p, &e, 4);
    p += 4;
  }
  if (t.dtype() == DType::f32) {
    for (double v : t.data()) {
      const float f = static_cast<float>(v);
      std::memcpy(p, &f, 4);
      p += 4;
    }
  } else {
    std::memcpy(p, t.data().data(), 8 * t.size());
  }
  return buf;
}

inline DenseTensor decode(const std::vector<char>& buf, const std::string& origin = "<buffer>") {
  if (buf.size() < 8) throw FormatError("truncated header in " + origin);
  if (std::memcmp(buf.data(), kMagic.data(), 4) != 0) throw FormatError("bad magic in " + origin);
  if (static_cast<std::uint8_t>(buf[4]) != kVersion)
    throw FormatError("unsupported TNS version in " + origin);
  const auto code = static_cast<std::uint8_t>(buf[5]);
  if (code > 1) throw FormatError("unknown dtype code " + std::to_string(code) + " in " + origin);
  const auto dtype = static_cast<DType>(code);
  const std::size_t rank = static_cast<std::uint8_t>(buf[6]);
  if (rank < 1 || rank > kMaxRank) throw FormatError("invalid rank in " + origin);
  if (buf.size() < 8 + 4 * rank) throw FormatError("truncated extents in " + origin);
  std::array<std::size_t, kMaxRank> dims{};
  std::size_t volume = 1;
  for (std::size_t a = 0; a < rank; ++a) {
    std::uint32_t e;
    std::memcpy(&e, buf.data() + 8 + 4 * a, 4);
    if (e == 0) throw FormatError("zero extent in " + origin);
    dims[a] = e;
    volume *= e;
  }
  const std::size_t elem = dtype == DType::f32 ? 4 : 8;
  const std::size_t header = 8 + 4 * rank;
  if (buf.size() != header + elem * volume)
    throw FormatError("payload size mismatch in " + origin + ": expected " +
                      std::to_string(elem * volume) + " bytes, found " +
                      std::to_string(buf.size() - header));
  std::vector<double> data(volume);
  const char* p = buf.data() + header;
  if (dtype == DType::f32) {
    for (auto& v : data) {
      float f;
      std::memcpy(&f, p, 4);
      v = f;
      p += 4;
    }
  } else {
    std::memcpy(data.data(), p, 8 * volume);
  }
  return DenseTensor(Shape(std::span<const std::size_t>(dims.data(), rank)), std::move(data),
                     dtype);
}

}  // namespace tns

inline void tns_write(const DenseTensor& t, const std::filesystem::path& path) {
  const auto buf = tns::encode(t);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open for writing", path.string());
  os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!os) throw IoError("write failed", path.string());
}

inline DenseTensor tns_read(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for reading", path.string());
  std::vector<char> buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return tns::decode(buf, path.string());
}

}  // namespace anc
