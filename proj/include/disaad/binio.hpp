#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>

#include "disaad/common.hpp"
#include "disaad/matrix.hpp"

// Little-endian binary primitives for checkpoint files. Every integer and
// double is written byte by byte, so the files are identical across hosts.
namespace disaad::binio {

inline void put_u64(std::ostream& out, std::uint64_t v) {
  std::array<char, 8> bytes{};
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
  out.write(bytes.data(), 8);
}

inline std::uint64_t get_u64(std::istream& in) {
  std::array<unsigned char, 8> bytes{};
  in.read(reinterpret_cast<char*>(bytes.data()), 8);
  if (!in) throw InputError("checkpoint truncated");
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | bytes[i];
  return v;
}

inline void put_f64(std::ostream& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }
inline double get_f64(std::istream& in) { return std::bit_cast<double>(get_u64(in)); }

inline void put_string(std::ostream& out, const std::string& s) {
  put_u64(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& in) {
  const auto n = get_u64(in);
  if (n > (1u << 20)) throw InputError("checkpoint string field too long");
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  if (!in) throw InputError("checkpoint truncated");
  return s;
}

inline void put_magic(std::ostream& out, const char (&magic)[5]) { out.write(magic, 4); }

inline void expect_magic(std::istream& in, const char (&magic)[5]) {
  char got[4] = {};
  in.read(got, 4);
  if (!in || std::string(got, 4) != std::string(magic, 4))
    throw InputError(std::string("not a ") + magic + " checkpoint");
}

// name, rows, cols, then rows*cols doubles in row-major order.
inline void put_matrix(std::ostream& out, const std::string& name, const Matrix& m) {
  put_string(out, name);
  put_u64(out, m.rows());
  put_u64(out, m.cols());
  for (double v : m.data()) put_f64(out, v);
}

inline Matrix get_matrix(std::istream& in, const std::string& expected_name) {
  const auto name = get_string(in);
  if (name != expected_name)
    throw InputError("checkpoint field '" + name + "' where '" + expected_name + "' was expected");
  const auto rows = get_u64(in);
  const auto cols = get_u64(in);
  if (rows * cols > (1u << 26)) throw InputError("checkpoint matrix too large");
  Matrix m(rows, cols);
  for (double& v : m.data()) v = get_f64(in);
  return m;
}

}  // namespace disaad::binio
