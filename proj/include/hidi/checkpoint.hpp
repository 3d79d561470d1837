#pragma once

// ParamStore checkpoint files.
//
//   HIDI-PARAMS 1
//   <entry count>
//   <name> <rows> <cols>        (one line per entry)
//   <values as little-endian float64, entry order, column-major>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "hidi/errors.hpp"
#include "hidi/nn.hpp"

namespace hidi {

namespace detail {

inline std::uint64_t to_little_endian(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    std::uint64_t r = 0;
    for (int i = 0; i < 8; ++i) r = (r << 8) | ((v >> (8 * i)) & 0xffu);
    return r;
  } else {
    return v;
  }
}

}  // namespace detail

inline void write_checkpoint(std::ostream& out, const ParamStore& store) {
  out << "HIDI-PARAMS 1\n" << store.size() << '\n';
  for (const auto& e : store.entries()) {
    if (e.name.empty() || e.name.find_first_of(" \t\n") != std::string::npos)
      throw config_error("parameter name '" + e.name + "' cannot be serialized");
    out << e.name << ' ' << e.value.rows() << ' ' << e.value.cols() << '\n';
  }
  for (const auto& e : store.entries()) {
    for (Eigen::Index k = 0; k < e.value.size(); ++k) {
      const auto bits = detail::to_little_endian(std::bit_cast<std::uint64_t>(e.value(k)));
      char buf[8];
      std::memcpy(buf, &bits, 8);
      out.write(buf, 8);
    }
  }
  if (!out) throw std::runtime_error("checkpoint write failed");
}

inline ParamStore read_checkpoint(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != "HIDI-PARAMS 1")
    throw config_error("not a checkpoint (bad magic line)");
  std::size_t count = 0;
  if (!std::getline(in, line)) throw config_error("truncated checkpoint header");
  {
    std::istringstream ss(line);
    if (!(ss >> count)) throw config_error("bad entry count in checkpoint");
  }
  struct Shape {
    std::string name;
    Eigen::Index rows, cols;
  };
  std::vector<Shape> shapes;
  for (std::size_t i = 0; i < count; ++i) {
    if (!std::getline(in, line)) throw config_error("truncated checkpoint header");
    std::istringstream ss(line);
    Shape s;
    if (!(ss >> s.name >> s.rows >> s.cols) || s.rows < 0 || s.cols < 0)
      throw config_error("bad checkpoint header line: " + line);
    shapes.push_back(s);
  }
  ParamStore store;
  for (const auto& s : shapes) {
    Mat m(s.rows, s.cols);
    for (Eigen::Index k = 0; k < m.size(); ++k) {
      char buf[8];
      if (!in.read(buf, 8)) throw config_error("truncated checkpoint data at '" + s.name + "'");
      std::uint64_t bits;
      std::memcpy(&bits, buf, 8);
      m(k) = std::bit_cast<double>(detail::to_little_endian(bits));
    }
    store.add(s.name, std::move(m));
  }
  if (in.peek() != std::char_traits<char>::eof()) throw config_error("trailing bytes in checkpoint");
  return store;
}

inline void save_checkpoint(const ParamStore& store, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  write_checkpoint(out, store);
}

inline ParamStore load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw config_error("cannot open checkpoint " + path.string());
  return read_checkpoint(in);
}

/// Copies checkpoint values into an existing store; names and shapes must match.
inline void restore_values(ParamStore& store, const ParamStore& loaded) {
  store.check_layout(loaded);
  store.copy_values_from(loaded);
}

}  // namespace hidi
