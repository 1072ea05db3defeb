#pragma once

// Named-array blob: the checkpoint format and the weight format of the
// external encoder adapter.
//
//   EDACKPT v1 <count>\n
//   <name> f64 <rows> <cols>\n        (count manifest lines)
//   <payload>                          (row-major little-endian doubles, manifest order)

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "edadet/autograd.hpp"
#include "edadet/errors.hpp"

namespace edadet {

using NamedArrays = std::map<std::string, ag::Mat>;

namespace detail {

static_assert(std::endian::native == std::endian::little, "payload IO assumes a little-endian host");

inline void write_f64(std::ostream& os, const ag::Mat& m) {
  os.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
}

inline void write_f32(std::ostream& os, const float* data, std::size_t n) {
  os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(float)));
}

}  // namespace detail

inline void save_arrays(const NamedArrays& arrays, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path.string());
  os << "EDACKPT v1 " << arrays.size() << "\n";
  for (const auto& [name, m] : arrays) {
    require(!name.empty() && name.find_first_of(" \n\t") == std::string::npos,
            "save_arrays: invalid array name '" + name + "'");
    os << name << " f64 " << m.rows() << " " << m.cols() << "\n";
  }
  for (const auto& [name, m] : arrays) detail::write_f64(os, m);
  if (!os) throw IoError("write failed: " + path.string());
}

inline NamedArrays load_arrays(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for reading: " + path.string());
  std::string line;
  if (!std::getline(is, line)) throw IoError("empty checkpoint: " + path.string());
  std::istringstream header(line);
  std::string magic, version;
  long long count = -1;
  header >> magic >> version >> count;
  if (magic != "EDACKPT" || version != "v1" || count < 0) throw IoError("malformed checkpoint header in " + path.string());

  struct Entry {
    std::string name;
    long long rows, cols;
  };
  std::vector<Entry> manifest;
  for (long long i = 0; i < count; ++i) {
    if (!std::getline(is, line)) throw IoError("truncated checkpoint manifest in " + path.string());
    std::istringstream ls(line);
    Entry e{};
    std::string dtype;
    ls >> e.name >> dtype >> e.rows >> e.cols;
    if (!ls || dtype != "f64" || e.rows < 0 || e.cols < 0) throw IoError("malformed manifest line: " + line);
    manifest.push_back(e);
  }
  NamedArrays out;
  for (const auto& e : manifest) {
    ag::Mat m(e.rows, e.cols);
    is.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
    if (!is) throw IoError("truncated checkpoint payload for '" + e.name + "' in " + path.string());
    if (!m.allFinite()) throw NumericError("non-finite values in checkpoint array '" + e.name + "'");
    if (!out.emplace(e.name, std::move(m)).second) throw IoError("duplicate array name '" + e.name + "'");
  }
  if (is.peek() != std::char_traits<char>::eof()) throw IoError("trailing bytes after checkpoint payload in " + path.string());
  return out;
}

}  // namespace edadet
