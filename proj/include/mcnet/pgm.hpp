#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "common.hpp"

namespace mcnet {

struct PgmImage {
  int width = 0;
  int height = 0;
  int maxval = 0;                   // 255 or 65535
  std::vector<std::uint16_t> data;  // row-major
};

namespace detail {

class PgmParser {
 public:
  explicit PgmParser(const std::string& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw DataError("cannot open '" + path + "'");
  }

  PgmImage parse() {
    expect('P');
    expect('5');
    PgmImage img;
    img.width = next_int("width");
    img.height = next_int("height");
    img.maxval = next_int("maxval");
    if (img.width <= 0 || img.height <= 0)
      fail("non-positive dimensions");
    if (img.maxval != 255 && img.maxval != 65535)
      fail("maxval must be 255 or 65535, got " + std::to_string(img.maxval));
    // exactly one whitespace byte separates header from raster
    const int ws = get();
    if (!std::isspace(ws)) fail("missing whitespace before raster");
    const std::size_t n = static_cast<std::size_t>(img.width) * img.height;
    img.data.resize(n);
    if (img.maxval == 255) {
      std::vector<char> buf(n);
      read_exact(buf.data(), n);
      for (std::size_t i = 0; i < n; ++i)
        img.data[i] = static_cast<std::uint8_t>(buf[i]);
    } else {
      std::vector<char> buf(2 * n);
      read_exact(buf.data(), 2 * n);
      for (std::size_t i = 0; i < n; ++i)  // big-endian per PGM convention
        img.data[i] = static_cast<std::uint16_t>(
            (static_cast<std::uint8_t>(buf[2 * i]) << 8) |
            static_cast<std::uint8_t>(buf[2 * i + 1]));
    }
    for (std::size_t i = 0; i < n; ++i)
      if (img.data[i] > img.maxval)
        fail("pixel value " + std::to_string(img.data[i]) + " exceeds maxval");
    return img;
  }

 private:
  int get() {
    const int c = in_.get();
    if (c != EOF) ++offset_;
    return c;
  }

  void expect(char want) {
    const int c = get();
    if (c != want) fail(std::string("expected '") + want + "'");
  }

  // Skips whitespace and '#' comment lines, then reads a decimal integer.
  int next_int(const char* what) {
    int c = get();
    for (;;) {
      while (c != EOF && std::isspace(c)) c = get();
      if (c == '#') {
        while (c != EOF && c != '\n') c = get();
        continue;
      }
      break;
    }
    if (c == EOF || !std::isdigit(c)) fail(std::string("malformed ") + what);
    long v = 0;
    while (c != EOF && std::isdigit(c)) {
      v = v * 10 + (c - '0');
      if (v > 1 << 30) fail(std::string(what) + " out of range");
      c = get();
    }
    if (c != EOF) {
      in_.unget();
      --offset_;
    }
    return static_cast<int>(v);
  }

  void read_exact(char* dst, std::size_t n) {
    in_.read(dst, static_cast<std::streamsize>(n));
    const std::size_t got = static_cast<std::size_t>(in_.gcount());
    offset_ += got;
    if (got != n) fail("truncated raster");
  }

  [[noreturn]] void fail(const std::string& msg) const {
    throw DataError("'" + path_ + "': " + msg + " at byte " + std::to_string(offset_));
  }

  std::string path_;
  std::ifstream in_;
  std::size_t offset_ = 0;
};

}  // namespace detail

inline PgmImage read_pgm(const std::string& path) { return detail::PgmParser(path).parse(); }

inline void write_pgm(const std::string& path, const PgmImage& img) {
  namespace fs = std::filesystem;
  const fs::path parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out << "P5\n" << img.width << " " << img.height << "\n" << img.maxval << "\n";
  if (img.maxval == 255) {
    std::vector<char> buf(img.data.size());
    for (std::size_t i = 0; i < img.data.size(); ++i)
      buf[i] = static_cast<char>(static_cast<std::uint8_t>(img.data[i]));
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  } else {
    std::vector<char> buf(2 * img.data.size());
    for (std::size_t i = 0; i < img.data.size(); ++i) {
      buf[2 * i] = static_cast<char>(img.data[i] >> 8);
      buf[2 * i + 1] = static_cast<char>(img.data[i] & 0xff);
    }
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  }
  out.close();
  if (!out) throw DataError("write to '" + path + "' failed");
}

// Min-max normalized 8-bit heatmap plus a sidecar recording the bounds so the
// quantized map can be mapped back to real values. For "out.pgm" the sidecar
// is "out.range.txt".
inline void write_heatmap(const std::string& path, int width, int height,
                          const std::vector<double>& values) {
  if (values.size() != static_cast<std::size_t>(width) * height)
    throw ConfigError("heatmap size mismatch");
  double lo = values.empty() ? 0.0 : values[0], hi = lo;
  for (double v : values) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  PgmImage img;
  img.width = width;
  img.height = height;
  img.maxval = 255;
  img.data.resize(values.size());
  const double span = hi - lo;
  for (std::size_t i = 0; i < values.size(); ++i)
    img.data[i] = span > 0 ? static_cast<std::uint16_t>(
                                 std::lround((values[i] - lo) / span * 255.0))
                           : 0;
  write_pgm(path, img);

  std::string base = path;
  if (base.size() > 4 && base.substr(base.size() - 4) == ".pgm")
    base = base.substr(0, base.size() - 4);
  std::ofstream side(base + ".range.txt");
  if (!side) throw DataError("cannot write heatmap sidecar for '" + path + "'");
  char buf[128];
  std::snprintf(buf, sizeof(buf), "min=%.9g max=%.9g\n", lo, hi);
  side << buf;
}

}  // namespace mcnet
