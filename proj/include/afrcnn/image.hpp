#pragma once

#include <cctype>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "afrcnn/tensor.hpp"

namespace afrcnn {

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  std::vector<std::uint8_t> out((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return out;
}

inline void write_file_bytes(const std::string& path, const void* data, std::size_t n) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path);
  f.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!f) throw std::runtime_error("short write to " + path);
}

inline std::string read_file_text(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  return std::string(bytes.begin(), bytes.end());
}

// 8-bit RGB image, row-major, channel-interleaved.
struct ImageU8 {
  int w = 0, h = 0;
  std::vector<std::uint8_t> rgb;

  ImageU8() = default;
  ImageU8(int width, int height) : w(width), h(height), rgb(static_cast<std::size_t>(width) * height * 3, 0) {}

  std::uint8_t* px(int y, int x) { return rgb.data() + (static_cast<std::size_t>(y) * w + x) * 3; }
  const std::uint8_t* px(int y, int x) const { return rgb.data() + (static_cast<std::size_t>(y) * w + x) * 3; }
};

// Full file content; callers hash these bytes for manifests.
inline std::vector<std::uint8_t> ppm_bytes(const ImageU8& img) {
  std::ostringstream head;
  head << "P6\n" << img.w << ' ' << img.h << "\n255\n";
  const std::string h = head.str();
  std::vector<std::uint8_t> out(h.begin(), h.end());
  out.insert(out.end(), img.rgb.begin(), img.rgb.end());
  return out;
}

inline void write_ppm(const std::string& path, const ImageU8& img) {
  const auto bytes = ppm_bytes(img);
  write_file_bytes(path, bytes.data(), bytes.size());
}

namespace detail {
inline int next_pnm_int(std::istream& is) {
  // Skips whitespace and '#' comment lines between header tokens.
  int c = is.get();
  while (c != EOF) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = is.get();
    } else if (!std::isspace(c)) {
      break;
    }
    c = is.get();
  }
  if (c == EOF) throw std::runtime_error("truncated image header");
  int v = 0;
  bool any = false;
  while (c != EOF && c >= '0' && c <= '9') {
    v = v * 10 + (c - '0');
    any = true;
    c = is.get();
  }
  if (!any) throw std::runtime_error("malformed image header");
  return v;
}
}  // namespace detail

inline ImageU8 read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  char m0 = 0, m1 = 0;
  f.get(m0);
  f.get(m1);
  if (m0 != 'P' || m1 != '6') throw std::runtime_error(path + ": not a P6 ppm");
  const int w = detail::next_pnm_int(f);
  const int h = detail::next_pnm_int(f);
  const int maxv = detail::next_pnm_int(f);
  if (maxv != 255) throw std::runtime_error(path + ": unsupported maxval");
  if (w <= 0 || h <= 0 || w > 1 << 14 || h > 1 << 14) throw std::runtime_error(path + ": bad dims");
  ImageU8 img(w, h);
  f.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
  if (f.gcount() != static_cast<std::streamsize>(img.rgb.size()))
    throw std::runtime_error(path + ": truncated pixel data");
  return img;
}

inline void write_pgm(const std::string& path, int w, int h, const std::vector<std::uint8_t>& gray) {
  if (static_cast<std::size_t>(w) * h != gray.size())
    throw std::invalid_argument("write_pgm: size mismatch");
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << "P5\n" << w << ' ' << h << "\n255\n";
  f.write(reinterpret_cast<const char*>(gray.data()), static_cast<std::streamsize>(gray.size()));
  if (!f) throw std::runtime_error("short write to " + path);
}

template <typename T>
Tensor3<T> image_to_tensor(const ImageU8& img) {
  Tensor3<T> t(img.h, img.w, 3);
  for (std::size_t i = 0; i < img.rgb.size(); ++i)
    t.v[i] = static_cast<T>(img.rgb[i]) * (T(1) / T(255));
  return t;
}

}  // namespace afrcnn
