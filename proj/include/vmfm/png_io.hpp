#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "vmfm/errors.hpp"
#include "vmfm/tensor.hpp"

namespace vmfm::png {

namespace detail {

inline std::uint32_t crc32(const std::uint8_t* data, size_t n, std::uint32_t crc = 0) {
  static const std::array<std::uint32_t, 256> table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  crc ^= 0xffffffffu;
  for (size_t i = 0; i < n; ++i) crc = table[(crc ^ data[i]) & 0xffu] ^ (crc >> 8);
  return crc ^ 0xffffffffu;
}

inline std::uint32_t adler32(const std::uint8_t* data, size_t n) {
  std::uint32_t a = 1, b = 0;
  for (size_t i = 0; i < n; ++i) {
    a = (a + data[i]) % 65521u;
    b = (b + a) % 65521u;
  }
  return (b << 16) | a;
}

inline void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(std::uint8_t(v >> 24));
  out.push_back(std::uint8_t(v >> 16));
  out.push_back(std::uint8_t(v >> 8));
  out.push_back(std::uint8_t(v));
}

inline void put_chunk(std::vector<std::uint8_t>& out, const char type[4],
                      const std::vector<std::uint8_t>& data) {
  put_be32(out, std::uint32_t(data.size()));
  size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), data.begin(), data.end());
  put_be32(out, crc32(out.data() + start, out.size() - start));
}

// zlib stream around uncompressed deflate blocks: deterministic and
// dependency-free at the cost of size, which is irrelevant for desk images.
inline std::vector<std::uint8_t> zlib_stored(const std::vector<std::uint8_t>& raw) {
  std::vector<std::uint8_t> z;
  z.push_back(0x78);
  z.push_back(0x01);
  size_t pos = 0;
  do {
    size_t len = std::min<size_t>(raw.size() - pos, 65535);
    bool final = pos + len == raw.size();
    z.push_back(final ? 1 : 0);
    z.push_back(std::uint8_t(len & 0xff));
    z.push_back(std::uint8_t(len >> 8));
    z.push_back(std::uint8_t(~len & 0xff));
    z.push_back(std::uint8_t((~len >> 8) & 0xff));
    z.insert(z.end(), raw.begin() + pos, raw.begin() + pos + len);
    pos += len;
  } while (pos < raw.size());
  put_be32(z, adler32(raw.data(), raw.size()));
  return z;
}

inline std::vector<std::uint8_t> encode(int h, int w, int channels,
                                        const std::vector<std::uint8_t>& pixels) {
  std::vector<std::uint8_t> png = {137, 80, 78, 71, 13, 10, 26, 10};
  std::vector<std::uint8_t> ihdr;
  put_be32(ihdr, std::uint32_t(w));
  put_be32(ihdr, std::uint32_t(h));
  ihdr.push_back(8);                             // bit depth
  ihdr.push_back(channels == 1 ? 0 : 2);         // gray or rgb
  ihdr.push_back(0);                             // compression
  ihdr.push_back(0);                             // filter
  ihdr.push_back(0);                             // interlace
  put_chunk(png, "IHDR", ihdr);

  std::vector<std::uint8_t> raw;
  raw.reserve(size_t(h) * (size_t(w) * channels + 1));
  for (int y = 0; y < h; ++y) {
    raw.push_back(0);  // filter: none
    raw.insert(raw.end(), pixels.begin() + size_t(y) * w * channels,
               pixels.begin() + size_t(y + 1) * w * channels);
  }
  put_chunk(png, "IDAT", zlib_stored(raw));
  put_chunk(png, "IEND", {});
  return png;
}

}  // namespace detail

// Unit value to byte with ties to even, matching the quantization used
// everywhere else that floats meet 8-bit storage.
template <class S>
std::uint8_t to_u8(S v) {
  double d = std::clamp(double(v), 0.0, 1.0) * 255.0;
  return std::uint8_t(std::nearbyint(d));
}

template <class S>
std::vector<std::uint8_t> encode_gray(const Plane<S>& img) {
  const int h = static_cast<int>(img.rows()), w = static_cast<int>(img.cols());
  std::vector<std::uint8_t> px(size_t(h) * w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) px[size_t(y) * w + x] = to_u8(img(y, x));
  return detail::encode(h, w, 1, px);
}

template <class S>
std::vector<std::uint8_t> encode_rgb(const Image<S>& img) {
  const int h = static_cast<int>(img.r.rows()), w = static_cast<int>(img.r.cols());
  std::vector<std::uint8_t> px(size_t(h) * w * 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      size_t o = (size_t(y) * w + x) * 3;
      px[o + 0] = to_u8(img.r(y, x));
      px[o + 1] = to_u8(img.g(y, x));
      px[o + 2] = to_u8(img.b(y, x));
    }
  return detail::encode(h, w, 3, px);
}

inline void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw missing_artifact_error("cannot open for writing: " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!f) throw invariant_error("short write: " + path.string());
}

template <class S>
void write_gray(const std::filesystem::path& path, const Plane<S>& img) {
  write_bytes(path, encode_gray(img));
}

template <class S>
void write_rgb(const std::filesystem::path& path, const Image<S>& img) {
  write_bytes(path, encode_rgb(img));
}

}  // namespace vmfm::png
