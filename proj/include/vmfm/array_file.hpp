#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "vmfm/errors.hpp"
#include "vmfm/hash.hpp"
#include "vmfm/tensor.hpp"

namespace vmfm::io {

static_assert(std::endian::native == std::endian::little,
              "array container assumes a little-endian host");

enum class Dtype : std::uint8_t { f32 = 0, u8 = 1, f64 = 2, u64 = 3, i64 = 4 };

inline std::size_t dtype_size(Dtype d) {
  switch (d) {
    case Dtype::f32: return 4;
    case Dtype::u8: return 1;
    case Dtype::f64: return 8;
    case Dtype::u64: return 8;
    case Dtype::i64: return 8;
  }
  throw invariant_error("unknown dtype");
}

struct NamedArray {
  std::string name;
  Dtype dtype = Dtype::f32;
  std::vector<std::uint32_t> dims;
  std::vector<unsigned char> bytes;

  std::size_t count() const {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }
};

// Flat named-array container: magic, array count, then per array a name,
// dtype, dims and raw little-endian payload. Used for corpus samples and
// checkpoint weights so every artifact stays byte reproducible.
class ArrayFile {
 public:
  static constexpr char kMagic[8] = {'V', 'M', 'F', 'M', 'A', 'R', 'R', '1'};

  std::vector<NamedArray> arrays;

  bool has(const std::string& name) const { return find(name) != nullptr; }

  const NamedArray& get(const std::string& name) const {
    const NamedArray* a = find(name);
    if (!a) throw invariant_error("array container: missing array '" + name + "'");
    return *a;
  }

  void add_raw(std::string name, Dtype dtype, std::vector<std::uint32_t> dims,
               const void* data, std::size_t size_bytes) {
    NamedArray a;
    a.name = std::move(name);
    a.dtype = dtype;
    a.dims = std::move(dims);
    a.bytes.resize(size_bytes);
    std::memcpy(a.bytes.data(), data, size_bytes);
    if (a.bytes.size() != a.count() * dtype_size(a.dtype))
      throw invariant_error("array container: payload size does not match dims");
    arrays.push_back(std::move(a));
  }

  void add_f32(const std::string& name, std::vector<std::uint32_t> dims, const float* data) {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    add_raw(name, Dtype::f32, std::move(dims), data, n * sizeof(float));
  }

  void add_plane(const std::string& name, const Plane<float>& p) {
    add_f32(name, {std::uint32_t(p.rows()), std::uint32_t(p.cols())}, p.data());
  }

  void add_mask(const std::string& name, const MaskPlane& m) {
    add_raw(name, Dtype::u8, {std::uint32_t(m.rows()), std::uint32_t(m.cols())}, m.data(),
            std::size_t(m.size()));
  }

  void add_image(const std::string& name, const Image<float>& im) {
    Tensor<float> t = tensor_from_image(im);
    add_f32(name, {3u, std::uint32_t(im.rows()), std::uint32_t(im.cols())}, t.v.data());
  }

  void add_scalar_u64(const std::string& name, std::uint64_t v) {
    add_raw(name, Dtype::u64, {1u}, &v, sizeof(v));
  }

  void add_vec_f32(const std::string& name, const Vec<float>& v) {
    add_f32(name, {std::uint32_t(v.size())}, v.data());
  }

  Plane<float> plane(const std::string& name) const {
    const NamedArray& a = expect(name, Dtype::f32, 2);
    Plane<float> p(a.dims[0], a.dims[1]);
    std::memcpy(p.data(), a.bytes.data(), a.bytes.size());
    return p;
  }

  MaskPlane mask(const std::string& name) const {
    const NamedArray& a = expect(name, Dtype::u8, 2);
    MaskPlane m(a.dims[0], a.dims[1]);
    std::memcpy(m.data(), a.bytes.data(), a.bytes.size());
    return m;
  }

  Image<float> image(const std::string& name) const {
    const NamedArray& a = expect(name, Dtype::f32, 3);
    if (a.dims[0] != 3) throw invariant_error("array container: image '" + name + "' not 3 channel");
    Image<float> im = make_image<float>(a.dims[1], a.dims[2]);
    const float* src = reinterpret_cast<const float*>(a.bytes.data());
    std::size_t plane_n = std::size_t(a.dims[1]) * a.dims[2];
    for (int c = 0; c < 3; ++c)
      std::memcpy(im.channel(c).data(), src + c * plane_n, plane_n * sizeof(float));
    return im;
  }

  std::uint64_t scalar_u64(const std::string& name) const {
    const NamedArray& a = expect(name, Dtype::u64, 1);
    std::uint64_t v;
    std::memcpy(&v, a.bytes.data(), sizeof(v));
    return v;
  }

  Vec<float> vec_f32(const std::string& name) const {
    const NamedArray& a = expect(name, Dtype::f32, 1);
    Vec<float> v(a.dims[0]);
    std::memcpy(v.data(), a.bytes.data(), a.bytes.size());
    return v;
  }

  std::vector<unsigned char> serialize() const {
    std::vector<unsigned char> out;
    auto put = [&out](const void* p, std::size_t n) {
      const auto* b = static_cast<const unsigned char*>(p);
      out.insert(out.end(), b, b + n);
    };
    auto put_u32 = [&](std::uint32_t v) { put(&v, 4); };
    put(kMagic, 8);
    put_u32(static_cast<std::uint32_t>(arrays.size()));
    for (const NamedArray& a : arrays) {
      put_u32(static_cast<std::uint32_t>(a.name.size()));
      put(a.name.data(), a.name.size());
      std::uint8_t dt = static_cast<std::uint8_t>(a.dtype);
      std::uint8_t nd = static_cast<std::uint8_t>(a.dims.size());
      put(&dt, 1);
      put(&nd, 1);
      for (std::uint32_t d : a.dims) put_u32(d);
      put(a.bytes.data(), a.bytes.size());
    }
    return out;
  }

  void write(const std::filesystem::path& path) const {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw missing_artifact_error("cannot open for writing: " + path.string());
    auto bytes = serialize();
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    if (!f) throw invariant_error("short write: " + path.string());
  }

  static ArrayFile parse(const std::vector<unsigned char>& buf, const std::string& origin) {
    ArrayFile af;
    std::size_t pos = 0;
    auto need = [&](std::size_t n) {
      if (pos + n > buf.size()) throw invariant_error("corrupt array container: " + origin);
      return buf.data() + pos;
    };
    auto get_u32 = [&]() {
      std::uint32_t v;
      std::memcpy(&v, need(4), 4);
      pos += 4;
      return v;
    };
    if (std::memcmp(need(8), kMagic, 8) != 0)
      throw invariant_error("corrupt array container (bad magic): " + origin);
    pos += 8;
    std::uint32_t count = get_u32();
    for (std::uint32_t i = 0; i < count; ++i) {
      NamedArray a;
      std::uint32_t nl = get_u32();
      a.name.assign(reinterpret_cast<const char*>(need(nl)), nl);
      pos += nl;
      std::uint8_t dt, nd;
      std::memcpy(&dt, need(1), 1);
      pos += 1;
      std::memcpy(&nd, need(1), 1);
      pos += 1;
      if (dt > 4) throw invariant_error("corrupt array container (dtype): " + origin);
      a.dtype = static_cast<Dtype>(dt);
      a.dims.resize(nd);
      for (auto& d : a.dims) d = get_u32();
      std::size_t nbytes = a.count() * dtype_size(a.dtype);
      a.bytes.assign(need(nbytes), need(nbytes) + nbytes);
      pos += nbytes;
      af.arrays.push_back(std::move(a));
    }
    if (pos != buf.size()) throw invariant_error("corrupt array container (trailing bytes): " + origin);
    return af;
  }

  static ArrayFile read(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw missing_artifact_error("missing artifact: " + path.string());
    std::vector<unsigned char> buf((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());
    return parse(buf, path.string());
  }

 private:
  const NamedArray* find(const std::string& name) const {
    for (const NamedArray& a : arrays)
      if (a.name == name) return &a;
    return nullptr;
  }

  const NamedArray& expect(const std::string& name, Dtype dt, std::size_t ndim) const {
    const NamedArray& a = get(name);
    if (a.dtype != dt || a.dims.size() != ndim)
      throw invariant_error("array container: '" + name + "' has unexpected dtype or rank");
    return a;
  }
};

inline std::uint64_t file_checksum(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw missing_artifact_error("missing artifact: " + path.string());
  std::vector<char> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return fnv1a64(buf.data(), buf.size());
}

}  // namespace vmfm::io
