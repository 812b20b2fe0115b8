#pragma once

// VHW1 weight files.
//
//   "VHW1"                          4 bytes
//   entry count                     u64 little-endian
//   per entry:
//     name length                   u16 little-endian
//     name                          UTF-8 bytes
//     rank                          u8
//     extents                       rank x u32 little-endian
//     values                        prod(extents) x f32 little-endian, row-major
//
// No padding. Entries are written in lexicographic name order.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include "hedonic/errors.hpp"
#include "hedonic/vit.hpp"

namespace hedonic {

namespace detail {

inline void put_le(std::vector<std::uint8_t>& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t>& b) : b_(b) {}
  std::uint64_t le(int bytes) {
    need(static_cast<std::size_t>(bytes));
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= std::uint64_t{b_[pos_ + i]} << (8 * i);
    pos_ += static_cast<std::size_t>(bytes);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void need(std::size_t n) const {
    if (b_.size() - pos_ < n) throw WeightFormatError("VHW1: truncated file");
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  const std::vector<std::uint8_t>& b_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> encode_vhw1(const WeightStore& w) {
  std::vector<std::uint8_t> out = {'V', 'H', 'W', '1'};
  detail::put_le(out, w.size(), 8);
  for (const auto& [name, t] : w) {
    if (name.size() > 0xFFFF) throw WeightFormatError("VHW1: parameter name too long");
    if (t.rank() > 0xFF) throw WeightFormatError("VHW1: rank too large");
    detail::put_le(out, name.size(), 2);
    out.insert(out.end(), name.begin(), name.end());
    detail::put_le(out, t.rank(), 1);
    for (auto e : t.shape()) {
      if (e > 0xFFFFFFFFull) throw WeightFormatError("VHW1: extent too large");
      detail::put_le(out, e, 4);
    }
    for (float v : t.values()) detail::put_le(out, std::bit_cast<std::uint32_t>(v), 4);
  }
  return out;
}

inline WeightStore decode_vhw1(const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader in(bytes);
  if (in.str(4) != "VHW1") throw WeightFormatError("VHW1: bad magic");
  const std::uint64_t count = in.le(8);
  WeightStore w;
  for (std::uint64_t e = 0; e < count; ++e) {
    const std::string name = in.str(in.le(2));
    const auto rank = static_cast<std::size_t>(in.le(1));
    Shape shape(rank);
    for (auto& d : shape) d = in.le(4);
    const std::size_t n = shape_product(shape);
    in.need(n * 4);
    std::vector<float> data(n);
    for (auto& v : data) v = std::bit_cast<float>(static_cast<std::uint32_t>(in.le(4)));
    try {
      w.insert(name, Tensor(shape, std::move(data)));
    } catch (const ShapeError& err) {
      throw WeightFormatError("VHW1: entry " + name + ": " + err.what());
    }
  }
  if (!in.done()) throw WeightFormatError("VHW1: trailing bytes after last entry");
  return w;
}

inline void save_weights(const WeightStore& w, const std::filesystem::path& path) {
  const auto bytes = encode_vhw1(w);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw WeightFormatError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

inline WeightStore load_weights(const std::filesystem::path& path) {
  try {
    return decode_vhw1(read_bytes(path));
  } catch (const WeightFormatError& e) {
    throw WeightFormatError(path.string() + ": " + e.what());
  }
}

/// 64-bit FNV-1a, printed as 16 hex digits.
inline std::string fnv1a_hex(const std::vector<std::uint8_t>& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

/// Identity of a feature space: preset name plus checksum of the weights.
inline std::string backbone_id(const std::string& preset_name, const WeightStore& w) {
  return preset_name + ":" + fnv1a_hex(encode_vhw1(w));
}

}  // namespace hedonic
