#pragma once

// Image decoding (binary PPM and 8-bit PNG), resampling, cropping and
// normalization into encoder input tensors, plus the random multi-crop views
// used for self-distillation.

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "hedonic/errors.hpp"
#include "hedonic/rng.hpp"
#include "hedonic/tensor.hpp"

namespace hedonic {

/// 8-bit interleaved RGB raster.
struct RasterImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;  // height * width * 3

  RasterImage() = default;
  RasterImage(std::size_t h, std::size_t w, std::uint8_t fill = 0)
      : height(h), width(w), pixels(h * w * 3, fill) {}

  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c) {
    return pixels[(y * width + x) * 3 + c];
  }
  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const {
    return pixels[(y * width + x) * 3 + c];
  }

  bool operator==(const RasterImage&) const = default;
};

inline void validate(const RasterImage& img) {
  if (img.height == 0 || img.width == 0 || img.pixels.size() != img.height * img.width * 3) {
    throw ImageError("malformed raster " + std::to_string(img.height) + "x" +
                     std::to_string(img.width));
  }
}

/// Normalized 3xHxW float image; values are (pixel/255 - mean_c) / std_c.
class ImageTensor {
 public:
  ImageTensor() = default;
  /// Wraps an already-normalized 3xHxW tensor.
  explicit ImageTensor(Tensor t) : t_(std::move(t)) {
    if (t_.rank() != 3 || t_.dim(0) != 3) {
      throw ShapeError("ImageTensor must be 3xHxW, got " + shape_string(t_.shape()));
    }
  }
  const Tensor& tensor() const noexcept { return t_; }
  std::size_t height() const { return t_.dim(1); }
  std::size_t width() const { return t_.dim(2); }
  bool operator==(const ImageTensor&) const = default;

 private:
  Tensor t_;
};

inline constexpr std::array<float, 3> kChannelMean{0.485f, 0.456f, 0.406f};
inline constexpr std::array<float, 3> kChannelStd{0.229f, 0.224f, 0.225f};

namespace detail {

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageError("cannot open image " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

inline std::size_t ppm_skip_space(const std::vector<std::uint8_t>& b, std::size_t pos) {
  while (pos < b.size()) {
    if (b[pos] == '#') {
      while (pos < b.size() && b[pos] != '\n') ++pos;
    } else if (std::isspace(b[pos])) {
      ++pos;
    } else {
      break;
    }
  }
  return pos;
}

inline std::size_t ppm_read_uint(const std::vector<std::uint8_t>& b, std::size_t& pos) {
  pos = ppm_skip_space(b, pos);
  if (pos >= b.size() || !std::isdigit(b[pos])) throw ImageError("PPM: malformed header");
  std::size_t v = 0;
  while (pos < b.size() && std::isdigit(b[pos])) {
    v = v * 10 + (b[pos] - '0');
    if (v > (1u << 24)) throw ImageError("PPM: header value too large");
    ++pos;
  }
  return v;
}

inline RasterImage decode_ppm(const std::vector<std::uint8_t>& b) {
  std::size_t pos = 2;
  const std::size_t w = ppm_read_uint(b, pos);
  const std::size_t h = ppm_read_uint(b, pos);
  const std::size_t maxval = ppm_read_uint(b, pos);
  if (w == 0 || h == 0) throw ImageError("PPM: zero dimension");
  if (maxval != 255) throw ImageError("PPM: unsupported maxval " + std::to_string(maxval));
  if (pos >= b.size() || !std::isspace(b[pos])) throw ImageError("PPM: missing separator");
  ++pos;
  const std::size_t need = w * h * 3;
  if (b.size() - pos < need) throw ImageError("PPM: truncated pixel data");
  RasterImage img(h, w);
  std::memcpy(img.pixels.data(), b.data() + pos, need);
  return img;
}

inline std::uint32_t be32(const std::uint8_t* p) {
  return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) |
         (std::uint32_t{p[2]} << 8) | std::uint32_t{p[3]};
}

inline int paeth(int a, int b, int c) {
  const int p = a + b - c;
  const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

inline RasterImage decode_png(const std::vector<std::uint8_t>& b) {
  static constexpr std::uint8_t kSig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
  if (b.size() < 8 || std::memcmp(b.data(), kSig, 8) != 0) throw ImageError("PNG: bad signature");
  std::size_t pos = 8;
  std::size_t width = 0, height = 0, channels = 0;
  bool have_header = false, have_end = false;
  std::vector<std::uint8_t> idat;
  while (pos + 12 <= b.size()) {
    const std::uint32_t len = be32(&b[pos]);
    if (len > b.size() - pos - 12) throw ImageError("PNG: truncated chunk");
    const std::uint8_t* type = &b[pos + 4];
    const std::uint8_t* body = &b[pos + 8];
    const std::uint32_t crc = be32(body + len);
    if (static_cast<std::uint32_t>(::crc32(0L, type, len + 4)) != crc) {
      throw ImageError("PNG: chunk CRC mismatch");
    }
    const std::string tag(reinterpret_cast<const char*>(type), 4);
    if (tag == "IHDR") {
      if (len != 13) throw ImageError("PNG: bad IHDR");
      width = be32(body);
      height = be32(body + 4);
      const int depth = body[8], color = body[9];
      if (depth != 8) throw ImageError("PNG: unsupported bit depth " + std::to_string(depth));
      if (color == 2) {
        channels = 3;
      } else if (color == 6) {
        channels = 4;
      } else {
        throw ImageError("PNG: unsupported color type " + std::to_string(color));
      }
      if (body[10] != 0 || body[11] != 0) throw ImageError("PNG: unsupported compression/filter method");
      if (body[12] != 0) throw ImageError("PNG: interlaced images are not supported");
      if (width == 0 || height == 0 || width > (1u << 16) || height > (1u << 16)) {
        throw ImageError("PNG: unsupported dimensions");
      }
      have_header = true;
    } else if (tag == "IDAT") {
      idat.insert(idat.end(), body, body + len);
    } else if (tag == "IEND") {
      have_end = true;
      break;
    } else if (!(type[0] & 0x20)) {
      throw ImageError("PNG: unknown critical chunk " + tag);
    }
    pos += 12 + len;
  }
  if (!have_header || !have_end) throw ImageError("PNG: truncated stream");

  const std::size_t stride = width * channels;
  std::vector<std::uint8_t> raw(height * (stride + 1));
  uLongf raw_len = static_cast<uLongf>(raw.size());
  const int rc = ::uncompress(raw.data(), &raw_len, idat.data(), static_cast<uLong>(idat.size()));
  if (rc != Z_OK || raw_len != raw.size()) throw ImageError("PNG: corrupt or truncated image data");

  std::vector<std::uint8_t> cur(stride), prev(stride, 0);
  RasterImage img(height, width);
  for (std::size_t y = 0; y < height; ++y) {
    const std::uint8_t filter = raw[y * (stride + 1)];
    const std::uint8_t* line = &raw[y * (stride + 1) + 1];
    for (std::size_t i = 0; i < stride; ++i) {
      const int a = i >= channels ? cur[i - channels] : 0;
      const int up = prev[i];
      const int c = i >= channels ? prev[i - channels] : 0;
      int v = line[i];
      switch (filter) {
        case 0: break;
        case 1: v += a; break;
        case 2: v += up; break;
        case 3: v += (a + up) / 2; break;
        case 4: v += paeth(a, up, c); break;
        default: throw ImageError("PNG: bad filter type " + std::to_string(filter));
      }
      cur[i] = static_cast<std::uint8_t>(v & 0xFF);
    }
    for (std::size_t x = 0; x < width; ++x)
      for (std::size_t ch = 0; ch < 3; ++ch) img.at(y, x, ch) = cur[x * channels + ch];
    std::swap(cur, prev);
  }
  return img;
}

}  // namespace detail

/// Decodes an in-memory PPM (P6) or PNG file.
inline RasterImage decode_image(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '6') return detail::decode_ppm(bytes);
  if (bytes.size() >= 8 && bytes[0] == 137 && bytes[1] == 'P') return detail::decode_png(bytes);
  throw ImageError("unrecognized image format");
}

inline RasterImage load_image(const std::filesystem::path& path) {
  try {
    return decode_image(detail::read_file(path));
  } catch (const ImageError& e) {
    throw ImageError(path.string() + ": " + e.what());
  }
}

inline std::vector<std::uint8_t> encode_ppm(const RasterImage& img) {
  validate(img);
  const std::string header =
      "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), img.pixels.begin(), img.pixels.end());
  return out;
}

inline void save_ppm(const RasterImage& img, const std::filesystem::path& path) {
  const auto bytes = encode_ppm(img);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ImageError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

namespace detail {

// Bilinear sample of channel c at continuous source coordinates, clamped to
// the image border.
inline float sample_bilinear(const RasterImage& img, double sy, double sx, std::size_t c) {
  sy = std::clamp(sy, 0.0, static_cast<double>(img.height - 1));
  sx = std::clamp(sx, 0.0, static_cast<double>(img.width - 1));
  const auto y0 = static_cast<std::size_t>(sy);
  const auto x0 = static_cast<std::size_t>(sx);
  const std::size_t y1 = std::min(y0 + 1, img.height - 1);
  const std::size_t x1 = std::min(x0 + 1, img.width - 1);
  const double fy = sy - static_cast<double>(y0);
  const double fx = sx - static_cast<double>(x0);
  const double top = img.at(y0, x0, c) * (1.0 - fx) + img.at(y0, x1, c) * fx;
  const double bot = img.at(y1, x0, c) * (1.0 - fx) + img.at(y1, x1, c) * fx;
  return static_cast<float>(top * (1.0 - fy) + bot * fy);
}

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
}

}  // namespace detail

/// Bilinear resize with half-pixel-center alignment.
inline RasterImage resize_bilinear(const RasterImage& img, std::size_t out_h, std::size_t out_w) {
  validate(img);
  if (out_h == 0 || out_w == 0) throw std::invalid_argument("resize_bilinear: zero output size");
  if (out_h == img.height && out_w == img.width) return img;
  RasterImage out(out_h, out_w);
  const double sy = static_cast<double>(img.height) / static_cast<double>(out_h);
  const double sx = static_cast<double>(img.width) / static_cast<double>(out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    const double src_y = (static_cast<double>(y) + 0.5) * sy - 0.5;
    for (std::size_t x = 0; x < out_w; ++x) {
      const double src_x = (static_cast<double>(x) + 0.5) * sx - 0.5;
      for (std::size_t c = 0; c < 3; ++c) {
        out.at(y, x, c) = detail::to_byte(detail::sample_bilinear(img, src_y, src_x, c));
      }
    }
  }
  return out;
}

/// Resizes so the shorter side equals `target`, preserving aspect ratio.
inline RasterImage resize_shorter_side(const RasterImage& img, std::size_t target) {
  validate(img);
  const std::size_t shorter = std::min(img.height, img.width);
  auto scaled = [&](std::size_t d) {
    return std::max<std::size_t>(
        1, static_cast<std::size_t>(std::lround(static_cast<double>(d) * target / shorter)));
  };
  const std::size_t h = img.height == shorter ? target : scaled(img.height);
  const std::size_t w = img.height == shorter ? scaled(img.width) : target;
  return resize_bilinear(img, h, w);
}

/// size x size window at offset floor((dim - size) / 2) on each axis.
inline RasterImage center_crop(const RasterImage& img, std::size_t size) {
  validate(img);
  if (size == 0 || size > img.height || size > img.width) {
    throw ImageError("center_crop: crop " + std::to_string(size) + " larger than image " +
                     std::to_string(img.height) + "x" + std::to_string(img.width));
  }
  const std::size_t oy = (img.height - size) / 2;
  const std::size_t ox = (img.width - size) / 2;
  RasterImage out(size, size);
  for (std::size_t y = 0; y < size; ++y) {
    const auto* src = &img.pixels[((oy + y) * img.width + ox) * 3];
    std::copy(src, src + size * 3, &out.pixels[y * size * 3]);
  }
  return out;
}

namespace detail {

// Channel-planar normalization of a float RGB buffer laid out HxWx3 in the
// 0..255 range.
inline ImageTensor normalize_planar(const std::vector<float>& hwc, std::size_t h, std::size_t w) {
  Tensor t({3, h, w});
  for (std::size_t c = 0; c < 3; ++c) {
    const float inv_std = 1.0f / kChannelStd[c];
    for (std::size_t i = 0; i < h * w; ++i) {
      t[c * h * w + i] = (hwc[i * 3 + c] / 255.0f - kChannelMean[c]) * inv_std;
    }
  }
  return ImageTensor(std::move(t));
}

}  // namespace detail

/// Per-channel (x/255 - mean) / std into a 3xHxW tensor.
inline ImageTensor normalize(const RasterImage& img) {
  validate(img);
  std::vector<float> hwc(img.pixels.begin(), img.pixels.end());
  return detail::normalize_planar(hwc, img.height, img.width);
}

/// Inverse of normalize, rounding to the nearest 8-bit level.
inline RasterImage denormalize(const ImageTensor& t) {
  const std::size_t h = t.height(), w = t.width();
  RasterImage img(h, w);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < h * w; ++i) {
      const double v = (t.tensor()[c * h * w + i] * kChannelStd[c] + kChannelMean[c]) * 255.0;
      img.pixels[i * 3 + c] = detail::to_byte(v);
    }
  return img;
}

/// Shorter-side length the extraction pipeline resizes to before the center
/// crop: 256 for 224 inputs, scaled proportionally for other input sizes.
inline std::size_t extraction_resize_target(std::size_t input_size) {
  return (input_size * 256 + 112) / 224;
}

/// Extraction preprocessing: shorter side to 256 (for 224 input), center crop,
/// normalize.
inline ImageTensor preprocess_for_extraction(const RasterImage& img, std::size_t input_size) {
  const RasterImage resized = resize_shorter_side(img, extraction_resize_target(input_size));
  return normalize(center_crop(resized, input_size));
}

/// Augmentation parameters for multi-crop views.
struct CropConfig {
  std::size_t global_size = 224;
  std::size_t local_size = 96;
  double global_scale_min = 0.4;
  double global_scale_max = 1.0;
  double local_scale_min = 0.05;
  double local_scale_max = 0.4;
  std::size_t local_views = 8;
  double flip_probability = 0.5;
  double brightness = 0.4;  // multiplicative factor drawn from [1 - b, 1 + b]
  double min_aspect = 3.0 / 4.0;
  double max_aspect = 4.0 / 3.0;
};

/// One random-resized-crop view: picks a region of random area fraction and
/// aspect ratio, resamples it to out_size, flips and jitters brightness.
inline ImageTensor random_view(const RasterImage& img, Rng& rng, std::size_t out_size,
                               double scale_min, double scale_max, const CropConfig& cfg) {
  validate(img);
  const double H = static_cast<double>(img.height), W = static_cast<double>(img.width);
  const double area = H * W;
  double ch = H, cw = W, oy = 0.0, ox = 0.0;
  bool found = false;
  for (int attempt = 0; attempt < 10 && !found; ++attempt) {
    const double target = area * rng.uniform(scale_min, scale_max);
    const double log_ratio = rng.uniform(std::log(cfg.min_aspect), std::log(cfg.max_aspect));
    const double ratio = std::exp(log_ratio);
    const double w = std::sqrt(target * ratio);
    const double h = std::sqrt(target / ratio);
    if (w <= W && h <= H) {
      cw = w;
      ch = h;
      oy = rng.uniform() * (H - h);
      ox = rng.uniform() * (W - w);
      found = true;
    }
  }
  if (!found) {
    const double s = std::min(H, W);
    ch = cw = s;
    oy = (H - s) / 2.0;
    ox = (W - s) / 2.0;
  }
  const bool flip = rng.bernoulli(cfg.flip_probability);
  const double gain = rng.uniform(1.0 - cfg.brightness, 1.0 + cfg.brightness);

  std::vector<float> hwc(out_size * out_size * 3);
  const double step_y = ch / static_cast<double>(out_size);
  const double step_x = cw / static_cast<double>(out_size);
  for (std::size_t y = 0; y < out_size; ++y) {
    const double sy = oy + (static_cast<double>(y) + 0.5) * step_y - 0.5;
    for (std::size_t x = 0; x < out_size; ++x) {
      const std::size_t dx = flip ? out_size - 1 - x : x;
      const double sx = ox + (static_cast<double>(dx) + 0.5) * step_x - 0.5;
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = detail::sample_bilinear(img, sy, sx, c) * gain;
        hwc[(y * out_size + x) * 3 + c] = static_cast<float>(std::clamp(v, 0.0, 255.0));
      }
    }
  }
  return detail::normalize_planar(hwc, out_size, out_size);
}

/// Two global views followed by cfg.local_views local views.
inline std::vector<ImageTensor> multi_crop(const RasterImage& img, Rng& rng, const CropConfig& cfg) {
  std::vector<ImageTensor> views;
  views.reserve(2 + cfg.local_views);
  for (int i = 0; i < 2; ++i) {
    views.push_back(random_view(img, rng, cfg.global_size, cfg.global_scale_min,
                                cfg.global_scale_max, cfg));
  }
  for (std::size_t i = 0; i < cfg.local_views; ++i) {
    views.push_back(random_view(img, rng, cfg.local_size, cfg.local_scale_min,
                                cfg.local_scale_max, cfg));
  }
  return views;
}

}  // namespace hedonic
