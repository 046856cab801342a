#pragma once

#include <zlib.h>

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "genpass/errors.hpp"
#include "genpass/tensor.hpp"

// 8-bit grayscale PNG input/output, implemented directly against zlib so the
// byte stream is fully under our control (reruns with the same seed must
// produce identical files).

namespace genpass {
namespace detail {

inline void put_u32_be(std::vector<unsigned char>& out, std::uint32_t v) {
  out.push_back(static_cast<unsigned char>(v >> 24));
  out.push_back(static_cast<unsigned char>(v >> 16));
  out.push_back(static_cast<unsigned char>(v >> 8));
  out.push_back(static_cast<unsigned char>(v));
}

inline std::uint32_t read_u32_be(const unsigned char* p) {
  return (static_cast<std::uint32_t>(p[0]) << 24) |
         (static_cast<std::uint32_t>(p[1]) << 16) |
         (static_cast<std::uint32_t>(p[2]) << 8) | p[3];
}

inline void append_chunk(std::vector<unsigned char>& out, const char type[4],
                         const std::vector<unsigned char>& data) {
  put_u32_be(out, static_cast<std::uint32_t>(data.size()));
  std::vector<unsigned char> body(type, type + 4);
  body.insert(body.end(), data.begin(), data.end());
  out.insert(out.end(), body.begin(), body.end());
  const auto crc =
      crc32(0L, body.data(), static_cast<uInt>(body.size()));
  put_u32_be(out, static_cast<std::uint32_t>(crc));
}

inline unsigned char paeth(int a, int b, int c) {
  const int p = a + b - c;
  const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return static_cast<unsigned char>(a);
  if (pb <= pc) return static_cast<unsigned char>(b);
  return static_cast<unsigned char>(c);
}

}  // namespace detail

// Writes a 1xHxW tensor as grayscale PNG. Values are clamped to [0, 1] and
// quantized to 8 bits.
inline void write_png_gray8(const std::filesystem::path& path,
                            const Tensor& t) {
  if (t.channels() != 1)
    throw InputError("write_png_gray8: expected 1 channel, got " +
                     t.shape_str());
  const int h = t.height(), w = t.width();
  if (h <= 0 || w <= 0) throw InputError("write_png_gray8: empty image");

  std::vector<unsigned char> raw(static_cast<std::size_t>(h) * (w + 1));
  std::size_t p = 0;
  for (int y = 0; y < h; ++y) {
    raw[p++] = 0;  // filter type: none
    for (int x = 0; x < w; ++x) {
      const double v = std::clamp(t.at(0, y, x), 0.0, 1.0);
      raw[p++] = static_cast<unsigned char>(std::lround(v * 255.0));
    }
  }

  uLongf comp_len = compressBound(static_cast<uLong>(raw.size()));
  std::vector<unsigned char> comp(comp_len);
  if (compress2(comp.data(), &comp_len, raw.data(),
                static_cast<uLong>(raw.size()), 9) != Z_OK)
    throw IoError("write_png_gray8: deflate failed");
  comp.resize(comp_len);

  std::vector<unsigned char> file;
  const unsigned char sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
  file.insert(file.end(), sig, sig + 8);

  std::vector<unsigned char> ihdr;
  detail::put_u32_be(ihdr, static_cast<std::uint32_t>(w));
  detail::put_u32_be(ihdr, static_cast<std::uint32_t>(h));
  ihdr.push_back(8);  // bit depth
  ihdr.push_back(0);  // grayscale
  ihdr.push_back(0);  // compression
  ihdr.push_back(0);  // filter method
  ihdr.push_back(0);  // no interlace
  detail::append_chunk(file, "IHDR", ihdr);
  detail::append_chunk(file, "IDAT", comp);
  detail::append_chunk(file, "IEND", {});

  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("write_png_gray8: cannot open " + path.string());
  os.write(reinterpret_cast<const char*>(file.data()),
           static_cast<std::streamsize>(file.size()));
  if (!os) throw IoError("write_png_gray8: write failed for " + path.string());
}

// Reads an 8-bit grayscale PNG into a 1xHxW tensor with values in [0, 1].
// All five scanline filter types are handled; color, palette and interlaced
// files are rejected.
inline Tensor read_png_gray8(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("read_png_gray8: cannot open " + path.string());
  std::vector<unsigned char> file((std::istreambuf_iterator<char>(is)),
                                  std::istreambuf_iterator<char>());
  const unsigned char sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
  if (file.size() < 8 || std::memcmp(file.data(), sig, 8) != 0)
    throw IoError("read_png_gray8: not a PNG: " + path.string());

  int w = 0, h = 0;
  bool seen_ihdr = false, seen_iend = false;
  std::vector<unsigned char> idat;
  std::size_t pos = 8;
  while (pos + 8 <= file.size() && !seen_iend) {
    const std::uint32_t len = detail::read_u32_be(&file[pos]);
    if (pos + 12 + len > file.size())
      throw IoError("read_png_gray8: truncated chunk in " + path.string());
    const char* type = reinterpret_cast<const char*>(&file[pos + 4]);
    const unsigned char* data = &file[pos + 8];
    if (std::memcmp(type, "IHDR", 4) == 0) {
      if (len != 13) throw IoError("read_png_gray8: bad IHDR");
      w = static_cast<int>(detail::read_u32_be(data));
      h = static_cast<int>(detail::read_u32_be(data + 4));
      const int depth = data[8], color = data[9], interlace = data[12];
      if (depth != 8 || color != 0)
        throw IoError("read_png_gray8: only 8-bit grayscale supported");
      if (interlace != 0)
        throw IoError("read_png_gray8: interlaced files not supported");
      seen_ihdr = true;
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      idat.insert(idat.end(), data, data + len);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      seen_iend = true;
    }
    pos += 12 + len;
  }
  if (!seen_ihdr || !seen_iend || w <= 0 || h <= 0 || idat.empty())
    throw IoError("read_png_gray8: malformed PNG: " + path.string());

  std::vector<unsigned char> raw(static_cast<std::size_t>(h) * (w + 1));
  uLongf raw_len = static_cast<uLongf>(raw.size());
  if (uncompress(raw.data(), &raw_len, idat.data(),
                 static_cast<uLong>(idat.size())) != Z_OK ||
      raw_len != raw.size())
    throw IoError("read_png_gray8: inflate failed for " + path.string());

  // Undo the per-row filter. bpp is 1, so "left" is simply the previous byte
  // in the row.
  std::vector<unsigned char> pix(static_cast<std::size_t>(h) * w);
  for (int y = 0; y < h; ++y) {
    const unsigned char ftype = raw[static_cast<std::size_t>(y) * (w + 1)];
    const unsigned char* src = &raw[static_cast<std::size_t>(y) * (w + 1) + 1];
    unsigned char* dst = &pix[static_cast<std::size_t>(y) * w];
    const unsigned char* up =
        y > 0 ? &pix[static_cast<std::size_t>(y - 1) * w] : nullptr;
    for (int x = 0; x < w; ++x) {
      const int a = x > 0 ? dst[x - 1] : 0;
      const int b = up ? up[x] : 0;
      const int c = (x > 0 && up) ? up[x - 1] : 0;
      int v = src[x];
      switch (ftype) {
        case 0: break;
        case 1: v += a; break;
        case 2: v += b; break;
        case 3: v += (a + b) / 2; break;
        case 4: v += detail::paeth(a, b, c); break;
        default:
          throw IoError("read_png_gray8: unknown filter type " +
                        std::to_string(ftype));
      }
      dst[x] = static_cast<unsigned char>(v & 0xff);
    }
  }

  Tensor out(1, h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      out.at(0, y, x) = pix[static_cast<std::size_t>(y) * w + x] / 255.0;
  return out;
}

// Resamples about the canvas center, keeping the canvas size. scale > 1
// magnifies the content (edges crop away), scale < 1 shrinks it (zeros fill
// the border). scale == 1 reproduces the input exactly.
inline Tensor bilinear_rescale(const Tensor& t, double scale) {
  if (!(scale > 0.0)) throw InputError("bilinear_rescale: scale must be > 0");
  Tensor out(t.channels(), t.height(), t.width());
  const double cy = (t.height() - 1) / 2.0;
  const double cx = (t.width() - 1) / 2.0;
  for (int c = 0; c < t.channels(); ++c) {
    for (int y = 0; y < t.height(); ++y) {
      const double sy = (y - cy) / scale + cy;
      const int y0 = static_cast<int>(std::floor(sy));
      const double fy = sy - y0;
      for (int x = 0; x < t.width(); ++x) {
        const double sx = (x - cx) / scale + cx;
        const int x0 = static_cast<int>(std::floor(sx));
        const double fx = sx - x0;
        auto sample = [&](int yy, int xx) {
          if (yy < 0 || yy >= t.height() || xx < 0 || xx >= t.width())
            return 0.0;
          return t.at(c, yy, xx);
        };
        out.at(c, y, x) = (1 - fy) * ((1 - fx) * sample(y0, x0) +
                                      fx * sample(y0, x0 + 1)) +
                          fy * ((1 - fx) * sample(y0 + 1, x0) +
                                fx * sample(y0 + 1, x0 + 1));
      }
    }
  }
  return out;
}

// Tiles single-channel images of equal size into a grid, left to right then
// top to bottom, separated by `gap` pixels of `gap_value`.
inline Tensor montage(const std::vector<Tensor>& tiles, int cols, int gap = 2,
                      double gap_value = 0.25) {
  if (tiles.empty()) throw InputError("montage: no tiles");
  if (cols < 1) throw InputError("montage: cols must be >= 1");
  const int th = tiles[0].height(), tw = tiles[0].width();
  for (const Tensor& t : tiles) {
    if (t.channels() != 1 || t.height() != th || t.width() != tw)
      throw InputError("montage: tiles must be 1-channel and equally sized");
  }
  const int n = static_cast<int>(tiles.size());
  const int rows = (n + cols - 1) / cols;
  Tensor out(1, rows * th + (rows + 1) * gap, cols * tw + (cols + 1) * gap,
             gap_value);
  for (int i = 0; i < n; ++i) {
    const int r = i / cols, c = i % cols;
    const int oy = gap + r * (th + gap), ox = gap + c * (tw + gap);
    for (int y = 0; y < th; ++y)
      for (int x = 0; x < tw; ++x)
        out.at(0, oy + y, ox + x) = tiles[i].at(0, y, x);
  }
  return out;
}

}  // namespace genpass
