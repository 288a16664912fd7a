// Minimal dependency-free PNG codec.
//
// Writer emits 8-bit RGB, non-interlaced, with stored (uncompressed) deflate
// blocks: every byte of output is a pure function of the pixels, so dataset
// files are bit-identical across platforms and zlib versions.
//
// Reader handles non-interlaced 8-bit grayscale/RGB/RGBA with the full
// inflate format (stored, fixed and dynamic Huffman) and all five scanline
// filters, which covers files produced by standard encoders.
#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "adr/common.hpp"

namespace adr::png {

struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;  // width * height * 3
};

namespace detail {

inline std::uint32_t crc32(const std::uint8_t* data, std::size_t n, std::uint32_t crc = 0) {
  static const auto table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  crc ^= 0xffffffffu;
  for (std::size_t i = 0; i < n; ++i) crc = table[(crc ^ data[i]) & 0xffu] ^ (crc >> 8);
  return crc ^ 0xffffffffu;
}

inline std::uint32_t adler32(const std::uint8_t* data, std::size_t n) {
  std::uint32_t a = 1, b = 0;
  for (std::size_t i = 0; i < n; ++i) {
    a = (a + data[i]) % 65521u;
    b = (b + a) % 65521u;
  }
  return (b << 16) | a;
}

inline void put_u32be(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

inline void put_chunk(std::vector<std::uint8_t>& out, const char type[4],
                      const std::vector<std::uint8_t>& data) {
  put_u32be(out, static_cast<std::uint32_t>(data.size()));
  std::vector<std::uint8_t> body(type, type + 4);
  body.insert(body.end(), data.begin(), data.end());
  out.insert(out.end(), body.begin(), body.end());
  put_u32be(out, crc32(body.data(), body.size()));
}

// --- inflate ---------------------------------------------------------------

struct BitReader {
  const std::uint8_t* data;
  std::size_t size;
  std::size_t pos = 0;
  std::uint32_t bitbuf = 0;
  int bitcnt = 0;

  int bits(int need) {
    while (bitcnt < need) {
      if (pos >= size) throw ValidationError("png: truncated deflate stream");
      bitbuf |= static_cast<std::uint32_t>(data[pos++]) << bitcnt;
      bitcnt += 8;
    }
    const int v = static_cast<int>(bitbuf & ((1u << need) - 1));
    bitbuf >>= need;
    bitcnt -= need;
    return v;
  }
  void align_byte() {
    bitbuf = 0;
    bitcnt = 0;
  }
};

struct Huffman {
  std::array<int, 16> count{};
  std::vector<int> symbol;

  void build(const int* lengths, int n) {
    count.fill(0);
    for (int i = 0; i < n; ++i) ++count[static_cast<std::size_t>(lengths[i])];
    count[0] = 0;
    std::array<int, 16> offs{};
    for (int len = 1; len < 16; ++len) offs[static_cast<std::size_t>(len)] =
        offs[static_cast<std::size_t>(len - 1)] + count[static_cast<std::size_t>(len - 1)];
    symbol.assign(static_cast<std::size_t>(n), 0);
    for (int i = 0; i < n; ++i)
      if (lengths[i]) symbol[static_cast<std::size_t>(offs[static_cast<std::size_t>(lengths[i])]++)] = i;
  }

  int decode(BitReader& br) const {
    int code = 0, first = 0, index = 0;
    for (int len = 1; len < 16; ++len) {
      code |= br.bits(1);
      const int cnt = count[static_cast<std::size_t>(len)];
      if (code - first < cnt) return symbol[static_cast<std::size_t>(index + (code - first))];
      index += cnt;
      first = (first + cnt) << 1;
      code <<= 1;
    }
    throw ValidationError("png: invalid Huffman code");
  }
};

inline void inflate_block(BitReader& br, const Huffman& lit, const Huffman& dist,
                          std::vector<std::uint8_t>& out) {
  static const int len_base[29] = {3,  4,  5,  6,  7,  8,  9,  10, 11,  13,  15,  17,  19, 23, 27,
                                   31, 35, 43, 51, 59, 67, 83, 99, 115, 131, 163, 195, 227, 258};
  static const int len_extra[29] = {0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2,
                                    2, 3, 3, 3, 3, 4, 4, 4, 4, 5, 5, 5, 5, 0};
  static const int dist_base[30] = {1,    2,    3,    4,    5,    7,     9,     13,   17,   25,
                                    33,   49,   65,   97,   129,  193,   257,   385,  513,  769,
                                    1025, 1537, 2049, 3073, 4097, 6145,  8193,  12289, 16385, 24577};
  static const int dist_extra[30] = {0, 0, 0, 0, 1, 1, 2, 2, 3, 3, 4,  4,  5,  5,  6,
                                     6, 7, 7, 8, 8, 9, 9, 10, 10, 11, 11, 12, 12, 13, 13};
  for (;;) {
    const int sym = lit.decode(br);
    if (sym < 256) {
      out.push_back(static_cast<std::uint8_t>(sym));
    } else if (sym == 256) {
      return;
    } else {
      const int li = sym - 257;
      if (li >= 29) throw ValidationError("png: invalid length symbol");
      const int length = len_base[li] + br.bits(len_extra[li]);
      const int di = dist.decode(br);
      if (di >= 30) throw ValidationError("png: invalid distance symbol");
      const int distance = dist_base[di] + br.bits(dist_extra[di]);
      if (distance > static_cast<int>(out.size()))
        throw ValidationError("png: distance beyond output");
      const std::size_t start = out.size() - static_cast<std::size_t>(distance);
      for (int i = 0; i < length; ++i) out.push_back(out[start + static_cast<std::size_t>(i)]);
    }
  }
}

inline std::vector<std::uint8_t> inflate(const std::uint8_t* data, std::size_t n) {
  if (n < 2) throw ValidationError("png: zlib stream too short");
  if ((data[0] & 0x0f) != 8) throw ValidationError("png: unsupported zlib method");
  BitReader br{data + 2, n - 2};
  std::vector<std::uint8_t> out;
  for (;;) {
    const int bfinal = br.bits(1);
    const int btype = br.bits(2);
    if (btype == 0) {
      br.align_byte();
      if (br.pos + 4 > br.size) throw ValidationError("png: truncated stored block");
      const int len = br.data[br.pos] | (br.data[br.pos + 1] << 8);
      const int nlen = br.data[br.pos + 2] | (br.data[br.pos + 3] << 8);
      if ((len ^ 0xffff) != nlen) throw ValidationError("png: stored block length mismatch");
      br.pos += 4;
      if (br.pos + static_cast<std::size_t>(len) > br.size)
        throw ValidationError("png: truncated stored block data");
      out.insert(out.end(), br.data + br.pos, br.data + br.pos + len);
      br.pos += static_cast<std::size_t>(len);
    } else if (btype == 1) {
      static const auto fixed = [] {
        std::pair<Huffman, Huffman> h;
        int ll[288];
        for (int i = 0; i < 144; ++i) ll[i] = 8;
        for (int i = 144; i < 256; ++i) ll[i] = 9;
        for (int i = 256; i < 280; ++i) ll[i] = 7;
        for (int i = 280; i < 288; ++i) ll[i] = 8;
        h.first.build(ll, 288);
        int dl[30];
        for (int i = 0; i < 30; ++i) dl[i] = 5;
        h.second.build(dl, 30);
        return h;
      }();
      inflate_block(br, fixed.first, fixed.second, out);
    } else if (btype == 2) {
      const int hlit = br.bits(5) + 257;
      const int hdist = br.bits(5) + 1;
      const int hclen = br.bits(4) + 4;
      static const int order[19] = {16, 17, 18, 0, 8, 7, 9, 6, 10, 5, 11, 4, 12, 3, 13, 2, 14, 1, 15};
      int cl[19] = {0};
      for (int i = 0; i < hclen; ++i) cl[order[i]] = br.bits(3);
      Huffman clh;
      clh.build(cl, 19);
      std::vector<int> lengths(static_cast<std::size_t>(hlit + hdist), 0);
      for (int i = 0; i < hlit + hdist;) {
        const int sym = clh.decode(br);
        if (sym < 16) {
          lengths[static_cast<std::size_t>(i++)] = sym;
        } else if (sym == 16) {
          if (i == 0) throw ValidationError("png: repeat with no previous length");
          const int prev = lengths[static_cast<std::size_t>(i - 1)];
          for (int r = 3 + br.bits(2); r > 0 && i < hlit + hdist; --r)
            lengths[static_cast<std::size_t>(i++)] = prev;
        } else if (sym == 17) {
          for (int r = 3 + br.bits(3); r > 0 && i < hlit + hdist; --r)
            lengths[static_cast<std::size_t>(i++)] = 0;
        } else {
          for (int r = 11 + br.bits(7); r > 0 && i < hlit + hdist; --r)
            lengths[static_cast<std::size_t>(i++)] = 0;
        }
      }
      Huffman lit, dist;
      lit.build(lengths.data(), hlit);
      dist.build(lengths.data() + hlit, hdist);
      inflate_block(br, lit, dist, out);
    } else {
      throw ValidationError("png: invalid deflate block type");
    }
    if (bfinal) break;
  }
  return out;
}

inline std::uint8_t paeth(int a, int b, int c) {
  const int p = a + b - c;
  const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return static_cast<std::uint8_t>(a);
  if (pb <= pc) return static_cast<std::uint8_t>(b);
  return static_cast<std::uint8_t>(c);
}

}  // namespace detail

inline std::vector<std::uint8_t> encode(const Image& img) {
  if (img.width <= 0 || img.height <= 0 ||
      img.rgb.size() != static_cast<std::size_t>(img.width) * img.height * 3)
    throw ValidationError("png: image buffer does not match dimensions");

  std::vector<std::uint8_t> out = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};

  std::vector<std::uint8_t> ihdr;
  detail::put_u32be(ihdr, static_cast<std::uint32_t>(img.width));
  detail::put_u32be(ihdr, static_cast<std::uint32_t>(img.height));
  ihdr.push_back(8);   // bit depth
  ihdr.push_back(2);   // color type: RGB
  ihdr.push_back(0);   // compression
  ihdr.push_back(0);   // filter
  ihdr.push_back(0);   // interlace
  detail::put_chunk(out, "IHDR", ihdr);

  // Raw scanlines with filter byte 0.
  const std::size_t stride = static_cast<std::size_t>(img.width) * 3;
  std::vector<std::uint8_t> raw;
  raw.reserve((stride + 1) * static_cast<std::size_t>(img.height));
  for (int y = 0; y < img.height; ++y) {
    raw.push_back(0);
    raw.insert(raw.end(), img.rgb.begin() + static_cast<std::ptrdiff_t>(stride) * y,
               img.rgb.begin() + static_cast<std::ptrdiff_t>(stride) * (y + 1));
  }

  std::vector<std::uint8_t> idat = {0x78, 0x01};  // zlib header, no compression hints
  std::size_t off = 0;
  while (off < raw.size() || raw.empty()) {
    const std::size_t chunk = std::min<std::size_t>(65535, raw.size() - off);
    const bool final = off + chunk == raw.size();
    idat.push_back(final ? 1 : 0);
    idat.push_back(static_cast<std::uint8_t>(chunk & 0xff));
    idat.push_back(static_cast<std::uint8_t>(chunk >> 8));
    idat.push_back(static_cast<std::uint8_t>(~chunk & 0xff));
    idat.push_back(static_cast<std::uint8_t>((~chunk >> 8) & 0xff));
    idat.insert(idat.end(), raw.begin() + static_cast<std::ptrdiff_t>(off),
                raw.begin() + static_cast<std::ptrdiff_t>(off + chunk));
    off += chunk;
    if (final) break;
  }
  detail::put_u32be(idat, detail::adler32(raw.data(), raw.size()));
  detail::put_chunk(out, "IDAT", idat);
  detail::put_chunk(out, "IEND", {});
  return out;
}

inline void write_file(const std::string& path, const Image& img) {
  const auto bytes = encode(img);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ValidationError("png: cannot open for writing: " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw ValidationError("png: write failed: " + path);
}

inline Image decode(const std::uint8_t* bytes, std::size_t n) {
  static const std::uint8_t sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  if (n < 8 || std::memcmp(bytes, sig, 8) != 0) throw ValidationError("png: bad signature");

  int width = 0, height = 0, bit_depth = 0, color_type = 0, interlace = 0;
  std::vector<std::uint8_t> idat;
  std::size_t pos = 8;
  bool saw_end = false;
  while (pos + 8 <= n && !saw_end) {
    const std::uint32_t len = (static_cast<std::uint32_t>(bytes[pos]) << 24) |
                              (static_cast<std::uint32_t>(bytes[pos + 1]) << 16) |
                              (static_cast<std::uint32_t>(bytes[pos + 2]) << 8) |
                              static_cast<std::uint32_t>(bytes[pos + 3]);
    const char* type = reinterpret_cast<const char*>(bytes + pos + 4);
    if (pos + 12 + len > n) throw ValidationError("png: truncated chunk");
    const std::uint8_t* data = bytes + pos + 8;
    if (std::memcmp(type, "IHDR", 4) == 0) {
      width = (data[0] << 24) | (data[1] << 16) | (data[2] << 8) | data[3];
      height = (data[4] << 24) | (data[5] << 16) | (data[6] << 8) | data[7];
      bit_depth = data[8];
      color_type = data[9];
      interlace = data[12];
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      idat.insert(idat.end(), data, data + len);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      saw_end = true;
    }
    pos += 12 + len;
  }
  if (width <= 0 || height <= 0) throw ValidationError("png: missing or invalid IHDR");
  if (bit_depth != 8) throw ValidationError("png: only 8-bit depth supported");
  if (interlace != 0) throw ValidationError("png: interlaced files not supported");
  int channels;
  switch (color_type) {
    case 0: channels = 1; break;
    case 2: channels = 3; break;
    case 6: channels = 4; break;
    default: throw ValidationError(format_msg("png: unsupported color type ", color_type));
  }

  auto raw = detail::inflate(idat.data(), idat.size());
  const std::size_t stride = static_cast<std::size_t>(width) * static_cast<std::size_t>(channels);
  if (raw.size() != (stride + 1) * static_cast<std::size_t>(height))
    throw ValidationError("png: decompressed size mismatch");

  // Undo scanline filters in place into `pixels`.
  std::vector<std::uint8_t> pixels(stride * static_cast<std::size_t>(height));
  for (int y = 0; y < height; ++y) {
    const std::uint8_t filter = raw[(stride + 1) * static_cast<std::size_t>(y)];
    const std::uint8_t* src = raw.data() + (stride + 1) * static_cast<std::size_t>(y) + 1;
    std::uint8_t* dst = pixels.data() + stride * static_cast<std::size_t>(y);
    const std::uint8_t* up = y > 0 ? pixels.data() + stride * static_cast<std::size_t>(y - 1) : nullptr;
    for (std::size_t i = 0; i < stride; ++i) {
      const int a = i >= static_cast<std::size_t>(channels) ? dst[i - static_cast<std::size_t>(channels)] : 0;
      const int b = up ? up[i] : 0;
      const int c = (up && i >= static_cast<std::size_t>(channels))
                        ? up[i - static_cast<std::size_t>(channels)]
                        : 0;
      int v = src[i];
      switch (filter) {
        case 0: break;
        case 1: v += a; break;
        case 2: v += b; break;
        case 3: v += (a + b) / 2; break;
        case 4: v += detail::paeth(a, b, c); break;
        default: throw ValidationError("png: unknown scanline filter");
      }
      dst[i] = static_cast<std::uint8_t>(v & 0xff);
    }
  }

  Image img;
  img.width = width;
  img.height = height;
  img.rgb.resize(static_cast<std::size_t>(width) * height * 3);
  for (std::size_t p = 0; p < static_cast<std::size_t>(width) * height; ++p) {
    if (channels == 1) {
      img.rgb[p * 3] = img.rgb[p * 3 + 1] = img.rgb[p * 3 + 2] = pixels[p];
    } else {
      img.rgb[p * 3] = pixels[p * static_cast<std::size_t>(channels)];
      img.rgb[p * 3 + 1] = pixels[p * static_cast<std::size_t>(channels) + 1];
      img.rgb[p * 3 + 2] = pixels[p * static_cast<std::size_t>(channels) + 2];
    }
  }
  return img;
}

inline Image read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ValidationError("png: cannot open: " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  return decode(bytes.data(), bytes.size());
}

}  // namespace adr::png
