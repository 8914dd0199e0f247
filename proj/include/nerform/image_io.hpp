#pragma once

// Raster file formats: binary PPM (P6) with gamma encoding for color, binary
// PGM (P5) for masks and gray maps, and a little-endian f32 depth raster with
// a 16-byte header ("NFDP", version, width, height).

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

#include "nerform/check.hpp"
#include "nerform/tensor.hpp"

namespace nf {

inline double gamma_encode(double v) { return std::pow(std::clamp(v, 0.0, 1.0), 1.0 / 2.2); }
inline double gamma_decode(double v) { return std::pow(std::clamp(v, 0.0, 1.0), 2.2); }

// Quantize a linear intensity onto the 8-bit gamma-encoded grid and return
// the decoded value; images pre-quantized this way survive PPM round-trips
// bit-exactly.
inline double quantize_8bit(double v) {
  const int b = int(std::lround(255.0 * gamma_encode(v)));
  return gamma_decode(double(b) / 255.0);
}

namespace detail {

inline void write_bytes(std::ofstream& out, const void* p, std::size_t n) {
  out.write(static_cast<const char*>(p), std::streamsize(n));
}

inline std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  NF_CHECK(out.good(), "cannot open '" << p.string() << "' for writing");
  return out;
}

inline std::ifstream open_in(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  NF_CHECK(in.good(), "cannot open '" << p.string() << "' for reading");
  return in;
}

// Reads one whitespace-delimited token, skipping '#' comments (PNM headers).
inline std::string pnm_token(std::istream& in) {
  std::string tok;
  int c = in.get();
  while (c != EOF) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = in.get();
    } else if (std::isspace(c)) {
      c = in.get();
    } else {
      break;
    }
  }
  while (c != EOF && !std::isspace(c)) {
    tok.push_back(char(c));
    c = in.get();
  }
  NF_CHECK(!tok.empty(), "truncated PNM header");
  return tok;
}

}  // namespace detail

// image is [H, W, 3] linear values; bytes are gamma-encoded.
inline void write_ppm(const std::filesystem::path& path, const Tensor& image) {
  NF_CHECK(image.shape.rank == 3 && image.shape[2] == 3,
           "PPM writer expects [H,W,3], got " << image.shape.str());
  const i64 h = image.shape[0], w = image.shape[1];
  auto out = detail::open_out(path);
  out << "P6\n" << w << " " << h << "\n255\n";
  std::string buf(std::size_t(h * w * 3), '\0');
  for (i64 i = 0; i < h * w * 3; ++i)
    buf[std::size_t(i)] = char(std::lround(255.0 * gamma_encode(image.at(i))));
  detail::write_bytes(out, buf.data(), buf.size());
  NF_CHECK(out.good(), "write failed for '" << path.string() << "'");
}

inline Tensor read_ppm(const std::filesystem::path& path) {
  auto in = detail::open_in(path);
  NF_CHECK(detail::pnm_token(in) == "P6", "'" << path.string() << "' is not a binary PPM");
  const i64 w = std::stoll(detail::pnm_token(in));
  const i64 h = std::stoll(detail::pnm_token(in));
  NF_CHECK(detail::pnm_token(in) == "255", "only 8-bit PPM supported");
  NF_CHECK(w > 0 && h > 0, "bad raster size in '" << path.string() << "'");
  std::string buf(std::size_t(h * w * 3), '\0');
  in.read(buf.data(), std::streamsize(buf.size()));
  NF_CHECK(in.gcount() == std::streamsize(buf.size()), "truncated PPM '" << path.string() << "'");
  Tensor image = Tensor::zeros(Shape{h, w, 3});
  for (i64 i = 0; i < h * w * 3; ++i)
    image.at(i) = gamma_decode(double(std::uint8_t(buf[std::size_t(i)])) / 255.0);
  return image;
}

// gray is [H, W] in [0,1]; stored linearly (masks, attention maps).
inline void write_pgm(const std::filesystem::path& path, const Tensor& gray) {
  NF_CHECK(gray.shape.rank == 2, "PGM writer expects [H,W], got " << gray.shape.str());
  const i64 h = gray.shape[0], w = gray.shape[1];
  auto out = detail::open_out(path);
  out << "P5\n" << w << " " << h << "\n255\n";
  std::string buf(std::size_t(h * w), '\0');
  for (i64 i = 0; i < h * w; ++i)
    buf[std::size_t(i)] = char(std::lround(255.0 * std::clamp(gray.at(i), 0.0, 1.0)));
  detail::write_bytes(out, buf.data(), buf.size());
  NF_CHECK(out.good(), "write failed for '" << path.string() << "'");
}

inline Tensor read_pgm(const std::filesystem::path& path) {
  auto in = detail::open_in(path);
  NF_CHECK(detail::pnm_token(in) == "P5", "'" << path.string() << "' is not a binary PGM");
  const i64 w = std::stoll(detail::pnm_token(in));
  const i64 h = std::stoll(detail::pnm_token(in));
  NF_CHECK(detail::pnm_token(in) == "255", "only 8-bit PGM supported");
  NF_CHECK(w > 0 && h > 0, "bad raster size in '" << path.string() << "'");
  std::string buf(std::size_t(h * w), '\0');
  in.read(buf.data(), std::streamsize(buf.size()));
  NF_CHECK(in.gcount() == std::streamsize(buf.size()), "truncated PGM '" << path.string() << "'");
  Tensor gray = Tensor::zeros(Shape{h, w});
  for (i64 i = 0; i < h * w; ++i) gray.at(i) = double(std::uint8_t(buf[std::size_t(i)])) / 255.0;
  return gray;
}

// depth is [H, W] world units, stored as little-endian f32 after a 16-byte
// header: magic "NFDP", u32 version, u32 width, u32 height.
inline void write_depth(const std::filesystem::path& path, const Tensor& depth) {
  NF_CHECK(depth.shape.rank == 2, "depth writer expects [H,W], got " << depth.shape.str());
  const i64 h = depth.shape[0], w = depth.shape[1];
  auto out = detail::open_out(path);
  const char magic[4] = {'N', 'F', 'D', 'P'};
  const std::uint32_t version = 1, uw = std::uint32_t(w), uh = std::uint32_t(h);
  detail::write_bytes(out, magic, 4);
  detail::write_bytes(out, &version, 4);
  detail::write_bytes(out, &uw, 4);
  detail::write_bytes(out, &uh, 4);
  std::vector<float> buf(std::size_t(h * w));
  for (i64 i = 0; i < h * w; ++i) buf[std::size_t(i)] = float(depth.at(i));
  detail::write_bytes(out, buf.data(), buf.size() * 4);
  NF_CHECK(out.good(), "write failed for '" << path.string() << "'");
}

inline Tensor read_depth(const std::filesystem::path& path) {
  auto in = detail::open_in(path);
  char magic[4];
  std::uint32_t version = 0, uw = 0, uh = 0;
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(&version), 4);
  in.read(reinterpret_cast<char*>(&uw), 4);
  in.read(reinterpret_cast<char*>(&uh), 4);
  NF_CHECK(in.good() && std::memcmp(magic, "NFDP", 4) == 0,
           "'" << path.string() << "' is not a depth raster");
  NF_CHECK(version == 1, "unsupported depth raster version " << version);
  NF_CHECK(uw > 0 && uh > 0, "bad raster size in '" << path.string() << "'");
  std::vector<float> buf(std::size_t(uw) * uh);
  in.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size() * 4));
  NF_CHECK(in.gcount() == std::streamsize(buf.size() * 4),
           "truncated depth raster '" << path.string() << "'");
  Tensor depth = Tensor::zeros(Shape{i64(uh), i64(uw)});
  for (std::size_t i = 0; i < buf.size(); ++i) depth.at(i64(i)) = double(buf[i]);
  return depth;
}

}  // namespace nf
