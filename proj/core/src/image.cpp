#include "angio/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <vector>

#include "angio/error.hpp"

namespace angio::pnm {

namespace {

constexpr double kInv8 = 1.0 / 255.0;
constexpr double kInv16 = 1.0 / 65535.0;

std::uint16_t quantize(double v, int maxval) {
  const double c = std::clamp(v, 0.0, 1.0);
  return static_cast<std::uint16_t>(std::lround(c * maxval));
}

void write_header(std::ofstream& out, const char* magic, int w, int h, int maxval) {
  out << magic << "\n" << w << " " << h << "\n";
  if (maxval > 0) out << maxval << "\n";
}

void write_samples(std::ofstream& out, const std::vector<std::uint16_t>& s, int maxval) {
  if (maxval > 255) {
    std::vector<unsigned char> bytes(s.size() * 2);
    for (std::size_t i = 0; i < s.size(); ++i) {
      bytes[2 * i] = static_cast<unsigned char>(s[i] >> 8);
      bytes[2 * i + 1] = static_cast<unsigned char>(s[i] & 0xff);
    }
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
  } else {
    std::vector<unsigned char> bytes(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) bytes[i] = static_cast<unsigned char>(s[i]);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
  }
}

int skip_ws_and_comments(std::istream& in) {
  int c = in.get();
  while (c == '#' || std::isspace(c)) {
    if (c == '#') {
      while (c != '\n' && c != EOF) c = in.get();
    }
    c = in.get();
  }
  return c;
}

int read_int(std::istream& in) {
  int c = skip_ws_and_comments(in);
  require(std::isdigit(c), "parse", "malformed PNM header");
  int value = 0;
  while (std::isdigit(c)) {
    value = value * 10 + (c - '0');
    c = in.get();
  }
  return value;
}

std::vector<std::uint16_t> read_samples(std::istream& in, std::size_t n, int maxval) {
  std::vector<std::uint16_t> s(n);
  if (maxval > 255) {
    std::vector<unsigned char> bytes(n * 2);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    require(static_cast<std::size_t>(in.gcount()) == bytes.size(), "parse", "truncated PNM data");
    for (std::size_t i = 0; i < n; ++i)
      s[i] = static_cast<std::uint16_t>((bytes[2 * i] << 8) | bytes[2 * i + 1]);
  } else {
    std::vector<unsigned char> bytes(n);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    require(static_cast<std::size_t>(in.gcount()) == bytes.size(), "parse", "truncated PNM data");
    for (std::size_t i = 0; i < n; ++i) s[i] = bytes[i];
  }
  return s;
}

std::ofstream open_out(const std::filesystem::path& file) {
  std::ofstream out(file, std::ios::binary);
  require(out.good(), "io", "cannot open for writing: " + file.string());
  return out;
}

std::ifstream open_in(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  require(in.good(), "missing_file", "cannot open: " + file.string());
  return in;
}

}  // namespace

void write_gray(const std::filesystem::path& file, const Tensor& img, int bit_depth) {
  require(img.ndim() == 2, "shape", "write_gray expects {H,W}");
  require(bit_depth == 8 || bit_depth == 16, "io", "bit_depth must be 8 or 16");
  const int maxval = bit_depth == 8 ? 255 : 65535;
  auto out = open_out(file);
  write_header(out, "P5", img.dim(1), img.dim(0), maxval);
  std::vector<std::uint16_t> s(img.v.size());
  for (std::size_t i = 0; i < img.v.size(); ++i) s[i] = quantize(img.v[i], maxval);
  write_samples(out, s, maxval);
  require(out.good(), "io", "write failed: " + file.string());
}

void write_color(const std::filesystem::path& file, const Tensor& img, int bit_depth) {
  require(img.ndim() == 3 && img.dim(0) == 3, "shape", "write_color expects {3,H,W}");
  require(bit_depth == 8 || bit_depth == 16, "io", "bit_depth must be 8 or 16");
  const int maxval = bit_depth == 8 ? 255 : 65535;
  const int h = img.dim(1), w = img.dim(2);
  auto out = open_out(file);
  write_header(out, "P6", w, h, maxval);
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  std::vector<std::uint16_t> s(hw * 3);
  for (std::size_t i = 0; i < hw; ++i)
    for (int c = 0; c < 3; ++c) s[i * 3 + c] = quantize(img.v[c * hw + i], maxval);
  write_samples(out, s, maxval);
  require(out.good(), "io", "write failed: " + file.string());
}

void write_bitmap(const std::filesystem::path& file, const Tensor& mask) {
  require(mask.ndim() == 2, "shape", "write_bitmap expects {H,W}");
  const int h = mask.dim(0), w = mask.dim(1);
  auto out = open_out(file);
  write_header(out, "P4", w, h, 0);
  const int row_bytes = (w + 7) / 8;
  std::vector<unsigned char> bytes(static_cast<std::size_t>(row_bytes) * h, 0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (mask.v[static_cast<std::size_t>(y) * w + x] >= 0.5)
        bytes[static_cast<std::size_t>(y) * row_bytes + x / 8] |=
            static_cast<unsigned char>(0x80 >> (x % 8));
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  require(out.good(), "io", "write failed: " + file.string());
}

namespace {

Tensor read_impl(const std::filesystem::path& file, int expect_channels) {
  auto in = open_in(file);
  char p = static_cast<char>(in.get());
  char kind = static_cast<char>(in.get());
  require(p == 'P' && (kind == '4' || kind == '5' || kind == '6'), "parse",
          "not a binary PNM file: " + file.string());
  const int w = read_int(in);
  const int h = read_int(in);

  if (kind == '4') {
    require(expect_channels <= 1, "parse", "expected color image, got bitmap: " + file.string());
    const int row_bytes = (w + 7) / 8;
    std::vector<unsigned char> bytes(static_cast<std::size_t>(row_bytes) * h);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    require(static_cast<std::size_t>(in.gcount()) == bytes.size(), "parse",
            "truncated PBM data: " + file.string());
    Tensor img({h, w});
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        img.v[static_cast<std::size_t>(y) * w + x] =
            (bytes[static_cast<std::size_t>(y) * row_bytes + x / 8] & (0x80 >> (x % 8))) ? 1.0
                                                                                         : 0.0;
    return img;
  }

  const int maxval = read_int(in);
  require(maxval == 255 || maxval == 65535, "parse",
          "unsupported PNM maxval (want 255 or 65535): " + file.string());
  const double inv = maxval == 255 ? kInv8 : kInv16;
  const std::size_t hw = static_cast<std::size_t>(h) * w;

  if (kind == '5') {
    require(expect_channels != 3, "parse", "expected color image, got gray: " + file.string());
    auto s = read_samples(in, hw, maxval);
    Tensor img({h, w});
    for (std::size_t i = 0; i < hw; ++i) img.v[i] = s[i] * inv;
    return img;
  }
  require(expect_channels != 1, "parse", "expected gray image, got color: " + file.string());
  auto s = read_samples(in, hw * 3, maxval);
  Tensor img({3, h, w});
  for (std::size_t i = 0; i < hw; ++i)
    for (int c = 0; c < 3; ++c) img.v[c * hw + i] = s[i * 3 + c] * inv;
  return img;
}

}  // namespace

Tensor read_gray(const std::filesystem::path& file) { return read_impl(file, 1); }
Tensor read_color(const std::filesystem::path& file) { return read_impl(file, 3); }
Tensor read_bitmap(const std::filesystem::path& file) { return read_impl(file, 1); }
Tensor read_auto(const std::filesystem::path& file) { return read_impl(file, 0); }

}  // namespace angio::pnm

namespace angio {

Tensor resize_bilinear(const Tensor& img, int out_h, int out_w) {
  require(img.ndim() == 2 || img.ndim() == 3, "shape", "resize expects {H,W} or {C,H,W}");
  require(out_h >= 1 && out_w >= 1, "shape", "resize target must be positive");
  const int c = img.ndim() == 3 ? img.dim(0) : 1;
  const int h = img.ndim() == 3 ? img.dim(1) : img.dim(0);
  const int w = img.ndim() == 3 ? img.dim(2) : img.dim(1);
  if (h == out_h && w == out_w) return img;

  Tensor out(img.ndim() == 3 ? std::vector<int>{c, out_h, out_w}
                             : std::vector<int>{out_h, out_w});
  const double sy = static_cast<double>(h) / out_h;
  const double sx = static_cast<double>(w) / out_w;
  const std::size_t in_hw = static_cast<std::size_t>(h) * w;
  const std::size_t out_hw = static_cast<std::size_t>(out_h) * out_w;
  for (int ci = 0; ci < c; ++ci) {
    const double* src = img.v.data() + ci * in_hw;
    double* dst = out.v.data() + ci * out_hw;
    for (int y = 0; y < out_h; ++y) {
      const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
      const int y0 = static_cast<int>(fy);
      const int y1 = std::min(y0 + 1, h - 1);
      const double wy = fy - y0;
      for (int x = 0; x < out_w; ++x) {
        const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
        const int x0 = static_cast<int>(fx);
        const int x1 = std::min(x0 + 1, w - 1);
        const double wx = fx - x0;
        const double top = src[static_cast<std::size_t>(y0) * w + x0] * (1 - wx) +
                           src[static_cast<std::size_t>(y0) * w + x1] * wx;
        const double bot = src[static_cast<std::size_t>(y1) * w + x0] * (1 - wx) +
                           src[static_cast<std::size_t>(y1) * w + x1] * wx;
        dst[static_cast<std::size_t>(y) * out_w + x] = top * (1 - wy) + bot * wy;
      }
    }
  }
  return out;
}

}  // namespace angio
