#include "stnyolo/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>

#include "stnyolo/errors.hpp"
#include "stnyolo/stn.hpp"

namespace stnyolo {

namespace {

std::string lower_ext(const std::filesystem::path& p) {
  std::string e = p.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return e;
}

struct PnmHeader {
  std::string magic;
  int width = 0, height = 0, max_value = 0;
};

// Reads the whitespace/comment separated header; leaves the stream at the
// first raster byte.
PnmHeader read_pnm_header(std::istream& is, const std::filesystem::path& path) {
  PnmHeader h;
  auto next_token = [&]() {
    std::string tok;
    int c;
    while ((c = is.get()) != EOF) {
      if (c == '#') {
        while ((c = is.get()) != EOF && c != '\n') {}
        continue;
      }
      if (std::isspace(c)) {
        if (!tok.empty()) break;
        continue;
      }
      tok.push_back(static_cast<char>(c));
    }
    return tok;
  };
  h.magic = next_token();
  try {
    h.width = std::stoi(next_token());
    h.height = std::stoi(next_token());
    h.max_value = std::stoi(next_token());
  } catch (const std::exception&) {
    throw IoError("malformed PNM header in " + path.string());
  }
  if (h.width <= 0 || h.height <= 0 || h.max_value <= 0 || h.max_value > 65535) {
    throw IoError("unsupported PNM geometry in " + path.string());
  }
  return h;
}

std::vector<std::uint16_t> read_samples(std::istream& is, std::size_t count, int max_value,
                                        const std::filesystem::path& path) {
  const bool wide = max_value > 255;
  std::vector<unsigned char> raw(count * (wide ? 2 : 1));
  is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (is.gcount() != static_cast<std::streamsize>(raw.size())) throw IoError("truncated raster in " + path.string());
  std::vector<std::uint16_t> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    out[i] = wide ? static_cast<std::uint16_t>((raw[2 * i] << 8) | raw[2 * i + 1]) : raw[i];
  }
  return out;
}

void write_samples(std::ostream& os, const std::vector<std::uint16_t>& samples, int max_value) {
  const bool wide = max_value > 255;
  std::vector<unsigned char> raw;
  raw.reserve(samples.size() * (wide ? 2 : 1));
  for (std::uint16_t v : samples) {
    if (wide) raw.push_back(static_cast<unsigned char>(v >> 8));
    raw.push_back(static_cast<unsigned char>(v & 0xFF));
  }
  os.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
}

void require_rgb_image(const Tensor& image) {
  if (image.rank() != 4 || image.dim(0) != 1 || image.dim(1) != 3) {
    throw ShapeError("expected a (1, 3, H, W) image, got " + shape_str(image.shape()));
  }
}

}  // namespace

std::uint8_t to_u8(Real v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

GrayImage read_pgm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  const PnmHeader h = read_pnm_header(is, path);
  if (h.magic != "P5") throw IoError(path.string() + " is not a binary PGM (P5)");
  GrayImage img;
  img.width = h.width;
  img.height = h.height;
  img.max_value = h.max_value;
  img.pixels = read_samples(is, static_cast<std::size_t>(h.width) * h.height, h.max_value, path);
  return img;
}

void write_pgm(const std::filesystem::path& path, const GrayImage& image) {
  if (image.pixels.size() != static_cast<std::size_t>(image.width) * image.height) {
    throw ShapeError("PGM pixel count does not match dims");
  }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << "P5\n" << image.width << ' ' << image.height << '\n' << image.max_value << '\n';
  write_samples(os, image.pixels, image.max_value);
  if (!os) throw IoError("failed writing " + path.string());
}

Tensor read_image(const std::filesystem::path& path) {
  const std::string ext = lower_ext(path);
  if (ext == ".ppm" || ext == ".pgm") {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    const PnmHeader h = read_pnm_header(is, path);
    const int channels = h.magic == "P6" ? 3 : h.magic == "P5" ? 1 : 0;
    if (channels == 0) throw IoError(path.string() + " is not a binary PPM/PGM");
    const std::size_t plane = static_cast<std::size_t>(h.width) * h.height;
    const auto samples = read_samples(is, plane * channels, h.max_value, path);
    std::vector<Real> data(3 * plane);
    for (std::size_t p = 0; p < plane; ++p) {
      for (int c = 0; c < 3; ++c) {
        const std::uint16_t v = samples[p * channels + (channels == 3 ? c : 0)];
        data[c * plane + p] = static_cast<Real>(v) / h.max_value;
      }
    }
    return Tensor::from({1, 3, h.height, h.width}, std::move(data));
  }
  if (ext != ".png") throw IoError("unsupported image format: " + path.string());

  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.string().c_str())) {
    throw IoError("cannot read PNG " + path.string() + ": " + img.message);
  }
  img.format = PNG_FORMAT_RGB;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&img);
    throw IoError("cannot decode PNG " + path.string() + ": " + img.message);
  }
  const int w = static_cast<int>(img.width), h = static_cast<int>(img.height);
  const std::size_t plane = static_cast<std::size_t>(w) * h;
  std::vector<Real> data(3 * plane);
  for (std::size_t p = 0; p < plane; ++p) {
    for (int c = 0; c < 3; ++c) data[c * plane + p] = buf[p * 3 + c] / 255.0;
  }
  return Tensor::from({1, 3, h, w}, std::move(data));
}

void write_image(const std::filesystem::path& path, const Tensor& image, bool sixteen_bit) {
  require_rgb_image(image);
  const int h = image.dim(2), w = image.dim(3);
  const std::size_t plane = static_cast<std::size_t>(w) * h;
  auto d = image.data();
  const std::string ext = lower_ext(path);
  if (ext == ".ppm") {
    const int max_value = sixteen_bit ? 65535 : 255;
    std::vector<std::uint16_t> samples(3 * plane);
    for (std::size_t p = 0; p < plane; ++p)
      for (int c = 0; c < 3; ++c)
        samples[p * 3 + c] = static_cast<std::uint16_t>(std::lround(std::clamp(d[c * plane + p], 0.0, 1.0) * max_value));
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    os << "P6\n" << w << ' ' << h << '\n' << max_value << '\n';
    write_samples(os, samples, max_value);
    if (!os) throw IoError("failed writing " + path.string());
    return;
  }
  if (ext != ".png") throw IoError("unsupported output image format: " + path.string());
  std::vector<png_byte> buf(3 * plane);
  for (std::size_t p = 0; p < plane; ++p)
    for (int c = 0; c < 3; ++c) buf[p * 3 + c] = to_u8(d[c * plane + p]);
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(w);
  img.height = static_cast<png_uint_32>(h);
  img.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.string().c_str(), 0, buf.data(), 0, nullptr)) {
    throw IoError("cannot write PNG " + path.string() + ": " + img.message);
  }
}

Tensor resize_image(const Tensor& image, int out_h, int out_w) {
  if (image.rank() != 4) throw ShapeError("resize_image expects (N, C, H, W)");
  if (image.dim(2) == out_h && image.dim(3) == out_w) return image.detach();
  const Tensor frozen = image.detach();
  return sample(frozen, generate_grid(AffineParams::identity(image.dim(0)), out_h, out_w)).detach();
}

}  // namespace stnyolo
