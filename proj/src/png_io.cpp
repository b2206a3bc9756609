#include "loopstage/png_io.hpp"

#include <png.h>

#include <algorithm>
#include <cstdio>
#include <memory>

#include "loopstage/error.hpp"

namespace loopstage {
namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

// Decoded PNG normalised to 8-bit gray or RGB.
struct RawPng {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<std::uint8_t> pixels;
};

RawPng decode(const std::filesystem::path& path) {
  FilePtr file(std::fopen(path.c_str(), "rb"));
  if (!file) throw AssetError("cannot open PNG: " + path.string());

  png_byte header[8];
  if (std::fread(header, 1, 8, file.get()) != 8 || png_sig_cmp(header, 0, 8)) {
    throw AssetError("not a PNG file: " + path.string());
  }
  png_structp png =
      png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw AssetError("libpng initialisation failed");
  }
  RawPng out;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw AssetError("corrupt PNG: " + path.string());
  }
  png_init_io(png, file.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);

  const auto color = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) {
    png_set_expand_gray_1_2_4_to_8(png);
  }
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color & PNG_COLOR_MASK_ALPHA || png_get_valid(png, info, PNG_INFO_tRNS)) {
    png_set_strip_alpha(png);
  }
  png_read_update_info(png, info);

  out.width = static_cast<int>(png_get_image_width(png, info));
  out.height = static_cast<int>(png_get_image_height(png, info));
  out.channels = png_get_channels(png, info);
  const auto stride = png_get_rowbytes(png, info);
  out.pixels.resize(stride * out.height);
  rows.resize(out.height);
  for (int y = 0; y < out.height; ++y) rows[y] = out.pixels.data() + y * stride;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

void write_rows(png_structp png, png_infop info, int width, int height,
                int color_type, const std::uint8_t* data, int channels) {
  png_set_IHDR(png, info, width, height, 8, color_type, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < height; ++y) {
    png_write_row(png, const_cast<png_bytep>(data + static_cast<std::size_t>(y) *
                                                        width * channels));
  }
  png_write_end(png, nullptr);
}

void write_file(const std::filesystem::path& path, int width, int height,
                int color_type, const std::uint8_t* data, int channels) {
  FilePtr file(std::fopen(path.c_str(), "wb"));
  if (!file) throw AssetError("cannot write PNG: " + path.string());
  png_structp png =
      png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw AssetError("PNG encoding failed: " + path.string());
  }
  png_init_io(png, file.get());
  write_rows(png, info, width, height, color_type, data, channels);
  png_destroy_write_struct(&png, &info);
}

void append_to_vector(png_structp png, png_bytep data, png_size_t length) {
  auto* out = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + length);
}

}  // namespace

Image read_png_rgb(const std::filesystem::path& path) {
  const RawPng raw = decode(path);
  Image image(raw.width, raw.height);
  auto dst = image.data();
  const std::size_t n = image.pixel_count();
  for (std::size_t i = 0; i < n; ++i) {
    for (int c = 0; c < 3; ++c) {
      dst[i * 3 + c] = raw.channels >= 3 ? raw.pixels[i * raw.channels + c]
                                         : raw.pixels[i * raw.channels];
    }
  }
  return image;
}

Mask read_png_mask(const std::filesystem::path& path) {
  const RawPng raw = decode(path);
  Mask mask(raw.width, raw.height);
  auto dst = mask.data();
  for (std::size_t i = 0; i < dst.size(); ++i) {
    bool fg = false;
    for (int c = 0; c < raw.channels; ++c) fg |= raw.pixels[i * raw.channels + c] != 0;
    dst[i] = fg ? 1 : 0;
  }
  return mask;
}

void write_png(const std::filesystem::path& path, const Image& image) {
  write_file(path, image.width(), image.height(), PNG_COLOR_TYPE_RGB,
             image.data().data(), 3);
}

void write_png(const std::filesystem::path& path, const Mask& mask) {
  std::vector<std::uint8_t> gray(mask.data().size());
  for (std::size_t i = 0; i < gray.size(); ++i) gray[i] = mask.data()[i] ? 255 : 0;
  write_file(path, mask.width(), mask.height(), PNG_COLOR_TYPE_GRAY, gray.data(), 1);
}

std::vector<std::uint8_t> encode_png(const Image& image) {
  std::vector<std::uint8_t> out;
  png_structp png =
      png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("in-memory PNG encoding failed");
  }
  png_set_write_fn(png, &out, append_to_vector, nullptr);
  png_set_compression_level(png, 1);
  write_rows(png, info, image.width(), image.height(), PNG_COLOR_TYPE_RGB,
             image.data().data(), 3);
  png_destroy_write_struct(&png, &info);
  return out;
}

std::vector<std::uint8_t> encode_png_rgba(const Image& image, const Mask& alpha) {
  if (alpha.width() != image.width() || alpha.height() != image.height()) {
    throw InvalidRequest("alpha mask size differs from image");
  }
  std::vector<std::uint8_t> rgba(image.pixel_count() * 4);
  for (std::size_t i = 0; i < image.pixel_count(); ++i) {
    std::copy_n(image.data().data() + i * 3, 3, rgba.data() + i * 4);
    rgba[i * 4 + 3] = alpha.data()[i] ? 255 : 0;
  }
  std::vector<std::uint8_t> out;
  png_structp png =
      png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("in-memory PNG encoding failed");
  }
  png_set_write_fn(png, &out, append_to_vector, nullptr);
  png_set_compression_level(png, 1);
  write_rows(png, info, image.width(), image.height(), PNG_COLOR_TYPE_RGBA, rgba.data(), 4);
  png_destroy_write_struct(&png, &info);
  return out;
}

std::string numbered_png_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%06d.png", index);
  return buf;
}

}  // namespace loopstage
