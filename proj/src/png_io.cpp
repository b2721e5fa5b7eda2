#include <png.h>

#include <cmath>
#include <algorithm>
#include <cstdio>
#include <cstring>
#include <memory>

#include "gridfill/dataset.hpp"

namespace gridfill {

namespace {

using Gray8 = Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Gray16 = Eigen::Array<std::uint16_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};
using File = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] void png_fail(png_structp png, png_const_charp msg) {
  throw DataError(std::string(msg) + " (" + static_cast<const char*>(png_get_error_ptr(png)) + ")");
}

void png_warn(png_structp, png_const_charp) {}

enum class Target { rgb8, gray8, gray16 };

/// Decodes into rows of the requested layout.
std::vector<std::uint8_t> decode(const std::string& path, Target target, int& width, int& height) {
  File file(std::fopen(path.c_str(), "rb"));
  if (!file) throw DataError("cannot open " + path);
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, file.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) throw DataError(path + ": not a PNG file");

  png_structp png =
      png_create_read_struct(PNG_LIBPNG_VER_STRING, const_cast<char*>(path.c_str()), png_fail, png_warn);
  png_infop info = png_create_info_struct(png);
  std::vector<std::uint8_t> data;
  try {
    png_init_io(png, file.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);
    width = int(png_get_image_width(png, info));
    height = int(png_get_image_height(png, info));
    const int color = png_get_color_type(png, info);
    const int depth = png_get_bit_depth(png, info);

    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    png_set_strip_alpha(png);
    if (target == Target::gray16) {
      if (depth == 8) throw DataError(path + ": expected a 16-bit depth image");
      if (color != PNG_COLOR_TYPE_GRAY && color != PNG_COLOR_TYPE_GRAY_ALPHA)
        throw DataError(path + ": expected a grayscale depth image");
      png_set_swap(png);  // little-endian host order
    } else {
      png_set_strip_16(png);
      const bool is_gray = color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA;
      if (target == Target::rgb8 && is_gray) png_set_gray_to_rgb(png);
      if (target == Target::gray8 && !is_gray) png_set_rgb_to_gray_fixed(png, 1, -1, -1);
    }
    png_read_update_info(png, info);
    const std::size_t row_bytes = png_get_rowbytes(png, info);
    data.resize(row_bytes * std::size_t(height));
    std::vector<png_bytep> rows(height);
    for (int y = 0; y < height; ++y) rows[y] = data.data() + std::size_t(y) * row_bytes;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
  } catch (...) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return data;
}

void encode(const std::string& path, int width, int height, int color_type, int bit_depth, const std::uint8_t* data,
            std::size_t row_bytes) {
  File file(std::fopen(path.c_str(), "wb"));
  if (!file) throw DataError("cannot write " + path);
  png_structp png =
      png_create_write_struct(PNG_LIBPNG_VER_STRING, const_cast<char*>(path.c_str()), png_fail, png_warn);
  png_infop info = png_create_info_struct(png);
  try {
    png_init_io(png, file.get());
    png_set_IHDR(png, info, png_uint_32(width), png_uint_32(height), bit_depth, color_type, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    if (bit_depth == 16) png_set_swap(png);
    for (int y = 0; y < height; ++y) png_write_row(png, const_cast<png_bytep>(data + std::size_t(y) * row_bytes));
    png_write_end(png, nullptr);
  } catch (...) {
    png_destroy_write_struct(&png, &info);
    throw;
  }
  png_destroy_write_struct(&png, &info);
}

}  // namespace

Image read_png_rgb(const std::string& path) {
  int w = 0, h = 0;
  const auto bytes = decode(path, Target::rgb8, w, h);
  Image img(Shape{h, w, 3});
  for (Eigen::Index i = 0; i < img.size(); ++i) img.values()[i] = float(bytes[std::size_t(i)]) / 255.0f;
  return img;
}

Image quantize8(const Image& image) {
  Image out(image.shape());
  for (Eigen::Index i = 0; i < out.size(); ++i) {
    const float v = std::clamp(image.values()[i], 0.0f, 1.0f);
    out.values()[i] = float(std::lround(v * 255.0f)) / 255.0f;
  }
  return out;
}

void write_png_rgb(const std::string& path, const Image& image) {
  if (image.channels() != 3) throw ShapeError(path + ": write_png_rgb needs 3 channels, got " + to_string(image.shape()));
  std::vector<std::uint8_t> bytes(std::size_t(image.size()));
  for (Eigen::Index i = 0; i < image.size(); ++i)
    bytes[std::size_t(i)] = std::uint8_t(std::lround(std::clamp(image.values()[i], 0.0f, 1.0f) * 255.0f));
  encode(path, image.width(), image.height(), PNG_COLOR_TYPE_RGB, 8, bytes.data(), std::size_t(image.width()) * 3);
}

Gray8 read_png_gray8(const std::string& path) {
  int w = 0, h = 0;
  const auto bytes = decode(path, Target::gray8, w, h);
  return Eigen::Map<const Gray8>(bytes.data(), h, w);
}

void write_png_gray8(const std::string& path, const Gray8& pixels) {
  encode(path, int(pixels.cols()), int(pixels.rows()), PNG_COLOR_TYPE_GRAY, 8, pixels.data(), std::size_t(pixels.cols()));
}

Gray16 read_png_gray16(const std::string& path) {
  int w = 0, h = 0;
  const auto bytes = decode(path, Target::gray16, w, h);
  Gray16 out(h, w);
  std::memcpy(out.data(), bytes.data(), bytes.size());
  return out;
}

void write_png_gray16(const std::string& path, const Gray16& pixels) {
  encode(path, int(pixels.cols()), int(pixels.rows()), PNG_COLOR_TYPE_GRAY, 16,
         reinterpret_cast<const std::uint8_t*>(pixels.data()), std::size_t(pixels.cols()) * 2);
}

}  // namespace gridfill
