#include "privpool/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <stdexcept>

namespace privpool {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void write_png_rows(const std::string& path, std::size_t width, std::size_t height, int color_type,
                    std::size_t channels, const std::uint8_t* pixels) {
  FilePtr file(std::fopen(path.c_str(), "wb"));
  if (!file) throw std::runtime_error("cannot open " + path + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("libpng: cannot allocate writer");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("libpng: failed writing " + path);
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, color_type,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < height; ++y)
    png_write_row(png, const_cast<png_bytep>(pixels + y * width * channels));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace

void write_png(const std::string& path, const Image& image) {
  write_png_rows(path, image.width, image.height, PNG_COLOR_TYPE_RGB, 3, image.rgb.data());
}

void write_gray_png(const std::string& path, std::size_t width, std::size_t height,
                    const std::vector<std::uint8_t>& pixels) {
  if (pixels.size() != width * height) throw std::invalid_argument("write_gray_png: size mismatch");
  write_png_rows(path, width, height, PNG_COLOR_TYPE_GRAY, 1, pixels.data());
}

Image read_png(const std::string& path) {
  FilePtr file(std::fopen(path.c_str(), "rb"));
  if (!file) throw std::runtime_error("cannot open " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("libpng: cannot allocate reader");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("libpng: failed reading " + path);
  }
  png_init_io(png, file.get());
  png_read_info(png, info);
  const png_byte color = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  Image image(png_get_image_width(png, info), png_get_image_height(png, info));
  std::vector<png_bytep> rows(image.height);
  for (std::size_t y = 0; y < image.height; ++y) rows[y] = image.rgb.data() + y * image.width * 3;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return image;
}

Tensor images_to_tensor(const std::vector<const Image*>& images) {
  if (images.empty()) throw std::invalid_argument("images_to_tensor: empty batch");
  const std::size_t w = images.front()->width, h = images.front()->height;
  std::vector<Real> values;
  values.reserve(images.size() * w * h * 3);
  for (const Image* img : images) {
    if (img->width != w || img->height != h) throw std::invalid_argument("images_to_tensor: mixed image sizes");
    for (auto v : img->rgb) values.push_back(static_cast<Real>(v) / Real(255));
  }
  return Tensor::from({images.size(), h, w, 3}, std::move(values));
}

Image crop_resize_bilinear(const Image& src, std::size_t x0, std::size_t y0, std::size_t x1, std::size_t y1,
                           std::size_t out_w, std::size_t out_h) {
  if (x1 <= x0 || y1 <= y0 || x1 > src.width || y1 > src.height)
    throw std::invalid_argument("crop_resize_bilinear: empty or out-of-bounds window");
  Image out(out_w, out_h);
  const double sx = static_cast<double>(x1 - x0) / static_cast<double>(out_w);
  const double sy = static_cast<double>(y1 - y0) / static_cast<double>(out_h);
  for (std::size_t oy = 0; oy < out_h; ++oy) {
    const double fy = std::clamp((static_cast<double>(oy) + 0.5) * sy - 0.5, 0.0, static_cast<double>(y1 - y0 - 1));
    const std::size_t iy = static_cast<std::size_t>(fy);
    const std::size_t iy1 = std::min(iy + 1, y1 - y0 - 1);
    const double wy = fy - static_cast<double>(iy);
    for (std::size_t ox = 0; ox < out_w; ++ox) {
      const double fx = std::clamp((static_cast<double>(ox) + 0.5) * sx - 0.5, 0.0, static_cast<double>(x1 - x0 - 1));
      const std::size_t ix = static_cast<std::size_t>(fx);
      const std::size_t ix1 = std::min(ix + 1, x1 - x0 - 1);
      const double wx = fx - static_cast<double>(ix);
      for (std::size_t c = 0; c < 3; ++c) {
        const double top = src.at(x0 + ix, y0 + iy)[c] * (1 - wx) + src.at(x0 + ix1, y0 + iy)[c] * wx;
        const double bot = src.at(x0 + ix, y0 + iy1)[c] * (1 - wx) + src.at(x0 + ix1, y0 + iy1)[c] * wx;
        out.at(ox, oy)[c] = static_cast<std::uint8_t>(std::lround(std::clamp(top * (1 - wy) + bot * wy, 0.0, 255.0)));
      }
    }
  }
  return out;
}

}  // namespace privpool
