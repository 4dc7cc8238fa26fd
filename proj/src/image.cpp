#include "vitdf/image.hpp"

#include <png.h>
#include <jpeglib.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <fstream>
#include <iterator>

namespace vitdf {

namespace {

std::vector<unsigned char> slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open image '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Tensor from_interleaved(const unsigned char* px, std::size_t w, std::size_t h, std::size_t comps) {
  Tensor out(Shape{3, h, w});
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const unsigned char* p = px + (y * w + x) * comps;
      for (std::size_t c = 0; c < 3; ++c) out[(c * h + y) * w + x] = p[comps >= 3 ? c : 0];
    }
  }
  return out;
}

Tensor decode_png(const std::vector<unsigned char>& bytes, const std::filesystem::path& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size())) {
    throw DataError("corrupt PNG '" + path.string() + "': " + img.message);
  }
  img.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> buffer(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buffer.data(), 0, nullptr)) {
    std::string msg = img.message;
    png_image_free(&img);
    throw DataError("corrupt PNG '" + path.string() + "': " + msg);
  }
  if (img.width == 0 || img.height == 0) throw DataError("empty PNG '" + path.string() + "'");
  return from_interleaved(buffer.data(), img.width, img.height, 3);
}

struct JpegErrorManager {
  jpeg_error_mgr base;
  std::jmp_buf jump;
  std::array<char, JMSG_LENGTH_MAX> message{};
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorManager*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message.data());
  std::longjmp(err->jump, 1);
}

// Keeps warnings off stderr; the first one ends up in the DataError.
void jpeg_store_message(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorManager*>(cinfo->err);
  if (err->message[0] == '\0') (*cinfo->err->format_message)(cinfo, err->message.data());
}

Tensor decode_jpeg(const std::vector<unsigned char>& bytes, const std::filesystem::path& path) {
  jpeg_decompress_struct cinfo{};
  JpegErrorManager err{};
  cinfo.err = jpeg_std_error(&err.base);
  err.base.error_exit = jpeg_error_exit;
  err.base.output_message = jpeg_store_message;
  // Everything touched after setjmp is declared before it.
  std::vector<unsigned char> pixels;
  std::size_t width = 0, height = 0, comps = 0;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw DataError("corrupt JPEG '" + path.string() + "': " + err.message.data());
  }
  jpeg_create_decompress(&cinfo);
  jpeg_mem_src(&cinfo, bytes.data(), static_cast<unsigned long>(bytes.size()));
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = cinfo.num_components == 1 ? JCS_GRAYSCALE : JCS_RGB;
  jpeg_start_decompress(&cinfo);
  width = cinfo.output_width;
  height = cinfo.output_height;
  comps = static_cast<std::size_t>(cinfo.output_components);
  pixels.resize(width * height * comps);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW rowp = pixels.data() + static_cast<std::size_t>(cinfo.output_scanline) * width * comps;
    jpeg_read_scanlines(&cinfo, &rowp, 1);
  }
  jpeg_finish_decompress(&cinfo);
  const long warnings = err.base.num_warnings;
  jpeg_destroy_decompress(&cinfo);
  if (warnings > 0) throw DataError("corrupt JPEG '" + path.string() + "': " + err.message.data());
  if (width == 0 || height == 0) throw DataError("empty JPEG '" + path.string() + "'");
  return from_interleaved(pixels.data(), width, height, comps);
}

}  // namespace

Tensor read_image(const std::filesystem::path& path) {
  const auto bytes = slurp(path);
  static constexpr unsigned char kPng[] = {0x89, 'P', 'N', 'G'};
  if (bytes.size() >= 8 && std::equal(std::begin(kPng), std::end(kPng), bytes.begin())) return decode_png(bytes, path);
  if (bytes.size() >= 3 && bytes[0] == 0xFF && bytes[1] == 0xD8 && bytes[2] == 0xFF) return decode_jpeg(bytes, path);
  throw DataError("unrecognized image format '" + path.string() + "'");
}

void write_png(const std::filesystem::path& path, const Tensor& image) {
  if (image.rank() != 3 || (image.dim(0) != 3 && image.dim(0) != 1)) {
    throw ShapeError("write_png: expected [3 x H x W] or [1 x H x W], got " + image.shape_string());
  }
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  std::vector<unsigned char> buffer(w * h * 3);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t k = 0; k < 3; ++k) {
        double v = image[((c == 3 ? k : 0) * h + y) * w + x];
        buffer[(y * w + x) * 3 + k] = static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 255.0)));
      }
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(w);
  img.height = static_cast<png_uint_32>(h);
  img.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.c_str(), 0, buffer.data(), 0, nullptr)) {
    throw DataError("cannot write PNG '" + path.string() + "': " + img.message);
  }
}

}  // namespace vitdf
