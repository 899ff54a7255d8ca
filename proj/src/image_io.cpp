#include "o2former/image_io.hpp"

#include <png.h>

#include <cstring>

#include "o2former/core.hpp"

namespace o2former {

void write_png(const std::filesystem::path& path, const Image8& image) {
  if (image.channels != 1 && image.channels != 3) {
    throw IoError(path.string() + ": unsupported channel count");
  }
  if (image.data.size() != static_cast<size_t>(image.height) * image.width * image.channels) {
    throw IoError(path.string() + ": pixel buffer size does not match the image shape");
  }
  png_image png;
  std::memset(&png, 0, sizeof png);
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.width);
  png.height = static_cast<png_uint_32>(image.height);
  png.format = image.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&png, path.c_str(), 0, image.data.data(), 0, nullptr)) {
    const std::string msg = png.message;
    png_image_free(&png);
    throw IoError(path.string() + ": " + msg);
  }
}

Image8 read_png_rgb(const std::filesystem::path& path) {
  png_image png;
  std::memset(&png, 0, sizeof png);
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) {
    throw IoError(path.string() + ": " + png.message);
  }
  png.format = PNG_FORMAT_RGB;
  Image8 out;
  out.height = static_cast<int>(png.height);
  out.width = static_cast<int>(png.width);
  out.channels = 3;
  out.data.resize(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, out.data.data(), 0, nullptr)) {
    const std::string msg = png.message;
    png_image_free(&png);
    throw IoError(path.string() + ": " + msg);
  }
  return out;
}

Image8 gray_to_rgb(const Image8& gray) {
  Image8 out{gray.height, gray.width, 3, {}};
  out.data.reserve(gray.data.size() * 3);
  for (uint8_t v : gray.data) out.data.insert(out.data.end(), {v, v, v});
  return out;
}

}  // namespace o2former
