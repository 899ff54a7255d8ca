#pragma once

// 8-bit PNG reading and writing.

#include <cstdint>
#include <filesystem>
#include <vector>

namespace o2former {

struct Image8 {
  int height = 0;
  int width = 0;
  int channels = 0;           // 1 (gray) or 3 (RGB), interleaved
  std::vector<uint8_t> data;  // row-major, height * width * channels bytes
};

/// Writes a gray or RGB image. Throws IoError with the path on failure.
void write_png(const std::filesystem::path& path, const Image8& image);
/// Reads any PNG, converted to 8-bit RGB.
Image8 read_png_rgb(const std::filesystem::path& path);
/// Gray image replicated to three interleaved channels.
Image8 gray_to_rgb(const Image8& gray);

}  // namespace o2former
