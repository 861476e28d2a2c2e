#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace ulcerforge {

// 8-bit interleaved image, gray or RGB.
struct ImageBuffer {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<std::uint8_t> pixels;  // row-major, width * channels bytes per row

  ImageBuffer() = default;
  ImageBuffer(int w, int h, int c, std::uint8_t fill = 0);

  std::uint8_t& at(int x, int y, int c) {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  std::uint8_t at(int x, int y, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  bool operator==(const ImageBuffer&) const = default;
};

// PNG via libpng; binary PGM (P5) / PPM (P6) parsed directly.
// Format chosen by extension: .png, .pgm, .ppm, .pnm.
ImageBuffer read_image(const std::filesystem::path& path);
void write_image(const std::filesystem::path& path, const ImageBuffer& img);

std::vector<std::uint8_t> encode_png(const ImageBuffer& img);
ImageBuffer decode_png(const std::vector<std::uint8_t>& bytes);

}  // namespace ulcerforge
