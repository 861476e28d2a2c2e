#include "ulcerforge/image.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <fstream>
#include <iterator>
#include <string>

#include "ulcerforge/error.hpp"

namespace ulcerforge {

namespace {

std::string lower_ext(const std::filesystem::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void check_shape(const ImageBuffer& img) {
  if (img.width < 1 || img.height < 1 || (img.channels != 1 && img.channels != 3) ||
      img.pixels.size() != static_cast<std::size_t>(img.width) * img.height * img.channels) {
    throw DimensionError("image: inconsistent buffer " + std::to_string(img.width) + "x" +
                         std::to_string(img.height) + "x" + std::to_string(img.channels));
  }
}

ImageBuffer decode_pnm(const std::vector<std::uint8_t>& bytes, const std::string& origin) {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_int = [&] {
    skip_space();
    if (pos >= bytes.size() || !std::isdigit(bytes[pos])) throw ParseError(origin + ": malformed PNM header");
    long v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) v = v * 10 + (bytes[pos++] - '0');
    return static_cast<int>(v);
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
    throw ParseError(origin + ": only binary P5/P6 PNM is supported");
  }
  const int channels = bytes[1] == '5' ? 1 : 3;
  pos = 2;
  const int w = read_int(), h = read_int(), maxval = read_int();
  if (maxval != 255) throw ParseError(origin + ": only 8-bit PNM (maxval 255) is supported");
  ++pos;  // single whitespace byte before raster
  ImageBuffer img(w, h, channels);
  if (bytes.size() < pos + img.pixels.size()) throw ParseError(origin + ": truncated PNM raster");
  std::copy_n(bytes.begin() + static_cast<std::ptrdiff_t>(pos), img.pixels.size(), img.pixels.begin());
  return img;
}

std::vector<std::uint8_t> encode_pnm(const ImageBuffer& img) {
  const std::string header = std::string(img.channels == 1 ? "P5" : "P6") + "\n" +
                             std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), img.pixels.begin(), img.pixels.end());
  return out;
}

}  // namespace

ImageBuffer::ImageBuffer(int w, int h, int c, std::uint8_t fill)
    : width(w), height(h), channels(c),
      pixels(static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * static_cast<std::size_t>(c), fill) {
  check_shape(*this);
}

ImageBuffer decode_png(const std::vector<std::uint8_t>& bytes) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
    throw ParseError(std::string("png: ") + image.message);
  }
  const bool color = (image.format & PNG_FORMAT_FLAG_COLOR) != 0;
  image.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  ImageBuffer img(static_cast<int>(image.width), static_cast<int>(image.height), color ? 3 : 1);
  if (!png_image_finish_read(&image, nullptr, img.pixels.data(), 0, nullptr)) {
    std::string msg = image.message;
    png_image_free(&image);
    throw ParseError("png: " + msg);
  }
  return img;
}

std::vector<std::uint8_t> encode_png(const ImageBuffer& img) {
  check_shape(img);
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = img.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&image, nullptr, &size, 0, img.pixels.data(), 0, nullptr)) {
    throw IoError(std::string("png: ") + image.message);
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&image, out.data(), &size, 0, img.pixels.data(), 0, nullptr)) {
    throw IoError(std::string("png: ") + image.message);
  }
  out.resize(size);
  return out;
}

ImageBuffer read_image(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  const auto ext = lower_ext(path);
  if (ext == ".png") return decode_png(bytes);
  if (ext == ".pgm" || ext == ".ppm" || ext == ".pnm") return decode_pnm(bytes, path.string());
  throw ParseError("unsupported image format: " + path.string());
}

void write_image(const std::filesystem::path& path, const ImageBuffer& img) {
  check_shape(img);
  const auto ext = lower_ext(path);
  if (ext == ".png") return write_file(path, encode_png(img));
  if (ext == ".pgm" || ext == ".ppm" || ext == ".pnm") return write_file(path, encode_pnm(img));
  throw ParseError("unsupported image format: " + path.string());
}

}  // namespace ulcerforge
