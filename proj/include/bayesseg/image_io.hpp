#pragma once
// 8-bit raster IO: PNG through libpng's simplified API, binary and ASCII
// PGM/PPM by hand. Pixels are stored interleaved, row-major.

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "bayesseg/errors.hpp"

namespace bayesseg {

struct Image8 {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 0;  // 1 or 3
  std::vector<std::uint8_t> pixels;

  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * channels + c]; }
};

namespace detail {

inline std::string lower_extension(const std::filesystem::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext;
}

inline Image8 read_png(const std::filesystem::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw UnreadableImageError("cannot read PNG '" + path.string() + "': " + image.message);
  }
  Image8 out;
  out.width = image.width;
  out.height = image.height;
  const bool color = (image.format & PNG_FORMAT_FLAG_COLOR) != 0;
  image.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  out.channels = color ? 3 : 1;
  out.pixels.resize(PNG_IMAGE_SIZE(image));
  if (out.pixels.empty()) {
    png_image_free(&image);
    throw EmptyImageError("image '" + path.string() + "' has no pixels");
  }
  if (!png_image_finish_read(&image, nullptr, out.pixels.data(), 0, nullptr)) {
    throw UnreadableImageError("cannot decode PNG '" + path.string() + "': " + image.message);
  }
  return out;
}

inline void write_png(const std::filesystem::path& path, const Image8& img) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = img.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&image, path.c_str(), 0, img.pixels.data(), 0, nullptr)) {
    throw DataError("cannot write PNG '" + path.string() + "': " + image.message);
  }
}

class PnmReader {
 public:
  explicit PnmReader(std::vector<char> bytes) : bytes_(std::move(bytes)) {}

  std::size_t number(const std::string& what) {
    skip_space_and_comments();
    std::size_t v = 0;
    bool any = false;
    while (pos_ < bytes_.size() && std::isdigit(static_cast<unsigned char>(bytes_[pos_]))) {
      v = v * 10 + static_cast<std::size_t>(bytes_[pos_++] - '0');
      any = true;
    }
    if (!any) throw UnreadableImageError("PNM: expected " + what);
    return v;
  }
  void skip_single_space() { ++pos_; }
  std::size_t remaining() const { return bytes_.size() - std::min(pos_, bytes_.size()); }
  unsigned char byte() { return static_cast<unsigned char>(bytes_[pos_++]); }

 private:
  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      if (bytes_[pos_] == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else if (std::isspace(static_cast<unsigned char>(bytes_[pos_]))) {
        ++pos_;
      } else {
        break;
      }
    }
  }
  std::vector<char> bytes_;
  std::size_t pos_ = 0;
};

inline Image8 read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UnreadableImageError("cannot open '" + path.string() + "'");
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 2 || bytes[0] != 'P') throw UnreadableImageError("'" + path.string() + "' is not a PNM file");
  const char kind = bytes[1];
  if (kind != '2' && kind != '3' && kind != '5' && kind != '6') {
    throw UnreadableImageError("'" + path.string() + "': unsupported PNM variant P" + std::string(1, kind));
  }
  PnmReader r(std::vector<char>(bytes.begin() + 2, bytes.end()));
  Image8 out;
  out.width = r.number("width");
  out.height = r.number("height");
  const std::size_t maxval = r.number("maxval");
  if (maxval == 0 || maxval > 255) throw UnreadableImageError("'" + path.string() + "': only 8-bit PNM is supported");
  if (out.width == 0 || out.height == 0) throw EmptyImageError("image '" + path.string() + "' has no pixels");
  out.channels = (kind == '3' || kind == '6') ? 3 : 1;
  const std::size_t n = out.width * out.height * out.channels;
  out.pixels.resize(n);
  const bool binary = kind == '5' || kind == '6';
  if (binary) {
    r.skip_single_space();
    if (r.remaining() < n) throw UnreadableImageError("'" + path.string() + "': truncated pixel data");
    for (auto& p : out.pixels) p = r.byte();
  } else {
    for (auto& p : out.pixels) p = static_cast<std::uint8_t>(r.number("pixel"));
  }
  if (maxval != 255)
    for (auto& p : out.pixels) p = static_cast<std::uint8_t>((p * 255 + maxval / 2) / maxval);
  return out;
}

inline void write_pnm(const std::filesystem::path& path, const Image8& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << (img.channels == 3 ? "P6" : "P5") << '\n' << img.width << ' ' << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
}

}  // namespace detail

inline bool is_supported_image(const std::filesystem::path& p) {
  const auto ext = detail::lower_extension(p);
  return ext == ".png" || ext == ".pgm" || ext == ".ppm" || ext == ".pnm";
}

inline Image8 read_image(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw UnreadableImageError("'" + path.string() + "' does not exist");
  if (std::filesystem::file_size(path) == 0) throw EmptyImageError("image '" + path.string() + "' is an empty file");
  const auto ext = detail::lower_extension(path);
  Image8 img = ext == ".png" ? detail::read_png(path) : detail::read_pnm(path);
  if (img.width == 0 || img.height == 0) throw EmptyImageError("image '" + path.string() + "' has no pixels");
  return img;
}

/// Writes PNG for a .png extension, PGM/PPM otherwise.
inline void write_image(const std::filesystem::path& path, const Image8& img) {
  if (detail::lower_extension(path) == ".png") detail::write_png(path, img);
  else detail::write_pnm(path, img);
}

}  // namespace bayesseg
