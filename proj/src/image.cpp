#include "czsl/image.hpp"

#include <fstream>

#include "czsl/error.hpp"

namespace czsl {

Image::Image(int width, int height, Rgb fill) : width_(width), height_(height) {
  if (width < 0 || height < 0) throw ValidationError("negative image size");
  data_.resize(static_cast<std::size_t>(width) * static_cast<std::size_t>(height) * 3);
  for (std::size_t i = 0; i < data_.size(); i += 3) {
    data_[i] = fill.r;
    data_[i + 1] = fill.g;
    data_[i + 2] = fill.b;
  }
}

void write_ppm(const Image& image, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write image '" + path + "'");
  out << "P6\n" << image.width() << ' ' << image.height() << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.bytes().data()),
            static_cast<std::streamsize>(image.bytes().size()));
  if (!out) throw IoError("short write to '" + path + "'");
}

Image read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image '" + path + "'");
  std::string magic;
  int width = 0, height = 0, maxval = 0;
  in >> magic >> width >> height >> maxval;
  if (magic != "P6" || width <= 0 || height <= 0 || maxval != 255) {
    throw IoError("'" + path + "' is not an 8-bit binary PPM");
  }
  in.get();
  std::vector<char> raw(static_cast<std::size_t>(width) * static_cast<std::size_t>(height) * 3);
  in.read(raw.data(), static_cast<std::streamsize>(raw.size()));
  if (!in) throw IoError("truncated image '" + path + "'");
  Image image(width, height);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const auto i = (static_cast<std::size_t>(y) * static_cast<std::size_t>(width) +
                      static_cast<std::size_t>(x)) * 3;
      image.set(x, y,
                {static_cast<std::uint8_t>(raw[i]), static_cast<std::uint8_t>(raw[i + 1]),
                 static_cast<std::uint8_t>(raw[i + 2])});
    }
  }
  return image;
}

}  // namespace czsl
