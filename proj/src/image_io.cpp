#include "cmfd/image_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <vector>

namespace cmfd {

namespace {

struct Netpbm {
  int channels = 0;
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;
};

Netpbm read_netpbm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::size_t pos = 0;
  const std::string where = path.string() + ": ";
  if (bytes.size() < 2 || bytes[0] != 'P') throw IoError(where + "malformed header");
  Netpbm img;
  if (bytes[1] == '6') {
    img.channels = 3;
  } else if (bytes[1] == '5') {
    img.channels = 1;
  } else {
    throw IoError(where + "unsupported format P" + std::string(1, bytes[1]) + " (expected binary P5 or P6)");
  }
  pos = 2;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_int = [&] {
    skip_space();
    if (pos >= bytes.size() || !std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      throw IoError(where + "malformed header");
    }
    long v = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + (bytes[pos++] - '0');
      if (v > 1 << 20) throw IoError(where + "malformed header");
    }
    return static_cast<int>(v);
  };
  img.width = read_int();
  img.height = read_int();
  const int maxval = read_int();
  if (img.width < 1 || img.height < 1) throw IoError(where + "malformed header");
  if (maxval != 255) throw IoError(where + "unsupported maxval " + std::to_string(maxval));
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
    throw IoError(where + "malformed header");
  }
  ++pos;
  const std::size_t need = static_cast<std::size_t>(img.width) * img.height * img.channels;
  if (bytes.size() - pos < need) throw IoError(where + "truncated payload");
  img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                    bytes.begin() + static_cast<std::ptrdiff_t>(pos + need));
  return img;
}

void write_netpbm(const std::filesystem::path& path, int channels, int height, int width,
                  const std::vector<std::uint8_t>& pixels) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << (channels == 3 ? "P6" : "P5") << '\n' << width << ' ' << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace

std::uint8_t quantize(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

Tensor<float> read_ppm(const std::filesystem::path& path) {
  auto img = read_netpbm(path);
  if (img.channels != 3) throw IoError(path.string() + ": expected a P6 colour image");
  Tensor<float> out({3, img.height, img.width});
  const std::size_t plane = static_cast<std::size_t>(img.height) * img.width;
  for (std::size_t i = 0; i < plane; ++i)
    for (std::size_t c = 0; c < 3; ++c) out[c * plane + i] = img.pixels[i * 3 + c] / 255.0f;
  return out;
}

void write_ppm(const std::filesystem::path& path, const Tensor<float>& image) {
  if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("write_ppm expects 3 x H x W, got " + to_string(image.shape()));
  const std::size_t plane = static_cast<std::size_t>(image.dim(1)) * image.dim(2);
  std::vector<std::uint8_t> px(plane * 3);
  for (std::size_t i = 0; i < plane; ++i)
    for (std::size_t c = 0; c < 3; ++c) px[i * 3 + c] = quantize(image[c * plane + i]);
  write_netpbm(path, 3, image.dim(1), image.dim(2), px);
}

Tensor<float> read_pgm(const std::filesystem::path& path) {
  auto img = read_netpbm(path);
  if (img.channels != 1) throw IoError(path.string() + ": expected a P5 grey image");
  Tensor<float> out({img.height, img.width});
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = img.pixels[i] / 255.0f;
  return out;
}

void write_pgm(const std::filesystem::path& path, const Tensor<float>& gray) {
  if (gray.rank() != 2) throw ShapeError("write_pgm expects H x W, got " + to_string(gray.shape()));
  std::vector<std::uint8_t> px(gray.size());
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = quantize(gray[i]);
  write_netpbm(path, 1, gray.dim(0), gray.dim(1), px);
}

Tensor<float> read_mask(const std::filesystem::path& path) {
  auto img = read_netpbm(path);
  if (img.channels != 1) throw IoError(path.string() + ": expected a P5 mask");
  Tensor<float> out({img.height, img.width});
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto v = img.pixels[i];
    if (v != 0 && v != 255) throw IoError(path.string() + ": non-binary mask value " + std::to_string(v));
    out[i] = v == 255 ? 1.0f : 0.0f;
  }
  return out;
}

void write_mask(const std::filesystem::path& path, const Tensor<float>& mask) {
  if (mask.rank() != 2) throw ShapeError("write_mask expects H x W, got " + to_string(mask.shape()));
  std::vector<std::uint8_t> px(mask.size());
  for (std::size_t i = 0; i < px.size(); ++i) {
    if (mask[i] != 0.0f && mask[i] != 1.0f) throw IoError("write_mask: mask is not binary");
    px[i] = mask[i] == 1.0f ? 255 : 0;
  }
  write_netpbm(path, 1, mask.dim(0), mask.dim(1), px);
}

}  // namespace cmfd
