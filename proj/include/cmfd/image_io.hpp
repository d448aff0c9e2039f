#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>

#include "cmfd/tensor.hpp"

namespace cmfd {

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Sample {
  std::string id;
  Tensor<float> image;  // 3 x H x W in [0,1]
  Tensor<float> mask;   // H x W in {0,1}
};

// Binary NetPBM, maxval 255. Images are P6, masks and probability maps P5.
Tensor<float> read_ppm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const Tensor<float>& image);

// Grey map in [0,1] (value / 255).
Tensor<float> read_pgm(const std::filesystem::path& path);
// Quantises round(v * 255) after clamping to [0,1].
void write_pgm(const std::filesystem::path& path, const Tensor<float>& gray);

// Mask pixels must be 0 or 255 and map to 0 / 1.
Tensor<float> read_mask(const std::filesystem::path& path);
void write_mask(const std::filesystem::path& path, const Tensor<float>& mask);

std::uint8_t quantize(float v);

}  // namespace cmfd
