#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cmfd/image_io.hpp"

namespace cmfd {

struct DatasetSpec {
  int count = 200;
  int image_size = 64;
  int lesions_min = 1;
  int lesions_max = 2;
  double radius_min = 0.12;  // semi-major axis as a fraction of the image size
  double radius_max = 0.28;
  double eccentricity_min = 0.6;  // minor / major axis ratio
  double contrast_min = 0.25;
  double contrast_max = 0.45;
  double texture_amplitude = 0.08;
  double edge_blur = 1.5;  // pixels
  double test_fraction = 0.2;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const DatasetSpec&) const = default;
};

struct Ellipse {
  double cy = 0, cx = 0;  // centre, pixels
  double ry = 1, rx = 1;  // semi-axes before rotation, pixels
  double angle = 0;       // radians
  // Normalised radius: <= 1 inside.
  double level(double y, double x) const;
};

// Exact ellipse interiors, evaluated at pixel centres.
Tensor<float> rasterize(const std::vector<Ellipse>& lesions, int height, int width);

// Sample `index` of the dataset; a pure function of (spec, index).
Sample synth_sample(const DatasetSpec& spec, int index);

std::string sample_id(int index);

struct Manifest {
  std::uint64_t seed = 0;
  DatasetSpec spec;
  std::vector<std::string> train;
  std::vector<std::string> test;
};

// Deterministic train/test split of sample ids.
Manifest make_manifest(const DatasetSpec& spec);

// Writes images/<id>.ppm, masks/<id>.pgm and manifest.json under `dir`;
// returns the manifest path.
std::filesystem::path synth_generate(const DatasetSpec& spec, const std::filesystem::path& dir);

Manifest read_manifest(const std::filesystem::path& dir);
Sample load_sample(const std::filesystem::path& dir, const std::string& id);
std::vector<Sample> load_split(const std::filesystem::path& dir, const std::vector<std::string>& ids);

}  // namespace cmfd
