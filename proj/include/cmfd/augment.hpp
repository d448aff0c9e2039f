#pragma once

#include "cmfd/image_io.hpp"
#include "cmfd/rng.hpp"

namespace cmfd {

struct AugmentConfig {
  double flip_prob = 0.5;
  double rotation_deg = 15.0;
  double brightness = 0.2;
  double contrast = 0.2;

  void validate() const;
  bool operator==(const AugmentConfig&) const = default;
};

Sample hflip(const Sample& s);

// Rotation about the image centre: bilinear for the image, nearest for the
// mask, zero outside the source.
Sample rotate(const Sample& s, double degrees);

// x -> (x - mean) * (1 + contrast) + mean + brightness, clamped to [0,1].
Tensor<float> jitter(const Tensor<float>& image, double brightness, double contrast);

// Always draws the same number of variates from `rng`.
Sample augment(const Sample& s, const AugmentConfig& cfg, Rng& rng);

}  // namespace cmfd
