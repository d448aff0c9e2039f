#include "cmfd/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "cmfd/config.hpp"

namespace cmfd {

void AugmentConfig::validate() const {
  if (!(flip_prob >= 0 && flip_prob <= 1)) throw ConfigError("augment.flip_prob must lie in [0, 1]");
  if (!(rotation_deg >= 0 && rotation_deg <= 180)) throw ConfigError("augment.rotation_deg must lie in [0, 180]");
  if (!(brightness >= 0 && brightness <= 1)) throw ConfigError("augment.brightness must lie in [0, 1]");
  if (!(contrast >= 0 && contrast < 1)) throw ConfigError("augment.contrast must lie in [0, 1)");
}

Sample hflip(const Sample& s) {
  Sample out = s;
  const int c = s.image.dim(0), h = s.image.dim(1), w = s.image.dim(2);
  for (int k = 0; k < c; ++k)
    for (int r = 0; r < h; ++r)
      for (int x = 0; x < w; ++x) {
        const std::size_t row = (static_cast<std::size_t>(k) * h + r) * w;
        out.image[row + x] = s.image[row + (w - 1 - x)];
      }
  for (int r = 0; r < h; ++r)
    for (int x = 0; x < w; ++x) {
      out.mask[static_cast<std::size_t>(r) * w + x] = s.mask[static_cast<std::size_t>(r) * w + (w - 1 - x)];
    }
  return out;
}

Sample rotate(const Sample& s, double degrees) {
  if (degrees == 0.0) return s;
  Sample out = s;
  const int ch = s.image.dim(0), h = s.image.dim(1), w = s.image.dim(2);
  const double theta = degrees * std::numbers::pi / 180.0;
  const double cs = std::cos(theta), sn = std::sin(theta);
  const double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      // inverse map: output pixel -> source location
      const double dy = r - cy, dx = c - cx;
      const double sy = cs * dy - sn * dx + cy;
      const double sx = sn * dy + cs * dx + cx;
      const std::size_t o = static_cast<std::size_t>(r) * w + c;

      const long ny = std::lround(sy), nx = std::lround(sx);
      out.mask[o] = (ny >= 0 && ny < h && nx >= 0 && nx < w) ? s.mask[static_cast<std::size_t>(ny) * w + nx] : 0.0f;

      const int y0 = static_cast<int>(std::floor(sy)), x0 = static_cast<int>(std::floor(sx));
      const double fy = sy - y0, fx = sx - x0;
      for (int k = 0; k < ch; ++k) {
        auto px = [&](int y, int x) -> double {
          if (y < 0 || y >= h || x < 0 || x >= w) return 0.0;
          return s.image[static_cast<std::size_t>(k) * plane + static_cast<std::size_t>(y) * w + x];
        };
        const double v = (1 - fy) * ((1 - fx) * px(y0, x0) + fx * px(y0, x0 + 1)) +
                         fy * ((1 - fx) * px(y0 + 1, x0) + fx * px(y0 + 1, x0 + 1));
        out.image[static_cast<std::size_t>(k) * plane + o] = static_cast<float>(v);
      }
    }
  return out;
}

Tensor<float> jitter(const Tensor<float>& image, double brightness, double contrast) {
  double mean = 0;
  for (float v : image.data()) mean += v;
  mean /= static_cast<double>(image.size());
  Tensor<float> out(image.shape());
  for (std::size_t i = 0; i < image.size(); ++i) {
    const double v = (image[i] - mean) * (1 + contrast) + mean + brightness;
    out[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
  }
  return out;
}

Sample augment(const Sample& s, const AugmentConfig& cfg, Rng& rng) {
  const bool flip = rng.uniform() < cfg.flip_prob;
  const double angle = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg);
  const double bright = rng.uniform(-cfg.brightness, cfg.brightness);
  const double contrast = rng.uniform(-cfg.contrast, cfg.contrast);
  Sample out = flip ? hflip(s) : s;
  out = rotate(out, angle);
  if (bright != 0.0 || contrast != 0.0) out.image = jitter(out.image, bright, contrast);
  return out;
}

}  // namespace cmfd
