#include "cmfd/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include "cmfd/config.hpp"
#include "cmfd/rng.hpp"

namespace cmfd {

namespace fs = std::filesystem;

void DatasetSpec::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("dataset spec: " + msg); };
  if (count < 1) fail("count must be at least 1");
  if (image_size < 8) fail("image_size must be at least 8");
  if (lesions_min < 1 || lesions_max < lesions_min) fail("lesion count range must satisfy 1 <= min <= max");
  if (!(radius_min > 0 && radius_max < 0.5 && radius_min <= radius_max)) fail("radius range must lie in (0, 0.5)");
  if (!(eccentricity_min > 0 && eccentricity_min <= 1)) fail("eccentricity_min must lie in (0, 1]");
  if (!(contrast_min >= 0 && contrast_max >= contrast_min && contrast_max <= 1)) fail("bad contrast range");
  if (!(texture_amplitude >= 0 && texture_amplitude <= 0.5)) fail("texture_amplitude must lie in [0, 0.5]");
  if (!(edge_blur >= 0)) fail("edge_blur must be non-negative");
  if (!(test_fraction >= 0 && test_fraction < 1)) fail("test_fraction must lie in [0, 1)");
}

double Ellipse::level(double y, double x) const {
  const double dy = y - cy, dx = x - cx;
  const double c = std::cos(angle), s = std::sin(angle);
  const double u = c * dx + s * dy, v = -s * dx + c * dy;
  return std::sqrt((u * u) / (rx * rx) + (v * v) / (ry * ry));
}

Tensor<float> rasterize(const std::vector<Ellipse>& lesions, int height, int width) {
  Tensor<float> mask({height, width});
  for (int r = 0; r < height; ++r)
    for (int c = 0; c < width; ++c)
      for (const auto& e : lesions)
        if (e.level(r, c) <= 1.0) mask[static_cast<std::size_t>(r) * width + c] = 1.0f;
  return mask;
}

std::string sample_id(int index) {
  std::string digits = std::to_string(index);
  return "s" + std::string(digits.size() < 4 ? 4 - digits.size() : 0, '0') + digits;
}

Sample synth_sample(const DatasetSpec& spec, int index) {
  Rng root(spec.seed);
  Rng rng = root.split(static_cast<std::uint64_t>(index));
  const int n = spec.image_size;
  const double size = n;

  std::array<double, 3> base{rng.uniform(0.55, 0.85), rng.uniform(0.3, 0.5), rng.uniform(0.25, 0.45)};
  struct Wave {
    double fy, fx, phase, amp;
  };
  std::array<std::array<Wave, 4>, 3> waves;
  for (auto& ch : waves)
    for (auto& w : ch) w = {rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(0, 2 * std::numbers::pi), rng.uniform(0.5, 1.0)};

  std::vector<Ellipse> lesions(static_cast<std::size_t>(rng.uniform_int(spec.lesions_min, spec.lesions_max)));
  std::vector<std::array<double, 3>> colors;
  for (auto& e : lesions) {
    const double major = rng.uniform(spec.radius_min, spec.radius_max) * size;
    const double minor = major * rng.uniform(spec.eccentricity_min, 1.0);
    e.rx = major;
    e.ry = minor;
    e.angle = rng.uniform(0, std::numbers::pi);
    e.cy = rng.uniform(0.15, 0.85) * (size - 1);
    e.cx = rng.uniform(0.15, 0.85) * (size - 1);
    const double sign = rng.bernoulli(0.5) ? 1.0 : -1.0;
    const double contrast = rng.uniform(spec.contrast_min, spec.contrast_max);
    std::array<double, 3> col{};
    for (std::size_t c = 0; c < 3; ++c) col[c] = base[c] + sign * contrast * rng.uniform(0.7, 1.0);
    colors.push_back(col);
  }

  Sample s;
  s.id = sample_id(index);
  s.image = Tensor<float>({3, n, n});
  const std::size_t plane = static_cast<std::size_t>(n) * n;
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) {
      std::array<double, 3> texture{};
      for (std::size_t ch = 0; ch < 3; ++ch) {
        double t = 0;
        for (const auto& w : waves[ch]) t += w.amp * std::sin(w.fy * r + w.fx * c + w.phase);
        texture[ch] = spec.texture_amplitude * (t / 4.0 + 0.5 * rng.uniform(-1, 1));
      }
      std::array<double, 3> px{};
      for (std::size_t ch = 0; ch < 3; ++ch) px[ch] = base[ch];
      for (std::size_t k = 0; k < lesions.size(); ++k) {
        const auto& e = lesions[k];
        const double dist = (e.level(r, c) - 1.0) * std::min(e.rx, e.ry);
        const double alpha = spec.edge_blur > 0 ? 0.5 * (1.0 - std::tanh(dist / spec.edge_blur)) : (dist <= 0 ? 1.0 : 0.0);
        for (std::size_t ch = 0; ch < 3; ++ch) px[ch] = (1 - alpha) * px[ch] + alpha * colors[k][ch];
      }
      for (std::size_t ch = 0; ch < 3; ++ch) {
        s.image[ch * plane + static_cast<std::size_t>(r) * n + c] =
            static_cast<float>(std::clamp(px[ch] + texture[ch], 0.0, 1.0));
      }
    }
  s.mask = rasterize(lesions, n, n);
  return s;
}

Manifest make_manifest(const DatasetSpec& spec) {
  Manifest m;
  m.seed = spec.seed;
  m.spec = spec;
  std::vector<int> order(static_cast<std::size_t>(spec.count));
  for (int i = 0; i < spec.count; ++i) order[static_cast<std::size_t>(i)] = i;
  Rng rng = Rng(spec.seed).split(0x5b117);
  for (std::size_t i = order.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i) - 1));
    std::swap(order[i - 1], order[j]);
  }
  const auto n_test = static_cast<std::size_t>(std::lround(spec.count * spec.test_fraction));
  std::sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_test));
  std::sort(order.begin() + static_cast<std::ptrdiff_t>(n_test), order.end());
  for (std::size_t i = 0; i < order.size(); ++i) (i < n_test ? m.test : m.train).push_back(sample_id(order[i]));
  return m;
}

fs::path synth_generate(const DatasetSpec& spec, const fs::path& dir) {
  spec.validate();
  std::error_code ec;
  if (fs::exists(dir, ec) && !fs::is_directory(dir, ec)) throw IoError(dir.string() + " exists and is not a directory");
  fs::create_directories(dir / "images", ec);
  if (ec) throw IoError("cannot create " + (dir / "images").string() + ": " + ec.message());
  fs::create_directories(dir / "masks", ec);
  if (ec) throw IoError("cannot create " + (dir / "masks").string() + ": " + ec.message());
  for (int i = 0; i < spec.count; ++i) {
    const Sample s = synth_sample(spec, i);
    write_ppm(dir / "images" / (s.id + ".ppm"), s.image);
    write_mask(dir / "masks" / (s.id + ".pgm"), s.mask);
  }
  const Manifest m = make_manifest(spec);
  const fs::path path = dir / "manifest.json";
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << manifest_to_json(m).dump(2) << '\n';
  if (!out) throw IoError("write failed for " + path.string());
  return path;
}

Manifest read_manifest(const fs::path& dir) {
  const fs::path path = dir / "manifest.json";
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
  return manifest_from_json(j);
}

Sample load_sample(const fs::path& dir, const std::string& id) {
  Sample s;
  s.id = id;
  s.image = read_ppm(dir / "images" / (id + ".ppm"));
  s.mask = read_mask(dir / "masks" / (id + ".pgm"));
  if (s.image.dim(1) != s.mask.dim(0) || s.image.dim(2) != s.mask.dim(1)) {
    throw IoError("sample " + id + ": image " + to_string(s.image.shape()) + " and mask " + to_string(s.mask.shape()) +
                  " differ in size");
  }
  return s;
}

std::vector<Sample> load_split(const fs::path& dir, const std::vector<std::string>& ids) {
  std::vector<Sample> out;
  out.reserve(ids.size());
  for (const auto& id : ids) out.push_back(load_sample(dir, id));
  return out;
}

}  // namespace cmfd
