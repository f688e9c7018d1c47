#include "muxvit/dataset.hpp"

#include <algorithm>
#include <cmath>

#include "muxvit/errors.hpp"
#include "muxvit/rng.hpp"

namespace muxvit {

namespace {
constexpr double kTwoPi = 6.283185307179586477;
}

void SynthSpec::validate() const {
  if (classes < 2) throw ConfigError("synthetic data needs at least 2 classes");
  if (image_size < 8) throw ConfigError("synthetic image size must be >= 8");
  if (noise_sigma < 0) throw ConfigError("noise sigma must be non-negative");
}

int synth_label(const SynthSpec& spec, std::uint64_t index) {
  spec.validate();
  Rng rng(spec.seed, index);
  return static_cast<int>(rng.next_below(static_cast<std::uint64_t>(spec.classes)));
}

SynthSample synth_sample(const SynthSpec& spec, std::uint64_t index) {
  spec.validate();
  Rng rng(spec.seed, index);
  const int s = spec.image_size, C = spec.classes;
  SynthSample out;
  out.label = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(C)));
  const double f = 2.0 + static_cast<double>(rng.next_below(3));  // {2, 3, 4}
  const double phi = rng.next_unit() * kTwoPi;
  const double theta = static_cast<double>(out.label) * 3.14159265358979323846 / C;
  const double cx = std::cos(theta), sy = std::sin(theta);

  out.image = Tensor<float>({s, s, 1});
  float* px = out.image.ptr();
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x) {
      double v = std::sin(kTwoPi * f * (x * cx + y * sy) / s + phi);
      if (spec.noise_sigma > 0) v += spec.noise_sigma * rng.next_normal();
      px[static_cast<std::size_t>(y) * s + x] = static_cast<float>(std::clamp(v, -2.0, 2.0));
    }
  return out;
}

DatasetCache build_dataset(const SynthSpec& spec, std::uint64_t first, int n) {
  spec.validate();
  if (n < 0) throw ConfigError("dataset size must be non-negative");
  DatasetCache cache;
  cache.n = n;
  cache.image_size = spec.image_size;
  cache.channels = 1;
  const std::size_t px = static_cast<std::size_t>(spec.image_size) * spec.image_size;
  cache.images.resize(static_cast<std::size_t>(n) * px);
  cache.labels.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    SynthSample sample = synth_sample(spec, first + static_cast<std::uint64_t>(i));
    std::copy(sample.image.data.begin(), sample.image.data.end(),
              cache.images.begin() + static_cast<std::size_t>(i) * px);
    cache.labels[static_cast<std::size_t>(i)] = sample.label;
  }
  return cache;
}

}  // namespace muxvit
