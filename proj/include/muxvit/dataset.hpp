#pragma once

// Synthetic oriented-grating classification data. Every sample is fully
// determined by (seed, index), so the dataset is generated on the fly and
// never stored.

#include <cstdint>
#include <vector>

#include "muxvit/tensor.hpp"

namespace muxvit {

struct SynthSpec {
  std::uint64_t seed = 0;
  int image_size = 32;   // s, square single-channel images
  int classes = 10;      // C >= 2
  double noise_sigma = 0.1;

  void validate() const;
};

struct SynthSample {
  Tensor<float> image;  // [s x s x 1], values clamped to [-2, 2]
  int label = 0;
};

// Sample i: label k = stream(seed,i) mod C; image(x,y) =
// sin(2*pi*f*(x*cos(theta_k) + y*sin(theta_k))/s + phi) + N(0, sigma),
// theta_k = k*pi/C, f in {2,3,4}, phi in [0, 2*pi) drawn per sample.
SynthSample synth_sample(const SynthSpec& spec, std::uint64_t index);

int synth_label(const SynthSpec& spec, std::uint64_t index);

struct DatasetCache {
  int n = 0;
  int image_size = 0;
  int channels = 1;
  std::vector<float> images;  // n * s * s * c, row-major
  std::vector<int> labels;
};

// Materializes samples [first, first + n) into memory.
DatasetCache build_dataset(const SynthSpec& spec, std::uint64_t first, int n);

}  // namespace muxvit
