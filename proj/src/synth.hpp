#pragma once

#include <cstdint>
#include <string>

#include "mnist.hpp"

namespace clp {

// Procedural MNIST-shaped corpus: ten classes composed from a shared stroke
// dictionary, with per-sample jitter and noise. Classes share strokes so
// sequential training interferes the way handwritten digits do. Written as
// standard IDX files (train-images-idx3-ubyte etc.) so the rest of the
// pipeline cannot tell it apart from the real dataset.
struct SynthSpec {
  int64_t n_train = 60000;
  int64_t n_test = 10000;
  uint64_t seed = 1;
};

// the dictionary comes from `seed`, the sample stream from (seed, split)
LabeledImages make_synthetic_images(int64_t n, uint64_t seed, std::string_view split);

// writes the four IDX files into dir; creates dir if needed
void write_synthetic_mnist(const std::string& dir, const SynthSpec& spec);

}  // namespace clp
