#include "synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>

namespace clp {

namespace {

constexpr int kSide = 28;
constexpr int kPixels = kSide * kSide;
constexpr int kSharedStrokes = 20;  // drawn by several classes (interference)
constexpr int kStrokesPerClass = 4; // one unique + three shared
constexpr int kMaxShift = 2;
constexpr double kNoiseAmp = 0.45;

using StrokeImage = std::array<double, kPixels>;

StrokeImage render_stroke(Rng& rng) {
  StrokeImage img{};
  double cx = rng.uniform(8.0, 20.0);
  double cy = rng.uniform(8.0, 20.0);
  double angle = rng.uniform(0.0, 3.141592653589793);
  double half = rng.uniform(2.5, 5.5);
  double sigma = rng.uniform(1.1, 1.9);
  double dx = std::cos(angle), dy = std::sin(angle);
  double inv = 1.0 / (2.0 * sigma * sigma);
  for (int y = 0; y < kSide; ++y)
    for (int x = 0; x < kSide; ++x) {
      // distance from pixel to the stroke segment
      double px = x - cx, py = y - cy;
      double t = std::clamp(px * dx + py * dy, -half, half);
      double qx = px - t * dx, qy = py - t * dy;
      double d2 = qx * qx + qy * qy;
      img[static_cast<size_t>(y * kSide + x)] = std::exp(-d2 * inv);
    }
  return img;
}

struct ClassDef {
  std::array<int, kStrokesPerClass> stroke;
  std::array<double, kStrokesPerClass> weight;
};

struct Generator {
  std::vector<StrokeImage> strokes;
  std::array<ClassDef, 10> classes;

  explicit Generator(uint64_t seed) {
    Rng rng(derive_seed(seed, "synth-dictionary"));
    strokes.reserve(kSharedStrokes + 10);
    for (int s = 0; s < kSharedStrokes + 10; ++s) strokes.push_back(render_stroke(rng));
    for (int c = 0; c < 10; ++c) {
      ClassDef& def = classes[static_cast<size_t>(c)];
      def.stroke[0] = kSharedStrokes + c;  // class-defining stroke
      def.weight[0] = 1.0;
      for (int k = 1; k < kStrokesPerClass; ++k) {
        def.stroke[static_cast<size_t>(k)] = static_cast<int>(rng.below(kSharedStrokes));
        def.weight[static_cast<size_t>(k)] = rng.uniform(0.4, 0.8);
      }
    }
  }

  void sample(int label, Rng& rng, double* out) const {
    std::fill(out, out + kPixels, 0.0);
    int sx = static_cast<int>(rng.below(2 * kMaxShift + 1)) - kMaxShift;
    int sy = static_cast<int>(rng.below(2 * kMaxShift + 1)) - kMaxShift;
    const ClassDef& def = classes[static_cast<size_t>(label)];
    for (int k = 0; k < kStrokesPerClass; ++k) {
      const StrokeImage& s = strokes[static_cast<size_t>(def.stroke[static_cast<size_t>(k)])];
      double w = def.weight[static_cast<size_t>(k)] * rng.uniform(0.7, 1.3);
      for (int y = 0; y < kSide; ++y) {
        int uy = y - sy;
        if (uy < 0 || uy >= kSide) continue;
        for (int x = 0; x < kSide; ++x) {
          int ux = x - sx;
          if (ux < 0 || ux >= kSide) continue;
          out[y * kSide + x] += w * s[static_cast<size_t>(uy * kSide + ux)];
        }
      }
    }
    for (int i = 0; i < kPixels; ++i) {
      double v = out[i] + rng.uniform(-kNoiseAmp / 2, kNoiseAmp / 2);
      out[i] = std::clamp(v, 0.0, 1.0);
    }
  }
};

std::vector<int32_t> balanced_labels(int64_t n, Rng& rng) {
  std::vector<int32_t> labels(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) labels[static_cast<size_t>(i)] = static_cast<int32_t>(i % 10);
  rng.shuffle(labels);
  return labels;
}

}  // namespace

LabeledImages make_synthetic_images(int64_t n, uint64_t seed, std::string_view split) {
  Generator gen(seed);
  Rng rng(derive_seed(seed, "synth-samples:" + std::string(split)));
  LabeledImages out;
  out.labels = balanced_labels(n, rng);
  out.images = Tensor(Shape{n, 1, kSide, kSide});
  for (int64_t i = 0; i < n; ++i)
    gen.sample(out.labels[static_cast<size_t>(i)], rng, out.images.data() + i * kPixels);
  // round-trip through bytes so in-memory data matches what IDX files hold
  out.images = dequantize_images(quantize_images(out.images), n, kSide, kSide);
  return out;
}

void write_synthetic_mnist(const std::string& dir, const SynthSpec& spec) {
  std::filesystem::create_directories(dir);
  LabeledImages train = make_synthetic_images(spec.n_train, spec.seed, "train");
  LabeledImages test = make_synthetic_images(spec.n_test, spec.seed, "test");
  write_mnist_idx(dir + "/train-images-idx3-ubyte", dir + "/train-labels-idx1-ubyte", train);
  write_mnist_idx(dir + "/t10k-images-idx3-ubyte", dir + "/t10k-labels-idx1-ubyte", test);
}

}  // namespace clp
