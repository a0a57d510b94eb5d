#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mnist.hpp"
#include "tensor.hpp"

namespace clp {

// Victim classifier: MLP over flattened pixels, ReLU hidden layers, one
// shared 10-way head for every benchmark.
struct MlpSpec {
  std::vector<int64_t> sizes{784, 256, 256, 10};
};

class Classifier {
 public:
  Classifier() = default;
  static Classifier create(const MlpSpec& spec, uint64_t seed);

  const MlpSpec& spec() const { return spec_; }
  const ParamVector& params() const { return params_; }
  ParamVector& params() { return params_; }

  // attached forward over leaves from attach(g, params)
  Tensor forward(Graph& g, std::span<const Tensor> p, const Tensor& x) const;
  // detached inference
  Tensor forward(const Tensor& x) const;

  double accuracy(const LabeledImages& data, int64_t batch = 1024) const;

  Classifier snapshot() const;  // deep copy

 private:
  MlpSpec spec_;
  ParamVector params_;
};

Tensor mlp_forward(const MlpSpec& spec, std::span<const Tensor> params, const Tensor& x);
ParamVector make_mlp_params(const MlpSpec& spec, uint64_t seed);

// Attack model: conv encoder (3x3: 16, 64, 128 channels) with a strided
// funnel to 7x7, conv decoder (5x5x128, 2x2x64, then 1x1 back to one
// channel) interleaved with nearest-neighbor upsampling, output mapped
// through eps*tanh so every element is strictly inside (-eps, eps).
class AttackModel {
 public:
  AttackModel() = default;
  static AttackModel create(double eps, uint64_t seed);

  double eps() const { return eps_; }
  const ParamVector& params() const { return params_; }
  ParamVector& params() { return params_; }

  Tensor forward(Graph& g, std::span<const Tensor> p, const Tensor& x) const;  // noise
  Tensor forward(const Tensor& x) const;

  // zeroes the final conv so the generated noise is identically zero
  void zero_output_layer();

 private:
  double eps_ = 0.2;
  ParamVector params_;
};

// x' = clip(x + noise, 0, 1); detached materialization only (training-time
// poison keeps the unclipped sum so gradients stay exact)
Tensor apply_poison(const Tensor& x, const Tensor& noise);

// Flat binary checkpoint: named segments with shapes, bit-exact doubles.
void save_checkpoint(const std::string& path, const ParamVector& params, const std::string& kind);
ParamVector load_checkpoint(const std::string& path, std::string* kind_out = nullptr);

}  // namespace clp
