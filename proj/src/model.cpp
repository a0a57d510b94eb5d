#include "model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "rng.hpp"

namespace clp {

namespace {

void kaiming_uniform(std::span<double> w, int64_t fan_in, Rng& rng) {
  double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (double& v : w) v = rng.uniform(-bound, bound);
}

Tensor as_rows(const Tensor& x, int64_t features) {
  if (x.ndim() == 2) return x;
  return reshape(x, Shape{x.dim(0), features});
}

}  // namespace

ParamVector make_mlp_params(const MlpSpec& spec, uint64_t seed) {
  ParamVector p;
  for (size_t i = 0; i + 1 < spec.sizes.size(); ++i) {
    std::string tag = "fc" + std::to_string(i + 1);
    p.add_segment(tag + ".w", Shape{spec.sizes[i], spec.sizes[i + 1]});
    p.add_segment(tag + ".b", Shape{spec.sizes[i + 1]});
  }
  Rng rng(seed);
  for (int i = 0; i < p.segment_count(); ++i) {
    const auto& seg = p.segment(i);
    if (seg.shape.size() == 2) kaiming_uniform(p.segment_data(i), seg.shape[0], rng);
  }
  return p;
}

Tensor mlp_forward(const MlpSpec& spec, std::span<const Tensor> params, const Tensor& x) {
  size_t layers = spec.sizes.size() - 1;
  if (params.size() != 2 * layers)
    fail(ErrorKind::invalid_argument, "mlp_forward: expected " + std::to_string(2 * layers) +
                                          " parameter tensors, got " + std::to_string(params.size()));
  Tensor h = as_rows(x, spec.sizes.front());
  if (h.dim(1) != spec.sizes.front())
    fail(ErrorKind::invalid_argument, "mlp_forward: input " + shape_str(x.shape()) +
                                          " does not match feature size " +
                                          std::to_string(spec.sizes.front()));
  for (size_t l = 0; l < layers; ++l) {
    h = bias_add(matmul(h, params[2 * l]), params[2 * l + 1]);
    if (l + 1 < layers) h = relu(h);
  }
  return h;
}

Classifier Classifier::create(const MlpSpec& spec, uint64_t seed) {
  Classifier c;
  c.spec_ = spec;
  c.params_ = make_mlp_params(spec, seed);
  return c;
}

Tensor Classifier::forward(Graph& g, std::span<const Tensor> p, const Tensor& x) const {
  (void)g;
  return mlp_forward(spec_, p, x);
}

Tensor Classifier::forward(const Tensor& x) const {
  NoRecordGuard guard;
  return mlp_forward(spec_, params_.tensors(), x);
}

double Classifier::accuracy(const LabeledImages& data, int64_t batch) const {
  NoRecordGuard guard;
  int64_t n = data.count();
  if (n == 0) fail(ErrorKind::invalid_argument, "accuracy: empty dataset");
  std::vector<Tensor> p = params_.tensors();
  int64_t px = data.images.size() / n;
  int64_t correct = 0;
  for (int64_t start = 0; start < n; start += batch) {
    int64_t end = std::min(start + batch, n);
    Tensor x(Shape{end - start, px},
             std::vector<double>(data.images.data() + start * px, data.images.data() + end * px));
    std::vector<int32_t> pred = argmax_rows(mlp_forward(spec_, p, x));
    for (int64_t i = start; i < end; ++i)
      if (pred[static_cast<size_t>(i - start)] == data.labels[static_cast<size_t>(i)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

Classifier Classifier::snapshot() const { return *this; }

// ---- attack model -----------------------------------------------------------

namespace {

struct ConvLayer {
  const char* name;
  int64_t cout, cin, kh, kw;
  ConvGeom geom;
  bool upsample_after;
  bool relu_after;
};

// 28 ->(s2) 14 ->(s2) 7 -> 7 | 7 -> up 14 -> up 28 -> 28
const ConvLayer kAttackLayers[] = {
    {"enc1", 16, 1, 3, 3, {2, 2, 1, 1, 1, 1}, false, true},
    {"enc2", 64, 16, 3, 3, {2, 2, 1, 1, 1, 1}, false, true},
    {"enc3", 128, 64, 3, 3, {1, 1, 1, 1, 1, 1}, false, true},
    {"dec1", 128, 128, 5, 5, {1, 1, 2, 2, 2, 2}, true, true},
    {"dec2", 64, 128, 2, 2, {1, 1, 0, 1, 0, 1}, true, true},
    {"dec3", 1, 64, 1, 1, {1, 1, 0, 0, 0, 0}, false, false},
};

}  // namespace

AttackModel AttackModel::create(double eps, uint64_t seed) {
  if (eps <= 0.0) fail(ErrorKind::invalid_argument, "attack model eps must be > 0");
  AttackModel a;
  a.eps_ = eps;
  Rng rng(seed);
  for (const ConvLayer& l : kAttackLayers) {
    a.params_.add_segment(std::string(l.name) + ".w", Shape{l.cout, l.cin, l.kh, l.kw});
    a.params_.add_segment(std::string(l.name) + ".b", Shape{l.cout});
  }
  for (int i = 0; i < a.params_.segment_count(); ++i) {
    const auto& seg = a.params_.segment(i);
    if (seg.shape.size() == 4)
      kaiming_uniform(a.params_.segment_data(i), seg.shape[1] * seg.shape[2] * seg.shape[3], rng);
  }
  return a;
}

Tensor AttackModel::forward(Graph& g, std::span<const Tensor> p, const Tensor& x) const {
  (void)g;
  if (x.ndim() != 4 || x.dim(1) != 1 || x.dim(2) != 28 || x.dim(3) != 28)
    fail(ErrorKind::invalid_argument,
         "attack model expects [b,1,28,28] input, got " + shape_str(x.shape()));
  if (p.size() != 2 * std::size(kAttackLayers))
    fail(ErrorKind::invalid_argument, "attack model: wrong parameter count");
  Tensor h = x;
  for (size_t i = 0; i < std::size(kAttackLayers); ++i) {
    const ConvLayer& l = kAttackLayers[i];
    h = bias_add_chan(conv2d(h, p[2 * i], l.geom), p[2 * i + 1]);
    if (l.relu_after) h = relu(h);
    if (l.upsample_after) h = upsample2(h);
  }
  return scale(tanh(h), eps_);
}

Tensor AttackModel::forward(const Tensor& x) const {
  NoRecordGuard guard;
  Graph unused;
  return forward(unused, params_.tensors(), x);
}

void AttackModel::zero_output_layer() {
  for (const char* name : {"dec3.w", "dec3.b"}) {
    int i = params_.find(name);
    auto d = params_.segment_data(i);
    std::fill(d.begin(), d.end(), 0.0);
  }
}

Tensor apply_poison(const Tensor& x, const Tensor& noise) {
  if (x.shape() != noise.shape())
    fail(ErrorKind::invalid_argument, "apply_poison: shape mismatch " + shape_str(x.shape()) +
                                          " vs " + shape_str(noise.shape()));
  NoRecordGuard guard;
  return clip(add(x.detached(), noise.detached()), 0.0, 1.0);
}

// ---- checkpoints ------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'C', 'L', 'P', 'C', 'K', 'P', 'T', '1'};

template <typename T>
void put(std::ofstream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::ifstream& is, const std::string& path) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) fail(ErrorKind::data, "truncated checkpoint " + path);
  return v;
}

static_assert(std::endian::native == std::endian::little,
              "checkpoint layout assumes a little-endian host");

}  // namespace

void save_checkpoint(const std::string& path, const ParamVector& params, const std::string& kind) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(ErrorKind::io, "cannot write checkpoint " + path);
  os.write(kMagic, sizeof(kMagic));
  put<uint32_t>(os, 1);  // format version
  put<uint32_t>(os, static_cast<uint32_t>(kind.size()));
  os.write(kind.data(), static_cast<std::streamsize>(kind.size()));
  put<uint32_t>(os, static_cast<uint32_t>(params.segment_count()));
  for (int i = 0; i < params.segment_count(); ++i) {
    const auto& seg = params.segment(i);
    put<uint32_t>(os, static_cast<uint32_t>(seg.name.size()));
    os.write(seg.name.data(), static_cast<std::streamsize>(seg.name.size()));
    put<uint32_t>(os, static_cast<uint32_t>(seg.shape.size()));
    for (int64_t d : seg.shape) put<int64_t>(os, d);
    auto data = params.segment_data(i);
    os.write(reinterpret_cast<const char*>(data.data()),
             static_cast<std::streamsize>(data.size() * sizeof(double)));
  }
  if (!os) fail(ErrorKind::io, "failed writing checkpoint " + path);
}

ParamVector load_checkpoint(const std::string& path, std::string* kind_out) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorKind::io, "cannot open checkpoint " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0)
    fail(ErrorKind::data, "not a checkpoint file: " + path);
  uint32_t version = get<uint32_t>(is, path);
  if (version != 1)
    fail(ErrorKind::data, "unsupported checkpoint version " + std::to_string(version));
  uint32_t kind_len = get<uint32_t>(is, path);
  std::string kind(kind_len, '\0');
  is.read(kind.data(), kind_len);
  if (kind_out) *kind_out = kind;
  uint32_t nseg = get<uint32_t>(is, path);
  ParamVector p;
  for (uint32_t s = 0; s < nseg; ++s) {
    uint32_t name_len = get<uint32_t>(is, path);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    uint32_t ndim = get<uint32_t>(is, path);
    Shape shape(ndim);
    for (uint32_t d = 0; d < ndim; ++d) shape[d] = get<int64_t>(is, path);
    p.add_segment(name, shape);
    auto data = p.segment_data(static_cast<int>(s));
    is.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(double)));
    if (!is) fail(ErrorKind::data, "truncated checkpoint " + path);
  }
  return p;
}

}  // namespace clp
