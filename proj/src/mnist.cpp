#include "mnist.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <set>

namespace clp {

namespace {

constexpr uint32_t kImagesMagic = 0x00000803;
constexpr uint32_t kLabelsMagic = 0x00000801;

uint32_t read_be32(const uint8_t* p) {
  return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) | (uint32_t(p[2]) << 8) | uint32_t(p[3]);
}

void write_be32(std::ofstream& os, uint32_t v) {
  uint8_t b[4] = {uint8_t(v >> 24), uint8_t(v >> 16), uint8_t(v >> 8), uint8_t(v)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::vector<uint8_t> read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorKind::io, "cannot open " + path);
  is.seekg(0, std::ios::end);
  auto n = is.tellg();
  is.seekg(0, std::ios::beg);
  std::vector<uint8_t> buf(static_cast<size_t>(n));
  is.read(reinterpret_cast<char*>(buf.data()), n);
  if (!is) fail(ErrorKind::io, "failed reading " + path);
  return buf;
}

char hexdigit(uint32_t v) { return "0123456789abcdef"[v & 0xf]; }

std::string hex32(uint32_t v) {
  std::string s = "0x";
  for (int i = 7; i >= 0; --i) s += hexdigit(v >> (4 * i));
  return s;
}

}  // namespace

void LabeledImages::validate() const {
  if (count() != static_cast<int64_t>(labels.size()))
    fail(ErrorKind::data, "image count " + std::to_string(count()) + " != label count " +
                              std::to_string(labels.size()));
  const double* p = images.data();
  for (int64_t i = 0; i < images.size(); ++i)
    if (p[i] < 0.0 || p[i] > 1.0)
      fail(ErrorKind::data, "pixel outside [0,1]: " + std::to_string(p[i]));
}

LabeledImages load_mnist_idx(const std::string& images_path, const std::string& labels_path) {
  std::vector<uint8_t> ib = read_file(images_path);
  if (ib.size() < 16) fail(ErrorKind::data, "truncated IDX image file " + images_path);
  uint32_t magic = read_be32(ib.data());
  if (magic != kImagesMagic)
    fail(ErrorKind::data, "bad IDX image magic " + hex32(magic) + " in " + images_path +
                              " (expected " + hex32(kImagesMagic) + ")");
  uint32_t n = read_be32(ib.data() + 4);
  uint32_t h = read_be32(ib.data() + 8);
  uint32_t w = read_be32(ib.data() + 12);
  size_t need = 16 + size_t(n) * h * w;
  if (ib.size() != need)
    fail(ErrorKind::data, "truncated IDX image file " + images_path + ": " +
                              std::to_string(ib.size()) + " bytes, expected " + std::to_string(need));

  std::vector<uint8_t> lb = read_file(labels_path);
  if (lb.size() < 8) fail(ErrorKind::data, "truncated IDX label file " + labels_path);
  uint32_t lmagic = read_be32(lb.data());
  if (lmagic != kLabelsMagic)
    fail(ErrorKind::data, "bad IDX label magic " + hex32(lmagic) + " in " + labels_path +
                              " (expected " + hex32(kLabelsMagic) + ")");
  uint32_t ln = read_be32(lb.data() + 4);
  if (lb.size() != 8 + size_t(ln))
    fail(ErrorKind::data, "truncated IDX label file " + labels_path);
  if (ln != n)
    fail(ErrorKind::data, "IDX count mismatch: " + std::to_string(n) + " images vs " +
                              std::to_string(ln) + " labels");

  LabeledImages out;
  out.images = dequantize_images(std::vector<uint8_t>(ib.begin() + 16, ib.end()), n, h, w);
  out.labels.resize(n);
  for (uint32_t i = 0; i < n; ++i) {
    uint8_t v = lb[8 + i];
    if (v > 9) fail(ErrorKind::data, "label " + std::to_string(int(v)) + " outside [0,10)");
    out.labels[i] = v;
  }
  return out;
}

void write_mnist_idx(const std::string& images_path, const std::string& labels_path,
                     const LabeledImages& data) {
  int64_t n = data.count();
  int64_t h = data.images.dim(2), w = data.images.dim(3);
  {
    std::ofstream os(images_path, std::ios::binary);
    if (!os) fail(ErrorKind::io, "cannot write " + images_path);
    write_be32(os, kImagesMagic);
    write_be32(os, static_cast<uint32_t>(n));
    write_be32(os, static_cast<uint32_t>(h));
    write_be32(os, static_cast<uint32_t>(w));
    std::vector<uint8_t> bytes = quantize_images(data.images);
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) fail(ErrorKind::io, "failed writing " + images_path);
  }
  {
    std::ofstream os(labels_path, std::ios::binary);
    if (!os) fail(ErrorKind::io, "cannot write " + labels_path);
    write_be32(os, kLabelsMagic);
    write_be32(os, static_cast<uint32_t>(n));
    for (int64_t i = 0; i < n; ++i) {
      uint8_t v = static_cast<uint8_t>(data.labels[static_cast<size_t>(i)]);
      os.write(reinterpret_cast<const char*>(&v), 1);
    }
    if (!os) fail(ErrorKind::io, "failed writing " + labels_path);
  }
}

std::vector<uint8_t> quantize_images(const Tensor& images) {
  std::vector<uint8_t> out(static_cast<size_t>(images.size()));
  const double* p = images.data();
  for (int64_t i = 0; i < images.size(); ++i) {
    double v = std::lround(std::min(1.0, std::max(0.0, p[i])) * 255.0);
    out[static_cast<size_t>(i)] = static_cast<uint8_t>(v);
  }
  return out;
}

Tensor dequantize_images(const std::vector<uint8_t>& bytes, int64_t n, int64_t h, int64_t w) {
  Tensor t(Shape{n, 1, h, w});
  double* p = t.data();
  for (size_t i = 0; i < bytes.size(); ++i) p[i] = bytes[i] / 255.0;
  return t;
}

Tensor apply_permutation(const Tensor& images, const std::vector<int64_t>& perm) {
  int64_t n = images.dim(0);
  int64_t px = images.size() / n;
  if (static_cast<int64_t>(perm.size()) != px)
    fail(ErrorKind::invalid_argument, "permutation covers " + std::to_string(perm.size()) +
                                          " pixels, image has " + std::to_string(px));
  Tensor out(images.shape());
  const double* src = images.data();
  double* dst = out.data();
  for (int64_t i = 0; i < n; ++i) {
    const double* s = src + i * px;
    double* d = dst + i * px;
    for (int64_t j = 0; j < px; ++j) d[j] = s[perm[static_cast<size_t>(j)]];
  }
  return out;
}

std::vector<int64_t> invert_permutation(const std::vector<int64_t>& perm) {
  std::vector<int64_t> inv(perm.size());
  for (size_t i = 0; i < perm.size(); ++i) inv[static_cast<size_t>(perm[i])] = static_cast<int64_t>(i);
  return inv;
}

std::vector<TaskDataset> make_permuted_tasks(const LabeledImages& train, const LabeledImages& test,
                                             int n_tasks, uint64_t seed) {
  if (n_tasks < 1) fail(ErrorKind::invalid_argument, "n_tasks must be >= 1");
  std::vector<TaskDataset> tasks;
  tasks.reserve(static_cast<size_t>(n_tasks));
  int64_t px = train.images.size() / train.count();
  for (int k = 1; k <= n_tasks; ++k) {
    TaskDataset t;
    t.task_id = k;
    if (k == 1) {
      t.train = train;
      t.test = test;
      t.descriptor.kind = "identity";
    } else {
      Rng rng(derive_seed(seed, "perm:" + std::to_string(k)));
      t.descriptor.kind = "permuted";
      t.descriptor.permutation = rng.permutation(px);
      t.train.images = apply_permutation(train.images, t.descriptor.permutation);
      t.train.labels = train.labels;
      t.test.images = apply_permutation(test.images, t.descriptor.permutation);
      t.test.labels = test.labels;
    }
    tasks.push_back(std::move(t));
  }
  return tasks;
}

namespace {

LabeledImages filter_by_labels(const LabeledImages& data, int a, int b) {
  std::vector<int64_t> idx;
  for (int64_t i = 0; i < data.count(); ++i) {
    int32_t l = data.labels[static_cast<size_t>(i)];
    if (l == a || l == b) idx.push_back(i);
  }
  return gather_images(data, idx);
}

}  // namespace

std::vector<TaskDataset> make_split_tasks(const LabeledImages& train, const LabeledImages& test) {
  std::set<int32_t> present(train.labels.begin(), train.labels.end());
  for (int c = 0; c < 10; ++c)
    if (!present.count(c))
      fail(ErrorKind::data, "split tasks need all 10 digit classes; class " + std::to_string(c) +
                                " is missing");
  std::vector<TaskDataset> tasks;
  for (int k = 0; k < 5; ++k) {
    TaskDataset t;
    t.task_id = k + 1;
    t.descriptor.kind = "split";
    t.descriptor.digits = {2 * k, 2 * k + 1};
    t.train = filter_by_labels(train, 2 * k, 2 * k + 1);
    t.test = filter_by_labels(test, 2 * k, 2 * k + 1);
    tasks.push_back(std::move(t));
  }
  return tasks;
}

LabeledImages sample_kd_subset(const TaskDataset& task, int64_t n, uint64_t seed) {
  int64_t total = task.train.count();
  if (n > total)
    fail(ErrorKind::invalid_argument, "kd subset size " + std::to_string(n) +
                                          " exceeds train size " + std::to_string(total));
  Rng rng(seed);
  return gather_images(task.train, rng.sample(total, n));
}

LabeledImages subsample(const LabeledImages& data, int64_t n, uint64_t seed) {
  if (n <= 0 || n >= data.count()) return data;
  Rng rng(seed);
  return gather_images(data, rng.sample(data.count(), n));
}

LabeledImages gather_images(const LabeledImages& data, const std::vector<int64_t>& idx) {
  Shape s = data.images.shape();
  s[0] = static_cast<int64_t>(idx.size());
  LabeledImages out;
  out.images = Tensor(s);
  out.labels.resize(idx.size());
  int64_t px = data.images.size() / data.count();
  const double* src = data.images.data();
  double* dst = out.images.data();
  for (size_t i = 0; i < idx.size(); ++i) {
    std::memcpy(dst + static_cast<int64_t>(i) * px, src + idx[i] * px,
                sizeof(double) * static_cast<size_t>(px));
    out.labels[i] = data.labels[static_cast<size_t>(idx[i])];
  }
  return out;
}

BatchStream::BatchStream(const LabeledImages& data, int64_t batch_size, uint64_t seed, bool shuffle)
    : data_(data), batch_size_(batch_size), shuffle_(shuffle), rng_(seed) {
  if (batch_size_ < 1) fail(ErrorKind::invalid_argument, "batch_size must be >= 1");
  batches_per_epoch_ = (data_.count() + batch_size_ - 1) / batch_size_;
  start_epoch();
}

void BatchStream::start_epoch() {
  int64_t n = data_.count();
  order_.resize(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) order_[static_cast<size_t>(i)] = i;
  if (shuffle_) rng_.shuffle(order_);
  cursor_ = 0;
}

BatchStream::Batch BatchStream::next() {
  if (cursor_ >= data_.count()) {
    ++epoch_;
    start_epoch();
  }
  int64_t end = std::min(cursor_ + batch_size_, data_.count());
  std::vector<int64_t> idx(order_.begin() + cursor_, order_.begin() + end);
  cursor_ = end;
  Batch b;
  LabeledImages g = gather_images(data_, idx);
  b.x = g.images;
  b.y = std::move(g.labels);
  b.indices = std::move(idx);
  return b;
}

}  // namespace clp
