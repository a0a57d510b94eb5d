#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace clp {

enum class ErrorKind { invalid_argument, data, io, numeric, internal };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, std::string msg) : std::runtime_error(std::move(msg)), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] void fail(ErrorKind kind, const std::string& msg);

using Shape = std::vector<int64_t>;

int64_t numel(const Shape& s);
std::string shape_str(const Shape& s);

// Tensor storage is 64-byte aligned so vectorized kernels take the same code
// path for every buffer; results are then bit-reproducible regardless of
// heap layout.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr size_t alignment = 64;

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(size_t n) {
    size_t bytes = (n * sizeof(T) + alignment - 1) / alignment * alignment;
    void* p = ::operator new(bytes, std::align_val_t(alignment));
    return static_cast<T*>(p);
  }
  void deallocate(T* p, size_t) noexcept { ::operator delete(p, std::align_val_t(alignment)); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const {
    return true;
  }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

class Graph;

// Dense 64-bit tensor, row-major. Storage is shared between copies; a tensor
// optionally references the graph node that produced it. Detached tensors
// (graph() == nullptr) act as constants: backward never reaches them.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);
  static Tensor scalar(double v);
  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }

  bool defined() const { return data_ != nullptr; }
  const Shape& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int64_t dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int64_t size() const;

  double* data();
  const double* data() const;
  double item() const;  // requires size() == 1

  bool attached() const { return graph_ != nullptr; }
  Graph* graph() const { return graph_; }
  int node() const { return node_; }

  Tensor detached() const;  // same storage, no node reference
  Tensor clone() const;     // deep copy, detached

 private:
  friend class Graph;
  friend struct GraphDetail;
  std::shared_ptr<Buffer> data_;
  Shape shape_;
  Graph* graph_ = nullptr;
  int node_ = -1;
};

// Single-threaded computation graph. Nodes are recorded in topological
// (construction) order; backward walks them in reverse exactly once.
// With create_graph=true the backward pass itself is recorded, so a second
// backward over the produced gradients yields exact second-order terms.
class Graph {
 public:
  Graph();
  ~Graph();
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // attach a copy of `value` as a differentiable leaf
  Tensor leaf(const Tensor& value);

  size_t num_nodes() const;

  // Reverse-mode gradients of a scalar loss. Returns one tensor per `wrt`
  // entry, zeros where the loss does not reach it. Gradients of fan-out
  // nodes accumulate additively.
  std::vector<Tensor> gradient(const Tensor& loss, std::span<const Tensor> wrt,
                               bool create_graph = false);

  struct Impl;

 private:
  friend struct GraphDetail;
  std::unique_ptr<Impl> impl_;
};

// convenience form of Graph::gradient
std::vector<Tensor> backward(const Tensor& loss, std::span<const Tensor> params);

// Suppresses node recording for its lifetime (fast numeric path).
class NoRecordGuard {
 public:
  NoRecordGuard();
  ~NoRecordGuard();
  NoRecordGuard(const NoRecordGuard&) = delete;
  NoRecordGuard& operator=(const NoRecordGuard&) = delete;
};

// ---- operations ----------------------------------------------------------
// Shapes must match exactly unless stated otherwise; the only broadcasts are
// the bias adds and the internal row/column expansion primitives.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor xlogx(const Tensor& a);                   // x*log(x) with 0 -> 0
Tensor xlogy(const Tensor& a, const Tensor& b);  // a*log(b) with a==0 -> 0
Tensor relu(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor scale(const Tensor& a, double c);
Tensor smul(const Tensor& a, const Tensor& s);  // multiply by size-1 tensor
Tensor sum(const Tensor& a);                    // -> scalar
Tensor mean(const Tensor& a);                   // -> scalar

Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k] x [k,n]
Tensor transpose(const Tensor& a);                // 2-d
Tensor reshape(const Tensor& a, Shape shape);

Tensor row_sum(const Tensor& a);                      // [b,c] -> [b,1]
Tensor col_sum(const Tensor& a);                      // [b,c] -> [c]
Tensor broadcast_col(const Tensor& a, int64_t cols);  // [b,1] -> [b,cols]
Tensor broadcast_row(const Tensor& a, int64_t rows);  // [c] -> [rows,c]
Tensor bias_add(const Tensor& x, const Tensor& bias);       // [b,n] + [n]
Tensor bias_add_chan(const Tensor& x, const Tensor& bias);  // [b,c,h,w] + [c]

Tensor softmax(const Tensor& a, int axis);      // axis must be last dim
Tensor log_softmax(const Tensor& a, int axis);  // max-shifted for stability

Tensor gather_rows(const Tensor& a, const std::vector<int32_t>& idx);  // [b,c] -> [b,1]
Tensor scatter_rows(const Tensor& a, const std::vector<int32_t>& idx, int64_t cols);

// mean over batch of -log_softmax(logits)[label]
Tensor cross_entropy(const Tensor& logits, const std::vector<int32_t>& labels);
// mean over batch of sum_j p*(log p - log q); rows of p,q must be distributions
Tensor kl_divergence(const Tensor& p, const Tensor& q);

struct ConvGeom {
  int stride_h = 1, stride_w = 1;
  int pad_top = 0, pad_bottom = 0, pad_left = 0, pad_right = 0;
};

// cross-correlation, x: [b,cin,h,w], k: [cout,cin,kh,kw]
Tensor conv2d(const Tensor& x, const Tensor& k, int stride, int padding);
Tensor conv2d(const Tensor& x, const Tensor& k, const ConvGeom& geom);

Tensor upsample2(const Tensor& x);  // nearest-neighbor x2 on [b,c,h,w]
Tensor pool2sum(const Tensor& x);   // 2x2 sum pool (adjoint of upsample2)

// detached-only helpers
Tensor clip(const Tensor& x, double lo, double hi);
std::vector<int32_t> argmax_rows(const Tensor& logits);

// ---- differentiable parameter update -------------------------------------

// theta' = theta - alpha * d(inner)/d(theta), built as graph nodes so a later
// backward reaches through the update. theta leaves are treated as constants
// of the outer problem. first_order detaches the inner gradient.
std::vector<Tensor> pseudo_update(Graph& g, std::span<const Tensor> theta_leaves,
                                  const Tensor& inner_loss, double alpha,
                                  bool first_order = false);

using OuterLossFn = std::function<Tensor(Graph&, std::span<const Tensor> theta_prime)>;
using InnerLossFn =
    std::function<Tensor(Graph&, std::span<const Tensor> theta, std::span<const Tensor> xi)>;

// Gradient of outer_loss(theta - alpha*grad_theta inner_loss(theta, xi)) with
// respect to xi. Inputs are detached values; one gradient per xi tensor.
std::vector<Tensor> grad_through_update(std::span<const Tensor> theta, std::span<const Tensor> xi,
                                        const InnerLossFn& inner_loss,
                                        const OuterLossFn& outer_loss, double alpha,
                                        bool first_order = false);

// ---- named flat parameter storage ----------------------------------------

// Flattened model parameters: named segments over one contiguous buffer.
// Two ParamVectors built from the same description have identical layouts.
class ParamVector {
 public:
  struct Segment {
    std::string name;
    Shape shape;
    int64_t offset = 0;
    int64_t count = 0;
  };

  ParamVector() = default;

  void add_segment(std::string name, Shape shape);
  int segment_count() const { return static_cast<int>(segs_.size()); }
  const Segment& segment(int i) const { return segs_[static_cast<size_t>(i)]; }
  int find(std::string_view name) const;  // -1 when absent

  int64_t size() const { return static_cast<int64_t>(data_.size()); }
  std::span<double> flat() { return data_; }
  std::span<const double> flat() const { return data_; }
  std::span<double> segment_data(int i);
  std::span<const double> segment_data(int i) const;

  Tensor tensor(int i) const;               // detached copy of segment i
  void set_tensor(int i, const Tensor& t);  // copy back, shape-checked
  std::vector<Tensor> tensors() const;

  bool same_layout(const ParamVector& other) const;

  std::vector<double> to_flat() const { return data_; }
  void from_flat(std::span<const double> flat);

  void fill(double v);
  void axpy(double a, const ParamVector& x);  // this += a*x

 private:
  std::vector<Segment> segs_;
  std::vector<double> data_;
};

// leaves for every segment, in segment order
std::vector<Tensor> attach(Graph& g, const ParamVector& p);

}  // namespace clp
