#include "tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <optional>
#include <sstream>

namespace clp {

namespace {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using CMapM = Eigen::Map<const MatRM>;
using MapA = Eigen::Map<Eigen::ArrayXd>;
using CMapA = Eigen::Map<const Eigen::ArrayXd>;

thread_local int g_no_record = 0;

enum class Op : uint8_t {
  leaf,
  add_,
  sub_,
  mul_,
  div_,
  neg_,
  exp_,
  log_,
  xlogx_,
  xlogy_,
  relu_,
  tanh_,
  scale_,
  smul_,
  sum_,
  matmul_,
  transpose_,
  reshape_,
  row_sum_,
  col_sum_,
  bcast_col_,
  bcast_row_,
  chan_sum_,
  bcast_chan_,
  bias_add_,
  bias_add_chan_,
  softmax_,
  log_softmax_,
  gather_,
  scatter_,
  conv_,
  conv_dx_,
  conv_dk_,
  upsample2_,
  pool2sum_,
};

}  // namespace

void fail(ErrorKind kind, const std::string& msg) { throw Error(kind, msg); }

int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

// ---- Tensor ---------------------------------------------------------------

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  for (int64_t d : shape_)
    if (d <= 0) fail(ErrorKind::invalid_argument, "tensor dimension must be positive, got " + shape_str(shape_));
  data_ = std::make_shared<Buffer>(static_cast<size_t>(numel(shape_)), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)) {
  if (numel(shape_) != static_cast<int64_t>(values.size()))
    fail(ErrorKind::invalid_argument, "value count " + std::to_string(values.size()) +
                                          " does not match shape " + shape_str(shape_));
  data_ = std::make_shared<Buffer>(values.begin(), values.end());
}

Tensor Tensor::scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

int64_t Tensor::size() const { return data_ ? static_cast<int64_t>(data_->size()) : 0; }

double* Tensor::data() { return data_->data(); }
const double* Tensor::data() const { return data_->data(); }

double Tensor::item() const {
  if (size() != 1) fail(ErrorKind::invalid_argument, "item() requires a scalar, got " + shape_str(shape_));
  return (*data_)[0];
}

Tensor Tensor::detached() const {
  Tensor t = *this;
  t.graph_ = nullptr;
  t.node_ = -1;
  return t;
}

Tensor Tensor::clone() const {
  Tensor t;
  t.shape_ = shape_;
  t.data_ = std::make_shared<Buffer>(*data_);
  return t;
}

// ---- Graph ----------------------------------------------------------------

namespace {

struct Node {
  Op op = Op::leaf;
  int in0 = -1, in1 = -1;
  Tensor saved0, saved1;  // input values (also kept for constants)
  Tensor out;
  double c = 0.0;          // scale factor / broadcast size
  int64_t n = 0;           // broadcast size / scatter columns
  ConvGeom geom;
  std::shared_ptr<const std::vector<int32_t>> idx;  // gather/scatter indices
};

}  // namespace

struct Graph::Impl {
  std::vector<Node> nodes;
};

struct GraphDetail {
  // Appends a node when recording is active and any input is attached.
  static Tensor finish(Op op, const Tensor* a, const Tensor* b, Tensor out, double c = 0.0,
                       int64_t n = 0, const ConvGeom* geom = nullptr,
                       std::shared_ptr<const std::vector<int32_t>> idx = nullptr) {
    if (g_no_record > 0) return out;
    Graph* g = nullptr;
    if (a && a->attached()) g = a->graph();
    if (b && b->attached()) {
      if (g && b->graph() != g)
        fail(ErrorKind::invalid_argument, "operands belong to different graphs");
      g = b->graph();
    }
    if (!g) return out;
    Node node;
    node.op = op;
    if (a) {
      node.in0 = (a->graph() == g) ? a->node() : -1;
      node.saved0 = *a;
    }
    if (b) {
      node.in1 = (b->graph() == g) ? b->node() : -1;
      node.saved1 = *b;
    }
    node.c = c;
    node.n = n;
    if (geom) node.geom = *geom;
    node.idx = std::move(idx);
    out.graph_ = g;
    out.node_ = static_cast<int>(g->impl_->nodes.size());
    node.out = out;
    g->impl_->nodes.push_back(std::move(node));
    return out;
  }

  static Tensor make_leaf(Graph& g, const Tensor& value) {
    Node node;
    node.op = Op::leaf;
    Tensor out = value.clone();
    out.graph_ = &g;
    out.node_ = static_cast<int>(g.impl_->nodes.size());
    node.out = out;
    g.impl_->nodes.push_back(std::move(node));
    return out;
  }

  template <typename Acc>
  static void vjp(const Node& node, const Tensor& u, Acc&& acc);
};

Graph::Graph() : impl_(std::make_unique<Impl>()) {}
Graph::~Graph() = default;

Tensor Graph::leaf(const Tensor& value) { return GraphDetail::make_leaf(*this, value); }

size_t Graph::num_nodes() const { return impl_->nodes.size(); }

NoRecordGuard::NoRecordGuard() { ++g_no_record; }
NoRecordGuard::~NoRecordGuard() { --g_no_record; }

// ---- shape checks ----------------------------------------------------------

namespace {

void require(bool cond, ErrorKind kind, const std::string& msg) {
  if (!cond) fail(kind, msg);
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(), ErrorKind::invalid_argument,
          std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

Tensor elementwise(const Tensor& a, const Tensor& b, Op op, double (*fn)(double, double)) {
  check_same_shape(a, b, "elementwise");
  Tensor out(a.shape());
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  int64_t m = a.size();
  for (int64_t i = 0; i < m; ++i) po[i] = fn(pa[i], pb[i]);
  return GraphDetail::finish(op, &a, &b, std::move(out));
}

}  // namespace

// ---- elementwise ops -------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  Tensor out(a.shape());
  MapA(out.data(), out.size()) = CMapA(a.data(), a.size()) + CMapA(b.data(), b.size());
  return GraphDetail::finish(Op::add_, &a, &b, std::move(out));
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  Tensor out(a.shape());
  MapA(out.data(), out.size()) = CMapA(a.data(), a.size()) - CMapA(b.data(), b.size());
  return GraphDetail::finish(Op::sub_, &a, &b, std::move(out));
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  Tensor out(a.shape());
  MapA(out.data(), out.size()) = CMapA(a.data(), a.size()) * CMapA(b.data(), b.size());
  return GraphDetail::finish(Op::mul_, &a, &b, std::move(out));
}

Tensor div(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "div");
  Tensor out(a.shape());
  MapA(out.data(), out.size()) = CMapA(a.data(), a.size()) / CMapA(b.data(), b.size());
  return GraphDetail::finish(Op::div_, &a, &b, std::move(out));
}

Tensor neg(const Tensor& a) {
  Tensor out(a.shape());
  MapA(out.data(), out.size()) = -CMapA(a.data(), a.size());
  return GraphDetail::finish(Op::neg_, &a, nullptr, std::move(out));
}

Tensor exp(const Tensor& a) {
  Tensor out(a.shape());
  MapA(out.data(), out.size()) = CMapA(a.data(), a.size()).exp();
  return GraphDetail::finish(Op::exp_, &a, nullptr, std::move(out));
}

Tensor log(const Tensor& a) {
  Tensor out(a.shape());
  MapA(out.data(), out.size()) = CMapA(a.data(), a.size()).log();
  return GraphDetail::finish(Op::log_, &a, nullptr, std::move(out));
}

Tensor xlogx(const Tensor& a) {
  Tensor out(a.shape());
  const double* pa = a.data();
  double* po = out.data();
  for (int64_t i = 0; i < a.size(); ++i) po[i] = pa[i] == 0.0 ? 0.0 : pa[i] * std::log(pa[i]);
  return GraphDetail::finish(Op::xlogx_, &a, nullptr, std::move(out));
}

Tensor xlogy(const Tensor& a, const Tensor& b) {
  return elementwise(a, b, Op::xlogy_,
                     +[](double x, double y) { return x == 0.0 ? 0.0 : x * std::log(y); });
}

Tensor relu(const Tensor& a) {
  Tensor out(a.shape());
  MapA(out.data(), out.size()) = CMapA(a.data(), a.size()).max(0.0);
  return GraphDetail::finish(Op::relu_, &a, nullptr, std::move(out));
}

Tensor tanh(const Tensor& a) {
  Tensor out(a.shape());
  MapA(out.data(), out.size()) = CMapA(a.data(), a.size()).tanh();
  return GraphDetail::finish(Op::tanh_, &a, nullptr, std::move(out));
}

Tensor scale(const Tensor& a, double c) {
  Tensor out(a.shape());
  MapA(out.data(), out.size()) = CMapA(a.data(), a.size()) * c;
  return GraphDetail::finish(Op::scale_, &a, nullptr, std::move(out), c);
}

Tensor smul(const Tensor& a, const Tensor& s) {
  require(s.size() == 1, ErrorKind::invalid_argument,
          "smul: scale must be a scalar tensor, got " + shape_str(s.shape()));
  Tensor out(a.shape());
  MapA(out.data(), out.size()) = CMapA(a.data(), a.size()) * s.data()[0];
  return GraphDetail::finish(Op::smul_, &a, &s, std::move(out));
}

Tensor sum(const Tensor& a) {
  Tensor out = Tensor::scalar(CMapA(a.data(), a.size()).sum());
  return GraphDetail::finish(Op::sum_, &a, nullptr, std::move(out));
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

// ---- linear algebra --------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(0), ErrorKind::invalid_argument,
          "matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out(Shape{m, n});
  MapM(out.data(), m, n).noalias() = CMapM(a.data(), m, k) * CMapM(b.data(), k, n);
  return GraphDetail::finish(Op::matmul_, &a, &b, std::move(out));
}

Tensor transpose(const Tensor& a) {
  require(a.ndim() == 2, ErrorKind::invalid_argument,
          "transpose: expected 2-d tensor, got " + shape_str(a.shape()));
  int64_t m = a.dim(0), n = a.dim(1);
  Tensor out(Shape{n, m});
  MapM(out.data(), n, m) = CMapM(a.data(), m, n).transpose();
  return GraphDetail::finish(Op::transpose_, &a, nullptr, std::move(out));
}

Tensor reshape(const Tensor& a, Shape shape) {
  require(numel(shape) == a.size(), ErrorKind::invalid_argument,
          "reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  Tensor out(std::move(shape), std::vector<double>(a.data(), a.data() + a.size()));
  return GraphDetail::finish(Op::reshape_, &a, nullptr, std::move(out));
}

Tensor row_sum(const Tensor& a) {
  require(a.ndim() == 2, ErrorKind::invalid_argument, "row_sum: expected 2-d tensor");
  int64_t b = a.dim(0), c = a.dim(1);
  Tensor out(Shape{b, 1});
  MapM(out.data(), b, 1) = CMapM(a.data(), b, c).rowwise().sum();
  return GraphDetail::finish(Op::row_sum_, &a, nullptr, std::move(out));
}

Tensor col_sum(const Tensor& a) {
  require(a.ndim() == 2, ErrorKind::invalid_argument, "col_sum: expected 2-d tensor");
  int64_t b = a.dim(0), c = a.dim(1);
  Tensor out(Shape{c});
  Eigen::Map<Eigen::RowVectorXd>(out.data(), c) = CMapM(a.data(), b, c).colwise().sum();
  return GraphDetail::finish(Op::col_sum_, &a, nullptr, std::move(out));
}

Tensor broadcast_col(const Tensor& a, int64_t cols) {
  require(a.ndim() == 2 && a.dim(1) == 1, ErrorKind::invalid_argument,
          "broadcast_col: expected [b,1] tensor, got " + shape_str(a.shape()));
  int64_t b = a.dim(0);
  Tensor out(Shape{b, cols});
  double* po = out.data();
  const double* pa = a.data();
  for (int64_t i = 0; i < b; ++i)
    for (int64_t j = 0; j < cols; ++j) po[i * cols + j] = pa[i];
  return GraphDetail::finish(Op::bcast_col_, &a, nullptr, std::move(out), 0.0, cols);
}

Tensor broadcast_row(const Tensor& a, int64_t rows) {
  require(a.ndim() == 1, ErrorKind::invalid_argument, "broadcast_row: expected 1-d tensor");
  int64_t c = a.dim(0);
  Tensor out(Shape{rows, c});
  for (int64_t i = 0; i < rows; ++i) std::memcpy(out.data() + i * c, a.data(), sizeof(double) * c);
  return GraphDetail::finish(Op::bcast_row_, &a, nullptr, std::move(out), 0.0, rows);
}

namespace {

Tensor chan_sum(const Tensor& a) {
  require(a.ndim() == 4, ErrorKind::invalid_argument, "chan_sum: expected 4-d tensor");
  int64_t b = a.dim(0), c = a.dim(1), hw = a.dim(2) * a.dim(3);
  Tensor out(Shape{c});
  double* po = out.data();
  const double* pa = a.data();
  for (int64_t i = 0; i < b; ++i)
    for (int64_t j = 0; j < c; ++j) {
      double s = 0.0;
      const double* p = pa + (i * c + j) * hw;
      for (int64_t t = 0; t < hw; ++t) s += p[t];
      po[j] += s;
    }
  return GraphDetail::finish(Op::chan_sum_, &a, nullptr, std::move(out));
}

Tensor bcast_chan(const Tensor& a, int64_t b, int64_t h, int64_t w) {
  require(a.ndim() == 1, ErrorKind::invalid_argument, "bcast_chan: expected 1-d tensor");
  int64_t c = a.dim(0), hw = h * w;
  Tensor out(Shape{b, c, h, w});
  double* po = out.data();
  const double* pa = a.data();
  for (int64_t i = 0; i < b; ++i)
    for (int64_t j = 0; j < c; ++j) {
      double v = pa[j];
      double* p = po + (i * c + j) * hw;
      for (int64_t t = 0; t < hw; ++t) p[t] = v;
    }
  return GraphDetail::finish(Op::bcast_chan_, &a, nullptr, std::move(out), 0.0, b * h * w);
}

}  // namespace

Tensor bias_add(const Tensor& x, const Tensor& bias) {
  require(x.ndim() == 2 && bias.ndim() == 1 && x.dim(1) == bias.dim(0), ErrorKind::invalid_argument,
          "bias_add: shapes " + shape_str(x.shape()) + " and " + shape_str(bias.shape()));
  int64_t b = x.dim(0), c = x.dim(1);
  Tensor out(Shape{b, c});
  MapM(out.data(), b, c) = CMapM(x.data(), b, c).rowwise() + Eigen::Map<const Eigen::RowVectorXd>(bias.data(), c);
  return GraphDetail::finish(Op::bias_add_, &x, &bias, std::move(out));
}

Tensor bias_add_chan(const Tensor& x, const Tensor& bias) {
  require(x.ndim() == 4 && bias.ndim() == 1 && x.dim(1) == bias.dim(0), ErrorKind::invalid_argument,
          "bias_add_chan: shapes " + shape_str(x.shape()) + " and " + shape_str(bias.shape()));
  int64_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor out(x.shape());
  const double* px = x.data();
  const double* pb = bias.data();
  double* po = out.data();
  for (int64_t i = 0; i < b; ++i)
    for (int64_t j = 0; j < c; ++j) {
      double v = pb[j];
      const double* in = px + (i * c + j) * hw;
      double* o = po + (i * c + j) * hw;
      for (int64_t t = 0; t < hw; ++t) o[t] = in[t] + v;
    }
  return GraphDetail::finish(Op::bias_add_chan_, &x, &bias, std::move(out));
}

// ---- softmax family --------------------------------------------------------

namespace {

void check_softmax_axis(const Tensor& a, int axis, const char* op) {
  bool ok = (a.ndim() == 1 && axis == 0) || (a.ndim() == 2 && axis == 1);
  require(ok, ErrorKind::invalid_argument,
          std::string(op) + ": axis " + std::to_string(axis) + " invalid for shape " + shape_str(a.shape()));
}

}  // namespace

Tensor softmax(const Tensor& a, int axis) {
  check_softmax_axis(a, axis, "softmax");
  int64_t b = a.ndim() == 1 ? 1 : a.dim(0);
  int64_t c = a.ndim() == 1 ? a.dim(0) : a.dim(1);
  Tensor out(a.shape());
  for (int64_t i = 0; i < b; ++i) {
    const double* row = a.data() + i * c;
    double* o = out.data() + i * c;
    double m = *std::max_element(row, row + c);
    double z = 0.0;
    for (int64_t j = 0; j < c; ++j) {
      o[j] = std::exp(row[j] - m);
      z += o[j];
    }
    for (int64_t j = 0; j < c; ++j) o[j] /= z;
  }
  return GraphDetail::finish(Op::softmax_, &a, nullptr, std::move(out), 0.0, c);
}

Tensor log_softmax(const Tensor& a, int axis) {
  check_softmax_axis(a, axis, "log_softmax");
  int64_t b = a.ndim() == 1 ? 1 : a.dim(0);
  int64_t c = a.ndim() == 1 ? a.dim(0) : a.dim(1);
  Tensor out(a.shape());
  for (int64_t i = 0; i < b; ++i) {
    const double* row = a.data() + i * c;
    double* o = out.data() + i * c;
    double m = *std::max_element(row, row + c);
    double z = 0.0;
    for (int64_t j = 0; j < c; ++j) z += std::exp(row[j] - m);
    double lz = std::log(z) + m;
    for (int64_t j = 0; j < c; ++j) o[j] = row[j] - lz;
  }
  return GraphDetail::finish(Op::log_softmax_, &a, nullptr, std::move(out), 0.0, c);
}

Tensor gather_rows(const Tensor& a, const std::vector<int32_t>& idx) {
  require(a.ndim() == 2, ErrorKind::invalid_argument, "gather_rows: expected 2-d tensor");
  int64_t b = a.dim(0), c = a.dim(1);
  require(static_cast<int64_t>(idx.size()) == b, ErrorKind::invalid_argument,
          "gather_rows: index count " + std::to_string(idx.size()) + " != rows " + std::to_string(b));
  Tensor out(Shape{b, 1});
  for (int64_t i = 0; i < b; ++i) {
    int32_t j = idx[static_cast<size_t>(i)];
    require(j >= 0 && j < c, ErrorKind::data,
            "label " + std::to_string(j) + " out of range [0," + std::to_string(c) +
                ") at batch index " + std::to_string(i));
    out.data()[i] = a.data()[i * c + j];
  }
  auto keep = std::make_shared<const std::vector<int32_t>>(idx);
  return GraphDetail::finish(Op::gather_, &a, nullptr, std::move(out), 0.0, c, nullptr, keep);
}

Tensor scatter_rows(const Tensor& a, const std::vector<int32_t>& idx, int64_t cols) {
  require(a.ndim() == 2 && a.dim(1) == 1, ErrorKind::invalid_argument,
          "scatter_rows: expected [b,1] tensor");
  int64_t b = a.dim(0);
  require(static_cast<int64_t>(idx.size()) == b, ErrorKind::invalid_argument,
          "scatter_rows: index count mismatch");
  Tensor out(Shape{b, cols});
  for (int64_t i = 0; i < b; ++i) {
    int32_t j = idx[static_cast<size_t>(i)];
    require(j >= 0 && j < cols, ErrorKind::data, "scatter index out of range");
    out.data()[i * cols + j] = a.data()[i];
  }
  auto keep = std::make_shared<const std::vector<int32_t>>(idx);
  return GraphDetail::finish(Op::scatter_, &a, nullptr, std::move(out), 0.0, cols, nullptr, keep);
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int32_t>& labels) {
  require(logits.ndim() == 2, ErrorKind::invalid_argument,
          "cross_entropy: logits must be [batch,classes], got " + shape_str(logits.shape()));
  int64_t b = logits.dim(0);
  require(static_cast<int64_t>(labels.size()) == b, ErrorKind::invalid_argument,
          "cross_entropy: label count " + std::to_string(labels.size()) + " != batch " + std::to_string(b));
  Tensor picked = gather_rows(log_softmax(logits, 1), labels);
  return neg(scale(sum(picked), 1.0 / static_cast<double>(b)));
}

Tensor kl_divergence(const Tensor& p, const Tensor& q) {
  require(p.ndim() == 2 && q.ndim() == 2, ErrorKind::invalid_argument,
          "kl_divergence: expected 2-d tensors");
  check_same_shape(p, q, "kl_divergence");
  int64_t b = p.dim(0), c = p.dim(1);
  for (const Tensor* t : {&p, &q}) {
    for (int64_t i = 0; i < b; ++i) {
      double s = 0.0;
      for (int64_t j = 0; j < c; ++j) {
        double v = t->data()[i * c + j];
        require(v >= 0.0, ErrorKind::invalid_argument,
                "kl_divergence: negative entry at row " + std::to_string(i));
        s += v;
      }
      require(std::abs(s - 1.0) <= 1e-6, ErrorKind::invalid_argument,
              "kl_divergence: row " + std::to_string(i) + " sums to " + std::to_string(s) +
                  ", expected 1");
    }
  }
  Tensor terms = sub(xlogx(p), xlogy(p, q));
  return scale(sum(terms), 1.0 / static_cast<double>(b));
}

// ---- convolution -----------------------------------------------------------

namespace {

struct ConvDims {
  int cin, h, w, cout, kh, kw, oh, ow;
};

ConvDims conv_dims(const Shape& xs, const Shape& ks, const ConvGeom& g) {
  ConvDims d;
  d.cin = static_cast<int>(xs[1]);
  d.h = static_cast<int>(xs[2]);
  d.w = static_cast<int>(xs[3]);
  d.cout = static_cast<int>(ks[0]);
  d.kh = static_cast<int>(ks[2]);
  d.kw = static_cast<int>(ks[3]);
  int ph = d.h + g.pad_top + g.pad_bottom;
  int pw = d.w + g.pad_left + g.pad_right;
  require(ph >= d.kh && pw >= d.kw, ErrorKind::invalid_argument,
          "conv2d: padded input " + std::to_string(ph) + "x" + std::to_string(pw) +
              " smaller than kernel " + std::to_string(d.kh) + "x" + std::to_string(d.kw));
  d.oh = (ph - d.kh) / g.stride_h + 1;
  d.ow = (pw - d.kw) / g.stride_w + 1;
  return d;
}

void check_conv_args(const Tensor& x, const Tensor& k, const ConvGeom& g) {
  require(x.ndim() == 4 && k.ndim() == 4, ErrorKind::invalid_argument,
          "conv2d: expected 4-d input and kernel, got " + shape_str(x.shape()) + " and " +
              shape_str(k.shape()));
  require(x.dim(1) == k.dim(1), ErrorKind::invalid_argument,
          "conv2d: channel mismatch " + shape_str(x.shape()) + " vs " + shape_str(k.shape()));
  require(g.stride_h >= 1 && g.stride_w >= 1, ErrorKind::invalid_argument,
          "conv2d: stride must be >= 1, got " + std::to_string(g.stride_h));
  require(g.pad_top >= 0 && g.pad_bottom >= 0 && g.pad_left >= 0 && g.pad_right >= 0,
          ErrorKind::invalid_argument, "conv2d: padding must be >= 0");
}

// cols: [cin*kh*kw, oh*ow]
void im2col(const double* img, const ConvDims& d, const ConvGeom& g, double* cols) {
  int ohw = d.oh * d.ow;
  for (int ci = 0; ci < d.cin; ++ci)
    for (int r = 0; r < d.kh; ++r)
      for (int s = 0; s < d.kw; ++s) {
        double* dst = cols + ((ci * d.kh + r) * d.kw + s) * ohw;
        for (int oy = 0; oy < d.oh; ++oy) {
          int iy = oy * g.stride_h + r - g.pad_top;
          if (iy < 0 || iy >= d.h) {
            for (int ox = 0; ox < d.ow; ++ox) dst[oy * d.ow + ox] = 0.0;
            continue;
          }
          const double* src = img + (ci * d.h + iy) * d.w;
          for (int ox = 0; ox < d.ow; ++ox) {
            int ix = ox * g.stride_w + s - g.pad_left;
            dst[oy * d.ow + ox] = (ix < 0 || ix >= d.w) ? 0.0 : src[ix];
          }
        }
      }
}

void col2im_add(const double* cols, const ConvDims& d, const ConvGeom& g, double* img) {
  int ohw = d.oh * d.ow;
  for (int ci = 0; ci < d.cin; ++ci)
    for (int r = 0; r < d.kh; ++r)
      for (int s = 0; s < d.kw; ++s) {
        const double* src = cols + ((ci * d.kh + r) * d.kw + s) * ohw;
        for (int oy = 0; oy < d.oh; ++oy) {
          int iy = oy * g.stride_h + r - g.pad_top;
          if (iy < 0 || iy >= d.h) continue;
          double* dst = img + (ci * d.h + iy) * d.w;
          for (int ox = 0; ox < d.ow; ++ox) {
            int ix = ox * g.stride_w + s - g.pad_left;
            if (ix >= 0 && ix < d.w) dst[ix] += src[oy * d.ow + ox];
          }
        }
      }
}

Tensor conv_forward_value(const Tensor& x, const Tensor& k, const ConvGeom& g) {
  ConvDims d = conv_dims(x.shape(), k.shape(), g);
  int64_t batch = x.dim(0);
  Tensor out(Shape{batch, d.cout, d.oh, d.ow});
  int ck = d.cin * d.kh * d.kw;
  int ohw = d.oh * d.ow;
  Buffer cols(static_cast<size_t>(ck) * ohw);
  CMapM kmat(k.data(), d.cout, ck);
  for (int64_t i = 0; i < batch; ++i) {
    im2col(x.data() + i * d.cin * d.h * d.w, d, g, cols.data());
    MapM(out.data() + i * d.cout * ohw, d.cout, ohw).noalias() = kmat * CMapM(cols.data(), ck, ohw);
  }
  return out;
}

// gradient w.r.t. the conv input: x-shaped tensor from kernel and output-grad
Tensor conv_dx_value(const Tensor& k, const Tensor& u, const ConvGeom& g, const Shape& xshape) {
  ConvDims d = conv_dims(xshape, k.shape(), g);
  int64_t batch = u.dim(0);
  Tensor out(Shape{batch, d.cin, d.h, d.w});
  int ck = d.cin * d.kh * d.kw;
  int ohw = d.oh * d.ow;
  Buffer cols(static_cast<size_t>(ck) * ohw);
  CMapM kmat(k.data(), d.cout, ck);
  for (int64_t i = 0; i < batch; ++i) {
    MapM(cols.data(), ck, ohw).noalias() =
        kmat.transpose() * CMapM(u.data() + i * d.cout * ohw, d.cout, ohw);
    col2im_add(cols.data(), d, g, out.data() + i * d.cin * d.h * d.w);
  }
  return out;
}

// gradient w.r.t. the conv kernel
Tensor conv_dk_value(const Tensor& x, const Tensor& u, const ConvGeom& g, const Shape& kshape) {
  ConvDims d = conv_dims(x.shape(), kshape, g);
  int64_t batch = x.dim(0);
  Tensor out(kshape);
  int ck = d.cin * d.kh * d.kw;
  int ohw = d.oh * d.ow;
  Buffer cols(static_cast<size_t>(ck) * ohw);
  MapM kacc(out.data(), d.cout, ck);
  for (int64_t i = 0; i < batch; ++i) {
    im2col(x.data() + i * d.cin * d.h * d.w, d, g, cols.data());
    kacc.noalias() += CMapM(u.data() + i * d.cout * ohw, d.cout, ohw) *
                      CMapM(cols.data(), ck, ohw).transpose();
  }
  return out;
}

Tensor conv_dx_op(const Tensor& k, const Tensor& u, const ConvGeom& g, const Shape& xshape) {
  Tensor out = conv_dx_value(k, u, g, xshape);
  return GraphDetail::finish(Op::conv_dx_, &k, &u, std::move(out), 0.0, 0, &g);
}

Tensor conv_dk_op(const Tensor& x, const Tensor& u, const ConvGeom& g, const Shape& kshape) {
  Tensor out = conv_dk_value(x, u, g, kshape);
  return GraphDetail::finish(Op::conv_dk_, &x, &u, std::move(out), 0.0, 0, &g);
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& k, const ConvGeom& geom) {
  check_conv_args(x, k, geom);
  Tensor out = conv_forward_value(x, k, geom);
  return GraphDetail::finish(Op::conv_, &x, &k, std::move(out), 0.0, 0, &geom);
}

Tensor conv2d(const Tensor& x, const Tensor& k, int stride, int padding) {
  require(stride >= 1, ErrorKind::invalid_argument,
          "conv2d: stride must be >= 1, got " + std::to_string(stride));
  require(padding >= 0, ErrorKind::invalid_argument,
          "conv2d: padding must be >= 0, got " + std::to_string(padding));
  ConvGeom g{stride, stride, padding, padding, padding, padding};
  if (x.ndim() == 3) {
    Shape s4 = {1, x.dim(0), x.dim(1), x.dim(2)};
    Tensor out = conv2d(reshape(x, s4), k, g);
    return reshape(out, Shape{out.dim(1), out.dim(2), out.dim(3)});
  }
  return conv2d(x, k, g);
}

Tensor upsample2(const Tensor& x) {
  require(x.ndim() == 4, ErrorKind::invalid_argument, "upsample2: expected 4-d tensor");
  int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor out(Shape{b, c, 2 * h, 2 * w});
  const double* px = x.data();
  double* po = out.data();
  for (int64_t bc = 0; bc < b * c; ++bc) {
    const double* in = px + bc * h * w;
    double* o = po + bc * 4 * h * w;
    for (int64_t y = 0; y < h; ++y)
      for (int64_t xw = 0; xw < w; ++xw) {
        double v = in[y * w + xw];
        int64_t base = (2 * y) * (2 * w) + 2 * xw;
        o[base] = v;
        o[base + 1] = v;
        o[base + 2 * w] = v;
        o[base + 2 * w + 1] = v;
      }
  }
  return GraphDetail::finish(Op::upsample2_, &x, nullptr, std::move(out));
}

Tensor pool2sum(const Tensor& x) {
  require(x.ndim() == 4 && x.dim(2) % 2 == 0 && x.dim(3) % 2 == 0, ErrorKind::invalid_argument,
          "pool2sum: spatial dims must be even, got " + shape_str(x.shape()));
  int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2) / 2, w = x.dim(3) / 2;
  Tensor out(Shape{b, c, h, w});
  const double* px = x.data();
  double* po = out.data();
  for (int64_t bc = 0; bc < b * c; ++bc) {
    const double* in = px + bc * 4 * h * w;
    double* o = po + bc * h * w;
    for (int64_t y = 0; y < h; ++y)
      for (int64_t xw = 0; xw < w; ++xw) {
        int64_t base = (2 * y) * (2 * w) + 2 * xw;
        o[y * w + xw] = in[base] + in[base + 1] + in[base + 2 * w] + in[base + 2 * w + 1];
      }
  }
  return GraphDetail::finish(Op::pool2sum_, &x, nullptr, std::move(out));
}

Tensor clip(const Tensor& x, double lo, double hi) {
  require(!x.attached(), ErrorKind::invalid_argument,
          "clip is not differentiable; detach the tensor first");
  Tensor out(x.shape());
  MapA(out.data(), out.size()) = CMapA(x.data(), x.size()).max(lo).min(hi);
  return out;
}

std::vector<int32_t> argmax_rows(const Tensor& logits) {
  require(logits.ndim() == 2, ErrorKind::invalid_argument, "argmax_rows: expected 2-d tensor");
  int64_t b = logits.dim(0), c = logits.dim(1);
  std::vector<int32_t> out(static_cast<size_t>(b));
  for (int64_t i = 0; i < b; ++i) {
    const double* row = logits.data() + i * c;
    out[static_cast<size_t>(i)] =
        static_cast<int32_t>(std::max_element(row, row + c) - row);
  }
  return out;
}

// ---- backward --------------------------------------------------------------

namespace {

Tensor relu_mask(const Tensor& x) {
  Tensor m(x.shape());
  const double* px = x.data();
  double* pm = m.data();
  for (int64_t i = 0; i < x.size(); ++i) pm[i] = px[i] > 0.0 ? 1.0 : 0.0;
  return m;
}

}  // namespace

template <typename Acc>
void GraphDetail::vjp(const Node& node, const Tensor& u, Acc&& acc) {
  switch (node.op) {
    case Op::leaf:
      return;
    case Op::add_:
      acc(0, u);
      acc(1, u);
      return;
    case Op::sub_:
      acc(0, u);
      acc(1, neg(u));
      return;
    case Op::mul_:
      acc(0, mul(u, node.saved1));
      acc(1, mul(u, node.saved0));
      return;
    case Op::div_:
      acc(0, div(u, node.saved1));
      acc(1, neg(div(mul(u, node.out), node.saved1)));
      return;
    case Op::neg_:
      acc(0, neg(u));
      return;
    case Op::exp_:
      acc(0, mul(u, node.out));
      return;
    case Op::log_:
      acc(0, div(u, node.saved0));
      return;
    case Op::xlogx_:
      acc(0, mul(u, add(log(node.saved0), Tensor::ones(node.saved0.shape()))));
      return;
    case Op::xlogy_:
      acc(0, mul(u, log(node.saved1)));
      acc(1, mul(u, div(node.saved0, node.saved1)));
      return;
    case Op::relu_:
      acc(0, mul(u, relu_mask(node.saved0)));
      return;
    case Op::tanh_:
      acc(0, mul(u, sub(Tensor::ones(node.out.shape()), mul(node.out, node.out))));
      return;
    case Op::scale_:
      acc(0, scale(u, node.c));
      return;
    case Op::smul_:
      acc(0, smul(u, node.saved1));
      acc(1, sum(mul(u, node.saved0)));
      return;
    case Op::sum_:
      acc(0, smul(Tensor::ones(node.saved0.shape()), u));
      return;
    case Op::matmul_:
      acc(0, matmul(u, transpose(node.saved1)));
      acc(1, matmul(transpose(node.saved0), u));
      return;
    case Op::transpose_:
      acc(0, transpose(u));
      return;
    case Op::reshape_:
      acc(0, reshape(u, node.saved0.shape()));
      return;
    case Op::row_sum_:
      acc(0, broadcast_col(u, node.saved0.dim(1)));
      return;
    case Op::col_sum_:
      acc(0, broadcast_row(u, node.saved0.dim(0)));
      return;
    case Op::bcast_col_:
      acc(0, row_sum(u));
      return;
    case Op::bcast_row_:
      acc(0, col_sum(u));
      return;
    case Op::chan_sum_:
      acc(0, bcast_chan(u, node.saved0.dim(0), node.saved0.dim(2), node.saved0.dim(3)));
      return;
    case Op::bcast_chan_:
      acc(0, chan_sum(u));
      return;
    case Op::bias_add_:
      acc(0, u);
      acc(1, col_sum(u));
      return;
    case Op::bias_add_chan_:
      acc(0, u);
      acc(1, chan_sum(u));
      return;
    case Op::softmax_: {
      bool flat = node.out.ndim() == 1;
      Tensor s = flat ? reshape(node.out, Shape{1, node.n}) : node.out;
      Tensor u2 = flat ? reshape(u, Shape{1, node.n}) : u;
      Tensor g = mul(s, sub(u2, broadcast_col(row_sum(mul(u2, s)), node.n)));
      acc(0, flat ? reshape(g, node.saved0.shape()) : g);
      return;
    }
    case Op::log_softmax_: {
      bool flat = node.out.ndim() == 1;
      if (flat) {
        Tensor s = exp(reshape(node.out, Shape{1, node.n}));
        Tensor u2 = reshape(u, Shape{1, node.n});
        Tensor g = sub(u2, mul(s, broadcast_col(row_sum(u2), node.n)));
        acc(0, reshape(g, node.saved0.shape()));
      } else {
        Tensor s = exp(node.out);
        acc(0, sub(u, mul(s, broadcast_col(row_sum(u), node.n))));
      }
      return;
    }
    case Op::gather_:
      acc(0, scatter_rows(u, *node.idx, node.n));
      return;
    case Op::scatter_:
      acc(0, gather_rows(u, *node.idx));
      return;
    case Op::conv_:
      acc(0, conv_dx_op(node.saved1, u, node.geom, node.saved0.shape()));
      acc(1, conv_dk_op(node.saved0, u, node.geom, node.saved1.shape()));
      return;
    case Op::conv_dx_:
      // node = dx(K, U); <V, dx(K,U)> = <conv(V,K), U>
      acc(0, conv_dk_op(u, node.saved1, node.geom, node.saved0.shape()));
      acc(1, conv2d(u, node.saved0, node.geom));
      return;
    case Op::conv_dk_:
      // node = dk(X, U); <C, dk(X,U)> = <conv(X,C), U>
      acc(0, conv_dx_op(u, node.saved1, node.geom, node.saved0.shape()));
      acc(1, conv2d(node.saved0, u, node.geom));
      return;
    case Op::upsample2_:
      acc(0, pool2sum(u));
      return;
    case Op::pool2sum_:
      acc(0, upsample2(u));
      return;
  }
  fail(ErrorKind::internal, "vjp: unhandled op");
}

std::vector<Tensor> Graph::gradient(const Tensor& loss, std::span<const Tensor> wrt,
                                    bool create_graph) {
  if (!loss.attached() || loss.graph() != this)
    fail(ErrorKind::invalid_argument, "backward: loss is not attached to this graph");
  if (loss.size() != 1)
    fail(ErrorKind::invalid_argument,
         "backward: loss must be a scalar, got shape " + shape_str(loss.shape()));

  auto& nodes = impl_->nodes;
  const int loss_id = loss.node();
  const size_t n_at_entry = nodes.size();

  std::vector<uint8_t> reachable(n_at_entry, 0);
  std::vector<int> stack{loss_id};
  reachable[static_cast<size_t>(loss_id)] = 1;
  while (!stack.empty()) {
    int i = stack.back();
    stack.pop_back();
    for (int p : {nodes[static_cast<size_t>(i)].in0, nodes[static_cast<size_t>(i)].in1})
      if (p >= 0 && !reachable[static_cast<size_t>(p)]) {
        reachable[static_cast<size_t>(p)] = 1;
        stack.push_back(p);
      }
  }

  std::vector<Tensor> grads(n_at_entry);
  grads[static_cast<size_t>(loss_id)] = Tensor::ones(loss.shape());

  std::optional<NoRecordGuard> guard;
  if (!create_graph) guard.emplace();

  for (int i = loss_id; i >= 0; --i) {
    if (!reachable[static_cast<size_t>(i)] || !grads[static_cast<size_t>(i)].defined()) continue;
    // copy: vjp ops may append nodes and invalidate references into `nodes`
    Node node = nodes[static_cast<size_t>(i)];
    Tensor upstream = grads[static_cast<size_t>(i)];
    GraphDetail::vjp(node, upstream, [&](int slot, Tensor contrib) {
      int p = slot == 0 ? node.in0 : node.in1;
      if (p < 0) return;  // constant input
      Tensor& g = grads[static_cast<size_t>(p)];
      g = g.defined() ? add(g, contrib) : std::move(contrib);
    });
  }

  std::vector<Tensor> out;
  out.reserve(wrt.size());
  for (const Tensor& w : wrt) {
    if (w.attached() && w.graph() == this && static_cast<size_t>(w.node()) < n_at_entry &&
        grads[static_cast<size_t>(w.node())].defined())
      out.push_back(grads[static_cast<size_t>(w.node())]);
    else
      out.push_back(Tensor::zeros(w.shape()));
  }
  return out;
}

std::vector<Tensor> backward(const Tensor& loss, std::span<const Tensor> params) {
  if (!loss.attached())
    fail(ErrorKind::invalid_argument, "backward: loss is not attached to a graph");
  return loss.graph()->gradient(loss, params, false);
}

// ---- pseudo-update ---------------------------------------------------------

std::vector<Tensor> pseudo_update(Graph& g, std::span<const Tensor> theta_leaves,
                                  const Tensor& inner_loss, double alpha, bool first_order) {
  std::vector<Tensor> grads = g.gradient(inner_loss, theta_leaves, /*create_graph=*/!first_order);
  std::vector<Tensor> updated;
  updated.reserve(theta_leaves.size());
  for (size_t i = 0; i < theta_leaves.size(); ++i) {
    Tensor gi = first_order ? grads[i].detached() : grads[i];
    updated.push_back(sub(theta_leaves[i], scale(gi, alpha)));
  }
  return updated;
}

std::vector<Tensor> grad_through_update(std::span<const Tensor> theta, std::span<const Tensor> xi,
                                        const InnerLossFn& inner_loss,
                                        const OuterLossFn& outer_loss, double alpha,
                                        bool first_order) {
  require(alpha >= 0.0, ErrorKind::invalid_argument,
          "grad_through_update: alpha must be >= 0, got " + std::to_string(alpha));
  Graph g;
  std::vector<Tensor> th, xs;
  th.reserve(theta.size());
  xs.reserve(xi.size());
  for (const Tensor& t : theta) th.push_back(g.leaf(t));
  for (const Tensor& t : xi) xs.push_back(g.leaf(t));

  Tensor il = inner_loss(g, th, xs);
  require(il.size() == 1, ErrorKind::invalid_argument,
          "grad_through_update: inner loss must be scalar, got " + shape_str(il.shape()));
  std::vector<Tensor> tp = pseudo_update(g, th, il, alpha, first_order);
  Tensor ol = outer_loss(g, tp);
  require(ol.size() == 1, ErrorKind::invalid_argument,
          "grad_through_update: outer loss must be scalar, got " + shape_str(ol.shape()));
  return g.gradient(ol, xs);
}

// ---- ParamVector -----------------------------------------------------------

void ParamVector::add_segment(std::string name, Shape shape) {
  Segment s;
  s.name = std::move(name);
  s.count = numel(shape);
  s.shape = std::move(shape);
  s.offset = static_cast<int64_t>(data_.size());
  data_.resize(data_.size() + static_cast<size_t>(s.count), 0.0);
  segs_.push_back(std::move(s));
}

int ParamVector::find(std::string_view name) const {
  for (size_t i = 0; i < segs_.size(); ++i)
    if (segs_[i].name == name) return static_cast<int>(i);
  return -1;
}

std::span<double> ParamVector::segment_data(int i) {
  const Segment& s = segs_[static_cast<size_t>(i)];
  return {data_.data() + s.offset, static_cast<size_t>(s.count)};
}

std::span<const double> ParamVector::segment_data(int i) const {
  const Segment& s = segs_[static_cast<size_t>(i)];
  return {data_.data() + s.offset, static_cast<size_t>(s.count)};
}

Tensor ParamVector::tensor(int i) const {
  const Segment& s = segs_[static_cast<size_t>(i)];
  return Tensor(s.shape, std::vector<double>(data_.begin() + s.offset,
                                             data_.begin() + s.offset + s.count));
}

void ParamVector::set_tensor(int i, const Tensor& t) {
  const Segment& s = segs_[static_cast<size_t>(i)];
  require(t.shape() == s.shape, ErrorKind::invalid_argument,
          "set_tensor: segment '" + s.name + "' expects " + shape_str(s.shape) + ", got " +
              shape_str(t.shape()));
  std::memcpy(data_.data() + s.offset, t.data(), sizeof(double) * static_cast<size_t>(s.count));
}

std::vector<Tensor> ParamVector::tensors() const {
  std::vector<Tensor> out;
  out.reserve(segs_.size());
  for (int i = 0; i < segment_count(); ++i) out.push_back(tensor(i));
  return out;
}

bool ParamVector::same_layout(const ParamVector& other) const {
  if (segs_.size() != other.segs_.size()) return false;
  for (size_t i = 0; i < segs_.size(); ++i)
    if (segs_[i].name != other.segs_[i].name || segs_[i].shape != other.segs_[i].shape)
      return false;
  return true;
}

void ParamVector::from_flat(std::span<const double> flat) {
  require(flat.size() == data_.size(), ErrorKind::invalid_argument,
          "from_flat: length " + std::to_string(flat.size()) + " != " + std::to_string(data_.size()));
  std::copy(flat.begin(), flat.end(), data_.begin());
}

void ParamVector::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

void ParamVector::axpy(double a, const ParamVector& x) {
  require(x.data_.size() == data_.size(), ErrorKind::invalid_argument, "axpy: layout mismatch");
  MapA(data_.data(), static_cast<int64_t>(data_.size())) +=
      a * CMapA(x.data_.data(), static_cast<int64_t>(x.data_.size()));
}

std::vector<Tensor> attach(Graph& g, const ParamVector& p) {
  std::vector<Tensor> out;
  out.reserve(static_cast<size_t>(p.segment_count()));
  for (int i = 0; i < p.segment_count(); ++i) out.push_back(g.leaf(p.tensor(i)));
  return out;
}

}  // namespace clp
