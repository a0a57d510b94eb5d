#include "continual.hpp"

#include <cmath>

#include "rng.hpp"

namespace clp {

Method parse_method(const std::string& s) {
  if (s == "sgd") return Method::sgd;
  if (s == "ewc") return Method::ewc;
  if (s == "si") return Method::si;
  fail(ErrorKind::invalid_argument, "unknown method '" + s + "' (expected sgd, ewc or si)");
}

std::string method_name(Method m) {
  switch (m) {
    case Method::sgd: return "sgd";
    case Method::ewc: return "ewc";
    case Method::si: return "si";
  }
  return "?";
}

namespace {

void check_layout(const ImportanceMap& map, const ParamVector& theta) {
  if (!map.weights.same_layout(theta) || !map.anchor.same_layout(theta))
    fail(ErrorKind::data, "importance map layout does not match model parameters");
}

bool penalty_active(std::span<const ImportanceMap> maps) {
  for (const auto& m : maps)
    if (m.strength != 0.0) return true;
  return false;
}

}  // namespace

Tensor penalty(std::span<const ImportanceMap> maps, std::span<const Tensor> theta) {
  Tensor total;
  for (const auto& map : maps) {
    if (static_cast<size_t>(map.weights.segment_count()) != theta.size())
      fail(ErrorKind::data, "importance map layout does not match parameter tensors");
    Tensor map_sum;
    for (size_t i = 0; i < theta.size(); ++i) {
      const auto& seg = map.weights.segment(static_cast<int>(i));
      if (seg.shape != theta[i].shape())
        fail(ErrorKind::data, "importance map segment '" + seg.name + "' expects " +
                                  shape_str(seg.shape) + ", got " + shape_str(theta[i].shape()));
      Tensor d = sub(theta[i], map.anchor.tensor(static_cast<int>(i)));
      Tensor term = sum(mul(map.weights.tensor(static_cast<int>(i)), mul(d, d)));
      map_sum = map_sum.defined() ? add(map_sum, term) : term;
    }
    Tensor scaled = scale(map_sum, map.strength / 2.0);
    total = total.defined() ? add(total, scaled) : scaled;
  }
  return total.defined() ? total : Tensor::scalar(0.0);
}

double penalty_value(std::span<const ImportanceMap> maps, const ParamVector& theta) {
  double total = 0.0;
  for (const auto& map : maps) {
    check_layout(map, theta);
    double s = 0.0;
    auto t = theta.flat();
    auto w = map.weights.flat();
    auto a = map.anchor.flat();
    for (size_t i = 0; i < t.size(); ++i) {
      double d = t[i] - a[i];
      s += w[i] * d * d;
    }
    total += map.strength / 2.0 * s;
  }
  return total;
}

ParamVector penalty_grad(std::span<const ImportanceMap> maps, const ParamVector& theta) {
  ParamVector g = theta;
  g.fill(0.0);
  auto out = g.flat();
  for (const auto& map : maps) {
    check_layout(map, theta);
    auto t = theta.flat();
    auto w = map.weights.flat();
    auto a = map.anchor.flat();
    for (size_t i = 0; i < t.size(); ++i) out[i] += map.strength * w[i] * (t[i] - a[i]);
  }
  return g;
}

ImportanceMap ewc_estimate_fisher(const Classifier& c, const LabeledImages& data,
                                  int64_t n_samples, uint64_t seed, double strength) {
  if (data.count() == 0) fail(ErrorKind::invalid_argument, "fisher estimate: empty dataset");
  if (n_samples < 1 || n_samples > data.count())
    fail(ErrorKind::invalid_argument,
         "fisher estimate: n_samples " + std::to_string(n_samples) + " outside [1, " +
             std::to_string(data.count()) + "]");
  Rng rng(seed);
  std::vector<int64_t> idx = rng.sample(data.count(), n_samples);

  ImportanceMap map;
  map.weights = c.params();
  map.weights.fill(0.0);
  map.anchor = c.params();
  map.strength = strength;

  int64_t px = data.images.size() / data.count();
  auto acc = map.weights.flat();
  for (int64_t i : idx) {
    Graph g;
    std::vector<Tensor> p = attach(g, c.params());
    Tensor x(Shape{1, px},
             std::vector<double>(data.images.data() + i * px, data.images.data() + (i + 1) * px));
    Tensor nll = cross_entropy(c.forward(g, p, x), {data.labels[static_cast<size_t>(i)]});
    std::vector<Tensor> grads = g.gradient(nll, p);
    int64_t off = 0;
    for (const Tensor& gt : grads) {
      const double* gp = gt.data();
      for (int64_t j = 0; j < gt.size(); ++j) acc[static_cast<size_t>(off + j)] += gp[j] * gp[j];
      off += gt.size();
    }
  }
  double inv = 1.0 / static_cast<double>(n_samples);
  for (double& v : acc) v *= inv;
  return map;
}

SiAccumulator SiAccumulator::start(const ParamVector& theta_now, double damping) {
  SiAccumulator acc;
  acc.omega = theta_now;
  acc.omega.fill(0.0);
  acc.theta_start = theta_now;
  acc.damping = damping;
  return acc;
}

void SiAccumulator::accumulate(const ParamVector& grad_ce, const ParamVector& delta) {
  auto o = omega.flat();
  auto g = grad_ce.flat();
  auto d = delta.flat();
  for (size_t i = 0; i < o.size(); ++i) o[i] += -g[i] * d[i];
}

ImportanceMap SiAccumulator::consolidate(const ParamVector& theta_end, double strength) const {
  ImportanceMap map;
  map.weights = omega;
  map.anchor = theta_end;
  map.strength = strength;
  auto w = map.weights.flat();
  auto o = omega.flat();
  auto s = theta_start.flat();
  auto e = theta_end.flat();
  for (size_t i = 0; i < w.size(); ++i) {
    double move = e[i] - s[i];
    w[i] = o[i] / (move * move + damping);
  }
  return map;
}

double train_step(Classifier& c, const Tensor& x, const std::vector<int32_t>& y,
                  std::span<const ImportanceMap> maps, double lr, ParamVector* grad_total_out) {
  Graph g;
  std::vector<Tensor> p = attach(g, c.params());
  Tensor loss = cross_entropy(c.forward(g, p, x), y);
  if (penalty_active(maps)) loss = add(loss, penalty(maps, p));
  std::vector<Tensor> grads = g.gradient(loss, p);

  auto flat = c.params().flat();
  int64_t off = 0;
  for (const Tensor& gt : grads) {
    const double* gp = gt.data();
    for (int64_t j = 0; j < gt.size(); ++j) flat[static_cast<size_t>(off + j)] -= lr * gp[j];
    off += gt.size();
  }
  if (grad_total_out) {
    *grad_total_out = c.params();
    auto out = grad_total_out->flat();
    off = 0;
    for (const Tensor& gt : grads) {
      const double* gp = gt.data();
      for (int64_t j = 0; j < gt.size(); ++j) out[static_cast<size_t>(off + j)] = gp[j];
      off += gt.size();
    }
  }
  return loss.item();
}

TrainResult train_task(Classifier& c, const TaskDataset& task, Method method,
                       std::span<const ImportanceMap> maps, const TrainHyper& hyper, uint64_t seed,
                       std::span<const LabeledImages> eval_sets) {
  TrainResult result;
  std::optional<SiAccumulator> si;
  if (method == Method::si) si = SiAccumulator::start(c.params(), hyper.si_damping);

  if (hyper.epochs > 0) {
    BatchStream stream(task.train, hyper.batch_size, derive_seed(seed, "batches"), true);
    int64_t steps = stream.batches_per_epoch();
    ParamVector grad_total;
    ParamVector theta_before;
    for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
      for (int64_t s = 0; s < steps; ++s) {
        BatchStream::Batch batch = stream.next();
        if (method == Method::si) theta_before = c.params();
        double loss =
            train_step(c, batch.x, batch.y, maps, hyper.lr, si ? &grad_total : nullptr);
        if (!std::isfinite(loss))
          fail(ErrorKind::numeric, "non-finite loss " + std::to_string(loss) + " at task " +
                                       std::to_string(task.task_id) + " epoch " +
                                       std::to_string(epoch + 1) + " step " + std::to_string(s));
        if (si) {
          // path integral uses the plain-loss gradient component only
          ParamVector grad_ce = grad_total;
          if (penalty_active(maps)) grad_ce.axpy(-1.0, penalty_grad(maps, theta_before));
          ParamVector delta = c.params();
          delta.axpy(-1.0, theta_before);
          si->accumulate(grad_ce, delta);
        }
      }
      if (!eval_sets.empty()) {
        std::vector<double> row;
        row.reserve(eval_sets.size());
        for (const LabeledImages& ev : eval_sets) row.push_back(c.accuracy(ev));
        result.epoch_eval.push_back(std::move(row));
      }
    }
  }

  if (method == Method::ewc) {
    int64_t n = std::min<int64_t>(hyper.fisher_samples, task.train.count());
    result.new_map =
        ewc_estimate_fisher(c, task.train, n, derive_seed(seed, "fisher"), hyper.ewc_lambda);
  } else if (method == Method::si) {
    result.new_map = si->consolidate(c.params(), hyper.si_c);
  }
  return result;
}

}  // namespace clp
