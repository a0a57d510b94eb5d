#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "continual.hpp"
#include "oracle.hpp"
#include "synth.hpp"

using namespace clp;
using namespace clp::test;

namespace {

ParamVector two_scalars(double a, double b) {
  ParamVector p;
  p.add_segment("w", Shape{2});
  p.flat()[0] = a;
  p.flat()[1] = b;
  return p;
}

TaskDataset synth_task(int64_t n_train, int64_t n_test, uint64_t seed) {
  TaskDataset t;
  t.task_id = 1;
  t.train = make_synthetic_images(n_train, seed, "train");
  t.test = make_synthetic_images(n_test, seed, "test");
  return t;
}

}  // namespace

TEST_CASE("penalty value cases") {
  ImportanceMap map;
  map.weights = two_scalars(1.0, 1.0);
  map.anchor = two_scalars(0.0, 0.0);
  map.strength = 2.0;

  SUBCASE("zero at the anchor") {
    ParamVector theta = map.anchor;
    CHECK(penalty_value({&map, 1}, theta) == 0.0);
    Graph g;
    std::vector<Tensor> t = attach(g, theta);
    CHECK(penalty({&map, 1}, t).item() == 0.0);
  }
  SUBCASE("hand arithmetic: (2/2)*(1+4) = 5") {
    ParamVector theta = two_scalars(1.0, 2.0);
    CHECK(penalty_value({&map, 1}, theta) == doctest::Approx(5.0).epsilon(1e-15));
    Graph g;
    std::vector<Tensor> t = attach(g, theta);
    CHECK(penalty({&map, 1}, t).item() == doctest::Approx(5.0).epsilon(1e-15));
  }
  SUBCASE("two maps add") {
    ImportanceMap second = map;
    second.strength = 4.0;
    ParamVector theta = two_scalars(1.0, 0.0);
    std::vector<ImportanceMap> maps{map, second};
    CHECK(penalty_value(maps, theta) == doctest::Approx(1.0 + 2.0).epsilon(1e-15));
  }
}

TEST_CASE("penalty gradient: autodiff, analytic formula and finite differences agree") {
  Rng rng(31);
  ImportanceMap map;
  map.weights = two_scalars(rng.uniform(0.0, 2.0), rng.uniform(0.0, 2.0));
  map.anchor = two_scalars(rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0));
  map.strength = 1.7;
  ParamVector theta = two_scalars(rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0));

  Graph g;
  std::vector<Tensor> t = attach(g, theta);
  Tensor loss = penalty({&map, 1}, t);
  std::vector<Tensor> auto_grad = g.gradient(loss, t);
  ParamVector analytic = penalty_grad({&map, 1}, theta);
  for (int i = 0; i < 2; ++i)
    CHECK(auto_grad[0].data()[i] ==
          doctest::Approx(analytic.flat()[static_cast<size_t>(i)]).epsilon(1e-14));

  auto f = [&](const std::vector<double>& x) {
    ParamVector probe = two_scalars(x[0], x[1]);
    return penalty_value({&map, 1}, probe);
  };
  std::vector<double> numeric = finite_diff(f, theta.to_flat());
  CHECK(max_rel_err(tensor_values(auto_grad[0]), numeric) < 1e-8);
}

TEST_CASE("penalty layout mismatch is a consistency error") {
  ImportanceMap map;
  map.weights = two_scalars(1, 1);
  map.anchor = two_scalars(0, 0);
  map.strength = 1.0;
  ParamVector other;
  other.add_segment("w", Shape{3});
  CHECK_THROWS_AS(penalty_value({&map, 1}, other), Error);
  Graph g;
  std::vector<Tensor> t = attach(g, other);
  CHECK_THROWS_AS(penalty({&map, 1}, t), Error);
}

TEST_CASE("fisher on a two-parameter logistic model matches the closed form") {
  // logits = [0-ish, w x + b] through a single linear layer with input dim 1
  MlpSpec spec;
  spec.sizes = {1, 2};
  Classifier c = Classifier::create(spec, 41);

  LabeledImages data;
  data.images = Tensor(Shape{3, 1, 1, 1}, {0.3, -1.2, 2.0});
  data.labels = {1, 0, 1};

  ImportanceMap map = ewc_estimate_fisher(c, data, 3, 5, 100.0);
  CHECK(map.strength == 100.0);

  // closed form: grad wrt row-0/row-1 weights and biases of the 1x2 layer
  const double w0 = c.params().flat()[0], w1 = c.params().flat()[1];
  const double b0 = c.params().flat()[2], b1 = c.params().flat()[3];
  double fw0 = 0, fw1 = 0, fb0 = 0, fb1 = 0;
  for (int i = 0; i < 3; ++i) {
    double x = data.images.data()[i];
    int y = data.labels[static_cast<size_t>(i)];
    double z0 = w0 * x + b0, z1 = w1 * x + b1;
    double m = std::max(z0, z1);
    double p0 = std::exp(z0 - m), p1 = std::exp(z1 - m);
    double zsum = p0 + p1;
    p0 /= zsum;
    p1 /= zsum;
    double g0 = p0 - (y == 0 ? 1.0 : 0.0);
    double g1 = p1 - (y == 1 ? 1.0 : 0.0);
    fw0 += (g0 * x) * (g0 * x);
    fw1 += (g1 * x) * (g1 * x);
    fb0 += g0 * g0;
    fb1 += g1 * g1;
  }
  fw0 /= 3;
  fw1 /= 3;
  fb0 /= 3;
  fb1 /= 3;
  auto rel = [](double a, double b) { return std::abs(a - b) / std::max(1e-12, std::abs(b)); };
  CHECK(rel(map.weights.flat()[0], fw0) < 1e-8);
  CHECK(rel(map.weights.flat()[1], fw1) < 1e-8);
  CHECK(rel(map.weights.flat()[2], fb0) < 1e-8);
  CHECK(rel(map.weights.flat()[3], fb1) < 1e-8);

  // anchor is the current parameter vector
  CHECK(std::memcmp(map.anchor.flat().data(), c.params().flat().data(),
                    static_cast<size_t>(c.params().size()) * sizeof(double)) == 0);
}

TEST_CASE("fisher of a dead relu unit is zero") {
  Classifier c = Classifier::create(MlpSpec{}, 42);
  // silence hidden unit 0 of layer 1 everywhere
  int b1 = c.params().find("fc1.b");
  c.params().segment_data(b1)[0] = -1e6;

  LabeledImages data = make_synthetic_images(32, 43, "train");
  ImportanceMap map = ewc_estimate_fisher(c, data, 32, 1, 1.0);

  // weights into the dead unit: column 0 of fc1.w
  auto w1 = map.weights.segment_data(map.weights.find("fc1.w"));
  for (int64_t r = 0; r < 784; ++r) CHECK(w1[static_cast<size_t>(r * 256)] == 0.0);
  // weights out of the dead unit: row 0 of fc2.w
  auto w2 = map.weights.segment_data(map.weights.find("fc2.w"));
  for (int64_t j = 0; j < 256; ++j) CHECK(w2[static_cast<size_t>(j)] == 0.0);
  // nonnegative everywhere
  for (double v : map.weights.flat()) CHECK(v >= 0.0);
}

TEST_CASE("fisher input validation") {
  Classifier c = Classifier::create(MlpSpec{}, 44);
  LabeledImages empty;
  empty.images = Tensor();
  CHECK_THROWS_AS(ewc_estimate_fisher(c, empty, 1, 1, 1.0), Error);
  LabeledImages data = make_synthetic_images(8, 45, "train");
  CHECK_THROWS_AS(ewc_estimate_fisher(c, data, 9, 1, 1.0), Error);
}

TEST_CASE("si accumulator") {
  ParamVector theta = two_scalars(0.0, 0.0);
  SiAccumulator acc = SiAccumulator::start(theta, 0.1);

  SUBCASE("vanilla sgd step gives alpha*grad^2") {
    ParamVector grad = two_scalars(0.5, -2.0);
    double alpha = 0.1;
    ParamVector delta = two_scalars(-alpha * 0.5, -alpha * -2.0);
    acc.accumulate(grad, delta);
    CHECK(acc.omega.flat()[0] == doctest::Approx(alpha * 0.25).epsilon(1e-15));
    CHECK(acc.omega.flat()[1] == doctest::Approx(alpha * 4.0).epsilon(1e-15));
    CHECK(acc.omega.flat()[0] >= 0.0);
  }
  SUBCASE("zero gradient leaves omega unchanged") {
    acc.accumulate(two_scalars(0, 0), two_scalars(0.3, -0.4));
    CHECK(acc.omega.flat()[0] == 0.0);
    CHECK(acc.omega.flat()[1] == 0.0);
  }
  SUBCASE("two steps accumulate additively") {
    acc.accumulate(two_scalars(1, 0), two_scalars(-0.1, 0));
    acc.accumulate(two_scalars(2, 0), two_scalars(-0.2, 0));
    CHECK(acc.omega.flat()[0] == doctest::Approx(0.1 + 0.4).epsilon(1e-15));
  }
}

TEST_CASE("si consolidation") {
  ParamVector start = two_scalars(0.0, 0.0);
  SiAccumulator acc = SiAccumulator::start(start, 0.1);

  SUBCASE("no movement and zero omega gives zero importance") {
    ImportanceMap map = acc.consolidate(start, 0.5);
    CHECK(map.weights.flat()[0] == 0.0);
    CHECK(map.strength == 0.5);
  }
  SUBCASE("hand arithmetic 0.1/0.11") {
    acc.omega.flat()[0] = 0.1;
    ImportanceMap map = acc.consolidate(two_scalars(0.1, 0.0), 0.5);
    CHECK(map.weights.flat()[0] == doctest::Approx(0.1 / 0.11).epsilon(1e-12));
  }
  SUBCASE("omega >= 0 implies importance >= 0") {
    acc.omega.flat()[0] = 0.3;
    acc.omega.flat()[1] = 0.0;
    ImportanceMap map = acc.consolidate(two_scalars(-0.2, 0.4), 0.5);
    for (double v : map.weights.flat()) CHECK(v >= 0.0);
  }
}

TEST_CASE("zero-epoch training leaves the model unchanged") {
  TaskDataset task = synth_task(64, 32, 51);
  Classifier c = Classifier::create(MlpSpec{}, 52);
  std::vector<double> before = c.params().to_flat();
  TrainHyper hyper;
  hyper.epochs = 0;
  hyper.fisher_samples = 32;
  TrainResult r = train_task(c, task, Method::ewc, {}, hyper, 53);
  CHECK(std::memcmp(before.data(), c.params().flat().data(), before.size() * sizeof(double)) == 0);
  REQUIRE(r.new_map.has_value());
  CHECK(std::memcmp(r.new_map->anchor.flat().data(), before.data(),
                    before.size() * sizeof(double)) == 0);
}

TEST_CASE("zero-strength ewc and si trajectories are bit-identical to sgd") {
  TaskDataset task = synth_task(512, 64, 54);
  TrainHyper hyper;
  hyper.epochs = 2;
  hyper.fisher_samples = 64;

  auto run = [&](Method m, std::span<const ImportanceMap> maps) {
    Classifier c = Classifier::create(MlpSpec{}, 55);
    train_task(c, task, m, maps, hyper, 56);
    return c.params().to_flat();
  };

  // zero-strength maps exercise the same code path decisions
  ImportanceMap zero_map;
  zero_map.weights = Classifier::create(MlpSpec{}, 55).params();
  zero_map.weights.fill(0.25);
  zero_map.anchor = zero_map.weights;
  zero_map.strength = 0.0;

  std::vector<double> sgd = run(Method::sgd, {});
  std::vector<double> ewc = run(Method::ewc, {&zero_map, 1});
  std::vector<double> si = run(Method::si, {&zero_map, 1});
  CHECK(std::memcmp(sgd.data(), ewc.data(), sgd.size() * sizeof(double)) == 0);
  CHECK(std::memcmp(sgd.data(), si.data(), sgd.size() * sizeof(double)) == 0);
}

TEST_CASE("training is deterministic under a fixed seed") {
  TaskDataset task = synth_task(512, 64, 57);
  TrainHyper hyper;
  hyper.epochs = 1;
  auto run = [&] {
    Classifier c = Classifier::create(MlpSpec{}, 58);
    train_task(c, task, Method::sgd, {}, hyper, 59);
    return c.params().to_flat();
  };
  std::vector<double> a = run(), b = run();
  CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
}

TEST_CASE("enormous lambda freezes earlier-task parameters") {
  // Two sequential tasks under lambda=1e6. Quadratic SGD is stable only while
  // lr * lambda * F < 2, so the second task trains at a step size derived
  // from the largest Fisher entry; important directions then barely move.
  LabeledImages base_train = make_synthetic_images(1500, 61, "train");
  LabeledImages base_test = make_synthetic_images(600, 61, "test");
  std::vector<TaskDataset> tasks = make_permuted_tasks(base_train, base_test, 2, 62);

  TrainHyper hyper;
  hyper.epochs = 2;
  hyper.fisher_samples = 500;
  hyper.ewc_lambda = 1e6;

  Classifier c = Classifier::create(MlpSpec{}, 63);
  std::vector<ImportanceMap> maps;
  TrainResult r1 = train_task(c, tasks[0], Method::ewc, maps, hyper, 64);
  maps.push_back(std::move(*r1.new_map));
  double before = c.accuracy(tasks[0].test);

  double max_fisher = 0.0;
  for (double v : maps[0].weights.flat()) max_fisher = std::max(max_fisher, v);
  TrainHyper second = hyper;
  second.epochs = 4;
  second.lr = 1.0 / (hyper.ewc_lambda * max_fisher);

  train_task(c, tasks[1], Method::ewc, maps, second, 65);
  double after = c.accuracy(tasks[0].test);
  CHECK(after > before - 0.01);
}

TEST_CASE("divergence guard names the failing step") {
  TaskDataset task = synth_task(256, 32, 66);
  TrainHyper hyper;
  hyper.epochs = 2;  // the post-explosion forward happens in the second step
  hyper.lr = 1e200;  // overflow to inf, then inf - inf in the next forward
  Classifier c = Classifier::create(MlpSpec{}, 67);
  try {
    train_task(c, task, Method::sgd, {}, hyper, 68);
    FAIL("expected numeric error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::numeric);
    CHECK(std::string(e.what()).find("step") != std::string::npos);
  }
}
