#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>

#include "continual.hpp"
#include "model.hpp"
#include "oracle.hpp"
#include "synth.hpp"

using namespace clp;
using namespace clp::test;

TEST_CASE("zero final layer gives a uniform softmax for any input") {
  Classifier c = Classifier::create(MlpSpec{}, 1);
  for (const char* name : {"fc3.w", "fc3.b"}) {
    auto d = c.params().segment_data(c.params().find(name));
    std::fill(d.begin(), d.end(), 0.0);
  }
  Rng rng(2);
  Tensor x = random_tensor({4, 1, 28, 28}, rng, 0.0, 1.0);
  Tensor s = softmax(c.forward(x), 1);
  for (int64_t i = 0; i < s.size(); ++i) CHECK(s.data()[i] == doctest::Approx(0.1).epsilon(1e-12));
}

TEST_CASE("permuting the batch permutes logits rows identically") {
  Classifier c = Classifier::create(MlpSpec{}, 3);
  Rng rng(4);
  Tensor x = random_tensor({3, 1, 28, 28}, rng, 0.0, 1.0);
  Tensor logits = c.forward(x);

  // swap rows 0 and 2
  Tensor swapped(x.shape());
  int64_t px = 784;
  std::memcpy(swapped.data(), x.data() + 2 * px, sizeof(double) * px);
  std::memcpy(swapped.data() + px, x.data() + px, sizeof(double) * px);
  std::memcpy(swapped.data() + 2 * px, x.data(), sizeof(double) * px);
  Tensor logits2 = c.forward(swapped);
  for (int j = 0; j < 10; ++j) {
    CHECK(logits2.data()[j] == logits.data()[2 * 10 + j]);
    CHECK(logits2.data()[2 * 10 + j] == logits.data()[j]);
  }
}

TEST_CASE("classifier shape mismatch is a dimension error") {
  Classifier c = Classifier::create(MlpSpec{}, 3);
  CHECK_THROWS_AS(c.forward(Tensor(Shape{2, 100})), Error);
}

TEST_CASE("one epoch on the synthetic task reaches 0.9 accuracy") {
  LabeledImages train = make_synthetic_images(10000, 21, "train");
  LabeledImages test = make_synthetic_images(2000, 21, "test");
  Classifier c = Classifier::create(MlpSpec{}, 5);
  TaskDataset task;
  task.task_id = 1;
  task.train = train;
  task.test = test;
  TrainHyper hyper;
  hyper.epochs = 1;
  train_task(c, task, Method::sgd, {}, hyper, 11);
  CHECK(c.accuracy(test) > 0.9);
}

TEST_CASE("attack noise is zero when the output layer is zeroed") {
  AttackModel a = AttackModel::create(0.2, 9);
  a.zero_output_layer();
  Rng rng(10);
  Tensor x = random_tensor({2, 1, 28, 28}, rng, 0.0, 1.0);
  Tensor noise = a.forward(x);
  REQUIRE(noise.shape() == x.shape());
  for (int64_t i = 0; i < noise.size(); ++i) CHECK(noise.data()[i] == 0.0);
}

TEST_CASE("attack noise respects the eps bound") {
  Rng rng(12);
  Tensor x = random_tensor({4, 1, 28, 28}, rng, 0.0, 1.0);

  AttackModel a = AttackModel::create(0.2, 11);
  Tensor noise = a.forward(x);
  double m = 0.0;
  for (int64_t i = 0; i < noise.size(); ++i) m = std::max(m, std::abs(noise.data()[i]));
  CHECK(m < 0.2);  // strict for any non-saturated parameters

  // tanh saturates to exactly 1.0 in doubles; even then the bound holds
  for (double& v : a.params().flat()) v *= 50.0;
  Tensor hot = a.forward(x);
  double mh = 0.0;
  for (int64_t i = 0; i < hot.size(); ++i) mh = std::max(mh, std::abs(hot.data()[i]));
  CHECK(mh <= 0.2);
}

TEST_CASE("attack model gradient w.r.t. xi matches finite differences") {
  AttackModel a = AttackModel::create(0.2, 13);
  Rng rng(14);
  Tensor x = random_tensor({2, 1, 28, 28}, rng, 0.0, 1.0);
  Tensor mix = random_tensor({2, 1, 28, 28}, rng);

  Graph g;
  std::vector<Tensor> xi = attach(g, a.params());
  Tensor loss = sum(mul(a.forward(g, xi, x), mix.detached()));
  std::vector<Tensor> grads = g.gradient(loss, xi);

  // probe a few random coordinates of each segment (full FD would be huge)
  int checked = 0;
  double worst = 0.0;
  for (int s = 0; s < a.params().segment_count(); ++s) {
    auto seg = a.params().segment_data(s);
    for (int probe = 0; probe < 3; ++probe) {
      size_t i = static_cast<size_t>(rng.below(seg.size()));
      double orig = seg[i];
      double h = 1e-5;
      seg[i] = orig + h;
      double fp = [&] {
        NoRecordGuard guard;
        Graph g2;
        return sum(mul(a.forward(g2, a.params().tensors(), x), mix.detached())).item();
      }();
      seg[i] = orig - h;
      double fm = [&] {
        NoRecordGuard guard;
        Graph g2;
        return sum(mul(a.forward(g2, a.params().tensors(), x), mix.detached())).item();
      }();
      seg[i] = orig;
      double numeric = (fp - fm) / (2 * h);
      double analytic = grads[static_cast<size_t>(s)].data()[i];
      worst = std::max(worst, std::abs(analytic - numeric) / std::max(1e-6, std::abs(numeric)));
      ++checked;
    }
  }
  CHECK(checked == 3 * a.params().segment_count());
  CHECK(worst < 1e-4);
}

TEST_CASE("apply_poison clips at the pixel range") {
  Tensor x(Shape{1, 1, 1, 3}, {0.0, 0.5, 1.0});
  Tensor noise(Shape{1, 1, 1, 3}, {-0.2, 0.1, 0.2});
  Tensor out = apply_poison(x, noise);
  CHECK(out.data()[0] == 0.0);
  CHECK(out.data()[1] == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(out.data()[2] == 1.0);

  Tensor zero(Shape{1, 1, 1, 3}, {0.0, 0.0, 0.0});
  Tensor same = apply_poison(x, zero);
  for (int i = 0; i < 3; ++i) CHECK(same.data()[i] == x.data()[i]);

  CHECK_THROWS_AS(apply_poison(x, Tensor(Shape{1, 1, 1, 2})), Error);
}

TEST_CASE("poison stays within the eps bound after clipping") {
  AttackModel a = AttackModel::create(0.2, 15);
  Rng rng(16);
  Tensor x = random_tensor({8, 1, 28, 28}, rng, 0.0, 1.0);
  Tensor noise = a.forward(x);
  Tensor poisoned = apply_poison(x, noise);
  double m = 0.0;
  for (int64_t i = 0; i < x.size(); ++i) m = std::max(m, std::abs(poisoned.data()[i] - x.data()[i]));
  CHECK(m <= 0.2);
}

TEST_CASE("classifier snapshots are deep copies") {
  LabeledImages train = make_synthetic_images(512, 22, "train");
  TaskDataset task;
  task.task_id = 1;
  task.train = train;
  task.test = train;
  Classifier c = Classifier::create(MlpSpec{}, 17);
  Classifier snap = c.snapshot();
  std::vector<double> before = snap.params().to_flat();
  TrainHyper hyper;
  hyper.epochs = 1;
  train_task(c, task, Method::sgd, {}, hyper, 18);
  CHECK(std::memcmp(before.data(), snap.params().flat().data(),
                    before.size() * sizeof(double)) == 0);
  CHECK(std::memcmp(before.data(), c.params().flat().data(), before.size() * sizeof(double)) != 0);
}

TEST_CASE("checkpoints round trip bit-exactly") {
  namespace fs = std::filesystem;
  std::string path = (fs::temp_directory_path() / "clp_ckpt_test.bin").string();
  AttackModel a = AttackModel::create(0.2, 19);
  save_checkpoint(path, a.params(), "attack");
  std::string kind;
  ParamVector p = load_checkpoint(path, &kind);
  CHECK(kind == "attack");
  REQUIRE(p.same_layout(a.params()));
  CHECK(std::memcmp(p.flat().data(), a.params().flat().data(),
                    static_cast<size_t>(p.size()) * sizeof(double)) == 0);

  SUBCASE("corrupt magic is rejected") {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.write("XX", 2);
    f.close();
    CHECK_THROWS_AS(load_checkpoint(path), Error);
  }
}
