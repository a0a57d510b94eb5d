#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "oracle.hpp"
#include "tensor.hpp"

using namespace clp;
using namespace clp::test;

TEST_CASE("matmul values") {
  Tensor eye(Shape{2, 2}, {1, 0, 0, 1});
  Tensor a(Shape{2, 2}, {1, 2, 3, 4});
  Tensor out = matmul(eye, a);
  for (int i = 0; i < 4; ++i) CHECK(out.data()[i] == a.data()[i]);

  Tensor row(Shape{1, 2}, {1, 2});
  Tensor col(Shape{2, 1}, {3, 4});
  CHECK(matmul(row, col).item() == doctest::Approx(11.0).epsilon(1e-12));
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tensor a(Shape{2, 3});
  Tensor b(Shape{2, 3});
  try {
    matmul(a, b);
    FAIL("expected dimension error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::invalid_argument);
    CHECK(std::string(e.what()).find("[2x3]") != std::string::npos);
  }
}

TEST_CASE("matmul gradients match finite differences") {
  Rng rng(11);
  Tensor a = random_tensor({3, 3}, rng);
  Tensor b = random_tensor({3, 3}, rng);
  auto build = [](Graph&, std::vector<Tensor>& in) { return sum(matmul(in[0], in[1])); };
  CHECK(gradcheck(build, {a, b}, 0) < 1e-6);
  CHECK(gradcheck(build, {a, b}, 1) < 1e-6);
}

TEST_CASE("conv2d identity and sum kernels") {
  Tensor x(Shape{1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  Tensor k(Shape{1, 1, 1, 1}, {1.0});
  Tensor out = conv2d(x, k, 1, 0);
  REQUIRE(out.shape() == Shape{1, 3, 3});
  for (int i = 0; i < 9; ++i) CHECK(out.data()[i] == x.data()[i]);

  Tensor ones(Shape{1, 2, 2}, {1, 1, 1, 1});
  Tensor ksum(Shape{1, 1, 2, 2}, {1, 1, 1, 1});
  Tensor s = conv2d(ones, ksum, 1, 0);
  REQUIRE(s.shape() == Shape{1, 1, 1});
  CHECK(s.item() == doctest::Approx(4.0).epsilon(1e-12));
}

TEST_CASE("conv2d parameter errors") {
  Tensor x(Shape{1, 1, 4, 4});
  Tensor k(Shape{1, 1, 2, 2});
  CHECK_THROWS_AS(conv2d(x, k, 0, 0), Error);
  CHECK_THROWS_AS(conv2d(x, k, 1, -1), Error);
  Tensor small(Shape{1, 1, 2, 2});
  Tensor big(Shape{1, 1, 3, 3});
  CHECK_THROWS_AS(conv2d(small, big, 1, 0), Error);
}

TEST_CASE("conv2d gradients match finite differences") {
  Rng rng(12);
  Tensor x = random_tensor({1, 2, 4, 4}, rng);
  Tensor k = random_tensor({3, 2, 2, 2}, rng);
  Tensor w = random_tensor({1, 3, 3, 3}, rng);  // fixed mixing weights, stride 2 pad 1
  auto build = [&](Graph&, std::vector<Tensor>& in) {
    return sum(mul(conv2d(in[0], in[1], ConvGeom{2, 2, 1, 1, 1, 1}), w.detached()));
  };
  CHECK(gradcheck(build, {x, k}, 0) < 1e-6);
  CHECK(gradcheck(build, {x, k}, 1) < 1e-6);
}

TEST_CASE("activation values") {
  Tensor z(Shape{2}, {0.0, 0.0});
  Tensor s = softmax(z, 0);
  CHECK(s.data()[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(s.data()[1] == doctest::Approx(0.5).epsilon(1e-12));

  CHECK(tanh(Tensor::scalar(0.0)).item() == 0.0);
  CHECK(relu(Tensor::scalar(-1.0)).item() == 0.0);

  Tensor big(Shape{2}, {1000.0, 1000.0});
  Tensor sb = softmax(big, 0);
  CHECK(std::isfinite(sb.data()[0]));
  CHECK(sb.data()[0] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one") {
  Rng rng(13);
  Tensor x = random_tensor({5, 7}, rng, -30.0, 30.0);
  Tensor s = softmax(x, 1);
  for (int i = 0; i < 5; ++i) {
    double rowsum = 0;
    for (int j = 0; j < 7; ++j) rowsum += s.data()[i * 7 + j];
    CHECK(std::abs(rowsum - 1.0) < 1e-12);
  }
}

TEST_CASE("log_softmax gather equals negative per-sample cross entropy") {
  Rng rng(14);
  Tensor x = random_tensor({4, 5}, rng, -3.0, 3.0);
  std::vector<int32_t> labels{0, 2, 4, 1};
  double ce = cross_entropy(x, labels).item();
  Tensor picked = gather_rows(log_softmax(x, 1), labels);
  double mean_ll = 0;
  for (int i = 0; i < 4; ++i) mean_ll += picked.data()[i];
  mean_ll /= 4.0;
  CHECK(ce == doctest::Approx(-mean_ll).epsilon(1e-14));
}

TEST_CASE("cross entropy values") {
  Tensor uniform(Shape{1, 2}, {0.0, 0.0});
  CHECK(cross_entropy(uniform, {0}).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  Tensor confident(Shape{1, 2}, {10.0, -10.0});
  double expected = std::log1p(std::exp(-20.0));
  CHECK(std::abs(cross_entropy(confident, {0}).item() - expected) < 1e-12);
}

TEST_CASE("cross entropy rejects out-of-range labels with the batch index") {
  Tensor logits(Shape{3, 4});
  try {
    cross_entropy(logits, {0, 7, 1});
    FAIL("expected data error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::data);
    CHECK(std::string(e.what()).find("batch index 1") != std::string::npos);
  }
}

TEST_CASE("cross entropy gradient matches finite differences") {
  Rng rng(15);
  Tensor logits = random_tensor({4, 3}, rng, -2.0, 2.0);
  std::vector<int32_t> labels{0, 2, 1, 1};
  auto build = [&](Graph&, std::vector<Tensor>& in) { return cross_entropy(in[0], labels); };
  CHECK(gradcheck(build, {logits}, 0) < 1e-6);
}

TEST_CASE("kl divergence values") {
  Tensor p(Shape{2, 3}, {0.2, 0.3, 0.5, 0.6, 0.1, 0.3});
  CHECK(kl_divergence(p, p).item() == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(std::abs(kl_divergence(p, p).item()) < 1e-12);

  Tensor point(Shape{1, 2}, {1.0, 0.0});
  Tensor half(Shape{1, 2}, {0.5, 0.5});
  CHECK(kl_divergence(point, half).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("kl divergence rejects non-normalized rows") {
  Tensor p(Shape{1, 2}, {0.9, 0.3});
  Tensor q(Shape{1, 2}, {0.5, 0.5});
  CHECK_THROWS_AS(kl_divergence(p, q), Error);
  CHECK_THROWS_AS(kl_divergence(q, p), Error);
}

TEST_CASE("kl divergence is nonnegative") {
  Rng rng(16);
  for (int trial = 0; trial < 10; ++trial) {
    auto draw = [&] {
      Tensor t(Shape{3, 4});
      for (int i = 0; i < 3; ++i) {
        double s = 0;
        for (int j = 0; j < 4; ++j) {
          t.data()[i * 4 + j] = rng.uniform(0.05, 1.0);
          s += t.data()[i * 4 + j];
        }
        for (int j = 0; j < 4; ++j) t.data()[i * 4 + j] /= s;
      }
      return t;
    };
    CHECK(kl_divergence(draw(), draw()).item() >= -1e-15);
  }
}

TEST_CASE("kl divergence gradient w.r.t. q-producing logits") {
  Rng rng(17);
  Tensor p(Shape{2, 3}, {0.2, 0.3, 0.5, 0.25, 0.5, 0.25});
  Tensor logits = random_tensor({2, 3}, rng, -1.0, 1.0);
  auto build = [&](Graph&, std::vector<Tensor>& in) {
    return kl_divergence(p.detached(), softmax(in[0], 1));
  };
  CHECK(gradcheck(build, {logits}, 0) < 1e-6);
}

TEST_CASE("backward basics") {
  Graph g;
  Tensor theta = g.leaf(Tensor(Shape{5}, {1, 2, 3, 4, 5}));
  Tensor loss = sum(theta);
  std::vector<Tensor> grads = g.gradient(loss, {&theta, 1});
  for (int i = 0; i < 5; ++i) CHECK(grads[0].data()[i] == 1.0);

  Graph g2;
  Tensor t2 = g2.leaf(Tensor(Shape{3}, {1, 2, 3}));
  Tensor l2 = sum(mul(t2, t2));
  std::vector<Tensor> gr2 = g2.gradient(l2, {&t2, 1});
  CHECK(gr2[0].data()[0] == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(gr2[0].data()[1] == doctest::Approx(4.0).epsilon(1e-15));
  CHECK(gr2[0].data()[2] == doctest::Approx(6.0).epsilon(1e-15));
}

TEST_CASE("disconnected parameters receive zero gradient") {
  Graph g;
  Tensor used = g.leaf(Tensor(Shape{2}, {1, 2}));
  Tensor unused = g.leaf(Tensor(Shape{3}, {1, 2, 3}));
  Tensor loss = sum(used);
  std::vector<Tensor> grads = g.gradient(loss, {&unused, 1});
  for (int i = 0; i < 3; ++i) CHECK(grads[0].data()[i] == 0.0);
}

TEST_CASE("backward rejects non-scalar losses") {
  Graph g;
  Tensor x = g.leaf(Tensor(Shape{3}, {1, 2, 3}));
  Tensor y = mul(x, x);
  CHECK_THROWS_AS(g.gradient(y, {&x, 1}), Error);
}

TEST_CASE("detached tensors act as constants") {
  Graph g;
  Tensor x = g.leaf(Tensor(Shape{2}, {1, 2}));
  Tensor c(Shape{2}, {3, 4});  // never attached
  Tensor loss = sum(mul(x, c));
  std::vector<Tensor> grads = g.gradient(loss, {&x, 1});
  CHECK(grads[0].data()[0] == 3.0);
  CHECK(grads[0].data()[1] == 4.0);
  // gradient "through" the constant is zero by definition
  std::vector<Tensor> gc = g.gradient(loss, {&c, 1});
  CHECK(gc[0].data()[0] == 0.0);
  CHECK(!mul(c, c).attached());
}

TEST_CASE("fan-out gradients accumulate exactly") {
  Tensor x0(Shape{4}, {0.5, -1.5, 2.0, 3.0});

  Graph g;
  Tensor x = g.leaf(x0);
  Tensor loss = add(sum(mul(x, x)), sum(scale(x, 3.0)));
  std::vector<Tensor> grads = g.gradient(loss, {&x, 1});

  Graph ga;
  Tensor xa = ga.leaf(x0);
  std::vector<Tensor> g1 = ga.gradient(sum(mul(xa, xa)), {&xa, 1});
  Graph gb;
  Tensor xb = gb.leaf(x0);
  std::vector<Tensor> g2 = gb.gradient(sum(scale(xb, 3.0)), {&xb, 1});

  for (int i = 0; i < 4; ++i)
    CHECK(grads[0].data()[i] == g1[0].data()[i] + g2[0].data()[i]);
}

TEST_CASE("backward is bit-deterministic") {
  Rng rng(18);
  Tensor a = random_tensor({6, 6}, rng);
  Tensor b = random_tensor({6, 6}, rng);
  auto run = [&] {
    Graph g;
    Tensor at = g.leaf(a), bt = g.leaf(b);
    Tensor loss = sum(tanh(matmul(at, bt)));
    std::vector<Tensor> grads = g.gradient(loss, {&at, 1});
    return tensor_values(grads[0]);
  };
  std::vector<double> r1 = run(), r2 = run();
  CHECK(std::memcmp(r1.data(), r2.data(), r1.size() * sizeof(double)) == 0);
}

// one finite-difference check per differentiable primitive
TEST_CASE("per-op gradients match finite differences") {
  Rng rng(19);
  struct Case {
    const char* name;
    LossBuilder build;
    std::vector<Tensor> inputs;
    size_t wrt;
  };
  Tensor w24 = random_tensor({2, 4}, rng);
  Tensor w42 = random_tensor({4, 2}, rng);
  Tensor w4 = random_tensor({4}, rng);
  Tensor w14 = random_tensor({1, 4}, rng);
  Tensor pos = random_tensor({2, 4}, rng, 0.2, 1.5);
  Tensor far = random_tensor({2, 4}, rng, 0.2, 1.5);  // away from relu kink
  Tensor chan = random_tensor({2, 3, 4, 4}, rng);
  Tensor chan_w = random_tensor({2, 3, 4, 4}, rng);
  Tensor bias3 = random_tensor({3}, rng);
  Tensor up_w = random_tensor({2, 3, 8, 8}, rng);
  Tensor lab24 = random_tensor({2, 1}, rng);

  std::vector<Case> cases;
  auto with_weights = [&](Tensor weights, auto op) {
    return [weights, op](Graph& g, std::vector<Tensor>& in) {
      return sum(mul(op(g, in), weights.detached()));
    };
  };
  cases.push_back({"add", with_weights(w24, [](Graph&, std::vector<Tensor>& in) {
                     return add(in[0], in[1]);
                   }),
                   {random_tensor({2, 4}, rng), random_tensor({2, 4}, rng)}, 0});
  cases.push_back({"sub", with_weights(w24, [](Graph&, std::vector<Tensor>& in) {
                     return sub(in[0], in[1]);
                   }),
                   {random_tensor({2, 4}, rng), random_tensor({2, 4}, rng)}, 1});
  cases.push_back({"mul", with_weights(w24, [](Graph&, std::vector<Tensor>& in) {
                     return mul(in[0], in[1]);
                   }),
                   {random_tensor({2, 4}, rng), random_tensor({2, 4}, rng)}, 0});
  cases.push_back({"div", with_weights(w24, [](Graph&, std::vector<Tensor>& in) {
                     return div(in[0], in[1]);
                   }),
                   {random_tensor({2, 4}, rng), pos}, 1});
  cases.push_back({"neg", with_weights(w24, [](Graph&, std::vector<Tensor>& in) {
                     return neg(in[0]);
                   }),
                   {random_tensor({2, 4}, rng)}, 0});
  cases.push_back({"exp", with_weights(w24, [](Graph&, std::vector<Tensor>& in) {
                     return exp(in[0]);
                   }),
                   {random_tensor({2, 4}, rng)}, 0});
  cases.push_back({"log", with_weights(w24, [](Graph&, std::vector<Tensor>& in) {
                     return log(in[0]);
                   }),
                   {pos}, 0});
  cases.push_back({"xlogx", with_weights(w24, [](Graph&, std::vector<Tensor>& in) {
                     return xlogx(in[0]);
                   }),
                   {pos}, 0});
  cases.push_back({"xlogy-a", with_weights(w24, [](Graph&, std::vector<Tensor>& in) {
                     return xlogy(in[0], in[1]);
                   }),
                   {pos, far}, 0});
  cases.push_back({"xlogy-b", with_weights(w24, [](Graph&, std::vector<Tensor>& in) {
                     return xlogy(in[0], in[1]);
                   }),
                   {pos, far}, 1});
  cases.push_back({"relu", with_weights(w24, [](Graph&, std::vector<Tensor>& in) {
                     return relu(in[0]);
                   }),
                   {far}, 0});
  cases.push_back({"tanh", with_weights(w24, [](Graph&, std::vector<Tensor>& in) {
                     return tanh(in[0]);
                   }),
                   {random_tensor({2, 4}, rng)}, 0});
  cases.push_back({"scale", with_weights(w24, [](Graph&, std::vector<Tensor>& in) {
                     return scale(in[0], -1.7);
                   }),
                   {random_tensor({2, 4}, rng)}, 0});
  cases.push_back({"smul-a", with_weights(w24, [](Graph&, std::vector<Tensor>& in) {
                     return smul(in[0], in[1]);
                   }),
                   {random_tensor({2, 4}, rng), Tensor::scalar(1.3)}, 0});
  cases.push_back({"smul-s", with_weights(w24, [](Graph&, std::vector<Tensor>& in) {
                     return smul(in[0], in[1]);
                   }),
                   {random_tensor({2, 4}, rng), Tensor::scalar(1.3)}, 1});
  cases.push_back({"mean", [](Graph&, std::vector<Tensor>& in) { return mean(in[0]); },
                   {random_tensor({2, 4}, rng)}, 0});
  cases.push_back({"transpose", with_weights(w42, [](Graph&, std::vector<Tensor>& in) {
                     return transpose(in[0]);
                   }),
                   {random_tensor({2, 4}, rng)}, 0});
  cases.push_back({"reshape", with_weights(w42, [](Graph&, std::vector<Tensor>& in) {
                     return reshape(in[0], Shape{4, 2});
                   }),
                   {random_tensor({2, 4}, rng)}, 0});
  cases.push_back({"row_sum", with_weights(lab24, [](Graph&, std::vector<Tensor>& in) {
                     return row_sum(in[0]);
                   }),
                   {random_tensor({2, 4}, rng)}, 0});
  cases.push_back({"col_sum", with_weights(w4, [](Graph&, std::vector<Tensor>& in) {
                     return col_sum(in[0]);
                   }),
                   {random_tensor({2, 4}, rng)}, 0});
  cases.push_back({"broadcast_col", with_weights(w24, [](Graph&, std::vector<Tensor>& in) {
                     return broadcast_col(in[0], 4);
                   }),
                   {random_tensor({2, 1}, rng)}, 0});
  cases.push_back({"broadcast_row", with_weights(w14, [](Graph&, std::vector<Tensor>& in) {
                     return broadcast_row(in[0], 1);
                   }),
                   {random_tensor({4}, rng)}, 0});
  cases.push_back({"bias_add-x", with_weights(w24, [](Graph&, std::vector<Tensor>& in) {
                     return bias_add(in[0], in[1]);
                   }),
                   {random_tensor({2, 4}, rng), w4}, 0});
  cases.push_back({"bias_add-b", with_weights(w24, [](Graph&, std::vector<Tensor>& in) {
                     return bias_add(in[0], in[1]);
                   }),
                   {random_tensor({2, 4}, rng), w4}, 1});
  cases.push_back({"bias_add_chan-b", with_weights(chan_w, [](Graph&, std::vector<Tensor>& in) {
                     return bias_add_chan(in[0], in[1]);
                   }),
                   {chan, bias3}, 1});
  cases.push_back({"softmax", with_weights(w24, [](Graph&, std::vector<Tensor>& in) {
                     return softmax(in[0], 1);
                   }),
                   {random_tensor({2, 4}, rng)}, 0});
  cases.push_back({"log_softmax", with_weights(w24, [](Graph&, std::vector<Tensor>& in) {
                     return log_softmax(in[0], 1);
                   }),
                   {random_tensor({2, 4}, rng)}, 0});
  cases.push_back({"gather_rows", with_weights(lab24, [](Graph&, std::vector<Tensor>& in) {
                     return gather_rows(in[0], {1, 3});
                   }),
                   {random_tensor({2, 4}, rng)}, 0});
  cases.push_back({"scatter_rows", with_weights(w24, [](Graph&, std::vector<Tensor>& in) {
                     return scatter_rows(in[0], {2, 0}, 4);
                   }),
                   {random_tensor({2, 1}, rng)}, 0});
  cases.push_back({"upsample2", with_weights(up_w, [](Graph&, std::vector<Tensor>& in) {
                     return upsample2(in[0]);
                   }),
                   {random_tensor({2, 3, 4, 4}, rng)}, 0});
  cases.push_back({"pool2sum", with_weights(random_tensor({2, 3, 2, 2}, rng),
                                            [](Graph&, std::vector<Tensor>& in) {
                                              return pool2sum(in[0]);
                                            }),
                   {random_tensor({2, 3, 4, 4}, rng)}, 0});

  for (auto& c : cases) {
    INFO(c.name);
    CHECK(gradcheck(c.build, c.inputs, c.wrt) < 1e-4);
  }
}

TEST_CASE("pseudo-update closed forms") {
  // inner = (theta - xi)^2, outer = theta'^2
  auto inner = [](Graph&, std::span<const Tensor> th, std::span<const Tensor> xi) {
    Tensor d = sub(th[0], xi[0]);
    return mul(d, d);
  };
  auto outer = [](Graph&, std::span<const Tensor> tp) { return mul(tp[0], tp[0]); };

  Tensor theta = Tensor::scalar(1.0);

  SUBCASE("alpha 0 gives zero gradient") {
    Tensor xi = Tensor::scalar(0.7);
    std::vector<Tensor> g =
        grad_through_update({&theta, 1}, {&xi, 1}, inner, outer, 0.0);
    CHECK(g[0].item() == 0.0);
  }
  SUBCASE("theta'=0 point") {
    Tensor xi = Tensor::scalar(0.0);
    std::vector<Tensor> g =
        grad_through_update({&theta, 1}, {&xi, 1}, inner, outer, 0.5);
    CHECK(g[0].item() == doctest::Approx(0.0).epsilon(1e-12));
  }
  SUBCASE("nonzero closed form") {
    // theta' = theta - a*2(theta-xi); d outer/d xi = 2*theta' * 2a
    Tensor xi = Tensor::scalar(0.3);
    std::vector<Tensor> g =
        grad_through_update({&theta, 1}, {&xi, 1}, inner, outer, 0.5);
    CHECK(g[0].item() == doctest::Approx(0.6).epsilon(1e-12));
  }
  SUBCASE("first-order mode returns exact zeros") {
    Tensor xi = Tensor::scalar(0.3);
    std::vector<Tensor> g =
        grad_through_update({&theta, 1}, {&xi, 1}, inner, outer, 0.5, /*first_order=*/true);
    CHECK(g[0].item() == 0.0);
  }
  SUBCASE("inner loss independent of xi gives zeros") {
    auto inner_noxi = [](Graph&, std::span<const Tensor> th, std::span<const Tensor>) {
      return mul(th[0], th[0]);
    };
    Tensor xi = Tensor::scalar(0.3);
    std::vector<Tensor> g =
        grad_through_update({&theta, 1}, {&xi, 1}, inner_noxi, outer, 0.5);
    CHECK(g[0].item() == 0.0);
  }
}

TEST_CASE("pseudo-update gradient on a small MLP matches finite differences") {
  Rng rng(20);
  // victim: 4 -> 6 -> 2 MLP; xi perturbs the input additively through tanh
  Tensor w1 = random_tensor({4, 6}, rng, -0.5, 0.5);
  Tensor b1 = random_tensor({6}, rng, -0.1, 0.1);
  Tensor w2 = random_tensor({6, 2}, rng, -0.5, 0.5);
  Tensor b2 = random_tensor({2}, rng, -0.1, 0.1);
  Tensor x = random_tensor({3, 4}, rng, 0.0, 1.0);
  Tensor x_out = random_tensor({3, 4}, rng, 0.0, 1.0);
  std::vector<int32_t> y{0, 1, 0};
  std::vector<int32_t> y_out{1, 0, 1};
  Tensor xi0 = random_tensor({4, 4}, rng, -0.3, 0.3);
  double alpha = 0.2;

  auto forward = [&](std::span<const Tensor> th, const Tensor& input) {
    return bias_add(matmul(relu(bias_add(matmul(input, th[0]), th[1])), th[2]), th[3]);
  };
  auto inner = [&](Graph&, std::span<const Tensor> th, std::span<const Tensor> xi) {
    Tensor noise = tanh(matmul(x.detached(), xi[0]));
    return cross_entropy(forward(th, add(x.detached(), noise)), y);
  };
  auto outer = [&](Graph&, std::span<const Tensor> tp) {
    return cross_entropy(forward(tp, x_out.detached()), y_out);
  };

  std::vector<Tensor> theta{w1, b1, w2, b2};
  std::vector<Tensor> analytic =
      grad_through_update(theta, {&xi0, 1}, inner, outer, alpha);

  auto f = [&](const std::vector<double>& flat) {
    Tensor xi(Shape{4, 4}, flat);
    Graph g;
    std::vector<Tensor> th;
    for (const Tensor& t : theta) th.push_back(g.leaf(t));
    Tensor xit = g.leaf(xi);
    Tensor il = inner(g, th, {&xit, 1});
    std::vector<Tensor> tp = pseudo_update(g, th, il, alpha);
    Graph g2;  // outer value only needs the theta' values
    std::vector<Tensor> tpv;
    for (const Tensor& t : tp) tpv.push_back(g2.leaf(t.detached()));
    return outer(g2, tpv).item();
  };
  std::vector<double> numeric = finite_diff(f, tensor_values(xi0));
  CHECK(max_rel_err(tensor_values(analytic[0]), numeric) < 1e-4);
}

TEST_CASE("param vector round trips and layouts") {
  auto build = [] {
    ParamVector p;
    p.add_segment("a.w", Shape{3, 2});
    p.add_segment("a.b", Shape{2});
    return p;
  };
  ParamVector p = build();
  ParamVector q = build();
  CHECK(p.same_layout(q));
  CHECK(p.size() == 8);

  Rng rng(21);
  for (double& v : p.flat()) v = rng.uniform();
  std::vector<double> flat = p.to_flat();
  ParamVector r = build();
  r.from_flat(flat);
  CHECK(std::memcmp(r.flat().data(), p.flat().data(), 8 * sizeof(double)) == 0);

  CHECK(p.find("a.b") == 1);
  CHECK(p.find("missing") == -1);
  Tensor t = p.tensor(0);
  CHECK(t.shape() == Shape{3, 2});
}

TEST_CASE("operands from different graphs are rejected") {
  Graph g1, g2;
  Tensor a = g1.leaf(Tensor(Shape{2}, {1, 2}));
  Tensor b = g2.leaf(Tensor(Shape{2}, {3, 4}));
  CHECK_THROWS_AS(add(a, b), Error);
}
